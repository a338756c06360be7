use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{mean, moving_avg, time_phase, ExperimentConfig, ExperimentId, PhaseTime, Table, Tables};
use crate::dqn::{self, Agent, Environment, EpisodeRecord, ScEnv};
use crate::envgen::{self, GenConfig, Labeler, LabeledSample, Layout, NonStationaritySpec, PairUniverse};
use crate::error::{ensure, Error, Result};
use crate::nn::{presets, Activation, LossSpec, ModelSpec, TrainConfig};
use crate::optim::{self, Association, NetworkConfig, PowerAllocation, SystemModel};
use crate::pipeline::{self, Pipeline, Predictor, Regime, SampleStream, ServingMode, TracePoint};
use crate::row;

// Disjoint index ranges keep the splits of one seed from sharing channels.
const TRAIN_AT: u64 = 0;
const VAL_AT: u64 = 10_000_000;
const TEST_AT: u64 = 20_000_000;
const UNSEEN_AT: u64 = 30_000_000;
const INITIAL_AT: u64 = 40_000_000;

const RNG_SALT: u64 = 0xBE4C_0001;

/// Moving-average window of the DQN training curve.
const CURVE_WINDOW: usize = 100;

pub(super) fn run(cfg: &ExperimentConfig, seed: u64) -> Result<Tables> {
    let one = |name: &str, t: Table| Ok(vec![(name.to_string(), t)]);
    match cfg.id {
        ExperimentId::Cs1Subcarriers | ExperimentId::Cs1Trainsize | ExperimentId::Cs1Layers | ExperimentId::Cs1Nonstat => {
            one("cs1", cs1(cfg, seed)?)
        }
        ExperimentId::Ageing => ageing_tables(cfg, seed, &[ServingMode::Frozen, ServingMode::Offline]),
        ExperimentId::SemiOnline => ageing_tables(cfg, seed, &[ServingMode::Offline, ServingMode::SemiOnline]),
        ExperimentId::Cs2Nonstat => one("cs2_nonstat", cs2_nonstat(cfg, seed)?),
        ExperimentId::Cs2bUsers => one("cs2b_users", cs2b_users(cfg, seed)?),
        ExperimentId::DqnCurves => dqn_curves(cfg, seed)?.tables(),
        ExperimentId::Cs3Time => one("cs3_time", cs3_time(cfg, seed)?),
        ExperimentId::Cs3Rate => one("cs3_rate", cs3_rate(cfg, seed)?),
        ExperimentId::Cs3Cdf => cs3_cdf(cfg, seed)?.tables(),
    }
}

fn universe(cfg: &ExperimentConfig, n: usize) -> Result<PairUniverse> {
    PairUniverse::new(cfg.l_max.min(n), cfg.m_max)
}

fn train_cfg(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.train.clone() }
}

/// Generates `count` samples and, with a labeler, labels them. Unlabeled
/// failures are dropped; the time covers labeling only.
fn dataset(
    gen: &GenConfig,
    spec: &NonStationaritySpec,
    start: u64,
    count: usize,
    seed: u64,
    labeler: Option<Labeler>,
) -> Result<(Vec<LabeledSample>, Option<PhaseTime>)> {
    let mut samples = envgen::generate_samples(gen, spec, start, count, seed)?;
    let Some(labeler) = labeler else {
        return Ok((samples, None));
    };
    let report = envgen::label_dataset(&mut samples, labeler, gen, seed);
    if report.failures > 0 {
        log::warn!("{} of {count} samples failed to label with {labeler}", report.failures);
    }
    let samples = pipeline::labeled(&samples);
    ensure!(!samples.is_empty(), Runtime, "no sample could be labeled with {labeler}");
    Ok((samples, Some(PhaseTime { seconds: report.seconds, per_sample: report.per_sample })))
}

/// Supervised power loss with the configured violation weight.
fn power_loss(cfg: &ExperimentConfig, groups: usize) -> LossSpec {
    LossSpec::PowerViolation { beta: cfg.beta, p_max: 1.0, groups }
}

fn sm1_gen(cfg: &ExperimentConfig, n: usize) -> GenConfig {
    let net = NetworkConfig::new(1, 1, n).with_power(cfg.p_max, cfg.sigma2);
    GenConfig::new(SystemModel::Sm1, net).with_layout(Layout::Nearest)
}

/// One single-cell training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Sm1Point {
    pub n: usize,
    pub k: usize,
    pub train_size: usize,
    pub hidden_layers: usize,
    /// `R̄` on held-out samples of the training pairs.
    pub seen: f64,
    /// `R̄` on samples of every other universe pair.
    pub unseen: Option<f64>,
    pub label_time: PhaseTime,
    pub train_seconds: f64,
    pub predict_per_sample: Option<f64>,
}

/// Trains the single-cell power net on `k` pairs and scores it.
pub fn sm1_point(
    cfg: &ExperimentConfig,
    seed: u64,
    n: usize,
    k: usize,
    train_size: usize,
    hidden_layers: usize,
    with_unseen: bool,
) -> Result<Sm1Point> {
    let gen = sm1_gen(cfg, n);
    let spec = NonStationaritySpec::sample(&universe(cfg, n)?, k, seed)?;
    let labeler = Some(Labeler::Waterfill);
    let (train, label_time) = dataset(&gen, &spec, TRAIN_AT, train_size, seed, labeler)?;
    let (val, _) = dataset(&gen, &spec, VAL_AT, cfg.val_size, seed, labeler)?;
    let (test, _) = dataset(&gen, &spec, TEST_AT, cfg.test_size, seed, labeler)?;
    let arch = ModelSpec::mlp(n, &vec![cfg.hidden_width; hidden_layers], n, Activation::Relu, Activation::LeakyRelu);
    let (fit, t2) = time_phase(train.len(), || {
        pipeline::train_power_model(arch, &train, &val, &gen, &power_loss(cfg, 1), &train_cfg(cfg, seed))
    });
    let (predictor, _) = fit?;
    let seen = mean(&pipeline::relative_rates(&predictor, &test, &gen)?);
    let unseen = if with_unseen {
        let (other, _) = dataset(&gen, &spec.complement()?, UNSEEN_AT, cfg.test_size, seed, labeler)?;
        Some(mean(&pipeline::relative_rates(&predictor, &other, &gen)?))
    } else {
        None
    };
    Ok(Sm1Point {
        n,
        k,
        train_size,
        hidden_layers,
        seen,
        unseen,
        label_time: label_time.expect("labeled"),
        train_seconds: t2.seconds,
        predict_per_sample: pipeline::prediction_latency(&predictor, &test),
    })
}

/// Pre-projection violation frequency of single-cell nets trained on the
/// same data and initialization with each power-violation weight in `betas`.
pub fn sm1_violation(cfg: &ExperimentConfig, seed: u64, betas: &[f64]) -> Result<Vec<f64>> {
    let (n, k) = (cfg.subcarriers[0], cfg.k[0]);
    let gen = sm1_gen(cfg, n);
    let spec = NonStationaritySpec::sample(&universe(cfg, n)?, k, seed)?;
    let labeler = Some(Labeler::Waterfill);
    let (train, _) = dataset(&gen, &spec, TRAIN_AT, cfg.train_sizes[0], seed, labeler)?;
    let (val, _) = dataset(&gen, &spec, VAL_AT, cfg.val_size, seed, labeler)?;
    let (test, _) = dataset(&gen, &spec, TEST_AT, cfg.test_size, seed, labeler)?;
    let arch = ModelSpec::mlp(n, &vec![cfg.hidden_width; cfg.hidden_layers[0]], n, Activation::Relu, Activation::LeakyRelu);
    betas
        .iter()
        .map(|&beta| {
            let loss = LossSpec::PowerViolation { beta, p_max: 1.0, groups: 1 };
            let (p, _) = pipeline::train_power_model(arch.clone(), &train, &val, &gen, &loss, &train_cfg(cfg, seed))?;
            let totals = pipeline::raw_bs_totals(&p, &test, &gen.network)?;
            Ok(pipeline::violation_frequency(&totals, pipeline::VIOLATION_TOL))
        })
        .collect()
}

fn cs1(cfg: &ExperimentConfig, seed: u64) -> Result<Table> {
    let mut table = Table::new(&[
        "n",
        "k",
        "train_size",
        "hidden_layers",
        "seen_r_bar",
        "unseen_r_bar",
        "t1_s",
        "t1_per_sample_s",
        "t2_s",
        "t3_per_sample_s",
    ]);
    let (n0, k0, size0, layers0) = (cfg.subcarriers[0], cfg.k[0], cfg.train_sizes[0], cfg.hidden_layers[0]);
    let points: Vec<(usize, usize, usize, usize)> = match cfg.id {
        ExperimentId::Cs1Subcarriers => cfg.subcarriers.iter().map(|&n| (n, k0, size0, layers0)).collect(),
        ExperimentId::Cs1Trainsize => cfg.train_sizes.iter().map(|&s| (n0, k0, s, layers0)).collect(),
        ExperimentId::Cs1Layers => cfg.hidden_layers.iter().map(|&l| (n0, k0, size0, l)).collect(),
        _ => cfg.k.iter().map(|&k| (n0, k, size0, layers0)).collect(),
    };
    for (n, k, size, layers) in points {
        let p = sm1_point(cfg, seed, n, k, size, layers, cfg.id == ExperimentId::Cs1Nonstat)?;
        log::info!("{}: n={n} k={k} size={size} layers={layers} seen={:.2}", cfg.id, p.seen);
        table.push(row![
            n,
            k,
            size,
            layers,
            p.seen,
            p.unseen,
            p.label_time.seconds,
            p.label_time.per_sample,
            p.train_seconds,
            p.predict_per_sample
        ])?;
    }
    Ok(table)
}

/// Traces of the ageing stream under several serving modes.
#[derive(Debug, Clone)]
pub struct AgeingRun {
    pub shift_at: usize,
    pub window: usize,
    pub traces: Vec<(ServingMode, Vec<TracePoint>)>,
}

impl AgeingRun {
    pub fn trace(&self, mode: ServingMode) -> Option<&[TracePoint]> {
        self.traces.iter().find(|(m, _)| *m == mode).map(|(_, t)| t.as_slice())
    }

    /// Mean `R̂` over the window before the shift.
    pub fn pre_shift(&self, mode: ServingMode) -> f64 {
        self.trace(mode).map_or(f64::NAN, |t| {
            pipeline::trace_mean(t, self.shift_at.saturating_sub(self.window)..self.shift_at)
        })
    }

    /// Mean `R̂` from the shift to the end of the stream.
    pub fn post_shift(&self, mode: ServingMode) -> f64 {
        self.trace(mode).map_or(f64::NAN, |t| pipeline::trace_mean(t, self.shift_at..t.len()))
    }

    /// Mean `R̂` over the last window of the stream.
    pub fn plateau(&self, mode: ServingMode) -> f64 {
        self.trace(mode).map_or(f64::NAN, |t| pipeline::trace_mean(t, t.len().saturating_sub(self.window)..t.len()))
    }

    pub fn zero_run(&self, mode: ServingMode) -> usize {
        self.trace(mode).map_or(0, pipeline::longest_zero_run)
    }
}

/// Trains on the stationary regime, then serves the stream that shifts to
/// the mobile regime under each mode in `modes`.
pub fn ageing_traces(cfg: &ExperimentConfig, seed: u64, modes: &[ServingMode]) -> Result<AgeingRun> {
    let n = cfg.subcarriers[0];
    let uni = universe(cfg, n)?;
    let mut stationary = sm1_gen(cfg, n);
    stationary.geometry.resample = false;
    let mut mobile = stationary.clone();
    mobile.geometry.resample = true;
    let before = Regime { gen: stationary, spec: NonStationaritySpec::fixed(&uni, cfg.stream.stationary_pair)? };
    let after = Regime { gen: mobile, spec: NonStationaritySpec::sample(&uni, cfg.k[0], seed)? };

    let labeler = Some(Labeler::Waterfill);
    let (train, _) = dataset(&before.gen, &before.spec, INITIAL_AT, cfg.train_sizes[0], seed, labeler)?;
    let (val, _) = dataset(&before.gen, &before.spec, INITIAL_AT + VAL_AT, cfg.val_size, seed, labeler)?;
    let arch = ModelSpec::mlp(n, &vec![cfg.hidden_width; cfg.hidden_layers[0]], n, Activation::Relu, Activation::LeakyRelu);
    let (initial, _) = pipeline::train_power_model(arch, &train, &val, &before.gen, &power_loss(cfg, 1), &train_cfg(cfg, seed))?;

    let stream = SampleStream::new(before, after, cfg.stream.shift_at, cfg.stream.len, seed)?;
    let semi = pipeline::SemiOnlineConfig { train: TrainConfig { seed, ..cfg.semi_online.train.clone() }, ..cfg.semi_online.clone() };
    let mut traces = Vec::new();
    for &mode in modes {
        let trace = pipeline::semi_online_run(&stream, &initial, mode, &semi)?;
        log::info!("ageing {}: longest zero run {}", mode.id(), pipeline::longest_zero_run(&trace));
        traces.push((mode, trace));
    }
    Ok(AgeingRun { shift_at: cfg.stream.shift_at, window: semi.window, traces })
}

fn ageing_tables(cfg: &ExperimentConfig, seed: u64, modes: &[ServingMode]) -> Result<Tables> {
    let run = ageing_traces(cfg, seed, modes)?;
    let mut trace = Table::new(&["t", "R_hat", "R_bar", "mode", "snapshot_id", "retraining"]);
    let mut summary = Table::new(&["mode", "pre_shift_r_bar", "post_shift_mean", "plateau_r_bar", "longest_zero_run", "snapshots"]);
    for (mode, points) in &run.traces {
        for p in points {
            trace.push(row![p.t, p.r_hat, p.r_bar, mode.id(), p.snapshot_id, p.retraining])?;
        }
        summary.push(row![
            mode.id(),
            run.pre_shift(*mode),
            run.post_shift(*mode),
            run.plateau(*mode),
            run.zero_run(*mode),
            points.last().map_or(0, |p| p.snapshot_id)
        ])?;
    }
    Ok(vec![("trace".into(), trace), ("summary".into(), summary)])
}

fn cs2_nonstat(cfg: &ExperimentConfig, seed: u64) -> Result<Table> {
    let (u, n) = (cfg.users[0], cfg.subcarriers[0]);
    let net = NetworkConfig::new(1, u, n).with_power(cfg.p_max, cfg.sigma2);
    let gen = GenConfig::new(SystemModel::Sm2a, net).with_layout(Layout::Nearest);
    let uni = universe(cfg, n)?;
    let labeler = Some(Labeler::GreedyWaterfill);
    let mut table = Table::new(&["users", "n", "k", "seen_r_bar", "unseen_r_bar", "t2_s"]);
    for &k in &cfg.k {
        let spec = NonStationaritySpec::sample(&uni, k, seed)?;
        let (train, _) = dataset(&gen, &spec, TRAIN_AT, cfg.train_sizes[0], seed, labeler)?;
        let (val, _) = dataset(&gen, &spec, VAL_AT, cfg.val_size, seed, labeler)?;
        let (test, _) = dataset(&gen, &spec, TEST_AT, cfg.test_size, seed, labeler)?;
        let (other, _) = dataset(&gen, &spec.complement()?, UNSEEN_AT, cfg.test_size, seed, labeler)?;
        let (fit, t2) = time_phase(train.len(), || {
            Pipeline::train(&train, &val, &gen, presets::model_a(u, n), presets::model_b(n), &power_loss(cfg, 1), &train_cfg(cfg, seed))
        });
        let (pipe, _, _) = fit?;
        let seen = mean(&pipe.relative_rates(&test, &gen)?);
        let unseen = mean(&pipe.relative_rates(&other, &gen)?);
        table.push(row![u, n, k, seen, unseen, t2.seconds])?;
    }
    Ok(table)
}

fn sm2b_gen(cfg: &ExperimentConfig, b: usize) -> GenConfig {
    let net = NetworkConfig::new(b, b, 1).with_power(cfg.p_max, cfg.sigma2);
    GenConfig::new(SystemModel::Sm2b, net).with_layout(Layout::Paired)
}

fn dqn_config(cfg: &ExperimentConfig, b: usize, seed: u64) -> dqn::DqnConfig {
    dqn::DqnConfig { steps_per_episode: cfg.dqn.steps_per_episode.or(Some(b)), seed, ..cfg.dqn.clone() }
}

fn train_agent(agent: &mut Agent, env: &mut ScEnv, samples: &[LabeledSample], episodes: usize) -> Result<Vec<EpisodeRecord>> {
    dqn::run_online(agent, env, episodes, |e| Ok(samples[e % samples.len()].gains.clone()))
}

fn cs2b_users(cfg: &ExperimentConfig, seed: u64) -> Result<Table> {
    let mut table = Table::new(&[
        "users",
        "wmmse_per_sample_s",
        "nn_per_sample_s",
        "dqn_per_sample_s",
        "nn_r_bar",
        "dqn_r_bar",
        "maxpower_r_bar",
    ]);
    for &b in &cfg.users {
        let gen = sm2b_gen(cfg, b);
        let spec = NonStationaritySpec::sample(&universe(cfg, 1)?, cfg.k[0], seed)?;
        let labeler = Some(Labeler::Wmmse);
        let (train, _) = dataset(&gen, &spec, TRAIN_AT, cfg.train_sizes[0], seed, labeler)?;
        let (val, _) = dataset(&gen, &spec, VAL_AT, cfg.val_size, seed, labeler)?;
        let (test, _) = dataset(&gen, &spec, TEST_AT, cfg.test_size, seed, labeler)?;
        let (nn, _) = pipeline::train_power_model(presets::sm2b(b), &train, &val, &gen, &LossSpec::Mse, &train_cfg(cfg, seed))?;
        let dcfg = dqn_config(cfg, b, seed);
        let mut env = ScEnv::new(gen.network.clone(), &dcfg)?;
        let mut agent = Agent::new(env.state_dim(), env.num_actions(), dcfg)?;
        train_agent(&mut agent, &mut env, &train, cfg.dqn_episodes)?;

        let timing = efficiency(&gen, &test, &nn, &mut agent, &mut env)?;
        let relative = |rates: &[f64]| -> Result<f64> {
            let r: Result<Vec<f64>> = rates
                .iter()
                .zip(&test)
                .map(|(&r, s)| super::relative_sum_rate(r, s.label.as_ref().expect("labeled").rate))
                .collect();
            Ok(mean(&r?))
        };
        let assoc = Association::paired(b);
        let maxp: Vec<f64> = test
            .iter()
            .map(|s| dqn::baseline_rate(&s.gains, &optim::maxpower_alloc(&gen.network, &assoc), &gen.network))
            .collect::<Result<_>>()?;
        table.push(row![
            b,
            timing.wmmse,
            timing.nn,
            timing.dqn,
            mean(&pipeline::relative_rates(&nn, &test, &gen)?),
            relative(&timing.dqn_rates)?,
            relative(&maxp)?
        ])?;
    }
    Ok(table)
}

/// Per-sample latency of the three interference-channel allocators.
#[derive(Debug, Clone)]
pub struct Efficiency {
    pub wmmse: f64,
    pub nn: f64,
    pub dqn: f64,
    pub dqn_rates: Vec<f64>,
}

/// Times WMMSE, the trained net and the agent end to end (gains in,
/// allocation out) on `test`, one sample at a time.
pub fn efficiency(gen: &GenConfig, test: &[LabeledSample], nn: &Predictor, agent: &mut Agent, env: &mut ScEnv) -> Result<Efficiency> {
    let count = test.len();
    let (w, tw) = time_phase(count, || -> Result<()> {
        for s in test {
            envgen::label_sample(Labeler::Wmmse, gen, s, 0)?;
        }
        Ok(())
    });
    w?;
    let (p, tn) = time_phase(count, || -> Result<()> {
        for s in test {
            nn.allocate(&s.gains, &s.association, &gen.network)?;
        }
        Ok(())
    });
    p?;
    let (rates, td) = time_phase(count, || -> Result<Vec<f64>> {
        test.iter().map(|s| Ok(agent.predict(env, s.gains.clone())?.1)).collect()
    });
    let per = |t: PhaseTime| t.per_sample.unwrap_or(f64::NAN);
    Ok(Efficiency { wmmse: per(tw), nn: per(tn), dqn: per(td), dqn_rates: rates? })
}

/// Training log and converged-policy evaluation of the single-carrier agent.
#[derive(Debug, Clone)]
pub struct DqnCurves {
    pub log: Vec<EpisodeRecord>,
    /// Random-allocation rate on each training episode's gains.
    pub random_on_train: Vec<f64>,
    /// `(method, per-sample rates)` on the evaluation samples.
    pub eval: Vec<(&'static str, Vec<f64>)>,
}

impl DqnCurves {
    pub fn eval_rates(&self, method: &str) -> Option<&[f64]> {
        self.eval.iter().find(|(m, _)| *m == method).map(|(_, r)| r.as_slice())
    }

    /// Final rewards of the warmup episodes and the random rates on the same gains.
    pub fn warmup_vs_random(&self) -> (Vec<f64>, Vec<f64>) {
        self.log
            .iter()
            .zip(&self.random_on_train)
            .filter(|(r, _)| r.warmup)
            .map(|(r, &x)| (r.final_reward, x))
            .unzip()
    }

    fn tables(&self) -> Result<Tables> {
        let finals: Vec<f64> = self.log.iter().map(|r| r.final_reward).collect();
        let ma = moving_avg(&finals, CURVE_WINDOW)?;
        let mut training = Table::new(&["episode", "warmup", "epsilon", "final_reward", "total_reward", "reward_ma", "random_rate", "wall_time_s"]);
        for ((r, m), x) in self.log.iter().zip(ma).zip(&self.random_on_train) {
            training.push(row![r.episode, r.warmup, r.epsilon, r.final_reward, r.total_reward, m, *x, r.wall_time])?;
        }
        let mut eval = Table::new(&["sample", "method", "sum_rate"]);
        let mut summary = Table::new(&["method", "episodes", "mean_sum_rate", "std_sum_rate"]);
        let std = |v: &[f64]| {
            let m = mean(v);
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len().max(2) - 1) as f64).sqrt()
        };
        let (warm, _) = self.warmup_vs_random();
        for (method, rates) in self.eval.iter().map(|(m, r)| (*m, r.as_slice())).chain([("warmup", warm.as_slice())]) {
            if method != "warmup" {
                for (i, &r) in rates.iter().enumerate() {
                    eval.push(row![i, method, r])?;
                }
            }
            summary.push(row![method, rates.len(), mean(rates), std(rates)])?;
        }
        Ok(vec![("dqn_training".into(), training), ("dqn_eval".into(), eval), ("dqn_summary".into(), summary)])
    }
}

/// Trains the agent online on `B = U` paired links, then evaluates the
/// greedy policy against the baselines on fresh samples.
pub fn dqn_curves(cfg: &ExperimentConfig, seed: u64) -> Result<DqnCurves> {
    let b = cfg.users[0];
    let gen = sm2b_gen(cfg, b);
    let spec = NonStationaritySpec::sample(&universe(cfg, 1)?, cfg.k[0], seed)?;
    let (train, _) = dataset(&gen, &spec, TRAIN_AT, cfg.dqn_episodes, seed, None)?;
    let (test, _) = dataset(&gen, &spec, TEST_AT, cfg.eval_episodes, seed, Some(Labeler::Wmmse))?;
    let dcfg = dqn_config(cfg, b, seed);
    let mut env = ScEnv::new(gen.network.clone(), &dcfg)?;
    let mut agent = Agent::new(env.state_dim(), env.num_actions(), dcfg)?;
    let log = train_agent(&mut agent, &mut env, &train, cfg.dqn_episodes)?;

    let assoc = Association::paired(b);
    let net = &gen.network;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ RNG_SALT);
    let random_on_train = train
        .iter()
        .map(|s| dqn::baseline_rate(&s.gains, &optim::random_alloc(net, &assoc, &mut rng), net))
        .collect::<Result<Vec<_>>>()?;
    let mut dqn_rates = Vec::new();
    let mut random = Vec::new();
    let mut maxpower = Vec::new();
    let mut wmmse = Vec::new();
    for s in &test {
        dqn_rates.push(agent.predict(&mut env, s.gains.clone())?.1);
        random.push(dqn::baseline_rate(&s.gains, &optim::random_alloc(net, &assoc, &mut rng), net)?);
        maxpower.push(dqn::baseline_rate(&s.gains, &optim::maxpower_alloc(net, &assoc), net)?);
        wmmse.push(s.label.as_ref().expect("labeled").rate);
    }
    Ok(DqnCurves {
        log,
        random_on_train,
        eval: vec![("dqn", dqn_rates), ("random", random), ("maxpower", maxpower), ("wmmse", wmmse)],
    })
}

fn sm3_gen(cfg: &ExperimentConfig, n: usize) -> GenConfig {
    let net = NetworkConfig::new(cfg.base_stations, cfg.users[0], n).with_power(cfg.p_max, cfg.sigma2);
    GenConfig::new(SystemModel::Sm3, net).with_layout(Layout::Nearest)
}

fn sm3_rate(gen: &GenConfig, s: &LabeledSample, p: &PowerAllocation) -> Result<f64> {
    envgen::model_rate(gen, &s.gains, p, &s.association)
}

fn train_sm3(
    cfg: &ExperimentConfig,
    seed: u64,
    gen: &GenConfig,
    train: &[LabeledSample],
    val: &[LabeledSample],
    beta: f64,
) -> Result<(Predictor, f64)> {
    let n = gen.network.num_subcarriers;
    let arch = presets::sm3_conv(gen.network.num_bs, gen.network.num_users, n);
    let (fit, t2) = time_phase(train.len(), || pipeline::train_sm3_model(arch, train, val, gen, beta, &train_cfg(cfg, seed)));
    Ok((fit?.0, t2.seconds))
}

fn cs3_time(cfg: &ExperimentConfig, seed: u64) -> Result<Table> {
    let mut table = Table::new(&["n", "solver_per_sample_s", "nn_per_sample_s", "t2_s"]);
    for &n in &cfg.subcarriers {
        let gen = sm3_gen(cfg, n);
        let spec = NonStationaritySpec::sample(&universe(cfg, n)?, cfg.k[0], seed)?;
        let (train, _) = dataset(&gen, &spec, TRAIN_AT, cfg.train_sizes[0], seed, None)?;
        let (val, _) = dataset(&gen, &spec, VAL_AT, cfg.val_size, seed, None)?;
        let (test, _) = dataset(&gen, &spec, TEST_AT, cfg.test_size, seed, None)?;
        let solver = sm3_solver_time(&gen, &test)?;
        let (nn, t2) = train_sm3(cfg, seed, &gen, &train, &val, cfg.beta)?;
        let (p, tn) = time_phase(test.len(), || -> Result<()> {
            for s in &test {
                nn.allocate(&s.gains, &s.association, &gen.network)?;
            }
            Ok(())
        });
        p?;
        table.push(row![n, solver, tn.per_sample, t2])?;
    }
    Ok(table)
}

/// Per-sample time of the iterative multi-cell solver, run serially.
pub fn sm3_solver_time(gen: &GenConfig, samples: &[LabeledSample]) -> Result<f64> {
    let (r, t) = time_phase(samples.len(), || -> Result<()> {
        for s in samples {
            envgen::label_sample(Labeler::IterativeSm3, gen, s, 0)?;
        }
        Ok(())
    });
    r?;
    t.per_sample.ok_or_else(|| Error::Param("no samples to time".into()))
}

fn cs3_rate(cfg: &ExperimentConfig, seed: u64) -> Result<Table> {
    let mut table = Table::new(&["n", "random", "waterfill", "suboptimal", "nn_seen", "nn_unseen"]);
    for &n in &cfg.subcarriers {
        let gen = sm3_gen(cfg, n);
        let spec = NonStationaritySpec::sample(&universe(cfg, n)?, cfg.k[0], seed)?;
        let (train, _) = dataset(&gen, &spec, TRAIN_AT, cfg.train_sizes[0], seed, None)?;
        let (val, _) = dataset(&gen, &spec, VAL_AT, cfg.val_size, seed, None)?;
        let (test, _) = dataset(&gen, &spec, TEST_AT, cfg.test_size, seed, Some(Labeler::IterativeSm3))?;
        let (nn, _) = train_sm3(cfg, seed, &gen, &train, &val, cfg.beta)?;
        let base = baselines(&gen, &test, seed)?;
        let nn_rate = |set: &[LabeledSample]| -> Result<f64> {
            let r: Result<Vec<f64>> = set.iter().map(|s| sm3_rate(&gen, s, &nn.allocate(&s.gains, &s.association, &gen.network)?)).collect();
            Ok(mean(&r?))
        };
        let seen = nn_rate(&train[..cfg.test_size.min(train.len())])?;
        table.push(row![n, mean(&base[0].1), mean(&base[1].1), mean(&base[2].1), seen, nn_rate(&test)?])?;
    }
    Ok(table)
}

/// Random, per-cell water-filling and solver rates on labeled `test`.
fn baselines(gen: &GenConfig, test: &[LabeledSample], seed: u64) -> Result<Vec<(&'static str, Vec<f64>)>> {
    let net = &gen.network;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ RNG_SALT);
    let mut random = Vec::new();
    let mut wf = Vec::new();
    let mut opt = Vec::new();
    for s in test {
        random.push(sm3_rate(gen, s, &optim::random_alloc(net, &s.association, &mut rng))?);
        wf.push(sm3_rate(gen, s, &optim::percell_waterfill(&s.gains, &s.association, net)?)?);
        opt.push(s.label.as_ref().expect("labeled").rate);
    }
    Ok(vec![("random", random), ("waterfill", wf), ("suboptimal", opt)])
}

/// Rates and per-BS total powers of the multi-cell allocators, including
/// the regularized net and its `β = 0` ablation.
#[derive(Debug, Clone)]
pub struct Cs3Cdf {
    pub p_max: f64,
    /// `(method, per-sample sum rate)`.
    pub rates: Vec<(&'static str, Vec<f64>)>,
    /// `(method, per-sample per-BS total power in watts)`; the nets report
    /// their raw output before any projection.
    pub power: Vec<(&'static str, Vec<Vec<f64>>)>,
}

impl Cs3Cdf {
    pub fn rates(&self, method: &str) -> Option<&[f64]> {
        self.rates.iter().find(|(m, _)| *m == method).map(|(_, r)| r.as_slice())
    }

    /// Fraction of samples where some BS exceeds `(1 + tol) · P_max`.
    pub fn violation(&self, method: &str, tol: f64) -> Option<f64> {
        let (_, totals) = self.power.iter().find(|(m, _)| *m == method)?;
        let fractions: Vec<Vec<f64>> = totals.iter().map(|t| t.iter().map(|w| w / self.p_max).collect()).collect();
        Some(pipeline::violation_frequency(&fractions, tol))
    }

    fn tables(&self) -> Result<Tables> {
        let mut rates = Table::new(&["sample", "method", "sum_rate"]);
        for (method, r) in &self.rates {
            for (i, &x) in r.iter().enumerate() {
                rates.push(row![i, *method, x])?;
            }
        }
        let mut power = Table::new(&["sample", "bs", "method", "total_power_w"]);
        for (method, totals) in &self.power {
            for (i, t) in totals.iter().enumerate() {
                for (b, &w) in t.iter().enumerate() {
                    power.push(row![i, b, *method, w])?;
                }
            }
        }
        let mut summary = Table::new(&["method", "mean_sum_rate", "violation_frequency"]);
        for (method, r) in &self.rates {
            summary.push(row![*method, mean(r), self.violation(method, pipeline::VIOLATION_TOL)])?;
        }
        Ok(vec![("cs3_rates".into(), rates), ("cs3_power".into(), power), ("cs3_summary".into(), summary)])
    }
}

pub fn cs3_cdf(cfg: &ExperimentConfig, seed: u64) -> Result<Cs3Cdf> {
    let n = cfg.subcarriers[0];
    let gen = sm3_gen(cfg, n);
    let net = &gen.network;
    let spec = NonStationaritySpec::sample(&universe(cfg, n)?, cfg.k[0], seed)?;
    let (train, _) = dataset(&gen, &spec, TRAIN_AT, cfg.train_sizes[0], seed, None)?;
    let (val, _) = dataset(&gen, &spec, VAL_AT, cfg.val_size, seed, None)?;
    let (test, _) = dataset(&gen, &spec, TEST_AT, cfg.test_size, seed, Some(Labeler::IterativeSm3))?;
    let mut rates = baselines(&gen, &test, seed)?;
    let bs_totals = |p: &PowerAllocation| -> Vec<f64> {
        (0..net.num_bs)
            .map(|b| (0..net.num_users).flat_map(|u| (0..net.num_subcarriers).map(move |k| (u, k))).map(|(u, k)| p.get(b, u, k)).sum())
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ RNG_SALT);
    let mut power: Vec<(&'static str, Vec<Vec<f64>>)> = vec![
        ("random", test.iter().map(|s| bs_totals(&optim::random_alloc(net, &s.association, &mut rng))).collect()),
        (
            "waterfill",
            test.iter()
                .map(|s| Ok(bs_totals(&optim::percell_waterfill(&s.gains, &s.association, net)?)))
                .collect::<Result<_>>()?,
        ),
        ("suboptimal", test.iter().map(|s| bs_totals(&s.label.as_ref().expect("labeled").power)).collect()),
    ];
    for (method, beta) in [("nn", cfg.beta), ("nn-unregularized", 0.0)] {
        let (nn, _) = train_sm3(cfg, seed, &gen, &train, &val, beta)?;
        let r: Vec<f64> = test
            .iter()
            .map(|s| sm3_rate(&gen, s, &nn.allocate(&s.gains, &s.association, net)?))
            .collect::<Result<_>>()?;
        let raw = pipeline::raw_bs_totals(&nn, &test, net)?;
        rates.push((method, r));
        power.push((method, raw.into_iter().map(|t| t.into_iter().map(|f| f * net.p_max).collect()).collect()));
    }
    Ok(Cs3Cdf { p_max: net.p_max, rates, power })
}
