use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rrm_core::bench::{self, ExperimentConfig, Table};
use rrm_core::dqn::{self, Agent, DqnConfig, Environment, OfdmEnv, ScEnv};
use rrm_core::envgen::{self, Dataset, GenConfig, Labeler, NonStationaritySpec, PairUniverse};
use rrm_core::nn::{presets, Checkpoint, LossSpec, TrainConfig};
use rrm_core::optim::{self, Association, NetworkConfig, SystemModel};
use rrm_core::pipeline::{self, Features, OutputMap, Predictor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{default_layout, RunConfig};
use crate::{invalid, BenchArgs, CliError, DqnArgs, DqnEnv, EvalArgs, GenerateArgs, LabelArgs, ReportArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").exists() {
        return Err(config_error(format!("{} is not a dataset directory (no manifest.json)", dir.display())));
    }
    Ok(Dataset::load(dir)?)
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let mut rc = RunConfig::load(a.common.config.as_deref())?;
    let seed = rc.resolve_seed(a.common.seed)?;
    let gen = &mut rc.generator;
    if let Some(model) = a.model {
        gen.model = model;
        gen.geometry.layout = default_layout(model);
    }
    if let Some(layout) = a.layout {
        gen.geometry.layout = layout;
    }
    let net = &mut gen.network;
    net.num_bs = a.bs.unwrap_or(net.num_bs);
    net.num_users = a.users.unwrap_or(net.num_users);
    net.num_subcarriers = a.subcarriers.unwrap_or(net.num_subcarriers);
    net.p_max = a.p_max.unwrap_or(net.p_max);
    net.sigma2 = a.sigma2.unwrap_or(net.sigma2);
    let sub = &mut rc.subset;
    sub.l_max = a.l_max.unwrap_or(sub.l_max);
    sub.m_max = a.m_max.unwrap_or(sub.m_max);
    sub.k = a.k.unwrap_or(sub.k);
    let count = a.count.unwrap_or(rc.count);

    let gen = rc.generator;
    gen.validate().map_err(invalid)?;
    if count == 0 {
        return Err(config_error("count must be at least 1"));
    }
    if rc.subset.l_max > gen.network.num_subcarriers {
        return Err(config_error(format!(
            "l_max {} exceeds the {} subcarriers; a channel cannot have more paths than subcarriers",
            rc.subset.l_max, gen.network.num_subcarriers
        )));
    }
    let universe = PairUniverse::new(rc.subset.l_max, rc.subset.m_max).map_err(invalid)?;
    info!("pair universe {} x {}: cardinality {}", rc.subset.l_max, rc.subset.m_max, universe.len());
    let spec = NonStationaritySpec::sample(&universe, rc.subset.k, seed).map_err(invalid)?;

    let samples = envgen::generate_samples(&gen, &spec, 0, count, seed)?;
    let mut ds = Dataset::new(gen, spec, seed, samples);
    ds.save(&a.out)?;
    let split = ds.manifest.split;
    println!(
        "universe {}  k {}  samples {} (train {}, val {}, test {})  seed {}  -> {}",
        universe.len(),
        rc.subset.k,
        count,
        split.train,
        split.val,
        split.test,
        seed,
        a.out.display()
    );
    Ok(())
}

pub fn label(a: LabelArgs) -> Result<()> {
    let rc = RunConfig::load(a.common.config.as_deref())?;
    let mut ds = load_dataset(&a.dataset)?;
    let seed = a.common.seed.or(rc.seed).unwrap_or(ds.manifest.seed);
    let labeler = a.labeler.unwrap_or_else(|| Labeler::for_model(ds.manifest.generator.model));
    let gen = ds.manifest.generator.clone();
    let report = envgen::label_dataset(&mut ds.samples, labeler, &gen, seed);
    ds.manifest.labeler = Some(labeler.id().to_string());
    ds.manifest.label_seconds = Some(report.seconds);
    let out = a.out.unwrap_or(a.dataset);
    ds.save(&out)?;
    println!(
        "labeled {} samples with {labeler} in {:.3} s ({:.3e} s/sample), {} failed -> {}",
        ds.samples.len(),
        report.seconds,
        report.per_sample.unwrap_or(0.0),
        report.failures,
        out.display()
    );
    Ok(())
}

/// What `eval` needs besides the network to rebuild a predictor.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    preset: String,
    model: SystemModel,
    features: Features,
    map: OutputMap,
    loss: LossSpec,
    /// Manifest hash of the training dataset.
    dataset: String,
    best_epoch: usize,
    best_val_loss: f64,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let rc = RunConfig::load(a.common.config.as_deref())?;
    let ds = load_dataset(&a.dataset)?;
    let gen = &ds.manifest.generator;
    let net = &gen.network;
    let expected = match a.preset.as_str() {
        "sm1" | "model-b" => SystemModel::Sm1,
        "sm2b" => SystemModel::Sm2b,
        "sm3-conv" => SystemModel::Sm3,
        "model-a" => {
            return Err(config_error(
                "model-a scores subcarrier assignments and is trained with its power net; run `rrm bench cs2-nonstat`",
            ))
        }
        other => return Err(config_error(format!("unknown preset `{other}` (expected sm1, model-b, sm2b or sm3-conv)"))),
    };
    if gen.model != expected {
        return Err(config_error(format!("preset `{}` needs a {expected:?} dataset, got {:?}", a.preset, gen.model)));
    }
    let mut tc: TrainConfig = rc.train.clone();
    tc.seed = rc.resolve_seed(a.common.seed)?;
    tc.max_epochs = a.epochs.unwrap_or(tc.max_epochs);
    tc.patience = a.patience.unwrap_or(tc.patience).min(tc.max_epochs);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.adam.lr = a.lr.unwrap_or(tc.adam.lr);
    tc.validate().map_err(invalid)?;
    let beta = a.beta.or(rc.beta);

    let (train, val, _) = ds.split().map_err(invalid)?;
    let spec = presets::by_name(&a.preset, net.num_users, net.num_subcarriers, net.num_bs).map_err(invalid)?;
    let (predictor, report) = if expected == SystemModel::Sm3 {
        pipeline::train_sm3_model(spec, train, val, gen, beta.unwrap_or(3e4), &tc)?
    } else {
        if !ds.is_labeled() {
            return Err(config_error("dataset not labeled; run `rrm label` first"));
        }
        let loss = match expected {
            SystemModel::Sm2b => LossSpec::Mse,
            _ => LossSpec::PowerViolation { beta: beta.unwrap_or(1.0), p_max: 1.0, groups: 1 },
        };
        loss.validate().map_err(invalid)?;
        let (train, val) = (pipeline::labeled(train), pipeline::labeled(val));
        pipeline::train_power_model(spec, &train, &val, gen, &loss, &tc)?
    };

    let meta = CheckpointMeta {
        preset: a.preset.clone(),
        model: gen.model,
        features: predictor.features,
        map: predictor.map.clone(),
        loss: predictor.loss.clone(),
        dataset: ds.manifest.hash(),
        best_epoch: report.best_epoch,
        best_val_loss: report.best_val_loss,
    };
    let mut ck = Checkpoint::new(predictor.net, Some(predictor.normalizer));
    ck.meta = serde_json::to_value(&meta).map_err(|e| CliError::Runtime(e.to_string()))?;
    ck.save(&a.out)?;

    let mut history = Table::new(&["epoch", "train_loss", "val_loss", "wall_time"]);
    for r in &report.history {
        history.push(rrm_core::row![r.epoch, r.train_loss, r.val_loss, r.wall_time])?;
    }
    let history_path = sibling(&a.out, "history.csv");
    history.write(&history_path)?;
    println!(
        "trained {} for {} epochs in {:.1} s (best epoch {}, val loss {:.4e}, stop: {:?}) -> {}",
        a.preset,
        report.history.len(),
        report.seconds,
        report.best_epoch,
        report.best_val_loss,
        report.stop,
        a.out.display()
    );
    Ok(())
}

/// `dir/stem.suffix` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    if !a.checkpoint.exists() {
        return Err(config_error(format!("checkpoint {} not found", a.checkpoint.display())));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let meta: CheckpointMeta = serde_json::from_value(ck.meta.clone())
        .map_err(|e| config_error(format!("{} has no usable metadata: {e}", a.checkpoint.display())))?;
    let gen = &ds.manifest.generator;
    if meta.model != gen.model {
        return Err(config_error(format!("checkpoint was trained on {:?} data, dataset is {:?}", meta.model, gen.model)));
    }
    let expected_dim = meta.features.extract(&ds.samples[0].gains, &ds.samples[0].association).len();
    if ck.network.spec.input_dim != expected_dim {
        return Err(config_error(format!(
            "checkpoint expects {} inputs, dataset samples give {expected_dim}",
            ck.network.spec.input_dim
        )));
    }
    if !ds.is_labeled() {
        return Err(config_error("dataset not labeled; run `rrm label` first"));
    }
    let normalizer = ck.normalizer.clone().ok_or_else(|| config_error("checkpoint has no input normalizer"))?;
    let predictor = Predictor { net: ck.network, features: meta.features, normalizer, map: meta.map, loss: meta.loss };

    let (_, _, test) = ds.split().map_err(invalid)?;
    let test = pipeline::labeled(test);
    if test.is_empty() {
        return Err(CliError::Runtime("test split has no labeled samples".into()));
    }
    let rates = pipeline::relative_rates(&predictor, &test, gen)?;
    let r_bar = bench::mean(&rates);
    let t3 = pipeline::prediction_latency(&predictor, &test).unwrap_or(f64::NAN);
    let totals = pipeline::raw_bs_totals(&predictor, &test, &gen.network)?;
    let violation = pipeline::violation_frequency(&totals, pipeline::VIOLATION_TOL);
    println!("test samples: {}", test.len());
    println!("R_bar: {r_bar:.2} %");
    println!("t3': {t3:.3e} s/sample");
    println!("budget violations: {:.1} %", 100.0 * violation);
    Ok(())
}

pub fn dqn(a: DqnArgs) -> Result<()> {
    let rc = RunConfig::load(a.common.config.as_deref())?;
    let seed = rc.resolve_seed(a.common.seed)?;
    if a.episodes == 0 || a.eval_episodes == 0 {
        return Err(config_error("episodes and eval-episodes must be at least 1"));
    }
    let (gen, assoc) = match a.env {
        DqnEnv::Sc => {
            let net = NetworkConfig::new(a.users, a.users, 1).with_power(a.p_max.unwrap_or(1e-5), a.sigma2.unwrap_or(1e-20));
            (GenConfig::new(SystemModel::Sm2b, net).with_layout(envgen::Layout::Paired), Association::paired(a.users))
        }
        DqnEnv::Ofdm => {
            let net = NetworkConfig::new(1, 1, a.subcarriers).with_power(a.p_max.unwrap_or(1e-5), a.sigma2.unwrap_or(4e-19));
            (GenConfig::new(SystemModel::Sm1, net), Association::single_cell(1))
        }
    };
    gen.validate().map_err(invalid)?;
    let mut dcfg: DqnConfig = rc.dqn.clone();
    dcfg.seed = seed;
    if a.env == DqnEnv::Sc && dcfg.steps_per_episode.is_none() {
        dcfg.steps_per_episode = Some(a.users);
    }
    let universe = PairUniverse::new(rc.subset.l_max.min(gen.network.num_subcarriers), rc.subset.m_max).map_err(invalid)?;
    let spec = NonStationaritySpec::sample(&universe, rc.subset.k, seed).map_err(invalid)?;
    let train = envgen::generate_samples(&gen, &spec, 0, a.episodes, seed)?;
    let test = envgen::generate_samples(&gen, &spec, a.episodes as u64, a.eval_episodes, seed)?;

    match a.env {
        DqnEnv::Sc => run_dqn(ScEnv::new(gen.network.clone(), &dcfg)?, dcfg, &gen, &assoc, &train, &test, &a.out, seed),
        DqnEnv::Ofdm => run_dqn(OfdmEnv::new(gen.network.clone(), &dcfg)?, dcfg, &gen, &assoc, &train, &test, &a.out, seed),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_dqn<E: Environment>(
    mut env: E,
    dcfg: DqnConfig,
    gen: &GenConfig,
    assoc: &Association,
    train: &[envgen::LabeledSample],
    test: &[envgen::LabeledSample],
    out: &Path,
    seed: u64,
) -> Result<()> {
    let mut agent = Agent::new(env.state_dim(), env.num_actions(), dcfg)?;
    let log = dqn::run_online(&mut agent, &mut env, train.len(), |e| Ok(train[e].gains.clone()))?;
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    dqn::write_episode_csv(&out.join("episodes.csv"), &log)?;

    let net = &gen.network;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = Table::new(&["sample", "dqn_rate", "maxpower_rate", "random_rate", "dqn_latency_s"]);
    for (i, s) in test.iter().enumerate() {
        let (_, rate, latency) = agent.predict(&mut env, s.gains.clone())?;
        let maxpower = envgen::model_rate(gen, &s.gains, &optim::maxpower_alloc(net, assoc), assoc)?;
        let random = envgen::model_rate(gen, &s.gains, &optim::random_alloc(net, assoc, &mut rng), assoc)?;
        table.push(rrm_core::row![i, rate, maxpower, random, latency])?;
    }
    table.write(&out.join("eval.csv"))?;
    let avg = |c: &str| table.numbers(c).map(|v| bench::mean(&v));
    println!(
        "{} training episodes; greedy mean rate {:.4} (maxpower {:.4}, random {:.4}) over {} draws -> {}",
        log.len(),
        avg("dqn_rate")?,
        avg("maxpower_rate")?,
        avg("random_rate")?,
        test.len(),
        out.display()
    );
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let rc = RunConfig::load(a.common.config.as_deref())?;
    let mut overlay = rc.experiment.clone();
    let seeds = match a.seeds {
        Some(s) => s,
        None if overlay.get("seeds").is_some() => serde_json::from_value(overlay["seeds"].clone())
            .map_err(|e| config_error(format!("experiment.seeds: {e}")))?,
        None => vec![rc.resolve_seed(a.common.seed)?],
    };
    overlay["seeds"] = json!(seeds);
    if let Some(out) = &a.out {
        overlay["out_dir"] = json!(out);
    }
    let cfg = ExperimentConfig::with_overlay(a.id, &overlay).map_err(invalid)?;
    info!("running {} for seeds {:?}", a.id, cfg.seeds);
    let run = bench::run_experiment(&cfg, a.run_id.as_deref())?;
    for (name, table) in &run.tables {
        println!("{}: {} rows", run.dir.join(format!("{name}.csv")).display(), table.rows.len());
    }
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    if !a.results.is_dir() {
        return Err(config_error(format!("{} is not a directory", a.results.display())));
    }
    let mut runs = Vec::new();
    for exp in sorted_dirs(&a.results)? {
        for run in sorted_dirs(&exp)? {
            if run.join("run.json").exists() {
                runs.push(run);
            }
        }
    }
    if runs.is_empty() {
        println!("no runs under {}", a.results.display());
        return Ok(());
    }
    for run in runs {
        let meta: serde_json::Value = serde_json::from_slice(&fs::read(run.join("run.json")).map_err(io_error(&run))?)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", run.display())))?;
        println!(
            "{}  id {}  seeds {}",
            run.display(),
            meta["id"].as_str().unwrap_or("?"),
            meta["config"]["seeds"]
        );
        let mut csvs: Vec<PathBuf> = fs::read_dir(&run)
            .map_err(io_error(&run))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        csvs.sort();
        for path in csvs {
            let table = Table::read(&path)?;
            println!("  {}: {} rows, columns {}", path.file_name().unwrap().to_string_lossy(), table.rows.len(), table.columns.join(","));
            if path.file_stem().is_some_and(|s| s.to_string_lossy().ends_with("summary")) {
                for line in table.to_csv().lines() {
                    println!("    {line}");
                }
            }
        }
    }
    Ok(())
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_error(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_sits_next_to_the_checkpoint() {
        assert_eq!(sibling(Path::new("runs/sm1.json"), "history.csv"), PathBuf::from("runs/sm1.history.csv"));
    }
}
