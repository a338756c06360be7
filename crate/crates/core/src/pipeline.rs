//! Learned allocators built from [`nn`](crate::nn) networks, and the dual-model
//! harness that keeps serving while a second copy retrains.
//!
//! Inputs are per-link power gains in dB, standardized with statistics of the
//! training set. Power outputs are fractions of the BS budget; before a rate is
//! computed they are scaled by `P_max` and projected onto the budget.

use std::sync::mpsc;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bench::{moving_avg, relative_sum_rate};
use crate::channel::GainTensor;
use crate::envgen::{self, GenConfig, Labeler, LabeledSample, NonStationaritySpec};
use crate::error::{ensure, Error, Result};
use crate::nn::{self, Init, LossSpec, ModelSpec, Network, Standardizer, TrainConfig, TrainSet, Targets};
use crate::optim::{self, Association, NetworkConfig, PowerAllocation, SubcarrierAssignment, SystemModel};

/// Power gains in dB, in (b, u, n) order.
pub fn gain_features(gains: &GainTensor) -> Vec<f64> {
    gains.gains.iter().map(|g| 10.0 * g.norm_sqr().max(1e-300).log10()).collect()
}

/// What a network sees of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Features {
    /// Gains in dB, `B × U × N`.
    Gains,
    /// Gains in dB with each link's load share appended along the subcarrier
    /// axis, `B × U × (N + 1)`.
    GainsAndLoad,
}

impl Features {
    pub fn extract(self, gains: &GainTensor, assoc: &Association) -> Vec<f64> {
        match self {
            Features::Gains => gain_features(gains),
            Features::GainsAndLoad => {
                let n = gains.num_subcarriers;
                let db = gain_features(gains);
                let mut x = Vec::with_capacity(gains.num_bs * gains.num_users * (n + 1));
                for b in 0..gains.num_bs {
                    let served = assoc.users_of(b).count().max(1) as f64;
                    for u in 0..gains.num_users {
                        let row = (b * gains.num_users + u) * n;
                        x.extend_from_slice(&db[row..row + n]);
                        x.push(if assoc.serves(b, u) { 1.0 / served } else { 0.0 });
                    }
                }
                x
            }
        }
    }
}

/// Which allocation slot each network output drives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputMap {
    pub slots: Vec<usize>,
}

impl OutputMap {
    /// One output per (b, u, n) slot.
    pub fn all(cfg: &NetworkConfig) -> Self {
        Self { slots: (0..cfg.slots()).collect() }
    }

    /// One output per BS, driving its paired user on the only carrier.
    pub fn paired(cfg: &NetworkConfig) -> Self {
        let b = cfg.num_bs;
        Self { slots: (0..b).map(|k| (k * cfg.num_users + k) * cfg.num_subcarriers).collect() }
    }

    /// Default map of a system model.
    pub fn for_model(model: SystemModel, cfg: &NetworkConfig) -> Self {
        match model {
            SystemModel::Sm2b => Self::paired(cfg),
            _ => Self::all(cfg),
        }
    }
}

/// Turns budget fractions into a feasible allocation: unserved slots are
/// zeroed, then every BS is scaled down uniformly if over budget.
pub fn to_allocation(fractions: &[f64], map: &OutputMap, assoc: &Association, cfg: &NetworkConfig) -> Result<PowerAllocation> {
    ensure!(fractions.len() == map.slots.len(), Shape, "expected {} outputs, got {}", map.slots.len(), fractions.len());
    let mut alloc = PowerAllocation::zeros(cfg);
    for (&slot, &f) in map.slots.iter().zip(fractions) {
        let u = (slot / cfg.num_subcarriers) % cfg.num_users;
        let b = slot / (cfg.num_subcarriers * cfg.num_users);
        if assoc.serves(b, u) {
            alloc.p[slot] = f * cfg.p_max;
        }
    }
    alloc.project_budget(cfg.p_max);
    Ok(alloc)
}

/// Sum of the raw fractions each BS would transmit on served links, before
/// any projection. Negative outputs are summed as they are, matching the
/// sum the power-violation loss penalizes.
pub fn bs_fraction_totals(fractions: &[f64], map: &OutputMap, assoc: &Association, cfg: &NetworkConfig) -> Vec<f64> {
    let mut totals = vec![0.0; cfg.num_bs];
    for (&slot, &f) in map.slots.iter().zip(fractions) {
        let u = (slot / cfg.num_subcarriers) % cfg.num_users;
        let b = slot / (cfg.num_subcarriers * cfg.num_users);
        if assoc.serves(b, u) {
            totals[b] += f;
        }
    }
    totals
}

/// A trained network with its input normalization and output mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub net: Network,
    pub features: Features,
    pub normalizer: Standardizer,
    pub map: OutputMap,
    /// Loss the net was trained with; retraining reuses it.
    pub loss: LossSpec,
}

impl Predictor {
    fn inputs(&self, gains: &GainTensor, assoc: &Association) -> Vec<f64> {
        let mut x = self.features.extract(gains, assoc);
        self.normalizer.apply(&mut x);
        x
    }

    /// Raw outputs (budget fractions, before projection).
    pub fn fractions(&self, gains: &GainTensor, assoc: &Association) -> Result<Vec<f64>> {
        self.net.forward(&self.inputs(gains, assoc))
    }

    pub fn allocate(&self, gains: &GainTensor, assoc: &Association, cfg: &NetworkConfig) -> Result<PowerAllocation> {
        to_allocation(&self.fractions(gains, assoc)?, &self.map, assoc, cfg)
    }
}

/// Normalized inputs of `samples` with the given or a freshly fitted standardizer.
pub fn feature_matrix(
    samples: &[LabeledSample],
    features: Features,
    normalizer: Option<&Standardizer>,
) -> Result<(Vec<f64>, Standardizer)> {
    ensure!(!samples.is_empty(), Param, "no samples");
    let mut x = Vec::new();
    for s in samples {
        x.extend(features.extract(&s.gains, &s.association));
    }
    let dim = x.len() / samples.len();
    let norm = match normalizer {
        Some(n) => n.clone(),
        None => Standardizer::fit(&x, dim)?,
    };
    norm.apply(&mut x);
    Ok((x, norm))
}

/// Labeled power fractions of `samples` as regression targets.
pub fn power_targets(samples: &[LabeledSample], map: &OutputMap, cfg: &NetworkConfig) -> Result<Targets> {
    let mut data = Vec::with_capacity(samples.len() * map.slots.len());
    for s in samples {
        let label = s.label.as_ref().ok_or_else(|| Error::Config("dataset not labeled".into()))?;
        data.extend(map.slots.iter().map(|&i| label.power.p[i] / cfg.p_max));
    }
    Ok(Targets::Values { data, dim: map.slots.len() })
}

/// Samples that carry a label, in order.
pub fn labeled(samples: &[LabeledSample]) -> Vec<LabeledSample> {
    samples.iter().filter(|s| s.label.is_some()).cloned().collect()
}

/// Trains a power regressor on labeled samples; the standardizer is fitted on `train`.
pub fn train_power_model(
    spec: ModelSpec,
    train: &[LabeledSample],
    val: &[LabeledSample],
    gen: &GenConfig,
    loss: &LossSpec,
    cfg: &TrainConfig,
) -> Result<(Predictor, nn::FitReport)> {
    let map = OutputMap::for_model(gen.model, &gen.network);
    let (xt, norm) = feature_matrix(train, Features::Gains, None)?;
    let (xv, _) = feature_matrix(val, Features::Gains, Some(&norm))?;
    let dim = norm.mean.len();
    let train_set = TrainSet::new(xt, dim, power_targets(train, &map, &gen.network)?)?;
    let val_set = TrainSet::new(xv, dim, power_targets(val, &map, &gen.network)?)?;
    let mut net = Network::new(spec, Init::Glorot, cfg.seed)?;
    let report = nn::fit(&mut net, &train_set, &val_set, loss, cfg)?;
    Ok((Predictor { net, features: Features::Gains, normalizer: norm, map, loss: loss.clone() }, report))
}

/// Per-sample relative sum rate (percent) of `predictor` against each sample's label.
pub fn relative_rates(predictor: &Predictor, samples: &[LabeledSample], gen: &GenConfig) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let label = s.label.as_ref().ok_or_else(|| Error::Config("dataset not labeled".into()))?;
            let alloc = predictor.allocate(&s.gains, &s.association, &gen.network)?;
            let rate = envgen::model_rate(gen, &s.gains, &alloc, &s.association)?;
            relative_sum_rate(rate, label.rate)
        })
        .collect()
}

/// Per-subcarrier argmax of Model A's `U × N` scores (ties to the lowest user).
pub fn assignment_decode(scores: &[f64], num_users: usize, num_subcarriers: usize) -> Result<SubcarrierAssignment> {
    optim::greedy_subcarrier_alloc(scores, num_users, num_subcarriers)
}

/// Model A → decode → gather assigned gains → Model B → project.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub model_a: Predictor,
    pub model_b: Predictor,
    pub num_users: usize,
    pub num_subcarriers: usize,
}

/// Gains of the user holding each subcarrier.
pub fn gather_assigned(gains: &GainTensor, assignment: &SubcarrierAssignment) -> GainTensor {
    let n = gains.num_subcarriers;
    let picked = (0..n).map(|k| gains.get(0, assignment.assign[0][k], k)).collect();
    GainTensor::from_vec(1, 1, n, picked).expect("one gain per subcarrier")
}

impl Pipeline {
    pub fn predict(&self, gains: &GainTensor, cfg: &NetworkConfig) -> Result<(SubcarrierAssignment, PowerAllocation)> {
        ensure!(
            gains.num_bs == 1 && gains.num_users == self.num_users && gains.num_subcarriers == self.num_subcarriers,
            Shape,
            "gains do not match the {}x{} pipeline",
            self.num_users,
            self.num_subcarriers
        );
        let one_cell = Association::single_cell(self.num_users);
        let assignment = if self.num_users == 1 {
            SubcarrierAssignment { num_users: 1, assign: vec![vec![0; self.num_subcarriers]] }
        } else {
            assignment_decode(&self.model_a.fractions(gains, &one_cell)?, self.num_users, self.num_subcarriers)?
        };
        let mut powers = self.model_b.fractions(&gather_assigned(gains, &assignment), &Association::single_cell(1))?;
        nn::project_groups(&mut powers, 1, 1.0);
        let mut alloc = PowerAllocation::zeros(cfg);
        for (k, f) in powers.into_iter().enumerate() {
            alloc.set(0, assignment.assign[0][k], k, f * cfg.p_max);
        }
        alloc.project_budget(cfg.p_max);
        Ok((assignment, alloc))
    }

    /// Trains both stages on greedy+waterfill labels.
    #[allow(clippy::too_many_arguments)]
    pub fn train(
        train: &[LabeledSample],
        val: &[LabeledSample],
        gen: &GenConfig,
        spec_a: ModelSpec,
        spec_b: ModelSpec,
        loss_b: &LossSpec,
        cfg: &TrainConfig,
    ) -> Result<(Self, nn::FitReport, nn::FitReport)> {
        let (u, n) = (gen.network.num_users, gen.network.num_subcarriers);
        let one_hot = |samples: &[LabeledSample]| -> Result<Targets> {
            let mut data = Vec::with_capacity(samples.len() * u * n);
            for s in samples {
                let a = s.label.as_ref().and_then(|l| l.assignment.as_ref())
                    .ok_or_else(|| Error::Config("dataset has no subcarrier labels".into()))?;
                for user in 0..u {
                    data.extend((0..n).map(|k| if a.assign[0][k] == user { 1.0 } else { 0.0 }));
                }
            }
            Ok(Targets::Values { data, dim: u * n })
        };
        let (xa, norm_a) = feature_matrix(train, Features::Gains, None)?;
        let (xva, _) = feature_matrix(val, Features::Gains, Some(&norm_a))?;
        let mut net_a = Network::new(spec_a, Init::Glorot, cfg.seed)?;
        let report_a = nn::fit(
            &mut net_a,
            &TrainSet::new(xa, u * n, one_hot(train)?)?,
            &TrainSet::new(xva, u * n, one_hot(val)?)?,
            &LossSpec::Bce,
            cfg,
        )?;
        // Stage B sees the label assignment's gains during training.
        let stage_b = |samples: &[LabeledSample]| -> Result<(Vec<f64>, Targets)> {
            let mut x = Vec::with_capacity(samples.len() * n);
            let mut y = Vec::with_capacity(samples.len() * n);
            for s in samples {
                let label = s.label.as_ref().ok_or_else(|| Error::Config("dataset not labeled".into()))?;
                let a = label.assignment.as_ref().ok_or_else(|| Error::Config("dataset has no subcarrier labels".into()))?;
                x.extend(gain_features(&gather_assigned(&s.gains, a)));
                y.extend((0..n).map(|k| label.power.get(0, a.assign[0][k], k) / gen.network.p_max));
            }
            Ok((x, Targets::Values { data: y, dim: n }))
        };
        let (mut xb, yb) = stage_b(train)?;
        let (mut xvb, yvb) = stage_b(val)?;
        let norm_b = Standardizer::fit(&xb, n)?;
        norm_b.apply(&mut xb);
        norm_b.apply(&mut xvb);
        let mut net_b = Network::new(spec_b, Init::Glorot, cfg.seed.wrapping_add(1))?;
        let report_b = nn::fit(&mut net_b, &TrainSet::new(xb, n, yb)?, &TrainSet::new(xvb, n, yvb)?, loss_b, cfg)?;
        let pipeline = Self {
            model_a: Predictor {
                net: net_a,
                features: Features::Gains,
                normalizer: norm_a,
                map: OutputMap { slots: (0..u * n).collect() },
                loss: LossSpec::Bce,
            },
            model_b: Predictor {
                net: net_b,
                features: Features::Gains,
                normalizer: norm_b,
                map: OutputMap { slots: (0..n).collect() },
                loss: loss_b.clone(),
            },
            num_users: u,
            num_subcarriers: n,
        };
        Ok((pipeline, report_a, report_b))
    }

    /// Relative sum rate (percent) against each sample's label.
    pub fn relative_rates(&self, samples: &[LabeledSample], gen: &GenConfig) -> Result<Vec<f64>> {
        samples
            .iter()
            .map(|s| {
                let label = s.label.as_ref().ok_or_else(|| Error::Config("dataset not labeled".into()))?;
                let (_, alloc) = self.predict(&s.gains, &gen.network)?;
                let rate = envgen::model_rate(gen, &s.gains, &alloc, &s.association)?;
                relative_sum_rate(rate, label.rate)
            })
            .collect()
    }
}

/// Unsupervised multi-cell training contexts (equal load per cell).
pub fn sm3_contexts(samples: &[LabeledSample], cfg: &NetworkConfig) -> Vec<nn::Sm3Context> {
    samples
        .iter()
        .map(|s| nn::Sm3Context {
            gains: s.gains.clone(),
            association: s.association.clone(),
            alpha: optim::LoadMatrix::equal_share(cfg, &s.association),
        })
        .collect()
}

/// Trains a multi-cell power net with the unsupervised rate loss.
pub fn train_sm3_model(
    spec: ModelSpec,
    train: &[LabeledSample],
    val: &[LabeledSample],
    gen: &GenConfig,
    beta: f64,
    cfg: &TrainConfig,
) -> Result<(Predictor, nn::FitReport)> {
    let (xt, norm) = feature_matrix(train, Features::GainsAndLoad, None)?;
    let (xv, _) = feature_matrix(val, Features::GainsAndLoad, Some(&norm))?;
    let dim = norm.mean.len();
    let loss = LossSpec::UnsupervisedSm3 { beta, network: gen.network.clone() };
    let train_set = TrainSet::new(xt, dim, Targets::Sm3(sm3_contexts(train, &gen.network)))?;
    let val_set = TrainSet::new(xv, dim, Targets::Sm3(sm3_contexts(val, &gen.network)))?;
    let mut net = Network::new(spec, Init::Glorot, cfg.seed)?;
    let report = nn::fit(&mut net, &train_set, &val_set, &loss, cfg)?;
    Ok((Predictor { net, features: Features::GainsAndLoad, normalizer: norm, map: OutputMap::all(&gen.network), loss }, report))
}

/// How the served model is maintained over the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServingMode {
    /// The initial model is never retrained.
    Frozen,
    /// Serving stops while the replacement is trained.
    Offline,
    /// A second copy retrains while the first keeps serving.
    SemiOnline,
}

impl ServingMode {
    pub fn id(self) -> &'static str {
        match self {
            ServingMode::Frozen => "frozen",
            ServingMode::Offline => "offline",
            ServingMode::SemiOnline => "semi-online",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiOnlineConfig {
    /// Samples between snapshot pushes while retraining.
    pub update_period: usize,
    /// Retrain when `R̄` falls below this fraction of its plateau.
    pub retrain_trigger: f64,
    /// Moving-average window `W`.
    pub window: usize,
    /// Samples gathered for one retraining.
    pub retrain_samples: usize,
    pub max_retrains: usize,
    pub train: TrainConfig,
}

impl Default for SemiOnlineConfig {
    fn default() -> Self {
        Self {
            update_period: 1000,
            retrain_trigger: 0.85,
            window: 1000,
            retrain_samples: 5000,
            max_retrains: 1,
            train: TrainConfig::default(),
        }
    }
}

impl SemiOnlineConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.update_period >= 1, Config, "update_period must be >= 1");
        ensure!(self.retrain_trigger > 0.0 && self.retrain_trigger < 1.0, Config, "retrain_trigger must lie in (0, 1)");
        ensure!(self.window >= 1 && self.retrain_samples >= 2, Config, "window and retrain_samples must be positive");
        self.train.validate()
    }
}

/// One row of a serving trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: usize,
    pub r_hat: f64,
    pub r_bar: f64,
    /// True while a replacement model is being trained.
    pub retraining: bool,
    pub snapshot_id: usize,
}

/// Source of `(sample, optimal rate)` pairs over time.
pub struct SampleStream {
    before: Regime,
    after: Regime,
    shift_at: usize,
    seed: u64,
    len: usize,
}

/// One environment of a stream: generator settings and the pairs it draws from.
#[derive(Debug, Clone, PartialEq)]
pub struct Regime {
    pub gen: GenConfig,
    pub spec: NonStationaritySpec,
}

impl SampleStream {
    /// `len` samples drawn from `before` until index `shift_at`, then from
    /// `after`. Both regimes must share the system model and network.
    pub fn new(before: Regime, after: Regime, shift_at: usize, len: usize, seed: u64) -> Result<Self> {
        ensure!(
            before.gen.model == after.gen.model && before.gen.network == after.gen.network,
            Config,
            "stream regimes must share the system model and network"
        );
        Ok(Self { before, after, shift_at, seed, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Labeled sample `t` (generation and labeling are pure in `t`).
    pub fn get(&self, t: usize) -> Result<LabeledSample> {
        let regime = if t < self.shift_at { &self.before } else { &self.after };
        let mut s = envgen::generate_sample(&regime.gen, &regime.spec, t as u64, self.seed)?;
        let labeler = Labeler::for_model(regime.gen.model);
        s.label = Some(envgen::label_sample(labeler, &regime.gen, &s, self.seed)?);
        Ok(s)
    }

    /// Generator settings of the pre-shift regime (model and network are shared).
    pub fn gen(&self) -> &GenConfig {
        &self.before.gen
    }
}

fn serve(predictor: &Predictor, s: &LabeledSample, gen: &GenConfig) -> Result<f64> {
    let label = s.label.as_ref().ok_or_else(|| Error::Config("stream sample is not labeled".into()))?;
    let alloc = predictor.allocate(&s.gains, &s.association, &gen.network)?;
    relative_sum_rate(envgen::model_rate(gen, &s.gains, &alloc, &s.association)?, label.rate)
}

/// Fine-tunes a copy of `base` on `data` with its training loss (last 20 %
/// held out for validation).
pub fn retrain(base: &Predictor, data: &[LabeledSample], gen: &GenConfig, cfg: &TrainConfig) -> Result<Predictor> {
    ensure!(data.len() >= 2, Param, "retraining needs at least two samples");
    let n_val = (data.len() / 5).max(1);
    let (train, val) = data.split_at(data.len() - n_val);
    let (xt, _) = feature_matrix(train, base.features, Some(&base.normalizer))?;
    let (xv, _) = feature_matrix(val, base.features, Some(&base.normalizer))?;
    let dim = base.normalizer.mean.len();
    let train_set = TrainSet::new(xt, dim, power_targets(train, &base.map, &gen.network)?)?;
    let val_set = TrainSet::new(xv, dim, power_targets(val, &base.map, &gen.network)?)?;
    let mut net = base.net.clone();
    nn::fit(&mut net, &train_set, &val_set, &base.loss, cfg)?;
    Ok(Predictor { net, ..base.clone() })
}

/// Trigger logic shared by the deterministic and threaded harnesses.
struct Monitor {
    window: usize,
    threshold: f64,
    r_hats: Vec<f64>,
    plateau: Option<f64>,
    since_swap: usize,
}

impl Monitor {
    fn new(cfg: &SemiOnlineConfig) -> Self {
        Self { window: cfg.window, threshold: cfg.retrain_trigger, r_hats: Vec::new(), plateau: None, since_swap: 0 }
    }

    /// Records `r_hat`; returns `(R̄_t, trigger)`.
    fn push(&mut self, r_hat: f64, serving: bool) -> (f64, bool) {
        self.r_hats.push(r_hat);
        let lo = self.r_hats.len().saturating_sub(self.window);
        let tail = &self.r_hats[lo..];
        let r_bar = tail.iter().sum::<f64>() / tail.len() as f64;
        if !serving {
            return (r_bar, false);
        }
        self.since_swap += 1;
        if self.since_swap == self.window {
            self.plateau = Some(r_bar);
        }
        let trigger = matches!(self.plateau, Some(p) if self.since_swap > self.window && r_bar < self.threshold * p);
        (r_bar, trigger)
    }

    fn swapped(&mut self) {
        self.since_swap = 0;
        self.plateau = None;
    }
}

/// Deterministic single-threaded run of one serving mode over the stream.
///
/// Offline mode scores zero while it gathers `retrain_samples` new samples and
/// retrains. Semi-online mode keeps serving the old snapshot while the trainer
/// copy gathers the same samples, pushing a snapshot trained on everything
/// gathered so far every `update_period` samples; its final snapshot equals the
/// offline replacement.
pub fn semi_online_run(stream: &SampleStream, initial: &Predictor, mode: ServingMode, cfg: &SemiOnlineConfig) -> Result<Vec<TracePoint>> {
    cfg.validate()?;
    let gen = stream.gen().clone();
    let mut serving = initial.clone();
    let mut snapshot_id = 0;
    let mut monitor = Monitor::new(cfg);
    let mut retrains = 0;
    // Samples gathered since the trigger, and the model the retraining starts from.
    let mut gathering: Option<(Vec<LabeledSample>, Predictor)> = None;
    let mut trace = Vec::with_capacity(stream.len());
    for t in 0..stream.len() {
        let sample = stream.get(t)?;
        let offline_gap = mode == ServingMode::Offline && gathering.is_some();
        let r_hat = if offline_gap { 0.0 } else { serve(&serving, &sample, &gen)? };
        let retraining = gathering.is_some();
        if let Some((data, base)) = gathering.as_mut() {
            data.push(sample);
            let done = data.len() >= cfg.retrain_samples;
            if done || (mode == ServingMode::SemiOnline && data.len() % cfg.update_period == 0) {
                serving = retrain(base, data, &gen, &cfg.train)?;
                snapshot_id += 1;
            }
            if done {
                gathering = None;
                monitor.swapped();
            }
        }
        let (r_bar, trigger) = monitor.push(r_hat, !retraining);
        trace.push(TracePoint { t, r_hat, r_bar, retraining, snapshot_id });
        if trigger && mode != ServingMode::Frozen && retrains < cfg.max_retrains && gathering.is_none() {
            retrains += 1;
            gathering = Some((Vec::with_capacity(cfg.retrain_samples), serving.clone()));
        }
    }
    Ok(trace)
}

/// Two-thread semi-online run: the predictor never blocks and picks up the
/// trainer's immutable snapshots as they arrive. Timing-dependent, so the
/// trace is not reproducible bit for bit.
pub fn semi_online_threaded(stream: &SampleStream, initial: &Predictor, cfg: &SemiOnlineConfig) -> Result<Vec<TracePoint>> {
    cfg.validate()?;
    let gen = stream.gen().clone();
    let (sample_tx, sample_rx) = mpsc::channel::<Option<LabeledSample>>();
    let (snap_tx, snap_rx) = mpsc::channel::<(usize, Arc<Predictor>)>();
    std::thread::scope(|scope| {
        let trainer = {
            let gen = gen.clone();
            let base = initial.clone();
            let cfg = cfg.clone();
            scope.spawn(move || -> Result<()> {
                let mut data = Vec::new();
                let mut id = 0;
                // `None` marks the trigger; samples before it are ignored.
                let mut active = false;
                while let Ok(msg) = sample_rx.recv() {
                    match msg {
                        None => active = true,
                        Some(s) if active && data.len() < cfg.retrain_samples => {
                            data.push(s);
                            if data.len() % cfg.update_period == 0 || data.len() == cfg.retrain_samples {
                                id += 1;
                                let snap = retrain(&base, &data, &gen, &cfg.train)?;
                                if snap_tx.send((id, Arc::new(snap))).is_err() {
                                    break;
                                }
                            }
                        }
                        Some(_) => {}
                    }
                }
                Ok(())
            })
        };
        let mut serving = Arc::new(initial.clone());
        let mut snapshot_id = 0;
        let mut monitor = Monitor::new(cfg);
        let mut triggered = false;
        let mut trace = Vec::with_capacity(stream.len());
        for t in 0..stream.len() {
            while let Ok((id, snap)) = snap_rx.try_recv() {
                serving = snap;
                snapshot_id = id;
                monitor.swapped();
            }
            let sample = stream.get(t)?;
            let r_hat = serve(&serving, &sample, &gen)?;
            let retraining = triggered && snapshot_id == 0;
            if triggered {
                sample_tx.send(Some(sample)).ok();
            }
            let (r_bar, trigger) = monitor.push(r_hat, true);
            trace.push(TracePoint { t, r_hat, r_bar, retraining, snapshot_id });
            if trigger && !triggered {
                triggered = true;
                sample_tx.send(None).ok();
            }
        }
        drop(sample_tx);
        trainer.join().map_err(|_| Error::Runtime("trainer thread panicked".into()))??;
        Ok(trace)
    })
}

/// Mean of `R̂` over `range` of a trace.
pub fn trace_mean(trace: &[TracePoint], range: std::ops::Range<usize>) -> f64 {
    let slice = &trace[range.start.min(trace.len())..range.end.min(trace.len())];
    slice.iter().map(|p| p.r_hat).sum::<f64>() / slice.len().max(1) as f64
}

/// Longest run of consecutive zero `R̂` values.
pub fn longest_zero_run(trace: &[TracePoint]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for p in trace {
        run = if p.r_hat == 0.0 { run + 1 } else { 0 };
        best = best.max(run);
    }
    best
}

/// Recomputes `R̄` over a trace with window `w` (for reporting).
pub fn trace_moving_avg(trace: &[TracePoint], w: usize) -> Result<Vec<f64>> {
    moving_avg(&trace.iter().map(|p| p.r_hat).collect::<Vec<_>>(), w)
}

/// Wall time of running `predictor` on every sample, per sample.
pub fn prediction_latency(predictor: &Predictor, samples: &[LabeledSample]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let inputs: Vec<Vec<f64>> = samples.iter().map(|s| predictor.inputs(&s.gains, &s.association)).collect();
    let start = Instant::now();
    for x in &inputs {
        let _ = predictor.net.forward(x);
    }
    Some(start.elapsed().as_secs_f64() / samples.len() as f64)
}

/// Per-sample, per-BS raw power totals of `predictor` as budget fractions.
pub fn raw_bs_totals(predictor: &Predictor, samples: &[LabeledSample], cfg: &NetworkConfig) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| Ok(bs_fraction_totals(&predictor.fractions(&s.gains, &s.association)?, &predictor.map, &s.association, cfg)))
        .collect()
}

/// Relative budget overshoot that counts as a violation.
pub const VIOLATION_TOL: f64 = 0.01;

/// Fraction of samples whose raw total exceeds `(1 + tol)` of the budget at any BS.
pub fn violation_frequency(totals: &[Vec<f64>], tol: f64) -> f64 {
    if totals.is_empty() {
        return 0.0;
    }
    let violating = totals.iter().filter(|t| t.iter().any(|&x| x > 1.0 + tol)).count();
    violating as f64 / totals.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer};

    #[test]
    fn decode_cases() {
        let one_hot = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(assignment_decode(&one_hot, 2, 2).unwrap().single(), &[0, 1]);
        assert_eq!(assignment_decode(&[0.5; 6], 3, 2).unwrap().single(), &[0, 0]);
    }

    #[test]
    fn allocation_projection() {
        let cfg = NetworkConfig::new(1, 1, 2).with_power(2.0, 1.0);
        let map = OutputMap::all(&cfg);
        let assoc = Association::single_cell(1);
        let a = to_allocation(&[0.2, 0.3], &map, &assoc, &cfg).unwrap();
        assert_eq!(a.p, vec![0.4, 0.6]);
        let b = to_allocation(&[1.0, 1.0], &map, &assoc, &cfg).unwrap();
        assert_eq!(b.p, vec![1.0, 1.0]);
        let c = to_allocation(&[-0.5, 0.5], &map, &assoc, &cfg).unwrap();
        assert_eq!(c.p, vec![0.0, 1.0]);
    }

    #[test]
    fn paired_map_drives_own_links() {
        let cfg = NetworkConfig::new(2, 2, 1).with_power(1.0, 1.0);
        let a = to_allocation(&[0.5, 0.25], &OutputMap::paired(&cfg), &Association::paired(2), &cfg).unwrap();
        assert_eq!(a.p, vec![0.5, 0.0, 0.0, 0.25]);
    }

    #[test]
    fn single_user_pipeline_is_model_b() {
        let n = 4;
        let cfg = NetworkConfig::new(1, 1, n).with_power(1.0, 1.0);
        let net_b = Network::new(ModelSpec::mlp(n, &[5], n, Activation::Relu, Activation::Sigmoid), Init::Glorot, 1).unwrap();
        let norm = Standardizer { mean: vec![0.0; n], std: vec![1.0; n] };
        let b = Predictor { net: net_b, features: Features::Gains, normalizer: norm.clone(), map: OutputMap::all(&cfg), loss: LossSpec::Mse };
        let a = Predictor {
            net: Network::new(ModelSpec::new(n, vec![Layer::dense(n, n)]).unwrap(), Init::Glorot, 2).unwrap(),
            features: Features::Gains,
            normalizer: norm,
            map: OutputMap::all(&cfg),
            loss: LossSpec::Bce,
        };
        let p = Pipeline { model_a: a, model_b: b.clone(), num_users: 1, num_subcarriers: n };
        let g = GainTensor::from_power(1, 1, n, &[1.0, 0.5, 0.2, 2.0]).unwrap();
        let (_, alloc) = p.predict(&g, &cfg).unwrap();
        let direct = b.allocate(&g, &Association::single_cell(1), &cfg).unwrap();
        assert_eq!(alloc.p, direct.p);
        assert!(alloc.is_feasible(cfg.p_max, 1e-12));
    }

    #[test]
    fn load_column_follows_association() {
        let g = GainTensor::from_power(2, 3, 2, &[1.0; 12]).unwrap();
        let assoc = Association { serving: vec![0, 1, 0] };
        let x = Features::GainsAndLoad.extract(&g, &assoc);
        assert_eq!(x.len(), 2 * 3 * 3);
        let load: Vec<f64> = x.chunks(3).map(|r| r[2]).collect();
        assert_eq!(load, vec![0.5, 0.0, 0.5, 0.0, 1.0, 0.0]);
        assert!(x.chunks(3).all(|r| r[0] == 0.0 && r[1] == 0.0));
    }

    #[test]
    fn violation_counting() {
        let cfg = NetworkConfig::new(1, 1, 2);
        let map = OutputMap::all(&cfg);
        let assoc = Association::single_cell(1);
        let outs = [[0.5, 0.5], [0.6, 0.5], [0.2, 0.1], [0.5, 0.505]];
        let totals: Vec<Vec<f64>> = outs.iter().map(|o| bs_fraction_totals(o, &map, &assoc, &cfg)).collect();
        assert_eq!(violation_frequency(&totals, 0.01), 0.25);
        // Unserved links do not count towards the budget.
        let two = NetworkConfig::new(2, 2, 1);
        let t = bs_fraction_totals(&[0.7, 0.9, 0.4, 0.3], &OutputMap::all(&two), &Association::paired(2), &two);
        assert_eq!(t, vec![0.7, 0.3]);
    }
}
