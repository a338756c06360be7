//! Dataset generation under a configurable degree of non-stationarity.
//!
//! A mobile user's channel is drawn from a subset of `k` (paths, waves) pairs
//! taken from the full `(L, M)` grid. Larger `k` means a more diverse
//! environment. Samples are pure functions of `(seed, index)`, so generation
//! and labeling run in parallel and the byte stream is reproducible.
//!
//! On disk a dataset is a directory with `manifest.json` and
//! `samples.ndjson` (one JSON record per line, gains as `re`/`im` arrays).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{self, FadingParams, FadingProcess, GainTensor, Geometry};
use crate::error::{ensure, Error, Result};
use crate::optim::{self, Association, LoadMatrix, NetworkConfig, PowerAllocation, SubcarrierAssignment, SystemModel};

/// Version of the on-disk layout.
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.ndjson";

/// A (paths, waves) pair.
pub type Pair = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairUniverse {
    pub l_max: usize,
    pub m_max: usize,
}

impl PairUniverse {
    pub fn new(l_max: usize, m_max: usize) -> Result<Self> {
        ensure!(l_max >= 1 && m_max >= 1, Param, "universe bounds must be >= 1, got ({l_max}, {m_max})");
        Ok(Self { l_max, m_max })
    }

    pub fn len(&self) -> usize {
        self.l_max * self.m_max
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pair at row-major position `i` (L outer, M inner).
    pub fn pair(&self, i: usize) -> Pair {
        (i / self.m_max + 1, i % self.m_max + 1)
    }

    pub fn position(&self, pair: Pair) -> Option<usize> {
        let (l, m) = pair;
        (1..=self.l_max).contains(&l).then_some(())?;
        (1..=self.m_max).contains(&m).then_some((l - 1) * self.m_max + (m - 1))
    }

    pub fn pairs(&self) -> Vec<Pair> {
        (0..self.len()).map(|i| self.pair(i)).collect()
    }
}

/// The k pairs a non-stationary user draws from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NonStationaritySpec {
    pub universe: PairUniverse,
    pub pairs: Vec<Pair>,
    pub seed: u64,
}

impl NonStationaritySpec {
    /// `k` distinct pairs, uniform without replacement.
    pub fn sample(universe: &PairUniverse, k: usize, seed: u64) -> Result<Self> {
        ensure!(
            k >= 1 && k <= universe.len(),
            Param,
            "k must lie in 1..={}, got {k}",
            universe.len()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, universe.len(), k).into_vec();
        picked.sort_unstable();
        Ok(Self { universe: universe.clone(), pairs: picked.into_iter().map(|i| universe.pair(i)).collect(), seed })
    }

    /// A stationary environment with a single pair.
    pub fn fixed(universe: &PairUniverse, pair: Pair) -> Result<Self> {
        ensure!(universe.position(pair).is_some(), Param, "pair {pair:?} lies outside the universe");
        Ok(Self { universe: universe.clone(), pairs: vec![pair], seed: 0 })
    }

    /// Every universe pair not in this subset (the unseen environment).
    pub fn complement(&self) -> Result<Self> {
        let pairs: Vec<Pair> =
            self.universe.pairs().into_iter().filter(|p| !self.pairs.contains(p)).collect();
        ensure!(!pairs.is_empty(), Config, "subset covers the whole universe; no unseen pairs remain");
        Ok(Self { universe: self.universe.clone(), pairs, seed: self.seed })
    }

    pub fn k(&self) -> usize {
        self.pairs.len()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.pairs.is_empty(), Config, "subset must contain at least one pair");
        for (i, p) in self.pairs.iter().enumerate() {
            ensure!(self.universe.position(*p).is_some(), Config, "pair {p:?} lies outside the universe");
            ensure!(!self.pairs[..i].contains(p), Config, "pair {p:?} appears twice");
        }
        Ok(())
    }
}

/// How BS/user positions enter the gains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Small-scale fading only, all users on BS 0.
    None,
    /// User `b` inside cell `b`, served by BS `b`.
    Paired,
    /// Users spread over the cells, served by the nearest BS.
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub layout: Layout,
    pub cell_radius_km: f64,
    pub inter_site_km: f64,
    /// Draw new user positions for every sample; otherwise positions are
    /// drawn once from the master seed.
    pub resample: bool,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { layout: Layout::None, cell_radius_km: 0.5, inter_site_km: 0.8, resample: true }
    }
}

/// Everything needed to turn `(seed, index)` into a channel sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub model: SystemModel,
    pub network: NetworkConfig,
    pub geometry: GeometryConfig,
    pub decay_db: f64,
    pub doppler_hz: f64,
    /// Fading blocks between consecutive samples.
    pub time_step: u64,
}

impl GenConfig {
    pub fn new(model: SystemModel, network: NetworkConfig) -> Self {
        Self {
            model,
            network,
            geometry: GeometryConfig::default(),
            decay_db: channel::DEFAULT_DECAY_DB,
            doppler_hz: channel::DEFAULT_DOPPLER_HZ,
            time_step: 1,
        }
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.geometry.layout = layout;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let net = &self.network;
        match self.model {
            SystemModel::Sm1 => ensure!(
                net.num_bs == 1 && net.num_users == 1,
                Config,
                "SM1 has one BS and one user"
            ),
            SystemModel::Sm2a => ensure!(net.num_bs == 1, Config, "SM2A is single-cell"),
            SystemModel::Sm2b => ensure!(
                net.num_bs == net.num_users && net.num_subcarriers == 1,
                Config,
                "SM2B pairs B BSs with B users on one carrier"
            ),
            SystemModel::Sm3 => {}
        }
        if self.geometry.layout == Layout::None {
            ensure!(net.num_bs == 1 || self.model == SystemModel::Sm2b, Config,
                "multi-cell models need a geometry layout");
        } else {
            ensure!(
                self.geometry.cell_radius_km > 0.0 && self.geometry.inter_site_km >= 0.0,
                Config,
                "cell radius must be positive"
            );
        }
        if self.geometry.layout == Layout::Paired {
            ensure!(net.num_bs == net.num_users, Config, "paired layout needs B = U");
        }
        ensure!(self.doppler_hz >= 0.0, Config, "Doppler must be nonnegative");
        Ok(())
    }

    fn fading(&self, pair: Pair) -> FadingParams {
        let mut params = FadingParams::new(pair.0, pair.1, self.network.num_subcarriers);
        params.decay_db = self.decay_db;
        params.doppler_hz = self.doppler_hz;
        params
    }

    fn geometry<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Option<Geometry>> {
        let g = &self.geometry;
        let sites = Geometry::bs_line(self.network.num_bs, g.inter_site_km);
        Ok(match g.layout {
            Layout::None => None,
            Layout::Paired => Some(Geometry::random_paired(sites, g.cell_radius_km, rng)?),
            Layout::Nearest => {
                Some(Geometry::random_nearest(sites, self.network.num_users, g.cell_radius_km, rng)?)
            }
        })
    }

    /// Association implied by the layout.
    pub fn default_association(&self) -> Association {
        match (self.geometry.layout, self.model) {
            (_, SystemModel::Sm2b) | (Layout::Paired, _) => Association::paired(self.network.num_bs),
            _ => Association::single_cell(self.network.num_users),
        }
    }
}

/// Reference output attached to a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub labeler: String,
    pub power: PowerAllocation,
    pub assignment: Option<SubcarrierAssignment>,
    /// Sum rate achieved by the label, bits/s/Hz.
    pub rate: f64,
}

/// One time step's gains plus an optional reference allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub index: u64,
    pub pair: Pair,
    pub gains: GainTensor,
    pub association: Association,
    pub label: Option<Label>,
    /// Why labeling failed, if it did. Failed samples stay in place.
    pub failure: Option<String>,
}

impl LabeledSample {
    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }
}

/// Mixes a sample index into the master seed for per-sample draws.
fn sample_rng(seed: u64, index: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(index);
    rng
}

const SALT_PAIR: u64 = 0x5EED_0001;
const SALT_GEOMETRY: u64 = 0x5EED_0002;
const SALT_LABEL: u64 = 0x5EED_0003;

/// Generates sample `index`; identical inputs give bit-identical output.
pub fn generate_sample(cfg: &GenConfig, spec: &NonStationaritySpec, index: u64, seed: u64) -> Result<LabeledSample> {
    let mut rng = sample_rng(seed, index, SALT_PAIR);
    let pair = spec.pairs[rng.gen_range(0..spec.pairs.len())];
    ensure!(
        pair.0 <= cfg.network.num_subcarriers,
        Config,
        "pair {pair:?} has more paths than the {} subcarriers",
        cfg.network.num_subcarriers
    );
    let geometry = if cfg.geometry.resample {
        cfg.geometry(&mut sample_rng(seed, index, SALT_GEOMETRY))?
    } else {
        cfg.geometry(&mut sample_rng(seed, 0, SALT_GEOMETRY))?
    };
    let net = &cfg.network;
    let params = cfg.fading(pair);
    let links = (0..net.num_bs)
        .flat_map(|b| (0..net.num_users).map(move |u| (b, u)))
        .map(|(b, u)| FadingProcess::new(&params, &mut channel::link_rng(seed, index, b, u)))
        .collect::<Result<Vec<_>>>()?;
    let t = index * cfg.time_step;
    let gains = channel::build_gain_tensor(geometry.as_ref(), &links, net.num_bs, net.num_users, net.num_subcarriers, t)?;
    let association = match &geometry {
        Some(g) => Association { serving: g.serving.clone() },
        None => cfg.default_association(),
    };
    Ok(LabeledSample { index, pair, gains, association, label: None, failure: None })
}

/// Samples `start..start + count`, generated in parallel and returned in index order.
pub fn generate_samples(
    cfg: &GenConfig,
    spec: &NonStationaritySpec,
    start: u64,
    count: usize,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    cfg.validate()?;
    spec.validate()?;
    (start..start + count as u64)
        .into_par_iter()
        .map(|i| generate_sample(cfg, spec, i, seed))
        .collect()
}

/// Time-correlated channels of one environment: the fading processes are
/// drawn once and sampled every `period_s` seconds.
#[derive(Debug, Clone)]
pub struct ChannelStream {
    cfg: GenConfig,
    seed: u64,
    links: Vec<FadingProcess>,
    geometry: Option<Geometry>,
    block_step: u64,
    counter: u64,
}

impl ChannelStream {
    /// Stream for a fixed pair. When `cfg.geometry.resample` is set, user
    /// positions are redrawn for every item while small-scale fading evolves.
    pub fn new(cfg: &GenConfig, pair: Pair, seed: u64, period_s: f64) -> Result<Self> {
        cfg.validate()?;
        ensure!(period_s >= 0.0, Param, "period must be nonnegative");
        let params = cfg.fading(pair);
        params.validate()?;
        ensure!(pair.0 <= cfg.network.num_subcarriers, Config, "pair {pair:?} has more paths than subcarriers");
        let net = &cfg.network;
        let links = (0..net.num_bs)
            .flat_map(|b| (0..net.num_users).map(move |u| (b, u)))
            .map(|(b, u)| FadingProcess::new(&params, &mut channel::link_rng(seed, u64::MAX, b, u)))
            .collect::<Result<Vec<_>>>()?;
        let geometry = cfg.geometry(&mut sample_rng(seed, u64::MAX, SALT_GEOMETRY))?;
        let block_step = (period_s / params.block_duration_s).round() as u64;
        Ok(Self { cfg: cfg.clone(), seed, links, geometry, block_step, counter: 0 })
    }

    /// Gains and association of the next period.
    pub fn next_sample(&mut self) -> Result<(GainTensor, Association)> {
        let i = self.counter;
        self.counter += 1;
        if self.cfg.geometry.resample && self.cfg.geometry.layout != Layout::None {
            self.geometry = self.cfg.geometry(&mut sample_rng(self.seed, i, SALT_GEOMETRY))?;
        }
        let net = &self.cfg.network;
        let gains = channel::build_gain_tensor(
            self.geometry.as_ref(),
            &self.links,
            net.num_bs,
            net.num_users,
            net.num_subcarriers,
            i * self.block_step,
        )?;
        let assoc = match &self.geometry {
            Some(g) => Association { serving: g.serving.clone() },
            None => self.cfg.default_association(),
        };
        Ok((gains, assoc))
    }

    pub fn position(&self) -> u64 {
        self.counter
    }
}

/// Reference algorithms usable as labelers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Labeler {
    #[serde(rename = "waterfill")]
    Waterfill,
    #[serde(rename = "greedy+waterfill")]
    GreedyWaterfill,
    #[serde(rename = "wmmse")]
    Wmmse,
    #[serde(rename = "iterative-sm3")]
    IterativeSm3,
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "maxpower")]
    Maxpower,
}

impl Labeler {
    pub const ALL: [Labeler; 6] = [
        Labeler::Waterfill,
        Labeler::GreedyWaterfill,
        Labeler::Wmmse,
        Labeler::IterativeSm3,
        Labeler::Random,
        Labeler::Maxpower,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Labeler::Waterfill => "waterfill",
            Labeler::GreedyWaterfill => "greedy+waterfill",
            Labeler::Wmmse => "wmmse",
            Labeler::IterativeSm3 => "iterative-sm3",
            Labeler::Random => "random",
            Labeler::Maxpower => "maxpower",
        }
    }

    /// The reference algorithm of each system model.
    pub fn for_model(model: SystemModel) -> Self {
        match model {
            SystemModel::Sm1 => Labeler::Waterfill,
            SystemModel::Sm2a => Labeler::GreedyWaterfill,
            SystemModel::Sm2b => Labeler::Wmmse,
            SystemModel::Sm3 => Labeler::IterativeSm3,
        }
    }
}

impl std::str::FromStr for Labeler {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Labeler::ALL
            .into_iter()
            .find(|l| l.id() == s)
            .ok_or_else(|| Error::Unknown { kind: "labeler", name: s.to_string() })
    }
}

impl std::fmt::Display for Labeler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Iteration limits of the iterative labelers.
pub const WMMSE_MAX_ITER: usize = 500;
pub const WMMSE_TOL: f64 = 1e-9;
pub const SM3_MAX_ITER: usize = 500;
pub const SM3_TOL: f64 = 1e-7;

/// Allocation of `labeler` for `sample`, with its assignment if it makes one.
pub fn label_sample(
    labeler: Labeler,
    cfg: &GenConfig,
    sample: &LabeledSample,
    seed: u64,
) -> Result<Label> {
    let net = &cfg.network;
    let assoc = &sample.association;
    let (power, assignment) = match labeler {
        Labeler::Waterfill => {
            ensure!(net.num_bs == 1 && net.num_users == 1, Config, "waterfill labels single-link samples");
            (optim::waterfill_sm1(&sample.gains, net)?, None)
        }
        Labeler::GreedyWaterfill => {
            let (a, p) = optim::greedy_waterfill(&sample.gains, net)?;
            (p, Some(a))
        }
        Labeler::Wmmse => {
            ensure!(cfg.model == SystemModel::Sm2b, Config, "wmmse labels SM2B samples");
            let b = net.num_bs;
            let g: Vec<f64> = (0..b * b).map(|i| sample.gains.power(i / b, i % b, 0)).collect();
            let solved = optim::wmmse(&g, b, net, WMMSE_MAX_ITER, WMMSE_TOL)?;
            let mut alloc = PowerAllocation::zeros(net);
            for (k, p) in solved.solution.into_iter().enumerate() {
                alloc.set(k, k, 0, p);
            }
            (alloc, None)
        }
        Labeler::IterativeSm3 => {
            let alpha = LoadMatrix::equal_share(net, assoc);
            (optim::iterative_sm3(&sample.gains, &alpha, assoc, net, SM3_MAX_ITER, SM3_TOL)?.solution, None)
        }
        Labeler::Random => {
            (optim::random_alloc(net, assoc, &mut sample_rng(seed, sample.index, SALT_LABEL)), None)
        }
        Labeler::Maxpower => (optim::maxpower_alloc(net, assoc), None),
    };
    ensure!(
        power.is_feasible(net.p_max, 1e-6),
        Runtime,
        "{labeler} produced an infeasible allocation for sample {}",
        sample.index
    );
    let rate = model_rate(cfg, &sample.gains, &power, assoc)?;
    Ok(Label { labeler: labeler.id().to_string(), power, assignment, rate })
}

/// Sum rate of `p` under the configured model (equal load for SM3).
pub fn model_rate(cfg: &GenConfig, gains: &GainTensor, p: &PowerAllocation, assoc: &Association) -> Result<f64> {
    let alpha = (cfg.model == SystemModel::Sm3).then(|| LoadMatrix::equal_share(&cfg.network, assoc));
    optim::rate(cfg.model, gains, p, alpha.as_ref(), assoc, &cfg.network)
}

/// Labeling outcome: wall time `t1` and the number of failed samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelReport {
    pub seconds: f64,
    pub per_sample: Option<f64>,
    pub failures: usize,
}

/// Labels every sample in parallel. Failures are recorded on the sample.
pub fn label_dataset(samples: &mut [LabeledSample], labeler: Labeler, cfg: &GenConfig, seed: u64) -> LabelReport {
    let start = Instant::now();
    samples.par_iter_mut().for_each(|s| match label_sample(labeler, cfg, s, seed) {
        Ok(label) => {
            s.label = Some(label);
            s.failure = None;
        }
        Err(e) => {
            s.label = None;
            s.failure = Some(e.to_string());
        }
    });
    let seconds = start.elapsed().as_secs_f64();
    let failures = samples.iter().filter(|s| s.failure.is_some()).count();
    LabelReport {
        seconds,
        per_sample: (!samples.is_empty()).then(|| seconds / samples.len() as f64),
        failures,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// 20 % / 20 % / 60 % of `total`, remainder to the test set.
    pub fn default_for(total: usize) -> Self {
        let train = total / 5;
        let val = total / 5;
        Self { train, val, test: total - train - val }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Contiguous prefix split in generation order.
pub fn split<T>(samples: &[T], counts: SplitCounts) -> Result<(&[T], &[T], &[T])> {
    ensure!(
        counts.total() <= samples.len(),
        Config,
        "split needs {} samples, dataset has {}",
        counts.total(),
        samples.len()
    );
    let (train, rest) = samples.split_at(counts.train);
    let (val, rest) = rest.split_at(counts.val);
    Ok((train, val, &rest[..counts.test]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub generator: GenConfig,
    pub subset: NonStationaritySpec,
    pub seed: u64,
    pub count: usize,
    pub split: SplitCounts,
    pub labeler: Option<String>,
    /// Labeling wall time in seconds, when labeled.
    pub label_seconds: Option<f64>,
    /// SHA-256 of the samples file.
    pub samples_sha256: String,
}

impl DatasetManifest {
    /// SHA-256 over the canonical JSON form of the manifest.
    pub fn hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("manifest serializes"))
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A manifest with its samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<LabeledSample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    index: u64,
    pair: Pair,
    t: u64,
    re: Vec<f64>,
    im: Vec<f64>,
    serving: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<LabelRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    failure: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    labeler: String,
    power: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    assignment: Option<Vec<Vec<usize>>>,
    rate: f64,
}

impl Dataset {
    /// Wraps freshly generated samples with the default split.
    pub fn new(generator: GenConfig, subset: NonStationaritySpec, seed: u64, samples: Vec<LabeledSample>) -> Self {
        let labeler = samples.first().and_then(|s| s.label.as_ref()).map(|l| l.labeler.clone());
        let manifest = DatasetManifest {
            version: FORMAT_VERSION,
            generator,
            subset,
            seed,
            count: samples.len(),
            split: SplitCounts::default_for(samples.len()),
            labeler,
            label_seconds: None,
            samples_sha256: String::new(),
        };
        Self { manifest, samples }
    }

    pub fn is_labeled(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.label.is_some() || s.failure.is_some())
    }

    pub fn split(&self) -> Result<(&[LabeledSample], &[LabeledSample], &[LabeledSample])> {
        split(&self.samples, self.manifest.split)
    }

    fn encode_samples(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for s in &self.samples {
            let record = SampleRecord {
                index: s.index,
                pair: s.pair,
                t: s.gains.time_index,
                re: s.gains.gains.iter().map(|g| g.re).collect(),
                im: s.gains.gains.iter().map(|g| g.im).collect(),
                serving: s.association.serving.clone(),
                label: s.label.as_ref().map(|l| LabelRecord {
                    labeler: l.labeler.clone(),
                    power: l.power.p.clone(),
                    assignment: l.assignment.as_ref().map(|a| a.assign.clone()),
                    rate: l.rate,
                }),
                failure: s.failure.clone(),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    /// Writes `manifest.json` and `samples.ndjson` into `dir` (created if needed).
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let bytes = self.encode_samples()?;
        self.manifest.count = self.samples.len();
        self.manifest.samples_sha256 = hex_digest(&bytes);
        let mut w = BufWriter::new(fs::File::create(dir.join(SAMPLES_FILE))?);
        w.write_all(&bytes)?;
        w.flush()?;
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: format!("{MANIFEST_FILE}: {e}"),
        })?;
        ensure!(
            manifest.version == FORMAT_VERSION,
            Config,
            "unsupported dataset version {} (expected {FORMAT_VERSION})",
            manifest.version
        );
        let net = &manifest.generator.network;
        let (nb, nu, nn) = (net.num_bs, net.num_users, net.num_subcarriers);
        let reader = BufReader::new(fs::File::open(dir.join(SAMPLES_FILE))?);
        let mut hasher = Sha256::new();
        let mut samples = Vec::with_capacity(manifest.count);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            hasher.update(line.as_bytes());
            hasher.update(b"\n");
            let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
            let r: SampleRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            if r.re.len() != nb * nu * nn || r.im.len() != r.re.len() || r.serving.len() != nu {
                return Err(parse_err(format!("record does not match the {nb}x{nu}x{nn} network")));
            }
            let mut gains = GainTensor::from_vec(
                nb,
                nu,
                nn,
                r.re.iter().zip(&r.im).map(|(&re, &im)| Complex64::new(re, im)).collect(),
            )?;
            gains.time_index = r.t;
            let label = match r.label {
                Some(l) => Some(Label {
                    labeler: l.labeler,
                    power: PowerAllocation::from_vec(net, l.power).map_err(|e| parse_err(e.to_string()))?,
                    assignment: l.assignment.map(|assign| SubcarrierAssignment { num_users: nu, assign }),
                    rate: l.rate,
                }),
                None => None,
            };
            samples.push(LabeledSample {
                index: r.index,
                pair: r.pair,
                gains,
                association: Association { serving: r.serving },
                label,
                failure: r.failure,
            });
        }
        let digest: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        ensure!(
            digest == manifest.samples_sha256,
            Config,
            "samples file hash {digest} does not match the manifest"
        );
        ensure!(
            samples.len() == manifest.count,
            Config,
            "manifest lists {} samples, file has {}",
            manifest.count,
            samples.len()
        );
        Ok(Self { manifest, samples })
    }
}
