//! Metrics, timing and experiment drivers that write CSV result sets.
//!
//! Every driver returns named [`Table`]s; [`run_experiment`] writes them to
//! `results/<id>/<run-id>/<name>.csv` next to a `run.json` describing the run.
//! Columns ending in `_s` hold wall-clock seconds and are the only columns
//! that differ between two runs with the same seeds.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dqn::{DqnConfig, EpsilonSchedule};
use crate::error::{ensure, Error, Result};
use crate::nn::{AdamConfig, TrainConfig};
use crate::pipeline::SemiOnlineConfig;

mod drivers;

pub use drivers::{
    ageing_traces, cs3_cdf, dqn_curves, efficiency, sm1_point, sm1_violation, sm3_solver_time, AgeingRun, Cs3Cdf, DqnCurves, Efficiency, Sm1Point,
};

/// `100 · predicted / reference`.
pub fn relative_sum_rate(predicted: f64, reference: f64) -> Result<f64> {
    ensure!(reference > 0.0 && reference.is_finite(), Domain, "reference rate must be positive, got {reference}");
    ensure!(predicted.is_finite(), Domain, "predicted rate is not finite");
    Ok(100.0 * predicted / reference)
}

/// Trailing mean over the last `w` values; the first `w - 1` points average
/// whatever history exists.
pub fn moving_avg(series: &[f64], w: usize) -> Result<Vec<f64>> {
    ensure!(w >= 1, Param, "window must be >= 1");
    let mut out = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for (t, &x) in series.iter().enumerate() {
        acc += x;
        if t >= w {
            acc -= series[t - w];
        }
        out.push(acc / (t + 1).min(w) as f64);
    }
    Ok(out)
}

/// Wall time of one phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseTime {
    pub seconds: f64,
    /// `None` for an empty workload.
    pub per_sample: Option<f64>,
}

/// Runs `work` over `samples` items and measures it on the monotonic clock.
pub fn time_phase<T>(samples: usize, work: impl FnOnce() -> T) -> (T, PhaseTime) {
    let start = Instant::now();
    let out = work();
    let seconds = start.elapsed().as_secs_f64();
    let per_sample = (samples > 0).then(|| seconds / samples as f64);
    (out, PhaseTime { seconds, per_sample })
}

/// Welch's t statistic of two independent samples.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(a.len() >= 2 && b.len() >= 2, Param, "Welch's t needs at least two values per sample");
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var / n)
    };
    let (ma, sa) = stats(a);
    let (mb, sb) = stats(b);
    let se = (sa + sb).sqrt();
    ensure!(se > 0.0, Domain, "both samples are constant");
    Ok((ma - mb) / se)
}

/// Arithmetic mean; NaN for an empty slice.
pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// One CSV field.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
    Empty,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Num(v) => write!(f, "{v}"),
            Cell::Text(s) => f.write_str(s),
            Cell::Empty => Ok(()),
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Num)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// Builds a table row from heterogeneous values.
#[macro_export]
macro_rules! row {
    ($($v:expr),* $(,)?) => {
        vec![$($crate::bench::Cell::from($v)),*]
    };
}

/// A rectangular result set with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        ensure!(row.len() == self.columns.len(), Shape, "row has {} fields, table {}", row.len(), self.columns.len());
        self.rows.push(row);
        Ok(())
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Unknown { kind: "column", name: name.to_string() })
    }

    /// Numeric column; empty and text fields read as NaN.
    pub fn numbers(&self, name: &str) -> Result<Vec<f64>> {
        let i = self.column_index(name)?;
        Ok(self
            .rows
            .iter()
            .map(|r| match &r[i] {
                Cell::Int(v) => *v as f64,
                Cell::Num(v) => *v,
                _ => f64::NAN,
            })
            .collect())
    }

    pub fn texts(&self, name: &str) -> Result<Vec<String>> {
        let i = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[i].to_string()).collect())
    }

    /// Rows whose `column` equals `value`.
    pub fn filter(&self, column: &str, value: &str) -> Result<Table> {
        let i = self.column_index(column)?;
        Ok(Table {
            columns: self.columns.clone(),
            rows: self.rows.iter().filter(|r| r[i].to_string() == value).cloned().collect(),
        })
    }

    /// Copy without the wall-clock (`*_s`) columns.
    pub fn without_timings(&self) -> Table {
        let keep: Vec<usize> = (0..self.columns.len()).filter(|&i| !self.columns[i].ends_with("_s")).collect();
        Table {
            columns: keep.iter().map(|&i| self.columns[i].clone()).collect(),
            rows: self.rows.iter().map(|r| keep.iter().map(|&i| r[i].clone()).collect()).collect(),
        }
    }

    fn prepend(&mut self, name: &str, value: Cell) {
        self.columns.insert(0, name.to_string());
        for r in &mut self.rows {
            r.insert(0, value.clone());
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            let fields: Vec<String> = r.iter().map(|c| c.to_string()).collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Reads a CSV written by [`Table::write`].
    pub fn read(path: &Path) -> Result<Table> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse { line: 1, msg: "empty file".into() })?;
        let columns: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<Cell> = line
                .split(',')
                .map(|f| {
                    if f.is_empty() {
                        Cell::Empty
                    } else if let Ok(v) = f.parse::<i64>() {
                        Cell::Int(v)
                    } else if let Ok(v) = f.parse::<f64>() {
                        Cell::Num(v)
                    } else {
                        Cell::Text(f.to_string())
                    }
                })
                .collect();
            if row.len() != columns.len() {
                return Err(Error::Parse { line: i + 2, msg: format!("expected {} fields, got {}", columns.len(), row.len()) });
            }
            rows.push(row);
        }
        Ok(Table { columns, rows })
    }
}

/// The experiment drivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    Cs1Subcarriers,
    Cs1Trainsize,
    Cs1Layers,
    Cs1Nonstat,
    Ageing,
    SemiOnline,
    Cs2Nonstat,
    Cs2bUsers,
    DqnCurves,
    Cs3Time,
    Cs3Rate,
    Cs3Cdf,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 12] = [
        ExperimentId::Cs1Subcarriers,
        ExperimentId::Cs1Trainsize,
        ExperimentId::Cs1Layers,
        ExperimentId::Cs1Nonstat,
        ExperimentId::Ageing,
        ExperimentId::SemiOnline,
        ExperimentId::Cs2Nonstat,
        ExperimentId::Cs2bUsers,
        ExperimentId::DqnCurves,
        ExperimentId::Cs3Time,
        ExperimentId::Cs3Rate,
        ExperimentId::Cs3Cdf,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ExperimentId::Cs1Subcarriers => "cs1-subcarriers",
            ExperimentId::Cs1Trainsize => "cs1-trainsize",
            ExperimentId::Cs1Layers => "cs1-layers",
            ExperimentId::Cs1Nonstat => "cs1-nonstat",
            ExperimentId::Ageing => "ageing",
            ExperimentId::SemiOnline => "semi-online",
            ExperimentId::Cs2Nonstat => "cs2-nonstat",
            ExperimentId::Cs2bUsers => "cs2b-users",
            ExperimentId::DqnCurves => "dqn-curves",
            ExperimentId::Cs3Time => "cs3-time",
            ExperimentId::Cs3Rate => "cs3-rate",
            ExperimentId::Cs3Cdf => "cs3-cdf",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for ExperimentId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .into_iter()
            .find(|e| e.id() == s)
            .ok_or_else(|| Error::Unknown { kind: "experiment", name: s.to_string() })
    }
}

/// The mobile-user stream of the ageing experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub len: usize,
    /// Index of the first post-shift sample.
    pub shift_at: usize,
    /// `(L, M)` of the stationary regime.
    pub stationary_pair: (usize, usize),
}

/// Settings of one experiment run. Each driver reads the fields it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: ExperimentId,
    /// Every driver runs once per seed; tables gain a leading `seed` column.
    pub seeds: Vec<u64>,
    /// N sweep.
    pub subcarriers: Vec<usize>,
    /// U sweep; the interference-channel sweep uses B = U.
    pub users: Vec<usize>,
    /// B of the multi-cell experiments.
    pub base_stations: usize,
    /// Non-stationarity factors.
    pub k: Vec<usize>,
    pub train_sizes: Vec<usize>,
    pub hidden_layers: Vec<usize>,
    pub hidden_width: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Path-count and wave-count bounds of the pair universe (`l_max` is
    /// clipped to N).
    pub l_max: usize,
    pub m_max: usize,
    /// Per-BS budget in watts.
    pub p_max: f64,
    /// Noise variance in watts.
    pub sigma2: f64,
    pub train: TrainConfig,
    /// Weight `β` of the power-violation term, with powers in units of the
    /// budget. Used by the single-cell and multi-user power nets and by the
    /// unsupervised multi-cell loss; the interference-channel net trains on
    /// plain MSE.
    pub beta: f64,
    pub stream: StreamConfig,
    pub semi_online: SemiOnlineConfig,
    pub dqn: DqnConfig,
    pub dqn_episodes: usize,
    pub eval_episodes: usize,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Desk-scale defaults of `id`.
    pub fn desk(id: ExperimentId) -> Self {
        let train = TrainConfig { max_epochs: 30, patience: 30, ..TrainConfig::default() };
        let mut c = Self {
            id,
            seeds: vec![1],
            subcarriers: vec![16],
            users: vec![1],
            base_stations: 1,
            k: vec![10],
            train_sizes: vec![5000],
            hidden_layers: vec![5],
            hidden_width: 300,
            val_size: 1000,
            test_size: 1000,
            l_max: 32,
            m_max: 128,
            p_max: 10e-6,
            sigma2: 4e-19,
            train,
            beta: 1.0,
            stream: StreamConfig { len: 10_000, shift_at: 2000, stationary_pair: (6, 20) },
            semi_online: SemiOnlineConfig::default(),
            dqn: DqnConfig {
                warmup_episodes: 100,
                epsilon: EpsilonSchedule { start: 0.8, end: 0.01, anneal_episodes: 1000 },
                adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
                reward_scale: 0.05,
                ..DqnConfig::default()
            },
            dqn_episodes: 5000,
            eval_episodes: 200,
            out_dir: PathBuf::from("results"),
        };
        match id {
            ExperimentId::Cs1Subcarriers => c.subcarriers = vec![16, 32, 64],
            ExperimentId::Cs1Trainsize => c.train_sizes = vec![1000, 2000, 5000, 10_000, 20_000],
            ExperimentId::Cs1Layers => c.hidden_layers = vec![1, 3, 5, 7],
            ExperimentId::Cs1Nonstat => c.k = vec![1, 10, 100],
            ExperimentId::Ageing | ExperimentId::SemiOnline => {
                c.subcarriers = vec![32];
                c.k = vec![128];
                c.hidden_layers = vec![3];
                c.train.max_epochs = 15;
                c.train.patience = 15;
                c.semi_online.train = c.train.clone();
            }
            ExperimentId::Cs2Nonstat => {
                c.users = vec![4];
                c.subcarriers = vec![8];
                c.k = vec![1, 10, 100];
            }
            ExperimentId::Cs2bUsers | ExperimentId::DqnCurves => {
                c.users = if id == ExperimentId::DqnCurves { vec![3] } else { vec![5, 10, 20] };
                c.subcarriers = vec![1];
                c.l_max = 1;
                c.sigma2 = 1e-20;
                c.train_sizes = vec![2000];
                c.test_size = 200;
                c.val_size = 200;
                if id == ExperimentId::Cs2bUsers {
                    c.dqn_episodes = 300;
                }
            }
            ExperimentId::Cs3Time | ExperimentId::Cs3Rate | ExperimentId::Cs3Cdf => {
                c.base_stations = 2;
                c.users = vec![4];
                c.subcarriers = if id == ExperimentId::Cs3Cdf { vec![8] } else { vec![4, 8, 16] };
                c.p_max = 50.0;
                c.sigma2 = 1e-14;
                c.beta = 3e4;
                c.val_size = 500;
                c.test_size = 200;
                c.train.max_epochs = 100;
                c.train.patience = 100;
                if id == ExperimentId::Cs3Time {
                    c.train_sizes = vec![1000];
                    c.test_size = 50;
                    c.train.max_epochs = 10;
                    c.train.patience = 10;
                }
            }
        }
        c
    }

    /// Desk defaults of `id` overlaid with a JSON object; nested objects merge
    /// key by key and unknown keys are rejected.
    pub fn with_overlay(id: ExperimentId, overlay: &serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::desk(id))?;
        merge(&mut base, overlay);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.seeds.is_empty(), Config, "seeds must not be empty");
        for (name, v) in [
            ("subcarriers", &self.subcarriers),
            ("users", &self.users),
            ("k", &self.k),
            ("train_sizes", &self.train_sizes),
            ("hidden_layers", &self.hidden_layers),
        ] {
            ensure!(!v.is_empty(), Config, "{name} sweep must not be empty");
            ensure!(v.iter().all(|&x| x >= 1), Config, "{name} values must be >= 1");
        }
        ensure!(self.base_stations >= 1 && self.hidden_width >= 1, Config, "base_stations and hidden_width must be >= 1");
        ensure!(self.val_size >= 1 && self.test_size >= 1, Config, "val_size and test_size must be >= 1");
        ensure!(self.l_max >= 1 && self.m_max >= 1, Config, "l_max and m_max must be >= 1");
        ensure!(self.p_max > 0.0 && self.sigma2 > 0.0, Config, "p_max and sigma2 must be positive");
        ensure!(self.beta >= 0.0, Config, "beta must be nonnegative");
        ensure!(
            self.stream.shift_at < self.stream.len,
            Config,
            "stream shift {} lies outside a stream of {}",
            self.stream.shift_at,
            self.stream.len
        );
        ensure!(self.eval_episodes >= 2, Config, "eval_episodes must be >= 2");
        self.train.validate()?;
        self.semi_online.validate()?;
        self.dqn.validate()
    }

    /// Short content hash, used in default run ids.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(4).map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(base: &mut serde_json::Value, overlay: &serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Named tables of one run.
pub type Tables = Vec<(String, Table)>;

/// Runs the driver of `cfg.id` for every seed without touching the disk.
pub fn collect(cfg: &ExperimentConfig) -> Result<Tables> {
    cfg.validate()?;
    let mut merged: Tables = Vec::new();
    for &seed in &cfg.seeds {
        for (name, mut table) in drivers::run(cfg, seed)? {
            table.prepend("seed", Cell::from(seed));
            match merged.iter_mut().find(|(n, _)| *n == name) {
                Some((_, t)) => t.rows.extend(table.rows),
                None => merged.push((name, table)),
            }
        }
    }
    Ok(merged)
}

/// Where a run was written and what it produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub tables: Tables,
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    id: ExperimentId,
    run_id: &'a str,
    seeds: &'a [u64],
    version: &'static str,
    files: Vec<String>,
    config: &'a ExperimentConfig,
}

/// Runs `cfg` and writes `<out_dir>/<id>/<run_id>/`. The default run id is
/// derived from the seeds and the config hash.
pub fn run_experiment(cfg: &ExperimentConfig, run_id: Option<&str>) -> Result<RunOutput> {
    let tables = collect(cfg)?;
    let default_id;
    let run_id = match run_id {
        Some(r) => r,
        None => {
            let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
            default_id = format!("s{}-{}", seeds.join("_"), cfg.hash());
            &default_id
        }
    };
    let dir = cfg.out_dir.join(cfg.id.id()).join(run_id);
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for (name, table) in &tables {
        let file = format!("{name}.csv");
        table.write(&dir.join(&file))?;
        files.push(file);
    }
    let meta = RunMetadata {
        id: cfg.id,
        run_id,
        seeds: &cfg.seeds,
        version: env!("CARGO_PKG_VERSION"),
        files,
        config: cfg,
    };
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&meta)?)?;
    log::info!("{} written to {}", cfg.id, dir.display());
    Ok(RunOutput { dir, tables })
}
