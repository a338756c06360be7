//! Objectives and classical allocators for the four system models.
//!
//! | model  | cells | users | carriers | SINR interference                    | rate term         |
//! |--------|-------|-------|----------|--------------------------------------|-------------------|
//! | `Sm1`  | 1     | 1     | N        | none                                 | `log2(1 + κγ)`    |
//! | `Sm2a` | 1     | U     | N        | none                                 | `log2(1 + γ)`     |
//! | `Sm2b` | B     | B     | 1        | instantaneous power of other BSs     | `log2(1 + γ)`     |
//! | `Sm3`  | B     | U     | N        | load-averaged power `q_b(n)`         | `log2(1 + γ)`     |
//!
//! Powers are in watts and indexed `(b, u, n)` like [`GainTensor`]. Only
//! links `(b, u)` where `b` serves `u` carry power.

use std::f64::consts::LN_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::GainTensor;
use crate::error::{ensure, Error, Result};

/// Default BS budget: 10 µW.
pub const DEFAULT_P_MAX_W: f64 = 10e-6;
/// Default noise variance: 1e-3 µW.
pub const DEFAULT_SIGMA2_W: f64 = 1e-9;
/// Default target bit-error rate.
pub const DEFAULT_OMEGA: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemModel {
    /// Single user, single cell, OFDM.
    Sm1,
    /// Multi-user single-cell OFDM.
    Sm2a,
    /// Multi-cell single-carrier, one user per BS.
    Sm2b,
    /// Multi-cell multi-user OFDM with load-averaged interference.
    Sm3,
}

impl std::str::FromStr for SystemModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sm1" => Ok(Self::Sm1),
            "sm2a" => Ok(Self::Sm2a),
            "sm2b" => Ok(Self::Sm2b),
            "sm3" => Ok(Self::Sm3),
            _ => Err(Error::Unknown { kind: "system model", name: s.to_string() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_bs: usize,
    pub num_users: usize,
    pub num_subcarriers: usize,
    /// Per-BS power budget in watts.
    pub p_max: f64,
    /// Noise variance in watts.
    pub sigma2: f64,
    /// Target bit-error rate of the M-QAM gap approximation.
    pub omega: f64,
}

impl NetworkConfig {
    pub fn new(num_bs: usize, num_users: usize, num_subcarriers: usize) -> Self {
        Self {
            num_bs,
            num_users,
            num_subcarriers,
            p_max: DEFAULT_P_MAX_W,
            sigma2: DEFAULT_SIGMA2_W,
            omega: DEFAULT_OMEGA,
        }
    }

    pub fn with_power(mut self, p_max: f64, sigma2: f64) -> Self {
        self.p_max = p_max;
        self.sigma2 = sigma2;
        self
    }

    /// SNR gap constant `κ = -1.5 / ln(5ω)`.
    pub fn kappa(&self) -> f64 {
        -1.5 / (5.0 * self.omega).ln()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.num_bs >= 1 && self.num_users >= 1 && self.num_subcarriers >= 1,
            Config,
            "network dimensions must be positive"
        );
        ensure!(self.p_max > 0.0 && self.p_max.is_finite(), Config, "p_max must be positive");
        ensure!(self.sigma2 > 0.0 && self.sigma2.is_finite(), Config, "sigma2 must be positive");
        ensure!(
            self.omega > 0.0 && self.omega < 0.2,
            Config,
            "omega must lie in (0, 0.2), got {}",
            self.omega
        );
        Ok(())
    }

    fn check_gains(&self, gains: &GainTensor) -> Result<()> {
        ensure!(
            gains.num_bs == self.num_bs
                && gains.num_users == self.num_users
                && gains.num_subcarriers == self.num_subcarriers,
            Shape,
            "gains are {}x{}x{}, network is {}x{}x{}",
            gains.num_bs,
            gains.num_users,
            gains.num_subcarriers,
            self.num_bs,
            self.num_users,
            self.num_subcarriers
        );
        Ok(())
    }

    pub fn slots(&self) -> usize {
        self.num_bs * self.num_users * self.num_subcarriers
    }
}

/// Serving BS of every user; the sets `U_b` are pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Association {
    pub serving: Vec<usize>,
}

impl Association {
    /// All users attached to BS 0.
    pub fn single_cell(num_users: usize) -> Self {
        Self { serving: vec![0; num_users] }
    }

    /// User `b` attached to BS `b`.
    pub fn paired(num_bs: usize) -> Self {
        Self { serving: (0..num_bs).collect() }
    }

    pub fn users_of(&self, b: usize) -> impl Iterator<Item = usize> + '_ {
        self.serving.iter().enumerate().filter(move |(_, &s)| s == b).map(|(u, _)| u)
    }

    #[inline]
    pub fn serves(&self, b: usize, u: usize) -> bool {
        self.serving[u] == b
    }

    pub fn validate(&self, cfg: &NetworkConfig) -> Result<()> {
        ensure!(
            self.serving.len() == cfg.num_users,
            Shape,
            "association covers {} users, network has {}",
            self.serving.len(),
            cfg.num_users
        );
        ensure!(
            self.serving.iter().all(|&b| b < cfg.num_bs),
            Config,
            "association references a BS outside 0..{}",
            cfg.num_bs
        );
        Ok(())
    }
}

/// Transmit powers `p_b^u(n)` in watts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerAllocation {
    pub num_bs: usize,
    pub num_users: usize,
    pub num_subcarriers: usize,
    pub p: Vec<f64>,
}

impl PowerAllocation {
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        Self {
            num_bs: cfg.num_bs,
            num_users: cfg.num_users,
            num_subcarriers: cfg.num_subcarriers,
            p: vec![0.0; cfg.slots()],
        }
    }

    pub fn from_vec(cfg: &NetworkConfig, p: Vec<f64>) -> Result<Self> {
        ensure!(p.len() == cfg.slots(), Shape, "expected {} powers, got {}", cfg.slots(), p.len());
        Ok(Self {
            num_bs: cfg.num_bs,
            num_users: cfg.num_users,
            num_subcarriers: cfg.num_subcarriers,
            p,
        })
    }

    #[inline]
    pub fn index(&self, b: usize, u: usize, n: usize) -> usize {
        (b * self.num_users + u) * self.num_subcarriers + n
    }

    #[inline]
    pub fn get(&self, b: usize, u: usize, n: usize) -> f64 {
        self.p[self.index(b, u, n)]
    }

    pub fn set(&mut self, b: usize, u: usize, n: usize, value: f64) {
        let i = self.index(b, u, n);
        self.p[i] = value;
    }

    /// Total power radiated by BS `b`.
    pub fn bs_total(&self, b: usize) -> f64 {
        let stride = self.num_users * self.num_subcarriers;
        self.p[b * stride..(b + 1) * stride].iter().sum()
    }

    pub fn bs_totals(&self) -> Vec<f64> {
        (0..self.num_bs).map(|b| self.bs_total(b)).collect()
    }

    /// Nonnegative and within every BS budget up to `rel_tol` relative slack.
    pub fn is_feasible(&self, p_max: f64, rel_tol: f64) -> bool {
        self.p.iter().all(|&x| x >= 0.0 && x.is_finite())
            && (0..self.num_bs).all(|b| self.bs_total(b) <= p_max * (1.0 + rel_tol))
    }

    /// Clamps negatives to zero, then scales each BS down uniformly if it
    /// exceeds the budget.
    pub fn project_budget(&mut self, p_max: f64) {
        for x in &mut self.p {
            if !(*x > 0.0) {
                *x = 0.0;
            }
        }
        let stride = self.num_users * self.num_subcarriers;
        for b in 0..self.num_bs {
            let block = &mut self.p[b * stride..(b + 1) * stride];
            let total: f64 = block.iter().sum();
            if total > p_max {
                let scale = p_max / total;
                block.iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
}

/// Subcarrier → user map per BS. Every subcarrier belongs to exactly one user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubcarrierAssignment {
    pub num_users: usize,
    /// `assign[b][n]` is the user holding subcarrier `n` of BS `b`.
    pub assign: Vec<Vec<usize>>,
}

impl SubcarrierAssignment {
    /// Assignment of the first (or only) BS.
    pub fn single(&self) -> &[usize] {
        &self.assign[0]
    }

    pub fn is_partition(&self) -> bool {
        self.assign.iter().all(|row| row.iter().all(|&u| u < self.num_users))
    }
}

/// Time-sharing fractions `α_b^u(n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadMatrix {
    pub num_bs: usize,
    pub num_users: usize,
    pub num_subcarriers: usize,
    pub alpha: Vec<f64>,
}

impl LoadMatrix {
    /// Equal time sharing among the users of each cell on every subcarrier.
    pub fn equal_share(cfg: &NetworkConfig, assoc: &Association) -> Self {
        let mut alpha = vec![0.0; cfg.slots()];
        for b in 0..cfg.num_bs {
            let users: Vec<usize> = assoc.users_of(b).collect();
            if users.is_empty() {
                continue;
            }
            let share = 1.0 / users.len() as f64;
            for &u in &users {
                for n in 0..cfg.num_subcarriers {
                    alpha[(b * cfg.num_users + u) * cfg.num_subcarriers + n] = share;
                }
            }
        }
        Self {
            num_bs: cfg.num_bs,
            num_users: cfg.num_users,
            num_subcarriers: cfg.num_subcarriers,
            alpha,
        }
    }

    #[inline]
    pub fn get(&self, b: usize, u: usize, n: usize) -> f64 {
        self.alpha[(b * self.num_users + u) * self.num_subcarriers + n]
    }

    pub fn validate(&self, cfg: &NetworkConfig) -> Result<()> {
        ensure!(
            self.num_bs == cfg.num_bs
                && self.num_users == cfg.num_users
                && self.num_subcarriers == cfg.num_subcarriers
                && self.alpha.len() == cfg.slots(),
            Shape,
            "load matrix does not match the network"
        );
        ensure!(
            self.alpha.iter().all(|a| (0.0..=1.0).contains(a)),
            Config,
            "load fractions must lie in [0, 1]"
        );
        for b in 0..cfg.num_bs {
            for n in 0..cfg.num_subcarriers {
                let total: f64 = (0..cfg.num_users).map(|u| self.get(b, u, n)).sum();
                ensure!(
                    total <= 1.0 + 1e-12,
                    Config,
                    "load of BS {b} on subcarrier {n} is {total} > 1"
                );
            }
        }
        Ok(())
    }
}

fn check_alloc(cfg: &NetworkConfig, p: &PowerAllocation) -> Result<()> {
    ensure!(
        p.num_bs == cfg.num_bs
            && p.num_users == cfg.num_users
            && p.num_subcarriers == cfg.num_subcarriers
            && p.p.len() == cfg.slots(),
        Shape,
        "power allocation does not match the network"
    );
    if let Some(x) = p.p.iter().find(|x| !(**x >= 0.0)) {
        return Err(Error::Domain(format!("negative or NaN power {x}")));
    }
    Ok(())
}

/// Per-slot SINR `γ_b^u(n)`; zero for links where `b` does not serve `u`.
pub fn sinr(
    model: SystemModel,
    gains: &GainTensor,
    p: &PowerAllocation,
    alpha: Option<&LoadMatrix>,
    assoc: &Association,
    cfg: &NetworkConfig,
) -> Result<Vec<f64>> {
    cfg.check_gains(gains)?;
    check_alloc(cfg, p)?;
    assoc.validate(cfg)?;
    if model == SystemModel::Sm3 {
        let a = alpha.ok_or_else(|| Error::Config("SM3 SINR needs a load matrix".into()))?;
        a.validate(cfg)?;
    }
    let (nb, nu, nn) = (cfg.num_bs, cfg.num_users, cfg.num_subcarriers);
    // Interfering power of BS b on subcarrier n.
    let mut radiated = vec![0.0; nb * nn];
    for b in 0..nb {
        for u in 0..nu {
            for n in 0..nn {
                let w = match model {
                    SystemModel::Sm3 => alpha.map_or(0.0, |a| a.get(b, u, n)),
                    _ => 1.0,
                };
                radiated[b * nn + n] += w * p.get(b, u, n);
            }
        }
    }
    let interferes = matches!(model, SystemModel::Sm2b | SystemModel::Sm3);
    let mut out = vec![0.0; cfg.slots()];
    for u in 0..nu {
        let b = assoc.serving[u];
        for n in 0..nn {
            let mut denom = cfg.sigma2;
            if interferes {
                for other in (0..nb).filter(|&o| o != b) {
                    denom += gains.power(other, u, n) * radiated[other * nn + n];
                }
            }
            out[p.index(b, u, n)] = gains.power(b, u, n) * p.get(b, u, n) / denom;
        }
    }
    Ok(out)
}

/// Total rate in bits/s/Hz for per-slot SINRs.
pub fn sum_rate(model: SystemModel, sinrs: &[f64], cfg: &NetworkConfig) -> f64 {
    let kappa = if model == SystemModel::Sm1 { cfg.kappa() } else { 1.0 };
    sinrs.iter().map(|&g| (1.0 + kappa * g.max(0.0)).log2()).sum()
}

/// SINR and sum rate in one call.
pub fn rate(
    model: SystemModel,
    gains: &GainTensor,
    p: &PowerAllocation,
    alpha: Option<&LoadMatrix>,
    assoc: &Association,
    cfg: &NetworkConfig,
) -> Result<f64> {
    Ok(sum_rate(model, &sinr(model, gains, p, alpha, assoc, cfg)?, cfg))
}

/// Water-filling result.
#[derive(Debug, Clone, PartialEq)]
pub struct WaterFill {
    pub power: Vec<f64>,
    pub level: f64,
}

/// Maximizes `Σ log2(1 + κ |g(n)|² p(n) / σ²)` subject to `Σ p(n) = P_max`.
///
/// The water level is bracketed by bisection on `[0, P_max + max floor]`
/// and then solved exactly on the resulting active set.
pub fn waterfill_with_level(
    gains_sq: &[f64],
    sigma2: f64,
    kappa: f64,
    p_max: f64,
) -> Result<WaterFill> {
    ensure!(!gains_sq.is_empty(), Param, "water-filling needs at least one subcarrier");
    ensure!(sigma2 > 0.0 && kappa > 0.0 && p_max > 0.0, Param, "sigma2, kappa and p_max must be positive");
    let floors: Vec<f64> = gains_sq
        .iter()
        .map(|&g| if g > 0.0 && g.is_finite() { sigma2 / (kappa * g) } else { f64::INFINITY })
        .collect();
    let max_floor = floors.iter().copied().filter(|f| f.is_finite()).fold(f64::NAN, f64::max);
    if max_floor.is_nan() {
        return Err(Error::Domain("water-filling needs at least one positive gain".into()));
    }
    let filled = |w: f64| floors.iter().map(|&f| (w - f).max(0.0)).sum::<f64>();
    let (mut lo, mut hi) = (0.0, p_max + max_floor);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if filled(mid) > p_max {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-10 * p_max.max(max_floor).max(1e-300) {
            break;
        }
    }
    // Exact level on the active set implied by the bracket, refined until stable.
    let mut level = 0.5 * (lo + hi);
    for _ in 0..floors.len() + 1 {
        let active: Vec<f64> = floors.iter().copied().filter(|&f| f < level).collect();
        if active.is_empty() {
            break;
        }
        let exact = (p_max + active.iter().sum::<f64>()) / active.len() as f64;
        let same_set = floors.iter().all(|&f| (f < level) == (f < exact));
        level = exact;
        if same_set {
            break;
        }
    }
    let power = floors.iter().map(|&f| (level - f).max(0.0)).collect();
    Ok(WaterFill { power, level })
}

/// Water-filling powers for one link; see [`waterfill_with_level`].
pub fn waterfill(gains_sq: &[f64], sigma2: f64, kappa: f64, p_max: f64) -> Result<Vec<f64>> {
    Ok(waterfill_with_level(gains_sq, sigma2, kappa, p_max)?.power)
}

/// SM1 water-filling using the network's noise, budget and `κ`.
pub fn waterfill_sm1(gains: &GainTensor, cfg: &NetworkConfig) -> Result<PowerAllocation> {
    cfg.check_gains(gains)?;
    ensure!(cfg.num_bs == 1 && cfg.num_users == 1, Config, "SM1 has one BS and one user");
    let g: Vec<f64> = (0..cfg.num_subcarriers).map(|n| gains.power(0, 0, n)).collect();
    PowerAllocation::from_vec(cfg, waterfill(&g, cfg.sigma2, cfg.kappa(), cfg.p_max)?)
}

/// Gives each subcarrier to the user with the largest gain on it (lowest index on ties).
///
/// `gains_sq` is `U × N` row-major.
pub fn greedy_subcarrier_alloc(
    gains_sq: &[f64],
    num_users: usize,
    num_subcarriers: usize,
) -> Result<SubcarrierAssignment> {
    ensure!(num_users >= 1 && num_subcarriers >= 1, Param, "need at least one user and subcarrier");
    ensure!(
        gains_sq.len() == num_users * num_subcarriers,
        Shape,
        "expected {}x{} gains, got {}",
        num_users,
        num_subcarriers,
        gains_sq.len()
    );
    let row = (0..num_subcarriers)
        .map(|n| {
            let mut best = 0;
            for u in 1..num_users {
                if gains_sq[u * num_subcarriers + n] > gains_sq[best * num_subcarriers + n] {
                    best = u;
                }
            }
            best
        })
        .collect();
    Ok(SubcarrierAssignment { num_users, assign: vec![row] })
}

/// Greedy SINR ranking followed by water-filling over the assigned gains (SM2A).
pub fn greedy_waterfill(
    gains: &GainTensor,
    cfg: &NetworkConfig,
) -> Result<(SubcarrierAssignment, PowerAllocation)> {
    cfg.check_gains(gains)?;
    ensure!(cfg.num_bs == 1, Config, "greedy allocation is single-cell");
    let (nu, nn) = (cfg.num_users, cfg.num_subcarriers);
    let g: Vec<f64> = (0..nu).flat_map(|u| (0..nn).map(move |n| (u, n))).map(|(u, n)| gains.power(0, u, n)).collect();
    let assignment = greedy_subcarrier_alloc(&g, nu, nn)?;
    let chosen: Vec<f64> = (0..nn).map(|n| g[assignment.assign[0][n] * nn + n]).collect();
    let powers = waterfill(&chosen, cfg.sigma2, 1.0, cfg.p_max)?;
    let mut alloc = PowerAllocation::zeros(cfg);
    for (n, p) in powers.into_iter().enumerate() {
        alloc.set(0, assignment.assign[0][n], n, p);
    }
    Ok((assignment, alloc))
}

/// Outcome of an iterative solver.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverResult<T> {
    pub solution: T,
    /// Objective after initialization and after every iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

impl<T> SolverResult<T> {
    pub fn final_objective(&self) -> f64 {
        self.objective.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// Sum rate of a paired single-carrier interference channel.
///
/// `gains_sq[b * B + u]` is `|g_b^u|²`; BS `b` serves user `b`.
pub fn sm2b_rate(gains_sq: &[f64], powers: &[f64], sigma2: f64) -> f64 {
    let nb = powers.len();
    (0..nb)
        .map(|u| {
            let interference: f64 =
                (0..nb).filter(|&b| b != u).map(|b| gains_sq[b * nb + u] * powers[b]).sum();
            (1.0 + gains_sq[u * nb + u] * powers[u] / (interference + sigma2)).log2()
        })
        .sum()
}

/// Fraction of the budget given to the muted cells of a leader start.
const WMMSE_LEADER_FLOOR: f64 = 0.01;

/// WMMSE power control for the paired interference channel.
///
/// Runs [`wmmse_from`] from full power and from one start per BS in which
/// that BS transmits at `P_max` and the others at 1% of it, then keeps the
/// run with the highest final sum rate. A single symmetric start cannot leave
/// the symmetric point, which loses to switching a link off when cross gains
/// are strong.
pub fn wmmse(
    gains_sq: &[f64],
    num_bs: usize,
    cfg: &NetworkConfig,
    max_iter: usize,
    tol: f64,
) -> Result<SolverResult<Vec<f64>>> {
    let mut best = wmmse_from(gains_sq, &vec![cfg.p_max; num_bs], cfg, max_iter, tol)?;
    if num_bs < 2 {
        return Ok(best);
    }
    for leader in 0..num_bs {
        let init: Vec<f64> = (0..num_bs)
            .map(|b| if b == leader { cfg.p_max } else { WMMSE_LEADER_FLOOR * cfg.p_max })
            .collect();
        let run = wmmse_from(gains_sq, &init, cfg, max_iter, tol)?;
        if run.final_objective() > best.final_objective() {
            best = run;
        }
    }
    Ok(best)
}

/// Single WMMSE run from the given feasible powers.
///
/// Alternates the MMSE receiver, the MSE weight and the transmit amplitude
/// (clamped to `[0, sqrt(P_max)]`). Stops when the sum-rate gain of an
/// iteration drops below `tol` or after `max_iter`.
pub fn wmmse_from(
    gains_sq: &[f64],
    init: &[f64],
    cfg: &NetworkConfig,
    max_iter: usize,
    tol: f64,
) -> Result<SolverResult<Vec<f64>>> {
    let num_bs = init.len();
    ensure!(max_iter >= 1, Param, "max_iter must be >= 1");
    ensure!(
        gains_sq.len() == num_bs * num_bs,
        Shape,
        "WMMSE needs a square {}x{} gain matrix, got {} entries",
        num_bs,
        num_bs,
        gains_sq.len()
    );
    ensure!(
        init.iter().all(|&p| (0.0..=cfg.p_max).contains(&p)),
        Param,
        "WMMSE start must lie in [0, P_max]"
    );
    let h = |b: usize, u: usize| gains_sq[b * num_bs + u].sqrt();
    let v_max = cfg.p_max.sqrt();
    let mut v: Vec<f64> = init.iter().map(|p| p.sqrt()).collect();
    let mut rx = vec![0.0; num_bs];
    let mut weight = vec![0.0; num_bs];
    let powers = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let mut objective = vec![sm2b_rate(gains_sq, &powers(&v), cfg.sigma2)];
    let mut iterations = 0;
    for _ in 0..max_iter {
        for k in 0..num_bs {
            let received: f64 = (0..num_bs).map(|j| h(j, k).powi(2) * v[j] * v[j]).sum::<f64>() + cfg.sigma2;
            rx[k] = h(k, k) * v[k] / received;
            let mse = 1.0 - rx[k] * h(k, k) * v[k];
            weight[k] = 1.0 / mse.max(1e-300);
        }
        for k in 0..num_bs {
            let denom: f64 = (0..num_bs).map(|j| weight[j] * rx[j] * rx[j] * h(k, j).powi(2)).sum();
            let target = if denom > 0.0 { weight[k] * rx[k] * h(k, k) / denom } else { v_max };
            v[k] = target.clamp(0.0, v_max);
        }
        iterations += 1;
        let current = sm2b_rate(gains_sq, &powers(&v), cfg.sigma2);
        let gain = current - objective[objective.len() - 1];
        objective.push(current);
        if gain.abs() < tol {
            break;
        }
    }
    Ok(SolverResult { solution: powers(&v), objective, iterations })
}

/// SM3 sum rate and, optionally, its gradient with respect to every `p_b^u(n)`.
///
/// The gradient has the direct term `G/(D + S)` of each served slot minus the
/// interference it causes through `q_b(n)` on users of other cells.
pub fn sm3_rate_grad(
    gains: &GainTensor,
    p: &[f64],
    alpha: &LoadMatrix,
    assoc: &Association,
    sigma2: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    let (nb, nu, nn) = (gains.num_bs, gains.num_users, gains.num_subcarriers);
    let idx = |b: usize, u: usize, n: usize| (b * nu + u) * nn + n;
    let mut q = vec![0.0; nb * nn];
    for b in 0..nb {
        for u in 0..nu {
            for n in 0..nn {
                q[b * nn + n] += alpha.get(b, u, n) * p[idx(b, u, n)];
            }
        }
    }
    // Interference-plus-noise D and signal S per (user, subcarrier).
    let mut denom = vec![0.0; nu * nn];
    let mut signal = vec![0.0; nu * nn];
    let mut total = 0.0;
    for u in 0..nu {
        let b = assoc.serving[u];
        for n in 0..nn {
            let mut d = sigma2;
            for o in (0..nb).filter(|&o| o != b) {
                d += q[o * nn + n] * gains.power(o, u, n);
            }
            let s = p[idx(b, u, n)] * gains.power(b, u, n);
            denom[u * nn + n] = d;
            signal[u * nn + n] = s;
            total += (1.0 + s / d).log2();
        }
    }
    if let Some(grad) = grad {
        grad.iter_mut().for_each(|g| *g = 0.0);
        // Marginal loss per unit of interfering power on (user, n).
        let mut victim = vec![0.0; nu * nn];
        for i in 0..nu * nn {
            let (d, s) = (denom[i], signal[i]);
            victim[i] = s / (d * (d + s));
        }
        for b in 0..nb {
            for u in 0..nu {
                for n in 0..nn {
                    let mut g = 0.0;
                    if assoc.serves(b, u) {
                        g += gains.power(b, u, n) / (denom[u * nn + n] + signal[u * nn + n]);
                    }
                    let a = alpha.get(b, u, n);
                    if a != 0.0 {
                        let mut harm = 0.0;
                        for v in (0..nu).filter(|&v| assoc.serving[v] != b) {
                            harm += gains.power(b, v, n) * victim[v * nn + n];
                        }
                        g -= a * harm;
                    }
                    grad[idx(b, u, n)] = g / LN_2;
                }
            }
        }
    }
    total
}

/// Euclidean projection of `x` onto `{y >= 0, Σ y <= cap}`.
pub fn project_capped_simplex(x: &mut [f64], cap: f64) {
    for v in x.iter_mut() {
        if !(*v > 0.0) {
            *v = 0.0;
        }
    }
    if x.iter().sum::<f64>() <= cap {
        return;
    }
    let mut sorted: Vec<f64> = x.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cumulative += s;
        let t = (cumulative - cap) / (i + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    for v in x.iter_mut() {
        *v = (*v - theta).max(0.0);
    }
}

/// Active slots `(u, n)` of BS `b`, as flat indices.
fn bs_slots(cfg: &NetworkConfig, assoc: &Association, b: usize) -> Vec<usize> {
    assoc
        .users_of(b)
        .flat_map(|u| (0..cfg.num_subcarriers).map(move |n| (b * cfg.num_users + u) * cfg.num_subcarriers + n))
        .collect()
}

fn project_per_bs(p: &mut [f64], slots: &[Vec<usize>], cap: f64) {
    for block in slots {
        let mut local: Vec<f64> = block.iter().map(|&i| p[i]).collect();
        project_capped_simplex(&mut local, cap);
        for (&i, v) in block.iter().zip(local) {
            p[i] = v;
        }
    }
}

/// Maximizes the SM3 sum rate under per-BS budgets by projected gradient
/// ascent with a backtracking (Armijo) line search, starting from equal power.
pub fn iterative_sm3(
    gains: &GainTensor,
    alpha: &LoadMatrix,
    assoc: &Association,
    cfg: &NetworkConfig,
    max_iter: usize,
    tol: f64,
) -> Result<SolverResult<PowerAllocation>> {
    cfg.check_gains(gains)?;
    assoc.validate(cfg)?;
    alpha.validate(cfg)
        .map_err(|e| Error::Config(format!("infeasible load matrix: {e}")))?;
    let slots: Vec<Vec<usize>> = (0..cfg.num_bs).map(|b| bs_slots(cfg, assoc, b)).collect();
    let mut p = maxpower_alloc(cfg, assoc).p;
    let mut grad = vec![0.0; p.len()];
    let mut f = sm3_rate_grad(gains, &p, alpha, assoc, cfg.sigma2, Some(&mut grad));
    let mut objective = vec![f];
    let max_abs = |g: &[f64]| g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut step = 0.1 * cfg.p_max / max_abs(&grad).max(1e-300);
    let mut candidate = p.clone();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..p.len() {
                candidate[i] = p[i] + step * grad[i];
            }
            project_per_bs(&mut candidate, &slots, cfg.p_max);
            let ascent: f64 = (0..p.len()).map(|i| grad[i] * (candidate[i] - p[i])).sum();
            let value = sm3_rate_grad(gains, &candidate, alpha, assoc, cfg.sigma2, None);
            if value >= f + 1e-4 * ascent && value >= f {
                accepted = Some(value);
                break;
            }
            step *= 0.5;
        }
        let Some(value) = accepted else { break };
        std::mem::swap(&mut p, &mut candidate);
        let previous = f;
        f = sm3_rate_grad(gains, &p, alpha, assoc, cfg.sigma2, Some(&mut grad));
        debug_assert!((f - value).abs() <= 1e-9 * f.abs().max(1.0));
        objective.push(f);
        if (f - previous).abs() <= tol * previous.abs().max(1e-12) {
            break;
        }
        step *= 2.0;
    }
    Ok(SolverResult { solution: PowerAllocation::from_vec(cfg, p)?, objective, iterations })
}

/// Budget split equally over each BS's served (user, subcarrier) slots.
pub fn maxpower_alloc(cfg: &NetworkConfig, assoc: &Association) -> PowerAllocation {
    let mut alloc = PowerAllocation::zeros(cfg);
    for b in 0..cfg.num_bs {
        let slots = bs_slots(cfg, assoc, b);
        if slots.is_empty() {
            continue;
        }
        let share = cfg.p_max / slots.len() as f64;
        for i in slots {
            alloc.p[i] = share;
        }
    }
    alloc
}

/// Each BS water-fills its served slots as if there were no other cells.
pub fn percell_waterfill(gains: &GainTensor, assoc: &Association, cfg: &NetworkConfig) -> Result<PowerAllocation> {
    cfg.check_gains(gains)?;
    let mut alloc = PowerAllocation::zeros(cfg);
    for b in 0..cfg.num_bs {
        let slots = bs_slots(cfg, assoc, b);
        let g: Vec<f64> = slots.iter().map(|&i| gains.gains[i].norm_sqr()).collect();
        if !g.iter().any(|&x| x > 0.0) {
            continue;
        }
        for (&i, p) in slots.iter().zip(waterfill(&g, cfg.sigma2, 1.0, cfg.p_max)?) {
            alloc.p[i] = p;
        }
    }
    Ok(alloc)
}

/// Random baseline: a lone slot gets `U(0, P_max)`; several slots get
/// i.i.d. uniform weights normalized to the full budget.
pub fn random_alloc<R: Rng + ?Sized>(cfg: &NetworkConfig, assoc: &Association, rng: &mut R) -> PowerAllocation {
    let mut alloc = PowerAllocation::zeros(cfg);
    for b in 0..cfg.num_bs {
        let slots = bs_slots(cfg, assoc, b);
        match slots.len() {
            0 => {}
            1 => alloc.p[slots[0]] = cfg.p_max * rng.gen::<f64>(),
            _ => {
                let weights: Vec<f64> = slots.iter().map(|_| rng.gen::<f64>()).collect();
                let total: f64 = weights.iter().sum::<f64>().max(1e-300);
                for (&i, w) in slots.iter().zip(weights) {
                    alloc.p[i] = cfg.p_max * w / total;
                }
            }
        }
    }
    alloc
}

/// Best lattice point found by [`grid_oracle`].
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub alloc: PowerAllocation,
    pub rate: f64,
    pub points: u64,
}

/// Number of ways to give at most `levels` quanta to `slots` slots.
fn lattice_size(slots: usize, levels: usize) -> f64 {
    // C(levels + slots, slots)
    (1..=slots).fold(1.0, |acc, i| acc * (levels + i) as f64 / i as f64)
}

/// Exhaustive search over powers that are multiples of `P_max / levels`,
/// with every BS's total within budget. Test-only verification aid.
pub fn grid_oracle(
    model: SystemModel,
    gains: &GainTensor,
    assoc: &Association,
    alpha: Option<&LoadMatrix>,
    cfg: &NetworkConfig,
    levels: usize,
    max_points: u64,
) -> Result<OracleResult> {
    ensure!(levels >= 1, Param, "levels must be positive");
    cfg.check_gains(gains)?;
    assoc.validate(cfg)?;
    let slots: Vec<Vec<usize>> = (0..cfg.num_bs).map(|b| bs_slots(cfg, assoc, b)).collect();
    let size: f64 = slots.iter().map(|s| lattice_size(s.len(), levels)).product();
    if size > max_points as f64 {
        return Err(Error::Config(format!(
            "lattice of {size:.3e} points exceeds the limit of {max_points}"
        )));
    }
    let flat: Vec<(usize, usize)> = slots
        .iter()
        .enumerate()
        .flat_map(|(b, s)| s.iter().map(move |&i| (b, i)))
        .collect();
    let quantum = cfg.p_max / levels as f64;
    let mut alloc = PowerAllocation::zeros(cfg);
    let mut remaining = vec![levels; cfg.num_bs];
    let mut best = (f64::NEG_INFINITY, alloc.p.clone());
    let mut points = 0u64;

    fn recurse(
        depth: usize,
        ctx: &mut (
            &[(usize, usize)],
            &mut PowerAllocation,
            &mut Vec<usize>,
            &mut (f64, Vec<f64>),
            &mut u64,
        ),
        eval: &dyn Fn(&PowerAllocation) -> f64,
        quantum: f64,
    ) {
        if depth == ctx.0.len() {
            *ctx.4 += 1;
            let r = eval(ctx.1);
            if r > ctx.3 .0 {
                ctx.3 .0 = r;
                ctx.3 .1.copy_from_slice(&ctx.1.p);
            }
            return;
        }
        let (b, i) = ctx.0[depth];
        let budget = ctx.2[b];
        for k in 0..=budget {
            ctx.1.p[i] = k as f64 * quantum;
            ctx.2[b] = budget - k;
            recurse(depth + 1, ctx, eval, quantum);
        }
        ctx.2[b] = budget;
        ctx.1.p[i] = 0.0;
    }

    let eval = |a: &PowerAllocation| rate(model, gains, a, alpha, assoc, cfg).unwrap_or(f64::NEG_INFINITY);
    let mut ctx = (&flat[..], &mut alloc, &mut remaining, &mut best, &mut points);
    recurse(0, &mut ctx, &eval, quantum);
    let (best_rate, best_p) = best;
    Ok(OracleResult { alloc: PowerAllocation::from_vec(cfg, best_p)?, rate: best_rate, points })
}
