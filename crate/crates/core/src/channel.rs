//! Multipath Rayleigh fading with Jakes Doppler statistics.
//!
//! Every link is an `L`-tap channel with taps at integer sample delays. Each
//! tap is a sum of `M` scattered rays arriving from stratified uniform angles:
//!
//! ```text
//! h(l, t) = sqrt(P_l / M) * sum_m exp(j (2π f_D cos ψ_{l,m} t T_b + φ_{l,m}))
//! ψ_{l,m} = 2π (m - r1) / M,   φ_{l,m} = 2π r2,   r1, r2 ~ U[0, 1)
//! ```
//!
//! `P_l` is an exponential power-delay profile normalized to unit total power,
//! and `T_b` is the block duration (block fading: taps are constant inside a
//! block). Per-subcarrier gains are the `N`-point DFT of the taps, scaled by a
//! large-scale path loss when a [`Geometry`] is supplied.

use std::f64::consts::{FRAC_PI_4, PI};

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Default exponential decay of the power-delay profile, in dB per tap.
pub const DEFAULT_DECAY_DB: f64 = 0.2;
/// Default maximum Doppler shift in Hz (pedestrian to slow vehicular speed).
pub const DEFAULT_DOPPLER_HZ: f64 = 40.0;
/// Sample period `T` for a 100 Mbps symbol rate.
pub const DEFAULT_SYMBOL_PERIOD_S: f64 = 1e-8;

/// Parameters of one link's small-scale fading process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadingParams {
    pub num_paths: usize,
    pub num_waves: usize,
    pub decay_db: f64,
    pub doppler_hz: f64,
    /// Duration of one fading block in seconds; taps evolve block by block.
    pub block_duration_s: f64,
}

impl FadingParams {
    /// Default process with one OFDM symbol of `subcarriers` samples per block.
    pub fn new(num_paths: usize, num_waves: usize, subcarriers: usize) -> Self {
        Self {
            num_paths,
            num_waves,
            decay_db: DEFAULT_DECAY_DB,
            doppler_hz: DEFAULT_DOPPLER_HZ,
            block_duration_s: subcarriers.max(1) as f64 * DEFAULT_SYMBOL_PERIOD_S,
        }
    }

    pub fn with_doppler(mut self, doppler_hz: f64) -> Self {
        self.doppler_hz = doppler_hz;
        self
    }

    pub fn with_block_duration(mut self, seconds: f64) -> Self {
        self.block_duration_s = seconds;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_paths >= 1, Param, "number of paths must be >= 1");
        ensure!(self.num_waves >= 1, Param, "number of waves must be >= 1");
        ensure!(
            self.doppler_hz >= 0.0 && self.doppler_hz.is_finite(),
            Param,
            "doppler must be finite and >= 0, got {}",
            self.doppler_hz
        );
        ensure!(
            self.decay_db.is_finite() && self.block_duration_s.is_finite() && self.block_duration_s >= 0.0,
            Param,
            "decay and block duration must be finite"
        );
        Ok(())
    }
}

/// Exponential power-delay profile `P_l ∝ 10^(-l·decay_db/10)`, summing to one.
pub fn path_powers(num_paths: usize, decay_db: f64) -> Vec<f64> {
    let ratio = 10f64.powf(-decay_db / 10.0);
    let raw: Vec<f64> = (0..num_paths).map(|l| ratio.powi(l as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

/// Tap gains of one link at one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// Complex gain of tap `l`, located at delay `l` samples.
    pub taps: Vec<Complex64>,
    pub time_index: u64,
}

impl ChannelRealization {
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|h| h.norm_sqr()).sum()
    }
}

/// A link's fading process: ray angles and phases are drawn once and fixed
/// for the lifetime of the process, so successive blocks are correlated.
#[derive(Debug, Clone)]
pub struct FadingProcess {
    params: FadingParams,
    amplitudes: Vec<f64>,
    /// Angular Doppler `2π f_D cos ψ` per (path, wave), row-major.
    omega: Vec<f64>,
    phase: Vec<f64>,
}

impl FadingProcess {
    pub fn new<R: Rng + ?Sized>(params: &FadingParams, rng: &mut R) -> Result<Self> {
        params.validate()?;
        let (l_count, m_count) = (params.num_paths, params.num_waves);
        let amplitudes = path_powers(l_count, params.decay_db)
            .into_iter()
            .map(|p| (p / m_count as f64).sqrt())
            .collect();
        let mut omega = Vec::with_capacity(l_count * m_count);
        let mut phase = Vec::with_capacity(l_count * m_count);
        for _ in 0..l_count {
            for m in 0..m_count {
                let r1: f64 = rng.gen();
                let r2: f64 = rng.gen();
                let psi = 2.0 * PI * (m as f64 - r1) / m_count as f64;
                omega.push(2.0 * PI * params.doppler_hz * psi.cos());
                phase.push(2.0 * PI * r2);
            }
        }
        Ok(Self { params: params.clone(), amplitudes, omega, phase })
    }

    pub fn params(&self) -> &FadingParams {
        &self.params
    }

    /// Tap gains at block `t`.
    pub fn realization(&self, t: u64) -> ChannelRealization {
        let m_count = self.params.num_waves;
        let time = t as f64 * self.params.block_duration_s;
        let taps = self
            .amplitudes
            .iter()
            .enumerate()
            .map(|(l, &amp)| {
                let base = l * m_count;
                let sum: Complex64 = (base..base + m_count)
                    .map(|i| Complex64::from_polar(1.0, self.omega[i] * time + self.phase[i]))
                    .sum();
                sum * amp
            })
            .collect();
        ChannelRealization { taps, time_index: t }
    }
}

/// Draws a fresh process from `rng` and evaluates it at block `t`.
pub fn gen_path_gains<R: Rng + ?Sized>(
    params: &FadingParams,
    t: u64,
    rng: &mut R,
) -> Result<ChannelRealization> {
    Ok(FadingProcess::new(params, rng)?.realization(t))
}

/// `N`-point DFT of the taps: `g(n) = Σ_l h(l) exp(-j2πnl/N)`.
pub fn gains_dft(realization: &ChannelRealization, subcarriers: usize) -> Result<Vec<Complex64>> {
    let taps = &realization.taps;
    if subcarriers < taps.len() {
        return Err(Error::Config(format!(
            "{} subcarriers cannot resolve {} taps",
            subcarriers,
            taps.len()
        )));
    }
    let n_f = subcarriers as f64;
    Ok((0..subcarriers)
        .map(|n| {
            taps.iter()
                .enumerate()
                .map(|(l, h)| {
                    // Reduce n*l modulo N first to keep the angle small.
                    let k = ((n * l) % subcarriers) as f64;
                    h * Complex64::from_polar(1.0, -2.0 * PI * k / n_f)
                })
                .sum()
        })
        .collect())
}

/// Large-scale path loss in dB for a user `distance_km` from its BS in a
/// cell of radius `cell_radius_km`.
///
/// Distances beyond the cell radius (interfering links) extrapolate the same law.
pub fn path_loss_db(distance_km: f64, cell_radius_km: f64) -> Result<f64> {
    if !(distance_km > 0.0) || !distance_km.is_finite() {
        return Err(Error::Domain(format!("distance must be positive, got {distance_km}")));
    }
    if !(cell_radius_km > 0.0) {
        return Err(Error::Domain(format!("cell radius must be positive, got {cell_radius_km}")));
    }
    Ok(-120.9 - 37.6 * (distance_km / cell_radius_km).log10())
}

/// Multiplicative amplitude factor for a loss of `db` decibels.
pub fn db_to_amplitude(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// Zero-order Bessel function of the first kind.
///
/// Power series below |x| = 8, Hankel asymptotic expansion above; absolute
/// error stays below 1e-8 everywhere.
pub fn bessel_j0(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 8.0 {
        let q = -(ax * ax) / 4.0;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..80 {
            term *= q / (k as f64 * k as f64);
            sum += term;
            if term.abs() < 1e-18 {
                break;
            }
        }
        return sum;
    }
    // P and Q series share one recurrence; terms alternate between them.
    let (mut p, mut q) = (0.0, 0.0);
    let mut term = 1.0f64;
    let mut prev = f64::INFINITY;
    let mut k = 0usize;
    while term.abs() < prev && term.abs() > 1e-17 {
        prev = term.abs();
        match k % 4 {
            0 => p += term,
            1 => q -= term,
            2 => p -= term,
            _ => q += term,
        }
        k += 1;
        let odd = (2 * k - 1) as f64;
        term *= odd * odd / (8.0 * k as f64 * ax);
    }
    let phase = ax - FRAC_PI_4;
    (2.0 / (PI * ax)).sqrt() * (p * phase.cos() - q * phase.sin())
}

/// RNG stream for link `(b, u)` of sample `sample` under `seed`.
///
/// ChaCha's 64-bit stream id carries the link, so links draw from disjoint
/// keystreams of the same key.
pub fn link_rng(seed: u64, sample: u64, bs: usize, user: usize) -> ChaCha8Rng {
    let key = seed ^ sample.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(((bs as u64) << 32) | user as u64);
    rng
}

/// Complex per-subcarrier gains for every (BS, user, subcarrier).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainTensor {
    pub num_bs: usize,
    pub num_users: usize,
    pub num_subcarriers: usize,
    pub gains: Vec<Complex64>,
    pub time_index: u64,
}

impl GainTensor {
    pub fn zeros(num_bs: usize, num_users: usize, num_subcarriers: usize) -> Self {
        Self {
            num_bs,
            num_users,
            num_subcarriers,
            gains: vec![Complex64::new(0.0, 0.0); num_bs * num_users * num_subcarriers],
            time_index: 0,
        }
    }

    pub fn from_vec(
        num_bs: usize,
        num_users: usize,
        num_subcarriers: usize,
        gains: Vec<Complex64>,
    ) -> Result<Self> {
        ensure!(
            gains.len() == num_bs * num_users * num_subcarriers,
            Shape,
            "expected {}x{}x{} gains, got {}",
            num_bs,
            num_users,
            num_subcarriers,
            gains.len()
        );
        Ok(Self { num_bs, num_users, num_subcarriers, gains, time_index: 0 })
    }

    /// Builds a tensor from real power gains `|g|²` (zero phase).
    pub fn from_power(
        num_bs: usize,
        num_users: usize,
        num_subcarriers: usize,
        power: &[f64],
    ) -> Result<Self> {
        let gains = power.iter().map(|p| Complex64::new(p.max(0.0).sqrt(), 0.0)).collect();
        Self::from_vec(num_bs, num_users, num_subcarriers, gains)
    }

    #[inline]
    pub fn index(&self, b: usize, u: usize, n: usize) -> usize {
        (b * self.num_users + u) * self.num_subcarriers + n
    }

    #[inline]
    pub fn get(&self, b: usize, u: usize, n: usize) -> Complex64 {
        self.gains[self.index(b, u, n)]
    }

    /// Power gain `|g_b^u(n)|²`.
    #[inline]
    pub fn power(&self, b: usize, u: usize, n: usize) -> f64 {
        self.gains[self.index(b, u, n)].norm_sqr()
    }

    /// All power gains, in (b, u, n) order.
    pub fn powers(&self) -> Vec<f64> {
        self.gains.iter().map(|g| g.norm_sqr()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.gains.iter().all(|g| g.re.is_finite() && g.im.is_finite())
    }
}

/// BS and user positions in km, with nearest-BS association.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub bs_positions: Vec<[f64; 2]>,
    pub user_positions: Vec<[f64; 2]>,
    pub cell_radius_km: f64,
    /// Serving BS of each user.
    pub serving: Vec<usize>,
}

/// Users never come closer than this fraction of the cell radius.
pub const MIN_DISTANCE_FRACTION: f64 = 0.01;

impl Geometry {
    /// BS sites on a line spaced `inter_site_km` apart.
    pub fn bs_line(num_bs: usize, inter_site_km: f64) -> Vec<[f64; 2]> {
        let offset = (num_bs as f64 - 1.0) / 2.0;
        (0..num_bs).map(|b| [(b as f64 - offset) * inter_site_km, 0.0]).collect()
    }

    /// Validates positions and recomputes nearest-BS association.
    pub fn new(
        bs_positions: Vec<[f64; 2]>,
        user_positions: Vec<[f64; 2]>,
        cell_radius_km: f64,
    ) -> Result<Self> {
        ensure!(!bs_positions.is_empty(), Config, "geometry needs at least one BS");
        ensure!(cell_radius_km > 0.0, Domain, "cell radius must be positive");
        let mut geometry = Self { bs_positions, user_positions, cell_radius_km, serving: Vec::new() };
        geometry.serving = (0..geometry.user_positions.len())
            .map(|u| {
                (0..geometry.bs_positions.len())
                    .min_by(|&a, &b| geometry.distance(a, u).total_cmp(&geometry.distance(b, u)))
                    .unwrap_or(0)
            })
            .collect();
        for u in 0..geometry.user_positions.len() {
            let d = geometry.distance(geometry.serving[u], u);
            ensure!(
                d > 0.0 && d <= cell_radius_km * (1.0 + 1e-12),
                Domain,
                "user {u} lies {d} km from its BS, outside (0, {cell_radius_km}]"
            );
        }
        Ok(geometry)
    }

    /// Users dropped uniformly (by area) inside the cells, associated to the nearest BS.
    pub fn random_nearest<R: Rng + ?Sized>(
        bs_positions: Vec<[f64; 2]>,
        num_users: usize,
        cell_radius_km: f64,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(!bs_positions.is_empty(), Config, "geometry needs at least one BS");
        // User u is dropped in cell u mod B so cells stay evenly loaded.
        let users = (0..num_users)
            .map(|u| drop_in_disk(bs_positions[u % bs_positions.len()], cell_radius_km, rng))
            .collect();
        // Nearest association can hand a user to a closer neighbour; it is
        // then also inside that neighbour's radius.
        Self::new(bs_positions, users, cell_radius_km)
    }

    /// User `b` dropped inside cell `b` and served by BS `b` (one user per BS).
    pub fn random_paired<R: Rng + ?Sized>(
        bs_positions: Vec<[f64; 2]>,
        cell_radius_km: f64,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(!bs_positions.is_empty(), Config, "geometry needs at least one BS");
        ensure!(cell_radius_km > 0.0, Domain, "cell radius must be positive");
        let users: Vec<[f64; 2]> =
            bs_positions.iter().map(|&c| drop_in_disk(c, cell_radius_km, rng)).collect();
        let serving = (0..users.len()).collect();
        Ok(Self { bs_positions, user_positions: users, cell_radius_km, serving })
    }

    pub fn num_bs(&self) -> usize {
        self.bs_positions.len()
    }

    pub fn num_users(&self) -> usize {
        self.user_positions.len()
    }

    pub fn distance(&self, b: usize, u: usize) -> f64 {
        let [bx, by] = self.bs_positions[b];
        let [ux, uy] = self.user_positions[u];
        ((bx - ux).powi(2) + (by - uy).powi(2)).sqrt()
    }

    /// Amplitude scaling of link (b, u) from path loss.
    pub fn link_amplitude(&self, b: usize, u: usize) -> Result<f64> {
        let d = self.distance(b, u).max(MIN_DISTANCE_FRACTION * self.cell_radius_km);
        Ok(db_to_amplitude(path_loss_db(d, self.cell_radius_km)?))
    }
}

fn drop_in_disk<R: Rng + ?Sized>(center: [f64; 2], radius: f64, rng: &mut R) -> [f64; 2] {
    let r_min = MIN_DISTANCE_FRACTION * radius;
    // Area-uniform radius on the annulus [r_min, radius].
    let u: f64 = rng.gen();
    let r = (r_min * r_min + u * (radius * radius - r_min * r_min)).sqrt();
    let theta = 2.0 * PI * rng.gen::<f64>();
    [center[0] + r * theta.cos(), center[1] + r * theta.sin()]
}

/// Per-subcarrier gains of every link at block `t`.
///
/// `links` holds one process per (b, u) in row-major order. Without a
/// geometry the gains carry small-scale fading only.
pub fn build_gain_tensor(
    geometry: Option<&Geometry>,
    links: &[FadingProcess],
    num_bs: usize,
    num_users: usize,
    subcarriers: usize,
    t: u64,
) -> Result<GainTensor> {
    ensure!(
        links.len() == num_bs * num_users,
        Shape,
        "expected {} link processes, got {}",
        num_bs * num_users,
        links.len()
    );
    if let Some(g) = geometry {
        ensure!(
            g.num_bs() == num_bs && g.num_users() == num_users,
            Shape,
            "geometry is {}x{}, network is {}x{}",
            g.num_bs(),
            g.num_users(),
            num_bs,
            num_users
        );
    }
    let mut tensor = GainTensor::zeros(num_bs, num_users, subcarriers);
    tensor.time_index = t;
    for b in 0..num_bs {
        for u in 0..num_users {
            let scale = match geometry {
                Some(g) => g.link_amplitude(b, u)?,
                None => 1.0,
            };
            let freq = gains_dft(&links[b * num_users + u].realization(t), subcarriers)?;
            for (n, g) in freq.into_iter().enumerate() {
                let idx = tensor.index(b, u, n);
                tensor.gains[idx] = g * scale;
            }
        }
    }
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_static_ray_has_constant_magnitude() {
        let params = FadingParams::new(3, 1, 16).with_doppler(0.0);
        let process = FadingProcess::new(&params, &mut rng(1)).unwrap();
        let powers = path_powers(3, DEFAULT_DECAY_DB);
        for t in [0, 1, 17, 1000] {
            let r = process.realization(t);
            for (h, p) in r.taps.iter().zip(&powers) {
                assert!((h.norm() - p.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_path_profile_is_unity() {
        assert_eq!(path_powers(1, 0.2), vec![1.0]);
        let mut acc = 0.0;
        let trials = 4000;
        let params = FadingParams::new(1, 16, 16);
        for s in 0..trials {
            acc += gen_path_gains(&params, 0, &mut rng(s)).unwrap().energy();
        }
        let mean = acc / trials as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean energy {mean}");
    }

    #[test]
    fn profile_sums_to_one_and_decays() {
        let p = path_powers(6, 0.2);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.windows(2).all(|w| w[1] < w[0]));
        let ratio = p[1] / p[0];
        assert!((ratio - 10f64.powf(-0.02)).abs() < 1e-12);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut r = rng(0);
        assert!(matches!(
            FadingProcess::new(&FadingParams::new(0, 4, 8), &mut r),
            Err(Error::Param(_))
        ));
        assert!(matches!(
            FadingProcess::new(&FadingParams::new(2, 0, 8), &mut r),
            Err(Error::Param(_))
        ));
        let neg = FadingParams::new(2, 2, 8).with_doppler(-1.0);
        assert!(FadingProcess::new(&neg, &mut r).is_err());
    }

    #[test]
    fn dft_of_single_tap_is_flat() {
        let c = Complex64::new(0.3, -1.2);
        let r = ChannelRealization { taps: vec![c], time_index: 0 };
        for g in gains_dft(&r, 8).unwrap() {
            assert!((g.norm() - c.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn dft_identity_case() {
        let r = ChannelRealization {
            taps: vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)],
            time_index: 0,
        };
        let g = gains_dft(&r, 4).unwrap();
        for v in g {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn dft_rejects_too_few_subcarriers() {
        let r = ChannelRealization { taps: vec![Complex64::new(1.0, 0.0); 5], time_index: 0 };
        assert!(matches!(gains_dft(&r, 4), Err(Error::Config(_))));
    }

    #[test]
    fn path_loss_values() {
        assert!((path_loss_db(1.0, 1.0).unwrap() + 120.9).abs() < 1e-12);
        assert!((path_loss_db(0.05, 0.5).unwrap() + 83.3).abs() < 1e-9);
        assert!((path_loss_db(0.005, 0.5).unwrap() + 45.7).abs() < 1e-9);
        assert!(matches!(path_loss_db(0.0, 1.0), Err(Error::Domain(_))));
        assert!(path_loss_db(-2.0, 1.0).is_err());
    }

    #[test]
    fn bessel_known_values() {
        assert_eq!(bessel_j0(0.0), 1.0);
        assert!((bessel_j0(1.0) - 0.765_197_686_6).abs() < 1e-9);
        assert!(bessel_j0(2.40483).abs() < 1e-4);
        assert!((bessel_j0(-1.0) - bessel_j0(1.0)).abs() < 1e-15);
    }

    #[test]
    fn tensor_shapes_and_static_channel() {
        let geometry = Geometry::random_nearest(Geometry::bs_line(2, 1.0), 4, 0.5, &mut rng(3)).unwrap();
        let params = FadingParams::new(4, 8, 16).with_doppler(0.0);
        let links: Vec<_> = (0..8)
            .map(|i| FadingProcess::new(&params, &mut link_rng(7, 0, i / 4, i % 4)).unwrap())
            .collect();
        let a = build_gain_tensor(Some(&geometry), &links, 2, 4, 16, 5).unwrap();
        let b = build_gain_tensor(Some(&geometry), &links, 2, 4, 16, 6).unwrap();
        assert_eq!((a.num_bs, a.num_users, a.num_subcarriers), (2, 4, 16));
        assert_eq!(a.gains.len(), 128);
        assert!(a.is_finite());
        assert_eq!(a.gains, b.gains);

        let one = FadingProcess::new(&FadingParams::new(1, 1, 1), &mut rng(9)).unwrap();
        let t = build_gain_tensor(None, &[one], 1, 1, 1, 0).unwrap();
        assert_eq!(t.gains.len(), 1);
    }

    #[test]
    fn tensor_rejects_link_mismatch() {
        let p = FadingProcess::new(&FadingParams::new(1, 1, 4), &mut rng(1)).unwrap();
        assert!(matches!(build_gain_tensor(None, &[p], 2, 1, 4, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let params = FadingParams::new(6, 20, 32);
        let a = gen_path_gains(&params, 3, &mut link_rng(11, 2, 0, 1)).unwrap();
        let b = gen_path_gains(&params, 3, &mut link_rng(11, 2, 0, 1)).unwrap();
        let c = gen_path_gains(&params, 3, &mut link_rng(11, 2, 1, 0)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn geometry_associates_nearest() {
        let g = Geometry::new(
            vec![[-1.0, 0.0], [1.0, 0.0]],
            vec![[-0.8, 0.1], [0.7, -0.2]],
            1.0,
        )
        .unwrap();
        assert_eq!(g.serving, vec![0, 1]);
        assert!(Geometry::new(vec![[0.0, 0.0]], vec![[3.0, 0.0]], 1.0).is_err());
    }
}
