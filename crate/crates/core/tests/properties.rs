//! Property tests over the pure building blocks.

use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;
use rrm_core::bench::{moving_avg, relative_sum_rate};
use rrm_core::channel::{gains_dft, ChannelRealization};
use rrm_core::envgen::{NonStationaritySpec, PairUniverse};
use rrm_core::optim::{project_capped_simplex, waterfill_with_level};
use rustfft::FftPlanner;

fn taps_and_n() -> impl Strategy<Value = (Vec<(f64, f64)>, usize)> {
    (1usize..=16).prop_flat_map(|l| (prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), l), l..=64))
}

proptest! {
    #[test]
    fn dft_matches_fft((taps, n) in taps_and_n()) {
        let taps: Vec<Complex64> = taps.into_iter().map(|(re, im)| Complex64::new(re, im)).collect();
        let direct = gains_dft(&ChannelRealization { taps: taps.clone(), time_index: 0 }, n).unwrap();
        let mut buf = taps.clone();
        buf.resize(n, Complex64::new(0.0, 0.0));
        FftPlanner::<f64>::new().plan_fft_forward(n).process(&mut buf);
        for (a, b) in direct.iter().zip(&buf) {
            prop_assert!((a - b).norm() <= 1e-9 * (1.0 + b.norm()), "{a} vs {b}");
        }
        // Parseval.
        let e_time: f64 = taps.iter().map(|h| h.norm_sqr()).sum();
        let e_freq: f64 = direct.iter().map(|g| g.norm_sqr()).sum();
        prop_assert!((e_freq - n as f64 * e_time).abs() <= 1e-9 * (1.0 + e_freq));
    }

    #[test]
    fn dft_of_a_delayed_impulse_is_a_phase_ramp(l in 0usize..8, extra in 0usize..24) {
        let n = l + 1 + extra;
        let mut taps = vec![Complex64::new(0.0, 0.0); l + 1];
        taps[l] = Complex64::new(1.0, 0.0);
        let g = gains_dft(&ChannelRealization { taps, time_index: 0 }, n).unwrap();
        for (k, v) in g.iter().enumerate() {
            let want = Complex64::from_polar(1.0, -2.0 * PI * (k * l) as f64 / n as f64);
            prop_assert!((v - want).norm() < 1e-12);
        }
    }

    #[test]
    fn capped_simplex_projection_is_the_nearest_feasible_point(
        z in prop::collection::vec(-3.0..3.0f64, 1..12),
        cap in 0.1..5.0f64,
        probes in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 12), 8),
    ) {
        let mut x = z.clone();
        project_capped_simplex(&mut x, cap);
        prop_assert!(x.iter().all(|&v| v >= 0.0));
        prop_assert!(x.iter().sum::<f64>() <= cap * (1.0 + 1e-12));

        let mut again = x.clone();
        project_capped_simplex(&mut again, cap);
        for (a, b) in again.iter().zip(&x) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }

        // Variational inequality: (z - x)·(y - x) <= 0 for every feasible y.
        for probe in &probes {
            let raw = &probe[..z.len()];
            let total: f64 = raw.iter().sum();
            let scale = if total > 0.0 { cap * raw[0] / total } else { 0.0 };
            let y: Vec<f64> = raw.iter().map(|v| v * scale).collect();
            let inner: f64 = z.iter().zip(&x).zip(&y).map(|((zi, xi), yi)| (zi - xi) * (yi - xi)).sum();
            prop_assert!(inner <= 1e-9, "inner product {inner}");
        }
    }

    #[test]
    fn waterfill_fills_to_one_level(
        gains in prop::collection::vec(1e-3..10.0f64, 1..24),
        p_max in 0.01..10.0f64,
        sigma2 in 1e-3..1.0f64,
    ) {
        let kappa = 0.3;
        let wf = waterfill_with_level(&gains, sigma2, kappa, p_max).unwrap();
        let total: f64 = wf.power.iter().sum();
        prop_assert!((total - p_max).abs() <= 1e-9 * p_max);
        for (&g, &p) in gains.iter().zip(&wf.power) {
            let floor = sigma2 / (kappa * g);
            prop_assert!(p >= 0.0);
            if p > 0.0 {
                prop_assert!((p + floor - wf.level).abs() <= 1e-9 * wf.level.max(1.0));
            } else {
                prop_assert!(floor >= wf.level * (1.0 - 1e-12));
            }
        }
        // More budget never takes power away from a subcarrier.
        let more = waterfill_with_level(&gains, sigma2, kappa, 2.0 * p_max).unwrap();
        for (a, b) in wf.power.iter().zip(&more.power) {
            prop_assert!(*b >= a - 1e-9 * p_max);
        }
    }

    #[test]
    fn moving_average_commutes_with_shifts_and_scales(
        series in prop::collection::vec(-100.0..100.0f64, 1..60),
        w in 1usize..20,
        shift in -50.0..50.0f64,
        scale in 0.1..10.0f64,
    ) {
        let base = moving_avg(&series, w).unwrap();
        let moved: Vec<f64> = series.iter().map(|x| scale * x + shift).collect();
        let out = moving_avg(&moved, w).unwrap();
        prop_assert_eq!(out.len(), series.len());
        for (a, b) in base.iter().zip(&out) {
            prop_assert!((scale * a + shift - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        // Past the warm-up, each point is the plain mean of its window.
        for t in (w - 1)..series.len() {
            let window = &series[t + 1 - w..=t];
            let mean = window.iter().sum::<f64>() / w as f64;
            prop_assert!((base[t] - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
        }
    }

    #[test]
    fn relative_rate_is_scale_free(pred in 0.0..100.0f64, reference in 0.01..100.0f64, s in 0.01..100.0f64) {
        let a = relative_sum_rate(pred, reference).unwrap();
        let b = relative_sum_rate(s * pred, s * reference).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn subsets_are_distinct_universe_members(l_max in 1usize..8, m_max in 1usize..20, seed in any::<u64>(), frac in 0.0..1.0f64) {
        let universe = PairUniverse::new(l_max, m_max).unwrap();
        prop_assert_eq!(universe.len(), l_max * m_max);
        let k = 1 + ((universe.len() - 1) as f64 * frac) as usize;
        let spec = NonStationaritySpec::sample(&universe, k, seed).unwrap();
        prop_assert_eq!(spec.k(), k);
        spec.validate().unwrap();
        prop_assert_eq!(&NonStationaritySpec::sample(&universe, k, seed).unwrap(), &spec);
        if k < universe.len() {
            let rest = spec.complement().unwrap();
            prop_assert_eq!(rest.k(), universe.len() - k);
            prop_assert!(rest.pairs.iter().all(|p| !spec.pairs.contains(p)));
        }
    }
}

#[test]
fn universe_of_the_default_bounds_has_4096_pairs() {
    assert_eq!(PairUniverse::new(32, 128).unwrap().len(), 4096);
}
