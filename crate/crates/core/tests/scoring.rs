mod common;

use approx::assert_abs_diff_eq;
use dpk_anomaly::scoring::{critical_value, fit_sampling_dist, quantile_sorted, rolling_mean, ScoreKind, ScoreSeries};
use dpk_anomaly::special::{normal_cdf, normal_icdf};
use proptest::prelude::*;

use common::*;

#[test]
fn icdf_matches_bisection() {
    for i in 1..2000 {
        let p = i as f64 / 2000.0;
        assert_abs_diff_eq!(normal_icdf(p), bisect_icdf(normal_cdf, p), epsilon = 1e-10);
    }
    for e in 2..=15 {
        let p = 10f64.powi(-e);
        assert_abs_diff_eq!(normal_icdf(p), bisect_icdf(normal_cdf, p), epsilon = 1e-9);
    }
}

#[test]
fn critical_values_match_bisection() {
    for alpha in [0.05, 0.01, 0.001, 1e-4] {
        let oracle = -bisect_icdf(normal_cdf, alpha / 2.0);
        assert_abs_diff_eq!(critical_value(alpha).unwrap(), oracle, epsilon = 1e-10);
    }
    assert_abs_diff_eq!(critical_value(0.05).unwrap(), 1.959_964, epsilon = 1e-6);
    assert_abs_diff_eq!(critical_value(0.001).unwrap(), 3.290_527, epsilon = 1e-6);
}

fn opt_vec() -> impl Strategy<Value = Vec<Option<f64>>> {
    prop::collection::vec(prop::option::weighted(0.85, -5.0f64..5.0), 1..120)
}

proptest! {
    #[test]
    fn rolling_mean_matches_brute_force(z in opt_vec(), k in 1usize..30, frac in 0.3f64..1.0) {
        let s = ScoreSeries::from_z("a", 0, z.clone(), ScoreKind::ZObs);
        let r = rolling_mean(&s, k, frac).unwrap();
        prop_assert_eq!(r.zbar, brute_rolling_mean(&z, k, frac));
    }

    #[test]
    fn quartiles_match_brute_force(xs in prop::collection::vec(-100.0f64..100.0, 1..60), p in 0.0f64..1.0) {
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        let a = quantile_sorted(&sorted, p);
        let b = brute_quantile(&xs, p);
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }

    #[test]
    fn iqr_fit_matches_brute_force(xs in prop::collection::vec(-10.0f64..10.0, 4..80), outlier in 20.0f64..100.0) {
        let mut data = xs.clone();
        data.push(outlier);
        let (q1, q3) = (brute_quantile(&data, 0.25), brute_quantile(&data, 0.75));
        let (lo, hi) = (q1 - 2.0 * (q3 - q1), q3 + 2.0 * (q3 - q1));
        let kept: Vec<f64> = data.iter().copied().filter(|v| *v >= lo && *v <= hi).collect();
        prop_assume!(kept.len() >= 2);
        let n = kept.len() as f64;
        let mu = kept.iter().sum::<f64>() / n;
        let sd = (kept.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        prop_assume!(sd > 0.0);
        let d = fit_sampling_dist(&data, 2.0).unwrap();
        prop_assert_eq!(d.n_used, kept.len());
        prop_assert_eq!(d.n_rejected, data.len() - kept.len());
        prop_assert!((d.mu - mu).abs() < 1e-12);
        prop_assert!((d.sigma - sd).abs() < 1e-12);
    }
}
