//! Gaussian and chi-distribution special functions.
//!
//! `erf`/`erfc` come from `libm` (a port of the FreeBSD msun routines). The
//! normal quantile is Wichura's AS241 (PPND16), accurate to about 1e-16
//! relative. The chi survival function uses the closed forms of the
//! regularized upper incomplete gamma function at integer and half-integer
//! shape, which is all an integer number of degrees of freedom needs.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Standard normal CDF, Φ(x).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal survival function, 1 − Φ(x), without cancellation in the upper tail.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal quantile Φ⁻¹(p) for p in [0, 1]; ±∞ at the endpoints, NaN outside.
pub fn normal_icdf(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_813e4) * r
            + 6.726_577_092_700_87e4)
            * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5;
        let den = ((((((5.226_495_278_852_854_5e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return q * num / den;
    }

    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_8e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_7e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_445_9e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// Upper-tail normal quantile: the x with 1 − Φ(x) = q, precise for small q.
pub fn normal_isf(q: f64) -> f64 {
    -normal_icdf(q)
}

/// Survival function of the chi distribution with `dof` degrees of freedom.
///
/// Equals Q(dof/2, z²/2), the regularized upper incomplete gamma function,
/// which is the probability mass of a `dof`-dimensional standard Gaussian
/// lying outside the ball of radius `z`.
pub fn chi_survival(z: f64, dof: usize) -> f64 {
    assert!(dof >= 1, "chi distribution needs at least one degree of freedom");
    if z.is_nan() {
        return f64::NAN;
    }
    if z <= 0.0 {
        return 1.0;
    }
    let x = 0.5 * z * z;
    let p = if dof % 2 == 0 {
        // Q(n, x) = e^{-x} Σ_{j<n} x^j / j!
        let mut term = (-x).exp();
        let mut sum = term;
        for j in 1..dof / 2 {
            term *= x / j as f64;
            sum += term;
        }
        sum
    } else {
        // Q(n + 1/2, x) = erfc(√x) + e^{-x} Σ_{j<n} x^{j+1/2} / Γ(j + 3/2)
        let mut sum = libm::erfc(z * FRAC_1_SQRT_2);
        let mut term = (-x).exp() * x.sqrt() * 2.0 / PI.sqrt();
        for j in 0..(dof - 1) / 2 {
            sum += term;
            term *= x / (j as f64 + 1.5);
        }
        sum
    };
    p.clamp(0.0, 1.0)
}

/// Kolmogorov–Smirnov distance between the empirical distribution of `ps` and U(0, 1).
pub fn ks_uniform(ps: &[f64]) -> f64 {
    if ps.is_empty() {
        return 0.0;
    }
    let mut sorted: Vec<f64> = ps.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let above = (i as f64 + 1.0) / n - p;
            let below = p - i as f64 / n;
            above.max(below)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cdf_known_values() {
        assert_abs_diff_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-16);
        assert_abs_diff_eq!(normal_cdf(1.959963984540054), 0.975, epsilon = 1e-15);
        assert_abs_diff_eq!(normal_sf(-1.0) + normal_sf(1.0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn icdf_center_and_symmetry() {
        assert_eq!(normal_icdf(0.5), 0.0);
        for &p in &[1e-5, 0.01, 0.2, 0.45] {
            assert_abs_diff_eq!(normal_icdf(p), -normal_icdf(1.0 - p), epsilon = 1e-9);
        }
        assert_abs_diff_eq!(normal_icdf(1e-20), -9.262_340_089_798_409, epsilon = 1e-12);
        assert_abs_diff_eq!(normal_icdf(1e-300), -37.047_096_299_361_2, epsilon = 1e-10);
        assert!(normal_icdf(1.5).is_nan());
        assert_eq!(normal_icdf(0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn icdf_inverts_cdf() {
        for i in -80..=80 {
            let x = i as f64 * 0.1;
            let back = if x < 0.0 {
                normal_icdf(normal_cdf(x))
            } else {
                normal_isf(normal_sf(x))
            };
            assert_abs_diff_eq!(back, x, epsilon = 1e-12);
        }
    }

    #[test]
    fn chi_survival_closed_forms() {
        assert_eq!(chi_survival(0.0, 4), 1.0);
        assert_abs_diff_eq!(chi_survival(2.0, 2), (-2.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(chi_survival(1.959963984540054, 1), 0.05, epsilon = 1e-14);
        assert_abs_diff_eq!(chi_survival(1.0, 3), 0.801_251_956_901_200_9, epsilon = 1e-13);
    }

    #[test]
    fn ks_of_perfect_grid_is_half_step() {
        let ps: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert_abs_diff_eq!(ks_uniform(&ps), 0.005, epsilon = 1e-12);
    }
}
