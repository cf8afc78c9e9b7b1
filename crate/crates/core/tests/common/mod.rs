//! Independent reference implementations used by the integration and
//! acceptance tests. None of these share code with the library.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;

/// Eigenvalues of a symmetric matrix (row-major) by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn lu_solve(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().partial_cmp(&m[j * n + col].abs()).unwrap())
            .unwrap();
        if piv != col {
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
            }
            x.swap(col, piv);
        }
        for r in col + 1..n {
            let f = m[r * n + col] / m[col * n + col];
            for k in col..n {
                m[r * n + k] -= f * m[col * n + k];
            }
            x[r] -= f * x[col];
        }
    }
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r * n + k] * x[k]).sum();
        x[r] = (x[r] - s) / m[r * n + r];
    }
    x
}

/// Sample mean and covariance (ddof 1) of rows.
pub fn sample_moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows[0].len();
    let c = rows.len() as f64;
    let mean: Vec<f64> = (0..n).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / c).collect();
    let mut cov = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cov[i * n + j] = rows
                .iter()
                .map(|r| (r[i] - mean[i]) * (r[j] - mean[j]))
                .sum::<f64>()
                / (c - 1.0);
        }
    }
    (mean, cov)
}

/// `sqrt((v − μ)ᵀ S⁻¹ (v − μ))` through a linear solve.
pub fn direct_mahalanobis(mean: &[f64], cov: &[f64], v: &[f64]) -> f64 {
    let n = mean.len();
    let d: Vec<f64> = v.iter().zip(mean).map(|(a, b)| a - b).collect();
    let y = lu_solve(cov, &d, n);
    d.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>().sqrt()
}

/// Γ(m/2) for positive integer m, by the half-integer recursion.
fn gamma_half(m: usize) -> f64 {
    let mut g = if m % 2 == 0 { 1.0 } else { std::f64::consts::PI.sqrt() };
    let mut x = if m % 2 == 0 { 1.0 } else { 0.5 };
    while x < m as f64 / 2.0 {
        g *= x;
        x += 1.0;
    }
    g
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of `f` on `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Probability mass of a standard m-dimensional Gaussian outside the sphere
/// of radius z, integrated shell by shell.
pub fn chi_survival_quadrature(z: f64, m: usize) -> f64 {
    let area = 2.0 * std::f64::consts::PI.powf(m as f64 / 2.0) / gamma_half(m);
    let norm = (2.0 * std::f64::consts::PI).powf(-(m as f64) / 2.0);
    let shell = move |r: f64| area * r.powi(m as i32 - 1) * norm * (-0.5 * r * r).exp();
    // Integrate in unit pieces so the adaptive rule always sees the peak.
    let mut total = 0.0;
    let mut a = z;
    while a < z + 40.0 {
        total += integrate(&shell, a, a + 1.0, 1e-15);
        a += 1.0;
    }
    total
}

/// Φ⁻¹ by bisection on a CDF.
pub fn bisect_icdf(cdf: impl Fn(f64) -> f64, p: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Mean over each full window `[i − k + 1, i]` that has enough present values.
pub fn brute_rolling_mean(z: &[Option<f64>], k: usize, min_valid_frac: f64) -> Vec<Option<f64>> {
    (0..z.len())
        .map(|i| {
            if i + 1 < k {
                return None;
            }
            let window = &z[i + 1 - k..=i];
            let present: Vec<f64> = window.iter().flatten().copied().collect();
            if (present.len() as f64) < min_valid_frac * k as f64 || present.is_empty() {
                return None;
            }
            let mut s = 0.0;
            for v in &present {
                s += v;
            }
            Some(s / present.len() as f64)
        })
        .collect()
}

/// Quantile by linear interpolation of the points `(j / (n − 1), x_(j))`.
pub fn brute_quantile(values: &[f64], p: f64) -> f64 {
    let mut x = values.to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = x.len();
    if n == 1 {
        return x[0];
    }
    for j in 0..n - 1 {
        let (pa, pb) = (j as f64 / (n - 1) as f64, (j + 1) as f64 / (n - 1) as f64);
        if p >= pa && p <= pb {
            let w = (p - pa) * (n - 1) as f64;
            return x[j] + w * (x[j + 1] - x[j]);
        }
    }
    x[n - 1]
}

/// Counts hour by hour: (detected events, flagged hours outside windows, flagged hours inside).
pub fn brute_confusion(flags: &[bool], windows: &[(usize, usize)]) -> (usize, usize, usize) {
    let detected = windows
        .iter()
        .filter(|(a, b)| (*a..=*b).any(|t| flags[t]))
        .count();
    let mut inside = 0;
    let mut outside = 0;
    for (t, f) in flags.iter().enumerate() {
        if *f {
            if windows.iter().any(|(a, b)| t >= *a && t <= *b) {
                inside += 1;
            } else {
                outside += 1;
            }
        }
    }
    (detected, outside, inside)
}

/// Random symmetric positive-definite matrix `A Aᵀ + εI`.
pub fn random_spd<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let a: Vec<f64> = (0..n * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = (0..n).map(|k| a[i * n + k] * a[j * n + k]).sum::<f64>();
        }
        s[i * n + i] += 0.1;
    }
    s
}

/// Rows drawn from `N(mean, L Lᵀ)` where `L` is the Cholesky factor of `cov`.
pub fn gaussian_rows<R: Rng>(rng: &mut R, mean: &[f64], cov: &[f64], count: usize) -> Vec<Vec<f64>> {
    let n = mean.len();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                l[i * n + i] = (cov[i * n + i] - s).sqrt();
            } else {
                l[i * n + j] = (cov[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    (0..count)
        .map(|_| {
            let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            (0..n)
                .map(|i| mean[i] + (0..=i).map(|k| l[i * n + k] * e[k]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Orthogonal matrix from Gram-Schmidt on Gaussian columns (row-major).
pub fn random_rotation<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        cols.push(v);
    }
    let mut q = vec![0.0; n * n];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            q[i * n + j] = c[i];
        }
    }
    q
}

pub fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| (0..n).map(|k| m[i * n + k] * v[k]).sum()).collect()
}

/// Kolmogorov-Smirnov distance of a sample from the uniform law on [0, 1].
pub fn ks_distance_uniform(ps: &[f64]) -> f64 {
    let mut s = ps.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, p) in s.iter().enumerate() {
        d = d.max((i as f64 + 1.0) / n - p).max(p - i as f64 / n);
    }
    d
}
