//! Regional test: PCA-truncated Mahalanobis distance of the vector of station
//! rolling means from its training distribution, with chi-distribution p-values.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::format_sig;
use crate::scoring::ScoreSeries;
use crate::special::chi_survival;
use crate::time::{EpochHour, TimeRange};

pub const DEFAULT_EVR_THRESHOLD: f64 = 0.9;

/// Fitted joint Gaussian of a region's rolling-mean vectors in its eigenbasis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionModel {
    pub stations: Vec<String>,
    pub mean: Vec<f64>,
    /// `eigvecs[j]` is the j-th principal axis (a column of V).
    pub eigvecs: Vec<Vec<f64>>,
    /// Descending, clamped at zero.
    pub eigvals: Vec<f64>,
    pub retained: usize,
    pub evr_threshold: f64,
    /// Complete rows the fit used.
    pub n_rows: usize,
}

impl RegionModel {
    /// Builds the model from a mean and a symmetric covariance (row-major, n×n).
    pub fn from_moments(
        stations: Vec<String>,
        mean: Vec<f64>,
        cov: &[f64],
        evr_threshold: f64,
        n_rows: usize,
    ) -> Result<Self> {
        let n = stations.len();
        if n == 0 {
            return Err(Error::InvalidParameter("region has no stations".into()));
        }
        if mean.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: mean.len(),
            });
        }
        if cov.len() != n * n {
            return Err(Error::Dimension {
                expected: n * n,
                got: cov.len(),
            });
        }
        if !(evr_threshold > 0.0 && evr_threshold <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "evr threshold {evr_threshold} outside (0, 1]"
            )));
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, cov));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        let mut eigvals = Vec::with_capacity(n);
        let mut eigvecs = Vec::with_capacity(n);
        for &j in &order {
            let lam = eig.eigenvalues[j];
            if lam < -1e-10 {
                log::warn!("covariance eigenvalue {lam:e} clamped to zero");
            }
            eigvals.push(lam.max(0.0));
            let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
            let lead = v
                .iter()
                .enumerate()
                .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            eigvecs.push(v);
        }

        let total: f64 = eigvals.iter().sum();
        if !(total > 0.0) {
            return Err(Error::ZeroVariance);
        }
        let retained = retained_rank(&eigvals, evr_threshold);
        Ok(Self {
            stations,
            mean,
            eigvecs,
            eigvals,
            retained,
            evr_threshold,
            n_rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.stations.len()
    }

    /// Cumulative explained-variance ratios.
    pub fn explained_variance(&self) -> Vec<f64> {
        let total: f64 = self.eigvals.iter().sum();
        self.eigvals
            .iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc / total)
            })
            .collect()
    }

    /// Covariance reassembled from the eigenpairs (row-major).
    pub fn covariance(&self) -> Vec<f64> {
        let n = self.dim();
        let mut c = vec![0.0; n * n];
        for (lam, v) in self.eigvals.iter().zip(&self.eigvecs) {
            for i in 0..n {
                for j in 0..n {
                    c[i * n + j] += lam * v[i] * v[j];
                }
            }
        }
        c
    }
}

/// Smallest m whose leading eigenvalues explain at least `threshold` of the
/// total variance. A relative slack of 1e-12 absorbs rounding in the sums.
pub fn retained_rank(eigvals_desc: &[f64], threshold: f64) -> usize {
    let total: f64 = eigvals_desc.iter().sum();
    let mut acc = 0.0;
    for (i, v) in eigvals_desc.iter().enumerate() {
        acc += v;
        if acc >= threshold * total * (1.0 - 1e-12) {
            return i + 1;
        }
    }
    eigvals_desc.len()
}

/// Rows of `stations`' rolling means over `range` where every station is present.
pub fn complete_rows(
    zbars: &BTreeMap<String, ScoreSeries>,
    stations: &[String],
    range: TimeRange,
) -> Result<Vec<(EpochHour, Vec<f64>)>> {
    let series = stations
        .iter()
        .map(|s| zbars.get(s).ok_or_else(|| Error::UnknownStation(s.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(range
        .hours()
        .filter_map(|t| {
            let row: Option<Vec<f64>> = series.iter().map(|s| s.zbar_at(t)).collect();
            row.map(|r| (t, r))
        })
        .collect())
}

/// Mean and sample covariance (ddof = 1) of complete rows, then eigendecomposition.
pub fn fit_region(
    zbars: &BTreeMap<String, ScoreSeries>,
    stations: &[String],
    train: TimeRange,
    evr_threshold: f64,
) -> Result<RegionModel> {
    if stations.is_empty() {
        return Err(Error::InvalidParameter("region has no stations".into()));
    }
    let rows = complete_rows(zbars, stations, train)?;
    let n = stations.len();
    if rows.len() < n + 1 {
        return Err(Error::InsufficientRows {
            needed: n + 1,
            found: rows.len(),
        });
    }
    let count = rows.len() as f64;
    let mut mean = vec![0.0; n];
    for (_, r) in &rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut cov = vec![0.0; n * n];
    for (_, r) in &rows {
        for i in 0..n {
            let di = r[i] - mean[i];
            for j in i..n {
                cov[i * n + j] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..n {
        for j in i..n {
            let c = cov[i * n + j] / (count - 1.0);
            cov[i * n + j] = c;
            cov[j * n + i] = c;
        }
    }
    RegionModel::from_moments(stations.to_vec(), mean, &cov, evr_threshold, rows.len())
}

/// Norm of the whitened principal coordinates of `v`, over the retained
/// components or all of them.
pub fn mahalanobis(region: &RegionModel, v: &[f64], use_all_components: bool) -> Result<f64> {
    let n = region.dim();
    if v.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: v.len(),
        });
    }
    let m = if use_all_components { n } else { region.retained };
    let mut sum = 0.0;
    for j in 0..m {
        let lam = region.eigvals[j];
        if !(lam > 0.0) {
            return Err(Error::DegenerateComponent { index: j });
        }
        let y: f64 = region.eigvecs[j]
            .iter()
            .zip(v.iter().zip(&region.mean))
            .map(|(e, (x, mu))| e * (x - mu))
            .sum();
        sum += y * y / lam;
    }
    Ok(sum.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionVerdict {
    pub t: EpochHour,
    #[serde(rename = "Z")]
    pub z: f64,
    pub p: f64,
    pub dof: usize,
}

/// One verdict per hour of `range` at which every region station has a rolling mean.
pub fn region_verdicts(
    region: &RegionModel,
    zbars: &BTreeMap<String, ScoreSeries>,
    range: TimeRange,
) -> Result<Vec<RegionVerdict>> {
    let dof = region.retained;
    complete_rows(zbars, &region.stations, range)?
        .into_iter()
        .map(|(t, row)| {
            let z = mahalanobis(region, &row, false)?;
            Ok(RegionVerdict {
                t,
                z,
                p: chi_survival(z, dof),
                dof,
            })
        })
        .collect()
}

/// A named station subset with an optional EVR override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub stations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evr_threshold: Option<f64>,
}

#[derive(Deserialize, Serialize)]
#[serde(untagged)]
enum RegionEntry {
    List(Vec<String>),
    Full {
        stations: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        evr_threshold: Option<f64>,
    },
}

/// Parses `{"name": ["s1", "s2"], "other": {"stations": [...], "evr_threshold": 0.8}}`.
/// Regions come back sorted by name.
pub fn parse_region_config(text: &str) -> Result<Vec<RegionSpec>> {
    let map: BTreeMap<String, RegionEntry> = serde_json::from_str(text)?;
    Ok(map
        .into_iter()
        .map(|(name, entry)| match entry {
            RegionEntry::List(stations) => RegionSpec {
                name,
                stations,
                evr_threshold: None,
            },
            RegionEntry::Full {
                stations,
                evr_threshold,
            } => RegionSpec {
                name,
                stations,
                evr_threshold,
            },
        })
        .collect())
}

pub fn region_config_json(regions: &[RegionSpec]) -> Result<String> {
    let map: BTreeMap<&str, RegionEntry> = regions
        .iter()
        .map(|r| {
            let entry = match r.evr_threshold {
                None => RegionEntry::List(r.stations.clone()),
                Some(e) => RegionEntry::Full {
                    stations: r.stations.clone(),
                    evr_threshold: Some(e),
                },
            };
            (r.name.as_str(), entry)
        })
        .collect();
    Ok(serde_json::to_string_pretty(&map)?)
}

/// Checks every region is non-empty and names only known stations.
pub fn validate_regions<'a>(
    regions: &[RegionSpec],
    known: impl IntoIterator<Item = &'a str>,
) -> Result<()> {
    let known: BTreeSet<&str> = known.into_iter().collect();
    for r in regions {
        if r.stations.is_empty() {
            return Err(Error::EmptyRegion(r.name.clone()));
        }
        if let Some(s) = r.stations.iter().find(|s| !known.contains(s.as_str())) {
            return Err(Error::UnknownStation(s.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionResult {
    pub name: String,
    pub model: RegionModel,
    pub verdicts: Vec<RegionVerdict>,
}

/// Fits each named subset independently on `train` and evaluates it on `test`.
pub fn hierarchy_eval(
    regions: &[RegionSpec],
    zbars: &BTreeMap<String, ScoreSeries>,
    train: TimeRange,
    test: TimeRange,
    default_evr: f64,
) -> Result<Vec<RegionResult>> {
    validate_regions(regions, zbars.keys().map(String::as_str))?;
    regions
        .iter()
        .map(|r| {
            let evr = r.evr_threshold.unwrap_or(default_evr);
            let model = fit_region(zbars, &r.stations, train, evr)?;
            let verdicts = region_verdicts(&model, zbars, test)?;
            Ok(RegionResult {
                name: r.name.clone(),
                model,
                verdicts,
            })
        })
        .collect()
}

/// Writes `region,t,Z,dof,p,flag_at_alpha` for every result in order.
pub fn write_region_verdicts_csv<W: Write>(results: &[RegionResult], alpha: f64, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["region", "t", "Z", "dof", "p", "flag_at_alpha"])?;
    for r in results {
        for v in &r.verdicts {
            wtr.write_record([
                r.name.clone(),
                v.t.to_string(),
                format_sig(v.z, 9),
                v.dof.to_string(),
                format_sig(v.p, 9),
                u8::from(v.p < alpha).to_string(),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<region csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn diag_model(d: &[f64], evr: f64) -> RegionModel {
        let n = d.len();
        let mut cov = vec![0.0; n * n];
        for (i, v) in d.iter().enumerate() {
            cov[i * n + i] = *v;
        }
        RegionModel::from_moments(names(n), vec![0.0; n], &cov, evr, 100).unwrap()
    }

    fn series(id: &str, t0: EpochHour, zbar: Vec<Option<f64>>) -> ScoreSeries {
        let mut s = ScoreSeries::from_z(id, t0, zbar.clone(), crate::scoring::ScoreKind::Zeta);
        s.zbar = zbar;
        s
    }

    #[test]
    fn evr_rule_examples() {
        assert_eq!(diag_model(&[9.0, 1.0], 0.9).retained, 1);
        assert_eq!(diag_model(&[8.0, 2.0], 0.9).retained, 2);
        assert_eq!(diag_model(&[1.0, 8.0], 0.8).retained, 1);
        assert_eq!(diag_model(&[1.0, 1.0, 1.0], 1.0).retained, 3);
    }

    #[test]
    fn eigvals_sorted_and_signs_fixed() {
        let m = diag_model(&[1.0, 3.0, 2.0], 0.9);
        assert_eq!(m.eigvals, vec![3.0, 2.0, 1.0]);
        assert_eq!(m.eigvecs[0], vec![0.0, 1.0, 0.0]);
        for v in &m.eigvecs {
            let lead = v.iter().cloned().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn zero_variance_and_bad_inputs() {
        let r = RegionModel::from_moments(names(2), vec![0.0; 2], &[0.0; 4], 0.9, 5);
        assert!(matches!(r, Err(Error::ZeroVariance)));
        let r = RegionModel::from_moments(names(2), vec![0.0; 3], &[0.0; 4], 0.9, 5);
        assert!(matches!(r, Err(Error::Dimension { .. })));
        assert!(RegionModel::from_moments(names(1), vec![0.0], &[1.0], 0.0, 5).is_err());
    }

    #[test]
    fn mahalanobis_examples() {
        let m = diag_model(&[1.0, 1.0], 1.0);
        assert_eq!(mahalanobis(&m, &[0.0, 0.0], false).unwrap(), 0.0);
        assert_abs_diff_eq!(mahalanobis(&m, &[1.0, 0.0], true).unwrap(), 1.0, epsilon = 1e-15);
        let d = diag_model(&[4.0, 1.0], 1.0);
        assert_abs_diff_eq!(mahalanobis(&d, &[2.0, 1.0], true).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
        assert!(matches!(mahalanobis(&d, &[1.0], true), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_eigenvalue_is_an_error_when_used() {
        let m = diag_model(&[1.0, 0.0], 0.9);
        assert_eq!(m.retained, 1);
        assert!(mahalanobis(&m, &[1.0, 1.0], false).is_ok());
        assert!(matches!(
            mahalanobis(&m, &[1.0, 1.0], true),
            Err(Error::DegenerateComponent { index: 1 })
        ));
    }

    #[test]
    fn fit_drops_incomplete_rows() {
        let mut zbars = BTreeMap::new();
        zbars.insert("a".into(), series("a", 0, vec![Some(1.0), Some(2.0), None, Some(3.0), Some(5.0)]));
        zbars.insert("b".into(), series("b", 0, vec![Some(0.0), Some(1.0), Some(9.0), Some(1.0), Some(0.5)]));
        let st = vec!["a".to_string(), "b".to_string()];
        let m = fit_region(&zbars, &st, TimeRange::new(0, 4).unwrap(), 0.9).unwrap();
        assert_eq!(m.n_rows, 4);
        assert_abs_diff_eq!(m.mean[0], 11.0 / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.mean[1], 2.5 / 4.0, epsilon = 1e-15);

        let v = region_verdicts(&m, &zbars, TimeRange::new(0, 4).unwrap()).unwrap();
        assert_eq!(v.iter().map(|v| v.t).collect::<Vec<_>>(), vec![0, 1, 3, 4]);

        let short = fit_region(&zbars, &st, TimeRange::new(0, 1).unwrap(), 0.9);
        assert!(matches!(short, Err(Error::InsufficientRows { needed: 3, found: 2 })));
        let unknown = fit_region(&zbars, &["zz".to_string()], TimeRange::new(0, 4).unwrap(), 0.9);
        assert!(matches!(unknown, Err(Error::UnknownStation(_))));
    }

    #[test]
    fn verdict_at_mean_is_certain() {
        let m = diag_model(&[2.0, 1.0, 0.5], 0.9);
        let mut zbars = BTreeMap::new();
        for s in &m.stations {
            zbars.insert(s.clone(), series(s, 7, vec![Some(0.0)]));
        }
        let v = region_verdicts(&m, &zbars, TimeRange::new(0, 10).unwrap()).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].t, v[0].z, v[0].p, v[0].dof), (7, 0.0, 1.0, m.retained));
    }

    #[test]
    fn singleton_region_is_univariate() {
        let mut zbars = BTreeMap::new();
        let vals = [0.3, -0.2, 0.5, 0.1, -0.4, 0.0];
        zbars.insert("a".to_string(), series("a", 0, vals.iter().map(|v| Some(*v)).collect()));
        let st = vec!["a".to_string()];
        let m = fit_region(&zbars, &st, TimeRange::new(0, 5).unwrap(), 0.9).unwrap();
        let mu = vals.iter().sum::<f64>() / 6.0;
        let sd = (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 5.0).sqrt();
        let z = mahalanobis(&m, &[1.0], false).unwrap();
        assert_abs_diff_eq!(z, (1.0 - mu).abs() / sd, epsilon = 1e-12);
        assert_eq!(m.retained, 1);
    }

    #[test]
    fn region_config_forms() {
        let text = r#"{"city": ["a", "b"], "country": {"stations": ["a", "b", "c"], "evr_threshold": 0.8}}"#;
        let regions = parse_region_config(text).unwrap();
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[0].name, "city");
        assert_eq!(regions[0].evr_threshold, None);
        assert_eq!(regions[1].evr_threshold, Some(0.8));
        let back = parse_region_config(&region_config_json(&regions).unwrap()).unwrap();
        assert_eq!(back, regions);

        assert!(matches!(
            validate_regions(&regions, ["a", "b"]),
            Err(Error::UnknownStation(s)) if s == "c"
        ));
        let empty = vec![RegionSpec {
            name: "e".into(),
            stations: vec![],
            evr_threshold: None,
        }];
        assert!(matches!(validate_regions(&empty, ["a"]), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn verdict_csv_layout() {
        let m = diag_model(&[1.0], 0.9);
        let results = vec![RegionResult {
            name: "r".into(),
            model: m,
            verdicts: vec![RegionVerdict {
                t: 5,
                z: 4.0,
                p: chi_survival(4.0, 1),
                dof: 1,
            }],
        }];
        let mut buf = Vec::new();
        write_region_verdicts_csv(&results, 0.001, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "region,t,Z,dof,p,flag_at_alpha\nr,5,4,1,6.33424837e-5,1\n");
    }
}
