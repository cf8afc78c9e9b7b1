//! Grid sweep over α, rolling window k and EVR threshold, scored by F_β and
//! detection latency against labeled anomaly windows.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::format_sig;
use crate::region::{fit_region, region_verdicts};
use crate::scoring::{reject_outliers, rolling_mean, ScoreSeries};
use crate::time::{EpochHour, TimeRange};

pub const DEFAULT_BETA: f64 = 1.0 / 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub ks: Vec<usize>,
    pub evr_thresholds: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            alphas: vec![1e-2, 1e-3, 1e-4],
            ks: vec![24, 168, 336],
            evr_thresholds: vec![0.8, 0.9, 0.99],
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.ks.is_empty() || self.evr_thresholds.is_empty() {
            return Err(Error::EmptyGrid);
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::InvalidParameter(format!("alpha {a} outside (0, 1)")));
        }
        if self.ks.contains(&0) {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        if let Some(e) = self.evr_thresholds.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return Err(Error::InvalidParameter(format!("evr threshold {e} outside (0, 1]")));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.alphas.len() * self.ks.len() * self.evr_thresholds.len()
    }
}

/// `(1 + β²)PR / (β²P + R)`, with 0/0 taken as 0.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

/// Event-level recall, hour-level precision and per-event latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub precision: f64,
    pub recall: f64,
    /// Detected events.
    pub tp: usize,
    /// Flagged hours outside every window.
    pub fp: usize,
    /// Missed events.
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub flagged_hours: usize,
    /// First flag minus window start, per detected event in window order.
    pub latencies: Vec<i64>,
}

impl RunScore {
    pub fn mean_latency(&self) -> Option<f64> {
        (!self.latencies.is_empty())
            .then(|| self.latencies.iter().sum::<i64>() as f64 / self.latencies.len() as f64)
    }

    pub fn f_beta(&self, beta: f64) -> f64 {
        f_beta(self.precision, self.recall, beta)
    }
}

/// Scores flagged hours against anomaly windows. With no flags precision is
/// reported as 1; with no windows recall is 0.
pub fn score_run(flags: &[EpochHour], windows: &[TimeRange]) -> RunScore {
    let mut sorted = flags.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let inside = sorted
        .iter()
        .filter(|t| windows.iter().any(|w| w.contains(**t)))
        .count();
    let mut latencies = Vec::new();
    for w in windows {
        let i = sorted.partition_point(|t| *t < w.start);
        if let Some(&t) = sorted.get(i).filter(|t| **t <= w.end) {
            latencies.push(t - w.start);
        }
    }
    let tp = latencies.len();
    RunScore {
        precision: if sorted.is_empty() {
            1.0
        } else {
            inside as f64 / sorted.len() as f64
        },
        recall: if windows.is_empty() {
            0.0
        } else {
            tp as f64 / windows.len() as f64
        },
        tp,
        fp: sorted.len() - inside,
        fn_: windows.len() - tp,
        flagged_hours: sorted.len(),
        latencies,
    }
}

/// Raw scores of one region plus the labeled windows to score against.
#[derive(Debug, Clone)]
pub struct SweepInput {
    /// Hourly z (or ζ) per station; rolling means are recomputed per k.
    pub scores: BTreeMap<String, ScoreSeries>,
    pub stations: Vec<String>,
    pub train: TimeRange,
    pub test: TimeRange,
    pub windows: Vec<TimeRange>,
    pub lambda: f64,
    pub min_valid_frac: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub k: usize,
    pub evr: f64,
    pub f_beta: f64,
    pub score: RunScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Index of the first row with maximal F_β.
    pub best: usize,
}

impl SweepResult {
    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }
}

/// Full factorial evaluation, rows ordered by α, then k, then EVR threshold.
pub fn run_sweep(grid: &SweepGrid, input: &SweepInput) -> Result<SweepResult> {
    grid.validate()?;
    if input.windows.is_empty() {
        return Err(Error::InvalidParameter("sweep needs at least one anomalous event".into()));
    }
    // Region p-values for every (k, evr) pair, computed once and thresholded per α.
    let pvals: Vec<Vec<Vec<(EpochHour, f64)>>> = grid
        .ks
        .par_iter()
        .map(|&k| -> Result<Vec<Vec<(EpochHour, f64)>>> {
            let mut zbars = BTreeMap::new();
            for s in &input.stations {
                let raw = input
                    .scores
                    .get(s)
                    .ok_or_else(|| Error::UnknownStation(s.clone()))?;
                let rolled = rolling_mean(raw, k, input.min_valid_frac)?;
                zbars.insert(s.clone(), rolled);
            }
            let filtered: BTreeMap<String, ScoreSeries> = zbars
                .iter()
                .map(|(s, z)| (s.clone(), reject_outliers(z, input.train, input.lambda)))
                .collect();
            grid.evr_thresholds
                .iter()
                .map(|&evr| {
                    let region = fit_region(&filtered, &input.stations, input.train, evr)?;
                    Ok(region_verdicts(&region, &zbars, input.test)?
                        .into_iter()
                        .map(|v| (v.t, v.p))
                        .collect())
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(grid.n_cells());
    for &alpha in &grid.alphas {
        for (ki, &k) in grid.ks.iter().enumerate() {
            for (ei, &evr) in grid.evr_thresholds.iter().enumerate() {
                let flags: Vec<EpochHour> = pvals[ki][ei]
                    .iter()
                    .filter(|(_, p)| *p < alpha)
                    .map(|(t, _)| *t)
                    .collect();
                let score = score_run(&flags, &input.windows);
                rows.push(SweepRow {
                    alpha,
                    k,
                    evr,
                    f_beta: score.f_beta(input.beta),
                    score,
                });
            }
        }
    }
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.f_beta > rows[b].f_beta { i } else { b });
    Ok(SweepResult { rows, best })
}

/// Writes `alpha,k,evr,precision,recall,f16,latency`; latency is empty when nothing was detected.
pub fn write_sweep_csv<W: Write>(result: &SweepResult, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["alpha", "k", "evr", "precision", "recall", "f16", "latency"])?;
    for r in &result.rows {
        wtr.write_record([
            format_sig(r.alpha, 9),
            r.k.to_string(),
            format_sig(r.evr, 9),
            format_sig(r.score.precision, 9),
            format_sig(r.score.recall, 9),
            format_sig(r.f_beta, 9),
            r.score.mean_latency().map(|l| format_sig(l, 9)).unwrap_or_default(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<sweep csv>", e))?;
    Ok(())
}
