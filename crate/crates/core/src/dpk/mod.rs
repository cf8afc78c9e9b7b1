//! Probabilistic Koopman forecaster.
//!
//! A series is modelled as `x_t ~ N(μ̂_t, σ̂_t)` where `(μ̂_t, log σ̂_t)` is the
//! output of a small feedforward network applied to the Koopman observables
//! `[cos(ω t); sin(ω t)]` of a fixed frequency set, plus an affine trend
//! feature standing in for the zero-frequency limit. Because the features are
//! bounded sinusoids (and a linear ramp), the model extrapolates arbitrarily
//! far past its training window.

mod model;
pub mod network;
mod optim;

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::{EpochHour, TimeRange, HOURS_PER_DAY, HOURS_PER_WEEK, HOURS_PER_YEAR};

pub use model::{load_model, save_model, DpkModel, TrainConfig, TrainMeta, MODEL_FORMAT_VERSION};
pub use optim::AdamW;

/// Angular frequencies (rad/hour) plus the optional trend feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencySet {
    pub omegas: Vec<f64>,
    pub include_trend: bool,
    /// Hours mapped to τ = 0 and τ = 1 by the trend feature.
    pub train_span: TimeRange,
}

impl FrequencySet {
    pub fn new(mut omegas: Vec<f64>, include_trend: bool, train_span: TimeRange) -> Result<Self> {
        omegas.sort_by(f64::total_cmp);
        let set = Self {
            omegas,
            include_trend,
            train_span,
        };
        set.validate()?;
        Ok(set)
    }

    /// Daily, weekly and annual cycles with the trend feature.
    pub fn standard(train_span: TimeRange) -> Self {
        Self::from_periods(
            &[
                HOURS_PER_DAY as f64,
                HOURS_PER_WEEK as f64,
                HOURS_PER_YEAR,
            ],
            true,
            train_span,
        )
        .expect("standard periods are valid")
    }

    pub fn from_periods(periods_hours: &[f64], include_trend: bool, train_span: TimeRange) -> Result<Self> {
        Self::new(
            periods_hours.iter().map(|p| TAU / p).collect(),
            include_trend,
            train_span,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.omegas.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::InvalidFrequencies(
                "frequencies must be finite and positive".into(),
            ));
        }
        if self.omegas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidFrequencies(
                "frequencies must be distinct and ascending".into(),
            ));
        }
        if self.include_trend && self.train_span.end <= self.train_span.start {
            return Err(Error::InvalidFrequencies(
                "trend feature needs a non-degenerate train span".into(),
            ));
        }
        if self.omegas.is_empty() && !self.include_trend {
            return Err(Error::InvalidFrequencies("no features".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        2 * self.omegas.len() + usize::from(self.include_trend)
    }

    /// Longest period in hours, if any frequency is present.
    pub fn slowest_period(&self) -> Option<f64> {
        self.omegas.first().map(|w| 2.0 * PI / w)
    }

    /// Writes the feature vector for hour `t` into `out` (length [`Self::width`]).
    pub fn write_features(&self, t: EpochHour, out: &mut [f64]) {
        let k = self.omegas.len();
        let tf = t as f64;
        for (i, w) in self.omegas.iter().enumerate() {
            let (s, c) = (w * tf).sin_cos();
            out[i] = c;
            out[k + i] = s;
        }
        if self.include_trend {
            let span = (self.train_span.end - self.train_span.start) as f64;
            out[2 * k] = (t - self.train_span.start) as f64 / span;
        }
    }
}

/// `[cos(ω₁t) … cos(ω_k t), sin(ω₁t) … sin(ω_k t), τ]`; τ is not clamped outside the train span.
pub fn features(t: EpochHour, freqs: &FrequencySet) -> Result<Vec<f64>> {
    freqs.validate()?;
    let mut out = vec![0.0; freqs.width()];
    freqs.write_features(t, &mut out);
    Ok(out)
}

/// Gaussian negative log-likelihood of `x` under `N(mu, sigma)`.
pub fn nll(x: f64, mu: f64, sigma: f64) -> f64 {
    let r = (x - mu) / sigma;
    0.5 * (TAU * sigma * sigma).ln() + 0.5 * r * r
}

/// Predicted Gaussian parameters at one hour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastPoint {
    pub t: EpochHour,
    pub mu: f64,
    pub sigma: f64,
}
