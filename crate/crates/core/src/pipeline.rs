//! End-to-end detection pipeline: per-station training, scoring, station
//! and region tests, and calibration summaries.

use std::collections::BTreeMap;
use std::path::PathBuf;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dpk::{DpkModel, FrequencySet, TrainConfig};
use crate::error::{Error, Result};
use crate::ingest::{SeriesFrame, StationPair};
use crate::region::{
    fit_region, region_verdicts, validate_regions, RegionModel, RegionResult, RegionSpec,
    DEFAULT_EVR_THRESHOLD,
};
use crate::scoring::{
    classify, fit_sampling_dist, reject_outliers, rolling_mean, zeta_series, zscore_series,
    SamplingDist, ScoreSeries, StationVerdict, DEFAULT_LAMBDA, DEFAULT_MIN_VALID_FRAC,
};
use crate::special::ks_uniform;
use crate::time::{format_hour, parse_hour, EpochHour, TimeRange, HOURS_PER_YEAR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Holds `obs/<station>.csv` and, optionally, `model/<station>.csv`.
    pub data_dir: PathBuf,
    pub periods_hours: Vec<f64>,
    pub include_trend: bool,
    #[serde(with = "opt_hour")]
    pub train_start: Option<EpochHour>,
    #[serde(with = "opt_hour")]
    pub train_end: Option<EpochHour>,
    pub k: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub evr_threshold: f64,
    pub min_valid_frac: f64,
    pub regions_file: Option<PathBuf>,
    /// Master seed; each station and series kind derives its own training seed.
    pub seed: u64,
    pub use_domain_model: bool,
    /// Training hyperparameters. The `seed` field is replaced by the derived seed.
    pub train: TrainConfig,
    /// Initialize every station after the first from the first station's model.
    pub warm_start: bool,
    /// Epochs for warm-started stations; `None` uses `train.epochs`.
    pub warm_epochs: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            periods_hours: vec![24.0, 168.0, HOURS_PER_YEAR],
            include_trend: true,
            train_start: None,
            train_end: None,
            k: 168,
            alpha: 0.001,
            lambda: DEFAULT_LAMBDA,
            evr_threshold: DEFAULT_EVR_THRESHOLD,
            min_valid_frac: DEFAULT_MIN_VALID_FRAC,
            regions_file: None,
            seed: 0,
            use_domain_model: false,
            train: TrainConfig::default(),
            warm_start: true,
            warm_epochs: None,
        }
    }
}

mod opt_hour {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Hour(EpochHour),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<EpochHour>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(t) => s.serialize_str(&format_hour(*t)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<EpochHour>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Hour(t)) => Ok(Some(t)),
            Some(Repr::Text(s)) => parse_hour(&s).map(Some).map_err(serde::de::Error::custom),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(self.evr_threshold > 0.0 && self.evr_threshold <= 1.0) {
            return bad(format!("evr threshold {} outside (0, 1]", self.evr_threshold));
        }
        if !(self.min_valid_frac > 0.0 && self.min_valid_frac <= 1.0) {
            return bad(format!("min valid fraction {} outside (0, 1]", self.min_valid_frac));
        }
        if self.periods_hours.is_empty() && !self.include_trend {
            return bad("no features configured".into());
        }
        if let (Some(a), Some(b)) = (self.train_start, self.train_end) {
            if b <= a {
                return bad("train interval is empty".into());
            }
        }
        if self.warm_epochs == Some(0) {
            return bad("warm epochs must be positive".into());
        }
        Ok(())
    }

    /// The configured train interval, completed from `data` where unset: it
    /// starts at the first data hour and spans two years or the available data.
    pub fn train_range(&self, data: TimeRange) -> Result<TimeRange> {
        let start = self.train_start.unwrap_or(data.start);
        let end = self
            .train_end
            .unwrap_or_else(|| (start + 2 * HOURS_PER_YEAR as i64 - 1).min(data.end));
        let range = TimeRange::new(start, end)?;
        if range.len() < 2 * HOURS_PER_YEAR as usize {
            warn!(
                "train interval covers {} hours, less than two years",
                range.len()
            );
        }
        Ok(range)
    }

    pub fn frequency_set(&self, train: TimeRange) -> Result<FrequencySet> {
        FrequencySet::from_periods(&self.periods_hours, self.include_trend, train)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesKind {
    Obs,
    Model,
}

impl SeriesKind {
    pub fn tag(&self) -> &'static str {
        match self {
            SeriesKind::Obs => "obs",
            SeriesKind::Model => "model",
        }
    }
}

/// Training seed for one station and series kind (FNV-1a over the id, mixed with the master seed).
pub fn station_seed(seed: u64, station: &str, kind: SeriesKind) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in station.bytes().chain(kind.tag().bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Observation model plus the domain-model model when one was trained.
#[derive(Debug, Clone, PartialEq)]
pub struct StationModels {
    pub obs: DpkModel,
    pub model: Option<DpkModel>,
}

/// Warm-start sources for the obs and domain-model series.
#[derive(Debug, Clone, Default)]
pub struct Templates {
    pub obs: Option<DpkModel>,
    pub model: Option<DpkModel>,
}

impl Templates {
    fn get(&self, kind: SeriesKind) -> Option<&DpkModel> {
        match kind {
            SeriesKind::Obs => self.obs.as_ref(),
            SeriesKind::Model => self.model.as_ref(),
        }
    }

    fn set(&mut self, kind: SeriesKind, m: DpkModel) {
        match kind {
            SeriesKind::Obs => self.obs = Some(m),
            SeriesKind::Model => self.model = Some(m),
        }
    }
}

pub fn train_one(
    frame: &SeriesFrame,
    kind: SeriesKind,
    freqs: &FrequencySet,
    cfg: &PipelineConfig,
    warm: Option<&DpkModel>,
) -> Result<DpkModel> {
    let mut tc = cfg.train.clone();
    tc.seed = station_seed(cfg.seed, &frame.station_id, kind);
    if warm.is_some() {
        tc.epochs = cfg.warm_epochs.unwrap_or(tc.epochs);
    }
    DpkModel::train(frame, freqs, &tc, warm)
}

/// Trains every station on `train`. With warm starting, stations without a
/// template in `templates` use the first station that trains successfully
/// as the template for the rest. Results keep the input order.
pub fn train_network(
    pairs: &[StationPair],
    cfg: &PipelineConfig,
    train: TimeRange,
    templates: Templates,
) -> Vec<(String, Result<StationModels>)> {
    let freqs = match cfg.frequency_set(train) {
        Ok(f) => f,
        Err(e) => {
            let msg = e.to_string();
            return pairs
                .iter()
                .map(|p| (p.station_id().to_string(), Err(Error::InvalidFrequencies(msg.clone()))))
                .collect();
        }
    };
    let clip = |f: &SeriesFrame| f.reindex(train);
    let kinds: &[SeriesKind] = if cfg.use_domain_model {
        &[SeriesKind::Obs, SeriesKind::Model]
    } else {
        &[SeriesKind::Obs]
    };
    let frame_of = |p: &StationPair, kind: SeriesKind| -> Result<SeriesFrame> {
        match kind {
            SeriesKind::Obs => Ok(clip(&p.obs)),
            SeriesKind::Model => p.model.as_ref().map(clip).ok_or_else(|| {
                Error::InvalidParameter(format!("station {} has no domain-model series", p.station_id()))
            }),
        }
    };

    let mut templates = templates;
    let mut seeded: BTreeMap<(usize, SeriesKind), DpkModel> = BTreeMap::new();
    if cfg.warm_start {
        for &kind in kinds {
            if templates.get(kind).is_some() {
                continue;
            }
            for (i, p) in pairs.iter().enumerate() {
                let Ok(frame) = frame_of(p, kind) else { continue };
                match train_one(&frame, kind, &freqs, cfg, None) {
                    Ok(m) => {
                        templates.set(kind, m.clone());
                        seeded.insert((i, kind), m);
                        break;
                    }
                    Err(e) => warn!("{} {}: {e}", p.station_id(), kind.tag()),
                }
            }
        }
    }

    let jobs: Vec<(usize, SeriesKind)> = (0..pairs.len())
        .flat_map(|i| kinds.iter().map(move |&k| (i, k)))
        .filter(|job| !seeded.contains_key(job))
        .collect();
    let trained: Vec<((usize, SeriesKind), Result<DpkModel>)> = jobs
        .par_iter()
        .map(|&(i, kind)| {
            let warm = cfg.warm_start.then(|| templates.get(kind)).flatten();
            let r = frame_of(&pairs[i], kind).and_then(|f| train_one(&f, kind, &freqs, cfg, warm));
            ((i, kind), r)
        })
        .collect();
    let mut results: BTreeMap<(usize, SeriesKind), Result<DpkModel>> =
        seeded.into_iter().map(|(k, m)| (k, Ok(m))).collect();
    results.extend(trained);

    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let obs = results.remove(&(i, SeriesKind::Obs)).expect("obs job");
            let model = results.remove(&(i, SeriesKind::Model));
            let r = obs.and_then(|obs| {
                let model = model.transpose()?;
                Ok(StationModels { obs, model })
            });
            (p.station_id().to_string(), r)
        })
        .collect()
}

/// Hourly z (or ζ when a domain model is used) with rolling means over `k`.
pub fn score_station(pair: &StationPair, models: &StationModels, cfg: &PipelineConfig) -> Result<ScoreSeries> {
    raw_scores(pair, models, cfg.use_domain_model)
        .and_then(|z| rolling_mean(&z, cfg.k, cfg.min_valid_frac))
}

/// Hourly z or ζ without rolling means.
pub fn raw_scores(pair: &StationPair, models: &StationModels, use_domain_model: bool) -> Result<ScoreSeries> {
    let z_obs = zscore_series(&pair.obs, &models.obs);
    if !use_domain_model {
        return Ok(z_obs);
    }
    let (Some(frame), Some(model)) = (&pair.model, &models.model) else {
        return Err(Error::InvalidParameter(format!(
            "station {} lacks a domain-model series or model",
            pair.station_id()
        )));
    };
    zeta_series(&z_obs, &zscore_series(frame, model))
}

/// Sampling distribution of the train-interval rolling means.
pub fn fit_station_dist(series: &ScoreSeries, train: TimeRange, lambda: f64) -> Result<SamplingDist> {
    fit_sampling_dist(&series.zbar_in(train), lambda)
}

/// Station verdicts for the hours of `range`.
pub fn station_verdicts(
    series: &ScoreSeries,
    dist: &SamplingDist,
    range: TimeRange,
    alpha: f64,
) -> Result<Vec<StationVerdict>> {
    match series.restrict(range) {
        Some(s) => classify(&s, dist, alpha),
        None => Ok(Vec::new()),
    }
}

/// Fits each region on `train` after per-station IQR rejection of the rolling means.
pub fn fit_regions(
    regions: &[RegionSpec],
    zbars: &BTreeMap<String, ScoreSeries>,
    train: TimeRange,
    cfg: &PipelineConfig,
) -> Result<Vec<(String, RegionModel)>> {
    validate_regions(regions, zbars.keys().map(String::as_str))?;
    let filtered: BTreeMap<String, ScoreSeries> = zbars
        .iter()
        .map(|(s, z)| (s.clone(), reject_outliers(z, train, cfg.lambda)))
        .collect();
    regions
        .par_iter()
        .map(|r| {
            let evr = r.evr_threshold.unwrap_or(cfg.evr_threshold);
            Ok((r.name.clone(), fit_region(&filtered, &r.stations, train, evr)?))
        })
        .collect()
}

pub fn evaluate_regions(
    models: &[(String, RegionModel)],
    zbars: &BTreeMap<String, ScoreSeries>,
    range: TimeRange,
) -> Result<Vec<RegionResult>> {
    models
        .par_iter()
        .map(|(name, model)| {
            Ok(RegionResult {
                name: name.clone(),
                model: model.clone(),
                verdicts: region_verdicts(model, zbars, range)?,
            })
        })
        .collect()
}

/// One region holding every station, named `all`.
pub fn whole_network_region(stations: impl IntoIterator<Item = String>) -> RegionSpec {
    RegionSpec {
        name: "all".into(),
        stations: stations.into_iter().collect(),
        evr_threshold: None,
    }
}

/// Merges flagged hours into maximal runs of consecutive hours.
pub fn flag_windows(hours: &[EpochHour]) -> Vec<TimeRange> {
    let mut sorted = hours.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out: Vec<TimeRange> = Vec::new();
    for t in sorted {
        match out.last_mut() {
            Some(w) if w.end + 1 == t => w.end = t,
            _ => out.push(TimeRange { start: t, end: t }),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Uniformity summary of a set of p-values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub n: usize,
    pub ks: f64,
    pub linear: Vec<HistogramBin>,
    /// Decades from 1e-`decades` to 1; the first bin also takes smaller values.
    pub log: Vec<HistogramBin>,
}

pub fn calibration(pvals: &[f64], linear_bins: usize, decades: usize) -> Calibration {
    let mut linear: Vec<HistogramBin> = (0..linear_bins)
        .map(|i| HistogramBin {
            lo: i as f64 / linear_bins as f64,
            hi: (i + 1) as f64 / linear_bins as f64,
            count: 0,
        })
        .collect();
    let mut log: Vec<HistogramBin> = (0..decades)
        .map(|i| HistogramBin {
            lo: 10f64.powi(i as i32 - decades as i32),
            hi: 10f64.powi(i as i32 + 1 - decades as i32),
            count: 0,
        })
        .collect();
    for &p in pvals {
        if linear_bins > 0 {
            let i = ((p * linear_bins as f64) as usize).min(linear_bins - 1);
            linear[i].count += 1;
        }
        if decades > 0 {
            let i = if p <= 0.0 {
                0
            } else {
                (p.log10().floor() as i64 + decades as i64).clamp(0, decades as i64 - 1) as usize
            };
            log[i].count += 1;
        }
    }
    if let Some(first) = log.first_mut() {
        first.lo = 0.0;
    }
    Calibration {
        n: pvals.len(),
        ks: ks_uniform(pvals),
        linear,
        log,
    }
}
