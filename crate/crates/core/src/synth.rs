//! Labeled synthetic station networks.
//!
//! Each station carries seasonal cycles with station-specific phases, a linear
//! trend, Gaussian noise, an optional confounder and additive anomalies, all in
//! log units. Every station also gets a domain-model series that shares the
//! signal (and the confounder when requested) but never the anomalies, with
//! its own independent noise.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_csv_file, SeriesFrame, StationPair, UNITS_LOG};
use crate::time::{EpochHour, TimeRange, HOURS_PER_YEAR};

/// 2018-01-01T00:00Z.
pub const SCENARIO_T0: EpochHour = 420_768;
pub const TRAIN_HOURS: usize = 2 * HOURS_PER_YEAR as usize;
pub const TEST_HOURS: usize = 4380;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonalComponent {
    pub period_hours: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confounder {
    pub amplitude: f64,
    pub window: TimeRange,
    pub shared_with_model: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    /// Indices into the station list.
    pub stations: Vec<usize>,
    pub window: TimeRange,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n_stations: usize,
    pub span: TimeRange,
    /// First hour of the evaluation interval; hours before it are for training.
    pub test_start: EpochHour,
    pub baseline: f64,
    pub seasonal: Vec<SeasonalComponent>,
    /// Total linear drift across the span.
    pub trend: f64,
    pub noise_sigma: f64,
    /// Probability that an hour is missing, drawn independently per series.
    #[serde(default)]
    pub missing_frac: f64,
    pub confounder: Option<Confounder>,
    pub anomalies: Vec<AnomalySpec>,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Anomaly-free network over the standard 2-year train, 6-month test layout.
    pub fn null_network(n_stations: usize, seed: u64) -> Self {
        Self {
            n_stations,
            span: TimeRange::with_len(SCENARIO_T0, TRAIN_HOURS + TEST_HOURS),
            test_start: SCENARIO_T0 + TRAIN_HOURS as i64,
            baseline: 3.0,
            seasonal: vec![
                SeasonalComponent {
                    period_hours: 24.0,
                    amplitude: 0.4,
                },
                SeasonalComponent {
                    period_hours: 168.0,
                    amplitude: 0.15,
                },
                SeasonalComponent {
                    period_hours: HOURS_PER_YEAR,
                    amplitude: 0.3,
                },
            ],
            trend: -0.1,
            noise_sigma: 0.25,
            missing_frac: 0.0,
            confounder: None,
            anomalies: Vec::new(),
            seed,
        }
    }

    pub fn train_range(&self) -> TimeRange {
        TimeRange {
            start: self.span.start,
            end: self.test_start - 1,
        }
    }

    pub fn test_range(&self) -> TimeRange {
        TimeRange {
            start: self.test_start,
            end: self.span.end,
        }
    }

    pub fn station_id(&self, i: usize) -> String {
        format!("S{i:02}")
    }

    pub fn station_ids(&self) -> Vec<String> {
        (0..self.n_stations).map(|i| self.station_id(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_stations == 0 {
            return bad("scenario has no stations".into());
        }
        if !self.span.contains(self.test_start) || self.test_start == self.span.start {
            return bad("test start must split the span".into());
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..1.0).contains(&self.missing_frac) {
            return bad("noise sigma and missing fraction must be valid".into());
        }
        if self.seasonal.iter().any(|c| !(c.period_hours > 0.0)) {
            return bad("seasonal periods must be positive".into());
        }
        let inside = |w: &TimeRange| w.start >= self.span.start && w.end <= self.span.end;
        if let Some(c) = &self.confounder {
            if !inside(&c.window) {
                return bad("confounder window outside span".into());
            }
        }
        for a in &self.anomalies {
            if !inside(&a.window) {
                return bad("anomaly window outside span".into());
            }
            if a.shift == 0.0 {
                return bad("anomaly shift must be non-zero".into());
            }
            if a.stations.is_empty() || a.stations.iter().any(|&s| s >= self.n_stations) {
                return bad("anomaly station index out of range".into());
            }
        }
        Ok(())
    }
}

/// Shared-confounder scenario in which the domain model explains the deviation.
pub fn type1_scenario(seed: u64) -> ScenarioSpec {
    let mut spec = ScenarioSpec::null_network(1, seed);
    spec.confounder = Some(Confounder {
        amplitude: 0.5,
        window: TimeRange::with_len(spec.test_start + 1000, 336),
        shared_with_model: true,
    });
    spec
}

/// Masking scenario: the confounder raises observation and model alike while
/// an anomaly of opposite sign cancels it in the observations only.
pub fn type2_scenario(seed: u64) -> ScenarioSpec {
    let mut spec = type1_scenario(seed);
    let c = spec.confounder.clone().expect("type1 has a confounder");
    spec.anomalies.push(AnomalySpec {
        stations: vec![0],
        window: c.window,
        shift: -c.amplitude,
    });
    spec
}

/// Every station shifted together by `shift_sigmas` noise standard deviations
/// for `hours` hours inside the test interval.
pub fn regional_shift_scenario(n_stations: usize, shift_sigmas: f64, hours: usize, seed: u64) -> ScenarioSpec {
    let mut spec = ScenarioSpec::null_network(n_stations, seed);
    spec.anomalies.push(AnomalySpec {
        stations: (0..n_stations).collect(),
        window: TimeRange::with_len(spec.test_start + 1500, hours),
        shift: shift_sigmas * spec.noise_sigma,
    });
    spec
}

/// Per-hour anomaly labels on the scenario span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub t0: EpochHour,
    pub labels: BTreeMap<String, Vec<bool>>,
}

impl Truth {
    pub fn is_anomalous(&self, station: &str, t: EpochHour) -> bool {
        let i = t - self.t0;
        i >= 0
            && self
                .labels
                .get(station)
                .and_then(|l| l.get(i as usize))
                .copied()
                .unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub spec: ScenarioSpec,
    pub pairs: Vec<StationPair>,
    pub truth: Truth,
}

impl LabeledDataset {
    /// Anomaly windows with station ids in place of indices.
    pub fn events(&self) -> Vec<(Vec<String>, TimeRange)> {
        self.spec
            .anomalies
            .iter()
            .map(|a| {
                (
                    a.stations.iter().map(|&i| self.spec.station_id(i)).collect(),
                    a.window,
                )
            })
            .collect()
    }
}

const PHASE_STREAM: u64 = 1 << 40;

fn station_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Noise-free baseline, seasonal and trend signal of station `s` over the span,
/// without confounder or anomalies.
pub fn station_signal(spec: &ScenarioSpec, s: usize) -> Vec<f64> {
    let mut phase_rng = station_rng(spec.seed, PHASE_STREAM + s as u64);
    let phases: Vec<f64> = spec
        .seasonal
        .iter()
        .map(|_| phase_rng.gen_range(0.0..TAU))
        .collect();
    let denom = (spec.span.end - spec.span.start) as f64;
    spec.span
        .hours()
        .map(|t| {
            let tau = (t - spec.span.start) as f64 / denom;
            let seasonal: f64 = spec
                .seasonal
                .iter()
                .zip(&phases)
                .map(|(c, ph)| c.amplitude * (TAU * t as f64 / c.period_hours + ph).sin())
                .sum();
            spec.baseline + seasonal + spec.trend * tau
        })
        .collect()
}

/// Deterministic in `spec.seed`; station `i` draws from its own RNG streams,
/// so adding stations leaves existing ones unchanged.
pub fn generate(spec: &ScenarioSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let n = spec.span.len();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;

    let mut pairs = Vec::with_capacity(spec.n_stations);
    let mut labels = BTreeMap::new();
    for s in 0..spec.n_stations {
        let id = spec.station_id(s);
        let signal = station_signal(spec, s);
        let mut truth = vec![false; n];
        let mut anomaly = vec![0.0; n];
        for (i, t) in spec.span.hours().enumerate() {
            for a in spec.anomalies.iter().filter(|a| a.stations.contains(&s)) {
                if a.window.contains(t) {
                    anomaly[i] += a.shift;
                    truth[i] = true;
                }
            }
        }
        let confounder = |t: EpochHour| {
            spec.confounder
                .as_ref()
                .filter(|c| c.window.contains(t))
                .map_or(0.0, |c| c.amplitude)
        };
        let shared = spec.confounder.as_ref().is_some_and(|c| c.shared_with_model);

        let mut obs_rng = station_rng(spec.seed, 2 * s as u64);
        let mut mod_rng = station_rng(spec.seed, 2 * s as u64 + 1);
        let mut obs = Vec::with_capacity(n);
        let mut model = Vec::with_capacity(n);
        for (i, t) in spec.span.hours().enumerate() {
            let c = confounder(t);
            let x = signal[i] + c + anomaly[i] + noise.sample(&mut obs_rng);
            let gap = spec.missing_frac > 0.0 && obs_rng.gen::<f64>() < spec.missing_frac;
            obs.push((!gap).then_some(x));
            let y = signal[i] + if shared { c } else { 0.0 } + noise.sample(&mut mod_rng);
            let gap = spec.missing_frac > 0.0 && mod_rng.gen::<f64>() < spec.missing_frac;
            model.push((!gap).then_some(y));
        }
        pairs.push(StationPair {
            obs: SeriesFrame::new(id.clone(), spec.span.start, obs, UNITS_LOG),
            model: Some(SeriesFrame::new(id.clone(), spec.span.start, model, UNITS_LOG)),
        });
        labels.insert(id, truth);
    }
    Ok(LabeledDataset {
        spec: spec.clone(),
        pairs,
        truth: Truth {
            t0: spec.span.start,
            labels,
        },
    })
}

/// Writes `station_id,t,is_anomalous` for every station-hour.
pub fn write_labels_csv<W: Write>(truth: &Truth, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["station_id", "t", "is_anomalous"])?;
    for (station, labels) in &truth.labels {
        for (i, l) in labels.iter().enumerate() {
            wtr.write_record([
                station.clone(),
                (truth.t0 + i as i64).to_string(),
                u8::from(*l).to_string(),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<labels csv>", e))?;
    Ok(())
}

/// Reads a labels table; hours absent from the file are treated as normal.
pub fn read_labels_csv<R: Read>(reader: R) -> Result<Truth> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows: Vec<(String, EpochHour, bool)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let t: EpochHour = field(1)
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad label hour `{}`", field(1))))?;
        let flag = match field(2) {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(Error::InvalidParameter(format!("bad label `{other}`"))),
        };
        rows.push((field(0).to_string(), t, flag));
    }
    let t0 = rows.iter().map(|r| r.1).min().ok_or_else(|| Error::NoRows("labels".into()))?;
    let t1 = rows.iter().map(|r| r.1).max().unwrap_or(t0);
    let len = (t1 - t0 + 1) as usize;
    let mut labels: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for (s, t, l) in rows {
        labels.entry(s).or_insert_with(|| vec![false; len])[(t - t0) as usize] = l;
    }
    Ok(Truth { t0, labels })
}

/// Lays out `obs/<id>.csv`, `model/<id>.csv`, `labels.csv` and `scenario.json` under `dir`.
pub fn write_dataset(data: &LabeledDataset, dir: &Path) -> Result<()> {
    for sub in ["obs", "model"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for p in &data.pairs {
        write_csv_file(&p.obs, &dir.join("obs").join(format!("{}.csv", p.station_id())))?;
        if let Some(m) = &p.model {
            write_csv_file(m, &dir.join("model").join(format!("{}.csv", p.station_id())))?;
        }
    }
    let labels = dir.join("labels.csv");
    let f = std::fs::File::create(&labels).map_err(|e| Error::io(&labels, e))?;
    write_labels_csv(&data.truth, std::io::BufWriter::new(f))?;
    let spec_path = dir.join("scenario.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&data.spec)? + "\n")
        .map_err(|e| Error::io(&spec_path, e))?;
    Ok(())
}
