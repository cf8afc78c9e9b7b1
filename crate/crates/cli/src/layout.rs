//! On-disk layout of input data and run artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dpk_anomaly::ingest::{align_pair, parse_csv, ColumnMap, StationPair};
use dpk_anomaly::pipeline::{PipelineConfig, SeriesKind};
use dpk_anomaly::time::TimeRange;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// `runs/<name>/` with `models/`, `scores/` and `verdicts/` beneath it.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores")
    }

    pub fn verdicts(&self) -> PathBuf {
        self.root.join("verdicts")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn model_file(&self, station: &str, kind: SeriesKind) -> PathBuf {
        self.models().join(format!("{station}.{}.json", kind.tag()))
    }
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn create_file(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(std::io::BufWriter::new(f))
}

/// SHA-256 of the compact JSON form of the configuration.
pub fn config_hash(cfg: &PipelineConfig) -> Result<String> {
    let text = serde_json::to_string(cfg)?;
    Ok(Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub file: String,
    pub seed: u64,
    pub epochs: usize,
    pub warm_started: bool,
    pub final_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StationEntry {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub obs: Option<ModelEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: PipelineConfig,
    pub train: TimeRange,
    pub data: TimeRange,
    pub stations: BTreeMap<String, StationEntry>,
}

impl Manifest {
    pub fn load(run: &RunDir) -> Result<Self> {
        let path = run.manifest();
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading {} (run `train` first)", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Station ids with an observation file, sorted.
pub fn station_ids(data_dir: &Path) -> Result<Vec<String>> {
    let dir = data_dir.join("obs");
    let entries = fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))?;
    let mut ids = Vec::new();
    for e in entries {
        let path = e?.path();
        if path.extension().is_some_and(|x| x == "csv") {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        bail!("no station files in {}", dir.display());
    }
    Ok(ids)
}

/// Reads `obs/<id>.csv` and, when `with_model`, `model/<id>.csv`, aligned on one grid.
/// A missing model file leaves `model` empty so training can report it per station.
pub fn load_pair(data_dir: &Path, id: &str, with_model: bool) -> Result<StationPair> {
    let cols = ColumnMap::default();
    let (obs, _) = parse_csv(&data_dir.join("obs").join(format!("{id}.csv")), &cols)?;
    if !with_model {
        return Ok(StationPair::obs_only(obs));
    }
    let path = data_dir.join("model").join(format!("{id}.csv"));
    if !path.exists() {
        return Ok(StationPair::obs_only(obs));
    }
    let (model, _) = parse_csv(&path, &cols)?;
    Ok(align_pair(&obs, &model)?)
}

pub type Loaded = (Vec<StationPair>, BTreeMap<String, String>);

/// Every station's data; stations that fail to load are returned as errors by id.
pub fn load_pairs(cfg: &PipelineConfig) -> Result<Loaded> {
    let mut pairs = Vec::new();
    let mut failures = BTreeMap::new();
    for id in station_ids(&cfg.data_dir)? {
        match load_pair(&cfg.data_dir, &id, cfg.use_domain_model) {
            Ok(p) => pairs.push(p),
            Err(e) => {
                log::error!("{id}: {e:#}");
                failures.insert(id, format!("{e:#}"));
            }
        }
    }
    Ok((pairs, failures))
}

/// Hull of the observation ranges.
pub fn data_range(pairs: &[StationPair]) -> Option<TimeRange> {
    pairs
        .iter()
        .filter_map(|p| p.obs.range())
        .reduce(|a, b| a.union_hull(&b))
}
