use std::fs;
use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{gaussian_head_loss, Activation, Network, Workspace};
use super::optim::AdamW;
use super::{ForecastPoint, FrequencySet};
use crate::error::{Error, Result};
use crate::ingest::SeriesFrame;
use crate::time::{EpochHour, TimeRange};

pub const MODEL_FORMAT_VERSION: &str = "1";
const DISTRIBUTION_GAUSSIAN: &str = "gaussian";
const PREDICT_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Hidden layer widths.
    pub layers: Vec<usize>,
    pub activation: Activation,
    /// Hold σ̂ at this value instead of learning it.
    pub fixed_sigma: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-3,
            epochs: 400,
            batch: 256,
            seed: 0,
            layers: vec![64, 64],
            activation: Activation::Tanh,
            fixed_sigma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
    pub n_train: usize,
    pub warm_started: bool,
    /// Mean NLL over all training slots after the last epoch.
    pub final_nll: f64,
    /// Mean minibatch NLL of each epoch, as seen during the epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trained forecaster mapping hours to Gaussian parameters.
///
/// The network works on standardized targets; `target_center` and
/// `target_scale` map its outputs back to series units.
#[derive(Debug, Clone, PartialEq)]
pub struct DpkModel {
    freqs: FrequencySet,
    network: Network,
    target_center: f64,
    target_scale: f64,
    fixed_sigma: Option<f64>,
    train_meta: TrainMeta,
}

impl DpkModel {
    pub fn freqs(&self) -> &FrequencySet {
        &self.freqs
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn layer_sizes(&self) -> &[usize] {
        self.network.sizes()
    }

    pub fn activation_tag(&self) -> &'static str {
        self.network.activation().tag()
    }

    pub fn distribution_tag(&self) -> &'static str {
        DISTRIBUTION_GAUSSIAN
    }

    pub fn train_meta(&self) -> &TrainMeta {
        &self.train_meta
    }

    pub fn predict(&self, range: TimeRange) -> Vec<ForecastPoint> {
        let ts: Vec<EpochHour> = range.hours().collect();
        self.predict_at(&ts)
    }

    pub fn predict_at(&self, ts: &[EpochHour]) -> Vec<ForecastPoint> {
        let width = self.freqs.width();
        let mut ws = Workspace::default();
        let mut out = Vec::with_capacity(ts.len());
        let mut feats = vec![0.0; PREDICT_CHUNK * width];
        for chunk in ts.chunks(PREDICT_CHUNK) {
            let buf = &mut feats[..chunk.len() * width];
            for (row, &t) in buf.chunks_exact_mut(width).zip(chunk) {
                self.freqs.write_features(t, row);
            }
            let raw = self.network.forward(buf, chunk.len(), &mut ws);
            for (o, &t) in raw.chunks_exact(2).zip(chunk) {
                out.push(self.to_point(t, o[0], o[1]));
            }
        }
        out
    }

    fn to_point(&self, t: EpochHour, mu_std: f64, log_sigma_std: f64) -> ForecastPoint {
        let sigma = match self.fixed_sigma {
            Some(s) => s,
            None => self.target_scale * log_sigma_std.exp(),
        };
        ForecastPoint {
            t,
            mu: self.target_center + self.target_scale * mu_std,
            sigma,
        }
    }

    fn fixed_log_sigma_std(&self) -> Option<f64> {
        self.fixed_sigma.map(|s| (s / self.target_scale).ln())
    }

    /// Mean NLL (series units) over the present slots of `series`.
    pub fn mean_nll(&self, series: &SeriesFrame) -> Option<f64> {
        let (ts, xs): (Vec<_>, Vec<_>) = series.present().unzip();
        if ts.is_empty() {
            return None;
        }
        let total: f64 = self
            .predict_at(&ts)
            .iter()
            .zip(&xs)
            .map(|(p, &x)| super::nll(x, p.mu, p.sigma))
            .sum();
        Some(total / ts.len() as f64)
    }

    /// Fits a model to the present slots of `series` by minibatch maximum likelihood.
    ///
    /// With `warm_start` the network starts from that model's parameters
    /// (the architecture must match); target standardization is always
    /// recomputed from `series`.
    pub fn train(
        series: &SeriesFrame,
        freqs: &FrequencySet,
        cfg: &TrainConfig,
        warm_start: Option<&DpkModel>,
    ) -> Result<DpkModel> {
        freqs.validate()?;
        validate_config(cfg)?;
        let (ts, xs): (Vec<EpochHour>, Vec<f64>) = series.present().unzip();
        if ts.is_empty() {
            return Err(Error::EmptySeries);
        }
        check_coverage(series, &ts, freqs);

        let n = ts.len();
        let center = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - center).powi(2)).sum::<f64>() / n as f64;
        let scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        let targets: Vec<f64> = xs.iter().map(|x| (x - center) / scale).collect();

        let width = freqs.width();
        let mut feats = vec![0.0; n * width];
        for (row, &t) in feats.chunks_exact_mut(width).zip(&ts) {
            freqs.write_features(t, row);
        }

        let mut sizes = vec![width];
        sizes.extend(&cfg.layers);
        sizes.push(2);

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut network = match warm_start {
            Some(m) => {
                if m.layer_sizes() != sizes.as_slice() || m.network.activation() != cfg.activation {
                    return Err(Error::Shape(format!(
                        "warm start has layers {:?} ({}), training wants {:?} ({})",
                        m.layer_sizes(),
                        m.activation_tag(),
                        sizes,
                        cfg.activation.tag()
                    )));
                }
                m.network.clone()
            }
            None => Network::init_uniform(&sizes, cfg.activation, &mut rng)?,
        };

        let fixed_log_sigma = cfg.fixed_sigma.map(|s| (s / scale).ln());
        let batch = cfg.batch.min(n);
        let mut opt = AdamW::new(network.params().len(), cfg.lr, cfg.weight_decay);
        let mut ws = Workspace::default();
        let mut grad = vec![0.0; network.params().len()];
        let mut batch_feats = vec![0.0; batch * width];
        let mut batch_targets = vec![0.0; batch];
        let mut grad_out = vec![0.0; batch * 2];
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let ln_scale = scale.ln();

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_total = 0.0;
            for idx in order.chunks(batch) {
                let bs = idx.len();
                for (j, &i) in idx.iter().enumerate() {
                    batch_feats[j * width..(j + 1) * width]
                        .copy_from_slice(&feats[i * width..(i + 1) * width]);
                    batch_targets[j] = targets[i];
                }
                let out = network.forward(&batch_feats[..bs * width], bs, &mut ws);
                let loss = gaussian_head_loss(
                    out,
                    &batch_targets[..bs],
                    fixed_log_sigma,
                    &mut grad_out[..bs * 2],
                );
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch });
                }
                epoch_total += loss * bs as f64;
                grad.iter_mut().for_each(|g| *g = 0.0);
                network.backward(&mut ws, &grad_out[..bs * 2], &mut grad);
                opt.step(network.params_mut(), &grad);
            }
            let epoch_loss = epoch_total / n as f64 + ln_scale;
            debug!("{} epoch {epoch}: nll {epoch_loss:.6}", series.station_id);
            epoch_losses.push(epoch_loss);
        }

        let mut model = DpkModel {
            freqs: freqs.clone(),
            network,
            target_center: center,
            target_scale: scale,
            fixed_sigma: cfg.fixed_sigma,
            train_meta: TrainMeta {
                epochs: cfg.epochs,
                learning_rate: cfg.lr,
                weight_decay: cfg.weight_decay,
                batch: cfg.batch,
                seed: cfg.seed,
                n_train: n,
                warm_started: warm_start.is_some(),
                final_nll: f64::NAN,
                epoch_losses,
            },
        };
        debug_assert_eq!(model.fixed_log_sigma_std(), fixed_log_sigma);
        let final_nll = model.mean_nll(series).unwrap_or(f64::NAN);
        if !final_nll.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: cfg.epochs });
        }
        model.train_meta.final_nll = final_nll;
        Ok(model)
    }
}

fn validate_config(cfg: &TrainConfig) -> Result<()> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidParameter(format!("lr {}", cfg.lr)));
    }
    if !(cfg.weight_decay >= 0.0 && cfg.weight_decay.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "weight_decay {}",
            cfg.weight_decay
        )));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidParameter("batch must be positive".into()));
    }
    if let Some(s) = cfg.fixed_sigma {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidParameter(format!("fixed_sigma {s}")));
        }
    }
    Ok(())
}

fn check_coverage(series: &SeriesFrame, ts: &[EpochHour], freqs: &FrequencySet) {
    if ts.len() < 1000 {
        warn!(
            "{}: only {} present values; forecasts may be unreliable",
            series.station_id,
            ts.len()
        );
    }
    if let Some(period) = freqs.slowest_period() {
        let span = (ts[ts.len() - 1] - ts[0]) as f64;
        if span < 2.0 * period {
            warn!(
                "{}: data spans {span} h, less than two slowest periods ({period:.0} h)",
                series.station_id
            );
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: String,
    distribution: String,
    activation: Activation,
    freqs: FrequencySet,
    layer_sizes: Vec<usize>,
    layers: Vec<LayerFile>,
    target_center: f64,
    target_scale: f64,
    fixed_sigma: Option<f64>,
    train_meta: TrainMeta,
}

impl DpkModel {
    pub fn to_json(&self) -> Result<String> {
        let net = &self.network;
        let layers = (0..net.n_layers())
            .map(|l| {
                let (w, b) = net.layer_range(l);
                let n_in = net.sizes()[l];
                LayerFile {
                    weights: net.params()[w].chunks(n_in).map(<[f64]>::to_vec).collect(),
                    bias: net.params()[b].to_vec(),
                }
            })
            .collect();
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION.into(),
            distribution: DISTRIBUTION_GAUSSIAN.into(),
            activation: net.activation(),
            freqs: self.freqs.clone(),
            layer_sizes: net.sizes().to_vec(),
            layers,
            target_center: self.target_center,
            target_scale: self.target_scale,
            fixed_sigma: self.fixed_sigma,
            train_meta: self.train_meta.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = match value.get("format_version") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(other) => other.to_string(),
            None => "none".into(),
        };
        if found != MODEL_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found,
                expected: MODEL_FORMAT_VERSION.into(),
            });
        }
        let file: ModelFile = serde_json::from_value(value)?;
        if file.distribution != DISTRIBUTION_GAUSSIAN {
            return Err(Error::Shape(format!(
                "unsupported distribution `{}`",
                file.distribution
            )));
        }
        file.freqs.validate()?;
        let sizes = &file.layer_sizes;
        if sizes.first() != Some(&file.freqs.width()) || sizes.last() != Some(&2) {
            return Err(Error::Shape(format!(
                "layer sizes {sizes:?} do not match {} features and 2 outputs",
                file.freqs.width()
            )));
        }
        if file.layers.len() + 1 != sizes.len() {
            return Err(Error::Shape(format!(
                "{} layers for sizes {sizes:?}",
                file.layers.len()
            )));
        }
        let mut params: Vec<f64> = Vec::new();
        for (l, layer) in file.layers.iter().enumerate() {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            if layer.weights.len() != n_out
                || layer.weights.iter().any(|r| r.len() != n_in)
                || layer.bias.len() != n_out
            {
                return Err(Error::Shape(format!(
                    "layer {l} is not {n_out}x{n_in} with {n_out} biases"
                )));
            }
            layer.weights.iter().for_each(|r| params.extend(r));
            params.extend(&layer.bias);
        }
        if params.iter().any(|p| !p.is_finite())
            || !(file.target_scale > 0.0 && file.target_center.is_finite())
        {
            return Err(Error::Shape("non-finite parameters".into()));
        }
        Ok(DpkModel {
            freqs: file.freqs,
            network: Network::from_params(sizes, file.activation, params)?,
            target_center: file.target_center,
            target_scale: file.target_scale,
            fixed_sigma: file.fixed_sigma,
            train_meta: file.train_meta,
        })
    }
}

pub fn save_model(model: &DpkModel, path: &Path) -> Result<()> {
    let text = model.to_json()?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<DpkModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DpkModel::from_json(&text)
}
