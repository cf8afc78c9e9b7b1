mod commands;
mod layout;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dpk_anomaly::pipeline::PipelineConfig;
use dpk_anomaly::time::parse_hour;

#[derive(Parser, Debug)]
#[command(name = "dpk-anomaly", version, about = "Calibrated anomaly detection for sensor networks")]
struct Cli {
    /// JSON pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run name; artifacts go to `<runs-dir>/<run>/`.
    #[arg(long, global = true, default_value = "default")]
    run: String,
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Command-line overrides of [`PipelineConfig`] fields.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    evr: Option<f64>,
    #[arg(long, global = true)]
    min_valid_frac: Option<f64>,
    #[arg(long, global = true)]
    regions: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    use_domain_model: Option<bool>,
    /// Epoch hour or RFC 3339 timestamp.
    #[arg(long, global = true, value_parser = hour_arg)]
    train_start: Option<i64>,
    #[arg(long, global = true, value_parser = hour_arg)]
    train_end: Option<i64>,
    /// Comma-separated periods in hours.
    #[arg(long, global = true, value_delimiter = ',')]
    periods: Option<Vec<f64>>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    weight_decay: Option<f64>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    /// Comma-separated hidden layer widths.
    #[arg(long, global = true, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, global = true)]
    warm_start: Option<bool>,
    #[arg(long, global = true)]
    warm_epochs: Option<usize>,
}

fn hour_arg(s: &str) -> std::result::Result<i64, String> {
    parse_hour(s).map_err(|e| e.to_string())
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) {
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = &self.$field { $target = v.clone(); })*
            };
        }
        set! {
            data_dir => cfg.data_dir,
            k => cfg.k,
            alpha => cfg.alpha,
            lambda => cfg.lambda,
            evr => cfg.evr_threshold,
            min_valid_frac => cfg.min_valid_frac,
            seed => cfg.seed,
            use_domain_model => cfg.use_domain_model,
            periods => cfg.periods_hours,
            epochs => cfg.train.epochs,
            lr => cfg.train.lr,
            weight_decay => cfg.train.weight_decay,
            batch => cfg.train.batch,
            layers => cfg.train.layers,
            warm_start => cfg.warm_start,
        }
        if let Some(r) = &self.regions {
            cfg.regions_file = Some(r.clone());
        }
        if let Some(t) = self.train_start {
            cfg.train_start = Some(t);
        }
        if let Some(t) = self.train_end {
            cfg.train_end = Some(t);
        }
        if let Some(w) = self.warm_epochs {
            cfg.warm_epochs = Some(w);
        }
    }
}

/// Optional evaluation window.
#[derive(Args, Debug, Clone, Default)]
struct Window {
    /// First hour (epoch hour or RFC 3339); defaults to the hour after training ends.
    #[arg(long, value_parser = hour_arg)]
    from: Option<i64>,
    /// Last hour; defaults to the end of the data.
    #[arg(long, value_parser = hour_arg)]
    to: Option<i64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize raw CSV files into `<data-dir>/<kind>/<station>.csv`.
    Ingest {
        #[arg(long, value_enum, default_value_t = Kind::Obs)]
        kind: Kind,
        /// Take natural logs of the values (non-positive values are dropped).
        #[arg(long)]
        log: bool,
        #[arg(long, default_value = "station_id")]
        station_col: String,
        #[arg(long, default_value = "timestamp")]
        time_col: String,
        #[arg(long, default_value = "value")]
        value_col: String,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Train one model per station and series kind.
    Train,
    /// Write per-station z (or ζ) scores, rolling means and flags.
    Score,
    /// Station and region verdicts over a window, with a summary of flagged windows.
    Detect {
        #[command(flatten)]
        window: Window,
    },
    /// p-value uniformity check over a window.
    Calibrate {
        #[command(flatten)]
        window: Window,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value_t = 6)]
        decades: usize,
    },
    /// Grid sweep over α, k and EVR threshold against labeled anomalies.
    Sweep {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1e-2, 1e-3, 1e-4])]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [24, 168, 336])]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.9, 0.99])]
        evrs: Vec<f64>,
        #[command(flatten)]
        window: Window,
    },
    /// Generate a labeled synthetic dataset.
    Synth {
        #[arg(long, value_enum, default_value_t = Scenario::Null)]
        scenario: Scenario,
        /// Scenario JSON file; takes precedence over `--scenario`.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        stations: usize,
        #[arg(long = "scenario-seed", default_value_t = 0)]
        scenario_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot-ready per-station tables (and optional SVG charts).
    Report {
        #[command(flatten)]
        window: Window,
        #[arg(long)]
        svg: bool,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Obs,
    Model,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Scenario {
    Null,
    Type1,
    Type2,
    Regional,
}

/// How a command finished when it did not fail outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Complete,
    Partial,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = load_config(cli)?;
    let run_dir = layout::RunDir::new(cli.runs_dir.join(&cli.run));
    match &cli.command {
        Command::Ingest {
            kind,
            log,
            station_col,
            time_col,
            value_col,
            files,
        } => commands::ingest(&cfg, *kind, *log, [station_col, time_col, value_col], files),
        Command::Train => commands::train(&cfg, &run_dir),
        Command::Score => commands::score(&cfg, &run_dir),
        Command::Detect { window } => commands::detect(&cfg, &run_dir, window),
        Command::Calibrate { window, bins, decades } => commands::calibrate(&cfg, &run_dir, window, *bins, *decades),
        Command::Sweep {
            labels,
            alphas,
            ks,
            evrs,
            window,
        } => commands::sweep(&cfg, &run_dir, labels, alphas, ks, evrs, window),
        Command::Synth {
            scenario,
            spec,
            stations,
            scenario_seed,
            out,
        } => commands::synth(*scenario, spec.as_deref(), *stations, *scenario_seed, out),
        Command::Report { window, svg } => commands::report(&cfg, &run_dir, window, *svg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(Outcome::Complete) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
