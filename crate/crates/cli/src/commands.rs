use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dpk_anomaly::dpk::{load_model, save_model};
use dpk_anomaly::fmt::format_sig;
use dpk_anomaly::ingest::{log_transform, parse_csv, write_csv_file, ColumnMap, SeriesFrame, StationPair, UNITS_LOG, UNITS_RAW};
use dpk_anomaly::pipeline::{
    calibration, evaluate_regions, fit_regions, fit_station_dist, flag_windows, raw_scores, score_station,
    station_verdicts, train_network, whole_network_region, PipelineConfig, SeriesKind, StationModels, Templates,
};
use dpk_anomaly::region::{parse_region_config, write_region_verdicts_csv, RegionResult, RegionSpec};
use dpk_anomaly::report::{render_svg, report_rows, write_report_csv};
use dpk_anomaly::scoring::{write_scores_csv, SamplingDist, ScoreSeries, StationVerdict};
use dpk_anomaly::sweep::{run_sweep, write_sweep_csv, SweepGrid, SweepInput, DEFAULT_BETA};
use dpk_anomaly::synth::{
    generate, read_labels_csv, regional_shift_scenario, type1_scenario, type2_scenario, write_dataset, ScenarioSpec,
};
use dpk_anomaly::time::{format_hour, TimeRange};
use log::{info, warn};
use serde::Serialize;

use crate::layout::{
    config_hash, create_file, data_range, ensure_dir, load_pairs, write_text, Manifest, ModelEntry, RunDir,
    StationEntry,
};
use crate::{Kind, Outcome, Scenario, Window};

fn outcome(failed: bool) -> Outcome {
    if failed {
        Outcome::Partial
    } else {
        Outcome::Complete
    }
}

pub fn ingest(cfg: &PipelineConfig, kind: Kind, log: bool, cols: [&String; 3], files: &[PathBuf]) -> Result<Outcome> {
    let columns = ColumnMap {
        station_id: cols[0].clone(),
        timestamp: cols[1].clone(),
        value: cols[2].clone(),
    };
    let mut merged: BTreeMap<String, BTreeMap<i64, f64>> = BTreeMap::new();
    let mut failed = false;
    for path in files {
        match parse_csv(path, &columns) {
            Ok((frame, report)) => {
                let frame = if log {
                    let (f, dropped) = log_transform(&frame);
                    if dropped > 0 {
                        warn!("{}: dropped {dropped} non-positive values", path.display());
                    }
                    f
                } else {
                    frame
                };
                info!(
                    "{}: {} rows, {} duplicates, {} invalid values",
                    path.display(),
                    report.rows,
                    report.duplicates,
                    report.invalid_values
                );
                merged.entry(frame.station_id.clone()).or_default().extend(frame.present());
            }
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                failed = true;
            }
        }
    }
    let dir = cfg.data_dir.join(match kind {
        Kind::Obs => "obs",
        Kind::Model => "model",
    });
    ensure_dir(&dir)?;
    let units = if log { UNITS_LOG } else { UNITS_RAW };
    for (station, points) in &merged {
        let (Some((&t0, _)), Some((&t1, _))) = (points.first_key_value(), points.last_key_value()) else {
            continue;
        };
        let mut values = vec![None; (t1 - t0 + 1) as usize];
        for (&t, &v) in points {
            values[(t - t0) as usize] = Some(v);
        }
        let frame = SeriesFrame::new(station.clone(), t0, values, units);
        let path = dir.join(format!("{station}.csv"));
        write_csv_file(&frame, &path)?;
        println!("{station}: {} hours -> {}", points.len(), path.display());
    }
    if merged.is_empty() {
        bail!("no input file could be read");
    }
    Ok(outcome(failed))
}

/// Hash of the fields that determine the trained models.
fn training_hash(cfg: &PipelineConfig) -> Result<String> {
    let d = PipelineConfig::default();
    let view = PipelineConfig {
        k: d.k,
        alpha: d.alpha,
        lambda: d.lambda,
        evr_threshold: d.evr_threshold,
        min_valid_frac: d.min_valid_frac,
        regions_file: None,
        ..cfg.clone()
    };
    config_hash(&view)
}

fn model_entry(run: &RunDir, station: &str, kind: SeriesKind, m: &dpk_anomaly::dpk::DpkModel) -> ModelEntry {
    let meta = m.train_meta();
    let path = run.model_file(station, kind);
    ModelEntry {
        file: path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        seed: meta.seed,
        epochs: meta.epochs,
        warm_started: meta.warm_started,
        final_nll: meta.final_nll,
    }
}

pub fn train(cfg: &PipelineConfig, run: &RunDir) -> Result<Outcome> {
    let (pairs, load_failures) = load_pairs(cfg)?;
    let Some(data) = data_range(&pairs) else {
        bail!("no station has any observations");
    };
    let train = cfg.train_range(data)?;
    info!("training {} stations on {} .. {}", pairs.len(), format_hour(train.start), format_hour(train.end));
    ensure_dir(&run.models())?;
    let trained = train_network(&pairs, cfg, train, Templates::default());

    let mut stations: BTreeMap<String, StationEntry> = load_failures
        .into_iter()
        .map(|(s, e)| (s, StationEntry { error: Some(e), ..Default::default() }))
        .collect();
    for (station, result) in trained {
        let entry = match result {
            Ok(m) => {
                save_model(&m.obs, &run.model_file(&station, SeriesKind::Obs))?;
                let mut e = StationEntry {
                    obs: Some(model_entry(run, &station, SeriesKind::Obs, &m.obs)),
                    ..Default::default()
                };
                if let Some(dm) = &m.model {
                    save_model(dm, &run.model_file(&station, SeriesKind::Model))?;
                    e.model = Some(model_entry(run, &station, SeriesKind::Model, dm));
                }
                println!("{station}: trained (nll {})", format_sig(m.obs.train_meta().final_nll, 6));
                e
            }
            Err(e) => {
                eprintln!("{station}: {e}");
                StationEntry {
                    error: Some(e.to_string()),
                    ..Default::default()
                }
            }
        };
        stations.insert(station, entry);
    }
    let failed = stations.values().any(|e| e.error.is_some());
    if stations.values().all(|e| e.error.is_some()) {
        bail!("every station failed to train");
    }
    let manifest = Manifest {
        config_hash: training_hash(cfg)?,
        config: cfg.clone(),
        train,
        data,
        stations,
    };
    write_text(&run.manifest(), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    Ok(outcome(failed))
}

/// Scores of every station that has a trained model.
struct Scored {
    manifest: Manifest,
    pairs: BTreeMap<String, StationPair>,
    models: BTreeMap<String, StationModels>,
    zbars: BTreeMap<String, ScoreSeries>,
    dists: BTreeMap<String, SamplingDist>,
    failed: bool,
}

fn load_models(run: &RunDir, station: &str, entry: &StationEntry) -> Result<Option<StationModels>> {
    if entry.obs.is_none() {
        return Ok(None);
    }
    let obs = load_model(&run.model_file(station, SeriesKind::Obs))?;
    let model = match &entry.model {
        Some(_) => Some(load_model(&run.model_file(station, SeriesKind::Model))?),
        None => None,
    };
    Ok(Some(StationModels { obs, model }))
}

fn score_run(cfg: &PipelineConfig, run: &RunDir) -> Result<Scored> {
    let manifest = Manifest::load(run)?;
    if manifest.config_hash != training_hash(cfg)? {
        warn!("training settings differ from those the models were trained with; scoring with the stored models");
    }
    let (pairs, load_failures) = load_pairs(cfg)?;
    let mut failed = !load_failures.is_empty();
    let pairs: BTreeMap<String, StationPair> = pairs.into_iter().map(|p| (p.station_id().to_string(), p)).collect();
    let mut models = BTreeMap::new();
    let mut zbars = BTreeMap::new();
    let mut dists = BTreeMap::new();
    for (station, entry) in &manifest.stations {
        let step = || -> Result<Option<(StationModels, ScoreSeries, SamplingDist)>> {
            let Some(m) = load_models(run, station, entry)? else {
                return Ok(None);
            };
            let pair = pairs.get(station).with_context(|| format!("no data for station {station}"))?;
            let s = score_station(pair, &m, cfg)?;
            let dist = fit_station_dist(&s, manifest.train, cfg.lambda)?;
            Ok(Some((m, s, dist)))
        };
        match step() {
            Ok(Some((m, s, d))) => {
                models.insert(station.clone(), m);
                zbars.insert(station.clone(), s);
                dists.insert(station.clone(), d);
            }
            Ok(None) => failed = true,
            Err(e) => {
                eprintln!("{station}: {e:#}");
                failed = true;
            }
        }
    }
    if zbars.is_empty() {
        bail!("no station could be scored");
    }
    Ok(Scored {
        manifest,
        pairs,
        models,
        zbars,
        dists,
        failed,
    })
}

pub fn score(cfg: &PipelineConfig, run: &RunDir) -> Result<Outcome> {
    let sc = score_run(cfg, run)?;
    let dir = run.scores();
    ensure_dir(&dir)?;
    for (station, s) in &sc.zbars {
        let verdicts = dpk_anomaly::scoring::classify(s, &sc.dists[station], cfg.alpha)?;
        let w = create_file(&dir.join(format!("{station}.csv")))?;
        write_scores_csv(s, &verdicts, w)?;
    }
    write_text(
        &dir.join("sampling.json"),
        &(serde_json::to_string_pretty(&sc.dists)? + "\n"),
    )?;
    println!("scored {} stations -> {}", sc.zbars.len(), dir.display());
    Ok(outcome(sc.failed))
}

/// The requested window, defaulting to the hours after training; `None` when empty.
fn resolve_window(window: &Window, m: &Manifest) -> Option<TimeRange> {
    let from = window.from.unwrap_or(m.train.end + 1);
    let to = window.to.unwrap_or(m.data.end);
    TimeRange::new(from, to).ok()
}

fn empty_window_notice(window: &Window, m: &Manifest) {
    let from = window.from.unwrap_or(m.train.end + 1);
    let to = window.to.unwrap_or(m.data.end);
    println!(
        "notice: window {} .. {} is empty or outside the data ({} .. {}); no verdicts produced",
        format_hour(from),
        format_hour(to),
        format_hour(m.data.start),
        format_hour(m.data.end)
    );
}

fn regions_for(cfg: &PipelineConfig, stations: &[String]) -> Result<Vec<RegionSpec>> {
    match &cfg.regions_file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(parse_region_config(&text)?)
        }
        None => Ok(vec![whole_network_region(stations.iter().cloned())]),
    }
}

/// Fits and evaluates each region on its own so one bad region does not sink the rest.
fn region_results(cfg: &PipelineConfig, sc: &Scored, range: TimeRange) -> Result<(Vec<RegionResult>, bool)> {
    let stations: Vec<String> = sc.zbars.keys().cloned().collect();
    let mut out = Vec::new();
    let mut failed = false;
    for region in regions_for(cfg, &stations)? {
        let r = fit_regions(std::slice::from_ref(&region), &sc.zbars, sc.manifest.train, cfg)
            .and_then(|fitted| evaluate_regions(&fitted, &sc.zbars, range));
        match r {
            Ok(mut res) => out.append(&mut res),
            Err(e) => {
                eprintln!("region {}: {e}", region.name);
                failed = true;
            }
        }
    }
    Ok((out, failed))
}

fn station_verdict_map(
    cfg: &PipelineConfig,
    sc: &Scored,
    range: Option<TimeRange>,
) -> Result<BTreeMap<String, Vec<StationVerdict>>> {
    sc.zbars
        .iter()
        .map(|(s, z)| {
            let v = match range {
                Some(r) => station_verdicts(z, &sc.dists[s], r, cfg.alpha)?,
                None => Vec::new(),
            };
            Ok((s.clone(), v))
        })
        .collect()
}

fn write_station_verdicts(path: &Path, verdicts: &BTreeMap<String, Vec<StationVerdict>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    w.write_record(["station_id", "t", "stat", "critical", "flag", "p"])?;
    for (s, vs) in verdicts {
        for v in vs {
            w.write_record([
                s.clone(),
                v.t.to_string(),
                format_sig(v.stat, 9),
                format_sig(v.critical, 9),
                u8::from(v.is_anomalous).to_string(),
                format_sig(v.p_value, 9),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn describe_windows(out: &mut String, label: &str, hours: &[i64]) {
    let windows = flag_windows(hours);
    if windows.is_empty() {
        let _ = writeln!(out, "{label}: no flags");
        return;
    }
    let _ = writeln!(out, "{label}: {} flagged windows", windows.len());
    for w in windows {
        let _ = writeln!(out, "  {} .. {} ({} h)", format_hour(w.start), format_hour(w.end), w.len());
    }
}

pub fn detect(cfg: &PipelineConfig, run: &RunDir, window: &Window) -> Result<Outcome> {
    let sc = score_run(cfg, run)?;
    let range = resolve_window(window, &sc.manifest);
    let dir = run.verdicts();
    ensure_dir(&dir)?;
    let stations = station_verdict_map(cfg, &sc, range)?;
    write_station_verdicts(&dir.join("stations.csv"), &stations)?;
    let (regions, region_failed) = match range {
        Some(r) => region_results(cfg, &sc, r)?,
        None => (Vec::new(), false),
    };
    write_region_verdicts_csv(&regions, cfg.alpha, create_file(&dir.join("regions.csv"))?)?;

    let mut summary = String::new();
    let n_verdicts: usize = stations.values().map(Vec::len).sum::<usize>() + regions.iter().map(|r| r.verdicts.len()).sum::<usize>();
    if n_verdicts == 0 {
        empty_window_notice(window, &sc.manifest);
        summary.push_str("no verdicts in the requested window\n");
    } else if let Some(r) = range {
        let _ = writeln!(summary, "window {} .. {}, alpha {}", format_hour(r.start), format_hour(r.end), format_sig(cfg.alpha, 6));
        for res in &regions {
            let hours: Vec<i64> = res.verdicts.iter().filter(|v| v.p < cfg.alpha).map(|v| v.t).collect();
            describe_windows(&mut summary, &format!("region {} (dof {})", res.name, res.model.retained), &hours);
        }
        for (s, vs) in &stations {
            let hours: Vec<i64> = vs.iter().filter(|v| v.is_anomalous).map(|v| v.t).collect();
            describe_windows(&mut summary, &format!("station {s}"), &hours);
        }
    }
    write_text(&dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(outcome(sc.failed || region_failed))
}

#[derive(Serialize)]
struct CalibrationReport {
    window: Option<TimeRange>,
    regions: BTreeMap<String, dpk_anomaly::pipeline::Calibration>,
    station_flag_rates: BTreeMap<String, f64>,
    pooled_station_flag_rate: f64,
}

pub fn calibrate(cfg: &PipelineConfig, run: &RunDir, window: &Window, bins: usize, decades: usize) -> Result<Outcome> {
    let sc = score_run(cfg, run)?;
    let range = resolve_window(window, &sc.manifest);
    let stations = station_verdict_map(cfg, &sc, range)?;
    let (regions, region_failed) = match range {
        Some(r) => region_results(cfg, &sc, r)?,
        None => (Vec::new(), false),
    };
    let rate = |flags: usize, n: usize| if n == 0 { 0.0 } else { flags as f64 / n as f64 };
    let mut report = CalibrationReport {
        window: range,
        regions: BTreeMap::new(),
        station_flag_rates: BTreeMap::new(),
        pooled_station_flag_rate: 0.0,
    };
    let (mut flags, mut n) = (0, 0);
    for (s, vs) in &stations {
        let f = vs.iter().filter(|v| v.is_anomalous).count();
        report.station_flag_rates.insert(s.clone(), rate(f, vs.len()));
        flags += f;
        n += vs.len();
    }
    report.pooled_station_flag_rate = rate(flags, n);
    for r in &regions {
        let ps: Vec<f64> = r.verdicts.iter().map(|v| v.p).collect();
        report.regions.insert(r.name.clone(), calibration(&ps, bins, decades));
    }

    let dir = run.verdicts();
    let mut w = csv::Writer::from_writer(create_file(&dir.join("calibration.csv"))?);
    w.write_record(["region", "scale", "lo", "hi", "count"])?;
    for (name, c) in &report.regions {
        for (scale, hist) in [("linear", &c.linear), ("log", &c.log)] {
            for b in hist {
                w.write_record([
                    name.clone(),
                    scale.to_string(),
                    format_sig(b.lo, 9),
                    format_sig(b.hi, 9),
                    b.count.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    write_text(&dir.join("calibration.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;

    if n == 0 && report.regions.values().all(|c| c.n == 0) {
        empty_window_notice(window, &sc.manifest);
    }
    for (name, c) in &report.regions {
        println!("region {name}: {} p-values, KS distance {}", c.n, format_sig(c.ks, 4));
    }
    println!("station flag rate {} at alpha {}", format_sig(report.pooled_station_flag_rate, 4), format_sig(cfg.alpha, 4));
    Ok(outcome(sc.failed || region_failed))
}

pub fn sweep(
    cfg: &PipelineConfig,
    run: &RunDir,
    labels: &Path,
    alphas: &[f64],
    ks: &[usize],
    evrs: &[f64],
    window: &Window,
) -> Result<Outcome> {
    let sc = score_run(cfg, run)?;
    let Some(test) = resolve_window(window, &sc.manifest) else {
        empty_window_notice(window, &sc.manifest);
        bail!("sweep needs a non-empty evaluation window");
    };
    let file = std::fs::File::open(labels).with_context(|| format!("opening {}", labels.display()))?;
    let truth = read_labels_csv(file)?;
    let anomalous: Vec<i64> = test
        .hours()
        .filter(|&t| truth.labels.keys().any(|s| truth.is_anomalous(s, t)))
        .collect();
    let windows = flag_windows(&anomalous);
    let mut scores = BTreeMap::new();
    for (s, m) in &sc.models {
        scores.insert(s.clone(), raw_scores(&sc.pairs[s], m, cfg.use_domain_model)?);
    }
    let input = SweepInput {
        stations: scores.keys().cloned().collect(),
        scores,
        train: sc.manifest.train,
        test,
        windows,
        lambda: cfg.lambda,
        min_valid_frac: cfg.min_valid_frac,
        beta: DEFAULT_BETA,
    };
    let grid = SweepGrid {
        alphas: alphas.to_vec(),
        ks: ks.to_vec(),
        evr_thresholds: evrs.to_vec(),
    };
    let result = run_sweep(&grid, &input)?;
    let path = run.root.join("sweep.csv");
    write_sweep_csv(&result, create_file(&path)?)?;
    let best = result.best_row();
    println!(
        "best: alpha {} k {} evr {} F {} (precision {}, recall {}) -> {}",
        format_sig(best.alpha, 6),
        best.k,
        format_sig(best.evr, 6),
        format_sig(best.f_beta, 6),
        format_sig(best.score.precision, 6),
        format_sig(best.score.recall, 6),
        path.display()
    );
    Ok(outcome(sc.failed))
}

pub fn synth(scenario: Scenario, spec_file: Option<&Path>, stations: usize, seed: u64, out: &Path) -> Result<Outcome> {
    let spec = match spec_file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<ScenarioSpec>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => match scenario {
            Scenario::Null => ScenarioSpec::null_network(stations, seed),
            Scenario::Type1 => type1_scenario(seed),
            Scenario::Type2 => type2_scenario(seed),
            Scenario::Regional => regional_shift_scenario(stations, -1.5, 168, seed),
        },
    };
    let data = generate(&spec)?;
    write_dataset(&data, out)?;
    let train = spec.train_range();
    let cfg = PipelineConfig {
        data_dir: out.to_path_buf(),
        train_start: Some(train.start),
        train_end: Some(train.end),
        use_domain_model: spec.confounder.as_ref().is_some_and(|c| c.shared_with_model),
        ..PipelineConfig::default()
    };
    write_text(&out.join("pipeline.json"), &(cfg.to_json()? + "\n"))?;
    println!(
        "{} stations, {} hours, {} anomaly events -> {}",
        spec.n_stations,
        spec.span.len(),
        spec.anomalies.len(),
        out.display()
    );
    Ok(Outcome::Complete)
}

pub fn report(cfg: &PipelineConfig, run: &RunDir, window: &Window, svg: bool) -> Result<Outcome> {
    let sc = score_run(cfg, run)?;
    let range = resolve_window(window, &sc.manifest);
    let verdicts = station_verdict_map(cfg, &sc, range)?;
    let dir = run.reports();
    ensure_dir(&dir)?;
    let mut any = false;
    for (s, vs) in &verdicts {
        let rows = report_rows(&sc.pairs[s].obs, &sc.models[s].obs, &sc.dists[s], vs);
        any |= !rows.is_empty();
        write_report_csv(&rows, create_file(&dir.join(format!("{s}.csv")))?)?;
        if svg {
            let mut f = create_file(&dir.join(format!("{s}.svg")))?;
            f.write_all(render_svg(s, &rows).as_bytes())?;
            f.flush()?;
        }
    }
    if !any {
        empty_window_notice(window, &sc.manifest);
    }
    println!("report for {} stations -> {}", verdicts.len(), dir.display());
    Ok(outcome(sc.failed))
}
