//! Plot-ready exports: forecast bands, score traces and critical lines.

use std::fmt::Write as _;
use std::io::Write;

use crate::dpk::DpkModel;
use crate::error::{Error, Result};
use crate::fmt::format_sig;
use crate::ingest::SeriesFrame;
use crate::scoring::{SamplingDist, StationVerdict};
use crate::special::normal_icdf;

/// Central interval coverages of the forecast bands.
pub const BAND_LEVELS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

/// Half-widths in σ units of the central intervals in [`BAND_LEVELS`].
pub fn band_halfwidths() -> [f64; 4] {
    BAND_LEVELS.map(|c| normal_icdf(0.5 + c / 2.0))
}

/// `(lo, hi)` edges of the central `coverage` interval of `N(mu, sigma)`.
pub fn band(mu: f64, sigma: f64, coverage: f64) -> (f64, f64) {
    let h = sigma * normal_icdf(0.5 + coverage / 2.0);
    (mu - h, mu + h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub t: i64,
    pub x: Option<f64>,
    pub mu: f64,
    pub sigma: f64,
    /// `(lo, hi)` per band level.
    pub bands: [(f64, f64); 4],
    pub stat: f64,
    pub crit_lo: f64,
    pub crit_hi: f64,
    pub flag: bool,
}

/// One row per verdict hour.
pub fn report_rows(
    frame: &SeriesFrame,
    model: &DpkModel,
    dist: &SamplingDist,
    verdicts: &[StationVerdict],
) -> Vec<ReportRow> {
    let ts: Vec<i64> = verdicts.iter().map(|v| v.t).collect();
    let half = band_halfwidths();
    model
        .predict_at(&ts)
        .into_iter()
        .zip(verdicts)
        .map(|(f, v)| {
            let c = v.critical * dist.sigma;
            ReportRow {
                t: v.t,
                x: frame.get(v.t),
                mu: f.mu,
                sigma: f.sigma,
                bands: half.map(|h| (f.mu - h * f.sigma, f.mu + h * f.sigma)),
                stat: v.stat,
                crit_lo: dist.mu - c,
                crit_hi: dist.mu + c,
                flag: v.is_anomalous,
            }
        })
        .collect()
}

pub fn report_header() -> Vec<String> {
    let mut h: Vec<String> = ["t", "x", "mu", "sigma"].map(String::from).to_vec();
    for c in BAND_LEVELS {
        let pct = (c * 100.0).round() as u32;
        h.push(format!("lo{pct}"));
        h.push(format!("hi{pct}"));
    }
    h.extend(["stat", "crit_lo", "crit_hi", "flag"].map(String::from));
    h
}

pub fn write_report_csv<W: Write>(rows: &[ReportRow], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(report_header())?;
    let g = |x: f64| format_sig(x, 9);
    for r in rows {
        let mut rec = vec![
            r.t.to_string(),
            r.x.map(g).unwrap_or_default(),
            g(r.mu),
            g(r.sigma),
        ];
        for (lo, hi) in r.bands {
            rec.push(g(lo));
            rec.push(g(hi));
        }
        rec.extend([g(r.stat), g(r.crit_lo), g(r.crit_hi), u8::from(r.flag).to_string()]);
        wtr.write_record(rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<report csv>", e))?;
    Ok(())
}

const WIDTH: f64 = 900.0;
const PANEL: f64 = 220.0;
const MARGIN: f64 = 40.0;

struct Scale {
    t0: f64,
    t1: f64,
    lo: f64,
    hi: f64,
    top: f64,
}

impl Scale {
    fn new(ts: &[i64], values: impl Iterator<Item = f64>, top: f64) -> Self {
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
        let t0 = *ts.first().unwrap_or(&0) as f64;
        let t1 = (*ts.last().unwrap_or(&1) as f64).max(t0 + 1.0);
        Self { t0, t1, lo, hi, top }
    }

    fn x(&self, t: i64) -> f64 {
        MARGIN + (t as f64 - self.t0) / (self.t1 - self.t0) * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        self.top + PANEL - (v - self.lo) / (self.hi - self.lo) * PANEL
    }
}

fn polyline(out: &mut String, s: &Scale, pts: impl Iterator<Item = (i64, f64)>, style: &str) {
    let mut d = String::new();
    for (t, v) in pts {
        let _ = write!(d, "{:.1},{:.1} ", s.x(t), s.y(v));
    }
    let _ = writeln!(out, r#"<polyline fill="none" {style} points="{}"/>"#, d.trim_end());
}

/// Two stacked panels: observations over the 80% forecast band, and the
/// rolling-mean statistic between its critical lines.
pub fn render_svg(station: &str, rows: &[ReportRow]) -> String {
    let height = 2.0 * PANEL + 3.0 * MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<text x="{MARGIN}" y="20">{station}</text>"#);
    if rows.is_empty() {
        let _ = writeln!(out, r#"<text x="{MARGIN}" y="60">no verdicts</text>"#);
        out.push_str("</svg>\n");
        return out;
    }
    let ts: Vec<i64> = rows.iter().map(|r| r.t).collect();

    let top = Scale::new(
        &ts,
        rows.iter()
            .flat_map(|r| [r.bands[3].0, r.bands[3].1].into_iter().chain(r.x)),
        MARGIN,
    );
    let mut band = String::new();
    for r in rows {
        let _ = write!(band, "{:.1},{:.1} ", top.x(r.t), top.y(r.bands[3].1));
    }
    for r in rows.iter().rev() {
        let _ = write!(band, "{:.1},{:.1} ", top.x(r.t), top.y(r.bands[3].0));
    }
    let _ = writeln!(out, r##"<polygon fill="#c6dbef" stroke="none" points="{}"/>"##, band.trim_end());
    polyline(&mut out, &top, rows.iter().map(|r| (r.t, r.mu)), r##"stroke="#08519c""##);
    polyline(
        &mut out,
        &top,
        rows.iter().filter_map(|r| r.x.map(|x| (r.t, x))),
        r##"stroke="#252525" stroke-width="0.6""##,
    );

    let bottom = Scale::new(
        &ts,
        rows.iter().flat_map(|r| [r.stat, r.crit_lo, r.crit_hi]),
        2.0 * MARGIN + PANEL,
    );
    polyline(&mut out, &bottom, rows.iter().map(|r| (r.t, r.crit_hi)), r##"stroke="#cb181d" stroke-dasharray="4 3""##);
    polyline(&mut out, &bottom, rows.iter().map(|r| (r.t, r.crit_lo)), r##"stroke="#cb181d" stroke-dasharray="4 3""##);
    polyline(&mut out, &bottom, rows.iter().map(|r| (r.t, r.stat)), r##"stroke="#252525""##);
    for r in rows.iter().filter(|r| r.flag) {
        let _ = writeln!(
            out,
            r##"<circle cx="{:.1}" cy="{:.1}" r="1.5" fill="#cb181d"/>"##,
            bottom.x(r.t),
            bottom.y(r.stat)
        );
    }
    out.push_str("</svg>\n");
    out
}
