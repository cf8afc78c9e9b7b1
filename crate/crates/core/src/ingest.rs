//! Station series ingestion: CSV parsing onto an hourly grid, log transform,
//! observation/model alignment, and the canonical JSON-lines frame format.
//!
//! Input CSVs hold one station each, with a header row and the columns
//! `station_id,timestamp,value` (names remappable through [`ColumnMap`]).
//! Timestamps are ISO-8601 with an explicit UTC offset; they are converted to
//! UTC and truncated to the hour. When several rows land on the same hour the
//! last one wins.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::{from_epoch_hour, to_epoch_hour, EpochHour, TimeRange};

pub const UNITS_RAW: &str = "raw";
pub const UNITS_LOG: &str = "log-ppb";
pub const FRAME_FORMAT_VERSION: u32 = 1;

/// One station's hourly series. Slot `i` holds the value at hour `t0 + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesFrame {
    pub station_id: String,
    pub t0: EpochHour,
    pub values: Vec<Option<f64>>,
    pub units_tag: String,
}

impl SeriesFrame {
    /// Builds a frame, turning non-finite values into missing slots.
    pub fn new(
        station_id: impl Into<String>,
        t0: EpochHour,
        values: Vec<Option<f64>>,
        units_tag: impl Into<String>,
    ) -> Self {
        let values = values
            .into_iter()
            .map(|v| v.filter(|x| x.is_finite()))
            .collect();
        Self {
            station_id: station_id.into(),
            t0,
            values,
            units_tag: units_tag.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Last covered hour. Only meaningful for non-empty frames.
    pub fn t_end(&self) -> EpochHour {
        self.t0 + self.values.len() as i64 - 1
    }

    pub fn range(&self) -> Option<TimeRange> {
        (!self.is_empty()).then(|| TimeRange {
            start: self.t0,
            end: self.t_end(),
        })
    }

    pub fn get(&self, t: EpochHour) -> Option<f64> {
        let idx = t - self.t0;
        if idx < 0 {
            return None;
        }
        self.values.get(idx as usize).copied().flatten()
    }

    /// Present `(t, value)` pairs in time order.
    pub fn present(&self) -> impl Iterator<Item = (EpochHour, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter_map(move |(i, v)| v.map(|x| (self.t0 + i as i64, x)))
    }

    pub fn n_present(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    /// Re-indexes onto `range`, filling uncovered hours with missing.
    pub fn reindex(&self, range: TimeRange) -> SeriesFrame {
        let values = range.hours().map(|t| self.get(t)).collect();
        SeriesFrame {
            station_id: self.station_id.clone(),
            t0: range.start,
            values,
            units_tag: self.units_tag.clone(),
        }
    }
}

/// Observation series plus the optional domain-model series on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StationPair {
    pub obs: SeriesFrame,
    pub model: Option<SeriesFrame>,
}

impl StationPair {
    pub fn obs_only(obs: SeriesFrame) -> Self {
        Self { obs, model: None }
    }

    pub fn station_id(&self) -> &str {
        &self.obs.station_id
    }
}

/// Header names of the three input columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub station_id: String,
    pub timestamp: String,
    pub value: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            station_id: "station_id".into(),
            timestamp: "timestamp".into(),
            value: "value".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub rows: usize,
    /// Rows that overwrote an earlier value for the same hour.
    pub duplicates: usize,
    /// Rows whose value was empty, unparseable or non-finite.
    pub invalid_values: usize,
}

pub fn parse_csv(path: &Path, columns: &ColumnMap) -> Result<(SeriesFrame, IngestReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv_reader(file, columns, &path.display().to_string())
}

/// Parses CSV from any reader; `source` only labels errors.
pub fn parse_csv_reader<R: Read>(
    reader: R,
    columns: &ColumnMap,
    source: &str,
) -> Result<(SeriesFrame, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (id_col, ts_col, val_col) = (
        col(&columns.station_id)?,
        col(&columns.timestamp)?,
        col(&columns.value)?,
    );

    let mut report = IngestReport::default();
    let mut station: Option<String> = None;
    let mut rows: Vec<(EpochHour, Option<f64>)> = Vec::new();

    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        report.rows += 1;
        let id = record.get(id_col).unwrap_or_default();
        match &station {
            None => station = Some(id.to_string()),
            Some(first) if first != id => {
                return Err(Error::MixedStations {
                    first: first.clone(),
                    other: id.to_string(),
                })
            }
            _ => {}
        }
        let raw_ts = record.get(ts_col).unwrap_or_default();
        let ts = DateTime::parse_from_rfc3339(raw_ts).map_err(|_| Error::BadTimestamp {
            row: i + 2,
            value: raw_ts.to_string(),
        })?;
        let t = to_epoch_hour(&ts.with_timezone(&Utc));
        let value = record
            .get(val_col)
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|v| v.is_finite());
        if value.is_none() {
            report.invalid_values += 1;
        }
        rows.push((t, value));
    }

    let (Some(t_min), Some(t_max)) = (
        rows.iter().map(|r| r.0).min(),
        rows.iter().map(|r| r.0).max(),
    ) else {
        return Err(Error::NoRows(source.to_string()));
    };

    let mut values = vec![None; (t_max - t_min + 1) as usize];
    for (t, v) in rows {
        let Some(v) = v else { continue };
        let slot = &mut values[(t - t_min) as usize];
        if slot.is_some() {
            report.duplicates += 1;
        }
        *slot = Some(v);
    }
    if report.duplicates > 0 {
        warn!(
            "{source}: {} duplicate hourly rows resolved last-write-wins",
            report.duplicates
        );
    }

    let frame = SeriesFrame::new(station.unwrap_or_default(), t_min, values, UNITS_RAW);
    Ok((frame, report))
}

/// Writes present slots in the ingestion CSV layout.
pub fn write_csv<W: Write>(frame: &SeriesFrame, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["station_id", "timestamp", "value"])?;
    for (t, v) in frame.present() {
        wtr.write_record([
            frame.station_id.as_str(),
            &from_epoch_hour(t).to_rfc3339(),
            &v.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn write_csv_file(frame: &SeriesFrame, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(frame, BufWriter::new(file))
}

/// Natural log of every present value; nonpositive values become missing.
///
/// Returns the transformed frame and the number of values dropped.
pub fn log_transform(s: &SeriesFrame) -> (SeriesFrame, usize) {
    let mut dropped = 0;
    let values = s
        .values
        .iter()
        .map(|v| match *v {
            Some(x) if x > 0.0 => Some(x.ln()),
            Some(_) => {
                dropped += 1;
                None
            }
            None => None,
        })
        .collect();
    let frame = SeriesFrame {
        station_id: s.station_id.clone(),
        t0: s.t0,
        values,
        units_tag: UNITS_LOG.to_string(),
    };
    (frame, dropped)
}

/// Puts observation and model series on their common union grid.
pub fn align_pair(obs: &SeriesFrame, model: &SeriesFrame) -> Result<StationPair> {
    let (Some(a), Some(b)) = (obs.range(), model.range()) else {
        return Err(Error::EmptySeries);
    };
    if a.intersect(&b).is_none() {
        return Err(Error::DisjointRanges {
            a_start: a.start,
            a_end: a.end,
            b_start: b.start,
            b_end: b.end,
        });
    }
    let grid = a.union_hull(&b);
    Ok(StationPair {
        obs: obs.reindex(grid),
        model: Some(model.reindex(grid)),
    })
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    version: u32,
    #[serde(flatten)]
    frame: SeriesFrame,
}

/// Writes frames as JSON lines, one versioned record per frame.
pub fn write_frames<W: Write>(frames: &[SeriesFrame], mut writer: W) -> Result<()> {
    for frame in frames {
        let rec = FrameRecord {
            version: FRAME_FORMAT_VERSION,
            frame: frame.clone(),
        };
        serde_json::to_writer(&mut writer, &rec)?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io("<frame writer>", e))?;
    }
    writer.flush().map_err(|e| Error::io("<frame writer>", e))
}

pub fn read_frames<R: Read>(reader: R) -> Result<Vec<SeriesFrame>> {
    let mut frames = Vec::new();
    for line in BufReader::new(reader).lines() {
        let line = line.map_err(|e| Error::io("<frame reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)?;
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(FRAME_FORMAT_VERSION as u64) {
            return Err(Error::VersionMismatch {
                found: value
                    .get("version")
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "none".into()),
                expected: FRAME_FORMAT_VERSION.to_string(),
            });
        }
        let rec: FrameRecord = serde_json::from_value(value)?;
        frames.push(SeriesFrame::new(
            rec.frame.station_id,
            rec.frame.t0,
            rec.frame.values,
            rec.frame.units_tag,
        ));
    }
    Ok(frames)
}
