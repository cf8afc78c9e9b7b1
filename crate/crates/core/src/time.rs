//! Epoch-hour timestamps and inclusive hour ranges.

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whole hours since 1970-01-01T00:00Z.
pub type EpochHour = i64;

pub const HOURS_PER_DAY: i64 = 24;
pub const HOURS_PER_WEEK: i64 = 168;
/// Mean Gregorian year, leap days included.
pub const HOURS_PER_YEAR: f64 = 8766.0;

/// Truncates a UTC instant to the start of its hour.
pub fn to_epoch_hour(ts: &DateTime<Utc>) -> EpochHour {
    ts.timestamp().div_euclid(3600)
}

pub fn from_epoch_hour(t: EpochHour) -> DateTime<Utc> {
    Utc.timestamp_opt(t * 3600, 0)
        .single()
        .expect("epoch hour within chrono range")
}

/// Closed interval `[start, end]` of epoch hours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: EpochHour,
    pub end: EpochHour,
}

impl TimeRange {
    pub fn new(start: EpochHour, end: EpochHour) -> Result<Self> {
        if end < start {
            return Err(Error::InvalidParameter(format!(
                "time range end {end} precedes start {start}"
            )));
        }
        Ok(Self { start, end })
    }

    /// Range of `hours` slots beginning at `start`.
    pub fn with_len(start: EpochHour, hours: usize) -> Self {
        assert!(hours > 0, "empty time range");
        Self {
            start,
            end: start + hours as i64 - 1,
        }
    }

    pub fn len(&self) -> usize {
        (self.end - self.start + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: EpochHour) -> bool {
        t >= self.start && t <= self.end
    }

    pub fn intersect(&self, other: &TimeRange) -> Option<TimeRange> {
        let start = self.start.max(other.start);
        let end = self.end.min(other.end);
        (start <= end).then_some(TimeRange { start, end })
    }

    pub fn union_hull(&self, other: &TimeRange) -> TimeRange {
        TimeRange {
            start: self.start.min(other.start),
            end: self.end.max(other.end),
        }
    }

    pub fn hours(&self) -> impl Iterator<Item = EpochHour> {
        self.start..=self.end
    }
}

/// Accepts an integer epoch hour or an RFC 3339 timestamp (truncated to its hour).
pub fn parse_hour(text: &str) -> Result<EpochHour> {
    let text = text.trim();
    if let Ok(t) = text.parse::<EpochHour>() {
        return Ok(t);
    }
    DateTime::parse_from_rfc3339(text)
        .map(|ts| to_epoch_hour(&ts.with_timezone(&Utc)))
        .map_err(|_| Error::InvalidParameter(format!("`{text}` is neither an epoch hour nor RFC 3339")))
}

/// `YYYY-MM-DDTHH:00:00Z`.
pub fn format_hour(t: EpochHour) -> String {
    from_epoch_hour(t).format("%Y-%m-%dT%H:%M:%SZ").to_string()
}
