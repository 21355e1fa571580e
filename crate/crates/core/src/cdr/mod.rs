//! Call detail records: identifiers, the three input schemas, and the
//! selection steps applied before any metric is computed.
//!
//! Input files are comma-separated with one header row:
//!
//! | schema | columns |
//! |--------|---------|
//! | FGMD   | `caller_id,timestamp,callee_prefix,antenna_id` |
//! | CGMD   | `caller_id,timestamp,district_id` |
//! | ATD    | `timestamp,out_antenna,in_antenna,total_calls,refugee_calls,total_duration_s,refugee_duration_s` |
//!
//! Timestamps are ISO-8601 local clock without offset.

mod period;
mod registry;

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use period::{partition_periods, Period, PeriodPartition, PeriodScheme, TWO_WEEK_DAYS, TWO_WEEK_PERIODS};
pub use registry::{Antenna, AntennaKey, AntennaSpec, District, DistrictKey, DistrictSpec, Registry};

pub const FGMD_HEADER: &str = "caller_id,timestamp,callee_prefix,antenna_id";
pub const CGMD_HEADER: &str = "caller_id,timestamp,district_id";
pub const ATD_HEADER: &str =
    "timestamp,out_antenna,in_antenna,total_calls,refugee_calls,total_duration_s,refugee_duration_s";
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CdrError {
    #[error("malformed row: expected {expected} fields, found {found}")]
    MalformedRow { expected: usize, found: usize },
    #[error("bad timestamp {0:?}")]
    BadTimestamp(String),
    #[error("bad id prefix {0:?} (expected 1, 2 or 3)")]
    BadPrefix(String),
    #[error("unknown antenna {0:?}")]
    UnknownAntenna(String),
    #[error("unknown district {0:?}")]
    UnknownDistrict(String),
    #[error("bad value for {field}: {value:?}")]
    BadNumber { field: &'static str, value: String },
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    BadCoordinate { lat: f64, lon: f64 },
    #[error("inconsistent traffic counts: {0}")]
    InvalidCounts(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("date {date} is outside study year {year}")]
    TimestampOutOfStudyYear { date: String, year: i32 },
    #[error("{source_name}, line {line}: {error}")]
    AtLine {
        source_name: String,
        line: usize,
        error: Box<CdrError>,
    },
    #[error("reading {source_name}: {message}")]
    Io { source_name: String, message: String },
}

impl CdrError {
    pub(crate) fn at(self, source_name: &str, line: usize) -> Self {
        CdrError::AtLine {
            source_name: source_name.to_owned(),
            line,
            error: Box::new(self),
        }
    }

    pub(crate) fn io(source_name: &str, e: std::io::Error) -> Self {
        CdrError::Io {
            source_name: source_name.to_owned(),
            message: e.to_string(),
        }
    }

    /// The underlying error, without line context.
    pub fn root(&self) -> &CdrError {
        match self {
            CdrError::AtLine { error, .. } => error.root(),
            e => e,
        }
    }
}

/// Population class encoded in the first character of an anonymized id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserClass {
    Refugee,
    Local,
    Unknown,
}

impl UserClass {
    pub fn from_prefix(s: &str) -> Result<Self, CdrError> {
        match s.as_bytes().first() {
            Some(b'1') => Ok(UserClass::Refugee),
            Some(b'2') => Ok(UserClass::Local),
            Some(b'3') => Ok(UserClass::Unknown),
            _ => Err(CdrError::BadPrefix(s.to_owned())),
        }
    }

    pub fn prefix(self) -> char {
        match self {
            UserClass::Refugee => '1',
            UserClass::Local => '2',
            UserClass::Unknown => '3',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct UserId {
    pub raw_id: Box<str>,
    pub class: UserClass,
}

impl UserId {
    pub fn parse(raw: &str) -> Result<Self, CdrError> {
        Ok(Self {
            class: UserClass::from_prefix(raw)?,
            raw_id: raw.into(),
        })
    }
}

/// Dense handle of an interned [`UserId`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UserKey(pub(crate) u32);

impl UserKey {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Interner for caller ids.
#[derive(Debug, Clone, Default)]
pub struct UserTable {
    ids: Vec<UserId>,
    index: HashMap<Box<str>, UserKey>,
}

impl UserTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, raw: &str) -> Result<UserKey, CdrError> {
        if let Some(k) = self.index.get(raw) {
            return Ok(*k);
        }
        let id = UserId::parse(raw)?;
        let key = UserKey(self.ids.len() as u32);
        self.index.insert(id.raw_id.clone(), key);
        self.ids.push(id);
        Ok(key)
    }

    pub fn get(&self, key: UserKey) -> &UserId {
        &self.ids[key.index()]
    }

    pub fn key_of(&self, raw: &str) -> Option<UserKey> {
        self.index.get(raw).copied()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (UserKey, &UserId)> {
        self.ids.iter().enumerate().map(|(i, u)| (UserKey(i as u32), u))
    }

    /// Folds `other` into `self`, returning the key translation for `other`.
    pub fn absorb(&mut self, other: &UserTable) -> Vec<UserKey> {
        other
            .ids
            .iter()
            .map(|u| self.intern(&u.raw_id).expect("ids in a table are valid"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Site {
    Antenna(AntennaKey),
    District(DistrictKey),
}

impl Site {
    pub fn district(self, registry: &Registry) -> DistrictKey {
        match self {
            Site::Antenna(a) => registry.antenna(a).district,
            Site::District(d) => d,
        }
    }

    pub fn antenna(self) -> Option<AntennaKey> {
        match self {
            Site::Antenna(a) => Some(a),
            Site::District(_) => None,
        }
    }
}

/// One call event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallRecord {
    pub caller: UserKey,
    pub caller_class: UserClass,
    pub timestamp: NaiveDateTime,
    /// `None` for district-level records, which carry no callee.
    pub callee: Option<UserClass>,
    pub site: Site,
}

impl CallRecord {
    pub fn hour(&self) -> usize {
        self.timestamp.hour() as usize
    }

    pub fn date(&self) -> NaiveDate {
        self.timestamp.date()
    }
}

/// Hourly antenna-to-antenna traffic aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrafficRecord {
    /// Truncated to the hour.
    pub timestamp: NaiveDateTime,
    pub out_antenna: AntennaKey,
    pub in_antenna: AntennaKey,
    pub total_calls: u64,
    pub refugee_calls: u64,
    pub total_duration: u64,
    pub refugee_duration: u64,
}

/// Splits a comma-separated row into exactly `N` trimmed fields.
pub(crate) fn fields<const N: usize>(line: &str) -> Result<[&str; N], CdrError> {
    let line = line.trim_end_matches(['\r', '\n']);
    let mut out = [""; N];
    let mut found = 0;
    for (i, f) in line.split(',').enumerate() {
        if i < N {
            out[i] = f.trim();
        }
        found = i + 1;
    }
    if found != N {
        return Err(CdrError::MalformedRow { expected: N, found });
    }
    Ok(out)
}

/// Parses `YYYY-MM-DDTHH:MM:SS` (a space separator is also accepted);
/// anything else goes through chrono's ISO parser.
pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime, CdrError> {
    let b = s.as_bytes();
    if b.len() == 19 && b[4] == b'-' && b[7] == b'-' && (b[10] == b'T' || b[10] == b' ') && b[13] == b':' && b[16] == b':' {
        let num = |r: std::ops::Range<usize>| -> Option<u32> {
            b[r].iter().try_fold(0u32, |acc, c| c.is_ascii_digit().then(|| acc * 10 + (c - b'0') as u32))
        };
        let parsed = (|| {
            let date = NaiveDate::from_ymd_opt(num(0..4)? as i32, num(5..7)?, num(8..10)?)?;
            date.and_hms_opt(num(11..13)?, num(14..16)?, num(17..19)?)
        })();
        return parsed.ok_or_else(|| CdrError::BadTimestamp(s.to_owned()));
    }
    s.parse::<NaiveDateTime>().map_err(|_| CdrError::BadTimestamp(s.to_owned()))
}

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

/// Parses one FGMD row: `caller_id,timestamp,callee_prefix,antenna_id`.
pub fn parse_fgmd(line: &str, registry: &Registry, users: &mut UserTable) -> Result<CallRecord, CdrError> {
    let [caller, ts, callee, antenna] = fields::<4>(line)?;
    let caller_class = UserClass::from_prefix(caller)?;
    let callee = UserClass::from_prefix(callee)?;
    let timestamp = parse_timestamp(ts)?;
    let antenna = registry
        .antenna_key(antenna)
        .ok_or_else(|| CdrError::UnknownAntenna(antenna.to_owned()))?;
    Ok(CallRecord {
        caller: users.intern(caller)?,
        caller_class,
        timestamp,
        callee: Some(callee),
        site: Site::Antenna(antenna),
    })
}

/// Parses one CGMD row: `caller_id,timestamp,district_id`.
pub fn parse_cgmd(line: &str, registry: &Registry, users: &mut UserTable) -> Result<CallRecord, CdrError> {
    let [caller, ts, district] = fields::<3>(line)?;
    let caller_class = UserClass::from_prefix(caller)?;
    let timestamp = parse_timestamp(ts)?;
    let district = registry
        .district_key(district)
        .ok_or_else(|| CdrError::UnknownDistrict(district.to_owned()))?;
    Ok(CallRecord {
        caller: users.intern(caller)?,
        caller_class,
        timestamp,
        callee: None,
        site: Site::District(district),
    })
}

/// Parses one ATD row.
pub fn parse_atd(line: &str, registry: &Registry) -> Result<TrafficRecord, CdrError> {
    let [ts, out_a, in_a, total, refugee, total_d, refugee_d] = fields::<7>(line)?;
    let timestamp = parse_timestamp(ts)?;
    let timestamp = timestamp.date().and_hms_opt(timestamp.hour(), 0, 0).expect("valid hour");
    let antenna = |id: &str| registry.antenna_key(id).ok_or_else(|| CdrError::UnknownAntenna(id.to_owned()));
    let count = |field: &'static str, v: &str| {
        v.parse::<u64>().map_err(|_| CdrError::BadNumber {
            field,
            value: v.to_owned(),
        })
    };
    let rec = TrafficRecord {
        timestamp,
        out_antenna: antenna(out_a)?,
        in_antenna: antenna(in_a)?,
        total_calls: count("total_calls", total)?,
        refugee_calls: count("refugee_calls", refugee)?,
        total_duration: count("total_duration_s", total_d)?,
        refugee_duration: count("refugee_duration_s", refugee_d)?,
    };
    if rec.refugee_calls > rec.total_calls || rec.refugee_duration > rec.total_duration {
        return Err(CdrError::InvalidCounts(format!(
            "refugee share exceeds total ({}/{} calls, {}/{} s)",
            rec.refugee_calls, rec.total_calls, rec.refugee_duration, rec.total_duration
        )));
    }
    Ok(rec)
}

pub fn format_fgmd(rec: &CallRecord, users: &UserTable, registry: &Registry) -> String {
    let antenna = rec.site.antenna().map(|a| registry.antenna(a).id.as_str()).unwrap_or("");
    format!(
        "{},{},{},{}",
        users.get(rec.caller).raw_id,
        format_timestamp(rec.timestamp),
        rec.callee.unwrap_or(UserClass::Unknown).prefix(),
        antenna
    )
}

pub fn format_cgmd(rec: &CallRecord, users: &UserTable, registry: &Registry) -> String {
    format!(
        "{},{},{}",
        users.get(rec.caller).raw_id,
        format_timestamp(rec.timestamp),
        registry.district(rec.site.district(registry)).id
    )
}

pub fn format_atd(rec: &TrafficRecord, registry: &Registry) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        format_timestamp(rec.timestamp),
        registry.antenna(rec.out_antenna).id,
        registry.antenna(rec.in_antenna).id,
        rec.total_calls,
        rec.refugee_calls,
        rec.total_duration,
        rec.refugee_duration
    )
}

/// Whether rows referencing unknown sites abort ingestion or are skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested<T> {
    pub rows: Vec<T>,
    /// Data rows read (header excluded).
    pub lines: usize,
    /// Rows dropped in lenient mode because their site is not in the registry.
    pub skipped_unknown_site: usize,
}

impl<T> Default for Ingested<T> {
    fn default() -> Self {
        Self {
            rows: Vec::new(),
            lines: 0,
            skipped_unknown_site: 0,
        }
    }
}

fn ingest<T, R, F>(reader: R, source_name: &str, mode: IngestMode, mut parse: F) -> Result<Ingested<T>, CdrError>
where
    R: BufRead,
    F: FnMut(&str) -> Result<T, CdrError>,
{
    let mut out = Ingested::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CdrError::io(source_name, e))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        out.lines += 1;
        match parse(&line) {
            Ok(r) => out.rows.push(r),
            Err(CdrError::UnknownAntenna(_) | CdrError::UnknownDistrict(_)) if mode == IngestMode::Lenient => {
                out.skipped_unknown_site += 1
            }
            Err(e) => return Err(e.at(source_name, i + 1)),
        }
    }
    Ok(out)
}

pub fn read_fgmd<R: BufRead>(
    reader: R,
    registry: &Registry,
    users: &mut UserTable,
    mode: IngestMode,
) -> Result<Ingested<CallRecord>, CdrError> {
    ingest(reader, "FGMD", mode, |l| parse_fgmd(l, registry, users))
}

pub fn read_cgmd<R: BufRead>(
    reader: R,
    registry: &Registry,
    users: &mut UserTable,
    mode: IngestMode,
) -> Result<Ingested<CallRecord>, CdrError> {
    ingest(reader, "CGMD", mode, |l| parse_cgmd(l, registry, users))
}

pub fn read_atd<R: BufRead>(reader: R, registry: &Registry, mode: IngestMode) -> Result<Ingested<TrafficRecord>, CdrError> {
    ingest(reader, "ATD", mode, |l| parse_atd(l, registry))
}

/// Parses a whole FGMD text (header included) in `chunks` line-aligned
/// pieces on the rayon pool. Output order and user keys are identical to a
/// sequential [`read_fgmd`] over the same text.
pub fn parse_fgmd_chunked(
    text: &str,
    registry: &Registry,
    users: &mut UserTable,
    mode: IngestMode,
    chunks: usize,
) -> Result<Ingested<CallRecord>, CdrError> {
    let body = match text.find('\n') {
        Some(i) => &text[i + 1..],
        None => "",
    };
    let pieces = split_lines(body, chunks.max(1));
    let parsed: Vec<(Ingested<CallRecord>, UserTable, usize)> = pieces
        .par_iter()
        .map(|&(first_line, piece)| {
            let mut local = UserTable::new();
            let mut out = Ingested::default();
            for (i, line) in piece.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                out.lines += 1;
                match parse_fgmd(line, registry, &mut local) {
                    Ok(r) => out.rows.push(r),
                    Err(CdrError::UnknownAntenna(_)) if mode == IngestMode::Lenient => out.skipped_unknown_site += 1,
                    Err(e) => return Err(e.at("FGMD", first_line + i + 2)),
                }
            }
            Ok((out, local, first_line))
        })
        .collect::<Result<_, _>>()?;

    let mut merged = Ingested::default();
    merged.rows.reserve(parsed.iter().map(|p| p.0.rows.len()).sum());
    for (part, local, _) in parsed {
        let map = users.absorb(&local);
        merged.lines += part.lines;
        merged.skipped_unknown_site += part.skipped_unknown_site;
        merged.rows.extend(part.rows.into_iter().map(|mut r| {
            r.caller = map[r.caller.index()];
            r
        }));
    }
    Ok(merged)
}

/// Splits `text` into at most `n` pieces on line boundaries, returning each
/// piece with the 0-based index of its first line.
fn split_lines(text: &str, n: usize) -> Vec<(usize, &str)> {
    let mut out = Vec::with_capacity(n);
    let target = text.len().div_ceil(n).max(1);
    let (mut start, mut line) = (0usize, 0usize);
    while start < text.len() {
        let mut end = (start + target).min(text.len());
        while end < text.len() && text.as_bytes()[end - 1] != b'\n' {
            end += 1;
        }
        let piece = &text[start..end];
        out.push((line, piece));
        line += piece.bytes().filter(|&b| b == b'\n').count();
        start = end;
    }
    out
}

/// Removes records whose callee class is unknown. Returns the kept records
/// and the dropped fraction (0 for empty input).
pub fn drop_unknown_callee(records: Vec<CallRecord>) -> (Vec<CallRecord>, f64) {
    let total = records.len();
    let kept: Vec<_> = records
        .into_iter()
        .filter(|r| r.callee != Some(UserClass::Unknown))
        .collect();
    let fraction = if total == 0 {
        0.0
    } else {
        (total - kept.len()) as f64 / total as f64
    };
    (kept, fraction)
}

/// Users whose call count inside `period` is at least `min_avg` calls per
/// day on average.
pub fn filter_active_users(records: &[CallRecord], period: &Period, min_avg: f64) -> BTreeSet<UserKey> {
    assert!(min_avg > 0.0, "min_avg must be positive");
    let mut counts: HashMap<UserKey, u32> = HashMap::new();
    for r in records.iter().filter(|r| period.contains(r.date())) {
        *counts.entry(r.caller).or_default() += 1;
    }
    let threshold = min_avg * period.days() as f64;
    counts
        .into_iter()
        .filter(|&(_, c)| c as f64 >= threshold)
        .map(|(u, _)| u)
        .collect()
}
