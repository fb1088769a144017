//! Delimited crime-report parsing and violent-crime filtering.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Read, Write};

use chrono::{NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unreadable report source: {0}")]
    Source(String),
    #[error("invalid column mapping: {0}")]
    Mapping(String),
    #[error("invalid category policy: {0}")]
    Policy(String),
    #[error("bad report record on line {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One incident row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrimeReport {
    pub report_id: String,
    pub date: NaiveDate,
    pub time: Option<NaiveTime>,
    pub latitude: f64,
    pub longitude: f64,
    pub category: String,
}

/// Reference to a source column by header name or zero-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub report_id: ColumnRef,
    pub date: ColumnRef,
    pub time: ColumnRef,
    pub latitude: ColumnRef,
    pub longitude: ColumnRef,
    pub category: ColumnRef,
    /// chrono format string, e.g. `%m/%d/%Y`.
    pub date_format: String,
    pub has_header: bool,
    pub delimiter: char,
}

impl Default for ColumnMapping {
    /// Report ID, Date, Time, Latitude, Longitude, Category in that order, with a header row.
    fn default() -> Self {
        ColumnMapping {
            report_id: ColumnRef::Index(0),
            date: ColumnRef::Index(1),
            time: ColumnRef::Index(2),
            latitude: ColumnRef::Index(3),
            longitude: ColumnRef::Index(4),
            category: ColumnRef::Index(5),
            date_format: "%m/%d/%Y".into(),
            has_header: true,
            delimiter: ',',
        }
    }
}

impl ColumnMapping {
    fn refs(&self) -> [(&'static str, &ColumnRef); 6] {
        [
            ("report_id", &self.report_id),
            ("date", &self.date),
            ("time", &self.time),
            ("latitude", &self.latitude),
            ("longitude", &self.longitude),
            ("category", &self.category),
        ]
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if !self.delimiter.is_ascii() {
            return Err(IngestError::Mapping("delimiter must be ASCII".into()));
        }
        if self.date_format.trim().is_empty() {
            return Err(IngestError::Mapping("date format is empty".into()));
        }
        if !self.has_header && self.refs().iter().any(|(_, r)| matches!(r, ColumnRef::Name(_))) {
            return Err(IngestError::Mapping(
                "columns referenced by name require a header row".into(),
            ));
        }
        let refs = self.refs();
        for (i, (a, ra)) in refs.iter().enumerate() {
            for (b, rb) in &refs[i + 1..] {
                if ra == rb {
                    return Err(IngestError::Mapping(format!(
                        "fields {a} and {b} map to the same column"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Resolves every field to a zero-based position.
    fn resolve(&self, header: Option<&csv::StringRecord>) -> Result<[usize; 6], IngestError> {
        let mut out = [0usize; 6];
        let mut seen = BTreeSet::new();
        for (slot, (field, r)) in out.iter_mut().zip(self.refs()) {
            *slot = match r {
                ColumnRef::Index(i) => *i,
                ColumnRef::Name(name) => header
                    .and_then(|h| h.iter().position(|c| c.trim() == name.trim()))
                    .ok_or_else(|| {
                        IngestError::Mapping(format!("column {name:?} for {field} not in header"))
                    })?,
            };
            if !seen.insert(*slot) {
                return Err(IngestError::Mapping(format!(
                    "field {field} resolves to an already-used column"
                )));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MissingField,
    BadCoordinate,
    CoordinateOutOfRange,
    BadDate,
    BadTime,
    EmptyCategory,
    BadEncoding,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::MissingField => "missing field",
            RejectReason::BadCoordinate => "unparseable coordinate",
            RejectReason::CoordinateOutOfRange => "coordinate out of range",
            RejectReason::BadDate => "unparseable date",
            RejectReason::BadTime => "unparseable time",
            RejectReason::EmptyCategory => "empty category",
            RejectReason::BadEncoding => "invalid UTF-8",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    /// One-based line number in the source, counting the header.
    pub row: usize,
    pub reason: RejectReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseOutcome {
    pub reports: Vec<CrimeReport>,
    pub errors: Vec<RowError>,
}

impl ParseOutcome {
    pub fn rows_read(&self) -> usize {
        self.reports.len() + self.errors.len()
    }
}

fn parse_time(s: &str) -> Option<NaiveTime> {
    NaiveTime::parse_from_str(s, "%H:%M")
        .or_else(|_| NaiveTime::parse_from_str(s, "%H:%M:%S"))
        .ok()
}

fn parse_row(
    rec: &csv::ByteRecord,
    cols: &[usize; 6],
    mapping: &ColumnMapping,
) -> Result<CrimeReport, (RejectReason, String)> {
    let field = |i: usize, name: &str| -> Result<&str, (RejectReason, String)> {
        let raw = rec
            .get(cols[i])
            .ok_or((RejectReason::MissingField, format!("no {name} column")))?;
        std::str::from_utf8(raw)
            .map(str::trim)
            .map_err(|_| (RejectReason::BadEncoding, format!("{name} is not UTF-8")))
    };
    let report_id = field(0, "report_id")?;
    if report_id.is_empty() {
        return Err((RejectReason::MissingField, "empty report_id".into()));
    }
    let date_s = field(1, "date")?;
    if date_s.is_empty() {
        return Err((RejectReason::MissingField, "empty date".into()));
    }
    let date = NaiveDate::parse_from_str(date_s, &mapping.date_format)
        .map_err(|e| (RejectReason::BadDate, format!("{date_s:?}: {e}")))?;
    let time_s = field(2, "time").unwrap_or("");
    let time = if time_s.is_empty() {
        None
    } else {
        Some(parse_time(time_s).ok_or((RejectReason::BadTime, format!("{time_s:?}")))?)
    };
    let coord = |i: usize, name: &str, limit: f64| -> Result<f64, (RejectReason, String)> {
        let s = field(i, name)?;
        if s.is_empty() {
            return Err((RejectReason::MissingField, format!("empty {name}")));
        }
        let v: f64 = s
            .parse()
            .map_err(|_| (RejectReason::BadCoordinate, format!("{name} {s:?}")))?;
        if !v.is_finite() {
            return Err((RejectReason::BadCoordinate, format!("{name} {s:?}")));
        }
        if v.abs() > limit {
            return Err((RejectReason::CoordinateOutOfRange, format!("{name} {v}")));
        }
        Ok(v)
    };
    let latitude = coord(3, "latitude", 90.0)?;
    let longitude = coord(4, "longitude", 180.0)?;
    let category = field(5, "category")?;
    if category.is_empty() {
        return Err((RejectReason::EmptyCategory, String::new()));
    }
    Ok(CrimeReport {
        report_id: report_id.to_string(),
        date,
        time,
        latitude,
        longitude,
        category: category.to_string(),
    })
}

/// Parses every row; malformed rows become [`RowError`]s and never stop the parse.
pub fn parse_reports<R: Read>(source: R, mapping: &ColumnMapping) -> Result<ParseOutcome, IngestError> {
    mapping.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(mapping.delimiter as u8)
        .has_headers(mapping.has_header)
        .flexible(true)
        .from_reader(source);
    let header = if mapping.has_header {
        Some(
            rdr.headers()
                .map_err(|e| IngestError::Source(e.to_string()))?
                .clone(),
        )
    } else {
        None
    };
    let cols = if mapping.has_header && header.as_ref().is_some_and(|h| h.is_empty()) {
        // Empty input: nothing to resolve against.
        return Ok(ParseOutcome::default());
    } else {
        mapping.resolve(header.as_ref())?
    };
    let mut out = ParseOutcome::default();
    let mut rec = csv::ByteRecord::new();
    loop {
        match rdr.read_byte_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {
                let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
                // Blank lines are skipped by the reader; a lone empty field is not a row.
                if rec.len() == 1 && rec[0].is_empty() {
                    continue;
                }
                match parse_row(&rec, &cols, mapping) {
                    Ok(r) => out.reports.push(r),
                    Err((reason, detail)) => out.errors.push(RowError { row, reason, detail }),
                }
            }
            Err(e) => match e.kind() {
                csv::ErrorKind::Io(_) => return Err(IngestError::Source(e.to_string())),
                _ => {
                    let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
                    out.errors.push(RowError {
                        row,
                        reason: RejectReason::BadEncoding,
                        detail: e.to_string(),
                    });
                }
            },
        }
    }
    Ok(out)
}

/// Case-folded, whitespace-trimmed category key.
pub fn normalize_category(s: &str) -> String {
    s.trim().to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    Allowlist,
    Denylist,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy", into = "RawPolicy")]
pub struct CategoryPolicy {
    mode: PolicyMode,
    categories: BTreeSet<String>,
}

#[derive(Serialize, Deserialize)]
struct RawPolicy {
    mode: PolicyMode,
    categories: Vec<String>,
}

impl TryFrom<RawPolicy> for CategoryPolicy {
    type Error = IngestError;
    fn try_from(r: RawPolicy) -> Result<Self, Self::Error> {
        CategoryPolicy::new(r.mode, r.categories)
    }
}

impl From<CategoryPolicy> for RawPolicy {
    fn from(p: CategoryPolicy) -> Self {
        RawPolicy {
            mode: p.mode,
            categories: p.categories.into_iter().collect(),
        }
    }
}

/// Categories kept when no policy is configured. The source data does not define
/// "violent"; this list is a configurable default.
pub const DEFAULT_VIOLENT_CATEGORIES: &[&str] = &[
    "homicide",
    "assault",
    "battery",
    "robbery",
    "arson",
    "kidnapping",
    "criminal sexual assault",
];

impl Default for CategoryPolicy {
    fn default() -> Self {
        CategoryPolicy::new(PolicyMode::Allowlist, DEFAULT_VIOLENT_CATEGORIES.iter().copied())
            .expect("non-empty default")
    }
}

impl CategoryPolicy {
    pub fn new<I, S>(mode: PolicyMode, categories: I) -> Result<Self, IngestError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let categories: BTreeSet<String> = categories
            .into_iter()
            .map(|c| normalize_category(c.as_ref()))
            .filter(|c| !c.is_empty())
            .collect();
        if mode == PolicyMode::Allowlist && categories.is_empty() {
            return Err(IngestError::Policy("allowlist must not be empty".into()));
        }
        Ok(CategoryPolicy { mode, categories })
    }

    pub fn mode(&self) -> PolicyMode {
        self.mode
    }

    pub fn categories(&self) -> &BTreeSet<String> {
        &self.categories
    }

    pub fn admits(&self, category: &str) -> bool {
        let listed = self.categories.contains(&normalize_category(category));
        match self.mode {
            PolicyMode::Allowlist => listed,
            PolicyMode::Denylist => !listed,
        }
    }
}

/// Keeps the reports whose category passes `policy`, in input order.
pub fn filter_violent(reports: &[CrimeReport], policy: &CategoryPolicy) -> Vec<CrimeReport> {
    reports
        .iter()
        .filter(|r| policy.admits(&r.category))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub rows_read: usize,
    pub rows_parsed: usize,
    pub rows_rejected: usize,
    pub rows_after_filter: usize,
    pub rejection_reasons: BTreeMap<RejectReason, usize>,
}

/// Counts for a parse plus the number of reports surviving the category filter.
pub fn summarize(outcome: &ParseOutcome, rows_after_filter: usize) -> IngestStats {
    let mut rejection_reasons = BTreeMap::new();
    for e in &outcome.errors {
        *rejection_reasons.entry(e.reason).or_insert(0) += 1;
    }
    IngestStats {
        rows_read: outcome.rows_read(),
        rows_parsed: outcome.reports.len(),
        rows_rejected: outcome.errors.len(),
        rows_after_filter: rows_after_filter.min(outcome.reports.len()),
        rejection_reasons,
    }
}

#[derive(Serialize, Deserialize)]
struct JsonReport {
    report_id: String,
    date: NaiveDate,
    time: Option<String>,
    lat: f64,
    lon: f64,
    category: String,
}

/// One JSON object per line: report_id, date (ISO-8601), time (HH:MM or null), lat, lon, category.
pub fn write_jsonl<W: Write>(mut w: W, reports: &[CrimeReport]) -> Result<(), IngestError> {
    for r in reports {
        let rec = JsonReport {
            report_id: r.report_id.clone(),
            date: r.date,
            time: r.time.map(|t| t.format("%H:%M").to_string()),
            lat: r.latitude,
            lon: r.longitude,
            category: r.category.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<CrimeReport>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonReport = serde_json::from_str(&line).map_err(|e| IngestError::Record {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let time = match rec.time {
            Some(t) => Some(parse_time(&t).ok_or_else(|| IngestError::Record {
                line: i + 1,
                msg: format!("bad time {t:?}"),
            })?),
            None => None,
        };
        out.push(CrimeReport {
            report_id: rec.report_id,
            date: rec.date,
            time,
            latitude: rec.lat,
            longitude: rec.lon,
            category: rec.category,
        });
    }
    Ok(out)
}

/// Writes reports as delimited text in the default column order with a header row.
/// Re-parsing with `ColumnMapping { date_format, delimiter, ..Default::default() }`
/// reproduces the records.
pub fn write_delimited<W: Write>(
    w: W,
    reports: &[CrimeReport],
    date_format: &str,
    delimiter: char,
) -> Result<(), IngestError> {
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(delimiter as u8)
        .from_writer(w);
    let io = |e: csv::Error| IngestError::Io(std::io::Error::other(e));
    wtr.write_record(["Report ID", "Date", "Time", "Latitude", "Longitude", "Category"])
        .map_err(io)?;
    for r in reports {
        wtr.write_record([
            r.report_id.clone(),
            r.date.format(date_format).to_string(),
            r.time
                .map(|t| t.format("%H:%M:%S").to_string())
                .unwrap_or_default(),
            r.latitude.to_string(),
            r.longitude.to_string(),
            r.category.clone(),
        ])
        .map_err(io)?;
    }
    wtr.flush()?;
    Ok(())
}
