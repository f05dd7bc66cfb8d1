//! Per-second drive records: parsing (CSV and JSONL), missing-value cleaning,
//! interstate segment selection, and the participant roster.
//!
//! Drive CSV columns (any order, exact names): `participant_id`, `trip_id`,
//! `t`, `lat`, `lon`, `speed_mph`, `road_class`, `segment_id`,
//! `posted_limit_mph`, and optionally `accel_ftps2`. An empty cell means the
//! value is absent. JSONL lines carry the same keys; `null` or a missing key
//! means absent.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const DEFAULT_SENIOR_AGE: u32 = 65;
pub const MIN_DRIVING_AGE: u32 = 16;

pub const DRIVE_COLUMNS: [&str; 10] = [
    "participant_id",
    "trip_id",
    "t",
    "lat",
    "lon",
    "speed_mph",
    "road_class",
    "segment_id",
    "posted_limit_mph",
    "accel_ftps2",
];
const REQUIRED_DRIVE_COLUMNS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RoadClass {
    Interstate,
    Other,
}

impl RoadClass {
    pub fn as_str(self) -> &'static str {
        match self {
            RoadClass::Interstate => "interstate",
            RoadClass::Other => "other",
        }
    }
}

impl FromStr for RoadClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interstate" => Ok(RoadClass::Interstate),
            "other" => Ok(RoadClass::Other),
            _ => Err(Error::invalid(
                "road_class",
                format!("unknown road class {s:?}"),
            )),
        }
    }
}

impl fmt::Display for RoadClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cohort {
    Senior,
    Young,
}

impl Cohort {
    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::Senior => "senior",
            Cohort::Young => "young",
        }
    }
}

impl FromStr for Cohort {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "senior" => Ok(Cohort::Senior),
            "young" => Ok(Cohort::Young),
            _ => Err(Error::invalid("cohort", format!("unknown cohort {s:?}"))),
        }
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One telemetry sample. Position and speed may be absent before cleaning.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivePoint {
    pub participant_id: String,
    pub trip_id: String,
    /// Seconds since trip start.
    pub t: u32,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
    pub speed_mph: Option<f64>,
    pub road_class: RoadClass,
    pub segment_id: String,
    pub posted_limit_mph: Option<f64>,
    pub accel_ftps2: Option<f64>,
}

impl DrivePoint {
    pub fn is_complete(&self) -> bool {
        self.lat.is_some() && self.lon.is_some() && self.speed_mph.is_some()
    }
}

/// A row that could not be turned into a [`DrivePoint`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseIssue {
    /// 1-based line number in the source, header included.
    pub line: u64,
    pub column: String,
    pub message: String,
}

impl fmt::Display for ParseIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}: {}", self.line, self.column, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Jsonl,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(InputFormat::Csv),
            "jsonl" => Ok(InputFormat::Jsonl),
            _ => Err(Error::invalid("format", format!("unknown format {s:?}"))),
        }
    }
}

#[derive(Debug, Default)]
pub struct ParsedDrives {
    pub points: Vec<DrivePoint>,
    pub issues: Vec<ParseIssue>,
}

pub fn parse_drive_records<R: Read>(reader: R, format: InputFormat) -> Result<ParsedDrives> {
    match format {
        InputFormat::Csv => parse_csv(reader),
        InputFormat::Jsonl => parse_jsonl(reader),
    }
}

fn parse_csv<R: Read>(reader: R) -> Result<ParsedDrives> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut index = [None; DRIVE_COLUMNS.len()];
    for (slot, name) in index.iter_mut().zip(DRIVE_COLUMNS) {
        *slot = headers.iter().position(|h| h.trim() == name);
    }
    if let Some(missing) = DRIVE_COLUMNS[..REQUIRED_DRIVE_COLUMNS]
        .iter()
        .zip(&index)
        .find_map(|(name, idx)| idx.is_none().then_some(*name))
    {
        return Err(Error::Schema(format!(
            "drive header is missing column {missing:?}"
        )));
    }

    let mut out = ParsedDrives::default();
    let mut trips = TripOrder::default();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(err) if err.is_io_error() => return Err(err.into()),
            Err(err) => {
                let line = err.position().map_or(0, |p| p.line());
                out.issues.push(ParseIssue {
                    line,
                    column: String::new(),
                    message: err.to_string(),
                });
                continue;
            }
        }
        let line = record.position().map_or(0, |p| p.line());
        let fields: [Option<&str>; DRIVE_COLUMNS.len()] =
            index.map(|idx| idx.and_then(|i| record.get(i)));
        match point_from_fields(&fields).and_then(|p| trips.check(p)) {
            Ok(point) => out.points.push(point),
            Err((column, message)) => out.issues.push(ParseIssue {
                line,
                column: column.to_string(),
                message,
            }),
        }
    }
    Ok(out)
}

fn parse_jsonl<R: Read>(reader: R) -> Result<ParsedDrives> {
    let mut out = ParsedDrives::default();
    let mut trips = TripOrder::default();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(err) => {
                out.issues.push(ParseIssue {
                    line: line_no,
                    column: String::new(),
                    message: format!("malformed json: {err}"),
                });
                continue;
            }
        };
        let Some(obj) = value.as_object() else {
            out.issues.push(ParseIssue {
                line: line_no,
                column: String::new(),
                message: "expected a json object".into(),
            });
            continue;
        };
        let owned: Vec<Option<String>> = DRIVE_COLUMNS
            .iter()
            .map(|&key| match obj.get(key) {
                None | Some(serde_json::Value::Null) => None,
                Some(serde_json::Value::String(s)) => Some(s.clone()),
                Some(other) => Some(other.to_string()),
            })
            .collect();
        let mut fields = [None; DRIVE_COLUMNS.len()];
        for (slot, v) in fields.iter_mut().zip(&owned) {
            // Missing keys behave like empty CSV cells.
            *slot = Some(v.as_deref().unwrap_or(""));
        }
        match point_from_fields(&fields).and_then(|p| trips.check(p)) {
            Ok(point) => out.points.push(point),
            Err((column, message)) => out.issues.push(ParseIssue {
                line: line_no,
                column: column.to_string(),
                message,
            }),
        }
    }
    Ok(out)
}

type FieldError = (&'static str, String);

/// Rejects rows whose `t` does not advance within their trip.
#[derive(Default)]
struct TripOrder(HashMap<(String, String), u32>);

impl TripOrder {
    fn check(&mut self, point: DrivePoint) -> std::result::Result<DrivePoint, FieldError> {
        let key = (point.participant_id.clone(), point.trip_id.clone());
        if let Some(&last) = self.0.get(&key) {
            if point.t <= last {
                return Err((
                    "t",
                    format!("t={} does not follow t={last} in its trip", point.t),
                ));
            }
        }
        self.0.insert(key, point.t);
        Ok(point)
    }
}

fn point_from_fields(
    fields: &[Option<&str>; DRIVE_COLUMNS.len()],
) -> std::result::Result<DrivePoint, FieldError> {
    let text = |i: usize| -> std::result::Result<&str, FieldError> {
        fields[i]
            .map(str::trim)
            .ok_or((DRIVE_COLUMNS[i], "missing field".to_string()))
    };
    let required = |i: usize| -> std::result::Result<String, FieldError> {
        let s = text(i)?;
        if s.is_empty() {
            Err((DRIVE_COLUMNS[i], "value is required".to_string()))
        } else {
            Ok(s.to_string())
        }
    };
    let optional_real = |i: usize| -> std::result::Result<Option<f64>, FieldError> {
        let s = match fields[i] {
            None => return Ok(None),
            Some(s) => s.trim(),
        };
        if s.is_empty() {
            return Ok(None);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            _ => Err((DRIVE_COLUMNS[i], format!("not a finite number: {s:?}"))),
        }
    };

    let participant_id = required(0)?;
    let trip_id = required(1)?;
    let t_text = required(2)?;
    let t = t_text
        .parse::<u32>()
        .map_err(|_| ("t", format!("not a non-negative integer: {t_text:?}")))?;
    let lat = optional_real(3)?;
    if let Some(v) = lat {
        if !(-90.0..=90.0).contains(&v) {
            return Err(("lat", format!("{v} outside [-90, 90]")));
        }
    }
    let lon = optional_real(4)?;
    if let Some(v) = lon {
        if !(-180.0..=180.0).contains(&v) {
            return Err(("lon", format!("{v} outside [-180, 180]")));
        }
    }
    let speed_mph = optional_real(5)?;
    if let Some(v) = speed_mph {
        if v < 0.0 {
            return Err(("speed_mph", format!("negative speed {v}")));
        }
    }
    let road_class = required(6)?
        .parse::<RoadClass>()
        .map_err(|e| ("road_class", e.to_string()))?;
    let segment_id = required(7)?;
    let posted_limit_mph = optional_real(8)?;
    if let Some(v) = posted_limit_mph {
        if v <= 0.0 {
            return Err((
                "posted_limit_mph",
                format!("limit must be positive, got {v}"),
            ));
        }
    }
    let accel_ftps2 = optional_real(9)?;

    Ok(DrivePoint {
        participant_id,
        trip_id,
        t,
        lat,
        lon,
        speed_mph,
        road_class,
        segment_id,
        posted_limit_mph,
        accel_ftps2,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes points in the drive CSV schema. Floats use shortest round-trip
/// formatting, so parsing the output reproduces the points exactly.
pub fn write_drive_csv<W: Write>(writer: W, points: &[DrivePoint]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(DRIVE_COLUMNS)?;
    for p in points {
        wtr.write_record([
            p.participant_id.as_str(),
            p.trip_id.as_str(),
            &p.t.to_string(),
            &fmt_opt(p.lat),
            &fmt_opt(p.lon),
            &fmt_opt(p.speed_mph),
            p.road_class.as_str(),
            p.segment_id.as_str(),
            &fmt_opt(p.posted_limit_mph),
            &fmt_opt(p.accel_ftps2),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Accounting for [`clean`] and [`filter_select`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CleanReport {
    pub rows_in: usize,
    pub rows_dropped_missing: usize,
    pub rows_dropped_filter: usize,
    pub rows_out: usize,
    pub reasons: BTreeMap<String, usize>,
}

impl CleanReport {
    pub fn balances(&self) -> bool {
        self.rows_in == self.rows_out + self.rows_dropped_missing + self.rows_dropped_filter
    }
}

/// Drops points with absent position or speed. Absent acceleration is kept;
/// it is recomputed from speed downstream.
pub fn clean(points: Vec<DrivePoint>) -> (Vec<DrivePoint>, CleanReport) {
    let mut report = CleanReport {
        rows_in: points.len(),
        ..Default::default()
    };
    let kept: Vec<DrivePoint> = points
        .into_iter()
        .filter(|p| {
            let reason = if p.lat.is_none() || p.lon.is_none() {
                "missing_gps"
            } else if p.speed_mph.is_none() {
                "missing_speed"
            } else {
                return true;
            };
            *report.reasons.entry(reason.to_string()).or_default() += 1;
            false
        })
        .collect();
    report.rows_out = kept.len();
    report.rows_dropped_missing = report.rows_in - report.rows_out;
    (kept, report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionCriteria {
    pub min_limit_mph: f64,
    pub road_class: RoadClass,
    pub min_points_per_segment: usize,
    pub min_participants_per_segment: usize,
}

impl Default for SelectionCriteria {
    fn default() -> Self {
        SelectionCriteria {
            min_limit_mph: 65.0,
            road_class: RoadClass::Interstate,
            min_points_per_segment: 200,
            min_participants_per_segment: 3,
        }
    }
}

/// One retained `(segment, posted limit)` group.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSummary {
    pub segment_id: String,
    pub posted_limit_mph: f64,
    pub n_points: usize,
    pub n_participants: usize,
    pub points_by_cohort: BTreeMap<Cohort, usize>,
}

/// Keeps points on the requested road class at or above the minimum limit,
/// then removes whole segments that lack enough points or participants.
///
/// Segments are keyed by `(segment_id, posted_limit_mph)`. Points whose
/// participant is absent from `cohorts` are kept but not counted in
/// `points_by_cohort`.
pub fn filter_select(
    points: Vec<DrivePoint>,
    criteria: &SelectionCriteria,
    cohorts: &HashMap<String, Cohort>,
) -> (Vec<DrivePoint>, Vec<SegmentSummary>) {
    let candidates: Vec<DrivePoint> = points
        .into_iter()
        .filter(|p| {
            p.road_class == criteria.road_class
                && p.posted_limit_mph
                    .is_some_and(|l| l >= criteria.min_limit_mph)
        })
        .collect();

    let mut groups: BTreeMap<(String, u64), (usize, BTreeSet<&str>)> = BTreeMap::new();
    for p in &candidates {
        let key = (p.segment_id.clone(), p.posted_limit_mph.unwrap().to_bits());
        let entry = groups.entry(key).or_default();
        entry.0 += 1;
        entry.1.insert(&p.participant_id);
    }
    let keep: BTreeSet<(String, u64)> = groups
        .into_iter()
        .filter(|(_, (n, who))| {
            *n >= criteria.min_points_per_segment
                && who.len() >= criteria.min_participants_per_segment
        })
        .map(|(k, _)| k)
        .collect();

    let retained: Vec<DrivePoint> = candidates
        .into_iter()
        .filter(|p| keep.contains(&(p.segment_id.clone(), p.posted_limit_mph.unwrap().to_bits())))
        .collect();
    let summaries = summarize_segments(&retained, cohorts);
    (retained, summaries)
}

pub fn summarize_segments(
    points: &[DrivePoint],
    cohorts: &HashMap<String, Cohort>,
) -> Vec<SegmentSummary> {
    type Tally<'a> = (usize, BTreeSet<&'a str>, BTreeMap<Cohort, usize>);
    let mut acc: BTreeMap<(String, u64), Tally> = BTreeMap::new();
    for p in points {
        let Some(limit) = p.posted_limit_mph else {
            continue;
        };
        let entry = acc
            .entry((p.segment_id.clone(), limit.to_bits()))
            .or_default();
        entry.0 += 1;
        entry.1.insert(&p.participant_id);
        if let Some(&c) = cohorts.get(&p.participant_id) {
            *entry.2.entry(c).or_default() += 1;
        }
    }
    acc.into_iter()
        .map(
            |((segment_id, bits), (n_points, who, by_cohort))| SegmentSummary {
                segment_id,
                posted_limit_mph: f64::from_bits(bits),
                n_points,
                n_participants: who.len(),
                points_by_cohort: by_cohort,
            },
        )
        .collect()
}

/// Groups points into trips keyed by `(participant_id, trip_id)`, each sorted
/// by time.
pub fn split_trips(points: &[DrivePoint]) -> Vec<Vec<DrivePoint>> {
    let mut trips: BTreeMap<(&str, &str), Vec<DrivePoint>> = BTreeMap::new();
    for p in points {
        trips
            .entry((&p.participant_id, &p.trip_id))
            .or_default()
            .push(p.clone());
    }
    trips
        .into_values()
        .map(|mut trip| {
            trip.sort_by_key(|p| p.t);
            trip
        })
        .collect()
}

pub fn assign_cohort(age: u32, threshold: u32) -> Result<Cohort> {
    if age < MIN_DRIVING_AGE {
        return Err(Error::invalid(
            "age",
            format!("{age} is below the licensing floor of {MIN_DRIVING_AGE}"),
        ));
    }
    Ok(if age >= threshold {
        Cohort::Senior
    } else {
        Cohort::Young
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sex {
    Male,
    Female,
    Unspecified,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
            Sex::Unspecified => "unspecified",
        }
    }
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "male" => Ok(Sex::Male),
            "female" => Ok(Sex::Female),
            "unspecified" | "" => Ok(Sex::Unspecified),
            _ => Err(Error::invalid("sex", format!("unknown value {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Participant {
    pub participant_id: String,
    pub age: u32,
    pub sex: Sex,
    pub cohort: Cohort,
}

/// Reads a roster CSV (`participant_id, age, sex`). Every row must be valid.
pub fn parse_roster<R: Read>(reader: R, senior_age: u32) -> Result<Vec<Participant>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("roster header is missing column {name:?}")))
    };
    let (id_col, age_col, sex_col) = (col("participant_id")?, col("age")?, col("sex")?);

    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let get = |i: usize| record.get(i).unwrap_or("").trim();
        let participant_id = get(id_col).to_string();
        if participant_id.is_empty() {
            return Err(Error::invalid(
                "participant_id",
                format!("empty on line {line}"),
            ));
        }
        let age: u32 = get(age_col).parse().map_err(|_| {
            Error::invalid(
                "age",
                format!("{:?} on line {line} is not an integer", get(age_col)),
            )
        })?;
        let sex: Sex = get(sex_col).parse()?;
        let cohort = assign_cohort(age, senior_age)?;
        if !seen.insert(participant_id.clone()) {
            return Err(Error::Duplicate(participant_id));
        }
        out.push(Participant {
            participant_id,
            age,
            sex,
            cohort,
        });
    }
    Ok(out)
}

pub fn write_roster<W: Write>(writer: W, roster: &[Participant]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["participant_id", "age", "sex"])?;
    for p in roster {
        wtr.write_record([
            p.participant_id.as_str(),
            &p.age.to_string(),
            p.sex.as_str(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn cohort_index(roster: &[Participant]) -> HashMap<String, Cohort> {
    roster
        .iter()
        .map(|p| (p.participant_id.clone(), p.cohort))
        .collect()
}
