//! Accident event ingestion from municipal CSV exports.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, NaiveTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EventsError {
    #[error("malformed CSV: {0}")]
    MalformedCsv(String),
    #[error("schema mismatch: column {0:?} not present in header")]
    SchemaMismatch(String),
    #[error("schema config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EventsError {
    pub fn code(&self) -> &'static str {
        match self {
            EventsError::MalformedCsv(_) => "MALFORMED_CSV",
            EventsError::SchemaMismatch(_) => "SCHEMA_MISMATCH",
            EventsError::Config(_) => "INVALID_CONFIG",
            EventsError::Io(_) => "IO_ERROR",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccidentEvent {
    pub event_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub timestamp: Option<DateTime<Utc>>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

/// Maps logical event fields onto CSV column names.
///
/// `time` may hold a full datetime on its own, or only the time of day when
/// `date` is also mapped. Columns not mapped to a field are carried into
/// [`AccidentEvent::attributes`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub lat: String,
    pub lon: String,
    pub id: Option<String>,
    pub date: Option<String>,
    pub time: Option<String>,
}

impl Default for Schema {
    /// NYC Motor Vehicle Collisions column names.
    fn default() -> Self {
        Self {
            lat: "LATITUDE".into(),
            lon: "LONGITUDE".into(),
            id: Some("COLLISION_ID".into()),
            date: Some("CRASH DATE".into()),
            time: Some("CRASH TIME".into()),
        }
    }
}

impl Schema {
    /// Reads a schema from a `.toml` or `.json` file.
    pub fn from_file(path: &Path) -> Result<Self, EventsError> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| EventsError::Config(e.to_string())),
            _ => toml::from_str(&text).map_err(|e| EventsError::Config(e.to_string())),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParseOutcome {
    pub events: Vec<AccidentEvent>,
    pub skipped_count: usize,
    /// Rows dropped because their id repeated an earlier row (subset of `skipped_count`).
    pub duplicate_ids: usize,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, EventsError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| EventsError::SchemaMismatch(name.to_string()))
}

fn parse_coord(raw: Option<&str>, limit: f64) -> Option<f64> {
    let v: f64 = raw?.trim().parse().ok()?;
    (v.is_finite() && v.abs() <= limit).then_some(v)
}

const DATE_FORMATS: &[&str] = &["%m/%d/%Y", "%Y-%m-%d", "%Y/%m/%d"];
const TIME_FORMATS: &[&str] = &["%H:%M:%S", "%H:%M"];

fn parse_date(s: &str) -> Option<NaiveDate> {
    DATE_FORMATS.iter().find_map(|f| NaiveDate::parse_from_str(s, f).ok())
}

fn parse_time(s: &str) -> Option<NaiveTime> {
    TIME_FORMATS.iter().find_map(|f| NaiveTime::parse_from_str(s, f).ok())
}

fn parse_datetime(s: &str) -> Option<NaiveDateTime> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%m/%d/%Y %H:%M:%S", "%m/%d/%Y %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

fn timestamp(date: Option<&str>, time: Option<&str>) -> Option<DateTime<Utc>> {
    let date = date.map(str::trim).filter(|s| !s.is_empty());
    let time = time.map(str::trim).filter(|s| !s.is_empty());
    let naive = match (date, time) {
        (Some(d), Some(t)) => parse_date(d)?.and_time(parse_time(t)?),
        (Some(d), None) => parse_datetime(d).or_else(|| parse_date(d).map(|d| d.and_time(NaiveTime::MIN)))?,
        (None, Some(t)) => parse_datetime(t)?,
        (None, None) => return None,
    };
    Some(naive.and_utc())
}

/// Parses accident events from UTF-8 CSV bytes.
///
/// Rows with blank, unparsable or out-of-range coordinates are skipped and
/// counted, as are rows repeating an earlier event id. A row without an id
/// column value gets `row-<n>` (1-based data row). An unparsable timestamp
/// leaves `timestamp` empty rather than skipping the row.
pub fn parse_events(raw: &[u8], schema: &Schema) -> Result<ParseOutcome, EventsError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(raw);
    let headers = reader
        .headers()
        .map_err(|e| EventsError::MalformedCsv(e.to_string()))?
        .clone();
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(EventsError::MalformedCsv("missing header row".into()));
    }
    let lat = column(&headers, &schema.lat)?;
    let lon = column(&headers, &schema.lon)?;
    let id = schema.id.as_deref().map(|c| column(&headers, c)).transpose()?;
    let date = schema.date.as_deref().map(|c| column(&headers, c)).transpose()?;
    let time = schema.time.as_deref().map(|c| column(&headers, c)).transpose()?;
    let mapped: HashSet<usize> = [Some(lat), Some(lon), id, date, time].into_iter().flatten().collect();

    let mut out = ParseOutcome::default();
    let mut seen = HashSet::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| EventsError::MalformedCsv(e.to_string()))?;
        let (Some(latitude), Some(longitude)) = (
            parse_coord(record.get(lat), 90.0),
            parse_coord(record.get(lon), 180.0),
        ) else {
            out.skipped_count += 1;
            continue;
        };
        let event_id = id
            .and_then(|i| record.get(i))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .unwrap_or_else(|| format!("row-{}", row + 1));
        if !seen.insert(event_id.clone()) {
            out.skipped_count += 1;
            out.duplicate_ids += 1;
            continue;
        }
        let attributes = headers
            .iter()
            .zip(record.iter())
            .enumerate()
            .filter(|(i, (_, v))| !mapped.contains(i) && !v.trim().is_empty())
            .map(|(_, (k, v))| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        out.events.push(AccidentEvent {
            event_id,
            latitude,
            longitude,
            timestamp: timestamp(date.and_then(|i| record.get(i)), time.and_then(|i| record.get(i))),
            attributes,
        });
    }
    if out.skipped_count > 0 {
        log::warn!("skipped {} event rows ({} duplicate ids)", out.skipped_count, out.duplicate_ids);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "CRASH DATE,CRASH TIME,BOROUGH,LATITUDE,LONGITUDE,COLLISION_ID\n";

    #[test]
    fn header_only_is_empty() {
        let out = parse_events(HEADER.as_bytes(), &Schema::default()).unwrap();
        assert!(out.events.is_empty());
        assert_eq!(out.skipped_count, 0);
    }

    #[test]
    fn blank_latitudes_are_skipped() {
        let csv = format!(
            "{HEADER}\
             09/11/2021,2:39,BROOKLYN,40.667202,-73.8665,4455765\n\
             03/26/2022,11:45,,,-73.9,4513547\n\
             06/29/2022,6:55,QUEENS,40.72,-73.81,4541903\n\
             09/11/2021,9:35,, ,-73.95,4456314\n\
             12/14/2021,8:13,BRONX,40.86,-73.91,4486609\n"
        );
        let out = parse_events(csv.as_bytes(), &Schema::default()).unwrap();
        assert_eq!(out.events.len(), 3);
        assert_eq!(out.skipped_count, 2);
        let first = &out.events[0];
        assert_eq!(first.event_id, "4455765");
        assert_eq!(first.attributes.get("BOROUGH").map(String::as_str), Some("BROOKLYN"));
        assert_eq!(first.timestamp.unwrap().to_rfc3339(), "2021-09-11T02:39:00+00:00");
    }

    #[test]
    fn out_of_range_latitude_is_skipped() {
        let csv = format!("{HEADER}01/01/2022,0:00,,91.0,-73.9,1\n01/01/2022,0:00,,-90.0,180.0,2\n");
        let out = parse_events(csv.as_bytes(), &Schema::default()).unwrap();
        assert_eq!(out.skipped_count, 1);
        assert_eq!(out.events[0].event_id, "2");
    }

    #[test]
    fn missing_column_is_schema_mismatch() {
        let err = parse_events(b"lat,lng\n1,2\n", &Schema::default()).unwrap_err();
        assert!(matches!(err, EventsError::SchemaMismatch(c) if c == "LATITUDE"));
    }

    #[test]
    fn ragged_rows_are_malformed() {
        let schema = Schema { id: None, date: None, time: None, ..Schema::default() };
        let err = parse_events(b"LATITUDE,LONGITUDE\n1,2,3\n", &schema).unwrap_err();
        assert_eq!(err.code(), "MALFORMED_CSV");
        let err = parse_events(b"", &Schema::default()).unwrap_err();
        assert_eq!(err.code(), "MALFORMED_CSV");
    }

    #[test]
    fn custom_schema_and_generated_ids() {
        let schema = Schema {
            lat: "lat".into(),
            lon: "lon".into(),
            id: None,
            date: None,
            time: Some("when".into()),
        };
        let csv = "lat,lon,when\n1.5,2.5,2023-04-05T06:07:08Z\n1.5,2.5,\n";
        let out = parse_events(csv.as_bytes(), &schema).unwrap();
        assert_eq!(out.events[0].event_id, "row-1");
        assert_eq!(out.events[1].event_id, "row-2");
        assert!(out.events[0].timestamp.is_some());
        assert!(out.events[1].timestamp.is_none());
    }

    #[test]
    fn duplicate_ids_are_counted() {
        let csv = "LATITUDE,LONGITUDE,COLLISION_ID\n1,1,a\n1,1,a\n2,2,b\n";
        let schema = Schema { date: None, time: None, ..Schema::default() };
        let out = parse_events(csv.as_bytes(), &schema).unwrap();
        assert_eq!(out.events.len(), 2);
        assert_eq!((out.skipped_count, out.duplicate_ids), (1, 1));
    }

    #[test]
    fn schema_loads_from_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("s.toml");
        std::fs::write(&t, "lat = \"y\"\nlon = \"x\"\n").unwrap();
        let s = Schema::from_file(&t).unwrap();
        assert_eq!((s.lat.as_str(), s.lon.as_str()), ("y", "x"));
        assert_eq!(s.id.as_deref(), Some("COLLISION_ID"));
        let j = dir.path().join("s.json");
        std::fs::write(&j, r#"{"lat":"a","lon":"b","id":null}"#).unwrap();
        assert_eq!(Schema::from_file(&j).unwrap().id, None);
    }

    fn cell() -> impl Strategy<Value = String> {
        prop_oneof![
            Just(String::new()),
            Just("abc".to_string()),
            (-200.0f64..200.0).prop_map(|v| format!("{v:.5}")),
        ]
    }

    proptest! {
        #[test]
        fn rows_are_accounted_for(rows in prop::collection::vec((cell(), cell(), 0u8..6), 0..40)) {
            let mut csv = String::from("LATITUDE,LONGITUDE,COLLISION_ID\n");
            for (lat, lon, id) in &rows {
                csv.push_str(&format!("{lat},{lon},{id}\n"));
            }
            let schema = Schema { date: None, time: None, ..Schema::default() };
            let a = parse_events(csv.as_bytes(), &schema).unwrap();
            let b = parse_events(csv.as_bytes(), &schema).unwrap();
            prop_assert_eq!(a.events.len() + a.skipped_count, rows.len());
            for e in &a.events {
                prop_assert!((-90.0..=90.0).contains(&e.latitude));
                prop_assert!((-180.0..=180.0).contains(&e.longitude));
            }
            let ids: HashSet<_> = a.events.iter().map(|e| &e.event_id).collect();
            prop_assert_eq!(ids.len(), a.events.len());
            prop_assert_eq!(a, b);
        }
    }
}
