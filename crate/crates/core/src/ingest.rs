//! Chunked trace ingestion.
//!
//! Rows are read from a (possibly gzipped) delimited text source in batches of
//! `chunk_size` rows, parsed in parallel, and handed downstream in source order.
//! Dirty rows are skipped and counted; a run aborts only when the overall
//! error rate crosses the configured ceiling.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveTime, Timelike};
use flate2::read::MultiGzDecoder;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::LatLon;

/// Length of one sample interval in seconds.
pub const INTERVAL_SECONDS: i64 = 900;
/// Number of sample intervals in one local day.
pub const SLOTS_PER_DAY: usize = 96;
pub const DEFAULT_CHUNK_SIZE: usize = 10_000;
/// Default local-time offset (UTC+8).
pub const DEFAULT_TZ_OFFSET_S: i64 = 8 * 3600;
pub const DEFAULT_ERROR_CEILING: f64 = 0.01;

const SECONDS_PER_DAY: i64 = 86_400;
const LOGGED_ERRORS: u64 = 10;

/// One GPS ping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub driver_id: String,
    pub order_id: String,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
}

impl TraceRecord {
    pub fn position(&self) -> LatLon {
        LatLon::new(self.lat, self.lon)
    }
}

/// A day-local 15-minute bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IntervalIndex {
    pub day: NaiveDate,
    pub slot: u16,
}

impl IntervalIndex {
    pub fn new(day: NaiveDate, slot: u16) -> Self {
        debug_assert!((slot as usize) < SLOTS_PER_DAY);
        Self { day, slot }
    }

    /// `HH:MM` of the slot start.
    pub fn slot_label(&self) -> String {
        slot_label(self.slot)
    }

    /// All 96 intervals of `day` in order.
    pub fn day_axis(day: NaiveDate) -> impl Iterator<Item = IntervalIndex> {
        (0..SLOTS_PER_DAY as u16).map(move |slot| IntervalIndex { day, slot })
    }
}

pub fn slot_label(slot: u16) -> String {
    let minutes = slot as i64 * INTERVAL_SECONDS / 60;
    format!("{:02}:{:02}", minutes / 60, minutes % 60)
}

impl fmt::Display for IntervalIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}T{}", self.day.format("%Y-%m-%d"), self.slot_label())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid interval label `{0}` (expected YYYY-MM-DDTHH:MM on a 15-minute boundary)")]
pub struct IntervalLabelError(pub String);

impl FromStr for IntervalIndex {
    type Err = IntervalLabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || IntervalLabelError(s.to_string());
        let (day, time) = s.trim().split_once('T').ok_or_else(err)?;
        let day = NaiveDate::parse_from_str(day, "%Y-%m-%d").map_err(|_| err())?;
        let time = NaiveTime::parse_from_str(time, "%H:%M").map_err(|_| err())?;
        let secs = time.num_seconds_from_midnight() as i64;
        if secs % INTERVAL_SECONDS != 0 {
            return Err(err());
        }
        Ok(IntervalIndex::new(day, (secs / INTERVAL_SECONDS) as u16))
    }
}

/// Maps an epoch timestamp to its local day and 15-minute slot.
///
/// Intervals are half-open: `[start, start + 900)`.
pub fn assign_interval(timestamp: i64, tz_offset_s: i64) -> IntervalIndex {
    let local = timestamp + tz_offset_s;
    let days = local.div_euclid(SECONDS_PER_DAY);
    let secs = local.rem_euclid(SECONDS_PER_DAY);
    let day = DateTime::from_timestamp(days * SECONDS_PER_DAY, 0)
        .expect("timestamp within chrono range")
        .date_naive();
    IntervalIndex::new(day, (secs / INTERVAL_SECONDS) as u16)
}

/// The five trace fields, used to describe file column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    DriverId,
    OrderId,
    Timestamp,
    Lat,
    Lon,
}

impl Field {
    fn name(self) -> &'static str {
        match self {
            Field::DriverId => "driver_id",
            Field::OrderId => "order_id",
            Field::Timestamp => "timestamp",
            Field::Lat => "lat",
            Field::Lon => "lon",
        }
    }
}

impl FromStr for Field {
    type Err = ColumnOrderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim() {
            "driver_id" | "driver" => Field::DriverId,
            "order_id" | "order" => Field::OrderId,
            "timestamp" | "time" => Field::Timestamp,
            "lat" | "latitude" => Field::Lat,
            "lon" | "lng" | "longitude" => Field::Lon,
            other => return Err(ColumnOrderError(format!("unknown column `{other}`"))),
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid column order: {0}")]
pub struct ColumnOrderError(String);

/// Position of each field within a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnOrder([Field; 5]);

impl ColumnOrder {
    pub fn new(fields: [Field; 5]) -> Result<Self, ColumnOrderError> {
        for (i, f) in fields.iter().enumerate() {
            if fields[..i].contains(f) {
                return Err(ColumnOrderError(format!("`{}` listed twice", f.name())));
            }
        }
        Ok(Self(fields))
    }

    fn index_of(&self, field: Field) -> usize {
        self.0.iter().position(|f| *f == field).expect("validated column order")
    }
}

impl Default for ColumnOrder {
    fn default() -> Self {
        Self([Field::DriverId, Field::OrderId, Field::Timestamp, Field::Lon, Field::Lat])
    }
}

impl FromStr for ColumnOrder {
    type Err = ColumnOrderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields = s.split(',').map(Field::from_str).collect::<Result<Vec<_>, _>>()?;
        let fields: [Field; 5] = fields
            .try_into()
            .map_err(|v: Vec<Field>| ColumnOrderError(format!("expected 5 columns, got {}", v.len())))?;
        Self::new(fields)
    }
}

impl fmt::Display for ColumnOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.0.iter().map(|c| c.name()).collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeaderMode {
    /// Treat the first row as a header if it does not parse as a record.
    #[default]
    Auto,
    Present,
    Absent,
}

/// Immutable parser configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseConfig {
    pub columns: ColumnOrder,
    pub delimiter: u8,
    pub header: HeaderMode,
}

impl Default for ParseConfig {
    fn default() -> Self {
        Self { columns: ColumnOrder::default(), delimiter: b',', header: HeaderMode::Auto }
    }
}

/// Why a single row was rejected.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum RecordError {
    #[error("expected 5 fields, found {0}")]
    FieldCount(usize),
    #[error("row is not valid UTF-8")]
    Encoding,
    #[error("empty {0}")]
    EmptyField(&'static str),
    #[error("cannot parse {field} from `{value}`")]
    Parse { field: &'static str, value: String },
    #[error("{field} {value} out of range")]
    OutOfRange { field: &'static str, value: f64 },
}

impl RecordError {
    /// Validation errors concern well-formed rows carrying impossible values.
    pub fn is_validation(&self) -> bool {
        matches!(self, RecordError::OutOfRange { .. })
    }
}

/// Parses one delimited text row.
pub fn parse_record(line: &str, config: &ParseConfig) -> Result<TraceRecord, RecordError> {
    let delim = config.delimiter as char;
    let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split(delim).collect();
    parse_fields(&fields, &config.columns)
}

pub(crate) fn parse_fields<S: AsRef<str>>(
    fields: &[S],
    columns: &ColumnOrder,
) -> Result<TraceRecord, RecordError> {
    if fields.len() != 5 {
        return Err(RecordError::FieldCount(fields.len()));
    }
    let get = |f: Field| fields[columns.index_of(f)].as_ref().trim();

    let driver_id = get(Field::DriverId);
    if driver_id.is_empty() {
        return Err(RecordError::EmptyField("driver_id"));
    }
    let order_id = get(Field::OrderId);
    if order_id.is_empty() {
        return Err(RecordError::EmptyField("order_id"));
    }
    let raw_ts = get(Field::Timestamp);
    let timestamp: i64 = raw_ts
        .parse()
        .map_err(|_| RecordError::Parse { field: "timestamp", value: raw_ts.to_string() })?;
    let number = |f: Field| -> Result<f64, RecordError> {
        let raw = get(f);
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| RecordError::Parse { field: f.name(), value: raw.to_string() })
    };
    let lat = number(Field::Lat)?;
    let lon = number(Field::Lon)?;

    if timestamp <= 0 {
        return Err(RecordError::OutOfRange { field: "timestamp", value: timestamp as f64 });
    }
    if !(-90.0..=90.0).contains(&lat) {
        return Err(RecordError::OutOfRange { field: "lat", value: lat });
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(RecordError::OutOfRange { field: "lon", value: lon });
    }
    Ok(TraceRecord {
        driver_id: driver_id.to_string(),
        order_id: order_id.to_string(),
        timestamp,
        lat,
        lon,
    })
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("chunk size must be at least 1")]
    ZeroChunkSize,
    #[error("cannot open {path}: {source}")]
    Open { path: String, source: std::io::Error },
    #[error("read failure at byte offset {offset}: {source}")]
    Io { offset: u64, source: std::io::Error },
    #[error("{errors} of {rows} rows rejected ({rate:.4}), above ceiling {ceiling}")]
    ErrorRateExceeded { errors: u64, rows: u64, rate: f64, ceiling: f64 },
}

/// Row accounting for one ingest pass. `rows == parsed + parse_errors + validation_errors`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub rows: u64,
    pub parsed: u64,
    pub parse_errors: u64,
    pub validation_errors: u64,
}

impl IngestStats {
    pub fn skipped(&self) -> u64 {
        self.parse_errors + self.validation_errors
    }

    pub fn error_rate(&self) -> f64 {
        if self.rows == 0 {
            0.0
        } else {
            self.skipped() as f64 / self.rows as f64
        }
    }

    pub fn check_ceiling(&self, ceiling: f64) -> Result<(), IngestError> {
        let rate = self.error_rate();
        if rate > ceiling {
            return Err(IngestError::ErrorRateExceeded {
                errors: self.skipped(),
                rows: self.rows,
                rate,
                ceiling,
            });
        }
        Ok(())
    }

    fn absorb(&mut self, batch: &RecordBatch) {
        self.rows += batch.rows;
        self.parsed += batch.records.len() as u64;
        for (_, e) in &batch.errors {
            if e.is_validation() {
                self.validation_errors += 1;
            } else {
                self.parse_errors += 1;
            }
        }
    }
}

/// One chunk of parsed rows.
#[derive(Debug, Clone, Default)]
pub struct RecordBatch {
    /// Zero-based data-row number of the first row in this batch.
    pub first_row: u64,
    /// Data rows consumed, valid or not.
    pub rows: u64,
    pub records: Vec<TraceRecord>,
    /// Rejected rows as (data-row number, reason).
    pub errors: Vec<(u64, RecordError)>,
}

/// Iterator over record batches of a delimited source.
pub struct ChunkReader<R: Read> {
    reader: csv::Reader<R>,
    config: ParseConfig,
    chunk_size: usize,
    next_row: u64,
    first_row_pending: bool,
    stats: IngestStats,
    logged: u64,
    done: bool,
}

impl<R: Read> ChunkReader<R> {
    pub fn new(source: R, config: ParseConfig, chunk_size: usize) -> Result<Self, IngestError> {
        if chunk_size == 0 {
            return Err(IngestError::ZeroChunkSize);
        }
        let reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .delimiter(config.delimiter)
            .from_reader(source);
        Ok(Self {
            reader,
            first_row_pending: config.header != HeaderMode::Absent,
            config,
            chunk_size,
            next_row: 0,
            stats: IngestStats::default(),
            logged: 0,
            done: false,
        })
    }

    /// Totals over all batches yielded so far.
    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    fn read_raw(&mut self) -> Result<Vec<csv::ByteRecord>, IngestError> {
        let mut rows = Vec::with_capacity(self.chunk_size.min(1 << 16));
        let mut record = csv::ByteRecord::new();
        while rows.len() < self.chunk_size {
            let more = self.reader.read_byte_record(&mut record).map_err(|e| {
                let offset = e.position().map(|p| p.byte()).unwrap_or(self.reader.position().byte());
                let source = match e.into_kind() {
                    csv::ErrorKind::Io(io) => io,
                    other => std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{other:?}")),
                };
                IngestError::Io { offset, source }
            })?;
            if !more {
                self.done = true;
                break;
            }
            if self.first_row_pending {
                self.first_row_pending = false;
                if self.is_header(&record) {
                    continue;
                }
            }
            rows.push(record.clone());
        }
        Ok(rows)
    }

    fn is_header(&self, record: &csv::ByteRecord) -> bool {
        match self.config.header {
            HeaderMode::Present => true,
            HeaderMode::Absent => false,
            HeaderMode::Auto => {
                let cols = &self.config.columns;
                let numeric = |f: Field| {
                    record
                        .get(cols.index_of(f))
                        .and_then(|b| std::str::from_utf8(b).ok())
                        .is_some_and(|s| s.trim().parse::<f64>().is_ok())
                };
                record.len() == 5
                    && !numeric(Field::Timestamp)
                    && !numeric(Field::Lat)
                    && !numeric(Field::Lon)
            }
        }
    }
}

fn parse_byte_record(record: &csv::ByteRecord, columns: &ColumnOrder) -> Result<TraceRecord, RecordError> {
    let fields = record
        .iter()
        .map(std::str::from_utf8)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| RecordError::Encoding)?;
    parse_fields(&fields, columns)
}

impl<R: Read> Iterator for ChunkReader<R> {
    type Item = Result<RecordBatch, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let raw = match self.read_raw() {
            Ok(raw) => raw,
            Err(e) => {
                self.done = true;
                return Some(Err(e));
            }
        };
        if raw.is_empty() {
            return None;
        }
        let columns = self.config.columns;
        let parsed: Vec<_> = raw.par_iter().map(|r| parse_byte_record(r, &columns)).collect();

        let first_row = self.next_row;
        let mut batch = RecordBatch { first_row, rows: raw.len() as u64, ..Default::default() };
        for (i, result) in parsed.into_iter().enumerate() {
            match result {
                Ok(rec) => batch.records.push(rec),
                Err(e) => {
                    let row = first_row + i as u64;
                    if self.logged < LOGGED_ERRORS {
                        log::warn!("skipping data row {row}: {e}");
                        self.logged += 1;
                    }
                    batch.errors.push((row, e));
                }
            }
        }
        self.next_row += batch.rows;
        self.stats.absorb(&batch);
        Some(Ok(batch))
    }
}

/// Convenience constructor for [`ChunkReader`].
pub fn read_chunks<R: Read>(
    source: R,
    config: &ParseConfig,
    chunk_size: usize,
) -> Result<ChunkReader<R>, IngestError> {
    ChunkReader::new(source, config.clone(), chunk_size)
}

/// Opens a trace file, transparently decompressing gzip input.
pub fn open_source(path: &Path) -> Result<Box<dyn Read + Send>, IngestError> {
    let open_err = |source| IngestError::Open { path: path.display().to_string(), source };
    let file = File::open(path).map_err(open_err)?;
    let mut buffered = BufReader::with_capacity(1 << 20, file);
    let magic = buffered.fill_buf().map_err(open_err)?;
    if magic.starts_with(&[0x1f, 0x8b]) {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(buffered))))
    } else {
        Ok(Box::new(buffered))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(day: &str, hms: &str) -> i64 {
        let dt = chrono::NaiveDateTime::parse_from_str(&format!("{day} {hms}"), "%Y-%m-%d %H:%M:%S")
            .unwrap();
        dt.and_utc().timestamp() - DEFAULT_TZ_OFFSET_S
    }

    #[test]
    fn parses_default_order() {
        let rec = parse_record("d1,o1,1475280000,104.06,30.65", &ParseConfig::default()).unwrap();
        assert_eq!(
            rec,
            TraceRecord {
                driver_id: "d1".into(),
                order_id: "o1".into(),
                timestamp: 1475280000,
                lat: 30.65,
                lon: 104.06
            }
        );
    }

    #[test]
    fn malformed_timestamp_is_parse_error() {
        let err = parse_record("d1,o1,notatime,104.06,30.65", &ParseConfig::default()).unwrap_err();
        assert!(matches!(err, RecordError::Parse { field: "timestamp", .. }));
        assert!(!err.is_validation());
    }

    #[test]
    fn latitude_out_of_range_is_validation_error() {
        let err = parse_record("d1,o1,1475280000,104.06,95.0", &ParseConfig::default()).unwrap_err();
        assert!(err.is_validation(), "{err:?}");
    }

    #[test]
    fn rejects_empty_ids_and_bad_counts() {
        let cfg = ParseConfig::default();
        assert_eq!(parse_record(",o1,1,104,30", &cfg), Err(RecordError::EmptyField("driver_id")));
        assert_eq!(parse_record("d,,1,104,30", &cfg), Err(RecordError::EmptyField("order_id")));
        assert_eq!(parse_record("d,o,1,104", &cfg), Err(RecordError::FieldCount(4)));
        assert!(parse_record("d,o,0,104,30", &cfg).unwrap_err().is_validation());
        assert!(parse_record("d,o,5,181,30", &cfg).unwrap_err().is_validation());
    }

    #[test]
    fn custom_column_order_and_delimiter() {
        let cfg = ParseConfig {
            columns: "timestamp,lat,lon,order_id,driver_id".parse().unwrap(),
            delimiter: b'\t',
            header: HeaderMode::Auto,
        };
        let rec = parse_record("1475280000\t30.65\t104.06\to9\td9", &cfg).unwrap();
        assert_eq!((rec.order_id.as_str(), rec.driver_id.as_str()), ("o9", "d9"));
        assert_eq!((rec.lat, rec.lon), (30.65, 104.06));
    }

    #[test]
    fn column_order_validation() {
        assert!("driver_id,order_id,timestamp,lon".parse::<ColumnOrder>().is_err());
        assert!("driver_id,driver_id,timestamp,lon,lat".parse::<ColumnOrder>().is_err());
        assert_eq!(ColumnOrder::default().to_string(), "driver_id,order_id,timestamp,lon,lat");
    }

    #[test]
    fn interval_boundaries() {
        let tz = DEFAULT_TZ_OFFSET_S;
        assert_eq!(assign_interval(ts("2016-10-01", "00:00:00"), tz).slot, 0);
        assert_eq!(assign_interval(ts("2016-10-01", "08:00:00"), tz).slot, 32);
        let last = assign_interval(ts("2016-10-01", "23:59:59"), tz);
        assert_eq!(last.slot, 95);
        assert_eq!(last.day, NaiveDate::from_ymd_opt(2016, 10, 1).unwrap());
        // half-open: 08:14:59 is still slot 32, 08:15:00 is 33
        assert_eq!(assign_interval(ts("2016-10-01", "08:14:59"), tz).slot, 32);
        assert_eq!(assign_interval(ts("2016-10-01", "08:15:00"), tz).slot, 33);
    }

    #[test]
    fn tz_offset_moves_day_boundary() {
        // 1475280000 = 2016-10-01T00:00:00Z = 08:00 in UTC+8
        let utc = assign_interval(1475280000, 0);
        let cst = assign_interval(1475280000, 8 * 3600);
        assert_eq!((utc.slot, cst.slot), (0, 32));
        let west = assign_interval(1475280000, -3600);
        assert_eq!(west.day, NaiveDate::from_ymd_opt(2016, 9, 30).unwrap());
        assert_eq!(west.slot, 92);
    }

    #[test]
    fn interval_label_round_trip() {
        let idx = assign_interval(1475280000, DEFAULT_TZ_OFFSET_S);
        assert_eq!(idx.to_string(), "2016-10-01T08:00");
        assert_eq!("2016-10-01T08:00".parse::<IntervalIndex>().unwrap(), idx);
        assert!("2016-10-01T08:07".parse::<IntervalIndex>().is_err());
        assert!("garbage".parse::<IntervalIndex>().is_err());
    }

    fn rows(n: usize) -> String {
        (0..n).map(|i| format!("d{i},o{i},{},104.06,30.65\n", 1475280000 + i)).collect()
    }

    #[test]
    fn chunk_sizes() {
        let data = rows(25_000);
        let sizes: Vec<usize> = read_chunks(data.as_bytes(), &ParseConfig::default(), 10_000)
            .unwrap()
            .map(|b| b.unwrap().records.len())
            .collect();
        assert_eq!(sizes, vec![10_000, 10_000, 5_000]);
    }

    #[test]
    fn empty_source_yields_nothing() {
        let mut reader = read_chunks(&b""[..], &ParseConfig::default(), 10).unwrap();
        assert!(reader.next().is_none());
        assert_eq!(reader.stats(), IngestStats::default());
    }

    #[test]
    fn zero_chunk_size_rejected() {
        assert!(matches!(
            read_chunks(&b""[..], &ParseConfig::default(), 0),
            Err(IngestError::ZeroChunkSize)
        ));
    }

    #[test]
    fn header_detection_and_error_accounting() {
        let data = "driver_id,order_id,timestamp,lon,lat\n\
                    d1,o1,1475280000,104.06,30.65\n\
                    d1,o1,bad,104.06,30.65\n\
                    d1,o1,1475280003,104.06,95\n\
                    d1,o1,1475280006,104.06,30.66\n";
        let mut reader = read_chunks(data.as_bytes(), &ParseConfig::default(), 2).unwrap();
        let batches: Vec<_> = reader.by_ref().map(Result::unwrap).collect();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[1].first_row, 2);
        assert_eq!(batches[0].errors[0].0, 1);
        let stats = reader.stats();
        assert_eq!(stats, IngestStats { rows: 4, parsed: 2, parse_errors: 1, validation_errors: 1 });
        assert!(stats.check_ceiling(0.01).is_err());
        assert!(stats.check_ceiling(0.5).is_ok());
    }

    #[test]
    fn headerless_first_row_is_data() {
        let data = rows(3);
        let mut reader = read_chunks(data.as_bytes(), &ParseConfig::default(), 10).unwrap();
        assert_eq!(reader.next().unwrap().unwrap().records.len(), 3);
    }

    #[test]
    fn gzip_sources_are_decoded() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv.gz");
        let mut enc = flate2::write::GzEncoder::new(File::create(&path).unwrap(), Default::default());
        enc.write_all(rows(5).as_bytes()).unwrap();
        enc.finish().unwrap();
        let reader = read_chunks(open_source(&path).unwrap(), &ParseConfig::default(), 2).unwrap();
        let n: usize = reader.map(|b| b.unwrap().records.len()).sum();
        assert_eq!(n, 5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn row_strategy() -> impl Strategy<Value = String> {
            prop_oneof![
                (0u32..50, 1_400_000_000i64..1_500_000_000, -180.0f64..180.0, -90.0f64..90.0)
                    .prop_map(|(o, t, lon, lat)| format!("d,o{o},{t},{lon},{lat}")),
                Just("d,o,xx,1,1".to_string()),
                Just("d,o,5,1,91".to_string()),
                Just("too,few".to_string()),
            ]
        }

        proptest! {
            #[test]
            fn conservation_and_chunk_invariance(
                lines in prop::collection::vec(row_strategy(), 0..80),
                chunk in 1usize..20,
            ) {
                let data = lines.join("\n");
                let cfg = ParseConfig { header: HeaderMode::Absent, ..Default::default() };
                let mut chunked = read_chunks(data.as_bytes(), &cfg, chunk).unwrap();
                let a: Vec<TraceRecord> =
                    chunked.by_ref().flat_map(|b| b.unwrap().records).collect();
                let stats = chunked.stats();
                prop_assert_eq!(stats.rows, lines.len() as u64);
                prop_assert_eq!(stats.parsed + stats.skipped(), stats.rows);

                let whole: Vec<TraceRecord> = read_chunks(data.as_bytes(), &cfg, usize::MAX)
                    .unwrap()
                    .flat_map(|b| b.unwrap().records)
                    .collect();
                prop_assert_eq!(a, whole);
            }

            #[test]
            fn interval_monotone_within_day(a in 0i64..86_400, b in 0i64..86_400) {
                let base = 1475280000 - DEFAULT_TZ_OFFSET_S; // local midnight
                let (lo, hi) = (a.min(b), a.max(b));
                let x = assign_interval(base + lo, DEFAULT_TZ_OFFSET_S);
                let y = assign_interval(base + hi, DEFAULT_TZ_OFFSET_S);
                prop_assert_eq!(x.day, y.day);
                prop_assert!(x.slot <= y.slot);
                prop_assert_eq!(x.slot as i64, lo / 900);
            }
        }
    }
}
