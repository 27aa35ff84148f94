//! Dense road x interval grids and their CSV/metadata file formats.

use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{IntervalIndex, IntervalLabelError, INTERVAL_SECONDS, SLOTS_PER_DAY};
use crate::network::RoadId;

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("grid has {got} values, expected {roads} x {intervals}")]
    Shape { roads: usize, intervals: usize, got: usize },
    #[error("road ids must be strictly ascending")]
    UnsortedRoads,
    #[error("intervals must be strictly ascending")]
    UnsortedIntervals,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("header: {0}")]
    Label(#[from] IntervalLabelError),
    #[error("matrix csv is missing its header row")]
    MissingHeader,
    #[error("row {row}: {reason}")]
    Row { row: usize, reason: String },
}

/// Road x interval grid stored row-major (one row per road).
#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalMatrix<T> {
    road_ids: Vec<RoadId>,
    intervals: Vec<IntervalIndex>,
    values: Vec<T>,
}

/// Distinct-order counts per road and interval.
pub type FlowMatrix = SpatioTemporalMatrix<u32>;
/// Mean road speeds in km/h per road and interval.
pub type SpeedMatrix = SpatioTemporalMatrix<f64>;

impl<T: Copy + Default> SpatioTemporalMatrix<T> {
    pub fn zeros(road_ids: Vec<RoadId>, intervals: Vec<IntervalIndex>) -> Result<Self, MatrixError> {
        let n = road_ids.len() * intervals.len();
        Self::from_values(road_ids, intervals, vec![T::default(); n])
    }

    pub fn from_values(
        road_ids: Vec<RoadId>,
        intervals: Vec<IntervalIndex>,
        values: Vec<T>,
    ) -> Result<Self, MatrixError> {
        if values.len() != road_ids.len() * intervals.len() {
            return Err(MatrixError::Shape {
                roads: road_ids.len(),
                intervals: intervals.len(),
                got: values.len(),
            });
        }
        if road_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MatrixError::UnsortedRoads);
        }
        if intervals.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MatrixError::UnsortedIntervals);
        }
        Ok(Self { road_ids, intervals, values })
    }

    pub fn road_ids(&self) -> &[RoadId] {
        &self.road_ids
    }

    pub fn intervals(&self) -> &[IntervalIndex] {
        &self.intervals
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn n_roads(&self) -> usize {
        self.road_ids.len()
    }

    pub fn n_intervals(&self) -> usize {
        self.intervals.len()
    }

    pub fn road_position(&self, id: RoadId) -> Option<usize> {
        self.road_ids.binary_search(&id).ok()
    }

    pub fn interval_position(&self, interval: IntervalIndex) -> Option<usize> {
        self.intervals.binary_search(&interval).ok()
    }

    pub fn get(&self, road: usize, interval: usize) -> T {
        self.values[road * self.intervals.len() + interval]
    }

    pub fn set(&mut self, road: usize, interval: usize, value: T) {
        let n = self.intervals.len();
        self.values[road * n + interval] = value;
    }

    pub fn at(&self, road: RoadId, interval: IntervalIndex) -> Option<T> {
        Some(self.get(self.road_position(road)?, self.interval_position(interval)?))
    }

    pub fn row(&self, road: usize) -> &[T] {
        let n = self.intervals.len();
        &self.values[road * n..(road + 1) * n]
    }

    pub fn row_mut(&mut self, road: usize) -> &mut [T] {
        let n = self.intervals.len();
        &mut self.values[road * n..(road + 1) * n]
    }

    /// Iterates `(road id, row)` pairs.
    pub fn rows(&self) -> impl Iterator<Item = (RoadId, &[T])> {
        let n = self.intervals.len().max(1);
        self.road_ids
            .iter()
            .copied()
            .zip(self.values.chunks(n).chain(std::iter::repeat(&[][..])))
    }

    pub fn column(&self, interval: usize) -> impl Iterator<Item = T> + '_ {
        (0..self.road_ids.len()).map(move |r| self.get(r, interval))
    }

    /// Copy keeping only the given road positions (ascending).
    pub fn select_rows(&self, positions: &[usize]) -> Self {
        let road_ids = positions.iter().map(|&p| self.road_ids[p]).collect();
        let values = positions.iter().flat_map(|&p| self.row(p).iter().copied()).collect();
        Self { road_ids, intervals: self.intervals.clone(), values }
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> SpatioTemporalMatrix<U> {
        SpatioTemporalMatrix {
            road_ids: self.road_ids.clone(),
            intervals: self.intervals.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Distinct days on the interval axis, ascending.
    pub fn days(&self) -> Vec<NaiveDate> {
        let mut days: Vec<NaiveDate> = self.intervals.iter().map(|i| i.day).collect();
        days.dedup();
        days
    }
}

impl<T: MatrixValue> SpatioTemporalMatrix<T> {
    /// Writes `road_id,<interval labels...>` followed by one row per road.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MatrixError> {
        let mut w = csv::WriterBuilder::new().from_writer(out);
        let mut header = vec!["road_id".to_string()];
        header.extend(self.intervals.iter().map(|i| i.to_string()));
        w.write_record(&header)?;
        let mut line = Vec::with_capacity(self.intervals.len() + 1);
        for (id, row) in self.rows() {
            line.clear();
            line.push(id.to_string());
            line.extend(row.iter().map(|v| v.render()));
            w.write_record(&line)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, MatrixError> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
        let mut records = r.records();
        let header = records.next().ok_or(MatrixError::MissingHeader)??;
        let intervals = header
            .iter()
            .skip(1)
            .map(str::parse)
            .collect::<Result<Vec<IntervalIndex>, _>>()?;
        let mut road_ids = Vec::new();
        let mut values = Vec::new();
        for (i, rec) in records.enumerate() {
            let rec = rec?;
            let row_err = |reason: String| MatrixError::Row { row: i + 1, reason };
            if rec.len() != intervals.len() + 1 {
                return Err(row_err(format!("expected {} fields, got {}", intervals.len() + 1, rec.len())));
            }
            let id = rec[0].trim().parse().map_err(|_| row_err(format!("bad road id `{}`", &rec[0])))?;
            road_ids.push(RoadId(id));
            for field in rec.iter().skip(1) {
                values.push(T::parse(field).ok_or_else(|| row_err(format!("bad value `{field}`")))?);
            }
        }
        Self::from_values(road_ids, intervals, values)
    }
}

/// Cell types that can be written to and read from matrix CSV files.
pub trait MatrixValue: Copy + Default {
    fn render(&self) -> String;
    fn parse(field: &str) -> Option<Self>;
}

impl MatrixValue for u32 {
    fn render(&self) -> String {
        self.to_string()
    }

    fn parse(field: &str) -> Option<Self> {
        field.trim().parse().ok()
    }
}

impl MatrixValue for f64 {
    // shortest round-trip representation, so files re-read bit-exactly
    fn render(&self) -> String {
        self.to_string()
    }

    fn parse(field: &str) -> Option<Self> {
        field.trim().parse().ok().filter(|v: &f64| v.is_finite())
    }
}

/// Every interval of the whole days `first..=last`.
pub fn day_axis(first: NaiveDate, last: NaiveDate) -> Vec<IntervalIndex> {
    first
        .iter_days()
        .take_while(|d| *d <= last)
        .flat_map(IntervalIndex::day_axis)
        .collect()
}

/// Sidecar document written next to every matrix CSV.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixMetadata {
    pub kind: String,
    pub interval_seconds: i64,
    pub slots_per_day: usize,
    pub tz_offset_s: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_dt_max_s: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anomaly_kmh: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub missing_fraction: Option<f64>,
    #[serde(default)]
    pub dropped_road_ids: Vec<RoadId>,
    #[serde(default)]
    pub flagged_road_ids: Vec<RoadId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anomaly_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anomaly_rate: Option<f64>,
}

impl MatrixMetadata {
    pub fn new(kind: &str, tz_offset_s: i64) -> Self {
        Self {
            kind: kind.to_string(),
            interval_seconds: INTERVAL_SECONDS,
            slots_per_day: SLOTS_PER_DAY,
            tz_offset_s,
            ..Default::default()
        }
    }
}
