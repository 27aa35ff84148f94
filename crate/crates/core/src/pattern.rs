//! Flow and speed tensors from matched points, and speed-matrix cleaning.
//!
//! Flow is the number of distinct orders seen on a road in an interval. Speed
//! is the mean over trace pairs (consecutive pings of one order on one road,
//! at most `pair_dt_max_s` apart) of great-circle distance over elapsed time.
//! A cell with no pairs has speed 0, which the cleaning stage treats as
//! missing.

use std::collections::{HashMap, HashSet};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geo::{haversine, LatLon};
use crate::ingest::{IntervalIndex, SLOTS_PER_DAY};
use crate::matching::MatchedPoint;
use crate::matrix::{day_axis, FlowMatrix, SpeedMatrix};
use crate::network::RoadId;

pub const DEFAULT_PAIR_DT_MAX_S: i64 = 10;
pub const DEFAULT_ANOMALY_KMH: f64 = 70.0;
pub const DEFAULT_MISSING_FRACTION: f64 = 0.2;

/// Two consecutive pings of one order on one road.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePair {
    pub road_id: RoadId,
    /// Interval of the earlier ping.
    pub interval: IntervalIndex,
    pub d_km: f64,
    pub dt_s: i64,
    pub v_kmh: f64,
}

/// Distance, elapsed seconds and speed for a ping pair, if it qualifies.
fn pair_speed(a: LatLon, ta: i64, b: LatLon, tb: i64, dt_max_s: i64) -> Option<(f64, i64, f64)> {
    let dt = tb - ta;
    if dt <= 0 || dt > dt_max_s {
        return None;
    }
    let d = haversine(a, b);
    Some((d, dt, d / (dt as f64 / 3600.0)))
}

/// Pairs from one order's points, which must be sorted by timestamp.
pub fn build_pairs(points: &[MatchedPoint], dt_max_s: i64) -> Vec<TracePair> {
    points
        .windows(2)
        .filter(|w| w[0].road_id == w[1].road_id)
        .filter_map(|w| {
            let (a, b) = (&w[0], &w[1]);
            let (d_km, dt_s, v_kmh) =
                pair_speed(a.record.position(), a.record.timestamp, b.record.position(), b.record.timestamp, dt_max_s)?;
            Some(TracePair { road_id: a.road_id, interval: a.interval, d_km, dt_s, v_kmh })
        })
        .collect()
}

/// Arithmetic mean of pair speeds; 0 when there are none.
pub fn road_mean_speed(pairs: &[TracePair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|p| p.v_kmh).sum::<f64>() / pairs.len() as f64
}

/// Number of distinct orders among the points.
pub fn flow_count(points: &[MatchedPoint]) -> u32 {
    points.iter().map(|p| p.record.order_id.as_str()).collect::<HashSet<_>>().len() as u32
}

#[derive(Debug, Clone, Copy)]
struct TrackPoint {
    timestamp: i64,
    pos: LatLon,
    road: u32,
    interval: IntervalIndex,
}

/// Streaming accumulator for the flow and speed tensors.
///
/// Points are grouped per order as they arrive; `finish` orders each track by
/// content (timestamp, then position) and reduces orders in id order, so the
/// output does not depend on how the input was batched or ordered.
#[derive(Debug, Clone)]
pub struct TensorBuilder {
    road_ids: Vec<RoadId>,
    road_pos: HashMap<RoadId, u32>,
    pair_dt_max_s: i64,
    days: Option<(NaiveDate, NaiveDate)>,
    orders: HashMap<String, Vec<TrackPoint>>,
    points: u64,
}

impl TensorBuilder {
    pub fn new(mut road_ids: Vec<RoadId>, pair_dt_max_s: i64) -> Self {
        road_ids.sort_unstable();
        road_ids.dedup();
        let road_pos = road_ids.iter().enumerate().map(|(i, id)| (*id, i as u32)).collect();
        Self { road_ids, road_pos, pair_dt_max_s, days: None, orders: HashMap::new(), points: 0 }
    }

    /// Fixes the interval axis to the whole days `first..=last` instead of the
    /// observed span. Points outside it are ignored.
    pub fn with_days(mut self, first: NaiveDate, last: NaiveDate) -> Self {
        self.days = Some((first, last));
        self
    }

    pub fn points(&self) -> u64 {
        self.points
    }

    pub fn push(&mut self, p: MatchedPoint) {
        let Some(&road) = self.road_pos.get(&p.road_id) else {
            log::debug!("ignoring point on unknown road {}", p.road_id);
            return;
        };
        let track = TrackPoint { timestamp: p.record.timestamp, pos: p.record.position(), road, interval: p.interval };
        self.orders.entry(p.record.order_id).or_default().push(track);
        self.points += 1;
    }

    pub fn extend<I: IntoIterator<Item = MatchedPoint>>(&mut self, points: I) {
        for p in points {
            self.push(p);
        }
    }

    /// Folds a partial builder (e.g. from another worker) into this one.
    pub fn merge(&mut self, other: TensorBuilder) {
        for (order, mut track) in other.orders {
            self.orders.entry(order).or_default().append(&mut track);
        }
        self.points += other.points;
    }

    pub fn finish(self) -> (FlowMatrix, SpeedMatrix) {
        let span = self.days.or_else(|| {
            let days = self.orders.values().flatten().map(|t| t.interval.day);
            let (lo, hi) = days.fold((None, None), |(lo, hi): (Option<NaiveDate>, Option<NaiveDate>), d| {
                (Some(lo.map_or(d, |x| x.min(d))), Some(hi.map_or(d, |x| x.max(d))))
            });
            lo.zip(hi)
        });
        let intervals = span.map(|(a, b)| day_axis(a, b)).unwrap_or_default();
        let n_cols = intervals.len();
        let n_cells = self.road_ids.len() * n_cols;
        let column = |i: IntervalIndex| -> Option<usize> {
            let (first, last) = span?;
            if i.day < first || i.day > last {
                return None;
            }
            Some((i.day - first).num_days() as usize * SLOTS_PER_DAY + i.slot as usize)
        };

        let mut orders: Vec<(String, Vec<TrackPoint>)> = self.orders.into_iter().collect();
        orders.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        let dt_max = self.pair_dt_max_s;

        let contributions: Vec<(Vec<usize>, Vec<(usize, f64)>)> = orders
            .into_par_iter()
            .map(|(_, mut track)| {
                track.sort_by(|a, b| {
                    a.timestamp
                        .cmp(&b.timestamp)
                        .then(a.pos.lat.total_cmp(&b.pos.lat))
                        .then(a.pos.lon.total_cmp(&b.pos.lon))
                        .then(a.road.cmp(&b.road))
                });
                let mut cells: Vec<usize> = track
                    .iter()
                    .filter_map(|t| Some(t.road as usize * n_cols + column(t.interval)?))
                    .collect();
                cells.sort_unstable();
                cells.dedup();
                let pairs = track
                    .windows(2)
                    .filter(|w| w[0].road == w[1].road)
                    .filter_map(|w| {
                        let (_, _, v) = pair_speed(w[0].pos, w[0].timestamp, w[1].pos, w[1].timestamp, dt_max)?;
                        Some((w[0].road as usize * n_cols + column(w[0].interval)?, v))
                    })
                    .collect();
                (cells, pairs)
            })
            .collect();

        let mut flow = vec![0u32; n_cells];
        let mut sums = vec![0.0f64; n_cells];
        let mut counts = vec![0u32; n_cells];
        for (cells, pairs) in contributions {
            for c in cells {
                flow[c] += 1;
            }
            for (c, v) in pairs {
                sums[c] += v;
                counts[c] += 1;
            }
        }
        let speed: Vec<f64> =
            sums.iter().zip(&counts).map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 }).collect();

        let flow = FlowMatrix::from_values(self.road_ids.clone(), intervals.clone(), flow)
            .expect("builder axes are sorted and sized");
        let speed = SpeedMatrix::from_values(self.road_ids, intervals, speed).expect("builder axes are sorted and sized");
        (flow, speed)
    }
}

/// One-shot tensor construction over the given road axis.
pub fn build_tensors<I: IntoIterator<Item = MatchedPoint>>(
    matched: I,
    road_ids: Vec<RoadId>,
    pair_dt_max_s: i64,
) -> (FlowMatrix, SpeedMatrix) {
    let mut builder = TensorBuilder::new(road_ids, pair_dt_max_s);
    builder.extend(matched);
    builder.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleaningConfig {
    pub missing_fraction: f64,
    pub anomaly_kmh: f64,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self { missing_fraction: DEFAULT_MISSING_FRACTION, anomaly_kmh: DEFAULT_ANOMALY_KMH }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissingFilter {
    pub retained: SpeedMatrix,
    pub dropped: Vec<RoadId>,
}

fn is_missing(v: f64) -> bool {
    v == 0.0
}

/// Drops roads whose share of zero cells exceeds `max_missing_fraction`.
pub fn filter_missing(speeds: &SpeedMatrix, max_missing_fraction: f64) -> MissingFilter {
    let n = speeds.n_intervals();
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for (pos, (id, row)) in speeds.rows().enumerate() {
        let missing = row.iter().filter(|v| is_missing(**v)).count();
        let fraction = if n == 0 { 0.0 } else { missing as f64 / n as f64 };
        if fraction > max_missing_fraction {
            dropped.push(id);
        } else {
            keep.push(pos);
        }
    }
    if keep.is_empty() && speeds.n_roads() > 0 {
        log::warn!("missing-value filter dropped all {} roads; nothing left to analyse", speeds.n_roads());
    }
    MissingFilter { retained: speeds.select_rows(&keep), dropped }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interpolated {
    pub values: Vec<f64>,
    /// No observation at all; values were left untouched.
    pub all_zero: bool,
}

/// Fills zero runs: linearly between observed neighbours, by constant
/// extension at either end.
pub fn interpolate_missing(row: &[f64]) -> Interpolated {
    let observed: Vec<usize> = (0..row.len()).filter(|&i| !is_missing(row[i])).collect();
    let (Some(&first), Some(&last)) = (observed.first(), observed.last()) else {
        return Interpolated { values: row.to_vec(), all_zero: true };
    };
    let mut values = row.to_vec();
    values[..first].fill(row[first]);
    values[last + 1..].fill(row[last]);
    for w in observed.windows(2) {
        let (a, b) = (w[0], w[1]);
        let span = (b - a) as f64;
        for (k, v) in values.iter_mut().enumerate().take(b).skip(a + 1) {
            *v = row[a] + (row[b] - row[a]) * (k - a) as f64 / span;
        }
    }
    Interpolated { values, all_zero: false }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Repaired {
    pub values: Vec<f64>,
    pub anomaly_count: usize,
    /// Every value exceeded the threshold; values were clamped to it.
    pub all_anomalous: bool,
}

/// Replaces values above `threshold_kmh` with the mean of the nearest
/// non-anomalous neighbour on each side (a single neighbour at the edges).
pub fn repair_anomalies(row: &[f64], threshold_kmh: f64) -> Repaired {
    let anomalous = |v: f64| v > threshold_kmh;
    let anomaly_count = row.iter().filter(|v| anomalous(**v)).count();
    if anomaly_count == 0 {
        return Repaired { values: row.to_vec(), anomaly_count, all_anomalous: false };
    }
    if anomaly_count == row.len() {
        return Repaired { values: vec![threshold_kmh; row.len()], anomaly_count, all_anomalous: true };
    }
    let mut left = vec![None; row.len()];
    let mut last = None;
    for (i, &v) in row.iter().enumerate() {
        left[i] = last;
        if !anomalous(v) {
            last = Some(v);
        }
    }
    let mut values = row.to_vec();
    let mut next = None;
    for i in (0..row.len()).rev() {
        if anomalous(row[i]) {
            values[i] = match (left[i], next) {
                (Some(l), Some(r)) => (l + r) / 2.0,
                (Some(x), None) | (None, Some(x)) => x,
                (None, None) => unreachable!("row has a non-anomalous value"),
            };
        } else {
            next = Some(row[i]);
        }
    }
    Repaired { values, anomaly_count, all_anomalous: false }
}

/// Result of the full cleaning stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanedSpeeds {
    pub matrix: SpeedMatrix,
    /// Removed by the missing-value filter.
    pub dropped: Vec<RoadId>,
    /// Retained but with no observation at all (only possible at threshold 1).
    pub all_zero: Vec<RoadId>,
    /// Retained roads whose every value was anomalous.
    pub all_anomalous: Vec<RoadId>,
    pub anomaly_count: usize,
}

impl CleanedSpeeds {
    pub fn anomaly_rate(&self) -> f64 {
        let cells = self.matrix.values().len();
        if cells == 0 {
            0.0
        } else {
            self.anomaly_count as f64 / cells as f64
        }
    }
}

/// Filter, interpolate and repair a raw speed matrix. Anomalies are found
/// among observed values and filled together with the gaps, so interpolated
/// cells are never counted. Rows are independent and processed in parallel.
pub fn clean_speeds(speeds: &SpeedMatrix, config: &CleaningConfig) -> CleanedSpeeds {
    let MissingFilter { mut retained, dropped } = filter_missing(speeds, config.missing_fraction);
    let threshold = config.anomaly_kmh;
    let rows: Vec<(Interpolated, usize, bool)> = (0..retained.n_roads())
        .into_par_iter()
        .map(|r| {
            let row = retained.row(r);
            let observed = row.iter().filter(|&&v| v > 0.0).count();
            let anomalies = row.iter().filter(|&&v| v > threshold).count();
            let masked: Vec<f64> = row.iter().map(|&v| if v > threshold { 0.0 } else { v }).collect();
            let mut filled = interpolate_missing(&masked);
            let all_anomalous = observed > 0 && anomalies == observed;
            if all_anomalous {
                filled = Interpolated { values: vec![threshold; row.len()], all_zero: false };
            }
            (filled, anomalies, all_anomalous)
        })
        .collect();

    let mut out = CleanedSpeeds { matrix: SpeedMatrix::zeros(vec![], vec![]).unwrap(), dropped, all_zero: vec![], all_anomalous: vec![], anomaly_count: 0 };
    for (r, (filled, anomalies, all_anomalous)) in rows.into_iter().enumerate() {
        let id = retained.road_ids()[r];
        if filled.all_zero {
            out.all_zero.push(id);
            continue;
        }
        if all_anomalous {
            out.all_anomalous.push(id);
        }
        out.anomaly_count += anomalies;
        retained.row_mut(r).copy_from_slice(&filled.values);
    }
    out.matrix = retained;
    out
}
