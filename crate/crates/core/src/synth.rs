//! Deterministic synthetic networks and traces with known ground truth.
//!
//! A scenario is a rectangular grid of straight roads. Orders start at
//! times drawn from a per-slot demand profile, random-walk a few blocks at
//! each road's constant truth speed, and ping every `ping_period_s` seconds.
//! Pings closer than [`JUNCTION_MARGIN_KM`] to a grid node are not emitted,
//! so every emitted ping has exactly one nearest road.
//!
//! Ground truth is computed from the generator's own bookkeeping: flow from
//! the generating road of each ping, speed from pair means over the noiseless
//! pings, and the commanded ("kinematic") speed for comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::NaiveDate;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine, LatLon, KM_PER_DEGREE};
use crate::ingest::{assign_interval, IntervalIndex, TraceRecord, INTERVAL_SECONDS, SLOTS_PER_DAY};
use crate::matching::{OffsetVector, MAX_OFFSET_DEG};
use crate::matrix::{day_axis, FlowMatrix, MatrixValue, SpatioTemporalMatrix, SpeedMatrix};
use crate::network::{RoadId, RoadNetwork, RoadSegment};
use crate::pattern::{DEFAULT_ANOMALY_KMH, DEFAULT_PAIR_DT_MAX_S};

/// Pings within this distance of a grid node are suppressed.
pub const JUNCTION_MARGIN_KM: f64 = 0.002;
/// Coordinates are rounded to this many decimals, as in the written CSV.
const COORD_DECIMALS: i32 = 7;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    Config(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompareError {
    #[error("matrix axes differ")]
    AxisMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub center_slot: f64,
    pub width_slots: f64,
    pub height: f64,
}

/// Relative order-generation rate per 15-minute slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DemandProfile {
    Uniform,
    /// Gaussian bumps over a constant base rate.
    Peaks { base: f64, peaks: Vec<Peak> },
    Custom { weights: Vec<f64> },
}

impl DemandProfile {
    /// Morning and evening commute peaks.
    pub fn bimodal() -> Self {
        DemandProfile::Peaks {
            base: 0.1,
            peaks: vec![
                Peak { center_slot: 32.0, width_slots: 4.0, height: 1.0 },
                Peak { center_slot: 72.0, width_slots: 4.0, height: 1.0 },
            ],
        }
    }

    /// Four demand peaks across the day.
    pub fn multi_peak() -> Self {
        DemandProfile::Peaks {
            base: 0.05,
            peaks: vec![
                Peak { center_slot: 34.0, width_slots: 3.0, height: 1.0 },
                Peak { center_slot: 48.0, width_slots: 3.0, height: 0.8 },
                Peak { center_slot: 72.0, width_slots: 3.0, height: 1.0 },
                Peak { center_slot: 88.0, width_slots: 3.0, height: 0.7 },
            ],
        }
    }

    pub fn weights(&self) -> Result<Vec<f64>, SynthError> {
        let w: Vec<f64> = match self {
            DemandProfile::Uniform => vec![1.0; SLOTS_PER_DAY],
            DemandProfile::Peaks { base, peaks } => (0..SLOTS_PER_DAY)
                .map(|s| {
                    let x = s as f64 + 0.5;
                    base + peaks
                        .iter()
                        .map(|p| p.height * (-0.5 * ((x - p.center_slot) / p.width_slots).powi(2)).exp())
                        .sum::<f64>()
                })
                .collect(),
            DemandProfile::Custom { weights } => {
                if weights.len() != SLOTS_PER_DAY {
                    return Err(SynthError::Config(format!("custom profile needs {SLOTS_PER_DAY} weights")));
                }
                weights.clone()
            }
        };
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(SynthError::Config("demand weights must be non-negative with a positive sum".into()));
        }
        Ok(w)
    }

    /// Splits `total` orders across slots by largest remainder.
    pub fn allocate(&self, total: usize) -> Result<Vec<usize>, SynthError> {
        let w = self.weights()?;
        let sum: f64 = w.iter().sum();
        let exact: Vec<f64> = w.iter().map(|x| x / sum * total as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut order: Vec<usize> = (0..SLOTS_PER_DAY).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let missing = total - counts.iter().sum::<usize>();
        for &s in order.iter().take(missing) {
            counts[s] += 1;
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Node rows (north-south extent).
    pub rows: usize,
    /// Node columns (east-west extent).
    pub cols: usize,
    pub segment_km: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
}

/// Full description of a synthetic data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub seed: u64,
    pub grid: GridSpec,
    pub start_date: NaiveDate,
    pub days: usize,
    pub orders_per_day: usize,
    pub drivers: usize,
    pub demand_profile: DemandProfile,
    /// Per-road truth speeds are drawn uniformly from this range.
    pub speed_kmh: (f64, f64),
    /// Blocks driven per order.
    pub trip_segments: (usize, usize),
    pub ping_period_s: i64,
    pub noise_std_deg: f64,
    pub injected_offset: OffsetVector,
    /// Share of non-zero truth speed cells replaced by anomalous values.
    pub anomaly_rate: f64,
    pub tz_offset_s: i64,
    pub pair_dt_max_s: i64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 1,
            grid: GridSpec { rows: 9, cols: 9, segment_km: 0.5, origin_lat: 30.60, origin_lon: 104.00 },
            start_date: NaiveDate::from_ymd_opt(2016, 10, 1).expect("valid date"),
            days: 1,
            orders_per_day: 200,
            drivers: 60,
            demand_profile: DemandProfile::bimodal(),
            speed_kmh: (20.0, 60.0),
            trip_segments: (3, 8),
            ping_period_s: 3,
            noise_std_deg: 0.0,
            injected_offset: OffsetVector::ZERO,
            anomaly_rate: 0.0,
            tz_offset_s: 8 * 3600,
            pair_dt_max_s: DEFAULT_PAIR_DT_MAX_S,
        }
    }
}

impl Scenario {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        let g = &self.grid;
        if g.rows == 0 || g.cols == 0 || g.rows * g.cols < 2 {
            return bad("grid needs at least two nodes");
        }
        if !(g.segment_km > 2.0 * JUNCTION_MARGIN_KM) {
            return bad("segment length too short");
        }
        if !LatLon::new(g.origin_lat, g.origin_lon).is_valid() {
            return bad("grid origin outside geographic range");
        }
        let (lo, hi) = self.speed_kmh;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad("speeds must be positive with min <= max");
        }
        if self.days == 0 {
            return bad("days must be positive");
        }
        if self.drivers == 0 && self.orders_per_day > 0 {
            return bad("drivers must be positive");
        }
        if self.trip_segments.0 == 0 || self.trip_segments.1 < self.trip_segments.0 {
            return bad("trip segment range must be positive with min <= max");
        }
        if self.ping_period_s <= 0 {
            return bad("ping period must be positive");
        }
        if !(self.noise_std_deg >= 0.0 && self.noise_std_deg.is_finite()) {
            return bad("noise must be non-negative");
        }
        OffsetVector::new(self.injected_offset.dlat, self.injected_offset.dlon)
            .map_err(|_| SynthError::Config(format!("injected offset exceeds {MAX_OFFSET_DEG} degrees")))?;
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return bad("anomaly rate must lie in [0, 1]");
        }
        self.demand_profile.weights()?;
        Ok(())
    }
}

/// Known answers for a generated data set.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub flow: FlowMatrix,
    /// Pair-mean speeds over noiseless pings with generating-road labels.
    pub speed: SpeedMatrix,
    /// Commanded road speed wherever `speed` is non-zero.
    pub kinematic_speed: SpeedMatrix,
    pub road_speed_kmh: BTreeMap<RoadId, f64>,
    pub records: usize,
    pub orders: usize,
    /// `speed` with anomalies injected at `anomaly_rate`, and the altered cells.
    pub anomalous_speed: Option<(SpeedMatrix, Vec<(usize, usize)>)>,
}

/// Generated network, trace records (in file order) and ground truth.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub network: RoadNetwork,
    pub records: Vec<TraceRecord>,
    pub truth: GroundTruth,
}

impl Synthetic {
    /// Trace CSV in the default column order, with header.
    pub fn write_traces<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_traces(&self.records, out)
    }
}

pub fn write_traces<W: Write>(records: &[TraceRecord], out: W) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(out);
    writeln!(out, "driver_id,order_id,timestamp,lon,lat")?;
    for r in records {
        writeln!(out, "{},{},{},{:.7},{:.7}", r.driver_id, r.order_id, r.timestamp, r.lon, r.lat)?;
    }
    out.flush()
}

fn round_coord(x: f64) -> f64 {
    let k = 10f64.powi(COORD_DECIMALS);
    (x * k).round() / k
}

struct Grid {
    spec: GridSpec,
    lat_step: f64,
    lon_step: f64,
}

impl Grid {
    fn new(spec: GridSpec) -> Self {
        let lat_step = spec.segment_km / KM_PER_DEGREE;
        let lon_step = spec.segment_km / (KM_PER_DEGREE * spec.origin_lat.to_radians().cos());
        Self { spec, lat_step, lon_step }
    }

    fn node(&self, r: usize, c: usize) -> LatLon {
        LatLon::new(
            round_coord(self.spec.origin_lat + r as f64 * self.lat_step),
            round_coord(self.spec.origin_lon + c as f64 * self.lon_step),
        )
    }

    fn horizontal_edges(&self) -> usize {
        self.spec.rows * (self.spec.cols - 1)
    }

    /// Road id of the edge between two adjacent nodes.
    fn edge(&self, a: (usize, usize), b: (usize, usize)) -> RoadId {
        let ((r0, c0), (r1, c1)) = if a <= b { (a, b) } else { (b, a) };
        let idx = if r0 == r1 {
            debug_assert_eq!(c1, c0 + 1);
            r0 * (self.spec.cols - 1) + c0
        } else {
            debug_assert_eq!((r1, c1), (r0 + 1, c0));
            self.horizontal_edges() + r0 * self.spec.cols + c0
        };
        RoadId(idx as u64 + 1)
    }

    fn neighbours(&self, (r, c): (usize, usize)) -> Vec<(usize, usize)> {
        let mut n = Vec::with_capacity(4);
        if r > 0 {
            n.push((r - 1, c));
        }
        if r + 1 < self.spec.rows {
            n.push((r + 1, c));
        }
        if c > 0 {
            n.push((r, c - 1));
        }
        if c + 1 < self.spec.cols {
            n.push((r, c + 1));
        }
        n
    }

    fn segments(&self) -> Vec<RoadSegment> {
        let mut segs = Vec::new();
        for r in 0..self.spec.rows {
            for c in 0..self.spec.cols {
                for next in [(r, c + 1), (r + 1, c)] {
                    if next.0 < self.spec.rows && next.1 < self.spec.cols {
                        let seg = RoadSegment::new(
                            self.edge((r, c), next),
                            vec![self.node(r, c), self.node(next.0, next.1)],
                            None,
                            f64::INFINITY,
                        )
                        .expect("grid edges have positive length");
                        segs.push(seg);
                    }
                }
            }
        }
        segs
    }
}

struct Ping {
    record: TraceRecord,
    truth_pos: LatLon,
    road: RoadId,
}

/// Builds the network, traces and ground truth for a scenario.
pub fn generate(scenario: &Scenario) -> Result<Synthetic, SynthError> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let grid = Grid::new(scenario.grid);
    let network = RoadNetwork::new(grid.segments()).expect("generated ids are unique");

    let (lo, hi) = scenario.speed_kmh;
    let road_speed_kmh: BTreeMap<RoadId, f64> = network
        .segments()
        .iter()
        .map(|s| (s.id, if hi > lo { rng.random_range(lo..hi) } else { lo }))
        .collect();

    let noise = Normal::new(0.0, scenario.noise_std_deg).expect("validated noise");
    let slot_counts = scenario.demand_profile.allocate(scenario.orders_per_day)?;
    let local_midnight = |day: NaiveDate| {
        day.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp() - scenario.tz_offset_s
    };

    let mut pings: Vec<Ping> = Vec::new();
    let mut order_no = 0usize;
    for day_idx in 0..scenario.days {
        let day = scenario.start_date + chrono::Days::new(day_idx as u64);
        let midnight = local_midnight(day);
        for (slot, &count) in slot_counts.iter().enumerate() {
            for _ in 0..count {
                let order_id = format!("o{order_no:07}");
                let driver_id = format!("d{:05}", rng.random_range(0..scenario.drivers));
                order_no += 1;
                let t0 = midnight + slot as i64 * INTERVAL_SECONDS + rng.random_range(0..INTERVAL_SECONDS);
                drive_order(scenario, &grid, &network, &road_speed_kmh, &mut rng, &noise, t0, &driver_id, &order_id, &mut pings);
            }
        }
    }
    // trips running past the last day are cut at midnight
    let end = local_midnight(scenario.start_date + chrono::Days::new(scenario.days as u64));
    pings.retain(|p| p.record.timestamp < end);
    // file order: by time, then order id
    pings.sort_by(|a, b| {
        a.record.timestamp.cmp(&b.record.timestamp).then_with(|| a.record.order_id.cmp(&b.record.order_id))
    });

    let first = scenario.start_date;
    let last = first + chrono::Days::new(scenario.days as u64 - 1);
    let truth = ground_truth(scenario, &network, &road_speed_kmh, &pings, order_no, first, last, &mut rng);
    let records = pings.into_iter().map(|p| p.record).collect();
    Ok(Synthetic { network, records, truth })
}

#[allow(clippy::too_many_arguments)]
fn drive_order(
    scenario: &Scenario,
    grid: &Grid,
    network: &RoadNetwork,
    road_speed: &BTreeMap<RoadId, f64>,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
    t0: i64,
    driver_id: &str,
    order_id: &str,
    out: &mut Vec<Ping>,
) {
    let (min_seg, max_seg) = scenario.trip_segments;
    let n_seg = rng.random_range(min_seg..=max_seg);
    let mut node = (rng.random_range(0..grid.spec.rows), rng.random_range(0..grid.spec.cols));
    let mut prev: Option<(usize, usize)> = None;

    // (from, to, road, length, start time, duration) for each driven edge
    let mut legs = Vec::with_capacity(n_seg);
    let mut t = t0 as f64;
    for _ in 0..n_seg {
        let mut options = grid.neighbours(node);
        if options.len() > 1 {
            options.retain(|n| Some(*n) != prev);
        }
        let next = options[rng.random_range(0..options.len())];
        let road = grid.edge(node, next);
        let length = network.get(road).expect("grid edge").length_km;
        let duration = length / road_speed[&road] * 3600.0;
        legs.push((grid.node(node.0, node.1), grid.node(next.0, next.1), road, length, t, duration));
        t += duration;
        prev = Some(node);
        node = next;
    }
    let t_end = t;

    let mut leg = 0;
    let mut ts = t0;
    while (ts as f64) <= t_end {
        while leg + 1 < legs.len() && ts as f64 >= legs[leg].4 + legs[leg].5 {
            leg += 1;
        }
        let (a, b, road, length, start, duration) = legs[leg];
        let f = ((ts as f64 - start) / duration).clamp(0.0, 1.0);
        if f * length >= JUNCTION_MARGIN_KM && (1.0 - f) * length >= JUNCTION_MARGIN_KM {
            let lat = a.lat + f * (b.lat - a.lat);
            let lon = a.lon + f * (b.lon - a.lon);
            let truth_pos = LatLon::new(round_coord(lat), round_coord(lon));
            let (nlat, nlon) = if scenario.noise_std_deg > 0.0 {
                (noise.sample(rng), noise.sample(rng))
            } else {
                (0.0, 0.0)
            };
            let off = scenario.injected_offset;
            out.push(Ping {
                record: TraceRecord {
                    driver_id: driver_id.to_string(),
                    order_id: order_id.to_string(),
                    timestamp: ts,
                    lat: round_coord(lat + nlat + off.dlat),
                    lon: round_coord(lon + nlon + off.dlon),
                },
                truth_pos,
                road,
            });
        }
        ts += scenario.ping_period_s;
    }
}

#[allow(clippy::too_many_arguments)]
fn ground_truth(
    scenario: &Scenario,
    network: &RoadNetwork,
    road_speed: &BTreeMap<RoadId, f64>,
    pings: &[Ping],
    orders: usize,
    first: NaiveDate,
    last: NaiveDate,
    rng: &mut ChaCha8Rng,
) -> GroundTruth {
    let roads = network.road_ids();
    let axis = day_axis(first, last);
    let cell = |road: RoadId, interval: IntervalIndex| -> (usize, usize) {
        (
            roads.binary_search(&road).expect("known road"),
            axis.binary_search(&interval).expect("interval inside scenario days"),
        )
    };

    let mut visits: BTreeSet<((usize, usize), &str)> = BTreeSet::new();
    let mut tracks: BTreeMap<&str, Vec<&Ping>> = BTreeMap::new();
    for p in pings {
        let interval = assign_interval(p.record.timestamp, scenario.tz_offset_s);
        visits.insert((cell(p.road, interval), p.record.order_id.as_str()));
        tracks.entry(p.record.order_id.as_str()).or_default().push(p);
    }

    let mut flow = FlowMatrix::zeros(roads.clone(), axis.clone()).expect("sorted axes");
    for ((r, c), _) in &visits {
        flow.set(*r, *c, flow.get(*r, *c) + 1);
    }

    let mut sums: BTreeMap<(usize, usize), (f64, u32)> = BTreeMap::new();
    for track in tracks.values() {
        for w in track.windows(2) {
            let dt = w[1].record.timestamp - w[0].record.timestamp;
            if w[0].road != w[1].road || dt <= 0 || dt > scenario.pair_dt_max_s {
                continue;
            }
            let v = haversine(w[0].truth_pos, w[1].truth_pos) / (dt as f64 / 3600.0);
            let interval = assign_interval(w[0].record.timestamp, scenario.tz_offset_s);
            let e = sums.entry(cell(w[0].road, interval)).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    let mut speed = SpeedMatrix::zeros(roads.clone(), axis.clone()).expect("sorted axes");
    let mut kinematic = SpeedMatrix::zeros(roads.clone(), axis).expect("sorted axes");
    for (&(r, c), &(sum, n)) in &sums {
        speed.set(r, c, sum / n as f64);
        kinematic.set(r, c, road_speed[&roads[r]]);
    }

    let anomalous_speed = (scenario.anomaly_rate > 0.0).then(|| {
        let mut m = speed.clone();
        let cells = inject_anomalies(&mut m, scenario.anomaly_rate, DEFAULT_ANOMALY_KMH, rng);
        (m, cells)
    });

    GroundTruth {
        flow,
        speed,
        kinematic_speed: kinematic,
        road_speed_kmh: road_speed.clone(),
        records: pings.len(),
        orders,
        anomalous_speed,
    }
}

/// Overwrites `round(rate * nonzero cells)` distinct non-zero cells with
/// values in `(1.5, 4) * threshold_kmh`. Returns the (road, interval)
/// positions, sorted.
pub fn inject_anomalies<R: Rng>(
    speeds: &mut SpeedMatrix,
    rate: f64,
    threshold_kmh: f64,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let n_cols = speeds.n_intervals();
    let nonzero: Vec<usize> = speeds.values().iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
    let k = (rate * nonzero.len() as f64).round() as usize;
    let mut cells: Vec<(usize, usize)> = sample(rng, nonzero.len(), k.min(nonzero.len()))
        .into_iter()
        .map(|i| (nonzero[i] / n_cols, nonzero[i] % n_cols))
        .collect();
    cells.sort_unstable();
    for &(r, c) in &cells {
        speeds.set(r, c, threshold_kmh * rng.random_range(1.5..4.0));
    }
    cells
}

/// Cell-wise comparison of an estimate against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub cells: usize,
    pub max_abs: f64,
    pub mean_abs: f64,
    /// Relative errors are taken over cells where the truth is non-zero.
    pub max_rel: f64,
    pub mean_rel: f64,
    /// Cells where exactly one of estimate and truth is zero.
    pub support_mismatch: usize,
    pub exact_match: bool,
}

pub fn compare<T>(estimated: &SpatioTemporalMatrix<T>, truth: &SpatioTemporalMatrix<T>) -> Result<ErrorReport, CompareError>
where
    T: MatrixValue + PartialEq + Into<f64>,
{
    if estimated.road_ids() != truth.road_ids() || estimated.intervals() != truth.intervals() {
        return Err(CompareError::AxisMismatch);
    }
    let mut report = ErrorReport {
        cells: truth.values().len(),
        max_abs: 0.0,
        mean_abs: 0.0,
        max_rel: 0.0,
        mean_rel: 0.0,
        support_mismatch: 0,
        exact_match: estimated.values() == truth.values(),
    };
    let (mut abs_sum, mut rel_sum, mut rel_n) = (0.0, 0.0, 0usize);
    for (&e, &t) in estimated.values().iter().zip(truth.values()) {
        let (e, t): (f64, f64) = (e.into(), t.into());
        let abs = (e - t).abs();
        abs_sum += abs;
        report.max_abs = report.max_abs.max(abs);
        if (e == 0.0) != (t == 0.0) {
            report.support_mismatch += 1;
        }
        if t != 0.0 {
            let rel = abs / t.abs();
            rel_sum += rel;
            rel_n += 1;
            report.max_rel = report.max_rel.max(rel);
        }
    }
    if report.cells > 0 {
        report.mean_abs = abs_sum / report.cells as f64;
    }
    if rel_n > 0 {
        report.mean_rel = rel_sum / rel_n as f64;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_road() -> Scenario {
        Scenario {
            grid: GridSpec { rows: 1, cols: 2, segment_km: 2.0, origin_lat: 30.6, origin_lon: 104.0 },
            orders_per_day: 1,
            drivers: 1,
            demand_profile: DemandProfile::Uniform,
            speed_kmh: (36.0, 36.0),
            trip_segments: (1, 1),
            ..Scenario::default()
        }
    }

    #[test]
    fn pings_are_thirty_metres_apart_at_36_kmh() {
        let syn = generate(&straight_road()).unwrap();
        assert!(syn.records.len() > 60);
        for w in syn.records.windows(2) {
            assert_eq!(w[1].timestamp - w[0].timestamp, 3);
            let d = haversine(w[0].position(), w[1].position());
            assert!((d - 0.030).abs() < 1e-4, "{d}");
        }
        assert_eq!(syn.truth.records, syn.records.len());
        assert_eq!(syn.truth.orders, 1);
    }

    #[test]
    fn same_seed_same_bytes() {
        let sc = Scenario { noise_std_deg: 1e-5, ..Scenario::default() };
        let write = |s: &Synthetic| {
            let mut buf = Vec::new();
            s.write_traces(&mut buf).unwrap();
            (buf, s.network.to_geojson().to_string())
        };
        let a = generate(&sc).unwrap();
        let b = generate(&sc).unwrap();
        assert_eq!(write(&a), write(&b));
        let c = generate(&Scenario { seed: 2, ..sc }).unwrap();
        assert_ne!(write(&a).0, write(&c).0);
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let zero_speed = Scenario { speed_kmh: (0.0, 0.0), ..Scenario::default() };
        assert!(matches!(generate(&zero_speed), Err(SynthError::Config(_))));
        let empty = Scenario { grid: GridSpec { rows: 1, cols: 1, ..Scenario::default().grid }, ..Scenario::default() };
        assert!(generate(&empty).is_err());
        let big_shift = Scenario { injected_offset: OffsetVector { dlat: 0.05, dlon: 0.0 }, ..Scenario::default() };
        assert!(generate(&big_shift).is_err());
    }

    #[test]
    fn grid_has_expected_roads() {
        let syn = generate(&Scenario::default()).unwrap();
        assert_eq!(syn.network.len(), 2 * 9 * 8);
        let ids = syn.network.road_ids();
        assert_eq!(ids.first(), Some(&RoadId(1)));
        assert_eq!(ids.last(), Some(&RoadId(144)));
    }

    #[test]
    fn kinematic_truth_close_to_pair_truth() {
        let syn = generate(&Scenario::default()).unwrap();
        let report = compare(&syn.truth.speed, &syn.truth.kinematic_speed).unwrap();
        assert_eq!(report.support_mismatch, 0);
        assert!(report.max_rel < 0.02, "{report:?}");
    }

    #[test]
    fn four_peak_profile_shows_in_flow() {
        let sc = Scenario {
            orders_per_day: 4000,
            demand_profile: DemandProfile::multi_peak(),
            trip_segments: (1, 2),
            speed_kmh: (30.0, 40.0),
            ..Scenario::default()
        };
        let syn = generate(&sc).unwrap();
        let columns: Vec<f64> =
            (0..96).map(|c| syn.truth.flow.column(c).map(f64::from).sum()).collect();
        // profile integration oracle: expected distinct-order visits per slot
        let weights = sc.demand_profile.weights().unwrap();
        let total: f64 = weights.iter().sum();
        let expected: Vec<f64> = weights.iter().map(|w| w / total * sc.orders_per_day as f64 * 1.5).collect();
        let corr = correlation(&columns, &expected);
        assert!(corr > 0.95, "correlation {corr}");

        let smooth: Vec<f64> = (0..96usize)
            .map(|i| columns[i.saturating_sub(1)..(i + 2).min(96)].iter().sum::<f64>())
            .collect();
        let peaks: Vec<usize> = (1..95)
            .filter(|&i| smooth[i] > smooth[i - 1] && smooth[i] >= smooth[i + 1] && smooth[i] > 0.3 * max(&smooth))
            .collect();
        assert_eq!(peaks.len(), 4, "{peaks:?}");
        for (p, centre) in peaks.iter().zip([34, 48, 72, 88]) {
            assert!((*p as i64 - centre).abs() <= 2, "{peaks:?}");
        }
    }

    fn max(v: &[f64]) -> f64 {
        v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn allocation_is_exact() {
        let counts = DemandProfile::bimodal().allocate(1234).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), 1234);
        assert_eq!(DemandProfile::Uniform.allocate(96).unwrap(), vec![1; 96]);
        assert!(DemandProfile::Custom { weights: vec![1.0; 3] }.weights().is_err());
    }

    #[test]
    fn anomaly_injection_bookkeeping() {
        let sc = Scenario { anomaly_rate: 0.05, orders_per_day: 400, ..Scenario::default() };
        let syn = generate(&sc).unwrap();
        let (m, cells) = syn.truth.anomalous_speed.clone().unwrap();
        let nonzero = syn.truth.speed.values().iter().filter(|v| **v != 0.0).count();
        assert_eq!(cells.len(), (0.05 * nonzero as f64).round() as usize);
        let above = m.values().iter().filter(|v| **v > 70.0).count();
        assert_eq!(above, cells.len());
    }

    #[test]
    fn compare_examples() {
        let day = NaiveDate::from_ymd_opt(2016, 10, 1).unwrap();
        let a = FlowMatrix::from_values(vec![RoadId(1)], day_axis(day, day), vec![2; 96]).unwrap();
        let same = compare(&a, &a).unwrap();
        assert!(same.exact_match && same.max_abs == 0.0 && same.mean_abs == 0.0);
        let mut b = a.clone();
        b.set(0, 5, 3);
        let off = compare(&b, &a).unwrap();
        assert!(!off.exact_match);
        assert_eq!(off.max_abs, 1.0);
        let other = FlowMatrix::from_values(vec![RoadId(2)], day_axis(day, day), vec![2; 96]).unwrap();
        assert_eq!(compare(&a, &other), Err(CompareError::AxisMismatch));
    }
}
