//! Coordinate-shift correction and nearest-road labelling.
//!
//! The shift is a single dataset-wide translation estimated from a sample:
//! each sampled point is displaced to its nearest point on the nearest road,
//! and the per-axis median of those displacements is applied and refined
//! until the residual vanishes. A displacement only carries information
//! across the road it lands on, so the latitude median is taken over points
//! whose displacement is mostly north-south and the longitude median over
//! points whose displacement is mostly east-west.

use std::ops::Neg;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::LatLon;
use crate::ingest::{assign_interval, IntervalIndex, TraceRecord};
use crate::network::{RoadId, RoadNetwork};

/// Largest accepted shift per component, in degrees (~1.1 km).
pub const MAX_OFFSET_DEG: f64 = 0.01;
pub const DEFAULT_MIN_SAMPLE: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OffsetError {
    #[error("offset ({dlat}, {dlon}) exceeds the {MAX_OFFSET_DEG} degree cap; network and traces probably do not belong together")]
    OutOfCap { dlat: f64, dlon: f64 },
    #[error("offset sample has {got} usable points, need at least {need}")]
    SampleTooSmall { got: usize, need: usize },
    #[error("road network is empty")]
    EmptyNetwork,
}

/// Constant translation applied to every trace coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetVector {
    pub dlat: f64,
    pub dlon: f64,
}

impl OffsetVector {
    pub const ZERO: OffsetVector = OffsetVector { dlat: 0.0, dlon: 0.0 };

    pub fn new(dlat: f64, dlon: f64) -> Result<Self, OffsetError> {
        if !(dlat.abs() <= MAX_OFFSET_DEG && dlon.abs() <= MAX_OFFSET_DEG) {
            return Err(OffsetError::OutOfCap { dlat, dlon });
        }
        Ok(Self { dlat, dlon })
    }
}

impl Neg for OffsetVector {
    type Output = OffsetVector;

    fn neg(self) -> Self::Output {
        OffsetVector { dlat: -self.dlat, dlon: -self.dlon }
    }
}

/// A shift-corrected record labelled with its road.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPoint {
    pub record: TraceRecord,
    pub road_id: RoadId,
    pub match_dist_km: f64,
    pub interval: IntervalIndex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetConfig {
    pub min_sample: usize,
    pub max_iterations: usize,
    /// Stop once a refinement step is below this many degrees per component.
    pub tolerance_deg: f64,
}

impl Default for OffsetConfig {
    fn default() -> Self {
        Self { min_sample: DEFAULT_MIN_SAMPLE, max_iterations: 20, tolerance_deg: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetEstimate {
    pub offset: OffsetVector,
    pub iterations: usize,
    pub sample_size: usize,
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 { values[mid] } else { (values[mid - 1] + values[mid]) / 2.0 })
}

/// Estimates the translation that moves the sample onto the network.
pub fn estimate_offset(
    sample: &[TraceRecord],
    net: &RoadNetwork,
    config: &OffsetConfig,
) -> Result<OffsetEstimate, OffsetError> {
    if net.is_empty() {
        return Err(OffsetError::EmptyNetwork);
    }
    let points: Vec<LatLon> = sample.iter().map(TraceRecord::position).filter(LatLon::is_valid).collect();
    if points.len() < config.min_sample.max(1) {
        return Err(OffsetError::SampleTooSmall { got: points.len(), need: config.min_sample.max(1) });
    }

    let mut offset = OffsetVector::ZERO;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let displacements: Vec<(f64, f64, f64)> = points
            .par_iter()
            .filter_map(|p| {
                let moved = LatLon::new(p.lat + offset.dlat, p.lon + offset.dlon);
                if !moved.is_valid() {
                    return None;
                }
                let hit = net.nearest_unbounded(moved)?;
                Some((hit.point.lat - moved.lat, hit.point.lon - moved.lon, moved.lat.to_radians().cos()))
            })
            .collect();

        let mut north: Vec<f64> = Vec::new();
        let mut east: Vec<f64> = Vec::new();
        for &(dlat, dlon, cos_lat) in &displacements {
            let (ns, ew) = (dlat.abs(), dlon.abs() * cos_lat);
            if ns > ew {
                north.push(dlat);
            } else if ew > ns {
                east.push(dlon);
            }
        }
        let step_lat = median(&mut north).unwrap_or(0.0);
        let step_lon = median(&mut east).unwrap_or(0.0);
        offset.dlat += step_lat;
        offset.dlon += step_lon;
        if step_lat.abs() <= config.tolerance_deg && step_lon.abs() <= config.tolerance_deg {
            break;
        }
    }
    let offset = OffsetVector::new(offset.dlat, offset.dlon)?;
    Ok(OffsetEstimate { offset, iterations, sample_size: points.len() })
}

/// Translates every record; records leaving the geographic range are dropped
/// and counted.
pub fn apply_offset(records: Vec<TraceRecord>, offset: OffsetVector) -> (Vec<TraceRecord>, usize) {
    let before = records.len();
    let moved: Vec<TraceRecord> = records
        .into_iter()
        .filter_map(|mut r| {
            r.lat += offset.dlat;
            r.lon += offset.dlon;
            r.position().is_valid().then_some(r)
        })
        .collect();
    let skipped = before - moved.len();
    (moved, skipped)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchOutcome {
    pub matched: Vec<MatchedPoint>,
    pub unmatched: usize,
}

impl MatchOutcome {
    pub fn match_rate(&self) -> f64 {
        let total = self.matched.len() + self.unmatched;
        if total == 0 {
            1.0
        } else {
            self.matched.len() as f64 / total as f64
        }
    }
}

/// Labels each (already corrected) record with its nearest road within the gate.
pub fn match_batch(
    records: Vec<TraceRecord>,
    net: &RoadNetwork,
    max_dist_km: f64,
    tz_offset_s: i64,
) -> MatchOutcome {
    let labelled: Vec<Option<MatchedPoint>> = records
        .into_par_iter()
        .map(|record| {
            let hit = net.nearest_segment(record.position(), max_dist_km)?;
            let interval = assign_interval(record.timestamp, tz_offset_s);
            Some(MatchedPoint { record, road_id: hit.road_id, match_dist_km: hit.distance_km, interval })
        })
        .collect();
    let total = labelled.len();
    let matched: Vec<MatchedPoint> = labelled.into_iter().flatten().collect();
    MatchOutcome { unmatched: total - matched.len(), matched }
}
