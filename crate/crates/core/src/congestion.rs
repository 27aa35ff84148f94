//! Congestion scores and day-to-day dispersion analytics.
//!
//! Per road and interval the score is `max(TH/RE - 1, 0)` where TH is the
//! road's free-flow speed and RE its mean speed. The network score for an
//! interval is the length-weighted mean over scored roads.
//!
//! The fitting index compares several days of one scenario slot by slot:
//! `1 - sum (y_dj - ybar_j)^2 / sum (y_dj - Ybar)^2`, where `ybar_j` is the
//! cross-day mean at slot `j`, `Ybar` the grand mean, and both sums run over
//! every (day, slot) sample.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{IntervalIndex, SLOTS_PER_DAY};
use crate::matrix::{FlowMatrix, SpatioTemporalMatrix, SpeedMatrix};
use crate::network::{RoadId, RoadNetwork};

/// Lower clamp for estimated free-flow speeds.
pub const MIN_FREE_FLOW_KMH: f64 = 5.0;
pub const FREE_FLOW_PERCENTILE: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CongestionError {
    #[error("score undefined for free-flow {free_flow} km/h and speed {speed} km/h")]
    UndefinedScore { free_flow: f64, speed: f64 },
    #[error("fitting index needs at least 2 days, got {0}")]
    TooFewDays(usize),
    #[error("day series have different lengths")]
    RaggedDays,
    #[error("date {0} appears in more than one scenario")]
    OverlappingScenarios(NaiveDate),
}

/// Per-road, per-interval congestion score.
pub fn inrix_score(free_flow_kmh: f64, speed_kmh: f64) -> Result<f64, CongestionError> {
    if !(free_flow_kmh > 0.0 && speed_kmh > 0.0) {
        return Err(CongestionError::UndefinedScore { free_flow: free_flow_kmh, speed: speed_kmh });
    }
    Ok((free_flow_kmh / speed_kmh - 1.0).max(0.0))
}

/// Length-weighted mean of the defined scores; `None` if no road is scored.
pub fn network_inrix(scores: &[Option<f64>], lengths_km: &[f64]) -> Option<f64> {
    debug_assert_eq!(scores.len(), lengths_km.len());
    let (mut num, mut den) = (0.0, 0.0);
    for (s, l) in scores.iter().zip(lengths_km) {
        if let Some(s) = s {
            num += l * s;
            den += l;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// 85th percentile (linear interpolation between order statistics) clamped to
/// `[5, max_kmh]`. `None` when the row has no positive observation.
pub fn estimate_free_flow(speed_row: &[f64], max_kmh: f64) -> Option<f64> {
    let mut v: Vec<f64> = speed_row.iter().copied().filter(|x| *x > 0.0).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * FREE_FLOW_PERCENTILE;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let p = v[lo] + (v[hi] - v[lo]) * (h - lo as f64);
    Some(p.clamp(MIN_FREE_FLOW_KMH, max_kmh))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeFlowSource {
    Supplied,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeFlow {
    pub road_id: RoadId,
    pub kmh: f64,
    pub source: FreeFlowSource,
}

/// Scores for every retained road plus the network series.
#[derive(Debug, Clone, PartialEq)]
pub struct CongestionSeries {
    /// Scores of the roads that could be scored.
    pub per_road: SpatioTemporalMatrix<f64>,
    /// Network score per interval of `per_road`'s axis.
    pub network: Vec<Option<f64>>,
    pub free_flow: Vec<FreeFlow>,
    /// Retained roads left out of every interval (no usable speed or free-flow).
    pub excluded: Vec<RoadId>,
}

impl CongestionSeries {
    pub fn intervals(&self) -> &[IntervalIndex] {
        self.per_road.intervals()
    }
}

/// Scores a cleaned speed matrix against the network.
pub fn compute_congestion(speeds: &SpeedMatrix, net: &RoadNetwork, anomaly_kmh: f64) -> CongestionSeries {
    let rows: Vec<Option<(FreeFlow, Vec<f64>, f64)>> = speeds
        .rows()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(id, row)| {
            let seg = net.get(id)?;
            let free_flow = match seg.free_flow_kmh {
                Some(kmh) => FreeFlow { road_id: id, kmh, source: FreeFlowSource::Supplied },
                None => FreeFlow { road_id: id, kmh: estimate_free_flow(row, anomaly_kmh)?, source: FreeFlowSource::Estimated },
            };
            let scores = row.iter().map(|&re| inrix_score(free_flow.kmh, re)).collect::<Result<Vec<_>, _>>().ok()?;
            Some((free_flow, scores, seg.length_km))
        })
        .collect();

    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut lengths = Vec::new();
    let mut free_flow = Vec::new();
    let mut excluded = Vec::new();
    for (id, row) in speeds.road_ids().iter().zip(rows) {
        match row {
            Some((ff, scores, len)) => {
                ids.push(*id);
                values.extend(scores);
                lengths.push(len);
                free_flow.push(ff);
            }
            None => excluded.push(*id),
        }
    }
    if !excluded.is_empty() {
        log::warn!("{} roads excluded from congestion scoring", excluded.len());
    }
    let per_road = SpatioTemporalMatrix::from_values(ids, speeds.intervals().to_vec(), values)
        .expect("subset of a valid matrix");
    let network = (0..per_road.n_intervals())
        .map(|c| {
            let scores: Vec<Option<f64>> = per_road.column(c).map(Some).collect();
            network_inrix(&scores, &lengths)
        })
        .collect();
    CongestionSeries { per_road, network, free_flow, excluded }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittingIndex {
    pub value: f64,
    /// Every sample was identical; the value is defined as 1.
    pub degenerate: bool,
}

/// Dispersion of same-scenario day series around their slot-wise means.
pub fn fitting_index(days: &[Vec<f64>]) -> Result<FittingIndex, CongestionError> {
    if days.len() < 2 {
        return Err(CongestionError::TooFewDays(days.len()));
    }
    let slots = days[0].len();
    if days.iter().any(|d| d.len() != slots) {
        return Err(CongestionError::RaggedDays);
    }
    let n_days = days.len() as f64;
    let slot_mean: Vec<f64> = (0..slots).map(|j| days.iter().map(|d| d[j]).sum::<f64>() / n_days).collect();
    let grand = days.iter().flatten().sum::<f64>() / (n_days * slots as f64);
    let mut residual = 0.0;
    let mut total = 0.0;
    for d in days {
        for (j, &y) in d.iter().enumerate() {
            residual += (y - slot_mean[j]).powi(2);
            total += (y - grand).powi(2);
        }
    }
    if total == 0.0 {
        return Ok(FittingIndex { value: 1.0, degenerate: true });
    }
    Ok(FittingIndex { value: 1.0 - residual / total, degenerate: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalized {
    pub values: Vec<f64>,
    /// Constant input; all outputs are 0.
    pub degenerate: bool,
}

/// Per-day min-max scaling onto [0, 1].
pub fn min_max_normalize(values: &[f64]) -> Normalized {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return Normalized { values: vec![0.0; values.len()], degenerate: true };
    }
    Normalized { values: values.iter().map(|x| (x - min) / range).collect(), degenerate: false }
}

/// One day's 96-slot series; `None` marks slots without a value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyProfile {
    pub day: NaiveDate,
    pub values: Vec<Option<f64>>,
    pub normalized: Option<Vec<f64>>,
}

impl DailyProfile {
    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    /// Fills `normalized` when every slot has a value.
    pub fn normalize(&mut self) -> Option<bool> {
        let values: Option<Vec<f64>> = self.values.iter().copied().collect();
        let n = min_max_normalize(&values?);
        self.normalized = Some(n.values);
        Some(n.degenerate)
    }
}

/// Splits an interval-aligned series into per-day 96-slot profiles.
pub fn daily_profiles(intervals: &[IntervalIndex], series: &[Option<f64>]) -> Vec<DailyProfile> {
    let mut by_day: BTreeMap<NaiveDate, Vec<Option<f64>>> = BTreeMap::new();
    for (interval, v) in intervals.iter().zip(series) {
        by_day.entry(interval.day).or_insert_with(|| vec![None; SLOTS_PER_DAY])[interval.slot as usize] = *v;
    }
    by_day.into_iter().map(|(day, values)| DailyProfile { day, values, normalized: None }).collect()
}

/// Network flow (sum over roads) per interval.
pub fn total_flow_series(flow: &FlowMatrix) -> Vec<u64> {
    (0..flow.n_intervals()).map(|c| flow.column(c).map(u64::from).sum()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyAggregate {
    pub day: NaiveDate,
    /// Sum of every flow cell of the day.
    pub total_flow: u64,
    /// Mean of the day's defined network scores.
    pub mean_congestion: Option<f64>,
    /// Fewer than 96 slots present, or some slot lacks a network score.
    pub partial: bool,
}

pub fn daily_aggregates(flow: &FlowMatrix, congestion: &CongestionSeries) -> Vec<DailyAggregate> {
    #[derive(Default)]
    struct Acc {
        flow: u64,
        flow_slots: usize,
        dc_sum: f64,
        dc_n: usize,
        dc_slots: usize,
    }
    let mut days: BTreeMap<NaiveDate, Acc> = BTreeMap::new();
    for (c, interval) in flow.intervals().iter().enumerate() {
        let acc = days.entry(interval.day).or_default();
        acc.flow += flow.column(c).map(u64::from).sum::<u64>();
        acc.flow_slots += 1;
    }
    for (interval, v) in congestion.intervals().iter().zip(&congestion.network) {
        let acc = days.entry(interval.day).or_default();
        acc.dc_slots += 1;
        if let Some(v) = v {
            acc.dc_sum += v;
            acc.dc_n += 1;
        }
    }
    days.into_iter()
        .map(|(day, a)| DailyAggregate {
            day,
            total_flow: a.flow,
            mean_congestion: (a.dc_n > 0).then(|| a.dc_sum / a.dc_n as f64),
            partial: a.flow_slots < SLOTS_PER_DAY || a.dc_slots < SLOTS_PER_DAY || a.dc_n < SLOTS_PER_DAY,
        })
        .collect()
}

/// Named groups of dates (e.g. holiday / weekday / weekend).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, Vec<NaiveDate>>", into = "BTreeMap<String, Vec<NaiveDate>>")]
pub struct ScenarioGroups(BTreeMap<String, Vec<NaiveDate>>);

impl TryFrom<BTreeMap<String, Vec<NaiveDate>>> for ScenarioGroups {
    type Error = CongestionError;

    fn try_from(groups: BTreeMap<String, Vec<NaiveDate>>) -> Result<Self, Self::Error> {
        Self::new(groups)
    }
}

impl From<ScenarioGroups> for BTreeMap<String, Vec<NaiveDate>> {
    fn from(groups: ScenarioGroups) -> Self {
        groups.0
    }
}

impl ScenarioGroups {
    pub fn new(groups: BTreeMap<String, Vec<NaiveDate>>) -> Result<Self, CongestionError> {
        let mut seen = std::collections::BTreeSet::new();
        for dates in groups.values() {
            for d in dates {
                if !seen.insert(*d) {
                    return Err(CongestionError::OverlappingScenarios(*d));
                }
            }
        }
        Ok(Self(groups))
    }

    /// Single group `all` containing the given days.
    pub fn all(days: Vec<NaiveDate>) -> Self {
        Self(BTreeMap::from([("all".to_string(), days)]))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[NaiveDate])> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn get(&self, name: &str) -> Option<&[NaiveDate]> {
        self.0.get(name).map(Vec::as_slice)
    }
}

/// Fitting index of one measurement for one scenario, raw and normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFit {
    pub days: Vec<NaiveDate>,
    /// Slots with a value on every selected day; only these enter the index.
    pub slots_used: usize,
    pub raw: Option<FittingIndex>,
    pub normalized: Option<FittingIndex>,
}

/// Fitting index over the profiles whose day is in `days`.
pub fn scenario_fit(profiles: &[DailyProfile], days: &[NaiveDate]) -> ScenarioFit {
    let chosen: Vec<&DailyProfile> = profiles.iter().filter(|p| days.contains(&p.day)).collect();
    let slots: Vec<usize> =
        (0..SLOTS_PER_DAY).filter(|&j| chosen.iter().all(|p| p.values.get(j).copied().flatten().is_some())).collect();
    let raw: Vec<Vec<f64>> =
        chosen.iter().map(|p| slots.iter().map(|&j| p.values[j].expect("filtered")).collect()).collect();
    let normalized: Vec<Vec<f64>> = raw.iter().map(|d| min_max_normalize(d).values).collect();
    let usable = !slots.is_empty();
    ScenarioFit {
        days: chosen.iter().map(|p| p.day).collect(),
        slots_used: slots.len(),
        raw: usable.then(|| fitting_index(&raw).ok()).flatten(),
        normalized: usable.then(|| fitting_index(&normalized).ok()).flatten(),
    }
}
