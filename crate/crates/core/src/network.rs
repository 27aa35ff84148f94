//! Road network model, GeoJSON loading, and nearest-segment queries.

use std::collections::HashSet;
use std::fmt;

use rstar::primitives::{GeomWithData, Rectangle};
use rstar::{RTree, AABB};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::geo::{haversine, polyline_length, BBox, LatLon, EARTH_RADIUS_KM, KM_PER_DEGREE};

/// Default matching gate: 50 m.
pub const DEFAULT_MAX_DIST_KM: f64 = 0.05;

/// Identifier of one road (one input line feature).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoadId(pub u64);

impl fmt::Display for RoadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("road {0}: polyline needs at least 2 vertices, got {1}")]
    TooFewVertices(RoadId, usize),
    #[error("road {0}: vertex {1:?} outside geographic range")]
    InvalidVertex(RoadId, LatLon),
    #[error("road {0}: zero length")]
    ZeroLength(RoadId),
    #[error("road {0}: free-flow speed {1} km/h outside (0, {2}]")]
    FreeFlowRange(RoadId, f64, f64),
    #[error("feature has no usable integer `id` property")]
    MissingId,
    #[error("road {0}: geometry is not a LineString")]
    Geometry(RoadId),
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("network document is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("network document has no `features` array")]
    NotFeatureCollection,
    #[error("duplicate road id {0}")]
    DuplicateId(RoadId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: RoadId,
    pub polyline: Vec<LatLon>,
    pub length_km: f64,
    pub free_flow_kmh: Option<f64>,
}

impl RoadSegment {
    /// Builds a segment, computing its length. `max_free_flow_kmh` bounds the
    /// optional free-flow attribute (the anomaly threshold).
    pub fn new(
        id: RoadId,
        polyline: Vec<LatLon>,
        free_flow_kmh: Option<f64>,
        max_free_flow_kmh: f64,
    ) -> Result<Self, FeatureError> {
        if polyline.len() < 2 {
            return Err(FeatureError::TooFewVertices(id, polyline.len()));
        }
        if let Some(v) = polyline.iter().find(|v| !v.is_valid()) {
            return Err(FeatureError::InvalidVertex(id, *v));
        }
        if let Some(ff) = free_flow_kmh {
            if !(ff > 0.0 && ff <= max_free_flow_kmh) {
                return Err(FeatureError::FreeFlowRange(id, ff, max_free_flow_kmh));
            }
        }
        let length_km = polyline_length(&polyline);
        if length_km <= 0.0 {
            return Err(FeatureError::ZeroLength(id));
        }
        Ok(Self { id, polyline, length_km, free_flow_kmh })
    }
}

/// Closest point of a polyline to a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub point: LatLon,
    pub distance_km: f64,
}

/// Closest point on a polyline, found in a local equirectangular plane
/// centred on `p` and measured with haversine.
pub fn project_onto_polyline(p: LatLon, polyline: &[LatLon]) -> Projection {
    let cos_lat = p.lat.to_radians().cos();
    let to_plane = |v: LatLon| ((v.lon - p.lon) * cos_lat, v.lat - p.lat);
    let mut best = Projection { point: polyline[0], distance_km: haversine(p, polyline[0]) };
    let mut consider = |q: LatLon| {
        let d = haversine(p, q);
        if d < best.distance_km {
            best = Projection { point: q, distance_km: d };
        }
    };
    for w in polyline.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (ax, ay) = to_plane(a);
        let (bx, by) = to_plane(b);
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (-(ax * dx + ay * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        consider(LatLon::new(a.lat + t * (b.lat - a.lat), a.lon + t * (b.lon - a.lon)));
        consider(b);
    }
    best
}

/// Minimum distance in kilometres from `p` to any part of `seg`.
pub fn point_to_segment_distance(p: LatLon, seg: &RoadSegment) -> f64 {
    project_onto_polyline(p, &seg.polyline).distance_km
}

/// Result of a nearest-segment query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestRoad {
    pub road_id: RoadId,
    pub distance_km: f64,
    /// Closest point on the road.
    pub point: LatLon,
}

type IndexedEdge = GeomWithData<Rectangle<[f64; 2]>, u32>;

/// Immutable road network with an R-tree over every polyline edge.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    segments: Vec<RoadSegment>,
    bbox: BBox,
    index: RTree<IndexedEdge>,
}

/// Outcome of loading a network document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: usize,
    /// (feature position, reason) for each skipped feature.
    pub skipped: Vec<(usize, FeatureError)>,
}

impl RoadNetwork {
    /// Builds the network; segments are stored in ascending id order.
    pub fn new(mut segments: Vec<RoadSegment>) -> Result<Self, NetworkError> {
        segments.sort_by_key(|s| s.id);
        if let Some(w) = segments.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(NetworkError::DuplicateId(w[0].id));
        }
        let mut bbox = BBox::empty();
        let mut edges = Vec::new();
        for (pos, seg) in segments.iter().enumerate() {
            for v in &seg.polyline {
                bbox.extend(*v);
            }
            for w in seg.polyline.windows(2) {
                let rect = Rectangle::from_corners([w[0].lon, w[0].lat], [w[1].lon, w[1].lat]);
                edges.push(GeomWithData::new(rect, pos as u32));
            }
        }
        Ok(Self { segments, bbox, index: RTree::bulk_load(edges) })
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn road_ids(&self) -> Vec<RoadId> {
        self.segments.iter().map(|s| s.id).collect()
    }

    pub fn get(&self, id: RoadId) -> Option<&RoadSegment> {
        self.segments.binary_search_by_key(&id, |s| s.id).ok().map(|i| &self.segments[i])
    }

    /// Nearest road within `max_dist_km`; ties go to the lowest id.
    pub fn nearest_segment(&self, p: LatLon, max_dist_km: f64) -> Option<NearestRoad> {
        if self.segments.is_empty() || !(max_dist_km >= 0.0) {
            return None;
        }
        let best = match search_window(p, max_dist_km) {
            Some(window) => self.best_in_window(p, &window),
            None => self.best_of(p, 0..self.segments.len()),
        }?;
        (best.distance_km <= max_dist_km).then_some(best)
    }

    /// Nearest road with no distance gate.
    pub fn nearest_unbounded(&self, p: LatLon) -> Option<NearestRoad> {
        if self.segments.is_empty() {
            return None;
        }
        let mut radius = 0.05;
        while radius < EARTH_RADIUS_KM * std::f64::consts::PI {
            let Some(window) = search_window(p, radius) else { break };
            // anything closer than `radius` must intersect the window
            if let Some(best) = self.best_in_window(p, &window) {
                if best.distance_km <= radius {
                    return Some(best);
                }
            }
            radius *= 4.0;
        }
        self.best_of(p, 0..self.segments.len())
    }

    fn best_in_window(&self, p: LatLon, window: &AABB<[f64; 2]>) -> Option<NearestRoad> {
        let mut candidates: Vec<usize> = self
            .index
            .locate_in_envelope_intersecting(window)
            .map(|e| e.data as usize)
            .collect();
        candidates.sort_unstable();
        candidates.dedup();
        self.best_of(p, candidates)
    }

    fn best_of(&self, p: LatLon, positions: impl IntoIterator<Item = usize>) -> Option<NearestRoad> {
        let mut best: Option<NearestRoad> = None;
        // positions ascend, and so do ids: strict `<` keeps the lowest id on ties
        for pos in positions {
            let seg = &self.segments[pos];
            let proj = project_onto_polyline(p, &seg.polyline);
            if best.is_none_or(|b| proj.distance_km < b.distance_km) {
                best = Some(NearestRoad { road_id: seg.id, distance_km: proj.distance_km, point: proj.point });
            }
        }
        best
    }

    /// GeoJSON FeatureCollection of the network (lon,lat coordinate order).
    pub fn to_geojson(&self) -> Value {
        let features: Vec<Value> = self
            .segments
            .iter()
            .map(|s| {
                let mut props = serde_json::Map::new();
                props.insert("id".into(), json!(s.id.0));
                if let Some(ff) = s.free_flow_kmh {
                    props.insert("free_flow_kmh".into(), json!(ff));
                }
                json!({
                    "type": "Feature",
                    "properties": props,
                    "geometry": line_geometry(&s.polyline),
                })
            })
            .collect();
        json!({ "type": "FeatureCollection", "features": features })
    }
}

pub(crate) fn line_geometry(polyline: &[LatLon]) -> Value {
    let coords: Vec<[f64; 2]> = polyline.iter().map(|v| [v.lon, v.lat]).collect();
    json!({ "type": "LineString", "coordinates": coords })
}

/// Degree-space rectangle containing every point within `radius_km` of `p`,
/// or `None` when that region wraps a pole or the antimeridian.
fn search_window(p: LatLon, radius_km: f64) -> Option<AABB<[f64; 2]>> {
    const REL: f64 = 1e-9;
    const ABS: f64 = 1e-12;
    // a great-circle distance is never shorter than its meridional component
    let dlat = radius_km / KM_PER_DEGREE * (1.0 + REL) + ABS;
    let band = (p.lat.abs() + dlat).min(90.0);
    let denom = (p.lat.to_radians().cos() * band.to_radians().cos()).sqrt();
    let s = (radius_km / EARTH_RADIUS_KM / 2.0).min(std::f64::consts::FRAC_PI_2).sin() / denom;
    if !s.is_finite() || s >= 1.0 || band >= 90.0 {
        return None;
    }
    let dlon = 2.0 * s.asin().to_degrees() * (1.0 + REL) + ABS;
    let (lo, hi) = (p.lon - dlon, p.lon + dlon);
    if lo < -180.0 || hi > 180.0 {
        return None;
    }
    Some(AABB::from_corners([lo, p.lat - dlat], [hi, p.lat + dlat]))
}

/// Parses a GeoJSON FeatureCollection of LineString features with
/// `{id: integer, free_flow_kmh?: number}` properties.
pub fn load_network(document: &str, max_free_flow_kmh: f64) -> Result<(RoadNetwork, LoadReport), NetworkError> {
    let doc: Value = serde_json::from_str(document)?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or(NetworkError::NotFeatureCollection)?;

    let mut report = LoadReport::default();
    let mut segments = Vec::with_capacity(features.len());
    let mut seen = HashSet::new();
    for (pos, feature) in features.iter().enumerate() {
        let id = match feature_id(feature) {
            Some(id) => id,
            None => {
                report.skipped.push((pos, FeatureError::MissingId));
                continue;
            }
        };
        if !seen.insert(id) {
            return Err(NetworkError::DuplicateId(id));
        }
        match parse_feature(id, feature, max_free_flow_kmh) {
            Ok(seg) => segments.push(seg),
            Err(e) => {
                log::warn!("skipping network feature {pos}: {e}");
                report.skipped.push((pos, e));
            }
        }
    }
    report.loaded = segments.len();
    Ok((RoadNetwork::new(segments)?, report))
}

fn feature_id(feature: &Value) -> Option<RoadId> {
    let id = feature.get("properties")?.get("id")?;
    id.as_u64()
        .or_else(|| id.as_f64().filter(|f| f.fract() == 0.0 && *f >= 0.0).map(|f| f as u64))
        .map(RoadId)
}

fn parse_feature(id: RoadId, feature: &Value, max_free_flow_kmh: f64) -> Result<RoadSegment, FeatureError> {
    let geometry = feature.get("geometry").ok_or(FeatureError::Geometry(id))?;
    if geometry.get("type").and_then(Value::as_str) != Some("LineString") {
        return Err(FeatureError::Geometry(id));
    }
    let coords = geometry
        .get("coordinates")
        .and_then(Value::as_array)
        .ok_or(FeatureError::Geometry(id))?;
    let polyline = coords
        .iter()
        .map(|c| {
            let pair = c.as_array().filter(|a| a.len() >= 2)?;
            Some(LatLon::new(pair[1].as_f64()?, pair[0].as_f64()?))
        })
        .collect::<Option<Vec<_>>>()
        .ok_or(FeatureError::Geometry(id))?;
    let free_flow = feature
        .get("properties")
        .and_then(|p| p.get("free_flow_kmh"))
        .and_then(Value::as_f64);
    RoadSegment::new(id, polyline, free_flow, max_free_flow_kmh)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(id: u64, pts: &[(f64, f64)]) -> RoadSegment {
        let poly = pts.iter().map(|&(lat, lon)| LatLon::new(lat, lon)).collect();
        RoadSegment::new(RoadId(id), poly, None, 70.0).unwrap()
    }

    fn feature(id: u64, coords: &[[f64; 2]]) -> Value {
        json!({"type": "Feature", "properties": {"id": id},
               "geometry": {"type": "LineString", "coordinates": coords}})
    }

    #[test]
    fn meridian_segment_length() {
        let s = seg(1, &[(30.0, 104.0), (30.01, 104.0)]);
        let expected = 0.01 * std::f64::consts::PI / 180.0 * 6378.137;
        assert!((s.length_km - expected).abs() < 1e-9);
        assert!((s.length_km - 1.1132).abs() < 1e-4);
    }

    #[test]
    fn single_vertex_feature_is_skipped() {
        let doc = json!({"type": "FeatureCollection", "features": [
            feature(1, &[[104.0, 30.0], [104.0, 30.01]]),
            feature(2, &[[104.0, 30.0]]),
        ]});
        let (net, report) = load_network(&doc.to_string(), 70.0).unwrap();
        assert_eq!(net.len(), 1);
        assert_eq!(report.loaded, 1);
        assert_eq!(report.skipped, vec![(1, FeatureError::TooFewVertices(RoadId(2), 1))]);
    }

    #[test]
    fn duplicate_id_is_fatal() {
        let doc = json!({"type": "FeatureCollection", "features": [
            feature(5, &[[104.0, 30.0], [104.0, 30.01]]),
            feature(5, &[[104.1, 30.0], [104.1, 30.01]]),
        ]});
        assert!(matches!(load_network(&doc.to_string(), 70.0), Err(NetworkError::DuplicateId(RoadId(5)))));
    }

    #[test]
    fn free_flow_attribute_is_bounded() {
        let mut f = feature(3, &[[104.0, 30.0], [104.0, 30.01]]);
        f["properties"]["free_flow_kmh"] = json!(90.0);
        let mut g = feature(4, &[[104.0, 30.0], [104.0, 30.01]]);
        g["properties"]["free_flow_kmh"] = json!(50.0);
        let doc = json!({"type": "FeatureCollection", "features": [f, g]});
        let (net, report) = load_network(&doc.to_string(), 70.0).unwrap();
        assert_eq!(net.road_ids(), vec![RoadId(4)]);
        assert_eq!(net.get(RoadId(4)).unwrap().free_flow_kmh, Some(50.0));
        assert!(matches!(report.skipped[0].1, FeatureError::FreeFlowRange(..)));
    }

    #[test]
    fn non_collection_and_bad_json() {
        assert!(matches!(load_network("{}", 70.0), Err(NetworkError::NotFeatureCollection)));
        assert!(matches!(load_network("{", 70.0), Err(NetworkError::Json(_))));
    }

    #[test]
    fn point_on_vertex_is_zero() {
        let s = seg(1, &[(30.0, 104.0), (30.01, 104.0), (30.01, 104.01)]);
        assert_eq!(point_to_segment_distance(LatLon::new(30.01, 104.0), &s), 0.0);
    }

    #[test]
    fn east_of_meridian_segment_at_equator() {
        let s = seg(1, &[(-0.01, 0.0), (0.01, 0.0)]);
        let d = point_to_segment_distance(LatLon::new(0.0, 0.001), &s);
        let expected = 0.001 * std::f64::consts::PI / 180.0 * 6378.137;
        assert!((d - expected).abs() < 1e-9, "{d} vs {expected}");
        assert!((d - 0.1113).abs() < 1e-4);
    }

    #[test]
    fn beyond_endpoint_matches_dense_sampling() {
        let s = seg(1, &[(30.0, 104.0), (30.005, 104.004)]);
        let p = LatLon::new(30.007, 104.006);
        // oracle: sample the straight degree-space segment every ~0.1 m
        let n = (s.length_km / 1e-4).ceil() as usize;
        let (a, b) = (s.polyline[0], s.polyline[1]);
        let sampled = (0..=n)
            .map(|i| {
                let t = i as f64 / n as f64;
                haversine(p, LatLon::new(a.lat + t * (b.lat - a.lat), a.lon + t * (b.lon - a.lon)))
            })
            .fold(f64::INFINITY, f64::min);
        let d = point_to_segment_distance(p, &s);
        assert!((d - haversine(p, b)).abs() < 1e-12);
        assert!((d - sampled).abs() < 1e-4, "{d} vs {sampled}");
    }

    fn grid() -> RoadNetwork {
        RoadNetwork::new(vec![
            seg(7, &[(30.0, 104.0), (30.0, 104.01)]),
            seg(3, &[(30.002, 104.0), (30.002, 104.01)]),
            seg(9, &[(29.998, 104.0), (29.998, 104.01)]),
        ])
        .unwrap()
    }

    #[test]
    fn nearest_within_gate() {
        let net = grid();
        // ~10 m north of road 7
        let p = LatLon::new(30.0 + 0.01 / KM_PER_DEGREE, 104.005);
        let hit = net.nearest_segment(p, 0.05).unwrap();
        assert_eq!(hit.road_id, RoadId(7));
        assert!((hit.distance_km - 0.01).abs() < 1e-6);
    }

    #[test]
    fn nothing_within_gate() {
        let net = RoadNetwork::new(vec![seg(1, &[(30.0, 104.0), (30.0, 104.01)])]).unwrap();
        let p = LatLon::new(30.0 + 0.1 / KM_PER_DEGREE, 104.005);
        assert!(net.nearest_segment(p, 0.05).is_none());
        assert!(net.nearest_unbounded(p).is_some());
    }

    #[test]
    fn equal_distance_tie_goes_to_lower_id() {
        // shared vertex: both roads at distance exactly 0
        let tie = RoadNetwork::new(vec![
            seg(8, &[(30.0, 104.0), (30.01, 104.0)]),
            seg(4, &[(30.0, 104.0), (30.0, 104.01)]),
        ])
        .unwrap();
        let hit = tie.nearest_segment(LatLon::new(30.0, 104.0), 0.05).unwrap();
        assert_eq!(hit.road_id, RoadId(4));
        // identical geometry under two ids
        let twins = RoadNetwork::new(vec![
            seg(12, &[(30.0, 104.0), (30.0, 104.01)]),
            seg(11, &[(30.0, 104.0), (30.0, 104.01)]),
        ])
        .unwrap();
        let p = LatLon::new(30.0003, 104.004);
        assert_eq!(twins.nearest_segment(p, 0.05).unwrap().road_id, RoadId(11));
        assert_eq!(twins.nearest_unbounded(p).unwrap().road_id, RoadId(11));
    }

    #[test]
    fn empty_network_has_no_nearest() {
        let net = RoadNetwork::new(vec![]).unwrap();
        assert!(net.nearest_segment(LatLon::new(0.0, 0.0), 1.0).is_none());
        assert!(net.nearest_unbounded(LatLon::new(0.0, 0.0)).is_none());
        assert!(net.bbox().is_empty());
    }

    #[test]
    fn geojson_round_trip() {
        let net = grid();
        let (back, report) = load_network(&net.to_geojson().to_string(), 70.0).unwrap();
        assert!(report.skipped.is_empty());
        assert_eq!(back.segments(), net.segments());
        for s in net.segments() {
            assert!(s.polyline.iter().all(|v| net.bbox().contains(*v)));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn network_strategy() -> impl Strategy<Value = Vec<RoadSegment>> {
            prop::collection::vec(
                prop::collection::vec((30.0f64..30.05, 104.0f64..104.05), 2..5),
                1..25,
            )
            .prop_map(|lines| {
                lines
                    .into_iter()
                    .enumerate()
                    .filter_map(|(i, pts)| {
                        let poly = pts.into_iter().map(|(a, b)| LatLon::new(a, b)).collect();
                        RoadSegment::new(RoadId(i as u64 * 3 + 1), poly, None, 70.0).ok()
                    })
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn index_agrees_with_linear_scan(
                segs in network_strategy(),
                pts in prop::collection::vec((29.99f64..30.06, 103.99f64..104.06), 1..30),
                gate in 0.0f64..3.0,
            ) {
                let net = RoadNetwork::new(segs.clone()).unwrap();
                for (lat, lon) in pts {
                    let p = LatLon::new(lat, lon);
                    let scan = segs
                        .iter()
                        .map(|s| (point_to_segment_distance(p, s), s.id))
                        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                        .unwrap();
                    let gated = net.nearest_segment(p, gate).map(|n| (n.distance_km, n.road_id));
                    let expected = (scan.0 <= gate).then_some(scan);
                    prop_assert_eq!(gated, expected);
                    let free = net.nearest_unbounded(p).unwrap();
                    prop_assert_eq!((free.distance_km, free.road_id), scan);
                }
            }

            #[test]
            fn distance_bounded_by_vertices(
                segs in network_strategy(),
                lat in 29.9f64..30.1,
                lon in 103.9f64..104.1,
            ) {
                let p = LatLon::new(lat, lon);
                for s in &segs {
                    let d = point_to_segment_distance(p, s);
                    prop_assert!(d >= 0.0);
                    for v in &s.polyline {
                        prop_assert!(d <= haversine(p, *v));
                    }
                }
            }

            #[test]
            fn length_is_haversine_sum(segs in network_strategy()) {
                for s in &segs {
                    let sum: f64 = s.polyline.windows(2).map(|w| haversine(w[0], w[1])).sum();
                    prop_assert!((s.length_km - sum).abs() <= 1e-9 * sum);
                }
            }
        }
    }
}
