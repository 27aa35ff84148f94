//! GeoJSON heatmap layers, scatter CSVs and static SVG time-series plots.

use std::fmt::Write as _;

use chrono::NaiveDate;
use serde_json::{json, Value};
use thiserror::Error;

use crate::congestion::{DailyAggregate, DailyProfile};
use crate::ingest::{slot_label, IntervalIndex, SLOTS_PER_DAY};
use crate::matrix::{MatrixValue, SpatioTemporalMatrix};
use crate::network::{line_geometry, RoadId, RoadNetwork};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExportError {
    #[error("interval {0} is not on the matrix axis")]
    UnknownInterval(IntervalIndex),
    #[error("road {0} is not in the network")]
    UnknownRoad(RoadId),
    #[error("series lengths differ")]
    Length,
}

/// One line feature per matrix road, with `ratio` against the matrix-wide maximum.
pub fn export_heatmap<T>(
    matrix: &SpatioTemporalMatrix<T>,
    net: &RoadNetwork,
    interval: IntervalIndex,
) -> Result<Value, ExportError>
where
    T: MatrixValue + Into<f64>,
{
    let col = matrix.interval_position(interval).ok_or(ExportError::UnknownInterval(interval))?;
    let max = matrix.values().iter().map(|v| (*v).into()).fold(0.0_f64, f64::max);
    let features = matrix
        .rows()
        .map(|(id, row)| {
            let seg = net.get(id).ok_or(ExportError::UnknownRoad(id))?;
            let value: f64 = row[col].into();
            let ratio = if max > 0.0 { value / max } else { 0.0 };
            Ok(json!({
                "type": "Feature",
                "properties": { "road_id": id.0, "value": value, "ratio": ratio },
                "geometry": line_geometry(&seg.polyline),
            }))
        })
        .collect::<Result<Vec<_>, ExportError>>()?;
    Ok(json!({
        "type": "FeatureCollection",
        "interval": interval.to_string(),
        "max_value": max,
        "features": features,
    }))
}

/// Days of one measure for one scenario, ready for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesSet {
    pub title: String,
    pub measure: String,
    pub days: Vec<(NaiveDate, Vec<Option<f64>>)>,
    /// Values are min-max normalized; the y axis is fixed to [0, 1].
    pub normalized: bool,
}

impl TimeSeriesSet {
    /// Uses `normalized` profile values when asked and available.
    pub fn from_profiles(title: &str, measure: &str, profiles: &[DailyProfile], normalized: bool) -> Self {
        let days = profiles
            .iter()
            .map(|p| {
                let values = match (&p.normalized, normalized) {
                    (Some(n), true) => n.iter().copied().map(Some).collect(),
                    (None, true) => vec![None; SLOTS_PER_DAY],
                    _ => p.values.clone(),
                };
                (p.day, values)
            })
            .collect();
        Self { title: title.to_string(), measure: measure.to_string(), days, normalized }
    }
}

/// Scatter rows `slot,day,value`; missing values leave the field empty.
pub fn timeseries_csv(set: &TimeSeriesSet) -> String {
    let mut out = String::from("slot,day,value\n");
    for (day, values) in &set.days {
        for (slot, v) in values.iter().enumerate() {
            let v = v.map(|v| v.render()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", slot_label(slot as u16), day, v);
        }
    }
    out
}

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

/// Rounds `x` up to 1, 2, 2.5 or 5 times a power of ten.
fn nice_ceiling(x: f64) -> f64 {
    if x <= 0.0 || !x.is_finite() {
        return 1.0;
    }
    let base = 10f64.powf(x.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * base).find(|v| *v >= x).unwrap_or(10.0 * base)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Overlay of every day's curve. Output depends only on the input.
pub fn timeseries_svg(set: &TimeSeriesSet) -> String {
    let (y_min, y_max) = if set.normalized {
        (0.0, 1.0)
    } else {
        let hi = set.days.iter().flat_map(|(_, v)| v.iter().flatten()).copied().fold(0.0_f64, f64::max);
        (0.0, nice_ceiling(hi))
    };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |slot: usize| LEFT + plot_w * slot as f64 / (SLOTS_PER_DAY - 1) as f64;
    let y = |v: f64| TOP + plot_h * (1.0 - (v - y_min) / (y_max - y_min));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r##"<rect width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>"##);
    let _ = writeln!(s, r#"<text x="{}" y="22" font-size="14" text-anchor="middle">{}</text>"#, LEFT + plot_w / 2.0, escape(&set.title));
    let _ = writeln!(s, r##"<g class="axes" data-y-min="{y_min}" data-y-max="{y_max}" stroke="#333333">"##);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}"/>"#, TOP + plot_h, LEFT + plot_w, TOP + plot_h);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}"/>"#, TOP + plot_h);
    let _ = writeln!(s, "</g>");

    for hour in (0..=24).step_by(3) {
        let slot = (hour * 4).min(SLOTS_PER_DAY - 1);
        let px = if hour == 24 { LEFT + plot_w } else { x(slot) };
        let _ = writeln!(
            s,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{hour:02}:00</text>"#,
            TOP + plot_h + 16.0
        );
    }
    for i in 0..=5 {
        let v = y_min + (y_max - y_min) * i as f64 / 5.0;
        let py = y(v);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#dddddd"/>"##, LEFT + plot_w);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, py + 4.0, tick_label(v));
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(&set.measure)
    );

    for (i, (day, values)) in set.days.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<g class="day" data-day="{day}" stroke="{colour}" fill="none">"#);
        // one polyline per run of consecutive defined slots
        let mut run: Vec<String> = Vec::new();
        let flush = |run: &mut Vec<String>, s: &mut String| {
            if run.len() > 1 {
                let _ = writeln!(s, r#"<polyline points="{}"/>"#, run.join(" "));
            }
            run.clear();
        };
        for (slot, v) in values.iter().enumerate() {
            match v {
                Some(v) => run.push(format!("{:.2},{:.2}", x(slot), y(*v))),
                None => flush(&mut run, &mut s),
            }
        }
        flush(&mut run, &mut s);
        let ly = TOP + 14.0 * i as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}"/>"#, lx + 18.0);
        let _ = writeln!(s, r##"<text x="{}" y="{}" stroke="none" fill="#333333">{day}</text>"##, lx + 24.0, ly + 4.0);
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

fn tick_label(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Scatter CSV and SVG plot for one series set.
pub fn export_timeseries(set: &TimeSeriesSet) -> (String, String) {
    (timeseries_csv(set), timeseries_svg(set))
}

/// `interval,inrix,total_flow` rows; an undefined network score is left empty.
pub fn network_series_csv(
    intervals: &[IntervalIndex],
    inrix: &[Option<f64>],
    total_flow: &[u64],
) -> Result<String, ExportError> {
    if intervals.len() != inrix.len() || intervals.len() != total_flow.len() {
        return Err(ExportError::Length);
    }
    let mut out = String::from("interval,inrix,total_flow\n");
    for ((i, v), f) in intervals.iter().zip(inrix).zip(total_flow) {
        let _ = writeln!(out, "{},{},{}", i, v.map(|v| v.render()).unwrap_or_default(), f);
    }
    Ok(out)
}

pub fn daily_csv(days: &[DailyAggregate]) -> String {
    let mut out = String::from("day,total_flow,mean_congestion,partial\n");
    for d in days {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            d.day,
            d.total_flow,
            d.mean_congestion.map(|v| v.render()).unwrap_or_default(),
            d.partial
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LatLon;
    use crate::matrix::{day_axis, FlowMatrix};
    use crate::network::RoadSegment;

    fn day(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2016, 10, d).unwrap()
    }

    fn net() -> RoadNetwork {
        let seg = |id, lon: f64| {
            RoadSegment::new(RoadId(id), vec![LatLon::new(30.6, lon), LatLon::new(30.61, lon)], None, 200.0).unwrap()
        };
        RoadNetwork::new(vec![seg(1, 104.0), seg(2, 104.01), seg(3, 104.02)]).unwrap()
    }

    fn flow() -> FlowMatrix {
        let mut m = FlowMatrix::zeros(vec![RoadId(1), RoadId(2)], day_axis(day(1), day(1))).unwrap();
        m.set(0, 10, 50);
        m.set(1, 10, 25);
        m
    }

    #[test]
    fn ratio_against_matrix_max() {
        let m = flow();
        let doc = export_heatmap(&m, &net(), m.intervals()[10]).unwrap();
        let features = doc["features"].as_array().unwrap();
        assert_eq!(features.len(), 2);
        assert_eq!(features[1]["properties"]["road_id"], 2);
        assert_eq!(features[1]["properties"]["ratio"], 0.5);
        assert_eq!(features[0]["properties"]["ratio"], 1.0);
        assert_eq!(features[0]["geometry"]["type"], "LineString");
    }

    #[test]
    fn zero_interval_has_zero_ratios() {
        let m = flow();
        let doc = export_heatmap(&m, &net(), m.intervals()[0]).unwrap();
        for f in doc["features"].as_array().unwrap() {
            assert_eq!(f["properties"]["ratio"], 0.0);
        }
        let empty = FlowMatrix::zeros(vec![RoadId(1)], day_axis(day(1), day(1))).unwrap();
        let doc = export_heatmap(&empty, &net(), empty.intervals()[5]).unwrap();
        assert_eq!(doc["features"][0]["properties"]["ratio"], 0.0);
    }

    #[test]
    fn unknown_interval_and_road() {
        let m = flow();
        let other = IntervalIndex::new(day(2), 0);
        assert_eq!(export_heatmap(&m, &net(), other), Err(ExportError::UnknownInterval(other)));
        let stray = FlowMatrix::zeros(vec![RoadId(9)], day_axis(day(1), day(1))).unwrap();
        assert_eq!(export_heatmap(&stray, &net(), stray.intervals()[0]), Err(ExportError::UnknownRoad(RoadId(9))));
    }

    fn three_days(normalized: bool) -> TimeSeriesSet {
        let days = (1..=3)
            .map(|d| (day(d), (0..96).map(|s| Some(if normalized { s as f64 / 95.0 } else { d as f64 * s as f64 })).collect()))
            .collect();
        TimeSeriesSet { title: "all".into(), measure: "flow".into(), days, normalized }
    }

    #[test]
    fn scatter_has_row_per_day_slot() {
        let csv = timeseries_csv(&three_days(false));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 288);
        assert_eq!(lines[0], "slot,day,value");
        assert_eq!(lines[2], "00:15,2016-10-01,1");
    }

    #[test]
    fn normalized_axis_is_unit() {
        let svg = timeseries_svg(&three_days(true));
        assert!(svg.contains(r#"data-y-min="0" data-y-max="1""#));
        assert!(svg.contains(">1.00</text>"));
        let raw = timeseries_svg(&three_days(false));
        assert!(raw.contains(r#"data-y-max="500""#), "{}", &raw[..400]);
    }

    #[test]
    fn svg_is_deterministic_and_splits_gaps() {
        let mut set = three_days(false);
        assert_eq!(timeseries_svg(&set), timeseries_svg(&set.clone()));
        set.days[0].1[40] = None;
        let svg = timeseries_svg(&set);
        assert_eq!(svg.matches("<polyline").count(), 4);
    }

    #[test]
    fn nice_ceilings() {
        assert_eq!(nice_ceiling(0.0), 1.0);
        assert_eq!(nice_ceiling(0.83), 1.0);
        assert_eq!(nice_ceiling(1.7), 2.0);
        assert_eq!(nice_ceiling(2.2), 2.5);
        assert_eq!(nice_ceiling(285.0), 500.0);
    }

    #[test]
    fn series_csv_rows() {
        let axis = day_axis(day(1), day(1));
        let inrix: Vec<Option<f64>> = (0..96).map(|s| (s != 3).then_some(0.25)).collect();
        let csv = network_series_csv(&axis, &inrix, &[7; 96]).unwrap();
        assert_eq!(csv.lines().nth(1), Some("2016-10-01T00:00,0.25,7"));
        assert_eq!(csv.lines().nth(4), Some("2016-10-01T00:45,,7"));
        assert_eq!(network_series_csv(&axis, &inrix, &[1]), Err(ExportError::Length));
    }
}
