//! Config file format and merging with command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Deserialize;

use hailtraffic::congestion::ScenarioGroups;
use hailtraffic::ingest::{ColumnOrder, HeaderMode, IntervalIndex};
use hailtraffic::matching::OffsetVector;

use crate::CliError;

/// Keys accepted in the TOML config file. Flags take precedence.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub traces: Option<PathBuf>,
    pub network: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub tz_offset_s: Option<i64>,
    pub chunk_size: Option<usize>,
    pub max_dist_km: Option<f64>,
    pub pair_dt_max_s: Option<i64>,
    pub anomaly_kmh: Option<f64>,
    pub missing_fraction: Option<f64>,
    pub error_ceiling: Option<f64>,
    pub max_free_flow_kmh: Option<f64>,
    /// `[dlat, dlon]` in degrees.
    pub offset: Option<[f64; 2]>,
    pub offset_sample: Option<usize>,
    pub seed: Option<u64>,
    pub columns: Option<String>,
    pub delimiter: Option<char>,
    pub header: Option<HeaderMode>,
    pub heatmaps: Option<Vec<String>>,
    pub scenarios: Option<BTreeMap<String, Vec<NaiveDate>>>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }
}

pub fn parse_offset(s: &str) -> Result<OffsetVector, String> {
    let (a, b) = s.split_once(',').ok_or("expected DLAT,DLON")?;
    let dlat: f64 = a.trim().parse().map_err(|_| format!("bad latitude shift `{a}`"))?;
    let dlon: f64 = b.trim().parse().map_err(|_| format!("bad longitude shift `{b}`"))?;
    OffsetVector::new(dlat, dlon).map_err(|e| e.to_string())
}

pub fn offset_from_pair(pair: [f64; 2]) -> Result<OffsetVector, CliError> {
    OffsetVector::new(pair[0], pair[1]).map_err(|e| CliError::config(e.to_string()))
}

pub fn parse_columns(s: &str) -> Result<ColumnOrder, CliError> {
    s.parse().map_err(|e: hailtraffic::ingest::ColumnOrderError| CliError::config(e.to_string()))
}

pub fn parse_delimiter(c: char) -> Result<u8, CliError> {
    u8::try_from(c).ok().filter(u8::is_ascii).ok_or_else(|| CliError::config(format!("delimiter `{c}` is not ASCII")))
}

pub fn parse_intervals(labels: &[String]) -> Result<Vec<IntervalIndex>, CliError> {
    labels
        .iter()
        .map(|l| l.parse::<IntervalIndex>().map_err(|e| CliError::config(e.to_string())))
        .collect()
}

/// `NAME=DATE,DATE,...`
pub fn parse_scenario_flag(s: &str) -> Result<(String, Vec<NaiveDate>), String> {
    let (name, dates) = s.split_once('=').ok_or("expected NAME=DATE[,DATE...]")?;
    if name.trim().is_empty() {
        return Err("scenario name is empty".into());
    }
    let dates = dates
        .split(',')
        .filter(|d| !d.trim().is_empty())
        .map(|d| d.trim().parse::<NaiveDate>().map_err(|_| format!("bad date `{d}`")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((name.trim().to_string(), dates))
}

/// Flag groups replace the file's groups as a whole.
pub fn scenario_groups(
    flags: &[(String, Vec<NaiveDate>)],
    file: Option<&BTreeMap<String, Vec<NaiveDate>>>,
) -> Result<ScenarioGroups, CliError> {
    let groups: BTreeMap<String, Vec<NaiveDate>> = if flags.is_empty() {
        file.cloned().unwrap_or_default()
    } else {
        flags.iter().cloned().collect()
    };
    ScenarioGroups::new(groups).map_err(|e| CliError::config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets() {
        let off = parse_offset("0.001,-0.002").unwrap();
        assert_eq!((off.dlat, off.dlon), (0.001, -0.002));
        assert!(parse_offset("0.05,0").is_err());
        assert!(parse_offset("0.001").is_err());
    }

    #[test]
    fn scenario_flags() {
        let (name, days) = parse_scenario_flag("holiday=2016-10-01,2016-10-02").unwrap();
        assert_eq!(name, "holiday");
        assert_eq!(days.len(), 2);
        assert!(parse_scenario_flag("=2016-10-01").is_err());
        assert!(parse_scenario_flag("x=2016-13-01").is_err());
        let overlap = vec![("a".to_string(), days.clone()), ("b".to_string(), days)];
        assert!(scenario_groups(&overlap, None).is_err());
    }

    #[test]
    fn file_keys() {
        let cfg: FileConfig = toml::from_str(
            r#"
            traces = "t.csv"
            offset = [0.001, -0.001]
            header = "absent"
            [scenarios]
            holiday = ["2016-10-01"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.header, Some(HeaderMode::Absent));
        assert_eq!(cfg.scenarios.unwrap()["holiday"].len(), 1);
        assert!(toml::from_str::<FileConfig>("unknown_key = 1").is_err());
    }
}
