//! End-to-end run: ingest, offset and matching, tensors, cleaning,
//! congestion analysis and export, recorded in a manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::congestion::{
    compute_congestion, daily_aggregates, daily_profiles, scenario_fit, total_flow_series, CongestionError,
    CongestionSeries, DailyAggregate, DailyProfile, ScenarioFit, ScenarioGroups,
};
use crate::export::{daily_csv, export_heatmap, network_series_csv, timeseries_csv, timeseries_svg, ExportError, TimeSeriesSet};
use crate::ingest::{
    open_source, read_chunks, IngestError, IngestStats, IntervalIndex, ParseConfig, TraceRecord, DEFAULT_CHUNK_SIZE,
    DEFAULT_ERROR_CEILING, DEFAULT_TZ_OFFSET_S,
};
use crate::matching::{apply_offset, estimate_offset, match_batch, OffsetConfig, OffsetError, OffsetVector, DEFAULT_MIN_SAMPLE};
use crate::matrix::{FlowMatrix, MatrixError, MatrixMetadata, MatrixValue, SpatioTemporalMatrix, SpeedMatrix};
use crate::network::{load_network, NetworkError, RoadId, RoadNetwork, DEFAULT_MAX_DIST_KM};
use crate::pattern::{clean_speeds, CleanedSpeeds, CleaningConfig, TensorBuilder, DEFAULT_ANOMALY_KMH, DEFAULT_MISSING_FRACTION, DEFAULT_PAIR_DT_MAX_S};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_OFFSET_SAMPLE: usize = 20_000;
pub const DEFAULT_MAX_FREE_FLOW_KMH: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Network,
    Offset,
    Ingest,
    Tensors,
    Cleaning,
    Congestion,
    Export,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("offset: {0}")]
    Offset(#[from] OffsetError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    Congestion(#[from] CongestionError),
}

impl PipelineError {
    /// 2 for a data-quality abort, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Ingest(IngestError::ErrorRateExceeded { .. }) => 2,
            _ => 1,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.display().to_string(), source }
    }
}

/// A fatal error together with the manifest of the partial run.
#[derive(Debug, Error)]
#[error("{stage} stage failed: {error}")]
pub struct RunFailure {
    pub stage: Stage,
    pub error: PipelineError,
    pub manifest: Box<RunManifest>,
}

impl RunFailure {
    pub fn exit_code(&self) -> i32 {
        self.error.exit_code()
    }
}

/// Thresholds shared by the full run and by analysis of saved matrices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisConfig {
    pub tz_offset_s: i64,
    pub pair_dt_max_s: i64,
    pub anomaly_kmh: f64,
    pub missing_fraction: f64,
    /// Empty means a single group `all` with every day of the data.
    pub scenarios: ScenarioGroups,
    /// Intervals to export heatmap layers for.
    pub heatmaps: Vec<IntervalIndex>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            tz_offset_s: DEFAULT_TZ_OFFSET_S,
            pair_dt_max_s: DEFAULT_PAIR_DT_MAX_S,
            anomaly_kmh: DEFAULT_ANOMALY_KMH,
            missing_fraction: DEFAULT_MISSING_FRACTION,
            scenarios: ScenarioGroups::default(),
            heatmaps: Vec::new(),
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.tz_offset_s.abs() > 14 * 3600 {
            return bad("tz offset must lie within +-14 h");
        }
        if self.pair_dt_max_s <= 0 {
            return bad("pair_dt_max_s must be positive");
        }
        if !(self.anomaly_kmh > 0.0 && self.anomaly_kmh.is_finite()) {
            return bad("anomaly_kmh must be positive");
        }
        if !(self.missing_fraction > 0.0 && self.missing_fraction <= 1.0) {
            return bad("missing_fraction must lie in (0, 1]");
        }
        let groups: BTreeMap<String, Vec<NaiveDate>> = self.scenarios.clone().into();
        ScenarioGroups::new(groups)?;
        Ok(())
    }
}

/// Everything a full `estimate` run needs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub traces: PathBuf,
    pub network: PathBuf,
    /// Not recorded in the manifest, so runs into different directories compare equal.
    #[serde(skip)]
    pub output_dir: PathBuf,
    pub parse: ParseConfig,
    pub chunk_size: usize,
    pub max_dist_km: f64,
    pub error_ceiling: f64,
    pub max_free_flow_kmh: f64,
    /// Applied as given; estimated from the traces when absent.
    pub offset: Option<OffsetVector>,
    pub offset_sample: usize,
    pub min_offset_sample: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn new(traces: impl Into<PathBuf>, network: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            traces: traces.into(),
            network: network.into(),
            output_dir: output_dir.into(),
            parse: ParseConfig::default(),
            chunk_size: DEFAULT_CHUNK_SIZE,
            max_dist_km: DEFAULT_MAX_DIST_KM,
            error_ceiling: DEFAULT_ERROR_CEILING,
            max_free_flow_kmh: DEFAULT_MAX_FREE_FLOW_KMH,
            offset: None,
            offset_sample: DEFAULT_OFFSET_SAMPLE,
            min_offset_sample: DEFAULT_MIN_SAMPLE,
            seed: 0,
            analysis: AnalysisConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.chunk_size == 0 {
            return bad("chunk_size must be positive");
        }
        if !(self.max_dist_km > 0.0 && self.max_dist_km.is_finite()) {
            return bad("max_dist_km must be positive");
        }
        if !(0.0..=1.0).contains(&self.error_ceiling) {
            return bad("error_ceiling must lie in [0, 1]");
        }
        if !(self.max_free_flow_kmh > 0.0) {
            return bad("max_free_flow_kmh must be positive");
        }
        if self.offset.is_none() && (self.offset_sample == 0 || self.offset_sample < self.min_offset_sample) {
            return bad("offset_sample must be at least min_offset_sample");
        }
        if let Some(off) = self.offset {
            OffsetVector::new(off.dlat, off.dlon)?;
        }
        self.analysis.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Row accounting. `rows = matched + unmatched + skipped`, where `skipped`
/// covers parse, validation and offset range rejections.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub rows: u64,
    pub parsed: u64,
    pub parse_errors: u64,
    pub validation_errors: u64,
    pub offset_skipped: u64,
    pub skipped: u64,
    pub matched: u64,
    pub unmatched: u64,
}

impl Counts {
    fn from_stats(stats: IngestStats, offset_skipped: u64, matched: u64, unmatched: u64) -> Self {
        Self {
            rows: stats.rows,
            parsed: stats.parsed,
            parse_errors: stats.parse_errors,
            validation_errors: stats.validation_errors,
            offset_skipped,
            skipped: stats.skipped() + offset_skipped,
            matched,
            unmatched,
        }
    }

    pub fn is_conserved(&self) -> bool {
        self.rows == self.matched + self.unmatched + self.skipped
            && self.parsed == self.matched + self.unmatched + self.offset_skipped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetSource {
    Explicit,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetRecord {
    pub dlat: f64,
    pub dlon: f64,
    pub source: OffsetSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSummary {
    pub network_segments: usize,
    pub skipped_features: usize,
    pub retained: usize,
    pub dropped: Vec<RoadId>,
    /// Retained roads with no observation or only anomalous values.
    pub flagged: Vec<RoadId>,
    /// Retained roads without a usable free-flow speed.
    pub excluded_from_congestion: Vec<RoadId>,
}

/// Record of one run, written as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<Stage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub completed_stages: Vec<Stage>,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts: Option<Counts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<OffsetRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roads: Option<RoadSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anomaly_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anomaly_rate: Option<f64>,
    pub days: Vec<NaiveDate>,
    /// Output path (relative to the output directory) to sha256 digest.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(config: serde_json::Value) -> Self {
        Self {
            status: RunStatus::Ok,
            failed_stage: None,
            error: None,
            completed_stages: Vec::new(),
            config,
            counts: None,
            offset: None,
            roads: None,
            anomaly_count: None,
            anomaly_rate: None,
            days: Vec::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Loads and indexes a network file.
pub fn read_network(path: &Path, max_free_flow_kmh: f64) -> Result<(RoadNetwork, usize), PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let (net, report) = load_network(&text, max_free_flow_kmh)?;
    if net.is_empty() {
        return Err(PipelineError::Config(format!("{}: no usable road segments", path.display())));
    }
    for (i, e) in &report.skipped {
        log::warn!("network feature {i} skipped: {e}");
    }
    Ok((net, report.skipped.len()))
}

/// Draws a fixed-size uniform sample of valid records in one pass, and
/// returns it with the pass's row accounting.
pub fn sample_traces(config: &RunConfig) -> Result<(Vec<TraceRecord>, IngestStats), PipelineError> {
    let k = config.offset_sample;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut reservoir: Vec<TraceRecord> = Vec::with_capacity(k.min(1 << 20));
    let mut seen: u64 = 0;
    let mut reader = read_chunks(open_source(&config.traces)?, &config.parse, config.chunk_size)?;
    for batch in reader.by_ref() {
        for record in batch?.records {
            if reservoir.len() < k {
                reservoir.push(record);
            } else {
                let j = rng.random_range(0..=seen);
                if (j as usize) < k {
                    reservoir[j as usize] = record;
                }
            }
            seen += 1;
        }
    }
    let stats = reader.stats();
    stats.check_ceiling(config.error_ceiling)?;
    Ok((reservoir, stats))
}

/// Estimates the shift of the trace file against the network.
pub fn estimate_run_offset(config: &RunConfig, net: &RoadNetwork) -> Result<OffsetRecord, PipelineError> {
    let (sample, _) = sample_traces(config)?;
    let cfg = OffsetConfig { min_sample: config.min_offset_sample, ..OffsetConfig::default() };
    let est = estimate_offset(&sample, net, &cfg)?;
    log::info!(
        "estimated offset ({:.7}, {:.7}) deg from {} samples in {} iterations",
        est.offset.dlat,
        est.offset.dlon,
        est.sample_size,
        est.iterations
    );
    Ok(OffsetRecord {
        dlat: est.offset.dlat,
        dlon: est.offset.dlon,
        source: OffsetSource::Estimated,
        sample_size: Some(est.sample_size),
        iterations: Some(est.iterations),
    })
}

/// Streams the trace file through offset correction and matching into tensors.
pub fn build_run_tensors(
    config: &RunConfig,
    net: &RoadNetwork,
    offset: OffsetVector,
) -> Result<(FlowMatrix, SpeedMatrix, Counts), PipelineError> {
    let mut builder = TensorBuilder::new(net.road_ids(), config.analysis.pair_dt_max_s);
    let (mut offset_skipped, mut matched, mut unmatched) = (0u64, 0u64, 0u64);
    let mut reader = read_chunks(open_source(&config.traces)?, &config.parse, config.chunk_size)?;
    for batch in reader.by_ref() {
        let batch = batch?;
        let (moved, skipped) = apply_offset(batch.records, offset);
        let outcome = match_batch(moved, net, config.max_dist_km, config.analysis.tz_offset_s);
        offset_skipped += skipped as u64;
        matched += outcome.matched.len() as u64;
        unmatched += outcome.unmatched as u64;
        builder.extend(outcome.matched);
    }
    let stats = reader.stats();
    let counts = Counts::from_stats(stats, offset_skipped, matched, unmatched);
    log::info!(
        "{} rows, {} matched, {} unmatched, {} skipped",
        counts.rows,
        counts.matched,
        counts.unmatched,
        counts.skipped
    );
    stats.check_ceiling(config.error_ceiling)?;
    let (flow, speed) = builder.finish();
    Ok((flow, speed, counts))
}

/// Results of cleaning and congestion analysis.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub flow: FlowMatrix,
    pub speed_raw: SpeedMatrix,
    pub cleaned: CleanedSpeeds,
    pub congestion: CongestionSeries,
    pub total_flow: Vec<u64>,
    pub daily: Vec<DailyAggregate>,
    pub congestion_profiles: Vec<DailyProfile>,
    pub flow_profiles: Vec<DailyProfile>,
    pub scenarios: ScenarioGroups,
    pub fits: BTreeMap<String, ScenarioFits>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFits {
    pub congestion: ScenarioFit,
    pub flow: ScenarioFit,
}

pub fn analyze(
    flow: FlowMatrix,
    speed_raw: SpeedMatrix,
    net: &RoadNetwork,
    config: &AnalysisConfig,
) -> Result<Analysis, PipelineError> {
    if flow.road_ids() != speed_raw.road_ids() || flow.intervals() != speed_raw.intervals() {
        return Err(PipelineError::Config("flow and speed matrices have different axes".into()));
    }
    let cleaned = clean_speeds(
        &speed_raw,
        &CleaningConfig { missing_fraction: config.missing_fraction, anomaly_kmh: config.anomaly_kmh },
    );
    log::info!(
        "{} roads retained, {} dropped, {} anomalies repaired",
        cleaned.matrix.n_roads(),
        cleaned.dropped.len(),
        cleaned.anomaly_count
    );
    let congestion = compute_congestion(&cleaned.matrix, net, config.anomaly_kmh);
    let total_flow = total_flow_series(&flow);
    let daily = daily_aggregates(&flow, &congestion);

    let mut congestion_profiles = daily_profiles(congestion.intervals(), &congestion.network);
    let flow_values: Vec<Option<f64>> = total_flow.iter().map(|v| Some(*v as f64)).collect();
    let mut flow_profiles = daily_profiles(flow.intervals(), &flow_values);
    for p in congestion_profiles.iter_mut().chain(flow_profiles.iter_mut()) {
        p.normalize();
    }

    let scenarios = if config.scenarios.is_empty() { ScenarioGroups::all(flow.days()) } else { config.scenarios.clone() };
    let fits = scenarios
        .iter()
        .map(|(name, days)| {
            let fit = ScenarioFits {
                congestion: scenario_fit(&congestion_profiles, days),
                flow: scenario_fit(&flow_profiles, days),
            };
            (name.to_string(), fit)
        })
        .collect();
    Ok(Analysis {
        flow,
        speed_raw,
        cleaned,
        congestion,
        total_flow,
        daily,
        congestion_profiles,
        flow_profiles,
        scenarios,
        fits,
    })
}

fn csv_bytes<T: MatrixValue>(m: &SpatioTemporalMatrix<T>) -> Result<Vec<u8>, PipelineError> {
    let mut buf = Vec::new();
    m.write_csv(&mut buf)?;
    Ok(buf)
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

fn file_label(interval: IntervalIndex) -> String {
    interval.to_string().replace(':', "")
}

/// Per-scenario scatter CSVs and SVG plots for congestion and flow.
pub fn timeseries_outputs(
    name: &str,
    days: &[NaiveDate],
    congestion_profiles: &[DailyProfile],
    flow_profiles: &[DailyProfile],
) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let pick = |profiles: &[DailyProfile]| -> Vec<DailyProfile> {
        profiles.iter().filter(|p| days.contains(&p.day)).cloned().collect()
    };
    for (measure, label, profiles) in [
        ("congestion", "degree of congestion", pick(congestion_profiles)),
        ("flow", "car-hailing flow", pick(flow_profiles)),
    ] {
        for normalized in [false, true] {
            let suffix = if normalized { "_normalized" } else { "" };
            let title = format!("{name}: {label}{}", if normalized { " (normalized)" } else { "" });
            let set = TimeSeriesSet::from_profiles(&title, label, &profiles, normalized);
            let stem = format!("timeseries/{name}_{measure}{suffix}");
            files.insert(format!("{stem}.csv"), timeseries_csv(&set).into_bytes());
            files.insert(format!("{stem}.svg"), timeseries_svg(&set).into_bytes());
        }
    }
    files
}

/// Renders every analysis artifact as (relative path, bytes).
pub fn render_outputs(
    analysis: &Analysis,
    net: &RoadNetwork,
    config: &AnalysisConfig,
) -> Result<BTreeMap<String, Vec<u8>>, PipelineError> {
    let tz = config.tz_offset_s;
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();

    let mut flow_meta = MatrixMetadata::new("flow", tz);
    flow_meta.pair_dt_max_s = None;
    let mut raw_meta = MatrixMetadata::new("speed_raw", tz);
    raw_meta.pair_dt_max_s = Some(config.pair_dt_max_s);
    let mut speed_meta = MatrixMetadata::new("speed", tz);
    speed_meta.pair_dt_max_s = Some(config.pair_dt_max_s);
    speed_meta.anomaly_kmh = Some(config.anomaly_kmh);
    speed_meta.missing_fraction = Some(config.missing_fraction);
    speed_meta.dropped_road_ids = analysis.cleaned.dropped.clone();
    speed_meta.flagged_road_ids = flagged(&analysis.cleaned);
    speed_meta.anomaly_count = Some(analysis.cleaned.anomaly_count);
    speed_meta.anomaly_rate = Some(analysis.cleaned.anomaly_rate());
    let mut inrix_meta = MatrixMetadata::new("inrix", tz);
    inrix_meta.anomaly_kmh = Some(config.anomaly_kmh);
    inrix_meta.dropped_road_ids = analysis.congestion.excluded.clone();

    files.insert("flow.csv".into(), csv_bytes(&analysis.flow)?);
    files.insert("flow.meta.json".into(), json_bytes(&flow_meta));
    files.insert("speed_raw.csv".into(), csv_bytes(&analysis.speed_raw)?);
    files.insert("speed_raw.meta.json".into(), json_bytes(&raw_meta));
    files.insert("speed.csv".into(), csv_bytes(&analysis.cleaned.matrix)?);
    files.insert("speed.meta.json".into(), json_bytes(&speed_meta));
    files.insert("inrix.csv".into(), csv_bytes(&analysis.congestion.per_road)?);
    files.insert("inrix.meta.json".into(), json_bytes(&inrix_meta));
    files.insert("free_flow.json".into(), json_bytes(&analysis.congestion.free_flow));
    files.insert(
        "network_series.csv".into(),
        network_series_csv(analysis.congestion.intervals(), &analysis.congestion.network, &analysis.total_flow)?.into_bytes(),
    );
    files.insert("daily.csv".into(), daily_csv(&analysis.daily).into_bytes());
    files.insert("fitting.json".into(), json_bytes(&analysis.fits));

    for (name, days) in analysis.scenarios.iter() {
        files.extend(timeseries_outputs(name, days, &analysis.congestion_profiles, &analysis.flow_profiles));
    }
    for &interval in &config.heatmaps {
        let label = file_label(interval);
        files.insert(format!("heatmaps/flow_{label}.geojson"), json_bytes(&export_heatmap(&analysis.flow, net, interval)?));
        files.insert(
            format!("heatmaps/speed_{label}.geojson"),
            json_bytes(&export_heatmap(&analysis.cleaned.matrix, net, interval)?),
        );
    }
    Ok(files)
}

fn flagged(cleaned: &CleanedSpeeds) -> Vec<RoadId> {
    let mut ids: Vec<RoadId> = cleaned.all_zero.iter().chain(&cleaned.all_anomalous).copied().collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Writes files under `dir` in parallel and returns their sha256 digests.
pub fn write_outputs(dir: &Path, files: &BTreeMap<String, Vec<u8>>) -> Result<BTreeMap<String, String>, PipelineError> {
    files
        .par_iter()
        .map(|(rel, bytes)| {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
            }
            fs::write(&path, bytes).map_err(|e| PipelineError::io(&path, e))?;
            Ok((rel.clone(), hex::encode(Sha256::digest(bytes))))
        })
        .collect()
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()).map_err(|e| PipelineError::io(&path, e))
}

struct Run<'a> {
    dir: &'a Path,
    manifest: RunManifest,
}

impl Run<'_> {
    fn step<T>(&mut self, stage: Stage, f: impl FnOnce(&mut RunManifest) -> Result<T, PipelineError>) -> Result<T, RunFailure> {
        match f(&mut self.manifest) {
            Ok(v) => {
                self.manifest.completed_stages.push(stage);
                Ok(v)
            }
            Err(error) => Err(self.fail(stage, error)),
        }
    }

    fn fail(&mut self, stage: Stage, error: PipelineError) -> RunFailure {
        self.manifest.status = RunStatus::Failed;
        self.manifest.failed_stage = Some(stage);
        self.manifest.error = Some(error.to_string());
        if let Err(e) = write_manifest(self.dir, &self.manifest) {
            log::error!("could not write manifest: {e}");
        }
        RunFailure { stage, error, manifest: Box::new(self.manifest.clone()) }
    }

    fn finish(mut self) -> Result<RunManifest, RunFailure> {
        match write_manifest(self.dir, &self.manifest) {
            Ok(()) => Ok(self.manifest),
            Err(e) => Err(self.fail(Stage::Export, e)),
        }
    }
}

/// Full run. The manifest is written to the output directory in every case.
pub fn run_pipeline(config: &RunConfig) -> Result<RunManifest, RunFailure> {
    let config_json = serde_json::to_value(config).expect("config serializes");
    let mut run = Run { dir: &config.output_dir, manifest: RunManifest::new(config_json) };

    run.step(Stage::Config, |_| {
        config.validate()?;
        if !config.traces.is_file() {
            return Err(PipelineError::Config(format!("trace file {} not found", config.traces.display())));
        }
        Ok(())
    })?;
    let (net, skipped_features) = run.step(Stage::Network, |_| read_network(&config.network, config.max_free_flow_kmh))?;

    let offset = run.step(Stage::Offset, |m| {
        let record = match config.offset {
            Some(off) => OffsetRecord {
                dlat: off.dlat,
                dlon: off.dlon,
                source: OffsetSource::Explicit,
                sample_size: None,
                iterations: None,
            },
            None => estimate_run_offset(config, &net)?,
        };
        m.offset = Some(record.clone());
        Ok(OffsetVector { dlat: record.dlat, dlon: record.dlon })
    })?;

    let (flow, speed_raw) = run.step(Stage::Ingest, |m| {
        let (flow, speed, counts) = build_run_tensors(config, &net, offset)?;
        m.counts = Some(counts);
        Ok((flow, speed))
    })?;
    run.manifest.completed_stages.push(Stage::Tensors);
    run.manifest.days = flow.days();

    let analysis = run.step(Stage::Cleaning, |m| {
        let a = analyze(flow, speed_raw, &net, &config.analysis)?;
        m.roads = Some(RoadSummary {
            network_segments: net.len(),
            skipped_features,
            retained: a.cleaned.matrix.n_roads(),
            dropped: a.cleaned.dropped.clone(),
            flagged: flagged(&a.cleaned),
            excluded_from_congestion: a.congestion.excluded.clone(),
        });
        m.anomaly_count = Some(a.cleaned.anomaly_count);
        m.anomaly_rate = Some(a.cleaned.anomaly_rate());
        Ok(a)
    })?;
    run.manifest.completed_stages.push(Stage::Congestion);

    run.step(Stage::Export, |m| {
        let files = render_outputs(&analysis, &net, &config.analysis)?;
        m.outputs = write_outputs(&config.output_dir, &files)?;
        Ok(())
    })?;
    run.finish()
}

/// Analysis of saved `flow.csv` and `speed_raw.csv` matrices.
pub fn run_analysis(
    flow_path: &Path,
    speed_path: &Path,
    network_path: &Path,
    output_dir: &Path,
    config: &AnalysisConfig,
) -> Result<RunManifest, RunFailure> {
    let config_json = serde_json::json!({
        "flow": flow_path,
        "speed_raw": speed_path,
        "network": network_path,
        "analysis": config,
    });
    let mut run = Run { dir: output_dir, manifest: RunManifest::new(config_json) };
    run.step(Stage::Config, |_| config.validate())?;
    let (net, skipped_features) = run.step(Stage::Network, |_| read_network(network_path, DEFAULT_MAX_FREE_FLOW_KMH))?;
    let (flow, speed_raw) = run.step(Stage::Tensors, |_| {
        let open = |p: &Path| fs::File::open(p).map_err(|e| PipelineError::io(p, e));
        let flow = FlowMatrix::read_csv(open(flow_path)?)?;
        let speed = SpeedMatrix::read_csv(open(speed_path)?)?;
        Ok((flow, speed))
    })?;
    run.manifest.days = flow.days();
    let analysis = run.step(Stage::Cleaning, |m| {
        let a = analyze(flow, speed_raw, &net, config)?;
        m.roads = Some(RoadSummary {
            network_segments: net.len(),
            skipped_features,
            retained: a.cleaned.matrix.n_roads(),
            dropped: a.cleaned.dropped.clone(),
            flagged: flagged(&a.cleaned),
            excluded_from_congestion: a.congestion.excluded.clone(),
        });
        m.anomaly_count = Some(a.cleaned.anomaly_count);
        m.anomaly_rate = Some(a.cleaned.anomaly_rate());
        Ok(a)
    })?;
    run.manifest.completed_stages.push(Stage::Congestion);
    run.step(Stage::Export, |m| {
        let files = render_outputs(&analysis, &net, config)?;
        m.outputs = write_outputs(output_dir, &files)?;
        Ok(())
    })?;
    run.finish()
}

/// Parses a `network_series.csv` back into (intervals, network score, total flow).
pub fn read_network_series(text: &str) -> Result<(Vec<IntervalIndex>, Vec<Option<f64>>, Vec<u64>), PipelineError> {
    let mut lines = text.lines();
    if lines.next() != Some("interval,inrix,total_flow") {
        return Err(PipelineError::Config("network series header missing".into()));
    }
    let (mut intervals, mut inrix, mut flow) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let bad = || PipelineError::Config(format!("network series row {}: malformed", i + 1));
        let mut f = line.split(',');
        let (Some(a), Some(b), Some(c), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(bad());
        };
        intervals.push(a.parse::<IntervalIndex>().map_err(|_| bad())?);
        inrix.push(if b.is_empty() { None } else { Some(<f64 as MatrixValue>::parse(b).ok_or_else(bad)?) });
        flow.push(c.parse::<u64>().map_err(|_| bad())?);
    }
    Ok((intervals, inrix, flow))
}
