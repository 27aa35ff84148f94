use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hailtraffic::congestion::{daily_profiles, ScenarioGroups};
use hailtraffic::export::export_heatmap;
use hailtraffic::ingest::{HeaderMode, IntervalIndex};
use hailtraffic::matching::OffsetVector;
use hailtraffic::matrix::{MatrixMetadata, SpeedMatrix};
use hailtraffic::pipeline::{
    estimate_run_offset, read_network, read_network_series, run_analysis, run_pipeline, timeseries_outputs,
    write_outputs, AnalysisConfig, PipelineError, RunConfig, RunFailure, RunManifest, DEFAULT_MAX_FREE_FLOW_KMH,
};
use hailtraffic::synth::{generate, Scenario};

mod config;

use config::{
    offset_from_pair, parse_columns, parse_delimiter, parse_intervals, parse_offset, parse_scenario_flag, scenario_groups,
    FileConfig,
};

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        Self { code: e.exit_code() as u8, message: e.to_string() }
    }
}

impl From<RunFailure> for CliError {
    fn from(f: RunFailure) -> Self {
        Self { code: f.exit_code() as u8, message: f.to_string() }
    }
}

#[derive(Parser, Debug)]
#[command(name = "hailtraffic", version, about = "Road-level traffic patterns from car-hailing GPS traces")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the full pipeline: ingest, match, tensors, cleaning, analysis, export.
    Estimate(EstimateArgs),
    /// Print the estimated coordinate shift as JSON.
    Offset(OffsetArgs),
    /// Clean and analyze saved flow.csv / speed_raw.csv matrices.
    Analyze(AnalyzeArgs),
    /// Write one GeoJSON heatmap layer of a matrix.
    Heatmap(HeatmapArgs),
    /// Write scatter CSVs and SVG plots for one scenario of a finished run.
    Timeseries(TimeseriesArgs),
    /// Generate a synthetic network, traces and ground truth.
    Synth(SynthArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum HeaderArg {
    Auto,
    Present,
    Absent,
}

impl From<HeaderArg> for HeaderMode {
    fn from(h: HeaderArg) -> Self {
        match h {
            HeaderArg::Auto => HeaderMode::Auto,
            HeaderArg::Present => HeaderMode::Present,
            HeaderArg::Absent => HeaderMode::Absent,
        }
    }
}

#[derive(Args, Debug, Default)]
struct IngestArgs {
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long)]
    network: Option<PathBuf>,
    /// Rows per parse chunk.
    #[arg(long)]
    chunk_size: Option<usize>,
    /// Matching gate in kilometres.
    #[arg(long)]
    max_dist_km: Option<f64>,
    /// Largest tolerated share of rejected rows.
    #[arg(long)]
    error_ceiling: Option<f64>,
    /// Network free-flow speeds above this are rejected.
    #[arg(long)]
    max_free_flow_kmh: Option<f64>,
    /// Explicit shift `DLAT,DLON` in degrees; skips estimation.
    #[arg(long, value_parser = parse_offset, allow_hyphen_values = true)]
    offset: Option<OffsetVector>,
    /// Records sampled for offset estimation.
    #[arg(long)]
    offset_sample: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Column order, e.g. `driver_id,order_id,timestamp,lon,lat`.
    #[arg(long)]
    columns: Option<String>,
    #[arg(long)]
    delimiter: Option<char>,
    #[arg(long, value_enum)]
    header: Option<HeaderArg>,
    /// Local time offset from UTC in seconds.
    #[arg(long, allow_hyphen_values = true)]
    tz_offset_s: Option<i64>,
}

#[derive(Args, Debug, Default)]
struct AnalysisArgs {
    /// Consecutive pings further apart than this do not form a pair.
    #[arg(long)]
    pair_dt_max_s: Option<i64>,
    #[arg(long)]
    anomaly_kmh: Option<f64>,
    /// Roads with a larger share of empty intervals are dropped.
    #[arg(long)]
    missing_fraction: Option<f64>,
    /// Date group `NAME=DATE,DATE,...`; repeatable.
    #[arg(long = "scenario", value_parser = parse_scenario_flag)]
    scenarios: Vec<(String, Vec<NaiveDate>)>,
    /// Interval label (`YYYY-MM-DDTHH:MM`) to export heatmaps for; repeatable.
    #[arg(long = "heatmap")]
    heatmaps: Vec<String>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    ingest: IngestArgs,
    #[command(flatten)]
    analysis: AnalysisArgs,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OffsetArgs {
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Directory holding flow.csv and speed_raw.csv.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    tz_offset_s: Option<i64>,
    #[command(flatten)]
    analysis: AnalysisArgs,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    /// Matrix CSV (flow, speed or inrix).
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    network: Option<PathBuf>,
    /// Interval label, e.g. `2016-10-01T08:00`.
    #[arg(long)]
    interval: String,
    /// Output file; stdout when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TimeseriesArgs {
    /// Scenario name; `all` covers every day when not configured.
    #[arg(long)]
    scenario: String,
    /// Run directory holding network_series.csv.
    #[arg(long)]
    input: PathBuf,
    #[arg(long = "group", value_parser = parse_scenario_flag)]
    groups: Vec<(String, Vec<NaiveDate>)>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scenario TOML; defaults apply to missing keys.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    output: PathBuf,
}

fn required(flag: Option<PathBuf>, file: Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or(file).ok_or_else(|| CliError::config(format!("missing --{name} (flag or config key `{name}`)")))
}

fn analysis_config(args: AnalysisArgs, tz: Option<i64>, file: &FileConfig) -> Result<AnalysisConfig, CliError> {
    let d = AnalysisConfig::default();
    let heatmaps = if args.heatmaps.is_empty() { file.heatmaps.clone().unwrap_or_default() } else { args.heatmaps };
    Ok(AnalysisConfig {
        tz_offset_s: tz.or(file.tz_offset_s).unwrap_or(d.tz_offset_s),
        pair_dt_max_s: args.pair_dt_max_s.or(file.pair_dt_max_s).unwrap_or(d.pair_dt_max_s),
        anomaly_kmh: args.anomaly_kmh.or(file.anomaly_kmh).unwrap_or(d.anomaly_kmh),
        missing_fraction: args.missing_fraction.or(file.missing_fraction).unwrap_or(d.missing_fraction),
        scenarios: scenario_groups(&args.scenarios, file.scenarios.as_ref())?,
        heatmaps: parse_intervals(&heatmaps)?,
    })
}

fn run_config(ingest: IngestArgs, analysis: AnalysisArgs, output: Option<PathBuf>, file: &FileConfig) -> Result<RunConfig, CliError> {
    let traces = required(ingest.traces, file.traces.clone(), "traces")?;
    let network = required(ingest.network, file.network.clone(), "network")?;
    let output = output.or(file.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let mut cfg = RunConfig::new(traces, network, output);
    if let Some(c) = ingest.columns.or(file.columns.clone()) {
        cfg.parse.columns = parse_columns(&c)?;
    }
    if let Some(d) = ingest.delimiter.or(file.delimiter) {
        cfg.parse.delimiter = parse_delimiter(d)?;
    }
    if let Some(h) = ingest.header.map(HeaderMode::from).or(file.header) {
        cfg.parse.header = h;
    }
    cfg.chunk_size = ingest.chunk_size.or(file.chunk_size).unwrap_or(cfg.chunk_size);
    cfg.max_dist_km = ingest.max_dist_km.or(file.max_dist_km).unwrap_or(cfg.max_dist_km);
    cfg.error_ceiling = ingest.error_ceiling.or(file.error_ceiling).unwrap_or(cfg.error_ceiling);
    cfg.max_free_flow_kmh = ingest.max_free_flow_kmh.or(file.max_free_flow_kmh).unwrap_or(cfg.max_free_flow_kmh);
    cfg.offset = match (ingest.offset, file.offset) {
        (Some(o), _) => Some(o),
        (None, Some(pair)) => Some(offset_from_pair(pair)?),
        (None, None) => None,
    };
    cfg.offset_sample = ingest.offset_sample.or(file.offset_sample).unwrap_or(cfg.offset_sample);
    cfg.seed = ingest.seed.or(file.seed).unwrap_or(cfg.seed);
    cfg.analysis = analysis_config(analysis, ingest.tz_offset_s, file)?;
    cfg.validate()?;
    Ok(cfg)
}

fn report(manifest: &RunManifest) {
    if let Some(c) = manifest.counts {
        log::info!(
            "rows {} parsed {} matched {} unmatched {} skipped {}",
            c.rows,
            c.parsed,
            c.matched,
            c.unmatched,
            c.skipped
        );
    }
    log::info!("{} output files written", manifest.outputs.len());
}

fn estimate(args: EstimateArgs, file: &FileConfig) -> Result<(), CliError> {
    let cfg = run_config(args.ingest, args.analysis, args.output, file)?;
    let manifest = run_pipeline(&cfg)?;
    report(&manifest);
    println!("{}", cfg.output_dir.join(hailtraffic::pipeline::MANIFEST_FILE).display());
    Ok(())
}

#[derive(Serialize)]
struct OffsetOutput {
    dlat: f64,
    dlon: f64,
    sample_size: Option<usize>,
    iterations: Option<usize>,
}

fn offset(args: OffsetArgs, file: &FileConfig) -> Result<(), CliError> {
    let mut cfg = run_config(args.ingest, AnalysisArgs::default(), None, file)?;
    cfg.offset = None;
    cfg.validate()?;
    if !cfg.traces.is_file() {
        return Err(CliError::config(format!("trace file {} not found", cfg.traces.display())));
    }
    let (net, _) = read_network(&cfg.network, cfg.max_free_flow_kmh)?;
    let est = estimate_run_offset(&cfg, &net)?;
    let out = OffsetOutput { dlat: est.dlat, dlon: est.dlon, sample_size: est.sample_size, iterations: est.iterations };
    println!("{}", serde_json::to_string(&out).expect("serializable"));
    Ok(())
}

fn analyze(args: AnalyzeArgs, file: &FileConfig) -> Result<(), CliError> {
    let network = required(args.network, file.network.clone(), "network")?;
    let output = args.output.or(file.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let cfg = analysis_config(args.analysis, args.tz_offset_s, file)?;
    let manifest = run_analysis(
        &args.input.join("flow.csv"),
        &args.input.join("speed_raw.csv"),
        &network,
        &output,
        &cfg,
    )?;
    report(&manifest);
    Ok(())
}

fn heatmap(args: HeatmapArgs, file: &FileConfig) -> Result<(), CliError> {
    let network = required(args.network, file.network.clone(), "network")?;
    let interval: IntervalIndex = args.interval.parse().map_err(|e: hailtraffic::ingest::IntervalLabelError| CliError::config(e.to_string()))?;
    let (net, _) = read_network(&network, file.max_free_flow_kmh.unwrap_or(DEFAULT_MAX_FREE_FLOW_KMH))?;
    let f = fs::File::open(&args.matrix).map_err(|e| CliError::config(format!("{}: {e}", args.matrix.display())))?;
    let matrix = SpeedMatrix::read_csv(f).map_err(|e| CliError::config(format!("{}: {e}", args.matrix.display())))?;
    let doc = export_heatmap(&matrix, &net, interval).map_err(|e| CliError::config(e.to_string()))?;
    let text = serde_json::to_string_pretty(&doc).expect("serializable") + "\n";
    match args.output {
        Some(path) => write_file(&path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn timeseries(args: TimeseriesArgs, file: &FileConfig) -> Result<(), CliError> {
    let path = args.input.join("network_series.csv");
    let text = fs::read_to_string(&path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let (intervals, inrix, flow) = read_network_series(&text)?;
    let groups = scenario_groups(&args.groups, file.scenarios.as_ref())?;
    let mut congestion = daily_profiles(&intervals, &inrix);
    let flow_values: Vec<Option<f64>> = flow.iter().map(|v| Some(*v as f64)).collect();
    let mut flow_profiles = daily_profiles(&intervals, &flow_values);
    for p in congestion.iter_mut().chain(flow_profiles.iter_mut()) {
        p.normalize();
    }
    let all_days: Vec<NaiveDate> = congestion.iter().map(|p| p.day).collect();
    let groups = if groups.is_empty() { ScenarioGroups::all(all_days) } else { groups };
    let days = groups
        .get(&args.scenario)
        .ok_or_else(|| CliError::config(format!("unknown scenario `{}`", args.scenario)))?;
    let files = timeseries_outputs(&args.scenario, days, &congestion, &flow_profiles);
    let output = args.output.unwrap_or(args.input);
    write_outputs(&output, &files)?;
    for name in files.keys() {
        println!("{}", output.join(name).display());
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), CliError> {
    let mut scenario: Scenario = match &args.scenario {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
        }
        None => Scenario::default(),
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let syn = generate(&scenario).map_err(|e| CliError::config(e.to_string()))?;
    let out = &args.output;
    let mut traces = Vec::new();
    syn.write_traces(&mut traces).map_err(|e| CliError::config(e.to_string()))?;
    write_file(&out.join("traces.csv"), &traces)?;
    write_file(&out.join("network.geojson"), (syn.network.to_geojson().to_string() + "\n").as_bytes())?;

    let truth = &syn.truth;
    let matrix_bytes = |m: &SpeedMatrix| {
        let mut buf = Vec::new();
        m.write_csv(&mut buf).map(|_| buf).map_err(|e| CliError::config(e.to_string()))
    };
    let mut flow = Vec::new();
    truth.flow.write_csv(&mut flow).map_err(|e| CliError::config(e.to_string()))?;
    write_file(&out.join("truth/flow.csv"), &flow)?;
    write_file(&out.join("truth/speed.csv"), &matrix_bytes(&truth.speed)?)?;
    write_file(&out.join("truth/kinematic_speed.csv"), &matrix_bytes(&truth.kinematic_speed)?)?;
    let mut anomaly_cells = Vec::new();
    if let Some((m, cells)) = &truth.anomalous_speed {
        write_file(&out.join("truth/speed_anomalous.csv"), &matrix_bytes(m)?)?;
        anomaly_cells = cells.iter().map(|&(r, c)| (m.road_ids()[r].0, m.intervals()[c].to_string())).collect();
    }
    let summary = serde_json::json!({
        "scenario": scenario,
        "records": truth.records,
        "orders": truth.orders,
        "road_speed_kmh": truth.road_speed_kmh.iter().map(|(k, v)| (k.0.to_string(), *v)).collect::<std::collections::BTreeMap<_, _>>(),
        "anomaly_cells": anomaly_cells,
        "matrix": MatrixMetadata::new("truth", scenario.tz_offset_s),
    });
    write_file(&out.join("truth/summary.json"), (serde_json::to_string_pretty(&summary).expect("json") + "\n").as_bytes())?;
    println!("{} records, {} orders, {} roads", truth.records, truth.orders, syn.network.len());
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::config(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Estimate(a) => estimate(a, &file),
        Command::Offset(a) => offset(a, &file),
        Command::Analyze(a) => analyze(a, &file),
        Command::Heatmap(a) => heatmap(a, &file),
        Command::Timeseries(a) => timeseries(a, &file),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
