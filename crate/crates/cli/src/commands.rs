//! The four subcommands.

use std::path::{Path, PathBuf};

use prerank::diagnostics::{null_distribution, DiagnosticsError, NullDistribution, PreRankReport, QuantileGrid};
use prerank::model::{Hypernetwork, ModelError};
use prerank::numerics::NumericsError;
use prerank::preranks::{PreRank, PreRankError};
use prerank::scenarios::{run_simulation, ScenarioError, SimulationSettings};
use prerank::training::{eval_settings, evaluate, select_lambda, train, EpochRecord, TrainedModel, TrainingError};
use serde::Serialize;

use crate::config::{load, NullConfig, RunConfig, SimulateConfig};
use crate::dataset::{load_dataset, DataError, Dataset, SplitName};
use crate::output::{fmt_f64, OutputDir, RunManifest};
use crate::CliError;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub threads: Option<usize>,
}

impl Globals {
    fn config_path(&self) -> Result<&Path, CliError> {
        self.config
            .as_deref()
            .ok_or_else(|| CliError::Config("--config <path> is required".into()))
    }
}

pub(crate) fn prerank_label(p: &PreRank) -> String {
    p.to_string().replace(':', "_")
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSplit(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<DiagnosticsError> for CliError {
    fn from(e: DiagnosticsError) -> Self {
        match e {
            DiagnosticsError::PitOutOfRange(_) => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<PreRankError> for CliError {
    fn from(e: PreRankError) -> Self {
        match e {
            PreRankError::IndexOutOfRange { .. }
            | PreRankError::LagOutOfRange { .. }
            | PreRankError::ComponentOutOfRange { .. }
            | PreRankError::InvalidTemperature(_)
            | PreRankError::Parse(_) => CliError::Config(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Numerics(n) => n.into(),
            ScenarioError::PreRank(p) => p.into(),
            ScenarioError::Diagnostics(d) => d.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidCheckpoint(m) => CliError::Config(format!("invalid checkpoint: {m}")),
            ModelError::InputDimension { .. } => CliError::Data(e.to_string()),
            ModelError::PreRank(p) => p.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::InvalidConfig(m) => CliError::Config(m),
            TrainingError::InvalidData(m) => CliError::Data(m),
            TrainingError::Model(m) => m.into(),
            TrainingError::Diagnostics(d) => d.into(),
            TrainingError::PreRank(p) => p.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Config(e.to_string()))
}

fn report_rows(reports: &[PreRankReport]) -> (Vec<String>, Vec<Vec<String>>) {
    let header = ["prerank", "pce", "null_q95", "null_q99", "pass"].map(String::from).to_vec();
    let rows = reports
        .iter()
        .map(|r| {
            vec![
                r.prerank.clone(),
                fmt_f64(r.pce),
                fmt_f64(r.null_q95),
                fmt_f64(r.null_q99),
                r.pass.to_string(),
            ]
        })
        .collect();
    (header, rows)
}

#[derive(Serialize)]
struct NullSummary {
    n: usize,
    replicates: usize,
    discretization: Option<usize>,
    q95: f64,
    q99: f64,
}

impl NullSummary {
    fn of(null: &NullDistribution) -> Self {
        Self {
            n: null.n(),
            replicates: null.replicates(),
            discretization: null.discretization(),
            q95: null.quantile(0.95),
            q99: null.quantile(0.99),
        }
    }
}

#[derive(Serialize)]
struct SimulationSummary {
    misspec: &'static str,
    dim: usize,
    cases: usize,
    ensemble: usize,
    draws: usize,
    null: NullSummary,
    preranks: Vec<PreRankReport>,
    degenerate_pca_cases: Vec<(String, usize)>,
}

pub fn simulate(g: &Globals) -> Result<(), CliError> {
    let loaded = load::<SimulateConfig>(g.config_path()?, &["simulate"])?;
    let mut cfg = loaded.config;
    cfg.seed = g.seed.or(loaded.manifest_seed).unwrap_or(cfg.seed);
    if cfg.grid_levels == 0 {
        return Err(CliError::Config("grid_levels must be positive".into()));
    }
    let out = OutputDir::create(&g.out)?;
    let mut outputs: Vec<String> = cfg.preranks.iter().map(|p| format!("pits_{}.csv", prerank_label(p))).collect();
    outputs.extend(["summary.json", "summary.csv"].map(String::from));
    let manifest = RunManifest::new("simulate", cfg.seed, to_value(&cfg)?, outputs, g.threads);
    out.write_json("manifest.json", &manifest)?;

    let settings = SimulationSettings {
        cases: cfg.cases,
        ensemble: cfg.ensemble,
        preranks: cfg.preranks.clone(),
        context_samples: cfg.context_samples,
        seed: cfg.seed,
    };
    let grid = QuantileGrid::uniform(cfg.grid_levels);
    let null = null_distribution(cfg.cases, &grid, cfg.null_replicates, Some(cfg.ensemble), cfg.seed)?;
    let run = run_simulation(&cfg.truth, &cfg.misspec, &settings)?;
    let reports = run.reports(&grid, &null);

    for p in &run.pits {
        let rows: Vec<Vec<String>> = p.pits.values().iter().map(|&v| vec![fmt_f64(v)]).collect();
        out.write_csv(&format!("pits_{}.csv", prerank_label(&p.prerank)), &["pit".to_string()], &rows)?;
    }
    let summary = SimulationSummary {
        misspec: cfg.misspec.label(),
        dim: cfg.truth.dim(),
        cases: run.cases,
        ensemble: run.ensemble,
        draws: run.draws,
        null: NullSummary::of(&null),
        preranks: reports.clone(),
        degenerate_pca_cases: run
            .pits
            .iter()
            .filter(|p| matches!(p.prerank, PreRank::Pca(_)))
            .map(|p| (p.prerank.to_string(), p.degenerate_cases))
            .collect(),
    };
    out.write_json("summary.json", &summary)?;
    let (header, rows) = report_rows(&reports);
    out.write_csv("summary.csv", &header, &rows)?;
    Ok(())
}

fn load_run_config(g: &Globals, accepted: &[&str]) -> Result<RunConfig, CliError> {
    let loaded = load::<RunConfig>(g.config_path()?, accepted)?;
    let mut cfg = loaded.config;
    cfg.resolve_paths(loaded.base.as_deref());
    cfg.training.seed = g.seed.or(loaded.manifest_seed).unwrap_or(cfg.training.seed);
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let data = load_dataset(&cfg.data, cfg.training.seed)?;
    for w in &data.warnings {
        eprintln!("{}", serde_json::json!({ "warning": w }));
    }
    Ok(data)
}

fn trace_rows(cfg: &RunConfig, trace: &[EpochRecord]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["epoch".to_string(), "train_loss".into(), "val_nll".into()];
    header.extend(
        cfg.training
            .preranks
            .iter()
            .map(|w| format!("val_pce_{}", prerank_label(&w.prerank))),
    );
    header.push("val_es".into());
    let rows = trace
        .iter()
        .map(|r| {
            let mut row = vec![r.epoch.to_string(), fmt_f64(r.train_loss), fmt_f64(r.val_nll)];
            row.extend(r.val_pce.iter().map(|&v| fmt_f64(v)));
            row.push(fmt_f64(r.val_es));
            row
        })
        .collect();
    (header, rows)
}

pub fn train_cmd(g: &Globals) -> Result<(), CliError> {
    let cfg = load_run_config(g, &["train"])?;
    let out = OutputDir::create(&g.out)?;
    let mut outputs = vec!["checkpoint.json".to_string(), "trace.csv".to_string()];
    if cfg.lambda_grid.is_some() {
        outputs.push("selection.json".into());
    }
    let manifest = RunManifest::new("train", cfg.training.seed, to_value(&cfg)?, outputs, g.threads);
    out.write_json("manifest.json", &manifest)?;

    let data = load_data(&cfg)?;
    let arch = cfg.model.architecture(data.feature_names.len(), data.target_names.len());
    cfg.training.validate(arch.output_dim)?;
    let train_split = data.split(SplitName::Train);
    let val_split = data.split(SplitName::Val);
    let model: TrainedModel = match &cfg.lambda_grid {
        None => train(&arch, &train_split, &val_split, &cfg.training)?,
        Some(grid) => {
            let (selection, models) = select_lambda(&arch, &train_split, &val_split, &cfg.training, grid)?;
            out.write_json("selection.json", &selection)?;
            let pos = grid
                .iter()
                .position(|&l| l == selection.chosen)
                .expect("chosen lambda comes from the grid");
            models.into_iter().nth(pos).expect("one model per lambda")
        }
    };
    out.write("checkpoint.json", format!("{}\n", model.net.to_json()).as_bytes())?;
    let (header, rows) = trace_rows(&cfg, &model.trace);
    out.write_csv("trace.csv", &header, &rows)?;
    Ok(())
}

#[derive(Serialize)]
struct EvaluationReport {
    split: SplitName,
    points: usize,
    nll: f64,
    energy_score: f64,
    null: NullSummary,
    preranks: Vec<PreRankReport>,
}

pub fn evaluate_cmd(g: &Globals, checkpoint: Option<PathBuf>, split: Option<SplitName>) -> Result<(), CliError> {
    let mut cfg = load_run_config(g, &["train", "evaluate"])?;
    if let Some(c) = checkpoint {
        cfg.checkpoint = Some(c);
    }
    if let Some(s) = split {
        cfg.split = Some(s);
    }
    let split = *cfg.split.get_or_insert(SplitName::Test);
    let ckpt_path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Config("no checkpoint given (use --checkpoint)".into()))?;
    cfg.lambda_grid = None;
    let out = OutputDir::create(&g.out)?;
    let outputs = vec!["report.json".to_string(), "report.csv".to_string()];
    let manifest = RunManifest::new("evaluate", cfg.training.seed, to_value(&cfg)?, outputs, g.threads);
    out.write_json("manifest.json", &manifest)?;

    let text = std::fs::read_to_string(&ckpt_path)
        .map_err(|e| CliError::Config(format!("cannot read checkpoint {}: {e}", ckpt_path.display())))?;
    let net = Hypernetwork::from_json(&text)?;
    let data = load_data(&cfg)?;
    let arch = net.architecture();
    if arch.input_dim != data.feature_names.len() || arch.output_dim != data.target_names.len() {
        return Err(CliError::Data(format!(
            "checkpoint expects {} features and {} targets, data has {} and {}",
            arch.input_dim,
            arch.output_dim,
            data.feature_names.len(),
            data.target_names.len()
        )));
    }
    let rows = data.split(split);
    if rows.is_empty() {
        return Err(CliError::Data(format!("split {} is empty", split.as_str())));
    }
    let settings = eval_settings(&cfg.training);
    let ev = evaluate(&net, &rows, &settings)?;
    let null = null_distribution(
        ev.points,
        &settings.grid,
        cfg.null_replicates,
        Some(settings.ensemble),
        cfg.training.seed,
    )?;
    let reports = ev.reports(&settings.grid, &null);
    let report = EvaluationReport {
        split,
        points: ev.points,
        nll: ev.nll,
        energy_score: ev.energy_score,
        null: NullSummary::of(&null),
        preranks: reports.clone(),
    };
    out.write_json("report.json", &report)?;
    let (mut header, mut table) = report_rows(&reports);
    header.extend(["nll", "energy_score"].map(String::from));
    for row in &mut table {
        row.push(fmt_f64(ev.nll));
        row.push(fmt_f64(ev.energy_score));
    }
    out.write_csv("report.csv", &header, &table)?;
    Ok(())
}

/// Overrides for `nulldist` given on the command line.
#[derive(Debug, Clone, Default)]
pub struct NullFlags {
    pub n: Option<usize>,
    pub replicates: Option<usize>,
    pub discretization: Option<usize>,
    pub grid_levels: Option<usize>,
}

pub fn nulldist(g: &Globals, flags: &NullFlags) -> Result<(), CliError> {
    let (mut cfg, manifest_seed) = match &g.config {
        Some(path) => {
            let loaded = load::<NullConfig>(path, &["nulldist"])?;
            (loaded.config, loaded.manifest_seed)
        }
        None => {
            let n = flags
                .n
                .ok_or_else(|| CliError::Config("nulldist needs --n or --config".into()))?;
            let cfg: NullConfig = serde_json::from_value(serde_json::json!({ "n": n }))
                .map_err(|e| CliError::Config(e.to_string()))?;
            (cfg, None)
        }
    };
    if let Some(n) = flags.n {
        cfg.n = n;
    }
    if let Some(b) = flags.replicates {
        cfg.replicates = b;
    }
    if flags.discretization.is_some() {
        cfg.discretization = flags.discretization;
    }
    if let Some(l) = flags.grid_levels {
        cfg.grid_levels = l;
    }
    cfg.seed = g.seed.or(manifest_seed).unwrap_or(cfg.seed);
    if cfg.grid_levels == 0 || cfg.discretization == Some(0) {
        return Err(CliError::Config("grid_levels and discretization must be positive".into()));
    }
    let out = OutputDir::create(&g.out)?;
    let outputs = vec!["null.csv".to_string(), "quantiles.csv".to_string()];
    let manifest = RunManifest::new("nulldist", cfg.seed, to_value(&cfg)?, outputs, g.threads);
    out.write_json("manifest.json", &manifest)?;

    let grid = QuantileGrid::uniform(cfg.grid_levels);
    let null = null_distribution(cfg.n, &grid, cfg.replicates, cfg.discretization, cfg.seed)?;
    let rows: Vec<Vec<String>> = null.statistics().iter().map(|&v| vec![fmt_f64(v)]).collect();
    out.write_csv("null.csv", &["pce".to_string()], &rows)?;
    let levels = [0.5, 0.9, 0.95, 0.99];
    let q: Vec<Vec<String>> = levels
        .iter()
        .map(|&l| vec![fmt_f64(l), fmt_f64(null.quantile(l))])
        .collect();
    out.write_csv("quantiles.csv", &["level".to_string(), "pce".to_string()], &q)?;
    Ok(())
}
