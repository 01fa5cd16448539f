//! Command-line front end. Every subcommand reads an optional JSON config,
//! writes its artifacts under `--out`, and reports through the exit code:
//! 0 success, 1 a verification failed, 2 usage or config error, 3 numerical
//! failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::arch::{ArchError, Container, ContainerError, LossKind, NormPlacement, Variant};
use crate::data::Dataset;
use crate::experiments::{
    depth_sweep, flatness_experiment, gradcheck_architecture, trend_test, DataSpec, ExperimentError,
    GradCheckConfig, Metric, SweepResult, SweepSidecar, TrainConfig,
};
use crate::gufm::{solve_closed_form, solve_numeric, GufmError, GufmProblem, GufmSolution, NumericOptions};
use crate::metrics::{report, MetricsError, NcReport, Nc2Kind};
use crate::numerics::{norm, Matrix, NumericsError};
use crate::synthesis::{loss_gap_curve, synthesize, SynthesisConfig, SynthesisError};

#[derive(Debug, Parser)]
#[command(name = "collapse-lab", version, about = "Neural-collapse metrics, solvers and constructions")]
pub struct Cli {
    /// JSON config; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the master seed of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 0 or unset lets rayon decide.
    #[arg(long, global = true, env = "COLLAPSE_LAB_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Solve the unconstrained-features problem and certify collapse.
    Gufm,
    /// Collapse metrics of given features, classifier and labels.
    Metrics,
    /// Build a deep network whose features reach the GUFM optimum.
    Synthesize,
    /// Objective gap of synthesized networks along a depth grid.
    Gapcurve,
    /// Train across depths and seeds and test the NC1 trend.
    Sweep,
    /// Finite-difference check of every architecture's gradient.
    Gradcheck,
    /// Compare the two-layer NC1 trend against the one-layer one.
    Flatness,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("numerical failure: {0}")]
    NonFinite(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Usage(_) => 2,
            CliError::NonFinite(_) => 3,
        }
    }
}

impl From<GufmError> for CliError {
    fn from(e: GufmError) -> Self {
        match e {
            GufmError::NonFinite => CliError::NonFinite(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ArchError> for CliError {
    fn from(e: ArchError) -> Self {
        match e {
            ArchError::Numerics(NumericsError::ZeroVariance { .. }) => CliError::NonFinite(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<SynthesisError> for CliError {
    fn from(e: SynthesisError) -> Self {
        match e {
            SynthesisError::Gufm(g) => g.into(),
            SynthesisError::Arch(a) => a.into(),
            SynthesisError::Numerics(n @ NumericsError::ZeroVariance { .. }) => CliError::NonFinite(n.to_string()),
            SynthesisError::MarginBelowFloor { .. } | SynthesisError::CollisionPersists { .. } => {
                CliError::Verification(e.to_string())
            }
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::NonFinite { .. } => CliError::NonFinite(e.to_string()),
            ExperimentError::Arch(a) => a.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    ClosedForm,
    Numeric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GufmConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub lambda: f64,
    pub loss: LossKind,
    pub solver: Solver,
    pub numeric: NumericOptions,
}

impl Default for GufmConfig {
    fn default() -> Self {
        GufmConfig {
            classes: 3,
            per_class: 2,
            dim: 8,
            lambda: 0.1,
            loss: LossKind::Mse,
            solver: Solver::ClosedForm,
            numeric: NumericOptions::default(),
        }
    }
}

/// File paths are CSV without headers and resolve against the config's
/// directory: features one sample per row, weights one class per row,
/// labels one integer per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub features: PathBuf,
    pub weights: PathBuf,
    pub labels: PathBuf,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub last_bias: bool,
}

fn default_loss() -> LossKind {
    LossKind::Ce
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesizeConfig {
    pub data: DataSpec,
    /// Feature width `d`.
    pub dim: usize,
    pub loss: LossKind,
    pub synthesis: SynthesisConfig,
}

impl Default for SynthesizeConfig {
    fn default() -> Self {
        SynthesizeConfig {
            data: DataSpec::Classification { classes: 3, per_class: 2, input_dim: 4, seed: 7 },
            dim: 8,
            loss: LossKind::Ce,
            synthesis: SynthesisConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapCurveConfig {
    pub data: DataSpec,
    pub dim: usize,
    pub loss: LossKind,
    /// Values of `L₁ = L₂`.
    pub grid: Vec<usize>,
    pub synthesis: SynthesisConfig,
}

impl Default for GapCurveConfig {
    fn default() -> Self {
        let base = SynthesizeConfig::default();
        GapCurveConfig {
            data: base.data,
            dim: base.dim,
            loss: base.loss,
            grid: vec![50, 100, 200, 400],
            synthesis: base.synthesis,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckCommandConfig {
    pub variants: Vec<Variant>,
    pub placements: Vec<NormPlacement>,
    pub check: GradCheckConfig,
}

impl Default for GradCheckCommandConfig {
    fn default() -> Self {
        GradCheckCommandConfig {
            variants: Variant::ALL.to_vec(),
            placements: vec![NormPlacement::Post, NormPlacement::Pre],
            check: GradCheckConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlatnessConfig {
    /// One-layer sweep whose NC1 change sets the limit.
    pub reference: TrainConfig,
    pub two_layer: TrainConfig,
}

impl Default for FlatnessConfig {
    fn default() -> Self {
        FlatnessConfig { reference: TrainConfig::default(), two_layer: TrainConfig::two_layer_contrast() }
    }
}

/// Parses `args` (program name first), runs the command, prints any error
/// to standard error and returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("collapse-lab: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| {
        fs::create_dir_all(&cli.out).map_err(|e| io_error(&cli.out, e))?;
        match cli.command {
            Command::Gufm => cmd_gufm(cli),
            Command::Metrics => cmd_metrics(cli),
            Command::Synthesize => cmd_synthesize(cli),
            Command::Gapcurve => cmd_gapcurve(cli),
            Command::Sweep => cmd_sweep(cli),
            Command::Gradcheck => cmd_gradcheck(cli),
            Command::Flatness => cmd_flatness(cli),
        }
    })
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| io_error(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    write_text(dir, name, &text)
}

fn save_container(dir: &Path, name: &str, container: &Container) -> Result<(), CliError> {
    let path = dir.join(name);
    container.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gufm(cli: &Cli) -> Result<(), CliError> {
    let mut config: GufmConfig = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.numeric.seed = seed;
    }
    let problem = GufmProblem::balanced(config.classes, config.per_class, config.dim, config.lambda, config.loss.into())?;
    let solution = match config.solver {
        Solver::ClosedForm => solve_closed_form(&problem)?,
        Solver::Numeric => solve_numeric(&problem, &config.numeric)?,
    };
    if !solution.loss.is_finite() {
        return Err(CliError::NonFinite("GUFM loss".into()));
    }
    save_container(&cli.out, "gufm.bin", &solution.to_container())?;
    write_json(&cli.out, "certificate.json", &certificate(&config, &solution))
}

fn certificate(config: &GufmConfig, solution: &GufmSolution) -> serde_json::Value {
    let norms: Vec<f64> = (0..solution.w.rows()).map(|k| norm(&solution.w.row(k))).collect();
    json!({
        "config": config,
        "loss": solution.loss,
        "classifier_row_norms": norms,
        "certificate": solution.certificate,
    })
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let bad = |e: &dyn std::fmt::Display| CliError::Usage(format!("{}: {e}", path.display()));
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(|e| bad(&e))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(&e))?;
        let row = record.iter().map(|f| f.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|e| bad(&e))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(bad(&"file is empty"));
    }
    Ok(rows)
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

fn cmd_metrics(cli: &Cli) -> Result<(), CliError> {
    let path = cli.config.as_deref().ok_or_else(|| CliError::Usage("metrics needs --config".into()))?;
    let config: MetricsConfig = serde_json::from_str(&fs::read_to_string(path).map_err(|e| io_error(path, e))?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let features = read_rows(&base.join(&config.features))?;
    let weights = read_rows(&base.join(&config.weights))?;
    let labels: Vec<usize> = read_rows(&base.join(&config.labels))?
        .iter()
        .map(|r| match r.as_slice() {
            [l] if *l >= 0.0 && l.fract() == 0.0 => Ok(*l as usize),
            _ => Err(CliError::Usage("labels file needs one non-negative integer per row".into())),
        })
        .collect::<Result<_, _>>()?;
    if features.iter().chain(&weights).any(|r| r.len() != features[0].len()) {
        return Err(CliError::Usage("features and weights need the same number of columns on every row".into()));
    }
    let nc = report(&rows_to_matrix(&weights), &rows_to_matrix(&features).transpose(), &labels, config.loss, config.last_bias)?;
    write_json(&cli.out, "nc_report.json", &nc)?;
    write_text(&cli.out, "nc_report.csv", &nc_csv(&nc))
}

fn nc_csv(nc: &NcReport) -> String {
    use crate::metrics::format_sig17 as f;
    let which = match nc.which_nc2 {
        Nc2Kind::A => "a",
        Nc2Kind::B => "b",
    };
    format!("nc1,nc2a,nc2b,nc3,which_nc2\n{},{},{},{},{which}\n", f(nc.nc1), f(nc.nc2a), f(nc.nc2b), f(nc.nc3))
}

fn synthesis_inputs(
    data: &DataSpec,
    dim: usize,
    loss: LossKind,
    synthesis: &SynthesisConfig,
) -> Result<(Dataset, GufmSolution), CliError> {
    let dataset = data.build()?;
    let tokens = matches!(data, DataSpec::Language { .. });
    if tokens != synthesis.variant.is_transformer() {
        return Err(CliError::Usage("transformers need language data and ResNets need classification data".into()));
    }
    let problem = dataset.gufm_problem(dim, synthesis.lambda, loss.into())?;
    let solution = solve_closed_form(&problem)?;
    Ok((dataset, solution))
}

fn cmd_synthesize(cli: &Cli) -> Result<(), CliError> {
    let mut config: SynthesizeConfig = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.synthesis.seed = seed;
    }
    let (dataset, solution) = synthesis_inputs(&config.data, config.dim, config.loss, &config.synthesis)?;
    let built = synthesize(&dataset, &solution, &config.synthesis)?;
    let verification = built.verify(&dataset)?;
    let metadata = json!({ "variant": config.synthesis.variant, "gufm_loss": solution.loss });
    save_container(&cli.out, "network.bin", &Container::from_network(&built.network(), NormPlacement::Post, metadata))?;
    write_json(&cli.out, "ledger.json", built.ledger())?;
    write_json(&cli.out, "verification.json", &verification)?;
    if !built.ledger().sums_within_bounds() {
        return Err(CliError::Verification("a stage regularization sum exceeds its bound".into()));
    }
    if !verification.passed {
        let names: Vec<&str> = verification.failures().iter().map(|a| a.name.as_str()).collect();
        return Err(CliError::Verification(names.join(", ")));
    }
    Ok(())
}

fn cmd_gapcurve(cli: &Cli) -> Result<(), CliError> {
    let mut config: GapCurveConfig = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.synthesis.seed = seed;
    }
    if config.grid.is_empty() {
        return Err(CliError::Usage("grid must be nonempty".into()));
    }
    let (dataset, solution) = synthesis_inputs(&config.data, config.dim, config.loss, &config.synthesis)?;
    let curve = loss_gap_curve(&dataset, &solution, config.loss, &config.grid, &config.synthesis)?;
    write_text(&cli.out, "gapcurve.csv", &curve.to_csv())?;
    let ok = curve.positive_and_decreasing();
    write_json(&cli.out, "gapcurve.json", &json!({ "slope": curve.slope, "positive_and_decreasing": ok }))?;
    if ok {
        Ok(())
    } else {
        Err(CliError::Verification("gap is not positive and strictly decreasing".into()))
    }
}

fn master_seed(cli: &Cli) -> u64 {
    cli.seed.unwrap_or(0)
}

fn write_sweep(dir: &Path, stem: &str, config: &TrainConfig, seed: u64, sweep: &SweepResult) -> Result<(), CliError> {
    if sweep.rows.is_empty() && !sweep.dropped.is_empty() {
        return Err(CliError::NonFinite(format!("every run diverged, first: {}", sweep.dropped[0].reason)));
    }
    write_text(dir, &format!("{stem}.csv"), &sweep.to_csv())?;
    let sidecar = SweepSidecar {
        config: config.clone(),
        master_seed: seed,
        dropped_count: sweep.dropped.len(),
        dropped: sweep.dropped.clone(),
    };
    write_json(dir, &format!("{stem}.json"), &sidecar)
}

fn cmd_sweep(cli: &Cli) -> Result<(), CliError> {
    let config: TrainConfig = load_config(cli.config.as_deref())?;
    let seed = master_seed(cli);
    let sweep = depth_sweep(&config, seed)?;
    write_sweep(&cli.out, "sweep", &config, seed, &sweep)?;
    let trends: Vec<_> =
        [Metric::Nc1, Metric::Nc2a, Metric::Nc2b, Metric::Nc3].iter().map(|&m| trend_test(&sweep.rows, m)).collect();
    write_json(&cli.out, "trend.json", &trends)
}

fn cmd_gradcheck(cli: &Cli) -> Result<(), CliError> {
    let mut config: GradCheckCommandConfig = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.check.seed = seed;
    }
    let mut rows = Vec::new();
    for &variant in &config.variants {
        for &placement in &config.placements {
            rows.push(gradcheck_architecture(variant, placement, &config.check)?);
        }
    }
    write_json(&cli.out, "gradcheck.json", &rows)?;
    let failed: Vec<String> = rows.iter().filter(|r| !r.passed).map(|r| format!("{}/{}", r.variant, r.placement)).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("relative error above tolerance for {}", failed.join(", "))))
    }
}

fn cmd_flatness(cli: &Cli) -> Result<(), CliError> {
    let config: FlatnessConfig = load_config(cli.config.as_deref())?;
    let seed = master_seed(cli);
    let reference = depth_sweep(&config.reference, seed)?;
    write_sweep(&cli.out, "reference", &config.reference, seed, &reference)?;
    let flat = flatness_experiment(&config.two_layer, seed, Some(&reference.rows))?;
    write_sweep(&cli.out, "two_layer", &config.two_layer, seed, &flat.sweep)?;
    let limit = flat.contrast_change.map(|c| c / 2.0);
    let passed = limit.is_some_and(|l| flat.change <= l);
    write_json(
        &cli.out,
        "flatness.json",
        &json!({
            "change": flat.change,
            "spread": flat.spread,
            "reference_change": flat.contrast_change,
            "limit": limit,
            "passed": passed,
            "trend": flat.trend,
        }),
    )?;
    if passed {
        Ok(())
    } else {
        Err(CliError::Verification(format!("two-layer NC1 change {} exceeds {:?}", flat.change, limit)))
    }
}
