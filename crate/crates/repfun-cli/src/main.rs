//! Command line front end: simulate benchmark data, fit or cross-validate a
//! model on CSV curve data, evaluate a saved fit, and export coefficient
//! curves.

mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use repfun::basis::BasisSystem;
use repfun::dataset::FunctionalDataset;
use repfun::estimators::{
    calibrate_classifier, cross_validate, fit_fu, fit_gful, fit_gl1, fit_gl2, fit_hg, fit_mfpcr,
    CvConfig, CvTask, FitResult, Method, ModelConfig,
};
use repfun::geometry::{
    agglomerative_groups, kmeans_groups, nearest_neighbor_map, ConditionGrouping, ConditionSet,
    Metric,
};
use repfun::simulate::{
    fitting_basis, run_experiment, simulate_dataset, ScenarioSpec, GRID_POINTS,
};
use repfun::solver::SolverOptions;

use io::FitArtifact;

/// Errors split by exit code: usage and validation problems exit 2, runtime
/// and numerical failures exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<repfun::error::Error> for CliError {
    fn from(err: repfun::error::Error) -> Self {
        use repfun::error::Error;
        match err {
            Error::InvalidParameter(_) | Error::ShapeMismatch(_) => CliError::Usage(err.to_string()),
            _ => CliError::Runtime(err.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "repfun", version, about = "Penalized regression for repeated functional data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark scenario and optionally run the method comparison
    Simulate(SimulateArgs),
    /// Fit one method at fixed tuning parameters
    Fit(FitArgs),
    /// Cross-validate tuning parameters, then refit on the full data
    Cv(CvArgs),
    /// Score a saved fit on a dataset
    Evaluate(EvaluateArgs),
    /// Export fitted coefficient functions on a time grid
    Export(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Fu,
    Gful,
    Gl1,
    Gl2,
    Hg,
    Mfpcr,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Fu => Method::Fu,
            MethodArg::Gful => Method::Gful,
            MethodArg::Gl1 => Method::Gl1,
            MethodArg::Gl2 => Method::Gl2,
            MethodArg::Hg => Method::Hg,
            MethodArg::Mfpcr => Method::Mfpcr,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Euclidean,
    Greatcircle,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Metric {
        match m {
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Greatcircle => Metric::GreatCircle,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Regress,
    Classify,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario name: s1 (12 dimensions) or s2 (80 dimensions)
    #[arg(long)]
    scenario: String,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replicates for the method comparison
    #[arg(long)]
    replicates: Option<usize>,
    /// Methods to compare; pass --methods none to only write the data
    #[arg(long, value_delimiter = ',', default_values_t = vec![
        "fu".to_string(), "gful".to_string(), "gl1".to_string(),
        "gl2".to_string(), "hg".to_string(), "mfpcr".to_string(),
    ])]
    methods: Vec<String>,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 150)]
    lambda_grid_size: usize,
}

#[derive(Args)]
struct DataArgs {
    /// Curve samples as subject_id,dim_id,t,value rows
    #[arg(long)]
    curves: PathBuf,
    /// Responses as subject_id,y rows
    #[arg(long)]
    responses: PathBuf,
    /// Condition coordinates as dim_id,coord_1,... rows
    #[arg(long)]
    conditions: Option<PathBuf>,
    /// Known grouping as dim_id,group_id rows
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Derive the grouping from conditions: kmeans:K or average:K
    #[arg(long)]
    cluster: Option<String>,
    /// Distance used for neighbor maps and average-linkage clustering
    #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
    metric: MetricArg,
    /// Spline order of the fitting basis
    #[arg(long, default_value_t = 4)]
    basis_order: usize,
    /// Number of basis functions
    #[arg(long, default_value_t = 20)]
    basis_size: usize,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n_components: Option<usize>,
    #[arg(long, value_enum, default_value_t = TaskArg::Regress)]
    task: TaskArg,
    /// Output directory for fit.json, beta.csv, fused_pairs.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 150)]
    lambda_grid_size: usize,
    /// Mixing grid for gful, comma separated values in (0, 1]
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = TaskArg::Regress)]
    task: TaskArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// fit.json written by fit or cv
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    curves: PathBuf,
    #[arg(long)]
    responses: PathBuf,
    /// Where to write metrics.json; defaults to stdout only
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// fit.json written by fit or cv
    #[arg(long)]
    fit: PathBuf,
    /// Number of equidistant evaluation points
    #[arg(long, default_value_t = 101)]
    grid_size: usize,
    /// Output CSV of dim_id,t,beta_value rows
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::Fit(args) => run_fit(args),
        Command::Cv(args) => run_cv(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Export(args) => run_export(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

// ---------------------------------------------------------------------------
// simulate

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let mut spec: ScenarioSpec<f64> = match args.scenario.as_str() {
        "s1" => ScenarioSpec::s1(),
        "s2" => ScenarioSpec::s2(),
        other => return Err(CliError::Usage(format!("unknown scenario '{other}'"))),
    };
    spec.seed = args.seed;
    if let Some(r) = args.replicates {
        if r == 0 {
            return Err(CliError::Usage("need at least one replicate".into()));
        }
        spec.replicates = r;
    }
    let methods = parse_method_list(&args.methods)?;

    let basis = fitting_basis::<f64>();
    let (train, test, truth) = simulate_dataset(&spec, 0)?;
    let dims: Vec<u64> = (0..spec.p() as u64).collect();
    let train_ids: Vec<u64> = (0..train.n() as u64).collect();
    let test_ids: Vec<u64> = (train.n() as u64..(train.n() + test.n()) as u64).collect();
    let grid: Vec<f64> =
        (0..GRID_POINTS).map(|g| g as f64 / (GRID_POINTS - 1) as f64).collect();

    let out = &args.out;
    io::write_curves(&out.join("train_curves.csv"), &train_ids, &dims, &grid, train.coeffs(), &basis)?;
    io::write_responses(&out.join("train_responses.csv"), &train_ids, train.responses())?;
    io::write_curves(&out.join("test_curves.csv"), &test_ids, &dims, &grid, test.coeffs(), &basis)?;
    io::write_responses(&out.join("test_responses.csv"), &test_ids, test.responses())?;
    io::write_conditions(&out.join("conditions.csv"), &dims, &truth.conditions)?;
    io::write_groups(&out.join("groups.csv"), &dims, &truth.grouping)?;
    io::write_beta(&out.join("beta_true.csv"), &dims, &truth.beta)?;
    println!("wrote replicate 0 of {} ({} dimensions) to {}", args.scenario, spec.p(), out.display());

    if !methods.is_empty() {
        let cv = CvConfig::<f64> {
            folds: args.folds,
            lambda_grid_size: args.lambda_grid_size,
            ..CvConfig::default()
        };
        let table = run_experiment(&spec, &methods, &cv)?;
        io::write_comparison(&out.join("comparison.csv"), &table)?;
        println!("method comparison over {} replicates:", spec.replicates);
        for row in &table.rows {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
            println!(
                "  {:<6} mse={:.3} (sd {:.3}) sens={} spec={}",
                row.method.to_string(),
                row.mse_mean,
                row.mse_sd,
                fmt(row.sens_mean),
                fmt(row.spec_mean)
            );
        }
    }
    Ok(())
}

fn parse_method_list(raw: &[String]) -> Result<Vec<Method>> {
    if raw.len() == 1 && raw[0] == "none" {
        return Ok(Vec::new());
    }
    raw.iter().map(|s| io::parse_method(s)).collect()
}

// ---------------------------------------------------------------------------
// shared data loading

struct LoadedData {
    data: FunctionalDataset<f64>,
    basis: BasisSystem<f64>,
    dims: Vec<u64>,
    conditions: Option<ConditionSet<f64>>,
    grouping: Option<ConditionGrouping>,
    labels: Option<Vec<bool>>,
}

fn load_data(args: &DataArgs, task: TaskArg) -> Result<LoadedData> {
    let curves = io::read_curves(&args.curves)?;
    let y = io::read_responses(&args.responses, &curves.subjects)?;
    let basis = BasisSystem::bspline(
        args.basis_order,
        args.basis_size,
        grid_domain(&curves.grid)?,
    )?;
    let coeffs = curves.to_coefficients(&basis)?;
    let data = FunctionalDataset::new(coeffs, y.clone())?;

    let conditions = match &args.conditions {
        Some(path) => Some(io::read_conditions(path, &curves.dims)?),
        None => None,
    };
    let grouping = resolve_grouping(args, &curves.dims, conditions.as_ref())?;

    let labels = match task {
        TaskArg::Regress => None,
        TaskArg::Classify => Some(binary_labels(&y)?),
    };
    Ok(LoadedData { data, basis, dims: curves.dims, conditions, grouping, labels })
}

fn grid_domain(grid: &[f64]) -> Result<(f64, f64)> {
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    // Finite by the reader's checks, so a plain comparison is safe.
    if lo >= hi {
        return Err(CliError::Usage("time grid must span a positive interval".into()));
    }
    Ok((lo, hi))
}

fn resolve_grouping(
    args: &DataArgs,
    dims: &[u64],
    conditions: Option<&ConditionSet<f64>>,
) -> Result<Option<ConditionGrouping>> {
    match (&args.groups, &args.cluster) {
        (Some(_), Some(_)) => {
            Err(CliError::Usage("pass either --groups or --cluster, not both".into()))
        }
        (Some(path), None) => Ok(Some(io::read_groups(path, dims)?)),
        (None, Some(spec)) => {
            let set = conditions.ok_or_else(|| {
                CliError::Usage("--cluster needs --conditions to derive groups from".into())
            })?;
            let (kind, k) = spec.split_once(':').ok_or_else(|| {
                CliError::Usage(format!("invalid --cluster '{spec}', expected kmeans:K or average:K"))
            })?;
            let k: usize = k
                .parse()
                .map_err(|_| CliError::Usage(format!("invalid cluster count in '{spec}'")))?;
            let grouping = match kind {
                "kmeans" => kmeans_groups(set, k, 0)?,
                "average" => agglomerative_groups(set, k, args.metric.into())?,
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown clustering method '{other}', expected kmeans or average"
                    )))
                }
            };
            Ok(Some(grouping))
        }
        (None, None) => Ok(None),
    }
}

fn binary_labels(y: &DVector<f64>) -> Result<Vec<bool>> {
    y.iter()
        .map(|&v| {
            if v == 1.0 {
                Ok(true)
            } else if v == 0.0 {
                Ok(false)
            } else {
                Err(CliError::Usage(format!(
                    "classification needs 0/1 responses, found {v}"
                )))
            }
        })
        .collect()
}

fn require<T>(value: Option<T>, what: &str, method: Method) -> Result<T> {
    value.ok_or_else(|| CliError::Usage(format!("{method} requires {what}")))
}

fn reject<T>(value: &Option<T>, what: &str, method: Method) -> Result<()> {
    if value.is_some() {
        return Err(CliError::Usage(format!("{method} does not use {what}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fit

fn run_fit(args: FitArgs) -> Result<()> {
    let task = args.task;
    let method: Method = args.method.into();
    let loaded = load_data(&args.data, task)?;
    let opts = SolverOptions::default();

    // For classification the penalized fit runs on recoded responses.
    let (fit_data, labels) = match &loaded.labels {
        Some(labels) => {
            let (y, _) = repfun::estimators::recode_binary::<f64>(labels)?;
            (FunctionalDataset::new(loaded.data.coeffs().to_vec(), y)?, Some(labels.clone()))
        }
        None => (loaded.data.clone(), None),
    };

    let needs_lambda = !matches!(method, Method::Hg | Method::Mfpcr);
    if needs_lambda {
        reject(&args.n_components, "--n-components", method)?;
    } else {
        reject(&args.lambda, "--lambda", method)?;
        if !matches!(method, Method::Gful) {
            reject(&args.alpha, "--alpha", method)?;
        }
    }

    let centered = fit_data.center();
    let mut fit: FitResult<f64> = match method {
        Method::Fu => {
            let conditions = require(loaded.conditions.as_ref(), "--conditions", method)?;
            let lambda = require(args.lambda, "--lambda", method)?;
            let map = nearest_neighbor_map(conditions, args.data.metric.into())?;
            fit_fu(&centered, &loaded.basis, &map, lambda, &opts)?
        }
        Method::Gful => {
            let grouping = require(loaded.grouping.as_ref(), "--groups or --cluster", method)?;
            let lambda = require(args.lambda, "--lambda", method)?;
            let alpha = require(args.alpha, "--alpha", method)?;
            fit_gful(&centered, &loaded.basis, grouping, alpha, lambda, &opts)?
        }
        Method::Gl1 => {
            let lambda = require(args.lambda, "--lambda", method)?;
            fit_gl1(&centered, &loaded.basis, lambda, &opts)?
        }
        Method::Gl2 => {
            let grouping = require(loaded.grouping.as_ref(), "--groups or --cluster", method)?;
            let lambda = require(args.lambda, "--lambda", method)?;
            fit_gl2(&centered, &loaded.basis, grouping, lambda, &opts)?
        }
        Method::Hg => {
            let grouping = require(loaded.grouping.as_ref(), "--groups or --cluster", method)?;
            let k = require(args.n_components, "--n-components", method)?;
            fit_hg(&centered, &loaded.basis, grouping, k)?
        }
        Method::Mfpcr => {
            let k = require(args.n_components, "--n-components", method)?;
            fit_mfpcr(&centered, &loaded.basis, k)?
        }
    };
    if let Some(labels) = &labels {
        calibrate_classifier(&mut fit, &fit_data, &loaded.basis, labels)?;
    }
    write_fit_outputs(&args.out, &fit, task, &loaded, labels.as_deref())
}

// ---------------------------------------------------------------------------
// cv

fn run_cv(args: CvArgs) -> Result<()> {
    let task = args.task;
    let method: Method = args.method.into();
    let loaded = load_data(&args.data, task)?;

    let mut cfg = CvConfig::<f64> {
        folds: args.folds,
        seed: args.seed,
        lambda_grid_size: args.lambda_grid_size,
        task: match task {
            TaskArg::Regress => CvTask::Regress,
            TaskArg::Classify => CvTask::Classify,
        },
        ..CvConfig::default()
    };
    if let Some(grid) = args.alpha_grid {
        if !matches!(method, Method::Gful) {
            return Err(CliError::Usage("--alpha-grid only applies to gful".into()));
        }
        if grid.is_empty() || grid.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(CliError::Usage("--alpha-grid values must lie in (0, 1]".into()));
        }
        cfg.alphas = grid;
    }

    let map;
    let model = match method {
        Method::Fu => {
            let conditions = require(loaded.conditions.as_ref(), "--conditions", method)?;
            map = nearest_neighbor_map(conditions, args.data.metric.into())?;
            ModelConfig::Fu { map: &map }
        }
        Method::Gful => ModelConfig::Gful {
            grouping: require(loaded.grouping.as_ref(), "--groups or --cluster", method)?,
        },
        Method::Gl1 => ModelConfig::Gl1,
        Method::Gl2 => ModelConfig::Gl2 {
            grouping: require(loaded.grouping.as_ref(), "--groups or --cluster", method)?,
        },
        Method::Hg => ModelConfig::Hg {
            grouping: require(loaded.grouping.as_ref(), "--groups or --cluster", method)?,
        },
        Method::Mfpcr => ModelConfig::Mfpcr,
    };
    let fit = cross_validate(&loaded.data, &loaded.basis, &model, &cfg)?;
    write_fit_outputs(&args.out, &fit, task, &loaded, loaded.labels.as_deref())
}

// ---------------------------------------------------------------------------
// shared fit outputs

fn write_fit_outputs(
    out: &Path,
    fit: &FitResult<f64>,
    task: TaskArg,
    loaded: &LoadedData,
    labels: Option<&[bool]>,
) -> Result<()> {
    let task_name = match task {
        TaskArg::Regress => "regress",
        TaskArg::Classify => "classify",
    };
    let artifact = FitArtifact::from_fit(fit, task_name, &loaded.basis, &loaded.dims);
    artifact.save(&out.join("fit.json"))?;
    io::write_beta(&out.join("beta.csv"), &loaded.dims, &fit.beta)?;
    io::write_pairs(&out.join("fused_pairs.csv"), &loaded.dims, &fit.equality.fused_pairs)?;
    if let Some(rows) = &fit.cv_table {
        io::write_cv_table(&out.join("cv_table.csv"), rows)?;
    }

    let tuning = [
        fit.lambda.map(|l| format!("lambda={l:.6}")),
        fit.alpha.map(|a| format!("alpha={a:.3}")),
        fit.n_components.map(|k| format!("components={k}")),
    ]
    .into_iter()
    .flatten()
    .collect::<Vec<_>>()
    .join(" ");
    println!("{} fit: {}", fit.method, if tuning.is_empty() { "no tuning".into() } else { tuning });
    println!(
        "fused pairs: {}, fused groups: {}, zero dimensions: {}",
        fit.equality.fused_pairs.len(),
        fit.equality.fused_groups.len(),
        fit.equality.zero_dims.len()
    );
    if let Some(labels) = labels {
        let classes = fit.predict_classes(&loaded.data, &loaded.basis)?;
        let hits = classes.iter().zip(labels).filter(|(a, b)| a == b).count();
        println!(
            "training accuracy: {:.4} ({hits}/{} subjects)",
            hits as f64 / labels.len() as f64,
            labels.len()
        );
    }
    println!("wrote fit.json, beta.csv, fused_pairs.csv to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let artifact = FitArtifact::load(&args.fit)?;
    let curves = io::read_curves(&args.curves)?;
    let y = io::read_responses(&args.responses, &curves.subjects)?;
    if curves.dims != artifact.dim_ids {
        return Err(CliError::Usage(format!(
            "{}: dimension ids do not match the fit",
            args.curves.display()
        )));
    }
    let basis = artifact.to_basis()?;
    let coeffs = curves.to_coefficients(&basis)?;
    let data = FunctionalDataset::new(coeffs, y.clone())?;
    let scores = artifact.predict(&basis, &data)?;

    let metrics = match (&artifact.coding, artifact.task.as_str()) {
        (Some(coding), "classify") => {
            let labels = binary_labels(&y)?;
            let errors = scores
                .iter()
                .zip(&labels)
                .filter(|(&s, &l)| (s >= coding.threshold) != l)
                .count();
            io::MetricsOut {
                n: data.n(),
                mse: None,
                accuracy: Some(1.0 - errors as f64 / data.n() as f64),
                errors: Some(errors),
            }
        }
        _ => {
            let mse = scores
                .iter()
                .zip(y.iter())
                .map(|(s, t)| (s - t) * (s - t))
                .sum::<f64>()
                / data.n() as f64;
            io::MetricsOut { n: data.n(), mse: Some(mse), accuracy: None, errors: None }
        }
    };
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| CliError::Runtime(format!("cannot serialize metrics: {e}")))?;
    println!("{json}");
    if let Some(path) = &args.out {
        io::write_file(path, &json)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// export

fn run_export(args: ExportArgs) -> Result<()> {
    let artifact = FitArtifact::load(&args.fit)?;
    io::write_exported_curves(&args.out, &artifact, args.grid_size)?;
    println!(
        "wrote {} coefficient curves on {} points to {}",
        artifact.dim_ids.len(),
        args.grid_size,
        args.out.display()
    );
    Ok(())
}
