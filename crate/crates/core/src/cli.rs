//! Command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{self, FitOutputs, Manifest, OutputSet};
use crate::model::{CountTable, CovariateSet};
use crate::select::{self, SelectionReport};
use crate::sim::{self, BenchConfig, SimSpec};
use crate::solver::{self, SolverConfig};

/// How the penalty is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaMode {
    Fixed(f64),
    Qut,
    Cv,
}

impl FromStr for LambdaMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "qut" => Ok(LambdaMode::Qut),
            "cv" => Ok(LambdaMode::Cv),
            other => match other.parse::<f64>() {
                Ok(v) if v >= 0.0 && v.is_finite() => Ok(LambdaMode::Fixed(v)),
                _ => Err(format!("expected a nonnegative number, 'qut' or 'cv', got '{s}'")),
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lowrank-counts", version, about = "Low-rank Poisson models for count tables with covariates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the model and write every result file.
    Fit(FitArgs),
    /// Fit the model and write the imputed and completed tables.
    Impute(FitArgs),
    /// Test for interactions beyond the covariate main effects.
    Test(TestArgs),
    /// Choose the penalty by cross-validation on erased cells.
    Cv(CvArgs),
    /// Simulate a table with covariates and known parameters.
    Simulate(SimulateArgs),
    /// Compare coefficient and parameter errors across interaction strengths.
    BenchEstimation(BenchEstimationArgs),
    /// Compare imputation errors across shares of hidden cells.
    BenchImputation(BenchImputationArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Count table: first row column names, first column row names.
    #[arg(long)]
    counts: PathBuf,
    /// Row covariates keyed by row name.
    #[arg(long)]
    row_cov: Option<PathBuf>,
    /// Column covariates keyed by column name.
    #[arg(long)]
    col_cov: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SolverArgs {
    #[arg(long, default_value_t = SolverConfig::default().tol)]
    tol: f64,
    #[arg(long, default_value_t = SolverConfig::default().max_outer_iters)]
    max_iters: usize,
}

impl SolverArgs {
    fn config(&self) -> Result<SolverConfig> {
        let config = SolverConfig {
            tol: self.tol,
            max_outer_iters: self.max_iters,
            ..SolverConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
struct QutArgs {
    #[arg(long, default_value_t = select::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Bootstrap replicates.
    #[arg(long, default_value_t = select::DEFAULT_BOOTSTRAP)]
    nboot: usize,
}

#[derive(Debug, Args)]
struct CvGridArgs {
    #[arg(long, default_value_t = select::DEFAULT_FOLDS)]
    folds: usize,
    /// Share of observed cells erased in each fold.
    #[arg(long, default_value_t = select::DEFAULT_ERASE_FRACTION)]
    erase_frac: f64,
    /// Number of penalties on the grid.
    #[arg(long, default_value_t = 20)]
    grid_size: usize,
    /// Smallest penalty as a fraction of the largest.
    #[arg(long, default_value_t = 0.01)]
    grid_ratio: f64,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// A penalty value, `qut` or `cv`.
    #[arg(long, default_value = "qut")]
    lambda: LambdaMode,
    #[command(flatten)]
    qut: QutArgs,
    #[command(flatten)]
    cv: CvGridArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of biplot axes.
    #[arg(long, default_value_t = 2)]
    biplot_dim: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    qut: QutArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cv: CvGridArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimShape {
    #[arg(long, default_value_t = SimSpec::default().n)]
    n: usize,
    #[arg(long, default_value_t = SimSpec::default().p)]
    p: usize,
    /// Rank of the true interaction.
    #[arg(long, default_value_t = SimSpec::default().theta_rank)]
    rank: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl SimShape {
    fn spec(&self, tau: f64, miss: f64) -> SimSpec {
        SimSpec {
            n: self.n,
            p: self.p,
            theta_rank: self.rank,
            tau_ratio: tau,
            miss_prob: miss,
            seed: self.seed,
            ..SimSpec::default()
        }
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    shape: SimShape,
    /// Interaction strength relative to the main effects.
    #[arg(long, default_value_t = SimSpec::default().tau_ratio)]
    tau: f64,
    /// Probability that a cell is hidden.
    #[arg(long, default_value_t = 0.0)]
    miss: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    shape: SimShape,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[command(flatten)]
    qut: QutArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
}

impl BenchArgs {
    fn config(&self) -> Result<BenchConfig> {
        Ok(BenchConfig {
            solver: self.solver.config()?,
            epsilon: self.qut.epsilon,
            n_boot: self.qut.nboot,
        })
    }
}

#[derive(Debug, Args)]
struct BenchEstimationArgs {
    #[command(flatten)]
    bench: BenchArgs,
    /// Interaction strengths.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.25, 0.5, 1.0])]
    taus: Vec<f64>,
}

#[derive(Debug, Args)]
struct BenchImputationArgs {
    #[command(flatten)]
    bench: BenchArgs,
    #[arg(long, default_value_t = SimSpec::default().tau_ratio)]
    tau: f64,
    /// Shares of hidden cells.
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.4, 0.6, 0.8])]
    fracs: Vec<f64>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 for invalid input, 2 for numerical
/// failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    crate::par::init_thread_pool();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Fit(args) => fit_command(&args, false),
        Command::Impute(args) => fit_command(&args, true),
        Command::Test(args) => test_command(&args),
        Command::Cv(args) => cv_command(&args),
        Command::Simulate(args) => simulate_command(&args),
        Command::BenchEstimation(args) => bench_estimation_command(&args),
        Command::BenchImputation(args) => bench_imputation_command(&args),
    }
}

fn load(data: &DataArgs) -> Result<(CountTable, CovariateSet)> {
    let table = io::read_count_csv(&data.counts)?;
    let cov = io::load_covariates(&table, data.row_cov.as_deref(), data.col_cov.as_deref())?;
    Ok((table, cov))
}

fn cv_report(table: &CountTable, cov: &CovariateSet, cv: &CvGridArgs, config: &SolverConfig, seed: u64) -> Result<SelectionReport> {
    let top = select::null_threshold_stat(table, cov, config)?;
    if !(top > 0.0) {
        return Err(Error::Invalid("the null statistic is zero; there is no penalty grid to search".into()));
    }
    let grid = select::geometric_grid(top, cv.grid_ratio, cv.grid_size)?;
    select::cross_validate(table, cov, &grid, cv.erase_frac, cv.folds, config, seed)
}

fn print_manifest(dir: &std::path::Path, manifest: &Manifest) {
    println!("wrote {}", dir.display());
    for entry in &manifest.files {
        println!("{}  {}", entry.sha256, entry.file);
    }
}

fn fit_command(args: &FitArgs, impute_only: bool) -> Result<()> {
    let config = args.solver.config()?;
    let (table, cov) = load(&args.data)?;
    let selection = match args.lambda {
        LambdaMode::Fixed(_) => None,
        LambdaMode::Qut => Some(select::qut_select(&table, &cov, &config, args.qut.epsilon, args.qut.nboot, args.seed)?),
        LambdaMode::Cv => Some(cv_report(&table, &cov, &args.cv, &config, args.seed)?),
    };
    let lambda = match (args.lambda, &selection) {
        (LambdaMode::Fixed(v), _) => v,
        (_, Some(report)) => report.chosen_lambda,
        (_, None) => unreachable!("selection runs for every automatic mode"),
    };
    let fit = solver::fit(&table, &cov, lambda, &config, None)?;
    if !fit.converged {
        eprintln!(
            "warning: stopped after {} iterations without meeting the tolerance",
            fit.n_iters
        );
    }
    let outputs = FitOutputs {
        table: &table,
        cov: &cov,
        fit: &fit,
        selection: selection.as_ref(),
        biplot_dim: args.biplot_dim,
    };
    let manifest = if impute_only {
        imputation_set(&outputs)?.write(&args.out)?
    } else {
        io::write_results(&outputs, &args.out)?
    };
    print_manifest(&args.out, &manifest);
    Ok(())
}

fn imputation_set(out: &FitOutputs<'_>) -> Result<OutputSet> {
    let full = io::fit_output_set(out)?;
    Ok(full.retain(&["params.json", "imputed.csv", "completed.csv", "selection.json"]))
}

fn test_command(args: &TestArgs) -> Result<()> {
    let config = args.solver.config()?;
    let (table, cov) = load(&args.data)?;
    let outcome = select::independence_test(&table, &cov, &config, args.qut.epsilon, args.qut.nboot, args.seed)?;
    println!("lambda0 = {}", outcome.lambda0);
    println!("threshold = {}", outcome.threshold);
    println!("reject = {}", outcome.reject);
    if let Some(dir) = &args.out {
        let mut set = OutputSet::new();
        set.add_json("test.json", &outcome)?;
        print_manifest(dir, &set.write(dir)?);
    }
    Ok(())
}

fn cv_command(args: &CvArgs) -> Result<()> {
    let config = args.solver.config()?;
    let (table, cov) = load(&args.data)?;
    let report = cv_report(&table, &cov, &args.cv, &config, args.seed)?;
    println!("lambda0 = {}", report.lambda0);
    println!("lambda = {}", report.chosen_lambda);
    if let Some(dir) = &args.out {
        let mut set = OutputSet::new();
        set.add_json("selection.json", &report)?;
        let rows = std::iter::once(vec!["lambda".to_owned(), "heldout_error".to_owned()]).chain(
            report
                .cv_grid
                .iter()
                .flatten()
                .map(|pt| vec![pt.lambda.to_string(), pt.heldout_error.to_string()]),
        );
        set.add_csv("cv.csv", rows);
        print_manifest(dir, &set.write(dir)?);
    }
    Ok(())
}

#[derive(Serialize)]
struct TruthFile<'a> {
    spec: &'a SimSpec,
    mu: f64,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    theta: Vec<Vec<f64>>,
}

fn simulate_command(args: &SimulateArgs) -> Result<()> {
    let spec = args.shape.spec(args.tau, args.miss);
    let data = sim::simulate_dataset(&spec)?;
    let names = |s: &[crate::model::ColumnScaling]| s.iter().map(|c| c.name.clone()).collect::<Vec<_>>();
    let mut set = OutputSet::new();
    set.add("counts.csv", io::count_table_csv(&data.table));
    set.add(
        "row_cov.csv",
        io::covariate_bytes(data.table.row_names(), &names(data.cov.row_scaling()), data.cov.row()),
    );
    set.add(
        "col_cov.csv",
        io::covariate_bytes(data.table.col_names(), &names(data.cov.col_scaling()), data.cov.col()),
    );
    let t = &data.truth;
    set.add_json(
        "truth.json",
        &TruthFile {
            spec: &spec,
            mu: t.mu,
            alpha: t.alpha.iter().copied().collect(),
            beta: t.beta.iter().copied().collect(),
            theta: t.theta.row_iter().map(|r| r.iter().copied().collect()).collect(),
        },
    )?;
    print_manifest(&args.out, &set.write(&args.out)?);
    Ok(())
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| io::MISSING_TOKEN.to_owned(), |v| v.to_string())
}

fn bench_estimation_command(args: &BenchEstimationArgs) -> Result<()> {
    let b = &args.bench;
    let spec = b.shape.spec(SimSpec::default().tau_ratio, 0.0);
    let report = sim::run_estimation_benchmark(&spec, &args.taus, b.reps, &b.config()?)?;
    let header = ["tau", "method", "n_ok", "n_failed", "mean_coef_rmse", "sd_coef_rmse", "mean_relative_error", "sd_relative_error"];
    let mut rows = vec![header.map(String::from).to_vec()];
    for s in &report.summary {
        let row = vec![
            s.tau.to_string(),
            s.method.label().to_owned(),
            s.n_ok.to_string(),
            s.n_failed.to_string(),
            opt(s.mean_coef_rmse),
            opt(s.sd_coef_rmse),
            opt(s.mean_relative_error),
            opt(s.sd_relative_error),
        ];
        println!("{}", row.join("\t"));
        rows.push(row);
    }
    let mut set = OutputSet::new();
    set.add_csv("summary.csv", rows);
    set.add_json("report.json", &report)?;
    print_manifest(&b.out, &set.write(&b.out)?);
    Ok(())
}

fn bench_imputation_command(args: &BenchImputationArgs) -> Result<()> {
    let b = &args.bench;
    let spec = b.shape.spec(args.tau, 0.0);
    let report = sim::run_imputation_benchmark(&spec, &args.fracs, b.reps, &b.config()?)?;
    let header = ["miss_frac", "method", "n_ok", "n_failed", "median_error", "mean_error"];
    let mut rows = vec![header.map(String::from).to_vec()];
    for s in &report.summary {
        let row = vec![
            s.miss_frac.to_string(),
            s.method.label().to_owned(),
            s.n_ok.to_string(),
            s.n_failed.to_string(),
            opt(s.median_error),
            opt(s.mean_error),
        ];
        println!("{}", row.join("\t"));
        rows.push(row);
    }
    for (f, gap) in report.miss_fracs.iter().zip(&report.median_gap) {
        println!("median gap at {f}: {}", opt(*gap));
    }
    let mut set = OutputSet::new();
    set.add_csv("summary.csv", rows);
    set.add_json("report.json", &report)?;
    print_manifest(&b.out, &set.write(&b.out)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_modes_parse() {
        assert_eq!("qut".parse::<LambdaMode>(), Ok(LambdaMode::Qut));
        assert_eq!("CV".parse::<LambdaMode>(), Ok(LambdaMode::Cv));
        assert_eq!("0.25".parse::<LambdaMode>(), Ok(LambdaMode::Fixed(0.25)));
        assert!("-1".parse::<LambdaMode>().is_err());
        assert!("auto".parse::<LambdaMode>().is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["lowrank-counts", "fit", "--out", "x"]), 1);
        assert_eq!(run(["lowrank-counts", "fit", "--bogus"]), 1);
        assert_eq!(run(["lowrank-counts"]), 1);
        assert_eq!(run(["lowrank-counts", "--help"]), 0);
    }
}
