//! `vqr`: fit regularized vector quantile regression models from CSV data.
//!
//! Exit codes: 0 success, 1 I/O or malformed input, 2 solver did not converge
//! (outputs are still written), 3 invalid configuration, 4 oracle check failed.

mod probes;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vqr_core::compare::{self, CompareConfig};
use vqr_core::measures::{self, ColumnSelector, LoadOptions, NodePlacement};
use vqr_core::model::FittedModel;
use vqr_core::quantile::{EtaRule, QuantileRow, QuantileTable};
use vqr_core::rvqr::{self, PhiMode, SolveReport, SolverConfig};
use vqr_core::synth::{self, CovariateLaw, Linear, SynthConfig};
use vqr_core::{oracles, Dataset, VqrError};

use probes::ProbeSpec;

const EXIT_IO: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "vqr", version, about = "Regularized vector quantile regression")]
struct Cli {
    /// Worker threads for the parallel kernels (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model and write it as JSON.
    Fit(FitArgs),
    /// Conditional quantiles of a fitted model at covariate probes.
    Quantiles(QuantileArgs),
    /// Relative-error tables against classical quantile regression (d = 1).
    CompareQr(CompareArgs),
    /// Generate a synthetic dataset from Y = alpha(U) + beta(U) X.
    Synth(SynthArgs),
    /// Run the numerical oracle suite.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Covariate columns: names or `#k` positions, comma-separated.
    #[arg(long, default_value = "")]
    x_cols: String,
    /// Response columns: names or `#k` positions, comma-separated.
    #[arg(long)]
    y_cols: String,
    /// Optional column of positive observation weights.
    #[arg(long)]
    weight_col: Option<String>,
    /// Min-max scale the responses before fitting; quantiles are still
    /// reported in original units.
    #[arg(long)]
    scale_y: bool,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset, VqrError> {
        measures::load_csv_with(
            &self.data,
            &LoadOptions {
                x_cols: ColumnSelector::parse_list(&self.x_cols),
                y_cols: ColumnSelector::parse_list(&self.y_cols),
                intercept: true,
                weight_col: self.weight_col.as_deref().map(ColumnSelector::parse),
            },
        )
    }
}

#[derive(Args, Debug)]
struct SolverArgs {
    /// Gradient inf-norm tolerance.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 50_000)]
    max_iter: usize,
}

impl SolverArgs {
    fn config(&self, epsilon: f64, phi_mode: PhiMode) -> SolverConfig {
        SolverConfig {
            epsilon,
            tol: self.tol,
            max_iter: self.max_iter,
            phi_mode,
            ..SolverConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PhiArg {
    Soft,
    Hard,
}

impl From<PhiArg> for PhiMode {
    fn from(p: PhiArg) -> Self {
        match p {
            PhiArg::Soft => PhiMode::Soft,
            PhiArg::Hard => PhiMode::Hard,
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Rank nodes per axis (`n^d` nodes in total).
    #[arg(long, default_value_t = 20)]
    grid: usize,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[command(flatten)]
    solver: SolverArgs,
    /// Potential used for potential-based quantiles.
    #[arg(long, value_enum, default_value = "soft")]
    phi_mode: PhiArg,
    /// Model JSON output.
    #[arg(long)]
    out: PathBuf,
    /// Also write the text report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the coupling as `(i, j, alpha)` triples above this mass.
    #[arg(long)]
    coupling: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    coupling_threshold: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    /// Coupling-weighted mean of responses in a covariate ball.
    Ball,
    /// Differences of the dual potential along each rank axis.
    Potential,
}

#[derive(Args, Debug)]
struct QuantileArgs {
    /// Model JSON written by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// Probes: `q10` style covariate levels or raw values (`1.5:2` for two
    /// covariates), comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "q10,q30,q60,q90", value_parser = probes::parse_probe)]
    probes: Vec<ProbeSpec>,
    /// Rank indices (zero-based); all nodes when omitted.
    #[arg(long, value_delimiter = ',')]
    ranks: Option<Vec<usize>>,
    /// Ball radius in covariate units; by default the smallest radius
    /// holding 5% of the observations.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, value_enum, default_value = "ball")]
    method: Method,
    /// Overrides the potential stored in the model.
    #[arg(long, value_enum)]
    phi_mode: Option<PhiArg>,
    /// Write a JSON monotonicity report per probe.
    #[arg(long)]
    monotonicity: Option<PathBuf>,
    /// CSV output (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 20)]
    grid: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.5,1")]
    epsilons: Vec<f64>,
    /// Covariate levels only (`q10` style).
    #[arg(long, value_delimiter = ',', default_value = "q10,q30,q60,q90", value_parser = probes::parse_probe)]
    probes: Vec<ProbeSpec>,
    #[arg(long)]
    eta: Option<f64>,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    n_obs: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Response dimension (1 or 2).
    #[arg(long, default_value_t = 1)]
    dim: usize,
    /// Covariate law: `uniform:LO:HI` or `normal:MEAN:SD`.
    #[arg(long, default_value = "uniform:0:1", value_parser = parse_law)]
    x_law: CovariateLaw,
    /// Intercept curve `A:B`, i.e. alpha(u) = A + B u.
    #[arg(long, default_value = "0:1", value_parser = parse_linear)]
    alpha: Linear,
    /// Slope curve `A:B`, i.e. beta(u) = A + B u.
    #[arg(long, default_value = "1:1", value_parser = parse_linear)]
    beta: Linear,
    /// Per-axis slopes `B1:B2` of Y = U + diag(B) U x when dim = 2.
    #[arg(long, default_value = "0.5:0.5", value_parser = parse_pair)]
    beta2: [f64; 2],
    /// Dataset CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ground-truth quantiles at the covariate levels 10/30/60/90%.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Rank steps of the truth table (ranks k/steps, k = 1..steps-1).
    #[arg(long, default_value_t = 20)]
    truth_steps: usize,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// JSON report output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let v: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad number in `{s}`")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [a, b] => Ok([*a, *b]),
        _ => Err(format!("expected two numbers `A:B`, got `{s}`")),
    }
}

fn parse_linear(s: &str) -> Result<Linear, String> {
    let [a, b] = parse_pair(s)?;
    Ok(Linear { a, b })
}

fn parse_law(s: &str) -> Result<CovariateLaw, String> {
    let (name, rest) = s
        .split_once(':')
        .ok_or_else(|| format!("expected LAW:P1:P2, got `{s}`"))?;
    let [p, q] = parse_pair(rest)?;
    match name {
        "uniform" => Ok(CovariateLaw::Uniform { lo: p, hi: q }),
        "normal" => Ok(CovariateLaw::Normal { mean: p, sd: q }),
        _ => Err(format!("unknown law `{name}` (uniform or normal)")),
    }
}

/// Error carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<VqrError> for Failure {
    fn from(e: VqrError) -> Self {
        let code = match &e {
            VqrError::Io { .. }
            | VqrError::Csv(_)
            | VqrError::Json(_)
            | VqrError::Parse { .. }
            | VqrError::EmptyData
            | VqrError::Shape(_)
            | VqrError::NonFinite(_)
            | VqrError::InvalidInput(_) => EXIT_IO,
            VqrError::NotConverged(_) | VqrError::QrNotConverged(_) | VqrError::SinkhornNotConverged { .. } => {
                EXIT_NOT_CONVERGED
            }
            VqrError::MissingColumn(_)
            | VqrError::InvalidGrid(_)
            | VqrError::Config(_)
            | VqrError::Unsupported(_)
            | VqrError::InsufficientMass { .. }
            | VqrError::NotObserved { .. }
            | VqrError::OutOfRange { .. }
            | VqrError::EmptyBall { .. } => EXIT_CONFIG,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: msg.into(),
    }
}

fn io_error(path: &Path, e: io::Error) -> Failure {
    Failure {
        code: EXIT_IO,
        message: format!("cannot write {}: {e}", path.display()),
    }
}

/// Buffered writer to `path`, or stdout.
fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    match path {
        Some(p) => {
            let f = File::create(p).map_err(|e| io_error(p, e))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(BufWriter::new(io::stdout()))),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn check_grid(n: usize) -> Result<(), Failure> {
    if n < 2 {
        return Err(config_error(format!("--grid must be at least 2, got {n}")));
    }
    Ok(())
}

fn check_eta(eta: Option<f64>) -> Result<(), Failure> {
    match eta {
        Some(e) if e.is_nan() || e < 0.0 => Err(config_error(format!("--eta must be >= 0, got {e}"))),
        _ => Ok(()),
    }
}

fn human_report(r: &SolveReport, grid: usize, n_ranks: usize, data: &Dataset) -> String {
    let status = if r.converged { "converged" } else { "NOT CONVERGED" };
    let mut s = String::new();
    s.push_str(&format!("status            {status}\n"));
    s.push_str(&format!(
        "data              J = {}, N = {}, d = {}\n",
        data.n_obs(),
        data.n_covariates(),
        data.dim()
    ));
    s.push_str(&format!("grid              n = {grid} per axis, I = {n_ranks}\n"));
    s.push_str(&format!("epsilon           {}\n", r.epsilon));
    s.push_str(&format!(
        "iterations        {} ({} evaluations, {} restarts)\n",
        r.iterations, r.evaluations, r.restarts
    ));
    s.push_str(&format!("dual objective    {:.12e}\n", r.objective));
    s.push_str(&format!("dual value        {:.12e}\n", r.dual_value));
    s.push_str(&format!("primal value      {:.12e}\n", r.primal_value));
    s.push_str(&format!(
        "duality gap       {:.3e} (relative {:.3e})\n",
        r.duality_gap, r.relative_gap
    ));
    s.push_str(&format!("gradient inf-norm {:.3e}\n", r.grad_norm));
    s.push_str(&format!("col residual      {:.3e}\n", r.col_residual));
    s.push_str(&format!("mi residual       {:.3e}\n", r.mi_residual));
    s.push_str(&format!("wall time         {:.3} s\n", r.wall_time_secs));
    s
}

fn cmd_fit(a: &FitArgs) -> Result<u8, Failure> {
    check_grid(a.grid)?;
    let raw = a.data.load()?;
    let data = compare::prepare(&raw, a.data.scale_y);
    let grid = measures::make_rank_grid(data.dim(), a.grid, NodePlacement::RightEndpoint)?;
    let cfg = a.solver.config(a.epsilon, a.phi_mode.into());
    cfg.validate()?;

    let (dual, coupling, report) = match rvqr::solve(&data, &grid, &cfg) {
        Ok(s) => (s.dual, s.coupling, s.report),
        Err(VqrError::NotConverged(u)) => (u.dual, u.coupling, u.report),
        Err(e) => return Err(e.into()),
    };
    let text = human_report(&report, a.grid, grid.len(), &data);
    let converged = report.converged;
    let model = FittedModel {
        epsilon: a.epsilon,
        phi_mode: cfg.phi_mode,
        grid,
        dual,
        report,
        data,
    };
    model.save(&a.out)?;
    if let Some(p) = &a.coupling {
        let mut w = sink(Some(p))?;
        coupling.write_csv(&mut w, a.coupling_threshold)?;
        w.flush().map_err(|e| io_error(p, e))?;
    }
    if let Some(p) = &a.report {
        write_text(p, &text)?;
    }
    print!("{text}");
    if converged {
        Ok(0)
    } else {
        eprintln!("warning: model written to {} without convergence", a.out.display());
        Ok(EXIT_NOT_CONVERGED)
    }
}

fn cmd_quantiles(a: &QuantileArgs) -> Result<u8, Failure> {
    check_eta(a.eta)?;
    let fitted = FittedModel::load(&a.model)?;
    let m = fitted.quantile_model()?;
    let n = m.grid().len();
    let ranks: Vec<usize> = a.ranks.clone().unwrap_or_else(|| (0..n).collect());
    if let Some(&bad) = ranks.iter().find(|&&i| i >= n) {
        return Err(config_error(format!(
            "rank index {bad} out of range (model has {n} nodes)"
        )));
    }
    let rule = a.eta.map(EtaRule::Fixed).unwrap_or_default();
    let probes = a
        .probes
        .iter()
        .map(|p| p.resolve(m.data(), a.eta))
        .collect::<Result<Vec<_>, _>>()?;

    let table = match a.method {
        Method::Ball => {
            let mut rows = Vec::new();
            for p in &probes {
                let t = m
                    .quantile_table(std::slice::from_ref(p), &ranks, rule)
                    .map_err(|e| with_probe(e, &p.label))?;
                rows.extend(t.rows);
            }
            rows
        }
        Method::Potential => {
            let mode = a.phi_mode.map(PhiMode::from).unwrap_or(fitted.phi_mode);
            let mut rows = Vec::new();
            for p in &probes {
                m.check_probe(&p.x).map_err(|e| with_probe(e, &p.label))?;
                let q = m.potential_quantiles(&p.x, mode).map_err(|e| with_probe(e, &p.label))?;
                for &i in &ranks {
                    let mut qi = q.row(i).to_vec();
                    if let Some(s) = m.data().y_scaling() {
                        s.unscale(&mut qi);
                    }
                    rows.push(QuantileRow {
                        probe: p.label.clone(),
                        x: p.x.clone(),
                        eta: f64::NAN,
                        rank: i,
                        u: m.grid().u().row(i).to_vec(),
                        q: qi,
                    });
                }
            }
            rows
        }
    };
    let table = QuantileTable {
        x_names: m.data().x_names().to_vec(),
        y_names: m.data().y_names().to_vec(),
        rows: table,
    };

    if let Some(path) = &a.monotonicity {
        // fitted units, so this is 1e-6 scale(Y) with or without scaling
        let scale = m.data().y_scale();
        let mut reports = Vec::new();
        for p in &probes {
            let eta = match p.eta {
                Some(e) => e,
                None => m.eta_for(&p.x, rule)?,
            };
            let r = m
                .monotonicity_diagnostic(&p.x, eta, 1e-6 * scale)
                .map_err(|e| with_probe(e, &p.label))?;
            if !r.violations.is_empty() {
                log::warn!("probe {}: {} monotonicity violations", p.label, r.violations.len());
            }
            reports.push(serde_json::json!({ "probe": p.label, "report": r }));
        }
        let s = serde_json::to_string_pretty(&reports).map_err(VqrError::from)?;
        write_text(path, &s)?;
    }

    let mut w = sink(a.out.as_deref())?;
    table.write_csv(&mut w)?;
    w.flush()
        .map_err(|e| io_error(a.out.as_deref().unwrap_or(Path::new("<stdout>")), e))?;
    Ok(0)
}

fn with_probe(e: VqrError, label: &str) -> Failure {
    let mut f = Failure::from(e);
    f.message = format!("probe {label}: {}", f.message);
    f
}

fn cmd_compare(a: &CompareArgs) -> Result<u8, Failure> {
    check_grid(a.grid)?;
    check_eta(a.eta)?;
    let mut levels = Vec::new();
    for p in &a.probes {
        match p {
            ProbeSpec::Level(l) => levels.push(*l),
            ProbeSpec::Raw(_) => return Err(config_error("compare-qr takes covariate levels (`q10` style) only")),
        }
    }
    let solver = a
        .solver
        .config(a.epsilons.first().copied().unwrap_or(0.1), PhiMode::Soft);
    for &e in &a.epsilons {
        SolverConfig {
            epsilon: e,
            ..solver.clone()
        }
        .validate()?;
    }
    let cfg = CompareConfig {
        epsilons: a.epsilons.clone(),
        n_grid: a.grid,
        probe_levels: levels,
        eta: a.eta.map(EtaRule::Fixed).unwrap_or_default(),
        scale_y: a.data.scale_y,
        solver,
        ..CompareConfig::default()
    };
    let raw = a.data.load()?;
    let table = compare::compare_qr(&raw, &cfg)?;
    let mut w = sink(a.out.as_deref())?;
    table.write_csv(&mut w)?;
    w.flush()
        .map_err(|e| io_error(a.out.as_deref().unwrap_or(Path::new("<stdout>")), e))?;
    if table.reports.iter().any(|r| !r.converged) {
        eprintln!("warning: some fits stopped at the iteration cap");
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(0)
}

fn cmd_synth(a: &SynthArgs) -> Result<u8, Failure> {
    let cfg = SynthConfig {
        n_obs: a.n_obs,
        seed: a.seed,
        dim: a.dim,
        x_law: a.x_law,
        alpha: a.alpha,
        beta: a.beta,
        beta2: a.beta2,
    };
    if a.truth_steps < 2 {
        return Err(config_error("--truth-steps must be at least 2"));
    }
    let data = synth::generate(&cfg)?;
    let mut w = sink(a.out.as_deref())?;
    synth::write_dataset_csv(&data, &mut w)?;
    w.flush()
        .map_err(|e| io_error(a.out.as_deref().unwrap_or(Path::new("<stdout>")), e))?;
    if let Some(p) = &a.truth {
        let mut w = sink(Some(p))?;
        synth::write_truth_csv(&cfg, &data, a.truth_steps, &mut w)?;
        w.flush().map_err(|e| io_error(p, e))?;
    }
    Ok(0)
}

fn cmd_check(a: &CheckArgs) -> Result<u8, Failure> {
    let report = oracles::run_suite(a.seed);
    for c in &report.checks {
        println!(
            "{} {:<22} measured {:.3e} threshold {:.1e}  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.threshold,
            c.detail
        );
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed (seed {})", report.checks.len(), report.seed);
    if let Some(p) = &a.out {
        let s = serde_json::to_string_pretty(&report).map_err(VqrError::from)?;
        write_text(p, &s)?;
    }
    Ok(if report.passed { 0 } else { EXIT_CHECK })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(k) = cli.workers {
        if k == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }

    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Quantiles(a) => cmd_quantiles(a),
        Command::CompareQr(a) => cmd_compare(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
