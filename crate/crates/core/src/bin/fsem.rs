//! Command-line front end: `fit`, `simulate`, `gof`, and `bands`
//! subcommands wired to the library, with reproducible seeded runs and
//! plot-ready delimited outputs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use fsem::dataset::{
    ingest_long_format, read_covariate_csv, read_long_csv, FunctionalDataset, SamplingDesign,
};
use fsem::fit::{fit_mcem_with_alpha, select_smoothing, AlphaChoice, AlphaVector, FitConfig};
use fsem::gof::fit_indices;
use fsem::gp::{ModelContext, ParamSet};
use fsem::inference::{
    bootstrap_covariances, confidence_band, curve_grid, surface_grid, BandConstruction,
    BootstrapConfig, CoefEval,
};
use fsem::model::{parse_model_text, validate_model, LoadingEffect, ValidatedModel};
use fsem::report;
use fsem::sim::{run_scenario, SimScenario};

/// Exit status 2: configuration or parse error. Exit status 3: numerical
/// failure (diagnostics dumped to stderr).
#[derive(Parser)]
#[command(name = "fsem", version, about = "Functional structural equation models")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to data and write the fit report and parameter file.
    Fit(FitArgs),
    /// Run a built-in simulation study and write the replication tables.
    Simulate(SimArgs),
    /// Compute goodness-of-fit indices for fitted parameters.
    Gof(GofArgs),
    /// Bootstrap confidence bands for the functional coefficients.
    Bands(BandsArgs),
}

#[derive(Args)]
struct CommonFitInputs {
    /// Model configuration file (declarative text).
    #[arg(long)]
    model: PathBuf,
    /// Long-format observations: subject,variable,time,value.
    #[arg(long)]
    data: PathBuf,
    /// Covariates: subject,name,value or subject,name,time,value.
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Optional TOML run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    io: CommonFitInputs,
    /// Smoothing weight for the measurement coefficients, or `cv`.
    #[arg(long)]
    alpha_lambda: Option<String>,
    /// Smoothing weight for the structural coefficients.
    #[arg(long)]
    alpha_gamma: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    n_mc: Option<usize>,
}

#[derive(Args)]
struct SimArgs {
    /// Which simulation study to run.
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    #[arg(long, value_enum)]
    design: Option<DesignArg>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// Number of replicates.
    #[arg(long)]
    reps: Option<usize>,
    /// Basis dimension of the fitted model.
    #[arg(long)]
    j: Option<usize>,
    /// MCAR missingness probability (mcar design only).
    #[arg(long)]
    p_miss: Option<f64>,
    /// Bootstrap replicates per fit for the coverage bands.
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optional TOML run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GofArgs {
    #[command(flatten)]
    io: CommonFitInputs,
    /// Fitted parameters (JSON file produced by `fit`).
    #[arg(long)]
    params: PathBuf,
    /// Number of interior grid points.
    #[arg(long, default_value_t = 19)]
    grid_points: usize,
}

#[derive(Args)]
struct BandsArgs {
    #[command(flatten)]
    io: CommonFitInputs,
    /// Fitted parameters (JSON file produced by `fit`).
    #[arg(long)]
    params: PathBuf,
    /// Bootstrap replicates.
    #[arg(long)]
    b: Option<usize>,
    /// Nominal coverage level.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, value_enum, default_value_t = ConstructionArg::Ellipsoid)]
    construction: ConstructionArg,
    /// Smoothing weights used when refitting replicates.
    #[arg(long)]
    alpha_lambda: Option<f64>,
    #[arg(long)]
    alpha_gamma: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Sim1,
    Sim2,
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignArg {
    Regular,
    Irregular,
    Mcar,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConstructionArg {
    Pointwise,
    Ellipsoid,
}

/// Optional TOML run configuration.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    seed: Option<u64>,
    fit: Option<FitConfig>,
    bootstrap: Option<BootstrapConfig>,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> CliError {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    fn numerical(message: impl Into<String>) -> CliError {
        CliError {
            code: 3,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let result = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Gof(args) => cmd_gof(args),
        Command::Bands(args) => cmd_bands(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fsem: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))
}

fn load_run_config(path: &Option<PathBuf>) -> Result<RunConfigFile, CliError> {
    match path {
        None => Ok(RunConfigFile::default()),
        Some(p) => {
            let text = read_to_string(p)?;
            toml::from_str(&text).map_err(|e| CliError::config(format!("config {}: {e}", p.display())))
        }
    }
}

fn load_model(path: &Path) -> Result<ValidatedModel, CliError> {
    let text = read_to_string(path)?;
    let spec = parse_model_text(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    validate_model(spec).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn load_dataset(
    model: &ValidatedModel,
    data: &Path,
    covariates: &Option<PathBuf>,
) -> Result<FunctionalDataset, CliError> {
    let recs = read_long_csv(read_to_string(data)?.as_bytes())
        .map_err(|e| CliError::config(format!("{}: {e}", data.display())))?;
    let covs = match covariates {
        Some(p) => read_covariate_csv(read_to_string(p)?.as_bytes())
            .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?,
        None => Vec::new(),
    };
    ingest_long_format(&recs, &covs, model.spec().time_domain)
        .map_err(|e| CliError::config(e.to_string()))
}

fn write_artifact(dir: &Path, name: &str, header: &str, body: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, format!("{header}{body}"))
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

fn numerical_from(msg: &str) -> CliError {
    // Variable-name mismatches are configuration errors, not numerical ones.
    if msg.contains("not present in the dataset") || msg.contains("declared") {
        CliError::config(msg.to_string())
    } else {
        CliError::numerical(msg.to_string())
    }
}

fn cmd_fit(args: FitArgs) -> Result<(), CliError> {
    let file_cfg = load_run_config(&args.io.config)?;
    let model = load_model(&args.io.model)?;
    let dataset = load_dataset(&model, &args.io.data, &args.io.covariates)?;
    let mut cfg = file_cfg.fit.unwrap_or_default();
    if let Some(seed) = args.io.seed.or(file_cfg.seed) {
        cfg.seed = seed;
    }
    if let Some(v) = args.max_iter {
        cfg.max_iter = v;
    }
    if let Some(v) = args.n_mc {
        cfg.n_mc = v;
    }
    match (args.alpha_lambda.as_deref(), args.alpha_gamma) {
        (Some("cv"), _) => cfg.alpha = AlphaChoice::Cv,
        (Some(v), g) => {
            let lambda: f64 = v
                .parse()
                .map_err(|_| CliError::config(format!("bad --alpha-lambda value `{v}`")))?;
            cfg.alpha = AlphaChoice::Fixed {
                lambda,
                gamma: g.unwrap_or(lambda),
            };
        }
        (None, Some(g)) => {
            if let AlphaChoice::Fixed { lambda, .. } = cfg.alpha {
                cfg.alpha = AlphaChoice::Fixed { lambda, gamma: g };
            }
        }
        (None, None) => {}
    }
    let resolved = toml::to_string(&cfg).unwrap_or_default();
    let header = report::provenance_header(&resolved, cfg.seed);

    let ctx = ModelContext::new(&model, &dataset).map_err(|e| numerical_from(&e.to_string()))?;
    let alpha = match &cfg.alpha {
        AlphaChoice::Fixed { lambda, gamma } => AlphaVector::shared(&model, *lambda, *gamma),
        AlphaChoice::Cv => {
            select_smoothing(&model, &dataset, &cfg).map_err(|e| numerical_from(&e.to_string()))?
        }
    };
    let fit = fit_mcem_with_alpha(&ctx, &cfg, &alpha, None)
        .map_err(|e| numerical_from(&e.to_string()))?;
    write_artifact(
        &args.io.out,
        "fit_report.txt",
        &header,
        &report::render_fit_report(&model, &fit),
    )?;
    let params_json = serde_json::to_string_pretty(&fit.params)
        .map_err(|e| CliError::numerical(format!("serialize params: {e}")))?;
    write_artifact(&args.io.out, "params.json", "", &params_json)?;
    if !fit.converged {
        eprintln!(
            "fsem: warning: EM did not reach the tolerances within {} iterations \
             (tol_coef = {:.3e}, tol_sigma2 = {:.3e})",
            fit.iterations,
            fit.trajectory.last().map(|d| d.tol_coef).unwrap_or(f64::NAN),
            fit.trajectory
                .last()
                .map(|d| d.tol_sigma2)
                .unwrap_or(f64::NAN),
        );
    }
    Ok(())
}

fn cmd_simulate(args: SimArgs) -> Result<(), CliError> {
    let file_cfg = load_run_config(&args.config)?;
    let mut scenario = match args.scenario {
        ScenarioArg::Sim1 => SimScenario::sim1_defaults(),
        ScenarioArg::Sim2 => SimScenario::sim2_defaults(),
    };
    if let Some(fit) = file_cfg.fit {
        scenario.fit = fit;
    }
    if let Some(boot) = file_cfg.bootstrap {
        scenario.bootstrap = boot;
    }
    if let Some(design) = args.design {
        scenario.design = match design {
            DesignArg::Regular => SamplingDesign::Regular,
            DesignArg::Irregular => SamplingDesign::Irregular,
            DesignArg::Mcar => SamplingDesign::Mcar {
                p_miss: args.p_miss.unwrap_or(0.12),
            },
        };
    }
    if let Some(n) = args.n {
        scenario.n = n;
    }
    if let Some(m) = args.m {
        scenario.m = m;
    }
    if let Some(r) = args.reps {
        scenario.replicates = r;
    }
    if let Some(j) = args.j {
        scenario.j_basis = j;
    }
    if let Some(b) = args.bootstrap {
        scenario.bootstrap.b = b;
    }
    if let Some(seed) = args.seed.or(file_cfg.seed) {
        scenario.seed = seed;
    }
    let resolved = toml::to_string(&scenario).unwrap_or_default();
    let header = report::provenance_header(&resolved, scenario.seed);
    let run = run_scenario(&scenario).map_err(|e| numerical_from(&e.to_string()))?;
    write_artifact(
        &args.out,
        "replication_table.csv",
        &header,
        &report::render_replication_table(&run.report),
    )?;
    let mut lines = String::from("replicate,converged,iterations,loglik_z,has_bands\n");
    for d in &run.replicate_diags {
        lines.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            d.replicate, d.converged, d.iterations, d.loglik_z, d.has_bands as u8
        ));
    }
    write_artifact(&args.out, "replicates.csv", &header, &lines)?;
    Ok(())
}

fn load_params(model: &ValidatedModel, path: &Path) -> Result<ParamSet, CliError> {
    let text = read_to_string(path)?;
    let params: ParamSet = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    params
        .check_shapes(model)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    Ok(params)
}

fn cmd_gof(args: GofArgs) -> Result<(), CliError> {
    let file_cfg = load_run_config(&args.io.config)?;
    let model = load_model(&args.io.model)?;
    let dataset = load_dataset(&model, &args.io.data, &args.io.covariates)?;
    let params = load_params(&model, &args.params)?;
    let seed = args.io.seed.or(file_cfg.seed).unwrap_or(0);
    let ctx = ModelContext::new(&model, &dataset).map_err(|e| numerical_from(&e.to_string()))?;
    let k = args.grid_points.max(1);
    let grid: Vec<f64> = (1..=k).map(|i| i as f64 / (k + 1) as f64).collect();
    let gof = fit_indices(&ctx, &params, &grid).map_err(|e| numerical_from(&e.to_string()))?;
    let header = report::provenance_header(&format!("gof grid_points={k}"), seed);
    write_artifact(&args.io.out, "gof.csv", &header, &report::render_gof(&gof))
}

/// Names of the free coefficient vectors, for band artifact files.
fn coefficient_names(model: &ValidatedModel) -> Vec<(String, CoefSlot)> {
    let spec = model.spec();
    let mut out = Vec::new();
    for (idx, l) in spec.loadings.iter().enumerate() {
        if l.anchored {
            continue;
        }
        out.push((
            format!(
                "lambda_{}_{}",
                spec.indicators[l.indicator], spec.factors[l.factor]
            ),
            CoefSlot::Loading(idx, l.effect),
        ));
    }
    for (idx, e) in spec.latent_edges.iter().enumerate() {
        out.push((
            format!("gamma_{}_{}", spec.factors[e.target], spec.factors[e.source]),
            CoefSlot::Latent(idx, e.effect),
        ));
    }
    for (idx, e) in spec.covariate_edges.iter().enumerate() {
        out.push((
            format!(
                "gamma_{}_{}",
                spec.factors[e.factor], spec.covariates[e.covariate].0
            ),
            CoefSlot::Covariate(idx, e.effect),
        ));
    }
    out
}

enum CoefSlot {
    Loading(usize, LoadingEffect),
    Latent(usize, fsem::model::LatentEffect),
    Covariate(usize, fsem::model::CovariateEffect),
}

fn cmd_bands(args: BandsArgs) -> Result<(), CliError> {
    let file_cfg = load_run_config(&args.io.config)?;
    let model = load_model(&args.io.model)?;
    let dataset = load_dataset(&model, &args.io.data, &args.io.covariates)?;
    let params = load_params(&model, &args.params)?;
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(CliError::config("band level must lie in (0, 1)"));
    }
    let seed = args.io.seed.or(file_cfg.seed).unwrap_or(0);
    let mut fit_cfg = file_cfg.fit.unwrap_or_default();
    fit_cfg.seed = seed;
    if let (Some(l), g) = (args.alpha_lambda, args.alpha_gamma) {
        fit_cfg.alpha = AlphaChoice::Fixed {
            lambda: l,
            gamma: g.unwrap_or(l),
        };
    }
    let alpha = match &fit_cfg.alpha {
        AlphaChoice::Fixed { lambda, gamma } => AlphaVector::shared(&model, *lambda, *gamma),
        AlphaChoice::Cv => {
            return Err(CliError::config(
                "bands requires fixed smoothing weights (run fit with cv first)",
            ))
        }
    };
    let mut boot = file_cfg.bootstrap.unwrap_or_default();
    if let Some(b) = args.b {
        boot.b = b;
    }
    boot.seed = seed;
    let construction = match args.construction {
        ConstructionArg::Pointwise => BandConstruction::Pointwise,
        ConstructionArg::Ellipsoid => BandConstruction::Ellipsoid,
    };
    let resolved = format!(
        "bands level={} b={} construction={:?}",
        args.level, boot.b, construction
    );
    let header = report::provenance_header(&resolved, seed);
    let cov = bootstrap_covariances(&model, &dataset, &fit_cfg, &alpha, &boot, &params)
        .map_err(|e| numerical_from(&e.to_string()))?;
    let basis = model.basis();
    let cgrid = curve_grid(basis, 101);
    let sgrid = surface_grid(basis, 41);
    for (name, slot) in coefficient_names(&model) {
        let (coef, block, eval, grid): (&DVector<f64>, &DMatrix<f64>, CoefEval, &[(f64, f64)]) =
            match &slot {
                CoefSlot::Loading(idx, effect) => {
                    let block = cov.lambda[*idx].as_ref().expect("free loading");
                    match effect {
                        LoadingEffect::Historical => {
                            (&params.lambda[*idx], block, CoefEval::Surface(basis), &sgrid[..])
                        }
                        _ => (
                            &params.lambda[*idx],
                            block,
                            CoefEval::Curve(basis),
                            &cgrid[..],
                        ),
                    }
                }
                CoefSlot::Latent(idx, effect) => {
                    let (eval, grid): (CoefEval, &[(f64, f64)]) = match effect {
                        fsem::model::LatentEffect::Historical => {
                            (CoefEval::Surface(basis), &sgrid[..])
                        }
                        fsem::model::LatentEffect::Concurrent => {
                            (CoefEval::Curve(basis), &cgrid[..])
                        }
                    };
                    (&params.gamma_eta[*idx], &cov.gamma_eta[*idx], eval, grid)
                }
                CoefSlot::Covariate(idx, effect) => {
                    let (eval, grid): (CoefEval, &[(f64, f64)]) = match effect {
                        fsem::model::CovariateEffect::Historical => {
                            (CoefEval::Surface(basis), &sgrid[..])
                        }
                        _ => (CoefEval::Curve(basis), &cgrid[..]),
                    };
                    (&params.gamma_x[*idx], &cov.gamma_x[*idx], eval, grid)
                }
            };
        // Scalar (fixed-effect) loadings have no band file.
        if coef.len() == 1 {
            continue;
        }
        let band = confidence_band(coef, block, &eval, grid, args.level, construction);
        write_artifact(
            &args.io.out,
            &format!("band_{name}.csv"),
            &header,
            &report::render_band_csv(&band),
        )?;
    }
    Ok(())
}
