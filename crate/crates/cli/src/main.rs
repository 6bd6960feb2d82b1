use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hoif_core::basis::{build_tensor_haar, BasisSystem, DiscreteBasis, Partition};
use hoif_core::estimators::{estimate, EstimatorConfig, KernelWeight};
use hoif_core::model::{ModelKind, Propensity};
use hoif_core::nuisance::{NuisanceConfig, DEFAULT_CLIP};
use hoif_core::selftest::run_selftest;
use hoif_core::simulate::io::check_dataset;
use hoif_core::simulate::{
    generate_dataset, parse_experiment_config, read_dataset, resolve_output, run_experiment, run_oracle, write_dataset,
    DatasetDomain, Truth,
};
use hoif_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "hoif", version, about = "Higher-order influence function estimators for structured functionals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo experiment and write its result table.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output file; overrides both the config and `HOIF_OUTPUT_DIR`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Draw a dataset from the truth of an experiment config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the functional from a dataset file.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        /// Model of the dataset; defaults to the one recorded in its header.
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        /// Known treatment probability for the ate model.
        #[arg(long, default_value_t = 0.5)]
        propensity: f64,
        /// Block-basis size for atom-valued covariates (default: one block per atom).
        #[arg(long)]
        k: Option<usize>,
        /// Haar resolution level for covariates in the unit cube.
        #[arg(long)]
        level: Option<u32>,
        /// Add the second-order correction.
        #[arg(long)]
        second_order: bool,
        /// Truncation size of the second-order kernel (atoms); defaults to `k`.
        #[arg(long)]
        kernel_k: Option<usize>,
        /// Truncation level of the second-order kernel (cube); defaults to `level`.
        #[arg(long)]
        kernel_level: Option<u32>,
        #[arg(long, value_enum, default_value_t = WeightArg::WHat)]
        kernel_weight: WeightArg,
        #[arg(long, default_value_t = 2)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_CLIP)]
        clip: f64,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Print exact biases for a discrete model and a fixed fit.
    Oracle {
        #[arg(long)]
        file: PathBuf,
    },
    /// Run the randomized invariant suite.
    Selftest {
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    MissingData,
    Covariance,
    Ate,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightArg {
    WHat,
    NegFHat,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

/// A failure together with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_input_error() { EXIT_USAGE } else { EXIT_RUNTIME };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

fn read_input(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn simulate(config: &Path, out: Option<&Path>, threads: Option<usize>) -> Result<(), Failure> {
    let mut cfg = parse_experiment_config(&read_input(config)?)?;
    if threads.is_some() {
        cfg.threads = threads;
    }
    if cfg.threads == Some(0) {
        return Err(usage("--threads must be at least 1"));
    }
    let path = resolve_output(cfg.output.as_deref(), out);
    let table = run_experiment(&cfg)?;
    let mut file = fs::File::create(&path).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: format!("cannot create {}: {e}", path.display()),
    })?;
    table.write_csv(&mut file)?;
    println!("wrote {} rows to {}", table.rows.len(), path.display());
    for row in &table.rows {
        println!(
            "{:>6} n={:<7} k={:<6} bias={:+.4e} sd={:.4e} rmse={:.4e}",
            row.estimator.name(),
            row.n,
            row.k,
            row.bias,
            row.variance.sqrt(),
            row.rmse
        );
    }
    Ok(())
}

fn generate(config: &Path, n: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let cfg = parse_experiment_config(&read_input(config)?)?;
    let data = generate_dataset(&cfg.truth, n, seed)?;
    let domain = match &cfg.truth {
        Truth::Discrete(m) => DatasetDomain::Atoms(m.num_atoms()),
        Truth::Continuous(c) => DatasetDomain::Cube(c.smoothness().d),
    };
    let file = fs::File::create(out).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: format!("cannot create {}: {e}", out.display()),
    })?;
    write_dataset(std::io::BufWriter::new(file), cfg.truth.kind(), domain, &data)?;
    println!("wrote {n} observations to {} (chi = {})", out.display(), cfg.truth.chi());
    Ok(())
}

fn model_kind(arg: ModelArg, propensity: f64) -> Result<ModelKind, Failure> {
    Ok(match arg {
        ModelArg::MissingData => ModelKind::MissingData,
        ModelArg::Covariance => ModelKind::Covariance,
        ModelArg::Ate => {
            if !(propensity > 0.0 && propensity < 1.0) {
                return Err(usage("--propensity must lie in (0, 1)"));
            }
            ModelKind::Ate(Propensity::Constant(propensity))
        }
    })
}

fn recorded_model(name: Option<&str>) -> Result<ModelArg, Failure> {
    match name {
        Some("missing-data") => Ok(ModelArg::MissingData),
        Some("covariance") => Ok(ModelArg::Covariance),
        Some("ate") => Ok(ModelArg::Ate),
        Some(other) => Err(usage(format!("malformed dataset: field `model`: unknown model `{other}`"))),
        None => Err(usage("the dataset header records no model; pass --model")),
    }
}

/// Default Haar level: cells of side about `n^(-1/(d+2))`.
fn default_level(n: usize, d: usize) -> u32 {
    ((n.max(1) as f64).log2() / (d as f64 + 2.0)).floor() as u32
}

#[allow(clippy::too_many_arguments)]
fn estimate_cmd(
    data: &Path,
    model: Option<ModelArg>,
    propensity: f64,
    k: Option<usize>,
    level: Option<u32>,
    second_order: bool,
    kernel_k: Option<usize>,
    kernel_level: Option<u32>,
    kernel_weight: WeightArg,
    folds: usize,
    seed: u64,
    clip: f64,
    format: Format,
) -> Result<(), Failure> {
    let dataset = read_dataset(&read_input(data)?)?;
    let model = match model {
        Some(m) => m,
        None => recorded_model(dataset.model.as_deref())?,
    };
    let kind = model_kind(model, propensity)?;
    check_dataset(&kind, &dataset)?;
    if folds == 0 {
        return Err(usage("--folds must be at least 1"));
    }
    if !(clip > 0.0 && clip < 0.5) {
        return Err(usage("--clip must lie in (0, 0.5)"));
    }
    let n = dataset.observations.len();
    let (basis, partition, kernel_basis) = match dataset.domain {
        DatasetDomain::Atoms(j) => {
            if level.is_some() || kernel_level.is_some() {
                return Err(usage("--level applies to cube-valued covariates; use --k"));
            }
            let k = k.unwrap_or(j);
            let blocks = |k: usize| DiscreteBasis::blocks(j, k).map(BasisSystem::Discrete).map_err(|e| usage(e.to_string()));
            let kernel = if second_order { Some(blocks(kernel_k.unwrap_or(k))?) } else { None };
            (blocks(k)?, Partition::Atoms(j), kernel)
        }
        DatasetDomain::Cube(d) => {
            if k.is_some() || kernel_k.is_some() {
                return Err(usage("--k applies to atom-valued covariates; use --level"));
            }
            let level = level.unwrap_or_else(|| default_level(n, d));
            let haar = |l: u32| build_tensor_haar(d, l).map_err(|e| usage(e.to_string()));
            let kernel = if second_order { Some(haar(kernel_level.unwrap_or(level))?) } else { None };
            (haar(level)?, Partition::Dyadic { d, level }, kernel)
        }
    };
    let config = EstimatorConfig {
        nuisance: NuisanceConfig { basis, partition, clip },
        kernel_basis,
        kernel_weight: match kernel_weight {
            WeightArg::WHat => KernelWeight::WHat,
            WeightArg::NegFHat => KernelWeight::NegFHat,
        },
        folds,
        seed,
    };
    let report = estimate(&kind, &dataset.observations, &config)?;
    match format {
        Format::Json => {
            let mut value = serde_json::to_value(&report).map_err(|e| Failure { code: EXIT_RUNTIME, message: e.to_string() })?;
            value["model"] = kind.name().into();
            value["n"] = n.into();
            println!("{}", serde_json::to_string_pretty(&value).expect("json values serialize"));
        }
        Format::Text => {
            let half = report.first_order_half_width(1.959963984540054);
            println!("model = {}", kind.name());
            println!("n = {n}");
            println!("folds = {}", report.folds);
            println!("chi_plugin = {}", report.chi_plugin);
            println!("chi_first = {}", report.chi_first);
            println!("var_first = {}", report.var_first);
            println!("ci95_first = [{}, {}]", report.chi_first - half, report.chi_first + half);
            if let Some(c) = report.chi_second {
                println!("chi_second = {c}");
                println!("k = {}", report.k_used);
            }
            if let Some(g) = report.gram_condition {
                println!("gram_condition = {g:.6e}");
            }
            if let Some(dg) = report.degeneracy {
                println!("empirical_degeneracy = {dg:.6e}");
            }
            println!("clip_events = {}", report.clip_events);
        }
    }
    Ok(())
}

fn oracle(file: &Path) -> Result<(), Failure> {
    let report = run_oracle(&read_input(file)?)?;
    let mut out = std::io::stdout().lock();
    report.write_text(&mut out)?;
    Ok(())
}

fn selftest(cases: usize, seed: u64) -> Result<(), Failure> {
    if cases == 0 {
        return Err(usage("--cases must be at least 1"));
    }
    let outcomes = run_selftest(cases, seed);
    let mut failed = 0;
    for o in &outcomes {
        let status = if o.passed() { "PASS" } else { "FAIL" };
        println!("{status} {} (cases {}, worst {:.3e}, tol {:.0e})", o.name, o.cases, o.worst, o.tolerance);
        failed += usize::from(!o.passed());
    }
    if failed > 0 {
        return Err(Failure { code: EXIT_RUNTIME, message: format!("{failed} invariant checks failed") });
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { config, out, threads } => simulate(&config, out.as_deref(), threads),
        Command::Generate { config, n, seed, out } => generate(&config, n, seed, &out),
        Command::Estimate {
            data,
            model,
            propensity,
            k,
            level,
            second_order,
            kernel_k,
            kernel_level,
            kernel_weight,
            folds,
            seed,
            clip,
            format,
        } => estimate_cmd(
            &data,
            model,
            propensity,
            k,
            level,
            second_order,
            kernel_k,
            kernel_level,
            kernel_weight,
            folds,
            seed,
            clip,
            format,
        ),
        Command::Oracle { file } => oracle(&file),
        Command::Selftest { cases, seed } => selftest(cases, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("hoif: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
