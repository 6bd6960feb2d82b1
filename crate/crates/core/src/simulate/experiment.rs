//! Monte Carlo experiment driver and rate extraction.
//!
//! Replication `r` of grid point `(n_i, k_j)` draws from a ChaCha8 stream
//! seeded with the master seed and stream id `(i << 40) | (j << 24) | r`, so
//! each replication is independent of execution order and thread count.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{build_tensor_haar, BasisSystem, DiscreteBasis, Partition};
use crate::error::{Error, Result};
use crate::estimators::{estimate, estimate_with_fit, kernel_for_fit, EstimateReport, EstimatorConfig, KernelWeight};
use crate::model::Func;
use crate::nuisance::{NuisanceConfig, NuisanceFit, DEFAULT_CLIP};
use crate::simulate::truth::Truth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Plugin,
    First,
    Second,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Plugin => "plugin",
            EstimatorKind::First => "first",
            EstimatorKind::Second => "second",
        }
    }

    fn value(self, report: &EstimateReport) -> Option<f64> {
        match self {
            EstimatorKind::Plugin => Some(report.chi_plugin),
            EstimatorKind::First => Some(report.chi_first),
            EstimatorKind::Second => report.chi_second,
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plugin" => Ok(EstimatorKind::Plugin),
            "first" => Ok(EstimatorKind::First),
            "second" => Ok(EstimatorKind::Second),
            _ => Err(Error::Argument(format!("unknown estimator `{s}`"))),
        }
    }
}

/// Truncation sizes per sample size.
#[derive(Debug, Clone, PartialEq)]
pub enum KSchedule {
    /// Every listed `k` at every `n`.
    Fixed(Vec<usize>),
    /// `k = ceil(c n^p)`.
    Power { c: f64, p: f64 },
    /// `k = ceil(min(n^{2d/(2 gamma + d)}, n/4))`.
    Default,
}

impl KSchedule {
    pub fn values(&self, n: usize, d: usize, gamma: f64) -> Vec<usize> {
        let nf = n as f64;
        match self {
            KSchedule::Fixed(v) => v.clone(),
            KSchedule::Power { c, p } => vec![(c * nf.powf(*p)).ceil().max(1.0) as usize],
            KSchedule::Default => {
                let d = d as f64;
                let k = nf.powf(2.0 * d / (2.0 * gamma + d)).min(nf / 4.0);
                vec![k.ceil().max(1.0) as usize]
            }
        }
    }
}

/// Values of a fixed fit on a finite support; missing `f_hat`, `w_hat` default to the truth.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FixedFit {
    pub a_hat: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub f_hat: Option<Vec<f64>>,
    pub w_hat: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum FitMode {
    /// Nuisances estimated from the data with sample splitting.
    #[default]
    Estimated,
    /// The true nuisance functions (oracle mode).
    Truth,
    /// Deliberately chosen fixed functions (finite supports only).
    Fixed(FixedFit),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub truth: Truth,
    pub n_grid: Vec<usize>,
    pub k_schedule: KSchedule,
    /// Nuisance basis size; `None` ties it to the truncation size `k`.
    pub nuisance_k: Option<usize>,
    pub folds: usize,
    pub replications: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    pub fit: FitMode,
    pub clip: f64,
    pub kernel_weight: KernelWeight,
    /// Smoothness of the weight used by [`KSchedule::Default`].
    pub gamma: f64,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(truth: Truth, n_grid: Vec<usize>, k_schedule: KSchedule, replications: usize, seed: u64) -> Self {
        let gamma = match &truth {
            Truth::Continuous(c) => c.smoothness().gamma,
            Truth::Discrete(_) => 1.0,
        };
        ExperimentConfig {
            truth,
            n_grid,
            k_schedule,
            nuisance_k: None,
            folds: 2,
            replications,
            seed,
            estimators: vec![EstimatorKind::Plugin, EstimatorKind::First, EstimatorKind::Second],
            fit: FitMode::Estimated,
            clip: DEFAULT_CLIP,
            kernel_weight: KernelWeight::WHat,
            gamma,
            threads: None,
            output: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(Error::Config("n grid must be nonempty with positive entries".into()));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators requested".into()));
        }
        if let KSchedule::Fixed(v) = &self.k_schedule {
            if v.is_empty() || v.contains(&0) {
                return Err(Error::Config("k schedule must be nonempty with positive entries".into()));
            }
        }
        if matches!(self.fit, FitMode::Fixed(_)) && !matches!(self.truth, Truth::Discrete(_)) {
            return Err(Error::Config("fixed fits require a discrete truth".into()));
        }
        if let (FitMode::Fixed(f), Truth::Discrete(m)) = (&self.fit, &self.truth) {
            let j = m.num_atoms();
            let lens = [Some(f.a_hat.len()), Some(f.b_hat.len()), f.f_hat.as_ref().map(Vec::len), f.w_hat.as_ref().map(Vec::len)];
            if lens.iter().flatten().any(|l| *l != j) {
                return Err(Error::Config(format!("fixed fit vectors must have {j} entries")));
            }
        }
        Ok(())
    }
}

/// Aggregated results of one estimator at one `(n, k)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub estimator: EstimatorKind,
    pub n: usize,
    pub k: usize,
    pub mean: f64,
    pub bias: f64,
    pub variance: f64,
    pub rmse: f64,
    pub replications: usize,
    pub failures: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ResultTable {
    pub chi: f64,
    pub rows: Vec<ResultRow>,
}

pub const RESULT_COLUMNS: [&str; 10] =
    ["estimator", "n", "k", "mean", "bias", "variance", "rmse", "replications", "failures", "seed"];

/// 17 significant digits.
pub fn format_number(x: f64) -> String {
    format!("{x:.16e}")
}

impl ResultTable {
    pub fn rows_for(&self, estimator: EstimatorKind) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(move |r| r.estimator == estimator)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# chi={}", format_number(self.chi))?;
        writeln!(w, "{}", RESULT_COLUMNS.join(","))?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.estimator,
                r.n,
                r.k,
                format_number(r.mean),
                format_number(r.bias),
                format_number(r.variance),
                format_number(r.rmse),
                r.replications,
                r.failures,
                r.seed
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("table is ASCII")
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let fmt_err = |field: &str, msg: String| Error::format("result table", field, msg);
        let mut chi = f64::NAN;
        for line in text.lines().filter(|l| l.starts_with('#')) {
            if let Some(v) = line.trim_start_matches('#').trim().strip_prefix("chi=") {
                chi = v.parse().map_err(|e| fmt_err("chi", format!("{e}")))?;
            }
        }
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| fmt_err("header", e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if header != RESULT_COLUMNS {
            return Err(fmt_err("header", format!("expected columns {}", RESULT_COLUMNS.join(","))));
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| fmt_err("row", e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|e| fmt_err(RESULT_COLUMNS[i], format!("{e}")))
            };
            let int = |i: usize| -> Result<u64> {
                rec[i].parse().map_err(|e| fmt_err(RESULT_COLUMNS[i], format!("{e}")))
            };
            rows.push(ResultRow {
                estimator: rec[0].parse().map_err(|e: Error| fmt_err("estimator", e.to_string()))?,
                n: int(1)? as usize,
                k: int(2)? as usize,
                mean: num(3)?,
                bias: num(4)?,
                variance: num(5)?,
                rmse: num(6)?,
                replications: int(7)? as usize,
                failures: int(8)? as usize,
                seed: int(9)?,
            });
        }
        Ok(ResultTable { chi, rows })
    }
}

fn stream_rng(seed: u64, n_index: usize, k_index: usize, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((n_index as u64) << 40) | ((k_index as u64) << 24) | rep as u64);
    rng
}

/// Basis of size (at least) `k` on the truth's covariate domain.
fn basis_for(truth: &Truth, k: usize) -> Result<BasisSystem> {
    match truth {
        Truth::Discrete(m) => Ok(BasisSystem::Discrete(DiscreteBasis::blocks(m.num_atoms(), k)?)),
        Truth::Continuous(c) => {
            let d = c.smoothness().d;
            let level = ((k.max(1) as f64).log2() / d as f64).ceil().max(0.0) as u32;
            build_tensor_haar(d, level)
        }
    }
}

fn partition_for(basis: &BasisSystem) -> Partition {
    match basis {
        BasisSystem::Haar(h) => h.partition(),
        BasisSystem::Discrete(b) => Partition::Atoms(b.atoms()),
    }
}

fn oracle_fit(config: &ExperimentConfig) -> Option<NuisanceFit> {
    let truth = &config.truth;
    match &config.fit {
        FitMode::Estimated => None,
        FitMode::Truth => {
            let p = truth.params();
            Some(NuisanceFit::fixed(p.a, p.b, p.f, truth.weight(), truth.domain()))
        }
        FitMode::Fixed(f) => {
            let Truth::Discrete(m) = truth else { return None };
            Some(NuisanceFit::fixed(
                Func::atoms(f.a_hat.clone()),
                Func::atoms(f.b_hat.clone()),
                Func::atoms(f.f_hat.clone().unwrap_or_else(|| m.f().to_vec())),
                Func::atoms(f.w_hat.clone().unwrap_or_else(|| m.weight())),
                m.domain(),
            ))
        }
    }
}

fn replicate(config: &ExperimentConfig, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<EstimateReport> {
    let split_seed = rng.next_u64();
    let data = config.truth.sample(n, rng)?;
    let kind = config.truth.kind();
    let want_second = config.estimators.contains(&EstimatorKind::Second);
    let kernel_basis = if want_second { Some(basis_for(&config.truth, k)?) } else { None };
    match oracle_fit(config) {
        Some(fit) => {
            let pk = match kernel_basis {
                Some(b) => Some(kernel_for_fit(&fit, b, config.kernel_weight)?),
                None => None,
            };
            estimate_with_fit(&data, &fit, kind, pk.as_ref())
        }
        None => {
            let nuisance_basis = basis_for(&config.truth, config.nuisance_k.unwrap_or(k))?;
            let partition = partition_for(&nuisance_basis);
            let est = EstimatorConfig {
                nuisance: NuisanceConfig { basis: nuisance_basis, partition, clip: config.clip },
                kernel_basis,
                kernel_weight: config.kernel_weight,
                folds: config.folds,
                seed: split_seed,
            };
            estimate(kind, &data, &est)
        }
    }
}

/// Largest tolerated fraction of failed replications per grid point.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

fn run_grid(config: &ExperimentConfig) -> Result<ResultTable> {
    let chi = config.truth.chi();
    let d = config.truth.dimension().unwrap_or(1);
    let mut rows = Vec::new();
    for (ni, &n) in config.n_grid.iter().enumerate() {
        for (ki, k) in config.k_schedule.values(n, d, config.gamma).into_iter().enumerate() {
            let k_used = basis_for(&config.truth, k)?.size();
            let outcomes: Vec<Result<EstimateReport>> = (0..config.replications)
                .into_par_iter()
                .map(|r| replicate(config, n, k, &mut stream_rng(config.seed, ni, ki, r)))
                .collect();
            let failures = outcomes.iter().filter(|o| o.is_err()).count();
            if failures as f64 > MAX_FAILURE_FRACTION * config.replications as f64 {
                let first = outcomes.into_iter().find_map(|o| o.err()).expect("at least one failure");
                return Err(Error::Data(format!(
                    "{failures} of {} replications failed at n = {n}, k = {k}; first error: {first}",
                    config.replications
                )));
            }
            let reports: Vec<EstimateReport> = outcomes.into_iter().filter_map(|o| o.ok()).collect();
            for &est in &config.estimators {
                let values: Vec<f64> = reports.iter().filter_map(|r| est.value(r)).collect();
                rows.push(summarize(est, n, k_used, chi, &values, failures, config.seed));
            }
        }
    }
    rows.sort_by_key(|r| (r.estimator, r.n, r.k));
    Ok(ResultTable { chi, rows })
}

fn summarize(estimator: EstimatorKind, n: usize, k: usize, chi: f64, values: &[f64], failures: usize, seed: u64) -> ResultRow {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    let mse = values.iter().map(|v| (v - chi).powi(2)).sum::<f64>() / m;
    ResultRow {
        estimator,
        n,
        k,
        mean,
        bias: mean - chi,
        variance,
        rmse: mse.sqrt(),
        replications: values.len(),
        failures,
        seed,
    }
}

/// Runs every `(n, k, replication)` of the grid and aggregates per estimator.
/// The table is a deterministic function of the configuration.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultTable> {
    config.validate()?;
    match config.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| run_grid(config))
        }
        None => run_grid(config),
    }
}

/// Least-squares slope of `log(rmse)` against `log(n)` over the estimator's rows.
pub fn rate_slope(table: &ResultTable, estimator: EstimatorKind) -> Result<f64> {
    let pts: Vec<(f64, f64)> = table.rows_for(estimator).map(|r| ((r.n as f64).ln(), r.rmse.ln())).collect();
    let mut ns: Vec<usize> = table.rows_for(estimator).map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 3 {
        return Err(Error::Argument(format!(
            "rate slope of `{estimator}` needs at least 3 distinct n, got {}",
            ns.len()
        )));
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}
