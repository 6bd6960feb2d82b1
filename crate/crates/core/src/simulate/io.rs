//! File formats: experiment configs and oracle fixtures (TOML), datasets (CSV).

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::basis::{BasisSystem, DiscreteBasis, ProjectionKernel, WeightMeasure};
use crate::error::{Error, Result};
use crate::estimators::{exact_bias_first_order, exact_bias_second_order, ExactBias, KernelWeight};
use crate::model::{validate_layout, Covariate, DiscreteModel, Func, ModelKind, Observation, Propensity};
use crate::nuisance::{NuisanceFit, DEFAULT_CLIP};
use crate::simulate::experiment::{EstimatorKind, ExperimentConfig, FitMode, FixedFit, KSchedule};
use crate::simulate::truth::{ContinuousTruth, SmoothnessSpec, Truth};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "HOIF_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelName {
    MissingData,
    Covariance,
    Ate,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum PropensitySpec {
    Constant(f64),
    Atoms(Vec<f64>),
}

impl PropensitySpec {
    fn to_propensity(&self) -> Propensity {
        match self {
            PropensitySpec::Constant(p) => Propensity::Constant(*p),
            PropensitySpec::Atoms(v) => Propensity::Atoms(v.clone()),
        }
    }
}

fn model_kind(model: ModelName, propensity: Option<&PropensitySpec>, what: &'static str) -> Result<ModelKind> {
    match (model, propensity) {
        (ModelName::MissingData, None) => Ok(ModelKind::MissingData),
        (ModelName::Covariance, None) => Ok(ModelKind::Covariance),
        (ModelName::Ate, Some(p)) => Ok(ModelKind::Ate(p.to_propensity())),
        (ModelName::Ate, None) => Ok(ModelKind::Ate(Propensity::Constant(0.5))),
        (_, Some(_)) => Err(Error::format(what, "propensity", "only the ate model has a propensity")),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TruthSpec {
    Discrete {
        f: Vec<f64>,
        a: Vec<f64>,
        b: Vec<f64>,
        propensity: Option<PropensitySpec>,
    },
    Holder {
        d: usize,
        alpha: f64,
        beta: f64,
        /// Defaults to `alpha`.
        gamma: Option<f64>,
        levels: Option<u32>,
        phase_seed: Option<u64>,
        /// Cell probabilities of a dyadic partition; uniform when absent.
        density: Option<Vec<f64>>,
        propensity: Option<f64>,
    },
}

impl TruthSpec {
    pub fn build(&self, model: ModelName) -> Result<Truth> {
        const WHAT: &str = "config";
        match self {
            TruthSpec::Discrete { f, a, b, propensity } => {
                let kind = model_kind(model, propensity.as_ref(), WHAT)?;
                let m = DiscreteModel::new(kind, f.clone(), a.clone(), b.clone())
                    .map_err(|e| Error::format(WHAT, "truth", e.to_string()))?;
                Ok(Truth::Discrete(m))
            }
            TruthSpec::Holder { d, alpha, beta, gamma, levels, phase_seed, density, propensity } => {
                let p = propensity.map(PropensitySpec::Constant);
                let kind = model_kind(model, p.as_ref(), WHAT)?;
                let s = SmoothnessSpec::new(*alpha, *beta, gamma.unwrap_or(*alpha), *d)
                    .map_err(|e| Error::format(WHAT, "truth", e.to_string()))?;
                let t = ContinuousTruth::holder(kind, s, levels.unwrap_or(10), phase_seed.unwrap_or(0), density.clone())
                    .map_err(|e| Error::format(WHAT, "truth", e.to_string()))?;
                Ok(Truth::Continuous(t))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KScheduleSpec {
    Fixed { values: Vec<usize> },
    Power { c: f64, p: f64 },
    Default,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FitSpec {
    Estimated,
    Truth,
    Fixed {
        a_hat: Vec<f64>,
        b_hat: Vec<f64>,
        f_hat: Option<Vec<f64>>,
        w_hat: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelWeightName {
    WHat,
    NegFHat,
}

/// Experiment configuration file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub model: ModelName,
    pub n: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub folds: Option<usize>,
    pub estimators: Vec<EstimatorKind>,
    pub output: Option<PathBuf>,
    pub threads: Option<usize>,
    pub clip: Option<f64>,
    pub kernel_weight: Option<KernelWeightName>,
    pub nuisance_k: Option<usize>,
    pub k_schedule: KScheduleSpec,
    pub truth: TruthSpec,
    pub fit: Option<FitSpec>,
}

impl ExperimentFile {
    pub fn into_config(self) -> Result<ExperimentConfig> {
        const WHAT: &str = "config";
        let truth = self.truth.build(self.model)?;
        let k_schedule = match self.k_schedule {
            KScheduleSpec::Fixed { values } => KSchedule::Fixed(values),
            KScheduleSpec::Power { c, p } => KSchedule::Power { c, p },
            KScheduleSpec::Default => KSchedule::Default,
        };
        let mut cfg = ExperimentConfig::new(truth, self.n, k_schedule, self.replications, self.seed);
        cfg.estimators = self.estimators;
        cfg.folds = self.folds.unwrap_or(2);
        cfg.clip = self.clip.unwrap_or(DEFAULT_CLIP);
        cfg.threads = self.threads;
        cfg.nuisance_k = self.nuisance_k;
        cfg.output = self.output;
        cfg.kernel_weight = match self.kernel_weight {
            Some(KernelWeightName::NegFHat) => KernelWeight::NegFHat,
            _ => KernelWeight::WHat,
        };
        cfg.fit = match self.fit {
            None | Some(FitSpec::Estimated) => FitMode::Estimated,
            Some(FitSpec::Truth) => FitMode::Truth,
            Some(FitSpec::Fixed { a_hat, b_hat, f_hat, w_hat }) => FitMode::Fixed(FixedFit { a_hat, b_hat, f_hat, w_hat }),
        };
        let field_err = |field: &str, msg: &str| Error::format(WHAT, field, msg);
        if cfg.n_grid.is_empty() || cfg.n_grid.contains(&0) {
            return Err(field_err("n", "must be a nonempty list of positive sample sizes"));
        }
        if cfg.replications == 0 {
            return Err(field_err("replications", "must be at least 1"));
        }
        if cfg.estimators.is_empty() {
            return Err(field_err("estimators", "must name at least one estimator"));
        }
        if cfg.folds == 0 {
            return Err(field_err("folds", "must be at least 1"));
        }
        if !(cfg.clip > 0.0 && cfg.clip < 0.5) {
            return Err(field_err("clip", "must lie in (0, 0.5)"));
        }
        if cfg.threads == Some(0) {
            return Err(field_err("threads", "must be at least 1"));
        }
        if let KSchedule::Fixed(v) = &cfg.k_schedule {
            if v.is_empty() || v.contains(&0) {
                return Err(field_err("k_schedule.values", "must be a nonempty list of positive sizes"));
            }
        }
        cfg.validate().map_err(|e| field_err("fit", &e.to_string()))?;
        Ok(cfg)
    }
}

/// Name of the key on the line where a TOML error starts, if any.
fn toml_error_field(text: &str, err: &toml::de::Error) -> String {
    let line_key = err.span().and_then(|span| {
        let start = text[..span.start.min(text.len())].rfind('\n').map_or(0, |p| p + 1);
        let line = text[start..].lines().next()?;
        let key = line.split('=').next()?.trim();
        (!key.is_empty() && !key.starts_with('[') && line.contains('=')).then(|| key.to_string())
    });
    line_key
        .or_else(|| {
            let msg = err.message();
            let s = msg.find('`')?;
            let e = msg[s + 1..].find('`')?;
            Some(msg[s + 1..s + 1 + e].to_string())
        })
        .unwrap_or_else(|| "<document>".to_string())
}

fn parse_toml<T: for<'de> Deserialize<'de>>(text: &str, what: &'static str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::format(what, toml_error_field(text, &e), e.message().to_string()))
}

pub fn parse_experiment_config(text: &str) -> Result<ExperimentConfig> {
    parse_toml::<ExperimentFile>(text, "config")?.into_config()
}

/// Resolves the output path: an explicit override wins; otherwise the config's
/// `output` (default `results.csv`), relative paths joined to `$HOIF_OUTPUT_DIR` when set.
pub fn resolve_output(config_output: Option<&Path>, override_path: Option<&Path>) -> PathBuf {
    if let Some(p) = override_path {
        return p.to_path_buf();
    }
    let p = config_output.map_or_else(|| PathBuf::from("results.csv"), Path::to_path_buf);
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if p.is_relative() => PathBuf::from(dir).join(p),
        _ => p,
    }
}

/// Covariate domain recorded with a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetDomain {
    Atoms(usize),
    Cube(usize),
}

impl DatasetDomain {
    fn tag(&self) -> String {
        match self {
            DatasetDomain::Atoms(j) => format!("atoms:{j}"),
            DatasetDomain::Cube(d) => format!("cube:{d}"),
        }
    }

    fn z_columns(&self) -> usize {
        match self {
            DatasetDomain::Atoms(_) => 1,
            DatasetDomain::Cube(d) => *d,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub model: Option<String>,
    pub domain: DatasetDomain,
    pub observations: Vec<Observation>,
}

/// Writes `y1,y2,a,z1..zd`; `y2` is blank outside the ATE model and atoms are
/// written as their index in `z1`.
pub fn write_dataset(mut w: impl Write, kind: &ModelKind, domain: DatasetDomain, data: &[Observation]) -> Result<()> {
    writeln!(w, "# hoif dataset model={} domain={}", kind.name(), domain.tag())?;
    writeln!(w, "# missing-data convention: y1 = Y*A, the response is recorded only when a = 1")?;
    let zc: Vec<String> = (1..=domain.z_columns()).map(|i| format!("z{i}")).collect();
    writeln!(w, "y1,y2,a,{}", zc.join(","))?;
    let bit = |b: bool| if b { "1" } else { "0" };
    for x in data {
        let z = match &x.z {
            Covariate::Atom(j) => j.to_string(),
            Covariate::Point(p) => p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        };
        writeln!(w, "{},{},{},{}", bit(x.y1), x.y2.map_or("", bit), bit(x.a), z)?;
    }
    Ok(())
}

pub fn read_dataset(text: &str) -> Result<Dataset> {
    const WHAT: &str = "dataset";
    let mut model = None;
    let mut domain = None;
    for line in text.lines().take_while(|l| l.starts_with('#') || l.trim().is_empty()) {
        for token in line.trim_start_matches('#').split_whitespace() {
            if let Some(m) = token.strip_prefix("model=") {
                model = Some(m.to_string());
            } else if let Some(d) = token.strip_prefix("domain=") {
                let (kind, size) = d
                    .split_once(':')
                    .ok_or_else(|| Error::format(WHAT, "domain", format!("expected atoms:J or cube:d, got `{d}`")))?;
                let size: usize = size
                    .parse()
                    .map_err(|_| Error::format(WHAT, "domain", format!("bad size in `{d}`")))?;
                domain = Some(match kind {
                    "atoms" => DatasetDomain::Atoms(size),
                    "cube" => DatasetDomain::Cube(size),
                    _ => return Err(Error::format(WHAT, "domain", format!("unknown domain `{kind}`"))),
                });
            }
        }
    }
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::format(WHAT, "header", e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 4 || header[..3] != ["y1", "y2", "a"] {
        return Err(Error::format(WHAT, "header", "expected columns y1,y2,a,z1..zd"));
    }
    for (i, h) in header[3..].iter().enumerate() {
        if *h != format!("z{}", i + 1) {
            return Err(Error::format(WHAT, "header", format!("column `{h}` should be `z{}`", i + 1)));
        }
    }
    let d = header.len() - 3;
    let domain = domain.unwrap_or(DatasetDomain::Cube(d));
    if domain.z_columns() != d {
        return Err(Error::format(WHAT, "header", format!("domain {} needs {} covariate columns", domain.tag(), domain.z_columns())));
    }
    let mut observations = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let row = row + 1;
        let rec = rec.map_err(|e| Error::format(WHAT, format!("row {row}"), e.to_string()))?;
        let bit = |col: usize| -> Result<bool> {
            match &rec[col] {
                "0" => Ok(false),
                "1" => Ok(true),
                v => Err(Error::format(WHAT, format!("{} (row {row})", header[col]), format!("expected 0 or 1, got `{v}`"))),
            }
        };
        let y1 = bit(0)?;
        let y2 = if rec[1].is_empty() { None } else { Some(bit(1)?) };
        let a = bit(2)?;
        let z = match domain {
            DatasetDomain::Atoms(j) => {
                let idx: usize = rec[3]
                    .parse()
                    .ok()
                    .filter(|i| *i < j)
                    .ok_or_else(|| Error::format(WHAT, format!("z1 (row {row})"), format!("expected an atom index below {j}")))?;
                Covariate::Atom(idx)
            }
            DatasetDomain::Cube(_) => {
                let mut p = Vec::with_capacity(d);
                for c in 0..d {
                    let v: f64 = rec[3 + c]
                        .parse()
                        .ok()
                        .filter(|v: &f64| (0.0..=1.0).contains(v))
                        .ok_or_else(|| Error::format(WHAT, format!("z{} (row {row})", c + 1), "expected a number in [0, 1]"))?;
                    p.push(v);
                }
                Covariate::Point(p)
            }
        };
        observations.push(Observation { y1, y2, a, z });
    }
    Ok(Dataset { model, domain, observations })
}

/// Checks every observation against the model layout, naming the first offending row.
pub fn check_dataset(kind: &ModelKind, data: &Dataset) -> Result<()> {
    for (i, x) in data.observations.iter().enumerate() {
        validate_layout(kind, x).map_err(|e| Error::format("dataset", format!("row {}", i + 1), e.to_string()))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedFitSpec {
    pub a_hat: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub f_hat: Option<Vec<f64>>,
    pub w_hat: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BasisSpec {
    Constant,
    Indicator,
    Blocks { k: usize },
    Rows { rows: Vec<Vec<f64>> },
}

impl BasisSpec {
    pub fn build(&self, atoms: usize) -> Result<BasisSystem> {
        let b = match self {
            BasisSpec::Constant => DiscreteBasis::constant(atoms),
            BasisSpec::Indicator => DiscreteBasis::indicator(atoms),
            BasisSpec::Blocks { k } => DiscreteBasis::blocks(atoms, *k)?,
            BasisSpec::Rows { rows } => {
                if rows.len() != atoms {
                    return Err(Error::format("oracle file", "basis.rows", format!("expected {atoms} rows")));
                }
                DiscreteBasis::from_rows(rows.clone())?
            }
        };
        Ok(BasisSystem::Discrete(b))
    }
}

/// Discrete model plus a fixed fit, and optionally a truncation basis.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleFile {
    pub model: ModelName,
    pub f: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub propensity: Option<PropensitySpec>,
    pub fit: FixedFitSpec,
    pub basis: Option<BasisSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub chi: f64,
    pub chi_plugin: f64,
    pub first_order: ExactBias,
    pub second_order: Option<(usize, ExactBias)>,
}

impl OracleReport {
    pub fn write_text(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "chi = {}", self.chi)?;
        writeln!(w, "chi_plugin = {}", self.chi_plugin)?;
        writeln!(w, "first_order_bias_enumerated = {}", self.first_order.enumerated)?;
        writeln!(w, "first_order_bias_formula = {}", self.first_order.formula)?;
        if let Some((k, b)) = &self.second_order {
            writeln!(w, "k = {k}")?;
            writeln!(w, "second_order_bias_enumerated = {}", b.enumerated)?;
            writeln!(w, "second_order_bias_formula = {}", b.formula)?;
        }
        Ok(())
    }
}

pub fn run_oracle(text: &str) -> Result<OracleReport> {
    const WHAT: &str = "oracle file";
    let file: OracleFile = parse_toml(text, WHAT)?;
    let kind = model_kind(file.model, file.propensity.as_ref(), WHAT)?;
    let model = DiscreteModel::new(kind, file.f, file.a, file.b).map_err(|e| Error::format(WHAT, "model", e.to_string()))?;
    let j = model.num_atoms();
    let check = |name: &str, v: &Vec<f64>| {
        if v.len() == j {
            Ok(())
        } else {
            Err(Error::format(WHAT, format!("fit.{name}"), format!("expected {j} values, got {}", v.len())))
        }
    };
    check("a_hat", &file.fit.a_hat)?;
    check("b_hat", &file.fit.b_hat)?;
    if let Some(v) = &file.fit.f_hat {
        check("f_hat", v)?;
    }
    if let Some(v) = &file.fit.w_hat {
        check("w_hat", v)?;
    }
    let w_hat = file.fit.w_hat.clone().unwrap_or_else(|| model.weight());
    let fit = NuisanceFit::fixed(
        Func::atoms(file.fit.a_hat.clone()),
        Func::atoms(file.fit.b_hat.clone()),
        Func::atoms(file.fit.f_hat.clone().unwrap_or_else(|| model.f().to_vec())),
        Func::atoms(w_hat.clone()),
        model.domain(),
    );
    let chi_plugin = crate::model::functional_chi(model.kind(), &fit.params(), &model.domain());
    let first_order = exact_bias_first_order(&model, &fit);
    let second_order = match &file.basis {
        Some(spec) => {
            let basis = spec.build(j)?;
            let k = basis.size();
            let pk = ProjectionKernel::new(basis, WeightMeasure::atoms(w_hat), model.domain())?;
            Some((k, exact_bias_second_order(&model, &fit, &pk)))
        }
        None => None,
    };
    Ok(OracleReport { chi: model.chi(), chi_plugin, first_order, second_order })
}
