//! Initial estimators of the nuisance functions: series least squares for
//! `a` and `b`, histograms for the covariate density and for the weight
//! `E(S1|Z) f`, and sample splitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basis::{BasisSystem, GramMatrix, Partition};
use crate::error::{Error, Result};
use crate::model::{indicator, Covariate, Domain, Func, ModelKind, NuisanceParams, Observation, QuadratureGrid};

/// Default clipping level for estimated propensities.
pub const DEFAULT_CLIP: f64 = 0.05;

/// Largest condition number of the least-squares design Gram matrix.
pub const DESIGN_CONDITION_LIMIT: f64 = 1e10;

/// Fitted series `z -> phi(z)' c`.
#[derive(Debug, Clone)]
pub struct SeriesFit {
    pub basis: BasisSystem,
    pub coefficients: Vec<f64>,
}

impl SeriesFit {
    pub fn eval(&self, z: &Covariate) -> f64 {
        self.basis
            .eval_sparse(z)
            .iter()
            .map(|&(i, v)| v * self.coefficients[i])
            .sum()
    }

    pub fn to_func(&self) -> Func {
        let fit = self.clone();
        Func::new(move |z| fit.eval(z))
    }
}

/// Least-squares projection of `target` onto the span of `basis`, using the
/// observations accepted by `restriction` (all when `None`).
pub fn fit_regression_series(
    data: &[Observation],
    target: impl Fn(&Observation) -> f64,
    basis: &BasisSystem,
    restriction: Option<&dyn Fn(&Observation) -> bool>,
) -> Result<SeriesFit> {
    let k = basis.size();
    let mut gram = GramMatrix::zeros(basis);
    let mut rhs = vec![0.0; k];
    let mut used = 0usize;
    for x in data {
        if let Some(keep) = restriction {
            if !keep(x) {
                continue;
            }
        }
        used += 1;
        let y = target(x);
        let phi = basis.eval_sparse(&x.z);
        for &(i, vi) in &phi {
            rhs[i] += vi * y;
        }
        gram.add_outer(&phi, 1.0);
    }
    if used == 0 {
        return Err(Error::Data("regression subsample is empty".into()));
    }
    if k == 0 {
        return Ok(SeriesFit { basis: basis.clone(), coefficients: Vec::new() });
    }
    let condition = gram.condition();
    if condition.is_nan() || condition > DESIGN_CONDITION_LIMIT {
        return Err(Error::CollinearBasis { condition, limit: DESIGN_CONDITION_LIMIT });
    }
    let coefficients = gram
        .solve(&rhs)
        .ok_or(Error::CollinearBasis { condition: f64::INFINITY, limit: DESIGN_CONDITION_LIMIT })?;
    Ok(SeriesFit { basis: basis.clone(), coefficients })
}

/// Fitted inverse propensity of the missing-data model.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub propensity: SeriesFit,
    /// `1 / clip(p_hat)`.
    pub a_hat: Func,
    /// Fitting-sample points at which `p_hat` fell outside the clip interval.
    pub clip_events: usize,
}

/// Regresses `A` on the basis, clips into `[clip, 1 - clip]` and inverts.
pub fn fit_propensity_and_a(data: &[Observation], basis: &BasisSystem, clip: f64) -> Result<PropensityFit> {
    if !(clip > 0.0 && clip < 0.5) {
        return Err(Error::Config(format!("clip level {clip} not in (0, 0.5)")));
    }
    let propensity = fit_regression_series(data, |x| indicator(x.a), basis, None)?;
    let (lo, hi) = (clip, 1.0 - clip);
    let clip_events = data
        .iter()
        .filter(|x| {
            let p = propensity.eval(&x.z);
            !(lo..=hi).contains(&p)
        })
        .count();
    let p = propensity.clone();
    let a_hat = Func::new(move |z| 1.0 / p.eval(z).clamp(lo, hi));
    Ok(PropensityFit { propensity, a_hat, clip_events })
}

/// Piecewise-constant function on a partition, stored as per-cell values.
#[derive(Debug, Clone)]
pub struct Histogram {
    pub partition: Partition,
    pub values: Vec<f64>,
}

impl Histogram {
    pub fn eval(&self, z: &Covariate) -> f64 {
        self.values[self.partition.cell_of(z)]
    }

    pub fn to_func(&self) -> Func {
        self.partition.piecewise(self.values.clone())
    }

    /// `int h dnu` over the partition.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.partition.cell_volume()
    }
}

fn cell_counts<'a>(z: impl IntoIterator<Item = &'a Covariate>, partition: Partition) -> (Vec<f64>, usize) {
    let mut counts = vec![0.0; partition.num_cells()];
    let mut n = 0;
    for zi in z {
        counts[partition.cell_of(zi)] += 1.0;
        n += 1;
    }
    (counts, n)
}

/// Histogram density: cell frequency over cell volume. Empty input gives the zero function.
pub fn fit_density_histogram<'a>(z: impl IntoIterator<Item = &'a Covariate>, partition: Partition) -> Histogram {
    let (counts, n) = cell_counts(z, partition);
    let scale = if n == 0 { 0.0 } else { 1.0 / (n as f64 * partition.cell_volume()) };
    Histogram { partition, values: counts.into_iter().map(|c| c * scale).collect() }
}

/// Estimate of the weight `E(S1|Z) f`.
///
/// Missing data: minus the histogram of covariates with `A = 1`, normalized by
/// the full sample size, which targets `-f P(A=1|Z) = -f/a`. Other models:
/// minus the density histogram, since `E(S1|Z) = -1`.
pub fn fit_weight(kind: &ModelKind, data: &[Observation], partition: Partition) -> Histogram {
    match kind {
        ModelKind::MissingData => {
            let n = data.len();
            let (counts, _) = cell_counts(data.iter().filter(|x| x.a).map(|x| &x.z), partition);
            let scale = if n == 0 { 0.0 } else { 1.0 / (n as f64 * partition.cell_volume()) };
            Histogram { partition, values: counts.into_iter().map(|c| -c * scale).collect() }
        }
        _ => {
            let mut h = fit_density_histogram(data.iter().map(|x| &x.z), partition);
            h.values.iter_mut().for_each(|v| *v = -*v);
            h
        }
    }
}

/// Partition of `0..n` into folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub folds: Vec<Vec<usize>>,
}

impl SplitPlan {
    /// Single fold holding every index (no splitting).
    pub fn whole(n: usize) -> Self {
        SplitPlan { folds: vec![(0..n).collect()] }
    }

    pub fn num_folds(&self) -> usize {
        self.folds.len()
    }

    /// Indices outside fold `f`; for a single-fold plan, the fold itself.
    pub fn training(&self, f: usize) -> Vec<usize> {
        if self.folds.len() == 1 {
            return self.folds[0].clone();
        }
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Seeded random partition into `folds` groups whose sizes differ by at most one.
pub fn sample_split(n: usize, folds: usize, seed: u64) -> Result<SplitPlan> {
    if folds < 2 {
        return Err(Error::Argument(format!("sample split needs at least 2 folds, got {folds}")));
    }
    if n < folds {
        return Err(Error::Argument(format!("cannot split {n} observations into {folds} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut plan = vec![Vec::with_capacity(n / folds + 1); folds];
    for (pos, i) in idx.into_iter().enumerate() {
        plan[pos % folds].push(i);
    }
    for f in &mut plan {
        f.sort_unstable();
    }
    Ok(SplitPlan { folds: plan })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitMeta {
    pub nuisance_k: usize,
    pub partition_cells: usize,
    pub fold: Option<usize>,
    pub clip_events: usize,
}

/// Nuisance estimates `(a_hat, b_hat, f_hat, w_hat)` with the domain on which
/// the plug-in functional is integrated.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    pub a_hat: Func,
    pub b_hat: Func,
    pub f_hat: Func,
    pub w_hat: Func,
    pub domain: Domain,
    pub meta: FitMeta,
}

impl NuisanceFit {
    /// Fit made of given functions, e.g. the truth or a deliberately perturbed version of it.
    pub fn fixed(a_hat: Func, b_hat: Func, f_hat: Func, w_hat: Func, domain: Domain) -> Self {
        NuisanceFit { a_hat, b_hat, f_hat, w_hat, domain, meta: FitMeta::default() }
    }

    pub fn params(&self) -> NuisanceParams {
        NuisanceParams::new(self.a_hat.clone(), self.b_hat.clone(), self.f_hat.clone())
    }
}

#[derive(Debug, Clone)]
pub struct NuisanceConfig {
    /// Basis for the regressions of `a` and `b`.
    pub basis: BasisSystem,
    /// Partition for the density and weight histograms.
    pub partition: Partition,
    pub clip: f64,
}

/// Domain on which piecewise-constant fits from `basis` and `partition` integrate exactly.
pub fn fit_domain(basis: &BasisSystem, partition: Partition) -> Result<Domain> {
    match (basis, partition) {
        (BasisSystem::Haar(h), Partition::Dyadic { d, level }) if h.d == d => {
            Ok(Domain::Grid(QuadratureGrid::new(d, 1usize << h.level.max(level))?))
        }
        (BasisSystem::Discrete(b), Partition::Atoms(j)) if b.atoms() == j => Ok(Domain::Atoms(j)),
        _ => Err(Error::Config(format!(
            "nuisance basis {basis:?} and histogram partition {partition:?} live on different domains"
        ))),
    }
}

/// Fits all nuisance functions of `kind` on `data`.
///
/// * missing data: `a_hat = 1/clip(p_hat)` from the regression of `A`; `b_hat`
///   regresses `Y` on the observations with `A = 1`;
/// * covariance: `a_hat`, `b_hat` regress `A` and `Y`;
/// * ATE: `a_hat`, `b_hat` regress `Yk (A - pi)/(pi(1 - pi))`, whose conditional
///   mean is the treatment effect on `Yk`.
pub fn fit_nuisances(kind: &ModelKind, data: &[Observation], config: &NuisanceConfig) -> Result<NuisanceFit> {
    let domain = fit_domain(&config.basis, config.partition)?;
    let mut meta = FitMeta {
        nuisance_k: config.basis.size(),
        partition_cells: config.partition.num_cells(),
        ..FitMeta::default()
    };
    let (a_hat, b_hat) = match kind {
        ModelKind::MissingData => {
            let prop = fit_propensity_and_a(data, &config.basis, config.clip)?;
            meta.clip_events = prop.clip_events;
            let observed = |x: &Observation| x.a;
            let b = fit_regression_series(data, |x| indicator(x.y1), &config.basis, Some(&observed))?;
            (prop.a_hat, b.to_func())
        }
        ModelKind::Covariance => {
            let a = fit_regression_series(data, |x| indicator(x.a), &config.basis, None)?;
            let b = fit_regression_series(data, |x| indicator(x.y1), &config.basis, None)?;
            (a.to_func(), b.to_func())
        }
        ModelKind::Ate(pi) => {
            let transformed = |y: bool, x: &Observation| {
                let p = pi.eval(&x.z);
                indicator(y) * (indicator(x.a) - p) / (p * (1.0 - p))
            };
            let a = fit_regression_series(data, |x| transformed(x.y1, x), &config.basis, None)?;
            let b = fit_regression_series(data, |x| transformed(x.y2.unwrap_or(false), x), &config.basis, None)?;
            (a.to_func(), b.to_func())
        }
    };
    let f_hat = fit_density_histogram(data.iter().map(|x| &x.z), config.partition).to_func();
    let w_hat = fit_weight(kind, data, config.partition).to_func();
    Ok(NuisanceFit { a_hat, b_hat, f_hat, w_hat, domain, meta })
}
