//! Plug-in, first-order and second-order estimators, and their exact-bias oracles.
//!
//! With residuals `eps_a = S1 a_hat + S3` and `eps_b = S1 b_hat + S2`, the
//! second-order kernel is
//!
//! ```text
//! K(x1, x2) = -(eps_a(x1) eps_b(x2) + eps_a(x2) eps_b(x1)) Pi(z1, z2) / 2
//! ```
//!
//! where `Pi` is the projection kernel onto the truncation basis in `L2(w_hat)`.
//! Because `E[eps_a | Z] = s1 (a_hat - a)` and `E[eps_b | Z] = s1 (b_hat - b)`
//! with `s1 = E(S1|Z)`, for `w_hat = s1 f` the kernel has mean
//! `-<Pi (a_hat - a), b_hat - b>_w`, which cancels the projected part of the
//! first-order bias `<a_hat - a, b_hat - b>_w` and leaves
//! `<(I - Pi)(a_hat - a), (I - Pi)(b_hat - b)>_w`.

use serde::Serialize;

use crate::basis::{project_function, BasisSystem, ProjectionKernel, WeightMeasure};
use crate::error::{Error, Result};
use crate::model::{
    exact_expectation, exact_expectation2, first_order_if, functional_chi, statistic_s, statistic_s_unchecked,
    Covariate, DiscreteModel, Domain, Func, ModelKind, Observation, QuadratureGrid,
};
use crate::nuisance::{fit_nuisances, sample_split, NuisanceConfig, NuisanceFit, SplitPlan};
use crate::ustat::{compensated_sum, symmetrize, ustat_order1, ustat_order2, ustat_row_sums, Kernel2};

/// Residual functions of the fitted nuisances.
#[derive(Debug, Clone)]
pub struct ResidualFns {
    kind: ModelKind,
    a_hat: Func,
    b_hat: Func,
}

impl ResidualFns {
    pub fn new(kind: ModelKind, a_hat: Func, b_hat: Func) -> Self {
        ResidualFns { kind, a_hat, b_hat }
    }

    pub fn from_fit(kind: &ModelKind, fit: &NuisanceFit) -> Self {
        Self::new(kind.clone(), fit.a_hat.clone(), fit.b_hat.clone())
    }

    /// `S1(x) a_hat(z) + S3(x)`.
    pub fn eps_a(&self, x: &Observation) -> f64 {
        let s = statistic_s_unchecked(&self.kind, x);
        s.s1 * self.a_hat.eval(&x.z) + s.s3
    }

    /// `S1(x) b_hat(z) + S2(x)`.
    pub fn eps_b(&self, x: &Observation) -> f64 {
        let s = statistic_s_unchecked(&self.kind, x);
        s.s1 * self.b_hat.eval(&x.z) + s.s2
    }

    fn both(&self, x: &Observation) -> (f64, f64) {
        let s = statistic_s_unchecked(&self.kind, x);
        (s.s1 * self.a_hat.eval(&x.z) + s.s3, s.s1 * self.b_hat.eval(&x.z) + s.s2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FirstOrderEstimate {
    pub chi_plugin: f64,
    pub chi_first: f64,
    /// Sample variance of the estimated influence function over the fold, divided by the fold size.
    pub var_first: f64,
}

/// Plug-in `chi(eta_hat)` and the one-step correction `chi(eta_hat) + P_n IF_eta_hat`.
pub fn estimate_first_order(data: &[Observation], fit: &NuisanceFit, kind: &ModelKind) -> Result<FirstOrderEstimate> {
    let params = fit.params();
    let chi_plugin = functional_chi(kind, &params, &fit.domain);
    let values = data
        .iter()
        .map(|x| first_order_if(kind, &params, chi_plugin, x))
        .collect::<Result<Vec<f64>>>()?;
    let mean = ustat_order1(&values, |v| *v)?;
    let n = values.len() as f64;
    let ss = compensated_sum(values.iter().map(|v| (v - mean).powi(2)));
    let var_first = if values.len() > 1 { ss / (n - 1.0) / n } else { 0.0 };
    Ok(FirstOrderEstimate { chi_plugin, chi_first: chi_plugin + mean, var_first })
}

/// A bias computed two independent ways.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExactBias {
    /// From exact enumeration of the estimator's expectation.
    pub enumerated: f64,
    /// From the closed-form inner-product expression.
    pub formula: f64,
}

/// Exact first-order bias `chi(eta_hat) - chi(eta) + E IF_eta_hat` of a fixed fit,
/// against `int (a_hat - a)(b_hat - b) s1 f`.
pub fn exact_bias_first_order(model: &DiscreteModel, fit: &NuisanceFit) -> ExactBias {
    let kind = model.kind();
    let params = fit.params();
    let domain = model.domain();
    let chi_hat = functional_chi(kind, &params, &domain);
    let mean_if = exact_expectation(model, |x| {
        first_order_if(kind, &params, chi_hat, x).expect("enumerated atoms match the model layout")
    });
    let enumerated = chi_hat - model.chi() + mean_if;
    let formula = (0..model.num_atoms())
        .map(|j| {
            let z = Covariate::Atom(j);
            let da = fit.a_hat.eval(&z) - model.a()[j];
            let db = fit.b_hat.eval(&z) - model.b()[j];
            da * db * model.weight()[j]
        })
        .sum();
    ExactBias { enumerated, formula }
}

/// Per-observation quantities of the second-order kernel.
#[derive(Debug, Clone)]
pub struct KernelPoint {
    eps_a: f64,
    eps_b: f64,
    phi: Vec<(usize, f64)>,
    dual: Vec<f64>,
}

/// Second-order influence-function kernel truncated by a projection kernel.
#[derive(Debug, Clone)]
pub struct SecondOrderKernel {
    residuals: ResidualFns,
    pk: ProjectionKernel,
}

impl SecondOrderKernel {
    pub fn projection(&self) -> &ProjectionKernel {
        &self.pk
    }

    pub fn residuals(&self) -> &ResidualFns {
        &self.residuals
    }

    pub fn eval(&self, x1: &Observation, x2: &Observation) -> f64 {
        let (a1, b1) = self.residuals.both(x1);
        let (a2, b2) = self.residuals.both(x2);
        -0.5 * self.pk.eval(&x1.z, &x2.z) * (a1 * b2 + a2 * b1)
    }

    /// The kernel as a [`Kernel2`], symmetrized from `-eps_a(x1) Pi(z1, z2) eps_b(x2)`.
    pub fn kernel(&self) -> Kernel2<Observation> {
        let res = self.residuals.clone();
        let pk = self.pk.clone();
        symmetrize(move |x1: &Observation, x2: &Observation| -res.eps_a(x1) * pk.eval(&x1.z, &x2.z) * res.eps_b(x2))
            .claim_degenerate(true)
    }

    pub fn prepare(&self, x: &Observation) -> KernelPoint {
        let (eps_a, eps_b) = self.residuals.both(x);
        KernelPoint {
            eps_a,
            eps_b,
            phi: self.pk.basis().eval_sparse(&x.z),
            dual: self.pk.dual(&x.z),
        }
    }

    #[inline]
    pub fn eval_points(p1: &KernelPoint, p2: &KernelPoint) -> f64 {
        let pi: f64 = p2.phi.iter().map(|&(q, v)| v * p1.dual[q]).sum();
        -0.5 * pi * (p1.eps_a * p2.eps_b + p2.eps_a * p1.eps_b)
    }
}

/// Builds the second-order kernel of `fit`. The projection kernel should be
/// built in `L2(fit.w_hat)` (see [`kernel_for_fit`]).
pub fn build_second_order_kernel(fit: &NuisanceFit, kind: &ModelKind, pk: ProjectionKernel) -> SecondOrderKernel {
    SecondOrderKernel { residuals: ResidualFns::from_fit(kind, fit), pk }
}

/// Measure in which the truncating projection is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum KernelWeight {
    /// `L2(w_hat)`, the weight of the bias inner product.
    #[default]
    WHat,
    /// `L2(-f_hat)`; coincides with `w_hat` when `E(S1|Z) = -1`.
    NegFHat,
}

fn common_domain(a: &Domain, b: &Domain) -> Result<Domain> {
    match (a, b) {
        (Domain::Atoms(i), Domain::Atoms(j)) if i == j => Ok(Domain::Atoms(*i)),
        (Domain::Grid(g), Domain::Grid(h)) if g.d == h.d => {
            let m = g.m.max(h.m);
            if m % g.m != 0 || m % h.m != 0 {
                return Err(Error::Config(format!("grids with {} and {} nodes per axis are not nested", g.m, h.m)));
            }
            Ok(Domain::Grid(QuadratureGrid::new(g.d, m)?))
        }
        _ => Err(Error::Config(format!("domains {a:?} and {b:?} are incompatible"))),
    }
}

/// Projection kernel onto `basis` in the weight selected by `weight`,
/// integrated on a domain exact for both the basis and the fitted weight.
pub fn kernel_for_fit(fit: &NuisanceFit, basis: BasisSystem, weight: KernelWeight) -> Result<ProjectionKernel> {
    let domain = common_domain(&fit.domain, &basis.natural_domain())?;
    let w = match weight {
        KernelWeight::WHat => fit.w_hat.clone(),
        KernelWeight::NegFHat => fit.f_hat.scaled(-1.0),
    };
    ProjectionKernel::new(basis, WeightMeasure::new(w), domain)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SecondOrderEstimate {
    pub chi_first: f64,
    /// `U_n` of the second-order kernel.
    pub correction: f64,
    pub chi_second: f64,
    /// Largest `|mean_j K(X_i, X_j)|` over the sample, an empirical degeneracy diagnostic.
    pub empirical_degeneracy: f64,
}

/// `chi_first + U_n K` with `K` the second-order kernel.
pub fn estimate_second_order(
    data: &[Observation],
    fit: &NuisanceFit,
    kind: &ModelKind,
    pk: &ProjectionKernel,
) -> Result<SecondOrderEstimate> {
    if data.len() < 2 {
        return Err(Error::Argument(format!("second-order estimator needs n >= 2, got {}", data.len())));
    }
    for x in data {
        statistic_s(kind, x)?;
    }
    let first = estimate_first_order(data, fit, kind)?;
    let kernel = build_second_order_kernel(fit, kind, pk.clone());
    let points: Vec<KernelPoint> = data.iter().map(|x| kernel.prepare(x)).collect();
    let rows = ustat_row_sums(&points, SecondOrderKernel::eval_points);
    let n = points.len() as f64;
    let correction = compensated_sum(rows.iter().copied()) / (n * (n - 1.0));
    let empirical_degeneracy = rows.iter().map(|r| (r / (n - 1.0)).abs()).fold(0.0, f64::max);
    Ok(SecondOrderEstimate {
        chi_first: first.chi_first,
        correction,
        chi_second: first.chi_first + correction,
        empirical_degeneracy,
    })
}

/// Same as [`estimate_second_order`] but evaluating the kernel through the generic
/// [`ustat_order2`] on raw observations. Slower; used to cross-check the fast path.
pub fn estimate_second_order_direct(
    data: &[Observation],
    fit: &NuisanceFit,
    kind: &ModelKind,
    pk: &ProjectionKernel,
) -> Result<f64> {
    let first = estimate_first_order(data, fit, kind)?;
    let kernel = build_second_order_kernel(fit, kind, pk.clone()).kernel();
    Ok(first.chi_first + ustat_order2(data, |x, y| kernel.eval(x, y))?)
}

/// Exact bias of the second-order estimator for a fixed fit, by enumeration
/// and by the representation-bias formula `<(I - Pi) da, (I - Pi) db>_w`.
///
/// The formula uses the model's true weight; it equals the enumerated bias
/// when `pk` is built in that weight on the model's support.
pub fn exact_bias_second_order(model: &DiscreteModel, fit: &NuisanceFit, pk: &ProjectionKernel) -> ExactBias {
    let first = exact_bias_first_order(model, fit);
    let kernel = build_second_order_kernel(fit, model.kind(), pk.clone());
    let correction = exact_expectation2(model, |x1, x2| kernel.eval(x1, x2));
    let da = fit.a_hat.minus(&Func::atoms(model.a().to_vec()));
    let db = fit.b_hat.minus(&Func::atoms(model.b().to_vec()));
    let ra = da.minus(&project_function(pk, &da).projected);
    let rb = db.minus(&project_function(pk, &db).projected);
    let w = model.weight();
    let formula = (0..model.num_atoms())
        .map(|j| {
            let z = Covariate::Atom(j);
            ra.eval(&z) * rb.eval(&z) * w[j]
        })
        .sum();
    ExactBias { enumerated: first.enumerated + correction, formula }
}

/// Settings for the cross-fitted estimation pipeline.
#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub nuisance: NuisanceConfig,
    /// Truncation basis of the second-order kernel; `None` skips the second-order estimator.
    pub kernel_basis: Option<BasisSystem>,
    pub kernel_weight: KernelWeight,
    /// Number of folds; `1` fits and evaluates on the whole sample.
    pub folds: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub chi_plugin: f64,
    pub chi_first: f64,
    pub chi_second: Option<f64>,
    pub var_first: f64,
    /// Size of the truncation basis (0 when no second-order estimate was made).
    pub k_used: usize,
    pub degeneracy: Option<f64>,
    pub gram_condition: Option<f64>,
    pub folds: usize,
    pub clip_events: usize,
}

impl EstimateReport {
    /// Normal-approximation half-width of a two-sided interval for the first-order estimate.
    pub fn first_order_half_width(&self, z: f64) -> f64 {
        z * self.var_first.sqrt()
    }
}

/// All estimators on one evaluation sample with a given fit.
pub fn estimate_with_fit(
    data: &[Observation],
    fit: &NuisanceFit,
    kind: &ModelKind,
    pk: Option<&ProjectionKernel>,
) -> Result<EstimateReport> {
    let first = estimate_first_order(data, fit, kind)?;
    let (chi_second, degeneracy, gram_condition, k_used) = match pk {
        Some(pk) => {
            let s = estimate_second_order(data, fit, kind, pk)?;
            (Some(s.chi_second), Some(s.empirical_degeneracy), Some(pk.condition()), pk.size())
        }
        None => (None, None, None, 0),
    };
    Ok(EstimateReport {
        chi_plugin: first.chi_plugin,
        chi_first: first.chi_first,
        chi_second,
        var_first: first.var_first,
        k_used,
        degeneracy,
        gram_condition,
        folds: 1,
        clip_events: fit.meta.clip_events,
    })
}

/// Cross-fitted estimation: for each fold, nuisances are fitted on the other
/// folds and the estimators evaluated on the fold; fold results are averaged.
pub fn estimate(kind: &ModelKind, data: &[Observation], config: &EstimatorConfig) -> Result<EstimateReport> {
    let plan = if config.folds <= 1 {
        SplitPlan::whole(data.len())
    } else {
        sample_split(data.len(), config.folds, config.seed)?
    };
    let folds = plan.num_folds();
    let mut reports = Vec::with_capacity(folds);
    for f in 0..folds {
        let train: Vec<Observation> = plan.training(f).into_iter().map(|i| data[i].clone()).collect();
        let eval: Vec<Observation> = plan.folds[f].iter().map(|&i| data[i].clone()).collect();
        let mut fit = fit_nuisances(kind, &train, &config.nuisance)?;
        fit.meta.fold = Some(f);
        let pk = match &config.kernel_basis {
            Some(b) => Some(kernel_for_fit(&fit, b.clone(), config.kernel_weight)?),
            None => None,
        };
        reports.push(estimate_with_fit(&eval, &fit, kind, pk.as_ref())?);
    }
    let ff = folds as f64;
    let mean = |g: &dyn Fn(&EstimateReport) -> f64| reports.iter().map(g).sum::<f64>() / ff;
    let chi_second = if config.kernel_basis.is_some() {
        Some(mean(&|r| r.chi_second.unwrap_or(f64::NAN)))
    } else {
        None
    };
    let max_opt = |g: &dyn Fn(&EstimateReport) -> Option<f64>| {
        reports.iter().filter_map(g).fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
    };
    Ok(EstimateReport {
        chi_plugin: mean(&|r| r.chi_plugin),
        chi_first: mean(&|r| r.chi_first),
        chi_second,
        var_first: reports.iter().map(|r| r.var_first).sum::<f64>() / (ff * ff),
        k_used: reports.iter().map(|r| r.k_used).max().unwrap_or(0),
        degeneracy: max_opt(&|r| r.degeneracy),
        gram_condition: max_opt(&|r| r.gram_condition),
        folds,
        clip_events: reports.iter().map(|r| r.clip_events).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::DiscreteBasis;

    /// J = 2, f = (.5, .5), a = (2, 4), b = (.3, .7); a_hat - a = (.5, -.5), b_hat - b = (.1, -.1).
    fn fixture() -> (DiscreteModel, NuisanceFit) {
        let model = DiscreteModel::new(ModelKind::MissingData, vec![0.5, 0.5], vec![2.0, 4.0], vec![0.3, 0.7]).unwrap();
        let fit = NuisanceFit::fixed(
            Func::atoms(vec![2.5, 3.5]),
            Func::atoms(vec![0.4, 0.6]),
            Func::atoms(vec![0.5, 0.5]),
            Func::atoms(model.weight()),
            model.domain(),
        );
        (model, fit)
    }

    #[test]
    fn fixture_first_order_bias() {
        let (model, fit) = fixture();
        let b = exact_bias_first_order(&model, &fit);
        assert!((b.formula + 0.01875).abs() < 1e-12, "{b:?}");
        assert!((b.enumerated + 0.01875).abs() < 1e-12, "{b:?}");
    }

    #[test]
    fn fixture_second_order_constant_basis() {
        // hand computation: residuals (1/3, -2/3) and (1/15, -2/15), w = (-1/4, -1/8)
        let (model, fit) = fixture();
        let pk = ProjectionKernel::new(
            BasisSystem::Discrete(DiscreteBasis::constant(2)),
            WeightMeasure::atoms(model.weight()),
            model.domain(),
        )
        .unwrap();
        let b = exact_bias_second_order(&model, &fit, &pk);
        assert!((b.formula + 1.0 / 60.0).abs() < 1e-12, "{b:?}");
        assert!((b.enumerated + 1.0 / 60.0).abs() < 1e-12, "{b:?}");
    }

    #[test]
    fn truth_fit_is_unbiased() {
        let (model, _) = fixture();
        let p = model.params();
        let fit = NuisanceFit::fixed(p.a, p.b, p.f, Func::atoms(model.weight()), model.domain());
        let b = exact_bias_first_order(&model, &fit);
        assert!(b.enumerated.abs() < 1e-12 && b.formula.abs() < 1e-12);
    }

    #[test]
    fn empty_truncation_leaves_first_order() {
        let (model, fit) = fixture();
        let pk = ProjectionKernel::new(
            BasisSystem::Discrete(DiscreteBasis::empty(2)),
            WeightMeasure::atoms(model.weight()),
            model.domain(),
        )
        .unwrap();
        let data: Vec<_> = model.atoms().into_iter().map(|(x, _)| x).collect();
        let s = estimate_second_order(&data, &fit, model.kind(), &pk).unwrap();
        assert_eq!(s.chi_second, s.chi_first);
        let b = exact_bias_second_order(&model, &fit, &pk);
        assert!((b.enumerated + 0.01875).abs() < 1e-12 && (b.formula + 0.01875).abs() < 1e-12);
    }

    #[test]
    fn fast_and_direct_second_order_agree() {
        let (model, fit) = fixture();
        let pk = ProjectionKernel::new(
            BasisSystem::Discrete(DiscreteBasis::from_rows(vec![vec![1.0], vec![0.3]]).unwrap()),
            WeightMeasure::atoms(model.weight()),
            model.domain(),
        )
        .unwrap();
        let data: Vec<_> = model.atoms().into_iter().map(|(x, _)| x).cycle().take(17).collect();
        let fast = estimate_second_order(&data, &fit, model.kind(), &pk).unwrap().chi_second;
        let direct = estimate_second_order_direct(&data, &fit, model.kind(), &pk).unwrap();
        assert!((fast - direct).abs() < 1e-12);
    }

    #[test]
    fn first_order_rejects_bad_layout() {
        let (model, fit) = fixture();
        let data = vec![Observation::covariance(true, false, Covariate::Atom(0))];
        assert!(matches!(estimate_first_order(&data, &fit, model.kind()), Err(Error::Layout(_))));
    }
}
