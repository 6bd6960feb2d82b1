//! Randomized invariant suite over discrete models with exact oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::{BasisSystem, DiscreteBasis, ProjectionKernel, WeightMeasure};
use crate::estimators::{build_second_order_kernel, exact_bias_first_order, exact_bias_second_order};
use crate::model::{exact_expectation, first_order_if, DiscreteModel, Func, ModelKind, Propensity};
use crate::nuisance::NuisanceFit;
use crate::ustat::degeneracy_check;

/// Draws a valid discrete model with `2..=max_atoms` atoms, cycling the model kind by `case`.
pub fn random_model(rng: &mut impl Rng, case: usize, max_atoms: usize) -> DiscreteModel {
    let j = rng.random_range(2..=max_atoms.max(2));
    let raw: Vec<f64> = (0..j).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let f: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let (kind, a, b) = match case % 3 {
        0 => (
            ModelKind::MissingData,
            (0..j).map(|_| 1.0 / rng.random_range(0.2..0.9)).collect(),
            (0..j).map(|_| rng.random_range(0.05..0.95)).collect(),
        ),
        1 => (
            ModelKind::Covariance,
            (0..j).map(|_| rng.random_range(0.05..0.95)).collect(),
            (0..j).map(|_| rng.random_range(0.05..0.95)).collect(),
        ),
        _ => (
            ModelKind::Ate(Propensity::Atoms((0..j).map(|_| rng.random_range(0.2..0.8)).collect())),
            (0..j).map(|_| rng.random_range(-0.9..0.9)).collect(),
            (0..j).map(|_| rng.random_range(-0.9..0.9)).collect(),
        ),
    };
    DiscreteModel::new(kind, f, a, b).expect("generated parameters are valid")
}

/// Fixed fit with the given errors, the true density and the true weight.
pub fn fit_with_errors(model: &DiscreteModel, da: &[f64], db: &[f64]) -> NuisanceFit {
    let shift = |v: &[f64], d: &[f64]| v.iter().zip(d).map(|(x, e)| x + e).collect::<Vec<_>>();
    NuisanceFit::fixed(
        Func::atoms(shift(model.a(), da)),
        Func::atoms(shift(model.b(), db)),
        Func::atoms(model.f().to_vec()),
        Func::atoms(model.weight()),
        model.domain(),
    )
}

/// Random fit errors of size up to `scale`, relative to the magnitude of `a` and `b`.
pub fn random_errors(rng: &mut impl Rng, model: &DiscreteModel, scale: f64) -> (Vec<f64>, Vec<f64>) {
    let da = model.a().iter().map(|a| scale * a.abs().max(0.1) * rng.random_range(-1.0..1.0)).collect();
    let db = model.b().iter().map(|b| scale * b.abs().max(0.1) * rng.random_range(-1.0..1.0)).collect();
    (da, db)
}

/// Projection kernel in the model's true weight.
pub fn true_weight_kernel(model: &DiscreteModel, basis: DiscreteBasis) -> ProjectionKernel {
    ProjectionKernel::new(BasisSystem::Discrete(basis), WeightMeasure::atoms(model.weight()), model.domain())
        .expect("block bases have well-conditioned Gram matrices")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub cases: usize,
    /// Largest violation observed.
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

struct Tracker {
    name: &'static str,
    cases: usize,
    worst: f64,
    tolerance: f64,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Tracker { name, cases: 0, worst: 0.0, tolerance }
    }

    fn record(&mut self, violation: f64) {
        self.cases += 1;
        let v = if violation.is_nan() { f64::INFINITY } else { violation };
        self.worst = self.worst.max(v);
    }

    fn finish(self) -> CheckOutcome {
        CheckOutcome { name: self.name, cases: self.cases, worst: self.worst, tolerance: self.tolerance }
    }
}

/// Runs every invariant on `cases` random models drawn from `seed`.
pub fn run_selftest(cases: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean_zero = Tracker::new("influence function has mean zero at truth", 1e-12);
    let mut stilde_id = Tracker::new("conditional means satisfy s1 b + s2 = 0 = s1 a + s3", 1e-12);
    let mut bias_id = Tracker::new("first-order bias equals the product-of-errors integral", 1e-10);
    let mut robust = Tracker::new("first-order bias vanishes when either nuisance is exact", 1e-12);
    let mut bilinear = Tracker::new("first-order bias is bilinear in the errors", 1e-10);
    let mut second_id = Tracker::new("second-order bias equals the residual inner product", 1e-10);
    let mut full_rank = Tracker::new("second-order bias vanishes for a full-rank basis", 1e-10);
    let mut degenerate = Tracker::new("second-order kernel is degenerate at truth", 1e-10);

    for case in 0..cases {
        let model = random_model(&mut rng, case, 10);
        let j = model.num_atoms();
        let kind = model.kind().clone();
        let params = model.params();
        let chi = model.chi();
        mean_zero.record(exact_expectation(&model, |x| first_order_if(&kind, &params, chi, x).unwrap()).abs());
        for (s, (a, b)) in model.stilde_enumerated().iter().zip(model.a().iter().zip(model.b())) {
            stilde_id.record((s.s1 * b + s.s2).abs().max((s.s1 * a + s.s3).abs()));
        }

        let (da, db) = random_errors(&mut rng, &model, 0.3);
        let fit = fit_with_errors(&model, &da, &db);
        let b1 = exact_bias_first_order(&model, &fit);
        bias_id.record((b1.enumerated - b1.formula).abs());

        let zero = vec![0.0; j];
        for fit in [fit_with_errors(&model, &zero, &db), fit_with_errors(&model, &da, &zero)] {
            robust.record(exact_bias_first_order(&model, &fit).enumerated.abs());
        }

        let t = rng.random_range(-2.0..2.0);
        let scaled: Vec<f64> = da.iter().map(|e| t * e).collect();
        let bt = exact_bias_first_order(&model, &fit_with_errors(&model, &scaled, &db));
        bilinear.record((bt.enumerated - t * b1.enumerated).abs());

        let k = rng.random_range(1..=j);
        let pk = true_weight_kernel(&model, DiscreteBasis::blocks(j, k).unwrap());
        let b2 = exact_bias_second_order(&model, &fit, &pk);
        second_id.record((b2.enumerated - b2.formula).abs());

        let pk_full = true_weight_kernel(&model, DiscreteBasis::indicator(j));
        full_rank.record(exact_bias_second_order(&model, &fit, &pk_full).enumerated.abs());

        let truth = fit_with_errors(&model, &zero, &zero);
        let kernel = build_second_order_kernel(&truth, &kind, pk).kernel();
        degenerate.record(degeneracy_check(&model, &kernel));
    }

    [mean_zero, stilde_id, bias_id, robust, bilinear, second_id, full_rank, degenerate]
        .into_iter()
        .map(Tracker::finish)
        .collect()
}
