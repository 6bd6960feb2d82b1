//! Model class with first-order influence function
//! `a(z)b(z)S1(x) + a(z)S2(x) + b(z)S3(x) + S4(x) - chi`.
//!
//! Three concrete models are supported: missing data (mean response), the
//! covariance model (expected conditional product moment) and the average
//! treatment effect with a known propensity. [`DiscreteModel`] enumerates the
//! full observation law of a model on a finite covariate support and is the
//! exact oracle used throughout the test suites.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Tolerance for `sum f = 1` on discrete supports.
pub const DENSITY_SUM_TOL: f64 = 1e-10;

/// A covariate value: an atom of a finite support or a point of `[0,1]^d`.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariate {
    Atom(usize),
    Point(Vec<f64>),
}

impl Covariate {
    pub fn atom(&self) -> Option<usize> {
        match self {
            Covariate::Atom(j) => Some(*j),
            Covariate::Point(_) => None,
        }
    }

    pub fn point(&self) -> Option<&[f64]> {
        match self {
            Covariate::Point(p) => Some(p),
            Covariate::Atom(_) => None,
        }
    }
}

/// One sampled record.
///
/// In the missing-data model `y1` holds the product `Y*A`, so it is `false`
/// whenever `a` is `false`. `y2` is present only for the treatment-effect model.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y1: bool,
    pub y2: Option<bool>,
    pub a: bool,
    pub z: Covariate,
}

impl Observation {
    /// Missing-data record; the response is masked when `a` is false.
    pub fn missing_data(y: bool, a: bool, z: Covariate) -> Self {
        Observation { y1: y && a, y2: None, a, z }
    }

    pub fn covariance(y: bool, a: bool, z: Covariate) -> Self {
        Observation { y1: y, y2: None, a, z }
    }

    pub fn ate(y1: bool, y2: bool, a: bool, z: Covariate) -> Self {
        Observation { y1, y2: Some(y2), a, z }
    }
}

#[inline]
pub(crate) fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// A real function of the covariate, cheap to clone and shareable across threads.
#[derive(Clone)]
pub struct Func(Arc<dyn Fn(&Covariate) -> f64 + Send + Sync>);

impl Func {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&Covariate) -> f64 + Send + Sync + 'static,
    {
        Func(Arc::new(f))
    }

    pub fn constant(c: f64) -> Self {
        Func::new(move |_| c)
    }

    /// Function on a finite support given by its value at each atom.
    ///
    /// Panics when evaluated at a point covariate or an out-of-range atom.
    pub fn atoms(values: Vec<f64>) -> Self {
        Func::new(move |z| match z {
            Covariate::Atom(j) => values[*j],
            Covariate::Point(_) => panic!("atom-valued function evaluated at a point covariate"),
        })
    }

    #[inline]
    pub fn eval(&self, z: &Covariate) -> f64 {
        (self.0)(z)
    }

    /// Pointwise `self - other`.
    pub fn minus(&self, other: &Func) -> Func {
        let (f, g) = (self.clone(), other.clone());
        Func::new(move |z| f.eval(z) - g.eval(z))
    }

    /// Pointwise `self + t * other`.
    pub fn plus_scaled(&self, t: f64, other: &Func) -> Func {
        let (f, g) = (self.clone(), other.clone());
        Func::new(move |z| f.eval(z) + t * g.eval(z))
    }

    pub fn times(&self, other: &Func) -> Func {
        let (f, g) = (self.clone(), other.clone());
        Func::new(move |z| f.eval(z) * g.eval(z))
    }

    pub fn scaled(&self, t: f64) -> Func {
        let f = self.clone();
        Func::new(move |z| t * f.eval(z))
    }

    /// Values at atoms `0..j`.
    pub fn on_atoms(&self, j: usize) -> Vec<f64> {
        (0..j).map(|i| self.eval(&Covariate::Atom(i))).collect()
    }
}

impl fmt::Debug for Func {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Func(..)")
    }
}

/// Known treatment probability `pi(z) = P(A = 1 | Z = z)` of the treatment-effect model.
#[derive(Debug, Clone)]
pub enum Propensity {
    Constant(f64),
    Atoms(Vec<f64>),
    Function(Func),
}

impl Propensity {
    #[inline]
    pub fn eval(&self, z: &Covariate) -> f64 {
        match self {
            Propensity::Constant(p) => *p,
            Propensity::Atoms(v) => match z {
                Covariate::Atom(j) => v[*j],
                Covariate::Point(_) => panic!("atom propensity evaluated at a point covariate"),
            },
            Propensity::Function(f) => f.eval(z),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ModelKind {
    /// Observe `(YA, A, Z)`; `a = 1 / P(A=1|Z)`, `b = P(Y=1|Z)`, target `E Y`.
    MissingData,
    /// Observe `(Y, A, Z)`; `a = E(A|Z)`, `b = E(Y|Z)`, target `E[E(Y|Z)E(A|Z)]`.
    Covariance,
    /// Observe `(Y1, Y2, A, Z)`; `a`, `b` are the treatment effects on `Y1`, `Y2`.
    Ate(Propensity),
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::MissingData => "missing-data",
            ModelKind::Covariance => "covariance",
            ModelKind::Ate(_) => "ate",
        }
    }

    pub fn is_ate(&self) -> bool {
        matches!(self, ModelKind::Ate(_))
    }

    /// Integrand of the target functional: `b` for missing data, `a*b` otherwise.
    #[inline]
    pub fn chi_integrand(&self, a: f64, b: f64) -> f64 {
        match self {
            ModelKind::MissingData => b,
            _ => a * b,
        }
    }

    /// Closed-form `E(S1 | Z = z)` given the value of `a` at `z`.
    #[inline]
    pub fn stilde1(&self, a: f64) -> f64 {
        match self {
            ModelKind::MissingData => -1.0 / a,
            _ => -1.0,
        }
    }
}

/// Statistic `S = (S1, S2, S3, S4)` at one observation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SVector {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub s4: f64,
}

pub fn validate_layout(kind: &ModelKind, obs: &Observation) -> Result<()> {
    match kind {
        ModelKind::Ate(_) => {
            if obs.y2.is_none() {
                return Err(Error::Layout("treatment-effect observation requires y2".into()));
            }
        }
        _ => {
            if obs.y2.is_some() {
                return Err(Error::Layout(format!(
                    "y2 is only present in treatment-effect observations, got it for {}",
                    kind.name()
                )));
            }
        }
    }
    if matches!(kind, ModelKind::MissingData) && obs.y1 && !obs.a {
        return Err(Error::Layout("missing-data observation has y1 = 1 while a = 0".into()));
    }
    Ok(())
}

/// Evaluates the statistic `S` at `obs`.
///
/// The covariance model uses `S2 = Y`, `S3 = A`: with `a = E(A|Z)` and
/// `b = E(Y|Z)` this is the assignment for which the influence function has
/// mean zero and `E(S1|Z) b + E(S2|Z) = 0 = E(S1|Z) a + E(S3|Z)`.
/// The treatment-effect model fixes the free function `C` of `S4` to zero.
pub fn statistic_s(kind: &ModelKind, obs: &Observation) -> Result<SVector> {
    validate_layout(kind, obs)?;
    Ok(statistic_s_unchecked(kind, obs))
}

#[inline]
pub(crate) fn statistic_s_unchecked(kind: &ModelKind, obs: &Observation) -> SVector {
    let a = indicator(obs.a);
    let y1 = indicator(obs.y1);
    match kind {
        ModelKind::MissingData => SVector {
            s1: -a,
            s2: y1,
            s3: 1.0,
            s4: 0.0,
        },
        ModelKind::Covariance => SVector {
            s1: -1.0,
            s2: y1,
            s3: a,
            s4: 0.0,
        },
        ModelKind::Ate(pi) => {
            let p = pi.eval(&obs.z);
            let var = p * (1.0 - p);
            let r = (a - p) / var;
            let y2 = indicator(obs.y2.unwrap_or(false));
            SVector {
                s1: 1.0 - 2.0 * a * (a - p) / var,
                s2: y2 * r,
                s3: y1 * r,
                s4: 0.0,
            }
        }
    }
}

/// Nuisance functions `(a, b, f)`; `f` is a density w.r.t. the domain's measure.
#[derive(Debug, Clone)]
pub struct NuisanceParams {
    pub a: Func,
    pub b: Func,
    pub f: Func,
}

impl NuisanceParams {
    pub fn new(a: Func, b: Func, f: Func) -> Self {
        NuisanceParams { a, b, f }
    }

    /// Checks range constraints on every node of `domain` and that `f` integrates to one.
    pub fn validate(&self, kind: &ModelKind, domain: &Domain) -> Result<()> {
        let mut mass = 0.0;
        for (z, w) in domain.nodes() {
            let (a, b, f) = (self.a.eval(&z), self.b.eval(&z), self.f.eval(&z));
            if !(f >= 0.0 && f.is_finite()) {
                return Err(Error::Parameter(format!("density f = {f} at {z:?}")));
            }
            mass += f * w;
            check_ranges(kind, a, b, &z)?;
        }
        let tol = match domain {
            Domain::Atoms(_) => DENSITY_SUM_TOL,
            Domain::Grid(_) => 1e-6,
        };
        if (mass - 1.0).abs() > tol {
            return Err(Error::Parameter(format!("density integrates to {mass}, expected 1")));
        }
        Ok(())
    }
}

fn check_ranges(kind: &ModelKind, a: f64, b: f64, z: &Covariate) -> Result<()> {
    let ok = match kind {
        ModelKind::MissingData => a >= 1.0 && (0.0..=1.0).contains(&b),
        ModelKind::Covariance => (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b),
        ModelKind::Ate(_) => (-1.0..=1.0).contains(&a) && (-1.0..=1.0).contains(&b),
    };
    if !ok {
        return Err(Error::Parameter(format!(
            "{} model: (a, b) = ({a}, {b}) out of range at {z:?}",
            kind.name()
        )));
    }
    if let ModelKind::Ate(pi) = kind {
        let p = pi.eval(z);
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Parameter(format!("propensity {p} at {z:?} not in (0, 1)")));
        }
    }
    Ok(())
}

/// Conditional means `E(S_i | Z = z)`, `i = 1, 2, 3`.
#[derive(Debug, Clone)]
pub struct Stilde {
    pub s1: Func,
    pub s2: Func,
    pub s3: Func,
}

pub fn stilde(kind: &ModelKind, params: &NuisanceParams) -> Stilde {
    match kind {
        ModelKind::MissingData => {
            let a = params.a.clone();
            let a2 = params.a.clone();
            let b = params.b.clone();
            Stilde {
                s1: Func::new(move |z| -1.0 / a.eval(z)),
                s2: Func::new(move |z| b.eval(z) / a2.eval(z)),
                s3: Func::constant(1.0),
            }
        }
        ModelKind::Covariance | ModelKind::Ate(_) => Stilde {
            s1: Func::constant(-1.0),
            s2: params.b.clone(),
            s3: params.a.clone(),
        },
    }
}

/// Tensor midpoint rule with `m` nodes per axis on `[0,1]^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadratureGrid {
    pub d: usize,
    pub m: usize,
}

impl QuadratureGrid {
    pub fn new(d: usize, m: usize) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(Error::Argument("quadrature grid needs d >= 1 and m >= 1".into()));
        }
        let total = (m as f64).powi(d as i32);
        if total > 1e8 {
            return Err(Error::Config(format!("quadrature grid with {total} nodes is too large")));
        }
        Ok(QuadratureGrid { d, m })
    }

    pub fn len(&self) -> usize {
        self.m.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node_weight(&self) -> f64 {
        1.0 / self.len() as f64
    }

    pub fn node(&self, mut index: usize) -> Vec<f64> {
        let h = 1.0 / self.m as f64;
        let mut p = vec![0.0; self.d];
        for c in p.iter_mut() {
            *c = ((index % self.m) as f64 + 0.5) * h;
            index /= self.m;
        }
        p
    }
}

/// Covariate domain with its dominating measure: counting measure on a finite
/// support, or Lebesgue measure on `[0,1]^d` discretized by a midpoint grid.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Atoms(usize),
    Grid(QuadratureGrid),
}

impl Domain {
    /// Quadrature nodes with their measure weights.
    pub fn nodes(&self) -> Vec<(Covariate, f64)> {
        match self {
            Domain::Atoms(j) => (0..*j).map(|i| (Covariate::Atom(i), 1.0)).collect(),
            Domain::Grid(g) => {
                let w = g.node_weight();
                (0..g.len()).map(|i| (Covariate::Point(g.node(i)), w)).collect()
            }
        }
    }

    pub fn integrate(&self, g: impl Fn(&Covariate) -> f64) -> f64 {
        self.nodes().iter().map(|(z, w)| g(z) * w).sum()
    }
}

/// Target functional: `int b f` (missing data) or `int a b f` (covariance, ATE).
pub fn functional_chi(kind: &ModelKind, params: &NuisanceParams, domain: &Domain) -> f64 {
    domain.integrate(|z| kind.chi_integrand(params.a.eval(z), params.b.eval(z)) * params.f.eval(z))
}

/// First-order influence function at `obs`, centred by the supplied `chi`.
pub fn first_order_if(kind: &ModelKind, params: &NuisanceParams, chi: f64, obs: &Observation) -> Result<f64> {
    let s = statistic_s(kind, obs)?;
    let a = params.a.eval(&obs.z);
    let b = params.b.eval(&obs.z);
    Ok(a * b * s.s1 + a * s.s2 + b * s.s3 + s.s4 - chi)
}

/// Model on the finite covariate support `{0, .., J-1}`.
///
/// The conditional law of the remaining variables given `Z = j` is fixed per model:
///
/// * missing data: `A ~ Bernoulli(1/a_j)` and `Y ~ Bernoulli(b_j)` independent;
/// * covariance: `A ~ Bernoulli(a_j)` and `Y ~ Bernoulli(b_j)` independent;
/// * ATE: `A ~ Bernoulli(pi_j)`; given `A`, `Y1` and `Y2` are independent with
///   `P(Yk = 1 | A) = (1 + e_k)/2` if `A = 1` and `(1 - e_k)/2` if `A = 0`,
///   where `e_1 = a_j`, `e_2 = b_j` are the treatment effects.
#[derive(Debug, Clone)]
pub struct DiscreteModel {
    kind: ModelKind,
    f: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl DiscreteModel {
    pub fn new(kind: ModelKind, f: Vec<f64>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let j = f.len();
        if j == 0 {
            return Err(Error::Parameter("discrete model needs at least one atom".into()));
        }
        if a.len() != j || b.len() != j {
            return Err(Error::Parameter(format!(
                "length mismatch: f has {j} atoms, a has {}, b has {}",
                a.len(),
                b.len()
            )));
        }
        if let ModelKind::Ate(Propensity::Atoms(p)) = &kind {
            if p.len() != j {
                return Err(Error::Parameter(format!("propensity has {} atoms, expected {j}", p.len())));
            }
        }
        let params = NuisanceParams::new(Func::atoms(a.clone()), Func::atoms(b.clone()), Func::atoms(f.clone()));
        params.validate(&kind, &Domain::Atoms(j))?;
        Ok(DiscreteModel { kind, f, a, b })
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn num_atoms(&self) -> usize {
        self.f.len()
    }

    pub fn f(&self) -> &[f64] {
        &self.f
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn domain(&self) -> Domain {
        Domain::Atoms(self.num_atoms())
    }

    pub fn params(&self) -> NuisanceParams {
        NuisanceParams::new(
            Func::atoms(self.a.clone()),
            Func::atoms(self.b.clone()),
            Func::atoms(self.f.clone()),
        )
    }

    /// Exact value of the target functional.
    pub fn chi(&self) -> f64 {
        functional_chi(&self.kind, &self.params(), &self.domain())
    }

    /// Atom weights of the measure `E(S1|Z) f`.
    pub fn weight(&self) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.f)
            .map(|(&a, &f)| self.kind.stilde1(a) * f)
            .collect()
    }

    /// Observation atoms with `Z = j` and their conditional probabilities.
    pub fn conditional_atoms(&self, j: usize) -> Vec<(Observation, f64)> {
        let z = || Covariate::Atom(j);
        let (a, b) = (self.a[j], self.b[j]);
        match &self.kind {
            ModelKind::MissingData => {
                let p = 1.0 / a;
                vec![
                    (Observation::missing_data(false, false, z()), 1.0 - p),
                    (Observation::missing_data(false, true, z()), p * (1.0 - b)),
                    (Observation::missing_data(true, true, z()), p * b),
                ]
            }
            ModelKind::Covariance => {
                let mut out = Vec::with_capacity(4);
                for av in [false, true] {
                    for yv in [false, true] {
                        let pa = if av { a } else { 1.0 - a };
                        let py = if yv { b } else { 1.0 - b };
                        out.push((Observation::covariance(yv, av, z()), pa * py));
                    }
                }
                out
            }
            ModelKind::Ate(pi) => {
                let p = pi.eval(&z());
                let mut out = Vec::with_capacity(8);
                for av in [false, true] {
                    let pa = if av { p } else { 1.0 - p };
                    let q1 = ate_outcome_prob(a, av);
                    let q2 = ate_outcome_prob(b, av);
                    for y1 in [false, true] {
                        for y2 in [false, true] {
                            let p1 = if y1 { q1 } else { 1.0 - q1 };
                            let p2 = if y2 { q2 } else { 1.0 - q2 };
                            out.push((Observation::ate(y1, y2, av, z()), pa * p1 * p2));
                        }
                    }
                }
                out
            }
        }
    }

    /// Full observation support with joint probabilities.
    pub fn atoms(&self) -> Vec<(Observation, f64)> {
        (0..self.num_atoms())
            .flat_map(|j| {
                let fj = self.f[j];
                self.conditional_atoms(j).into_iter().map(move |(x, p)| (x, p * fj))
            })
            .collect()
    }

    /// Conditional means `E(S_i | Z = j)` computed by enumeration.
    pub fn stilde_enumerated(&self) -> Vec<SVector> {
        (0..self.num_atoms())
            .map(|j| {
                let mut m = SVector::default();
                for (x, p) in self.conditional_atoms(j) {
                    let s = statistic_s_unchecked(&self.kind, &x);
                    m.s1 += p * s.s1;
                    m.s2 += p * s.s2;
                    m.s3 += p * s.s3;
                    m.s4 += p * s.s4;
                }
                m
            })
            .collect()
    }
}

/// `P(Y = 1 | A, Z)` for an ATE outcome with treatment effect `effect`.
#[inline]
pub(crate) fn ate_outcome_prob(effect: f64, treated: bool) -> f64 {
    if treated {
        0.5 * (1.0 + effect)
    } else {
        0.5 * (1.0 - effect)
    }
}

/// Exact `E g(X)` under the model.
pub fn exact_expectation(model: &DiscreteModel, g: impl Fn(&Observation) -> f64) -> f64 {
    model.atoms().iter().map(|(x, p)| g(x) * p).sum()
}

/// Exact `E g(X1, X2)` for independent `X1, X2` drawn from the model.
pub fn exact_expectation2(model: &DiscreteModel, g: impl Fn(&Observation, &Observation) -> f64) -> f64 {
    let atoms = model.atoms();
    atoms
        .iter()
        .map(|(x1, p1)| p1 * atoms.iter().map(|(x2, p2)| g(x1, x2) * p2).sum::<f64>())
        .sum()
}
