//! True data-generating laws and the sampler.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::Partition;
use crate::error::{Error, Result};
use crate::model::{
    ate_outcome_prob, functional_chi, Covariate, DiscreteModel, Domain, Func, ModelKind, NuisanceParams, Observation,
    QuadratureGrid,
};

/// Smoothness exponents of `a`, `b` and the weight `E(S1|Z) f`, and the covariate dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessSpec {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub d: usize,
}

impl SmoothnessSpec {
    pub fn new(alpha: f64, beta: f64, gamma: f64, d: usize) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("smoothness exponent {name} = {v} must be positive")));
            }
        }
        if d == 0 {
            return Err(Error::Config("covariate dimension d must be at least 1".into()));
        }
        Ok(SmoothnessSpec { alpha, beta, gamma, d })
    }

    /// Whether `alpha/(2 alpha + d) + beta/(2 beta + d) >= 1/2`, the regime in
    /// which the first-order estimator reaches the parametric rate.
    pub fn first_order_root_n(&self) -> bool {
        let d = self.d as f64;
        self.alpha / (2.0 * self.alpha + d) + self.beta / (2.0 * self.beta + d) >= 0.5
    }
}

/// Lacunary cosine series `sum_j 2^{-j s} cos(2^j pi x + phase_j)`, averaged
/// over coordinates and scaled into `[-1, 1]`. Its Hölder exponent is `s` (for `s < 1`).
#[derive(Debug, Clone)]
pub struct HolderSeries {
    exponent: f64,
    phases: Vec<Vec<f64>>,
}

impl HolderSeries {
    pub fn new(exponent: f64, d: usize, levels: u32, rng: &mut impl Rng) -> Self {
        let phases = (0..d)
            .map(|_| (0..=levels).map(|_| rng.random::<f64>() * 2.0 * PI).collect())
            .collect();
        HolderSeries { exponent, phases }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let norm: f64 = (0..self.phases[0].len()).map(|j| 2f64.powf(-(j as f64) * self.exponent)).sum();
        let total: f64 = self
            .phases
            .iter()
            .zip(x)
            .map(|(ph, &xc)| {
                ph.iter()
                    .enumerate()
                    .map(|(j, p)| {
                        let freq = (1u64 << j) as f64;
                        2f64.powf(-(j as f64) * self.exponent) * (freq * PI * xc + p).cos()
                    })
                    .sum::<f64>()
            })
            .sum();
        total / (norm * self.phases.len() as f64)
    }

    pub fn to_func(&self) -> Func {
        let s = self.clone();
        Func::new(move |z| s.eval(z.point().expect("Hölder series evaluated at an atom")))
    }
}

/// Continuous law on `[0,1]^d`: piecewise-constant covariate density on a
/// dyadic partition and Hölder-smooth nuisance functions.
///
/// * missing data: `P(A=1|Z) = 0.55 + 0.35 g_a`, `b = 0.5 + 0.4 g_b`;
/// * covariance: `a = 0.5 + 0.4 g_a`, `b = 0.5 + 0.4 g_b`;
/// * ATE: `a = 0.6 g_a`, `b = 0.6 g_b`,
///
/// with `g_a`, `g_b` lacunary series of exponents `alpha`, `beta`.
#[derive(Debug, Clone)]
pub struct ContinuousTruth {
    kind: ModelKind,
    smoothness: SmoothnessSpec,
    params: NuisanceParams,
    density_partition: Partition,
    cdf: Vec<f64>,
    quadrature: Domain,
    chi: f64,
}

/// Quadrature nodes used to integrate continuous truths.
const TRUTH_QUADRATURE_NODES_LOG2: usize = 18;

impl ContinuousTruth {
    /// `cell_masses` are probabilities of the cells of a dyadic partition of
    /// `[0,1]^d` (length `2^(L d)`); `None` means the uniform density.
    pub fn holder(
        kind: ModelKind,
        smoothness: SmoothnessSpec,
        levels: u32,
        phase_seed: u64,
        cell_masses: Option<Vec<f64>>,
    ) -> Result<Self> {
        let d = smoothness.d;
        let masses = cell_masses.unwrap_or_else(|| vec![1.0]);
        let level = dyadic_level(masses.len(), d).ok_or_else(|| {
            Error::Config(format!("density has {} cells, not a power of 2^{d}", masses.len()))
        })?;
        if masses.iter().any(|m| m.is_nan() || *m < 0.0) || (masses.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return Err(Error::Config("density cell masses must be nonnegative and sum to 1".into()));
        }
        if levels > 40 {
            return Err(Error::Config(format!("lacunary series with {levels} levels")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(phase_seed);
        let ga = HolderSeries::new(smoothness.alpha, d, levels, &mut rng).to_func();
        let gb = HolderSeries::new(smoothness.beta, d, levels, &mut rng).to_func();
        let (a, b) = match &kind {
            ModelKind::MissingData => {
                let g = ga.clone();
                (Func::new(move |z| 1.0 / (0.55 + 0.35 * g.eval(z))), affine(&gb, 0.5, 0.4))
            }
            ModelKind::Covariance => (affine(&ga, 0.5, 0.4), affine(&gb, 0.5, 0.4)),
            ModelKind::Ate(_) => (ga.scaled(0.6), gb.scaled(0.6)),
        };
        let partition = Partition::Dyadic { d, level };
        let volume = partition.cell_volume();
        let f = partition.piecewise(masses.iter().map(|m| m / volume).collect());
        let params = NuisanceParams::new(a, b, f);

        let per_axis_log2 = (TRUTH_QUADRATURE_NODES_LOG2 / d).max(level as usize);
        let quadrature = Domain::Grid(QuadratureGrid::new(d, 1usize << per_axis_log2)?);
        params.validate(&kind, &Domain::Grid(QuadratureGrid::new(d, 1usize << per_axis_log2.min(20 / d))?))?;
        let chi = functional_chi(&kind, &params, &quadrature);
        let mut acc = 0.0;
        let cdf = masses
            .iter()
            .map(|m| {
                acc += m;
                acc
            })
            .collect();
        Ok(ContinuousTruth { kind, smoothness, params, density_partition: partition, cdf, quadrature, chi })
    }

    pub fn smoothness(&self) -> SmoothnessSpec {
        self.smoothness
    }

    pub fn params(&self) -> &NuisanceParams {
        &self.params
    }

    pub fn quadrature(&self) -> &Domain {
        &self.quadrature
    }

    fn sample_z(&self, rng: &mut impl Rng) -> Covariate {
        let Partition::Dyadic { d, level } = self.density_partition else { unreachable!() };
        let u: f64 = rng.random();
        let cell = self.cdf.partition_point(|c| *c <= u).min(self.cdf.len() - 1);
        let per_axis = 1usize << level;
        let mut rest = cell;
        let point = (0..d)
            .map(|_| {
                let c = rest % per_axis;
                rest /= per_axis;
                (c as f64 + rng.random::<f64>()) / per_axis as f64
            })
            .collect();
        Covariate::Point(point)
    }
}

fn affine(g: &Func, center: f64, scale: f64) -> Func {
    let g = g.clone();
    Func::new(move |z| center + scale * g.eval(z))
}

fn dyadic_level(cells: usize, d: usize) -> Option<u32> {
    (0..=(30 / d as u32)).find(|l| 1usize << (*l as usize * d) == cells)
}

/// A true law from which datasets are drawn.
#[derive(Debug, Clone)]
pub enum Truth {
    Discrete(DiscreteModel),
    Continuous(ContinuousTruth),
}

impl Truth {
    pub fn kind(&self) -> &ModelKind {
        match self {
            Truth::Discrete(m) => m.kind(),
            Truth::Continuous(c) => &c.kind,
        }
    }

    pub fn chi(&self) -> f64 {
        match self {
            Truth::Discrete(m) => m.chi(),
            Truth::Continuous(c) => c.chi,
        }
    }

    pub fn params(&self) -> NuisanceParams {
        match self {
            Truth::Discrete(m) => m.params(),
            Truth::Continuous(c) => c.params.clone(),
        }
    }

    /// True weight `E(S1|Z) f`.
    pub fn weight(&self) -> Func {
        match self {
            Truth::Discrete(m) => Func::atoms(m.weight()),
            Truth::Continuous(c) => {
                let (kind, p) = (c.kind.clone(), c.params.clone());
                Func::new(move |z| kind.stilde1(p.a.eval(z)) * p.f.eval(z))
            }
        }
    }

    /// Domain for integrating functions of the truth.
    pub fn domain(&self) -> Domain {
        match self {
            Truth::Discrete(m) => m.domain(),
            Truth::Continuous(c) => c.quadrature.clone(),
        }
    }

    /// Covariate dimension; `None` on finite supports.
    pub fn dimension(&self) -> Option<usize> {
        match self {
            Truth::Discrete(_) => None,
            Truth::Continuous(c) => Some(c.smoothness.d),
        }
    }

    fn sample_one(&self, rng: &mut impl Rng) -> Result<Observation> {
        let (z, a, b) = match self {
            Truth::Discrete(m) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut j = m.num_atoms() - 1;
                for (i, f) in m.f().iter().enumerate() {
                    acc += f;
                    if u < acc {
                        j = i;
                        break;
                    }
                }
                (Covariate::Atom(j), m.a()[j], m.b()[j])
            }
            Truth::Continuous(c) => {
                let z = c.sample_z(rng);
                let (a, b) = (c.params.a.eval(&z), c.params.b.eval(&z));
                (z, a, b)
            }
        };
        let mut bernoulli = |p: f64| -> Result<bool> {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!("probability {p} at {z:?} outside [0, 1]")));
            }
            Ok(rng.random::<f64>() < p)
        };
        Ok(match self.kind() {
            ModelKind::MissingData => {
                let obs = bernoulli(1.0 / a)?;
                let y = bernoulli(b)?;
                Observation::missing_data(y, obs, z)
            }
            ModelKind::Covariance => {
                let treat = bernoulli(a)?;
                let y = bernoulli(b)?;
                Observation::covariance(y, treat, z)
            }
            ModelKind::Ate(pi) => {
                let treat = bernoulli(pi.eval(&z))?;
                let y1 = bernoulli(ate_outcome_prob(a, treat))?;
                let y2 = bernoulli(ate_outcome_prob(b, treat))?;
                Observation::ate(y1, y2, treat, z)
            }
        })
    }

    pub fn sample(&self, n: usize, rng: &mut impl RngCore) -> Result<Vec<Observation>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }
}

/// I.i.d. sample of size `n`, deterministic given `seed`.
pub fn generate_dataset(truth: &Truth, n: usize, seed: u64) -> Result<Vec<Observation>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    truth.sample(n, &mut rng)
}
