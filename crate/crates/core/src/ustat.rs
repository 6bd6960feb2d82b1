//! U-statistics of orders one and two.
//!
//! The order-two statistic is evaluated by a dense double loop over ordered
//! pairs. Rows are summed in parallel but reduced in index order, so the value
//! does not depend on the number of threads.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{DiscreteModel, Observation};

type KernelFn<T> = Arc<dyn Fn(&T, &T) -> f64 + Send + Sync>;

/// Symmetric kernel of two arguments.
#[derive(Clone)]
pub struct Kernel2<T> {
    f: KernelFn<T>,
    claimed_degenerate: bool,
}

impl<T> std::fmt::Debug for Kernel2<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Kernel2")
            .field("claimed_degenerate", &self.claimed_degenerate)
            .finish_non_exhaustive()
    }
}

impl<T> Kernel2<T> {
    #[inline]
    pub fn eval(&self, x1: &T, x2: &T) -> f64 {
        (self.f)(x1, x2)
    }

    /// Advisory flag; [`degeneracy_check`] is the authority.
    pub fn claimed_degenerate(&self) -> bool {
        self.claimed_degenerate
    }

    pub fn claim_degenerate(mut self, claim: bool) -> Self {
        self.claimed_degenerate = claim;
        self
    }
}

impl<T: Sync> Kernel2<T> {
    pub fn ustat(&self, data: &[T]) -> Result<f64> {
        ustat_order2(data, |x, y| self.eval(x, y))
    }
}

/// `(x1, x2) -> (f(x1, x2) + f(x2, x1)) / 2`.
pub fn symmetrize<T, F>(f: F) -> Kernel2<T>
where
    F: Fn(&T, &T) -> f64 + Send + Sync + 'static,
{
    Kernel2 {
        f: Arc::new(move |x1, x2| 0.5 * (f(x1, x2) + f(x2, x1))),
        claimed_degenerate: false,
    }
}

/// Neumaier-compensated sum.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Empirical mean of `g`.
pub fn ustat_order1<T>(data: &[T], g: impl Fn(&T) -> f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Argument("order-one U-statistic of an empty sample".into()));
    }
    Ok(compensated_sum(data.iter().map(g)) / data.len() as f64)
}

/// `Sum_{j != i} f(X_i, X_j)` for every `i`.
pub fn ustat_row_sums<T, F>(data: &[T], f: F) -> Vec<f64>
where
    T: Sync,
    F: Fn(&T, &T) -> f64 + Sync,
{
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let xi = &data[i];
            let mut s = 0.0;
            for (j, xj) in data.iter().enumerate() {
                if j != i {
                    s += f(xi, xj);
                }
            }
            s
        })
        .collect()
}

/// `(n(n-1))^{-1} Sum_{i != j} f(X_i, X_j)`.
pub fn ustat_order2<T, F>(data: &[T], f: F) -> Result<f64>
where
    T: Sync,
    F: Fn(&T, &T) -> f64 + Sync,
{
    let n = data.len();
    if n < 2 {
        return Err(Error::Argument(format!("order-two U-statistic needs n >= 2, got {n}")));
    }
    let rows = ustat_row_sums(data, f);
    Ok(compensated_sum(rows) / (n as f64 * (n as f64 - 1.0)))
}

/// Largest `|E f(x, X)|` over the observation support, by exact enumeration.
/// Kernels with a value at most `1e-10` are degenerate.
pub fn degeneracy_check(model: &DiscreteModel, f: &Kernel2<Observation>) -> f64 {
    let atoms: Vec<_> = model.atoms().into_iter().filter(|(_, p)| *p > 0.0).collect();
    atoms
        .iter()
        .map(|(x, _)| atoms.iter().map(|(x2, p2)| f.eval(x, x2) * p2).sum::<f64>().abs())
        .fold(0.0, f64::max)
}

/// Exact moments entering the variance of an order-two U-statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoeffdingComponents {
    /// `E f(X1, X2)`.
    pub mean: f64,
    /// Variance of the linear projection `E[f(X, X2) | X]`.
    pub zeta1: f64,
    /// `Var f(X1, X2)`.
    pub zeta2: f64,
}

pub fn hoeffding_components(model: &DiscreteModel, f: &Kernel2<Observation>) -> HoeffdingComponents {
    let atoms: Vec<_> = model.atoms().into_iter().filter(|(_, p)| *p > 0.0).collect();
    let values: Vec<Vec<f64>> = atoms
        .iter()
        .map(|(x1, _)| atoms.iter().map(|(x2, _)| f.eval(x1, x2)).collect())
        .collect();
    let linear: Vec<f64> = values
        .iter()
        .map(|row| row.iter().zip(&atoms).map(|(v, (_, p))| v * p).sum())
        .collect();
    let mean: f64 = linear.iter().zip(&atoms).map(|(h, (_, p))| h * p).sum();
    let zeta1 = linear.iter().zip(&atoms).map(|(h, (_, p))| p * (h - mean).powi(2)).sum();
    let zeta2 = values
        .iter()
        .zip(&atoms)
        .map(|(row, (_, p1))| {
            p1 * row
                .iter()
                .zip(&atoms)
                .map(|(v, (_, p2))| p2 * (v - mean).powi(2))
                .sum::<f64>()
        })
        .sum();
    HoeffdingComponents { mean, zeta1, zeta2 }
}

/// Exact `Var(U_n f) = 4(n-2)/(n(n-1)) zeta1 + 2/(n(n-1)) zeta2`.
pub fn hoeffding_variance(model: &DiscreteModel, f: &Kernel2<Observation>, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Argument(format!("U-statistic variance needs n >= 2, got {n}")));
    }
    let c = hoeffding_components(model, f);
    let nf = n as f64;
    let pairs = nf * (nf - 1.0);
    Ok(4.0 * (nf - 2.0) / pairs * c.zeta1 + 2.0 / pairs * c.zeta2)
}
