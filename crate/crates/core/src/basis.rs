//! Finite basis systems on the covariate domain and rank-k projection kernels
//! `Pi(z1, z2) = phi(z1)' Omega^{-1} phi(z2)` with respect to a signed weight.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Covariate, Domain, Func, QuadratureGrid};

/// Largest Gram condition number accepted before a weight is rejected.
pub const GRAM_CONDITION_LIMIT: f64 = 1e12;

/// Default cap on the number of basis functions.
pub const MAX_BASIS_SIZE: usize = 1 << 14;

/// Cells of a dyadic partition of `[0,1]^d` or the atoms of a finite support.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Dyadic { d: usize, level: u32 },
    Atoms(usize),
}

impl Partition {
    pub fn num_cells(&self) -> usize {
        match *self {
            Partition::Dyadic { d, level } => 1usize << (level as usize * d),
            Partition::Atoms(j) => j,
        }
    }

    /// Measure of one cell: Lebesgue volume or 1 for atoms.
    pub fn cell_volume(&self) -> f64 {
        match *self {
            Partition::Dyadic { .. } => 1.0 / self.num_cells() as f64,
            Partition::Atoms(_) => 1.0,
        }
    }

    /// Index of the cell containing `z`. Points are clamped into `[0,1]^d`.
    ///
    /// Panics if the covariate type does not match the partition.
    #[inline]
    pub fn cell_of(&self, z: &Covariate) -> usize {
        match (*self, z) {
            (Partition::Dyadic { d, level }, Covariate::Point(p)) => {
                debug_assert_eq!(p.len(), d, "covariate dimension mismatch");
                let per_axis = 1usize << level;
                let mut idx = 0;
                let mut stride = 1;
                for &x in p.iter().take(d) {
                    let c = ((x * per_axis as f64).floor().max(0.0) as usize).min(per_axis - 1);
                    idx += c * stride;
                    stride *= per_axis;
                }
                idx
            }
            (Partition::Atoms(j), Covariate::Atom(i)) => {
                assert!(*i < j, "atom {i} outside support of size {j}");
                *i
            }
            _ => panic!("covariate {z:?} does not match partition {self:?}"),
        }
    }

    /// Domain on which midpoint quadrature is exact for functions that are
    /// constant on the cells of this partition.
    pub fn exact_domain(&self) -> Domain {
        match *self {
            Partition::Dyadic { d, level } => Domain::Grid(QuadratureGrid { d, m: 1usize << level }),
            Partition::Atoms(j) => Domain::Atoms(j),
        }
    }

    /// Function taking `values[c]` on cell `c`.
    pub fn piecewise(&self, values: Vec<f64>) -> Func {
        assert_eq!(values.len(), self.num_cells());
        let part = *self;
        Func::new(move |z| values[part.cell_of(z)])
    }
}

/// Piecewise-constant Haar scaling functions on the dyadic partition of
/// `[0,1]^d` at a resolution level, normalized to unit `L2` norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorHaar {
    pub d: usize,
    pub level: u32,
}

impl TensorHaar {
    pub fn partition(&self) -> Partition {
        Partition::Dyadic { d: self.d, level: self.level }
    }

    fn height(&self) -> f64 {
        (self.partition().num_cells() as f64).sqrt()
    }
}

/// Basis given by its values on the atoms of a finite support (row-major `J x k`).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteBasis {
    atoms: usize,
    size: usize,
    values: Arc<Vec<f64>>,
}

impl DiscreteBasis {
    /// `rows[j]` holds `(phi_1(j), .., phi_k(j))`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let atoms = rows.len();
        let size = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::Argument("basis rows have unequal lengths".into()));
        }
        Ok(DiscreteBasis {
            atoms,
            size,
            values: Arc::new(rows.into_iter().flatten().collect()),
        })
    }

    /// Basis with no functions.
    pub fn empty(atoms: usize) -> Self {
        DiscreteBasis { atoms, size: 0, values: Arc::new(Vec::new()) }
    }

    pub fn constant(atoms: usize) -> Self {
        DiscreteBasis { atoms, size: 1, values: Arc::new(vec![1.0; atoms]) }
    }

    pub fn indicator(atoms: usize) -> Self {
        Self::blocks(atoms, atoms).expect("k = J is always valid")
    }

    /// Indicators of `k` contiguous, near-equal blocks of atoms.
    pub fn blocks(atoms: usize, k: usize) -> Result<Self> {
        if k > atoms {
            return Err(Error::Config(format!("indicator basis of size {k} on {atoms} atoms")));
        }
        let mut values = vec![0.0; atoms * k];
        if k > 0 {
            for j in 0..atoms {
                values[j * k + j * k / atoms] = 1.0;
            }
        }
        Ok(DiscreteBasis { atoms, size: k, values: Arc::new(values) })
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.size..(j + 1) * self.size]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BasisSystem {
    Haar(TensorHaar),
    Discrete(DiscreteBasis),
}

/// Tensor Haar system with `2^(level*d)` functions.
pub fn build_tensor_haar(d: usize, level: u32) -> Result<BasisSystem> {
    build_tensor_haar_capped(d, level, MAX_BASIS_SIZE)
}

pub fn build_tensor_haar_capped(d: usize, level: u32, max_size: usize) -> Result<BasisSystem> {
    if d == 0 {
        return Err(Error::Config("Haar basis needs dimension d >= 1".into()));
    }
    let bits = level as usize * d;
    if bits >= usize::BITS as usize - 1 || (1usize << bits) > max_size {
        return Err(Error::Config(format!(
            "Haar basis at level {level} in dimension {d} exceeds the maximum size {max_size}"
        )));
    }
    Ok(BasisSystem::Haar(TensorHaar { d, level }))
}

impl BasisSystem {
    pub fn size(&self) -> usize {
        match self {
            BasisSystem::Haar(h) => h.partition().num_cells(),
            BasisSystem::Discrete(b) => b.size,
        }
    }

    /// Dense vector `(phi_1(z), .., phi_k(z))`.
    pub fn eval(&self, z: &Covariate) -> Vec<f64> {
        match self {
            BasisSystem::Haar(h) => {
                let mut v = vec![0.0; self.size()];
                v[h.partition().cell_of(z)] = h.height();
                v
            }
            BasisSystem::Discrete(b) => b.row(atom_index(z, b.atoms)).to_vec(),
        }
    }

    /// Nonzero entries of `phi(z)` as `(index, value)` pairs.
    pub fn eval_sparse(&self, z: &Covariate) -> Vec<(usize, f64)> {
        match self {
            BasisSystem::Haar(h) => vec![(h.partition().cell_of(z), h.height())],
            BasisSystem::Discrete(b) => b
                .row(atom_index(z, b.atoms))
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect(),
        }
    }

    /// Domain on which integrals of products of basis functions are exact.
    pub fn natural_domain(&self) -> Domain {
        match self {
            BasisSystem::Haar(h) => h.partition().exact_domain(),
            BasisSystem::Discrete(b) => Domain::Atoms(b.atoms),
        }
    }
}

fn atom_index(z: &Covariate, atoms: usize) -> usize {
    match z {
        Covariate::Atom(j) if *j < atoms => *j,
        _ => panic!("covariate {z:?} is not an atom of a support of size {atoms}"),
    }
}

/// Weight function `w(z)` of the inner product `<g, h>_w = int g h w dnu`.
///
/// On finite supports the values are atom weights that already include any density factor.
#[derive(Debug, Clone)]
pub struct WeightMeasure {
    pub w: Func,
}

impl WeightMeasure {
    pub fn new(w: Func) -> Self {
        WeightMeasure { w }
    }

    pub fn atoms(values: Vec<f64>) -> Self {
        WeightMeasure { w: Func::atoms(values) }
    }
}

/// Ratio of extreme singular values; infinite for singular matrices.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Symmetric Gram-type matrix; diagonal for bases with disjoint supports.
#[derive(Debug, Clone, PartialEq)]
pub enum GramMatrix {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

impl GramMatrix {
    /// Zero matrix shaped for `basis`.
    pub fn zeros(basis: &BasisSystem) -> Self {
        let k = basis.size();
        match basis {
            BasisSystem::Haar(_) => GramMatrix::Diagonal(vec![0.0; k]),
            BasisSystem::Discrete(_) => GramMatrix::Dense(DMatrix::zeros(k, k)),
        }
    }

    /// Adds `t phi phi'` for a sparse `phi`.
    pub fn add_outer(&mut self, phi: &[(usize, f64)], t: f64) {
        match self {
            GramMatrix::Diagonal(d) => {
                for &(i, v) in phi {
                    d[i] += v * v * t;
                }
            }
            GramMatrix::Dense(m) => {
                for &(i, vi) in phi {
                    for &(j, vj) in phi {
                        m[(i, j)] += vi * vj * t;
                    }
                }
            }
        }
    }

    pub fn size(&self) -> usize {
        match self {
            GramMatrix::Diagonal(d) => d.len(),
            GramMatrix::Dense(m) => m.nrows(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            GramMatrix::Diagonal(d) => {
                if i == j {
                    d[i]
                } else {
                    0.0
                }
            }
            GramMatrix::Dense(m) => m[(i, j)],
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            GramMatrix::Diagonal(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            GramMatrix::Dense(m) => m.clone(),
        }
    }

    pub fn condition(&self) -> f64 {
        match self {
            GramMatrix::Diagonal(d) if d.is_empty() => 1.0,
            GramMatrix::Diagonal(d) => {
                let max = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
                let min = d.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
                if min <= 0.0 || min.is_nan() {
                    f64::INFINITY
                } else {
                    max / min
                }
            }
            GramMatrix::Dense(m) => condition_number(m),
        }
    }

    pub fn try_inverse(&self) -> Option<GramMatrix> {
        match self {
            GramMatrix::Diagonal(d) => {
                d.iter().all(|v| *v != 0.0).then(|| GramMatrix::Diagonal(d.iter().map(|v| 1.0 / v).collect()))
            }
            GramMatrix::Dense(m) => m.clone().try_inverse().map(GramMatrix::Dense),
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Option<Vec<f64>> {
        match self {
            GramMatrix::Diagonal(d) => {
                d.iter().all(|v| *v != 0.0).then(|| rhs.iter().zip(d).map(|(r, v)| r / v).collect())
            }
            GramMatrix::Dense(m) => {
                let x = m.clone().lu().solve(&DVector::from_column_slice(rhs))?;
                Some(x.iter().copied().collect())
            }
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        match self {
            GramMatrix::Diagonal(d) => x.iter().zip(d).map(|(a, b)| a * b).collect(),
            GramMatrix::Dense(m) => (m * DVector::from_column_slice(x)).iter().copied().collect(),
        }
    }
}

fn gram_unchecked(basis: &BasisSystem, weight: &WeightMeasure, domain: &Domain) -> GramMatrix {
    let mut omega = GramMatrix::zeros(basis);
    for (z, nu) in domain.nodes() {
        let wz = weight.w.eval(&z) * nu;
        if wz != 0.0 {
            omega.add_outer(&basis.eval_sparse(&z), wz);
        }
    }
    omega
}

/// Gram matrix `Omega_ij = int phi_i phi_j w dnu` over the nodes of `domain`.
pub fn gram(basis: &BasisSystem, weight: &WeightMeasure, domain: &Domain) -> Result<DMatrix<f64>> {
    let omega = gram_unchecked(basis, weight, domain);
    let condition = omega.condition();
    if condition.is_nan() || condition > GRAM_CONDITION_LIMIT {
        return Err(Error::DegenerateWeight { condition, limit: GRAM_CONDITION_LIMIT });
    }
    Ok(omega.to_dense())
}

/// Kernel of the `L2(w)`-projection onto the span of a basis.
#[derive(Debug, Clone)]
pub struct ProjectionKernel {
    basis: BasisSystem,
    omega_inverse: GramMatrix,
    weight: WeightMeasure,
    domain: Domain,
    condition: f64,
}

impl ProjectionKernel {
    /// Builds the kernel, rejecting weights whose Gram matrix is numerically singular.
    pub fn new(basis: BasisSystem, weight: WeightMeasure, domain: Domain) -> Result<Self> {
        let omega = gram_unchecked(&basis, &weight, &domain);
        let condition = omega.condition();
        if condition.is_nan() || condition > GRAM_CONDITION_LIMIT {
            return Err(Error::DegenerateWeight { condition, limit: GRAM_CONDITION_LIMIT });
        }
        let omega_inverse = omega
            .try_inverse()
            .ok_or(Error::DegenerateWeight { condition: f64::INFINITY, limit: GRAM_CONDITION_LIMIT })?;
        Ok(ProjectionKernel { basis, omega_inverse, weight, domain, condition })
    }

    /// Kernel over the basis' natural domain.
    pub fn on_natural_domain(basis: BasisSystem, weight: WeightMeasure) -> Result<Self> {
        let domain = basis.natural_domain();
        Self::new(basis, weight, domain)
    }

    pub fn size(&self) -> usize {
        self.basis.size()
    }

    pub fn basis(&self) -> &BasisSystem {
        &self.basis
    }

    pub fn weight(&self) -> &WeightMeasure {
        &self.weight
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn omega_inverse(&self) -> &GramMatrix {
        &self.omega_inverse
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// `Omega^{-1} phi(z)`.
    pub fn dual(&self, z: &Covariate) -> Vec<f64> {
        let k = self.size();
        let mut out = vec![0.0; k];
        for (j, v) in self.basis.eval_sparse(z) {
            match &self.omega_inverse {
                GramMatrix::Diagonal(d) => out[j] += d[j] * v,
                GramMatrix::Dense(m) => {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o += m[(i, j)] * v;
                    }
                }
            }
        }
        out
    }

    pub fn eval(&self, z1: &Covariate, z2: &Covariate) -> f64 {
        let phi2 = self.basis.eval_sparse(z2);
        self.basis
            .eval_sparse(z1)
            .iter()
            .map(|&(i, v1)| v1 * phi2.iter().map(|&(j, v2)| self.omega_inverse.get(i, j) * v2).sum::<f64>())
            .sum()
    }
}

/// Result of projecting a function onto the span of a kernel's basis.
#[derive(Debug, Clone)]
pub struct Projection {
    pub coefficients: Vec<f64>,
    pub projected: Func,
}

/// `L2(w)`-projection of `g`: coefficients `Omega^{-1} int phi g w dnu`.
pub fn project_function(pk: &ProjectionKernel, g: &Func) -> Projection {
    let k = pk.size();
    let mut rhs = vec![0.0; k];
    for (z, nu) in pk.domain.nodes() {
        let s = g.eval(&z) * pk.weight.w.eval(&z) * nu;
        if s == 0.0 {
            continue;
        }
        for (i, v) in pk.basis.eval_sparse(&z) {
            rhs[i] += v * s;
        }
    }
    let coefficients = pk.omega_inverse.mul_vec(&rhs);
    let basis = pk.basis.clone();
    let coef = coefficients.clone();
    let projected = Func::new(move |z| basis.eval_sparse(z).iter().map(|&(i, v)| v * coef[i]).sum());
    Projection { coefficients, projected }
}
