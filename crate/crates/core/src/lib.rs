//! Plug-in, doubly robust first-order and second-order U-statistic estimators
//! for functionals `int a b f` of structured semiparametric models, together
//! with exact discrete-model oracles and a Monte Carlo harness.

pub mod basis;
pub mod error;
pub mod estimators;
pub mod model;
pub mod nuisance;
pub mod selftest;
pub mod simulate;
pub mod ustat;

pub use basis::{
    build_tensor_haar, gram, project_function, BasisSystem, DiscreteBasis, Partition, ProjectionKernel, WeightMeasure,
};
pub use error::{Error, Result};
pub use estimators::{
    build_second_order_kernel, estimate, estimate_first_order, estimate_second_order, exact_bias_first_order,
    exact_bias_second_order, EstimateReport, EstimatorConfig, ExactBias, KernelWeight, ResidualFns,
    SecondOrderKernel,
};
pub use model::{
    exact_expectation, exact_expectation2, first_order_if, functional_chi, statistic_s, stilde, Covariate,
    DiscreteModel, Domain, Func, ModelKind, NuisanceParams, Observation, Propensity, QuadratureGrid, SVector,
};
pub use nuisance::{fit_nuisances, sample_split, NuisanceConfig, NuisanceFit, SplitPlan};
pub use ustat::{degeneracy_check, hoeffding_variance, symmetrize, ustat_order1, ustat_order2, Kernel2};
