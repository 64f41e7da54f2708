//! Model definition: the fixed-effect design, structured random-effect
//! precision blocks, and penalized-complexity priors.

pub mod design;
pub mod effects;
pub mod priors;
mod spec;

pub use design::{build_design, DesignError, DesignMatrix};
pub use effects::{
    cyclic_rw1_precision, iid_precision, matern_cov, matern_covariance_matrix,
    matern_field_precision, rw1_precision, EffectsError, MaternParams, PrecisionBlock,
};
pub use priors::{
    pc_matern_log_density, pc_precision_log_density, pc_prior_log_density, HyperValue,
    PcPriorConfig, PriorError,
};
pub use spec::{
    FixedTerm, HeatKind, MaternPriorSettings, ModelSpec, OutcomeStratum, PcPrecisionSettings,
    PriorSettings, RandomEffect, SpecError,
};
