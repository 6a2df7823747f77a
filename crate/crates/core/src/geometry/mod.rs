//! Preconditionings, near-optimal designs and the algorithm constants.

pub mod constants;
pub mod design;
pub mod preconditioning;

pub use constants::{compute_constants, ConstantSet, ConstantsError, Mode, PracticalOverrides};
pub use design::{
    check_design, compute_near_optimal_design, design_for_stage, parallel_perp_projectors, range_q,
    DesignError, DesignReport, DesignSet,
};
pub use preconditioning::{
    q_from_sequence, validate_preconditioning, PrecondViolation, Preconditioning,
    PreconditioningError, PreconditioningReport,
};
