//! Small explicit MDPs for checking the penalized operator's theory numerically.

pub mod linalg;
mod mdp;
mod operator;
mod probe;
mod verify;

pub use mdp::{random_instance, ProxyTable, TabularInstance, TabularMdp, TabularPolicy, NEG_SENTINEL};
pub use operator::{
    closed_form_fixed_point, closed_form_with, fac_operator_apply, fac_operator_apply_with, fixed_point_iterate, fixed_point_iterate_from,
    occupancy_related_check, penalty_vector, policy_backup, policy_value, resolvent, sup_norm, transition_matrix, FixedPoint, OccupancyReport,
    OffSupport, DEFAULT_TOL,
};
pub use probe::{improve_policy, project_simplex, project_simplex_masked, support_violation_probe, ProbeRow};
pub use verify::{run_tabular_verify, PropertyResult, VerifyConfig, VerifyReport};
