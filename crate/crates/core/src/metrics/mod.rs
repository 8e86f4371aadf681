//! Quantitative machinery: transport distances, bias deviations,
//! intersectional sensitivity, correlation checks and robustness sweeps.

pub mod robustness;
pub mod sensitivity;
pub mod validation;
pub mod wasserstein;

pub use robustness::{perturb_answers, perturb_subsample, robustness_sweep, Perturbation, SweepPoint};
pub use sensitivity::{
    build_matrix, empirical_distribution, intersectional_sensitivity, intervened_distribution, negative_fraction,
    post_mitigation_sensitivity, AuditData, RowData, Sample,
};
pub use validation::{pearson, validate_correlation, CorrelationReport, PromptCorrelation};
pub use wasserstein::{bias_deviation, w1_probs, wasserstein1, worst_case_distance};
