//! Privacy accounting: RDP for the subsampled Gaussian, (ε, δ) conversion,
//! noise calibration, group privacy and author auditing.

mod audit;
mod budget;
mod rdp;

pub use audit::{
    audit_author_contributions, effective_budget, group_privacy, AuditDocument, AuditReport,
    AuthorCount, EffectiveBudget,
};
pub use budget::{default_delta, epsilon_serde, parse_epsilon, PrivacyBudget};
pub use rdp::{
    calibrate_noise, calibrate_noise_with_orders, compose, default_orders, epsilon_after,
    rdp_gaussian, rdp_subsampled_gaussian, to_epsilon_delta, RdpCurve, CALIBRATION_SIGMA_MAX,
    CALIBRATION_SIGMA_MIN, CALIBRATION_TOLERANCE,
};
