//! Seeded oracle suites: finite-difference gradient checks, brute-force
//! oracles, and one executable check per documented invariant. Every case
//! records its seed and can be replayed alone.

mod gradients;
mod invariants;
mod oracles;
mod report;

pub use gradients::{
    check_instance, gradient_instance, run_gradient_suite, GradientInstance, GRADIENT_TARGETS,
    GRADIENT_TOLERANCE,
};
pub use invariants::{
    coverage, external_checks, registry, run_invariant_suite, CoverageEntry, CoverageReport,
    ExternalCheck, Invariant,
};
pub use oracles::{
    brute_force_top_k, check_cosent_ordering, check_fusion, check_retrieval, check_split,
    check_threshold, exhaustive_threshold, pearson_oracle, rank_by_counting, run_oracle_suite,
    spearman_error, tied_sequence, OracleConfig,
};
pub use report::{junit_xml, CaseOutcome, OracleCase, SuiteReport, TargetSummary};
