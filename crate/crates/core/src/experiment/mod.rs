//! End-to-end experiment drivers shared by the command line and the
//! acceptance tests.

pub mod affine;
pub mod e2e;
pub mod probing;

pub use affine::{affine_recovery, AffineRecoveryConfig, AffineRecoveryReport};
pub use e2e::{pose_sensitivity, E2eConfig, E2eReport};
pub use probing::{fit_and_score, standard_metrics, ProbeOutcome};
