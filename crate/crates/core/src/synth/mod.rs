//! Synthetic volumes: analytic phantoms, random poses and a longitudinal
//! knee cohort with known ground truth.

mod knee;
mod phantom;
mod pose;

pub use knee::{generate_cohort, klg_from_jsw, Cohort, CohortConfig, KneeAnatomy, KneeTruth};
pub use phantom::{Ellipsoid, Phantom};
pub use pose::{random_pose, PoseJitter};
