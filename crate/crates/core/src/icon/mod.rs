//! Inverse-consistent affine primitives, the TS/DS/TSC operators, stack
//! builders, per-leaf feature taps and the registration training loop.

mod generator;
mod io;
mod stack;
mod train;

pub use generator::{coefficients_to_matrix, AffineGenerator, FeatureSpec, COEFFS};
pub use io::{
    decode_affine_stack, encode_affine_stack, read_affine_stack, write_affine_stack, StackFile, AFFINE_STACK_KIND,
};
pub use stack::{
    build_affine_stack, build_multires_stack, ds, extract_reg_features, ic_affine, inverse_consistency_residual, ts,
    tsc, tsc_unchecked, FeatureTap, Prediction, PredictorKind, RegPredictor, RegStack, TapEntry, IC_TOLERANCE,
};
pub use train::{pair_gradient, pair_loss, stack_loss, train_registration, TrainConfig, TrainReport};
