//! Preprocessing plans, feature files and stores, and assembly of probe
//! inputs.

mod assemble;
mod extract;
mod feature;
mod plan;
mod preprocess;

pub use assemble::{assemble, gap_pool, reg_pair_layer, AssembleMode, AssembleSpec, AssembledExample};
pub use extract::{leaf_layer, reg_features, PatchIntensity, PATCH_INTENSITY, TOY_AFFINE};
pub use feature::{
    decode_feature, encode_feature, read_feature, write_feature, FeatureKey, FeatureMeta, FeatureRecord, FeatureStore,
    RecordSource, FEATURE_EXT, FEATURE_MAGIC, INDEX_FILE,
};
pub use plan::{Normalization, PreprocessPlan, DEFAULT_CROP_BOX};
pub use preprocess::{crop, crop_ranges, normalize, preprocess, Alignment, Preprocessed};
