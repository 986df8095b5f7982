//! NNGP kernels: empirical (random-feature) and exact oracles.

mod conv_exact;
mod exact;
mod features;

pub use conv_exact::{conv_nngp_diagonal, conv_nngp_entry, exact_conv_nngp, ConvGpDiagonal};
pub use exact::{exact_fc_kernels, exact_nngp_fc, exact_ntk_fc, relu_arccos_step, FcKernels};
pub use features::{
    feature_map_tape, gram, gram_tape, random_feature_map, FeatureMatrix, Provenance,
    TrackedFeatures,
};
