//! Spatial-temporal deformable attention.
//!
//! Each query samples `K` points per (frame, level) around its reference
//! point, for each of `M` heads, and blends the sampled value vectors with
//! attention weights normalized jointly over frames, levels and points.

mod attention;
mod features;
mod sampling;

pub use attention::{
    predict_attention_weights, predict_offsets, stda_backward, stda_forward, StdaCache, StdaGradients, StdaInputGrads,
    StdaParams, StdaShape,
};
pub use features::{LevelShape, MultiScaleFeatures, QueryBatch, TokenFeatures};
pub use sampling::{bilinear_sample, bilinear_sample_backward, normalize_to_level};

#[cfg(test)]
mod tests;
