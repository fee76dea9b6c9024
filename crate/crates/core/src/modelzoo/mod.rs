//! CLIP-style two-tower transformer family.
//!
//! Both towers are pre-norm transformers with learned positional embeddings
//! and bidirectional attention. The image tower pools its class token, the
//! text tower pools its final position. Each tower ends in a projection to
//! the shared embedding width.

mod config;
mod forward;
mod presets;
mod schema;

pub use config::{EncoderConfig, ModelConfig, TowerInput};
pub use forward::{embed, encode_image, encode_text, patchify, ModelVars};
pub use presets::{
    family, model, nano, vit_ref, FamilyPreset, CLIP_INIT_TEMPERATURE, NANO_MODELS,
    VIT_REF_MODELS,
};
pub use schema::{
    block_name, block_specs, build_params, check_schema, classify, init_tensor, param_breakdown,
    param_count, schema, Init, ParamBreakdown, TensorRole, TensorSpec, INIT_CLIP_STDS, INIT_STD,
};

#[cfg(test)]
mod tests;
