//! Model families.
//!
//! The `vit_ref` family mirrors the CLIP ViT/16 models at 224² resolution with
//! a 77-token text context and is only used for analytic parameter and MAC
//! counting. The `nano` family is small enough to train on a CPU.

use super::config::{EncoderConfig, ModelConfig, TowerInput};
use super::schema::param_count;
use crate::error::{Error, Result};

pub const CLIP_INIT_TEMPERATURE: f64 = 0.07;

pub const REF_IMAGE_SIZE: usize = 224;
pub const REF_PATCH: usize = 16;
pub const REF_VOCAB: usize = 49408;
pub const REF_CONTEXT: usize = 77;
pub const REF_HEAD_DIM: usize = 64;

pub const NANO_IMAGE_SIZE: usize = 16;
pub const NANO_PATCH: usize = 4;
pub const NANO_VOCAB: usize = 64;
pub const NANO_CONTEXT: usize = 8;
pub const NANO_HEAD_DIM: usize = 16;
pub const NANO_CAPTIONS: usize = 4;

fn image_tower(
    width: usize,
    depth: usize,
    head_dim: usize,
    image_size: usize,
    patch: usize,
    channels: usize,
) -> EncoderConfig {
    EncoderConfig {
        width,
        depth,
        head_dim,
        seq_len: (image_size / patch).pow(2) + 1,
        mlp_ratio: 4,
        input: TowerInput::Image {
            image_size,
            patch_size: patch,
            channels,
        },
    }
}

fn text_tower(width: usize, depth: usize, head_dim: usize, vocab: usize, ctx: usize) -> EncoderConfig {
    EncoderConfig {
        width,
        depth,
        head_dim,
        seq_len: ctx,
        mlp_ratio: 4,
        input: TowerInput::Text { vocab_size: vocab },
    }
}

/// Reference CLIP ViT/16 model. The shared embedding equals the text width.
pub fn vit_ref(name: &str, img: (usize, usize), txt: (usize, usize)) -> ModelConfig {
    ModelConfig {
        name: name.to_string(),
        image: image_tower(img.0, img.1, REF_HEAD_DIM, REF_IMAGE_SIZE, REF_PATCH, 3),
        text: text_tower(txt.0, txt.1, REF_HEAD_DIM, REF_VOCAB, REF_CONTEXT),
        embed_dim: txt.0,
        captions_per_image: 4,
        init_temperature: CLIP_INIT_TEMPERATURE,
    }
}

/// Desk-scale model with identical width and depth in both towers.
pub fn nano(name: &str, width: usize, depth: usize) -> ModelConfig {
    ModelConfig {
        name: name.to_string(),
        image: image_tower(width, depth, NANO_HEAD_DIM, NANO_IMAGE_SIZE, NANO_PATCH, 1),
        text: text_tower(width, depth, NANO_HEAD_DIM, NANO_VOCAB, NANO_CONTEXT),
        embed_dim: width,
        captions_per_image: NANO_CAPTIONS,
        init_temperature: CLIP_INIT_TEMPERATURE,
    }
}

/// Every named single model.
pub fn model(name: &str) -> Result<ModelConfig> {
    let cfg = match name {
        "vit_t16_ref" => vit_ref(name, (192, 12), (256, 12)),
        "vit_c16_ref" => vit_ref(name, (256, 12), (320, 12)),
        "vit_s16_ref" => vit_ref(name, (384, 12), (384, 12)),
        "vit_m16_ref" => vit_ref(name, (512, 12), (448, 12)),
        "vit_b16_ref" => vit_ref(name, (768, 12), (512, 12)),
        "vit_xb16_ref" => vit_ref(name, (1024, 12), (512, 12)),
        "vit_l16_ref" => vit_ref(name, (1024, 24), (768, 12)),
        "nano_xs" => nano(name, 16, 1),
        "nano_t" => nano(name, 32, 2),
        "nano_s" => nano(name, 64, 2),
        "nano_m" => nano(name, 96, 3),
        "nano_b" => nano(name, 128, 4),
        other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
    };
    Ok(cfg)
}

/// Ordered model family, smallest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilyPreset {
    pub name: String,
    pub models: Vec<ModelConfig>,
}

impl FamilyPreset {
    pub fn new(name: &str, models: Vec<ModelConfig>) -> Result<Self> {
        for pair in models.windows(2) {
            if param_count(&pair[1]) <= param_count(&pair[0]) {
                return Err(Error::Config(format!(
                    "family `{name}`: `{}` is not larger than `{}`",
                    pair[1].name, pair[0].name
                )));
            }
        }
        Ok(Self {
            name: name.to_string(),
            models,
        })
    }

    pub fn get(&self, model: &str) -> Option<&ModelConfig> {
        self.models.iter().find(|m| m.name == model)
    }
}

pub const VIT_REF_MODELS: [&str; 7] = [
    "vit_t16_ref",
    "vit_c16_ref",
    "vit_s16_ref",
    "vit_m16_ref",
    "vit_b16_ref",
    "vit_xb16_ref",
    "vit_l16_ref",
];

pub const NANO_MODELS: [&str; 5] = ["nano_xs", "nano_t", "nano_s", "nano_m", "nano_b"];

pub fn family(name: &str) -> Result<FamilyPreset> {
    let names: &[&str] = match name {
        "vit_ref" => &VIT_REF_MODELS,
        "nano" => &NANO_MODELS,
        other => return Err(Error::Config(format!("unknown family preset `{other}`"))),
    };
    FamilyPreset::new(name, names.iter().map(|n| model(n)).collect::<Result<_>>()?)
}
