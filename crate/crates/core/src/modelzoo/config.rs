use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What feeds the token sequence of an encoder tower.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TowerInput {
    Image {
        image_size: usize,
        patch_size: usize,
        channels: usize,
    },
    Text {
        vocab_size: usize,
    },
}

/// One pre-norm transformer tower.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub width: usize,
    pub depth: usize,
    pub head_dim: usize,
    /// Token count, including the class token for image towers.
    pub seq_len: usize,
    pub mlp_ratio: usize,
    pub input: TowerInput,
}

impl EncoderConfig {
    pub fn heads(&self) -> usize {
        self.width / self.head_dim
    }

    pub fn mlp_width(&self) -> usize {
        self.width * self.mlp_ratio
    }

    /// Number of image patches (image towers only).
    pub fn patches(&self) -> Option<usize> {
        match self.input {
            TowerInput::Image {
                image_size,
                patch_size,
                ..
            } => Some((image_size / patch_size).pow(2)),
            TowerInput::Text { .. } => None,
        }
    }

    /// Flattened patch length `channels · patch²` (image towers only).
    pub fn patch_dim(&self) -> Option<usize> {
        match self.input {
            TowerInput::Image {
                patch_size,
                channels,
                ..
            } => Some(channels * patch_size * patch_size),
            TowerInput::Text { .. } => None,
        }
    }

    pub fn validate(&self, tower: &str) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("{tower} tower: {msg}")));
        if self.depth == 0 {
            return fail("depth must be ≥ 1".into());
        }
        if self.head_dim == 0 || self.width == 0 || !self.width.is_multiple_of(self.head_dim) {
            return fail(format!(
                "width {} not divisible by head_dim {}",
                self.width, self.head_dim
            ));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be ≥ 1".into());
        }
        match self.input {
            TowerInput::Image {
                image_size,
                patch_size,
                channels,
            } => {
                if patch_size == 0 || channels == 0 || image_size % patch_size != 0 {
                    return fail(format!(
                        "image_size {image_size} not divisible by patch_size {patch_size}"
                    ));
                }
                let expected = (image_size / patch_size).pow(2) + 1;
                if self.seq_len != expected {
                    return fail(format!(
                        "seq_len {} != patches² + 1 = {expected}",
                        self.seq_len
                    ));
                }
            }
            TowerInput::Text { vocab_size } => {
                if vocab_size == 0 || self.seq_len == 0 {
                    return fail("vocab_size and seq_len must be ≥ 1".into());
                }
            }
        }
        Ok(())
    }
}

/// A two-tower contrastive model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub image: EncoderConfig,
    pub text: EncoderConfig,
    pub embed_dim: usize,
    pub captions_per_image: usize,
    /// Initial softmax temperature τ₀; the learnable logit scale starts at ln(1/τ₀).
    pub init_temperature: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.image.input, TowerInput::Image { .. }) {
            return Err(Error::Config(format!("{}: image tower needs image input", self.name)));
        }
        if !matches!(self.text.input, TowerInput::Text { .. }) {
            return Err(Error::Config(format!("{}: text tower needs token input", self.name)));
        }
        self.image.validate("image")?;
        self.text.validate("text")?;
        if self.embed_dim == 0 {
            return Err(Error::Config(format!("{}: embed_dim must be ≥ 1", self.name)));
        }
        if self.captions_per_image == 0 {
            return Err(Error::Config(format!(
                "{}: captions_per_image must be ≥ 1",
                self.name
            )));
        }
        if !(self.init_temperature > 0.0 && self.init_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "{}: init_temperature must be positive",
                self.name
            )));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        match self.text.input {
            TowerInput::Text { vocab_size } => vocab_size,
            TowerInput::Image { .. } => 0,
        }
    }

    /// `(channels, image_size)` of the image tower.
    pub fn image_geometry(&self) -> (usize, usize) {
        match self.image.input {
            TowerInput::Image {
                channels,
                image_size,
                ..
            } => (channels, image_size),
            TowerInput::Text { .. } => (0, 0),
        }
    }
}
