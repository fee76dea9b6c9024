//! Canonical tensor-name schema.
//!
//! Weights of linear maps are stored `[in, out]` so a layer is `x · W + b`.
//! The fused attention input projection `attn.qkv.weight` is `[width, 3·width]`
//! with Q, K and V as consecutive column blocks.
//!
//! ```text
//! image.patch_embed.weight      [channels·patch², width]
//! image.class_token             [width]
//! image.pos_embed               [seq_len, width]
//! image.ln_pre.{weight,bias}    [width]
//! <tower>.block{k}.ln1.{weight,bias}        [width]
//! <tower>.block{k}.attn.qkv.{weight,bias}   [width, 3·width], [3·width]
//! <tower>.block{k}.attn.out.{weight,bias}   [width, width], [width]
//! <tower>.block{k}.ln2.{weight,bias}        [width]
//! <tower>.block{k}.mlp.fc1.{weight,bias}    [width, mlp], [mlp]
//! <tower>.block{k}.mlp.fc2.{weight,bias}    [mlp, width], [width]
//! image.ln_post.{weight,bias}   [width]
//! image.proj                    [width, embed_dim]
//! text.token_embed              [vocab, width]
//! text.pos_embed                [seq_len, width]
//! text.ln_final.{weight,bias}   [width]
//! text.proj                     [width, embed_dim]
//! logit_scale                   [1]
//! ```

use super::config::{EncoderConfig, ModelConfig};
use crate::error::Result;
use crate::numerics::{Rng, Tensor};
use crate::params::ParamSet;

pub const INIT_STD: f64 = 0.02;
pub const INIT_CLIP_STDS: f64 = 2.0;

/// How a tensor is filled by [`build_params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Ones,
    Zeros,
    LogitScale,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Which part of a model a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole<'a> {
    /// `block` index within `tower`, and the remaining name (`attn.qkv.weight`, ...).
    Block { tower: &'a str, block: usize, rest: &'a str },
    /// Any other tensor of `tower` (`patch_embed.weight`, `proj`, ...).
    Tower { tower: &'a str, rest: &'a str },
    LogitScale,
}

/// Splits a canonical name into its role.
pub fn classify(name: &str) -> Option<TensorRole<'_>> {
    if name == "logit_scale" {
        return Some(TensorRole::LogitScale);
    }
    let (tower, rest) = name.split_once('.')?;
    if tower != "image" && tower != "text" {
        return None;
    }
    if let Some(tail) = rest.strip_prefix("block") {
        let (idx, rest) = tail.split_once('.')?;
        let block = idx.parse().ok()?;
        return Some(TensorRole::Block { tower, block, rest });
    }
    Some(TensorRole::Tower { tower, rest })
}

pub fn block_name(tower: &str, block: usize, rest: &str) -> String {
    format!("{tower}.block{block}.{rest}")
}

fn push(out: &mut Vec<TensorSpec>, name: String, shape: Vec<usize>, init: Init) {
    out.push(TensorSpec { name, shape, init });
}

/// Per-block tensors, in schema order.
pub fn block_specs(enc: &EncoderConfig) -> Vec<(&'static str, Vec<usize>, Init)> {
    let (w, h) = (enc.width, enc.mlp_width());
    vec![
        ("ln1.weight", vec![w], Init::Ones),
        ("ln1.bias", vec![w], Init::Zeros),
        ("attn.qkv.weight", vec![w, 3 * w], Init::TruncNormal),
        ("attn.qkv.bias", vec![3 * w], Init::Zeros),
        ("attn.out.weight", vec![w, w], Init::TruncNormal),
        ("attn.out.bias", vec![w], Init::Zeros),
        ("ln2.weight", vec![w], Init::Ones),
        ("ln2.bias", vec![w], Init::Zeros),
        ("mlp.fc1.weight", vec![w, h], Init::TruncNormal),
        ("mlp.fc1.bias", vec![h], Init::Zeros),
        ("mlp.fc2.weight", vec![h, w], Init::TruncNormal),
        ("mlp.fc2.bias", vec![w], Init::Zeros),
    ]
}

fn tower_blocks(out: &mut Vec<TensorSpec>, tower: &str, enc: &EncoderConfig) {
    for k in 0..enc.depth {
        for (rest, shape, init) in block_specs(enc) {
            push(out, block_name(tower, k, rest), shape, init);
        }
    }
}

/// Every tensor of `cfg` with its shape and initializer.
pub fn schema(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let mut out = Vec::new();
    let img = &cfg.image;
    let w = img.width;
    let patch_dim = img.patch_dim().unwrap_or(0);
    push(&mut out, "image.patch_embed.weight".into(), vec![patch_dim, w], Init::TruncNormal);
    push(&mut out, "image.class_token".into(), vec![w], Init::TruncNormal);
    push(&mut out, "image.pos_embed".into(), vec![img.seq_len, w], Init::TruncNormal);
    push(&mut out, "image.ln_pre.weight".into(), vec![w], Init::Ones);
    push(&mut out, "image.ln_pre.bias".into(), vec![w], Init::Zeros);
    tower_blocks(&mut out, "image", img);
    push(&mut out, "image.ln_post.weight".into(), vec![w], Init::Ones);
    push(&mut out, "image.ln_post.bias".into(), vec![w], Init::Zeros);
    push(&mut out, "image.proj".into(), vec![w, cfg.embed_dim], Init::TruncNormal);

    let txt = &cfg.text;
    let w = txt.width;
    push(&mut out, "text.token_embed".into(), vec![cfg.vocab_size(), w], Init::TruncNormal);
    push(&mut out, "text.pos_embed".into(), vec![txt.seq_len, w], Init::TruncNormal);
    tower_blocks(&mut out, "text", txt);
    push(&mut out, "text.ln_final.weight".into(), vec![w], Init::Ones);
    push(&mut out, "text.ln_final.bias".into(), vec![w], Init::Zeros);
    push(&mut out, "text.proj".into(), vec![w, cfg.embed_dim], Init::TruncNormal);

    push(&mut out, "logit_scale".into(), vec![1], Init::LogitScale);
    out
}

/// Fills one tensor according to its initializer.
pub fn init_tensor(shape: &[usize], init: Init, cfg: &ModelConfig, rng: &mut Rng) -> Tensor<f32> {
    let numel: usize = shape.iter().product();
    let data = match init {
        Init::TruncNormal => (0..numel)
            .map(|_| rng.trunc_normal(INIT_STD, INIT_CLIP_STDS) as f32)
            .collect(),
        Init::Ones => vec![1.0; numel],
        Init::Zeros => vec![0.0; numel],
        Init::LogitScale => vec![(1.0 / cfg.init_temperature).ln() as f32; numel],
    };
    Tensor::new(shape.to_vec(), data).expect("schema shapes are non-empty")
}

/// Allocates and initializes every tensor of `cfg`.
///
/// Each tensor draws from its own stream forked by name, so a tensor's
/// initial value depends only on the seed and its name.
pub fn build_params(cfg: &ModelConfig, rng: &Rng) -> Result<ParamSet> {
    cfg.validate()?;
    Ok(schema(cfg)
        .into_iter()
        .map(|spec| {
            let mut stream = rng.fork(&spec.name);
            let t = init_tensor(&spec.shape, spec.init, cfg, &mut stream);
            (spec.name, t)
        })
        .collect())
}

/// Learnable scalars split the way architecture tables usually report them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    /// Whole image tower including its output projection.
    pub image: usize,
    /// Text tower excluding the token lookup table, including its projection.
    pub text: usize,
    pub token_embedding: usize,
    pub logit_scale: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.image + self.text + self.token_embedding + self.logit_scale
    }

    /// Total without the token lookup table (a gather, not a dense layer).
    pub fn dense_total(&self) -> usize {
        self.total() - self.token_embedding
    }
}

pub fn param_breakdown(cfg: &ModelConfig) -> ParamBreakdown {
    let mut b = ParamBreakdown {
        image: 0,
        text: 0,
        token_embedding: 0,
        logit_scale: 0,
    };
    for spec in schema(cfg) {
        let n: usize = spec.shape.iter().product();
        match spec.name.as_str() {
            "logit_scale" => b.logit_scale += n,
            "text.token_embed" => b.token_embedding += n,
            s if s.starts_with("image.") => b.image += n,
            _ => b.text += n,
        }
    }
    b
}

/// Exact number of learnable scalars in the canonical schema.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_breakdown(cfg).total()
}

/// Checks that `params` holds exactly the tensors of `cfg`'s schema.
pub fn check_schema(params: &ParamSet, cfg: &ModelConfig) -> Result<()> {
    use crate::error::Error;
    let specs = schema(cfg);
    for spec in &specs {
        match params.get(&spec.name) {
            None => {
                return Err(Error::Schema {
                    tensor: spec.name.clone(),
                    detail: format!("missing for config `{}`", cfg.name),
                })
            }
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(Error::Schema {
                    tensor: spec.name.clone(),
                    detail: format!("shape {:?}, expected {:?}", t.shape(), spec.shape),
                })
            }
            Some(_) => {}
        }
    }
    if params.len() != specs.len() {
        let extra = params
            .names()
            .find(|n| !specs.iter().any(|s| &s.name == *n))
            .cloned()
            .unwrap_or_default();
        return Err(Error::Schema {
            tensor: extra,
            detail: format!("not part of config `{}`", cfg.name),
        });
    }
    Ok(())
}
