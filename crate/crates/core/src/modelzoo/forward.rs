use std::collections::BTreeMap;

use super::config::{EncoderConfig, ModelConfig, TowerInput};
use super::schema::block_name;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::params::ParamSet;

/// Tape handles for every tensor of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    vars: BTreeMap<String, Var>,
}

impl ModelVars {
    /// Places `params` on `tape`, as leaves when `trainable`, else as constants.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &ParamSet, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let t = t.cast::<T>();
                let v = if trainable { tape.leaf(t) } else { tape.constant(t) };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn from_map(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Schema {
            tensor: name.to_string(),
            detail: "missing from parameter set".into(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Multi-head self-attention over `x: [batch·seq, width]`, no masking.
fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ModelVars,
    prefix: &str,
    x: Var,
    batch: usize,
    enc: &EncoderConfig,
) -> Result<Var> {
    let (s, w, d) = (enc.seq_len, enc.width, enc.head_dim);
    let h = enc.heads();
    let qkv = linear(
        tape,
        x,
        p.get(&format!("{prefix}.attn.qkv.weight"))?,
        p.get(&format!("{prefix}.attn.qkv.bias"))?,
    )?;
    let mut heads = Vec::with_capacity(3);
    for i in 0..3 {
        let part = tape.slice(qkv, 1, i * w, (i + 1) * w)?;
        let part = tape.reshape(part, &[batch, s, h, d])?;
        let part = tape.permute(part, &[0, 2, 1, 3])?;
        heads.push(tape.reshape(part, &[batch * h, s, d])?);
    }
    let scores = tape.matmul_t(heads[0], heads[1], false, true)?;
    let scores = tape.scale(scores, T::lit(1.0 / (d as f64).sqrt()));
    let attn = tape.softmax(scores);
    let ctx = tape.matmul(attn, heads[2])?;
    let ctx = tape.reshape(ctx, &[batch, h, s, d])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[batch * s, w])?;
    linear(
        tape,
        ctx,
        p.get(&format!("{prefix}.attn.out.weight"))?,
        p.get(&format!("{prefix}.attn.out.bias"))?,
    )
}

/// Pre-norm residual block.
fn block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ModelVars,
    tower: &str,
    k: usize,
    x: Var,
    batch: usize,
    enc: &EncoderConfig,
) -> Result<Var> {
    let name = |rest: &str| block_name(tower, k, rest);
    let prefix = format!("{tower}.block{k}");
    let h = tape.layer_norm(x, p.get(&name("ln1.weight"))?, p.get(&name("ln1.bias"))?)?;
    let a = attention(tape, p, &prefix, h, batch, enc)?;
    let x = tape.add(x, a)?;
    let h = tape.layer_norm(x, p.get(&name("ln2.weight"))?, p.get(&name("ln2.bias"))?)?;
    let h = linear(tape, h, p.get(&name("mlp.fc1.weight"))?, p.get(&name("mlp.fc1.bias"))?)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, p.get(&name("mlp.fc2.weight"))?, p.get(&name("mlp.fc2.bias"))?)?;
    tape.add(x, h)
}

/// Adds `pos: [seq, width]` to every sequence of `x: [batch, seq, width]`.
fn add_positions<T: Scalar>(tape: &mut Tape<T>, x: Var, pos: Var, batch: usize) -> Result<Var> {
    let tiled = tape.repeat(pos, batch)?;
    tape.add(x, tiled)
}

/// Token at position `index` of every sequence: `[batch·seq, width]` → `[batch, width]`.
fn select_position<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    batch: usize,
    enc: &EncoderConfig,
    index: usize,
) -> Result<Var> {
    let x = tape.reshape(x, &[batch, enc.seq_len, enc.width])?;
    let x = tape.slice(x, 1, index, index + 1)?;
    tape.reshape(x, &[batch, enc.width])
}

/// Cuts `[batch, channels, size, size]` images into `[batch·patches, channels·patch²]` rows.
pub fn patchify<T: Scalar>(images: &Tensor<T>, enc: &EncoderConfig) -> Result<Tensor<T>> {
    let TowerInput::Image {
        image_size,
        patch_size,
        channels,
    } = enc.input
    else {
        return Err(Error::Contract("patchify needs an image tower".into()));
    };
    let shape = images.shape();
    if shape.len() != 4 || shape[1..] != [channels, image_size, image_size] {
        return Err(Error::dim(
            "encode_image",
            format!(
                "images {shape:?}, expected [batch, {channels}, {image_size}, {image_size}]"
            ),
        ));
    }
    let batch = shape[0];
    let grid = image_size / patch_size;
    let plane = image_size * image_size;
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for b in 0..batch {
        for gy in 0..grid {
            for gx in 0..grid {
                for c in 0..channels {
                    let base = b * channels * plane + c * plane;
                    for iy in 0..patch_size {
                        let row = base + (gy * patch_size + iy) * image_size + gx * patch_size;
                        out.extend_from_slice(&src[row..row + patch_size]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch * grid * grid, channels * patch_size * patch_size], out)
}

/// Image features `[batch, embed_dim]` before normalization.
pub fn encode_image<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ModelVars,
    cfg: &ModelConfig,
    images: &Tensor<T>,
) -> Result<Var> {
    let enc = &cfg.image;
    let patches = patchify(images, enc)?;
    let batch = images.shape()[0];
    let n_patches = enc.seq_len - 1;
    let w = enc.width;

    let patches = tape.constant(patches);
    let x = tape.matmul(patches, p.get("image.patch_embed.weight")?)?;
    let x = tape.reshape(x, &[batch, n_patches, w])?;
    let cls = tape.reshape(p.get("image.class_token")?, &[1, w])?;
    let cls = tape.repeat(cls, batch)?;
    let x = tape.concat(&[cls, x], 1)?;
    let x = add_positions(tape, x, p.get("image.pos_embed")?, batch)?;
    let mut x = tape.reshape(x, &[batch * enc.seq_len, w])?;
    x = tape.layer_norm(x, p.get("image.ln_pre.weight")?, p.get("image.ln_pre.bias")?)?;
    for k in 0..enc.depth {
        x = block(tape, p, "image", k, x, batch, enc)?;
    }
    let pooled = select_position(tape, x, batch, enc, 0)?;
    let pooled = tape.layer_norm(
        pooled,
        p.get("image.ln_post.weight")?,
        p.get("image.ln_post.bias")?,
    )?;
    tape.matmul(pooled, p.get("image.proj")?)
}

/// Text features `[batch, embed_dim]` from the final token position.
///
/// `tokens` holds `batch · seq_len` ids, row-major.
pub fn encode_text<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ModelVars,
    cfg: &ModelConfig,
    tokens: &[u32],
) -> Result<Var> {
    let enc = &cfg.text;
    let vocab = cfg.vocab_size();
    if tokens.is_empty() || !tokens.len().is_multiple_of(enc.seq_len) {
        return Err(Error::dim(
            "encode_text",
            format!("{} tokens is not a multiple of seq_len {}", tokens.len(), enc.seq_len),
        ));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Contract(format!(
            "token {bad} out of range for vocab {vocab}"
        )));
    }
    let batch = tokens.len() / enc.seq_len;
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let x = tape.embedding(p.get("text.token_embed")?, &ids)?;
    let x = tape.reshape(x, &[batch, enc.seq_len, enc.width])?;
    let x = add_positions(tape, x, p.get("text.pos_embed")?, batch)?;
    let mut x = tape.reshape(x, &[batch * enc.seq_len, enc.width])?;
    for k in 0..enc.depth {
        x = block(tape, p, "text", k, x, batch, enc)?;
    }
    let pooled = select_position(tape, x, batch, enc, enc.seq_len - 1)?;
    let pooled = tape.layer_norm(
        pooled,
        p.get("text.ln_final.weight")?,
        p.get("text.ln_final.bias")?,
    )?;
    tape.matmul(pooled, p.get("text.proj")?)
}

/// Inference-only features `(image [B, E], text [B·M, E])` for a frozen model.
pub fn embed(
    params: &ParamSet,
    cfg: &ModelConfig,
    images: &Tensor<f32>,
    tokens: &[u32],
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut tape = Tape::<f32>::new();
    let vars = ModelVars::bind(&mut tape, params, false);
    let v = encode_image(&mut tape, &vars, cfg, images)?;
    let t = encode_text(&mut tape, &vars, cfg, tokens)?;
    Ok((tape.value(v).clone(), tape.value(t).clone()))
}
