//! Inverse weight initialization: growing a trained small model into a
//! larger one.
//!
//! Depth is expanded first, block by block at the teacher's width, then
//! every tensor is widened on its own. The fused attention projection is
//! widened as three independent Q, K, V blocks so head boundaries survive.
//!
//! Random fill uses one stream per student tensor, keyed by name. A block
//! produced by the `duplicate` depth method reuses the stream of the block it
//! copies, so copies stay bit-identical after widening.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelzoo::{
    block_name, block_specs, check_schema, classify, schema, EncoderConfig, Init, ModelConfig,
    TensorRole, INIT_CLIP_STDS, INIT_STD,
};
use crate::numerics::{Rng, Tensor};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthMethod {
    /// Tile the teacher along every grown axis.
    Duplication,
    /// Linear resize along every grown axis, endpoints aligned.
    Interpolation,
    /// Teacher in the leading corner, the rest freshly initialized.
    Insertion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMethod {
    /// Teacher blocks first, new blocks after.
    Constant,
    /// Teacher block `j` at `floor(j·q/p)`, new blocks in the gaps.
    Interval,
    /// Interval placement, gaps copy the nearest preceding teacher block.
    Duplicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpandSpec {
    pub width_method: WidthMethod,
    pub depth_method: DepthMethod,
    /// Standard deviation of the truncated-normal fill for weights.
    pub fill_std: f64,
    pub seed: u64,
}

impl ExpandSpec {
    /// Insertion width with duplicate depth.
    pub fn new(seed: u64) -> Self {
        Self {
            width_method: WidthMethod::Insertion,
            depth_method: DepthMethod::Duplicate,
            fill_std: INIT_STD,
            seed,
        }
    }
}

/// What fills positions not covered by the teacher.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    /// Truncated normal at ±2σ.
    Random { std: f64 },
    Constant(f32),
}

impl Fill {
    fn for_init(init: Init, std: f64) -> Self {
        match init {
            Init::TruncNormal => Fill::Random { std },
            Init::Ones => Fill::Constant(1.0),
            Init::Zeros | Init::LogitScale => Fill::Constant(0.0),
        }
    }

    fn draw(self, rng: &mut Rng) -> f32 {
        match self {
            Fill::Random { std } => rng.trunc_normal(std, INIT_CLIP_STDS) as f32,
            Fill::Constant(c) => c,
        }
    }
}

fn check_target(op: &'static str, from: &[usize], to: &[usize]) -> Result<()> {
    if from.len() != to.len() || from.iter().zip(to).any(|(a, b)| b < a) {
        return Err(Error::Contract(format!(
            "{op}: target {to:?} is smaller than or not the rank of teacher {from:?}"
        )));
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Multi-index of flat position `flat` in `shape`.
fn unravel(mut flat: usize, shape: &[usize], out: &mut [usize]) {
    for ax in (0..shape.len()).rev() {
        out[ax] = flat % shape[ax];
        flat /= shape[ax];
    }
}

fn insertion(t: &Tensor<f32>, target: &[usize], fill: Fill, rng: &mut Rng) -> Tensor<f32> {
    let (src, st) = (t.shape(), strides(t.shape()));
    let n: usize = target.iter().product();
    let mut idx = vec![0; target.len()];
    let data = (0..n)
        .map(|flat| {
            unravel(flat, target, &mut idx);
            if idx.iter().zip(src).all(|(i, s)| i < s) {
                t.data()[idx.iter().zip(&st).map(|(i, s)| i * s).sum::<usize>()]
            } else {
                fill.draw(rng)
            }
        })
        .collect();
    Tensor::new(target.to_vec(), data).expect("valid target shape")
}

fn duplication(t: &Tensor<f32>, target: &[usize]) -> Result<Tensor<f32>> {
    let (src, st) = (t.shape(), strides(t.shape()));
    if let Some(ax) = (0..src.len()).find(|&a| !target[a].is_multiple_of(src[a])) {
        return Err(Error::Contract(format!(
            "duplication needs integer multiples, axis {ax}: {} → {}",
            src[ax], target[ax]
        )));
    }
    let n: usize = target.iter().product();
    let mut idx = vec![0; target.len()];
    let data = (0..n)
        .map(|flat| {
            unravel(flat, target, &mut idx);
            t.data()[idx.iter().zip(src).zip(&st).map(|((i, s), k)| (i % s) * k).sum::<usize>()]
        })
        .collect();
    Tensor::new(target.to_vec(), data)
}

/// Resizes one axis by linear interpolation with aligned endpoints.
fn resize_axis(data: &[f64], shape: &[usize], axis: usize, to: usize) -> (Vec<f64>, Vec<usize>) {
    let from = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * to * inner];
    for o in 0..outer {
        for i in 0..to {
            let x = if to == 1 || from == 1 {
                0.0
            } else {
                i as f64 * (from - 1) as f64 / (to - 1) as f64
            };
            let lo = (x.floor() as usize).min(from - 1);
            let hi = (lo + 1).min(from - 1);
            let frac = x - lo as f64;
            for k in 0..inner {
                let a = data[(o * from + lo) * inner + k];
                let b = data[(o * from + hi) * inner + k];
                out[(o * to + i) * inner + k] = if frac == 0.0 { a } else { a + (b - a) * frac };
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = to;
    (out, new_shape)
}

fn interpolation(t: &Tensor<f32>, target: &[usize]) -> Tensor<f32> {
    let mut data: Vec<f64> = t.data().iter().map(|&v| f64::from(v)).collect();
    let mut shape = t.shape().to_vec();
    for (axis, &to) in target.iter().enumerate() {
        if shape[axis] != to {
            (data, shape) = resize_axis(&data, &shape, axis, to);
        }
    }
    Tensor::new(shape, data.into_iter().map(|v| v as f32).collect()).expect("valid target shape")
}

/// Grows `teacher` to `target` along every axis where the target is larger.
///
/// A target equal to the teacher shape returns an exact copy for every method.
pub fn expand_width(
    teacher: &Tensor<f32>,
    target: &[usize],
    method: WidthMethod,
    fill: Fill,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    check_target("expand_width", teacher.shape(), target)?;
    if teacher.shape() == target {
        return Ok(teacher.clone());
    }
    match method {
        WidthMethod::Insertion => Ok(insertion(teacher, target, fill, rng)),
        WidthMethod::Duplication => duplication(teacher, target),
        WidthMethod::Interpolation => Ok(interpolation(teacher, target)),
    }
}

/// Where a student block comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSource {
    Teacher(usize),
    /// Copy of an earlier student block.
    Duplicate(usize),
    Random,
}

/// Source of every student block of one tower.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMapping {
    pub sources: Vec<LayerSource>,
}

impl LayerMapping {
    /// Mapping of `p` teacher blocks into `q` student blocks.
    pub fn new(p: usize, q: usize, method: DepthMethod) -> Result<Self> {
        if p == 0 || q < p {
            return Err(Error::Contract(format!(
                "depth expansion needs 1 ≤ p ≤ q, got p={p}, q={q}"
            )));
        }
        let mut sources = vec![LayerSource::Random; q];
        match method {
            DepthMethod::Constant => {
                for (j, s) in sources.iter_mut().take(p).enumerate() {
                    *s = LayerSource::Teacher(j);
                }
            }
            DepthMethod::Interval | DepthMethod::Duplicate => {
                for j in 0..p {
                    sources[j * q / p] = LayerSource::Teacher(j);
                }
                if method == DepthMethod::Duplicate {
                    let mut last = 0;
                    for (k, s) in sources.iter_mut().enumerate() {
                        match s {
                            LayerSource::Teacher(_) => last = k,
                            _ => *s = LayerSource::Duplicate(last),
                        }
                    }
                }
            }
        }
        Ok(Self { sources })
    }

    /// Student index holding teacher block `j`.
    pub fn student_index(&self, j: usize) -> Option<usize> {
        self.sources
            .iter()
            .position(|s| *s == LayerSource::Teacher(j))
    }

    /// Student index whose random stream block `k` shares.
    fn stream_owner(&self, k: usize) -> usize {
        match self.sources[k] {
            LayerSource::Duplicate(src) => src,
            _ => k,
        }
    }
}

/// Depth mapping of both towers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMapping {
    pub image: LayerMapping,
    pub text: LayerMapping,
}

impl ModelMapping {
    pub fn new(teacher: &ModelConfig, student: &ModelConfig, method: DepthMethod) -> Result<Self> {
        Ok(Self {
            image: LayerMapping::new(teacher.image.depth, student.image.depth, method)?,
            text: LayerMapping::new(teacher.text.depth, student.text.depth, method)?,
        })
    }

    pub fn tower(&self, tower: &str) -> &LayerMapping {
        if tower == "image" {
            &self.image
        } else {
            &self.text
        }
    }
}

/// Tensors of one block keyed by their name inside the block.
pub type Block = BTreeMap<String, Tensor<f32>>;

/// Expands `p` teacher blocks into `q` blocks at the teacher's width.
///
/// New blocks use the model initializer with weights drawn at `fill_std`.
pub fn expand_depth(
    blocks: &[Block],
    q: usize,
    method: DepthMethod,
    enc: &EncoderConfig,
    fill_std: f64,
    rng: &Rng,
) -> Result<(Vec<Block>, LayerMapping)> {
    let mapping = LayerMapping::new(blocks.len(), q, method)?;
    let mut out: Vec<Block> = Vec::with_capacity(q);
    for (k, src) in mapping.sources.iter().enumerate() {
        let block = match *src {
            LayerSource::Teacher(j) => blocks[j].clone(),
            LayerSource::Duplicate(k2) => out[k2].clone(),
            LayerSource::Random => {
                let mut stream = rng.fork(&format!("depth.block{k}"));
                block_specs(enc)
                    .into_iter()
                    .map(|(rest, shape, init)| {
                        let fill = Fill::for_init(init, fill_std);
                        let n = shape.iter().product();
                        let data = (0..n).map(|_| fill.draw(&mut stream)).collect();
                        (rest.to_string(), Tensor::new(shape, data).expect("non-empty"))
                    })
                    .collect()
            }
        };
        out.push(block);
    }
    Ok((out, mapping))
}

fn is_qkv(rest: &str) -> bool {
    rest == "attn.qkv.weight" || rest == "attn.qkv.bias"
}

/// Splits the fused QKV tensor into its three blocks along the last axis.
fn split_qkv(t: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let cols = t.last_dim();
    let w = cols / 3;
    let rows = t.numel() / cols;
    (0..3)
        .map(|part| {
            let mut data = Vec::with_capacity(rows * w);
            for r in 0..rows {
                data.extend_from_slice(&t.data()[r * cols + part * w..r * cols + (part + 1) * w]);
            }
            let mut shape = t.shape().to_vec();
            *shape.last_mut().expect("rank ≥ 1") = w;
            Tensor::new(shape, data).expect("non-empty")
        })
        .collect()
}

fn join_qkv(parts: &[Tensor<f32>]) -> Tensor<f32> {
    let w = parts[0].last_dim();
    let rows = parts[0].numel() / w;
    let mut data = Vec::with_capacity(rows * w * 3);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = parts[0].shape().to_vec();
    *shape.last_mut().expect("rank ≥ 1") = 3 * w;
    Tensor::new(shape, data).expect("non-empty")
}

/// Widens one tensor, splitting QKV into its three blocks.
fn widen(
    name: &str,
    rest: &str,
    t: &Tensor<f32>,
    target: &[usize],
    fill: Fill,
    spec: &ExpandSpec,
    stream_name: &str,
) -> Result<Tensor<f32>> {
    let root = Rng::new(spec.seed);
    let tag = |e: Error| Error::Schema {
        tensor: name.to_string(),
        detail: e.to_string(),
    };
    if is_qkv(rest) && t.shape() != target {
        let mut sub_target = target.to_vec();
        *sub_target.last_mut().expect("rank ≥ 1") /= 3;
        let parts = split_qkv(t)
            .iter()
            .zip(["q", "k", "v"])
            .map(|(p, part)| {
                let mut rng = root.fork(&format!("{stream_name}.{part}"));
                expand_width(p, &sub_target, spec.width_method, fill, &mut rng).map_err(tag)
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(join_qkv(&parts));
    }
    let mut rng = root.fork(stream_name);
    expand_width(t, target, spec.width_method, fill, &mut rng).map_err(tag)
}

fn check_compatible(teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
    let fail = |msg: String| {
        Err(Error::Contract(format!(
            "cannot expand `{}` into `{}`: {msg}",
            teacher.name, student.name
        )))
    };
    for (tower, t, s) in [
        ("image", &teacher.image, &student.image),
        ("text", &teacher.text, &student.text),
    ] {
        if s.width < t.width || s.depth < t.depth {
            return fail(format!("{tower} tower shrinks"));
        }
        if s.seq_len != t.seq_len || s.input != t.input {
            return fail(format!("{tower} tower input or token count differs"));
        }
        if s.mlp_ratio != t.mlp_ratio {
            return fail(format!("{tower} tower mlp ratio differs"));
        }
    }
    if student.embed_dim < teacher.embed_dim {
        return fail("embed_dim shrinks".into());
    }
    Ok(())
}

/// Initializes `student` from a trained `teacher`.
pub fn expand_model(
    teacher: &ParamSet,
    teacher_cfg: &ModelConfig,
    student_cfg: &ModelConfig,
    spec: &ExpandSpec,
) -> Result<ParamSet> {
    teacher_cfg.validate()?;
    student_cfg.validate()?;
    check_schema(teacher, teacher_cfg)?;
    check_compatible(teacher_cfg, student_cfg)?;
    let mapping = ModelMapping::new(teacher_cfg, student_cfg, spec.depth_method)?;
    let root = Rng::new(spec.seed);

    // Depth first, at teacher width.
    let mut deep: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (tower, enc) in [("image", &teacher_cfg.image), ("text", &teacher_cfg.text)] {
        let blocks: Vec<Block> = (0..enc.depth)
            .map(|j| {
                block_specs(enc)
                    .into_iter()
                    .map(|(rest, _, _)| {
                        let t = teacher.get(&block_name(tower, j, rest)).expect("schema checked");
                        (rest.to_string(), t.clone())
                    })
                    .collect()
            })
            .collect();
        let q = mapping.tower(tower).sources.len();
        let (grown, _) = expand_depth(
            &blocks,
            q,
            spec.depth_method,
            enc,
            spec.fill_std,
            &root.fork(&format!("{tower}.depth")),
        )?;
        for (k, block) in grown.into_iter().enumerate() {
            for (rest, t) in block {
                deep.insert(block_name(tower, k, &rest), t);
            }
        }
    }

    // Then width, tensor by tensor.
    let mut out = ParamSet::new();
    for ts in schema(student_cfg) {
        let role = classify(&ts.name).expect("schema names classify");
        let fill = Fill::for_init(ts.init, spec.fill_std);
        let t = match role {
            TensorRole::LogitScale => teacher.get(&ts.name).expect("schema checked").clone(),
            TensorRole::Tower { rest, .. } => {
                let src = teacher.get(&ts.name).expect("schema checked");
                widen(&ts.name, rest, src, &ts.shape, fill, spec, &ts.name)?
            }
            TensorRole::Block { tower, block, rest } => {
                let src = &deep[&ts.name];
                let owner = mapping.tower(tower).stream_owner(block);
                let stream = block_name(tower, owner, rest);
                widen(&ts.name, rest, src, &ts.shape, fill, spec, &stream)?
            }
        };
        out.insert(ts.name, t);
    }
    Ok(out)
}

/// Leading corner of `t` with `shape`.
fn leading(t: &Tensor<f32>, shape: &[usize]) -> Result<Tensor<f32>> {
    check_target("extract_submodel", shape, t.shape())?;
    let st = strides(t.shape());
    let n: usize = shape.iter().product();
    let mut idx = vec![0; shape.len()];
    let data = (0..n)
        .map(|flat| {
            unravel(flat, shape, &mut idx);
            t.data()[idx.iter().zip(&st).map(|(i, s)| i * s).sum::<usize>()]
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Teacher-shaped slice of every student tensor at the insertion coordinates.
pub fn extract_submodel(
    student: &ParamSet,
    teacher_cfg: &ModelConfig,
    mapping: &ModelMapping,
) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for ts in schema(teacher_cfg) {
        let src_name = match classify(&ts.name).expect("schema names classify") {
            TensorRole::Block { tower, block, rest } => {
                let m = mapping.tower(tower);
                let k = m.student_index(block).ok_or_else(|| Error::Schema {
                    tensor: ts.name.clone(),
                    detail: "teacher block has no place in the mapping".into(),
                })?;
                block_name(tower, k, rest)
            }
            _ => ts.name.clone(),
        };
        let src = student.get(&src_name).ok_or_else(|| Error::Schema {
            tensor: src_name.clone(),
            detail: "missing from student".into(),
        })?;
        let fused = matches!(classify(&ts.name), Some(TensorRole::Block { rest, .. }) if is_qkv(rest));
        let t = if fused {
            let mut sub = ts.shape.clone();
            *sub.last_mut().expect("rank ≥ 1") /= 3;
            let parts = split_qkv(src)
                .iter()
                .map(|p| leading(p, &sub))
                .collect::<Result<Vec<_>>>()?;
            join_qkv(&parts)
        } else {
            leading(src, &ts.shape)?
        };
        out.insert(ts.name, t);
    }
    Ok(out)
}
