//! Contrastive task loss, inverse feature distillation, and α calibration.
//!
//! The `*_on` functions build losses on a [`Tape`] so they can be trained
//! through. The plain functions evaluate the same graphs on a scratch `f64`
//! tape, which keeps one implementation for both uses.
//!
//! Conventions:
//! - features are `[N, d]` images and `[N·M, d]` captions grouped by image,
//!   so caption row `i·M + j` belongs to image `i`;
//! - losses are means over their positive terms, not sums;
//! - distillation compares post-projection, pre-normalization features and
//!   averages the per-sample squared L2 residual over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar, Tape, Tensor, Var};
use crate::params::ParamSet;

/// Largest logit multiplier the learnable temperature may reach.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// Default target ratio `l_ifd / l_task` for [`calibrate_alpha`].
pub const DEFAULT_IFD_RATIO: f64 = 0.1;

/// Below this raw distillation value the features are considered matched.
pub const CALIBRATION_FLOOR: f64 = 1e-12;

const UNIT_NORM_TOL: f64 = 1e-5;

fn rows_cols(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim("contrastive", format!("{what} must be rank 2, got {shape:?}"))),
    }
}

/// Number of captions per image implied by the two feature matrices.
fn captions_per_image(image: &[usize], text: &[usize]) -> Result<usize> {
    let (n, d) = rows_cols(image, "image features")?;
    let (nm, d2) = rows_cols(text, "text features")?;
    if d != d2 || nm % n != 0 {
        return Err(Error::dim(
            "contrastive",
            format!("image {image:?} and text {text:?} are not N×d and N·M×d"),
        ));
    }
    Ok(nm / n)
}

/// Both contrastive directions from unit-norm features.
///
/// `scale` is the one-element logit multiplier `1/τ`. Returns `(t2v, v2t)`.
pub fn contrastive_on<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    text: Var,
    scale: Var,
) -> Result<(Var, Var)> {
    let m = captions_per_image(tape.shape(image), tape.shape(text))?;
    let n = tape.shape(image)[0];
    let nm = n * m;

    // [N·M, N]: caption rows against every image.
    let sims = tape.matmul_t(text, image, false, true)?;
    let logits = tape.scale_by(sims, scale)?;
    let t2v_log = tape.log_softmax(logits);
    let mut mask = vec![T::zero(); nm * n];
    for r in 0..nm {
        mask[r * n + r / m] = T::one();
    }
    let mask = tape.constant(Tensor::new(vec![nm, n], mask)?);
    let picked = tape.mul(t2v_log, mask)?;
    let total = tape.sum(picked);
    let t2v = tape.scale(total, T::lit(-1.0 / nm as f64));

    // [N, N·M]: each image against every caption, M positives per row.
    let logits_t = tape.transpose(logits)?;
    let v2t_log = tape.log_softmax(logits_t);
    let mut mask = vec![T::zero(); n * nm];
    for i in 0..n {
        for j in 0..m {
            mask[i * nm + i * m + j] = T::lit(1.0 / m as f64);
        }
    }
    let mask = tape.constant(Tensor::new(vec![n, nm], mask)?);
    let picked = tape.mul(v2t_log, mask)?;
    let total = tape.sum(picked);
    let v2t = tape.scale(total, T::lit(-1.0 / n as f64));
    Ok((t2v, v2t))
}

/// Symmetric task loss `(t2v + v2t) / 2` on the tape.
pub fn task_loss_on<T: Scalar>(tape: &mut Tape<T>, image: Var, text: Var, scale: Var) -> Result<Var> {
    let (a, b) = contrastive_on(tape, image, text, scale)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, T::lit(0.5)))
}

/// Names of the affine feature transforms, one per tower.
pub fn transform_names(tower: &str) -> (String, String) {
    (format!("distill.{tower}.weight"), format!("distill.{tower}.bias"))
}

/// Random affine maps `d_student → d_teacher` for both towers.
///
/// Weights draw from the truncated normal used for model init, biases start at 0.
pub fn init_transforms(d_student: usize, d_teacher: usize, rng: &Rng) -> ParamSet {
    use crate::modelzoo::{INIT_CLIP_STDS, INIT_STD};
    let mut out = ParamSet::new();
    for tower in ["image", "text"] {
        let (w, b) = transform_names(tower);
        let mut stream = rng.fork(&w);
        let data = (0..d_student * d_teacher)
            .map(|_| stream.trunc_normal(INIT_STD, INIT_CLIP_STDS) as f32)
            .collect();
        out.insert(w, Tensor::new(vec![d_student, d_teacher], data).expect("non-empty"));
        out.insert(b, Tensor::zeros(&[d_teacher]));
    }
    out
}

/// `α · mean_b ||teacher_b − (student_b · W + bias)||²` on the tape.
pub fn ifd_on<T: Scalar>(
    tape: &mut Tape<T>,
    teacher: Var,
    student: Var,
    weight: Var,
    bias: Var,
    alpha: T,
) -> Result<Var> {
    let mapped = tape.matmul(student, weight)?;
    let mapped = tape.add_bias(mapped, bias)?;
    if tape.shape(mapped) != tape.shape(teacher) {
        return Err(Error::dim(
            "ifd_loss",
            format!(
                "transformed student {:?} vs teacher {:?}",
                tape.shape(mapped),
                tape.shape(teacher)
            ),
        ));
    }
    let batch = tape.shape(teacher)[0];
    let resid = tape.sub(teacher, mapped)?;
    let sq = tape.sum_squares(resid);
    // Scale by α last so the loss is exactly α times its α = 1 value.
    let raw = tape.scale(sq, T::one() / T::lit(batch as f64));
    Ok(tape.scale(raw, alpha))
}

/// Unit-norm features and a temperature.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub image: Tensor<f64>,
    pub text: Tensor<f64>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    /// Checks shapes, unit row norms, and `τ > 0`.
    pub fn new(image: Tensor<f64>, text: Tensor<f64>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
        }
        captions_per_image(image.shape(), text.shape())?;
        for (what, t) in [("image", &image), ("text", &text)] {
            let d = t.last_dim();
            for (r, row) in t.data().chunks(d).enumerate() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::Contract(format!(
                        "{what} feature row {r} has norm {norm}, expected 1"
                    )));
                }
            }
        }
        Ok(Self {
            image,
            text,
            temperature,
        })
    }

    /// Normalizes arbitrary non-zero features first.
    pub fn from_raw(image: &Tensor<f64>, text: &Tensor<f64>, temperature: f64) -> Result<Self> {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(image.clone());
        let t = tape.constant(text.clone());
        let v = tape.l2_normalize(v);
        let t = tape.l2_normalize(t);
        Self::new(tape.value(v).clone(), tape.value(t).clone(), temperature)
    }

    fn both(&self) -> Result<(f64, f64)> {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(self.image.clone());
        let t = tape.constant(self.text.clone());
        let s = tape.constant(Tensor::scalar(1.0 / self.temperature));
        let (a, b) = contrastive_on(&mut tape, v, t, s)?;
        Ok((tape.value(a).item(), tape.value(b).item()))
    }
}

/// Text-to-image loss: mean over captions of −log p(matched image).
pub fn t2v_loss(batch: &ContrastiveBatch) -> Result<f64> {
    Ok(batch.both()?.0)
}

/// Image-to-text loss: mean over images of the average −log p over its M captions.
pub fn v2t_loss(batch: &ContrastiveBatch) -> Result<f64> {
    Ok(batch.both()?.1)
}

pub fn task_loss(batch: &ContrastiveBatch) -> Result<f64> {
    let (a, b) = batch.both()?;
    Ok((a + b) / 2.0)
}

/// Teacher and student features with the transform applied to the student.
#[derive(Clone, Debug)]
pub struct DistillPair {
    pub teacher: Tensor<f64>,
    pub student: Tensor<f64>,
    /// `[d_student, d_teacher]`.
    pub weight: Tensor<f64>,
    /// `[d_teacher]`.
    pub bias: Tensor<f64>,
    pub alpha: f64,
}

impl DistillPair {
    /// Pair whose transform is the identity on the leading coordinates.
    pub fn identity(teacher: Tensor<f64>, student: Tensor<f64>, alpha: f64) -> Result<Self> {
        let (ds, dt) = (student.last_dim(), teacher.last_dim());
        let mut w = vec![0.0; ds * dt];
        for i in 0..ds.min(dt) {
            w[i * dt + i] = 1.0;
        }
        Ok(Self {
            teacher,
            student,
            weight: Tensor::new(vec![ds, dt], w)?,
            bias: Tensor::zeros(&[dt]),
            alpha,
        })
    }
}

pub fn ifd_loss(pair: &DistillPair) -> Result<f64> {
    if !pair.alpha.is_finite() || pair.alpha < 0.0 {
        return Err(Error::Contract(format!("alpha must be finite and ≥ 0, got {}", pair.alpha)));
    }
    if pair.teacher.shape()[0] != pair.student.shape()[0] {
        return Err(Error::dim(
            "ifd_loss",
            format!("teacher {:?} vs student {:?}", pair.teacher.shape(), pair.student.shape()),
        ));
    }
    let mut tape = Tape::<f64>::new();
    let t = tape.constant(pair.teacher.clone());
    let s = tape.constant(pair.student.clone());
    let w = tape.constant(pair.weight.clone());
    let b = tape.constant(pair.bias.clone());
    let l = ifd_on(&mut tape, t, s, w, b, pair.alpha)?;
    Ok(tape.value(l).item())
}

/// Mean of the visual and text distillation losses.
pub fn ifd_pair_loss(visual: &DistillPair, text: &DistillPair) -> Result<f64> {
    Ok((ifd_loss(visual)? + ifd_loss(text)?) / 2.0)
}

pub fn total_loss(task: f64, ifd_pair: f64) -> f64 {
    task + ifd_pair
}

/// `α = r · l_task / raw`, where `raw` is the distillation value at α = 1.
///
/// `r = 0` disables distillation and returns 0 without looking at `raw`.
pub fn calibrate_alpha(task: f64, raw: f64, ratio: f64) -> Result<f64> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(Error::Calibration(format!("target ratio must be ≥ 0, got {ratio}")));
    }
    if ratio == 0.0 {
        return Ok(0.0);
    }
    if raw.is_nan() || raw <= CALIBRATION_FLOOR {
        return Err(Error::Calibration(format!(
            "raw distillation value {raw:e} ≤ {CALIBRATION_FLOOR:e}; features already matched"
        )));
    }
    if !(task.is_finite() && task >= 0.0) {
        return Err(Error::Calibration(format!("task loss {task} is not a finite non-negative value")));
    }
    Ok(ratio * task / raw)
}

/// Every loss component of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_t2v: f64,
    pub l_v2t: f64,
    pub l_task: f64,
    pub l_ifd_image: f64,
    pub l_ifd_text: f64,
    pub l_ifd_pair: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn compose(l_t2v: f64, l_v2t: f64, l_ifd_image: f64, l_ifd_text: f64) -> Self {
        let l_task = (l_t2v + l_v2t) / 2.0;
        let l_ifd_pair = (l_ifd_image + l_ifd_text) / 2.0;
        Self {
            l_t2v,
            l_v2t,
            l_task,
            l_ifd_image,
            l_ifd_text,
            l_ifd_pair,
            l_total: total_loss(l_task, l_ifd_pair),
        }
    }

    /// Task-only step.
    pub fn task_only(l_t2v: f64, l_v2t: f64) -> Self {
        Self::compose(l_t2v, l_v2t, 0.0, 0.0)
    }
}

type LossProbe = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Contrastive pair on raw features: normalization and `exp` of a log-scale
/// are part of the checked graph, as in training.
fn contrastive_probe(tape: &mut Tape<f64>, v: &[Var]) -> Result<(Var, Var)> {
    let img = tape.l2_normalize(v[0]);
    let txt = tape.l2_normalize(v[1]);
    let scale = tape.exp(v[2]);
    contrastive_on(tape, img, txt, scale)
}

fn loss_cases() -> Vec<(&'static str, Vec<Vec<usize>>, LossProbe)> {
    let contrastive = vec![vec![3, 4], vec![6, 4], vec![1]];
    let ifd = vec![vec![3, 2], vec![3, 4], vec![4, 2], vec![2]];
    vec![
        ("t2v_loss", contrastive.clone(), |t, v| Ok(contrastive_probe(t, v)?.0)),
        ("v2t_loss", contrastive.clone(), |t, v| Ok(contrastive_probe(t, v)?.1)),
        ("task_loss", contrastive, |t, v| {
            let img = t.l2_normalize(v[0]);
            let txt = t.l2_normalize(v[1]);
            let scale = t.exp(v[2]);
            task_loss_on(t, img, txt, scale)
        }),
        ("ifd_loss", ifd.clone(), |t, v| ifd_on(t, v[0], v[1], v[2], v[3], 0.7)),
        ("ifd_pair_loss", [ifd.clone(), ifd].concat(), |t, v| {
            let a = ifd_on(t, v[0], v[1], v[2], v[3], 0.7)?;
            let b = ifd_on(t, v[4], v[5], v[6], v[7], 0.7)?;
            let s = t.add(a, b)?;
            Ok(t.scale(s, 0.5))
        }),
    ]
}

/// Worst relative gradient error of every loss over `points` random 64-bit
/// points, with respect to all of its inputs.
pub fn gradient_suite(seed: u64, points: usize) -> Result<Vec<(&'static str, f64)>> {
    use crate::numerics::{grad_check, random_tensor, FD_STEP};
    let root = Rng::new(seed);
    loss_cases()
        .into_iter()
        .map(|(name, shapes, probe)| {
            let mut rng = root.fork(name);
            let mut worst = 0.0f64;
            for _ in 0..points {
                let inputs: Vec<_> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
                worst = worst.max(grad_check(probe, &inputs, FD_STEP)?);
            }
            Ok((name, worst))
        })
        .collect()
}
