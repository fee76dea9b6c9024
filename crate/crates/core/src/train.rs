//! One training run: AdamW with linear warmup and cosine decay, the symmetric
//! contrastive task loss, and optional feature distillation from a frozen
//! teacher that runs forward-only on every batch.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::complexity::{samples_macs, SampleSpec};
use crate::data::{load_batches, Batch, Dataset, LoaderSpec};
use crate::error::{Error, Result};
use crate::eval::{eval_retrieval, RetrievalMetrics};
use crate::losses::{
    calibrate_alpha, contrastive_on, ifd_on, init_transforms, transform_names, LossBreakdown, MAX_LOGIT_SCALE,
};
use crate::modelzoo::{check_schema, embed, encode_image, encode_text, ModelConfig, ModelVars};
use crate::numerics::{adamw_step, AdamWConfig, OptimState, Rng, Tape, Tensor, Var};
use crate::params::ParamSet;

/// Optimizer and schedule of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub adamw: AdamWConfig,
    /// Captions per image fed to the text tower.
    pub captions: usize,
    pub seed: u64,
    /// Evaluate every this many epochs (and always after the last); 0 disables.
    pub eval_every: usize,
}

pub const BASELINE_WARMUP: usize = 400;
pub const CHAIN_WARMUP: usize = 50;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr: 2e-3,
            warmup_steps: BASELINE_WARMUP,
            adamw: AdamWConfig::default(),
            captions: 4,
            seed: 0,
            eval_every: 1,
        }
    }
}

/// How strongly the student is pulled toward the teacher's features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistillMode {
    Off,
    /// `α` chosen on the first batch so that `l_ifd = ratio · l_task`.
    Ratio { ratio: f64 },
    Fixed { alpha: f64 },
}

impl DistillMode {
    pub fn is_off(&self) -> bool {
        matches!(self, DistillMode::Off)
    }
}

/// Learning rate after `step` completed updates: linear warmup to `peak`,
/// then cosine decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Parameters excluded from weight decay: gains, biases, the logit scale
/// and the class token, i.e. every tensor of rank below 2.
pub fn no_decay_names(params: &ParamSet) -> impl Iterator<Item = String> + '_ {
    params.iter().filter(|(_, t)| t.rank() < 2).map(|(n, _)| n.clone())
}

/// One logged event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRow {
    pub run_id: String,
    pub model: String,
    pub epoch: usize,
    pub step: usize,
    /// Means over the epoch's batches.
    pub l_task: f64,
    pub l_ifd: f64,
    pub l_total: f64,
    pub lr: f64,
    pub alpha: f64,
    #[serde(default)]
    pub eval: Option<RetrievalMetrics>,
    #[serde(default)]
    pub eval_r1: Option<f64>,
    pub cumulative_macs: f64,
    pub wall_seconds: f64,
}

pub struct Teacher<'a> {
    pub params: &'a ParamSet,
    pub cfg: &'a ModelConfig,
}

pub struct RunSpec<'a> {
    pub run_id: String,
    pub cfg: ModelConfig,
    pub init: ParamSet,
    pub teacher: Option<Teacher<'a>>,
    pub distill: DistillMode,
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub params: ParamSet,
    pub rows: Vec<MetricsRow>,
    pub first_batch: LossBreakdown,
    pub alpha: f64,
    pub final_eval: Option<RetrievalMetrics>,
    pub macs: f64,
    pub steps: usize,
}

/// Values and gradients of one batch.
struct StepResult {
    losses: LossBreakdown,
    /// Distillation value at α = 1, averaged over both towers.
    raw_ifd: f64,
    grads: BTreeMap<String, Tensor<f32>>,
}

fn step(
    cfg: &ModelConfig,
    trainable: &ParamSet,
    teacher: Option<&Teacher<'_>>,
    batch: &Batch,
    alpha: Option<f64>,
) -> Result<StepResult> {
    let mut tape = Tape::<f32>::new();
    let vars = ModelVars::bind(&mut tape, trainable, true);
    let img = encode_image(&mut tape, &vars, cfg, &batch.images)?;
    let txt = encode_text(&mut tape, &vars, cfg, &batch.tokens)?;
    let (img_raw, txt_raw) = (img, txt);
    let img = tape.l2_normalize(img);
    let txt = tape.l2_normalize(txt);
    let scale = tape.exp(vars.get("logit_scale")?);
    let (a, b) = contrastive_on(&mut tape, img, txt, scale)?;
    let (t2v, v2t) = (tape.value(a).item() as f64, tape.value(b).item() as f64);
    let sum = tape.add(a, b)?;
    let task = tape.scale(sum, 0.5);

    let mut loss = task;
    let mut parts = (0.0, 0.0);
    let mut raw_ifd = 0.0;
    if let (Some(t), Some(alpha)) = (teacher, alpha) {
        let (tv, tt) = embed(t.params, t.cfg, &batch.images, &batch.tokens)?;
        let ifd = |tape: &mut Tape<f32>, feats: Tensor<f32>, student: Var, tower: &str| -> Result<Var> {
            let (w, b) = transform_names(tower);
            let teacher = tape.constant(feats);
            ifd_on(tape, teacher, student, vars.get(&w)?, vars.get(&b)?, 1.0)
        };
        let a = ifd(&mut tape, tv, img_raw, "image")?;
        let b = ifd(&mut tape, tt, txt_raw, "text")?;
        let (ra, rb) = (tape.value(a).item() as f64, tape.value(b).item() as f64);
        raw_ifd = (ra + rb) / 2.0;
        parts = (alpha * ra, alpha * rb);
        let pair = tape.add(a, b)?;
        let pair = tape.scale(pair, (0.5 * alpha) as f32);
        loss = tape.add(task, pair)?;
    }
    let losses = LossBreakdown::compose(t2v, v2t, parts.0, parts.1);
    if !losses.l_total.is_finite() {
        return Err(Error::NonFiniteLoss { model: cfg.name.clone(), epoch: 0, step: 0 });
    }
    let grads = tape.backward(loss)?;
    let grads = vars
        .iter()
        .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
        .collect();
    Ok(StepResult { losses, raw_ifd, grads })
}

/// Trains `spec.init` on `train`, evaluating on `eval`, and reports every
/// row to `sink` as it is produced.
pub fn train_run(
    spec: RunSpec<'_>,
    train: &Dataset,
    eval: Option<&Dataset>,
    sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<RunOutcome> {
    let RunSpec { run_id, cfg, init, teacher, distill, train: tc } = spec;
    check_schema(&init, &cfg)?;
    if tc.epochs == 0 || tc.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
    }
    if train.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    let teacher = if distill.is_off() { None } else { teacher };
    if !distill.is_off() && teacher.is_none() {
        return Err(Error::Config(format!("{run_id}: distillation needs a teacher")));
    }

    let mut trainable = init;
    if let Some(t) = &teacher {
        let transforms = init_transforms(cfg.embed_dim, t.cfg.embed_dim, &Rng::new(tc.seed).fork("distill"));
        for (n, w) in transforms.iter() {
            trainable.insert(n.clone(), w.clone());
        }
    }
    let mut opt = OptimState::new(tc.adamw);
    opt.no_decay.extend(no_decay_names(&trainable));

    let loader = LoaderSpec { batch_size: tc.batch_size, captions: tc.captions, shuffle: true, seed: tc.seed };
    let sample = SampleSpec { text_passes: tc.captions };
    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.epochs;
    let started = Instant::now();

    let mut alpha = match distill {
        DistillMode::Off => None,
        DistillMode::Fixed { alpha } => Some(alpha),
        DistillMode::Ratio { .. } => None,
    };
    let mut first_batch = None;
    let mut rows = Vec::new();
    let mut final_eval = None;
    let (mut steps, mut seen) = (0usize, 0usize);
    let max_log_scale = MAX_LOGIT_SCALE.ln() as f32;

    for epoch in 1..=tc.epochs {
        let mut sums = (0.0, 0.0, 0.0, 0usize);
        for batch in load_batches(train, &loader, epoch)? {
            if let (DistillMode::Ratio { ratio }, None) = (distill, alpha) {
                // Calibrate on the first batch with α = 1, then train with the chosen α.
                let probe = step(&cfg, &trainable, teacher.as_ref(), &batch, Some(1.0))?;
                alpha = Some(calibrate_alpha(probe.losses.l_task, probe.raw_ifd, ratio)?);
            }
            let lr = lr_at(steps, total_steps, tc.warmup_steps, tc.lr);
            let r = step(&cfg, &trainable, teacher.as_ref(), &batch, alpha).map_err(|e| match e {
                Error::NonFiniteLoss { model, .. } => Error::NonFiniteLoss { model, epoch, step: steps + 1 },
                other => other,
            })?;
            first_batch.get_or_insert(r.losses);
            adamw_step(&mut trainable, &r.grads, &mut opt, lr)?;
            if let Some(s) = trainable.get_mut("logit_scale") {
                s.data_mut().iter_mut().for_each(|v| *v = v.min(max_log_scale));
            }
            steps += 1;
            seen += batch.len();
            sums.0 += r.losses.l_task;
            sums.1 += r.losses.l_ifd_pair;
            sums.2 += r.losses.l_total;
            sums.3 += 1;
        }
        let last = epoch == tc.epochs;
        let evaluated = match eval {
            Some(ds) if tc.eval_every > 0 && (epoch % tc.eval_every == 0 || last) => {
                Some(eval_retrieval(&student_only(&trainable), &cfg, ds)?)
            }
            _ => None,
        };
        if last {
            final_eval = evaluated;
        }
        let k = sums.3 as f64;
        let row = MetricsRow {
            run_id: run_id.clone(),
            model: cfg.name.clone(),
            epoch,
            step: steps,
            l_task: sums.0 / k,
            l_ifd: sums.1 / k,
            l_total: sums.2 / k,
            lr: lr_at(steps.saturating_sub(1), total_steps, tc.warmup_steps, tc.lr),
            alpha: alpha.unwrap_or(0.0),
            eval: evaluated,
            eval_r1: evaluated.map(|m| m.r1()),
            cumulative_macs: samples_macs(&cfg, seen, teacher.as_ref().map(|t| t.cfg), sample, tc.batch_size),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        sink(&row)?;
        rows.push(row);
    }

    Ok(RunOutcome {
        params: student_only(&trainable),
        macs: samples_macs(&cfg, seen, teacher.as_ref().map(|t| t.cfg), sample, tc.batch_size),
        rows,
        first_batch: first_batch.expect("at least one batch"),
        alpha: alpha.unwrap_or(0.0),
        final_eval,
        steps,
    })
}

/// Drops the distillation transforms.
fn student_only(p: &ParamSet) -> ParamSet {
    p.iter()
        .filter(|(n, _)| !n.starts_with("distill."))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect()
}
