//! The model chain: train the smallest model, then grow each successor from
//! its frozen predecessor and distill from it, smallest to largest.
//!
//! Output directory layout:
//!
//! ```text
//! .lock                      held while a run owns the directory
//! chain_state.json           progress, rewritten after every model
//! checkpoints/<i>-<model>.comc
//! metrics/<run_id>.jsonl     renamed from .partial once the run completes
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{file_hash, load_checkpoint_as, save_checkpoint};
use crate::complexity::RunCost;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::RetrievalMetrics;
use crate::expand::{expand_model, ExpandSpec};
use crate::losses::LossBreakdown;
use crate::modelzoo::{build_params, param_count, ModelConfig};
use crate::numerics::Rng;
use crate::params::ParamSet;
use crate::train::{train_run, DistillMode, MetricsRow, RunSpec, Teacher, TrainConfig};

pub const STATE_FILE: &str = "chain_state.json";
pub const LOCK_FILE: &str = ".lock";
pub const DEFAULT_LTA_THRESHOLD: f64 = 2.0;
pub const DEFAULT_RELAX_GAMMA: f64 = 1.25;
pub const DEFAULT_MAX_RELAXATIONS: usize = 3;

/// Exclusive ownership of an output directory for the lifetime of the value.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    /// Creates `dir` if needed and takes its lock file. A lock left by a
    /// process that no longer exists is taken over.
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        for _ in 0..2 {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let owner = fs::read_to_string(&path).unwrap_or_default();
                    let alive = owner
                        .trim()
                        .parse::<u32>()
                        .map(|pid| Path::new(&format!("/proc/{pid}")).exists())
                        .unwrap_or(true);
                    if alive {
                        return Err(Error::Contract(format!(
                            "{} is locked by process {}",
                            dir.display(),
                            owner.trim()
                        )));
                    }
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Err(Error::Contract(format!("could not lock {}", dir.display())))
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Appends metrics rows to `<run_id>.jsonl.partial` and publishes the file on completion.
pub struct MetricsWriter {
    partial: PathBuf,
    done: PathBuf,
    file: fs::File,
}

impl MetricsWriter {
    pub fn create(dir: &Path, run_id: &str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let done = dir.join(format!("{run_id}.jsonl"));
        let partial = dir.join(format!("{run_id}.jsonl.partial"));
        let file = fs::File::create(&partial).map_err(|e| Error::io(&partial, e))?;
        Ok(Self { partial, done, file })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        let line = serde_json::to_string(row)? + "\n";
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.partial, e))
    }

    pub fn finish(self) -> Result<PathBuf> {
        self.file.sync_all().map_err(|e| Error::io(&self.partial, e))?;
        fs::rename(&self.partial, &self.done).map_err(|e| Error::io(&self.done, e))?;
        Ok(self.done)
    }
}

/// Reads a metrics file, validating every row.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Initial parameters of a model trained from scratch.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    build_params(cfg, &Rng::new(seed).fork(&format!("init/{}", cfg.name)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub models: Vec<ModelConfig>,
    pub epochs: Vec<usize>,
    /// Weight initialization from the predecessor; `None` starts every model from random weights.
    pub expand: Option<ExpandSpec>,
    pub distill: DistillMode,
    /// Settings of the first model; its epochs come from `epochs[0]`.
    pub first: TrainConfig,
    /// Settings of every later model; epochs come from `epochs`.
    pub successor: TrainConfig,
    pub seed: u64,
}

impl ChainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("a chain needs at least one model".into()));
        }
        if self.epochs.len() != self.models.len() {
            return Err(Error::Config(format!(
                "{} epoch budgets for {} models",
                self.epochs.len(),
                self.models.len()
            )));
        }
        if let Some(i) = self.epochs.iter().position(|&e| e == 0) {
            return Err(Error::Config(format!("epoch budget of `{}` is 0", self.models[i].name)));
        }
        for pair in self.models.windows(2) {
            if param_count(&pair[1]) <= param_count(&pair[0]) {
                return Err(Error::Config(format!(
                    "`{}` is not larger than `{}`",
                    pair[1].name, pair[0].name
                )));
            }
        }
        for m in &self.models {
            m.validate()?;
        }
        Ok(())
    }

    fn train_config(&self, i: usize) -> TrainConfig {
        let base = if i == 0 { &self.first } else { &self.successor };
        TrainConfig {
            epochs: self.epochs[i],
            seed: self.seed,
            ..base.clone()
        }
    }

    pub fn run_id(&self, i: usize) -> String {
        format!("chain-{i}-{}", self.models[i].name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletedRun {
    pub model: String,
    pub epochs: usize,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub metrics: PathBuf,
    pub macs: f64,
    pub final_eval: Option<RetrievalMetrics>,
    pub alpha: f64,
    pub first_batch: LossBreakdown,
    /// Hash of the teacher checkpoint before and after this step.
    pub teacher_sha256: Option<(String, String)>,
    /// Content hash of the parameters this model was initialized from
    /// (the teacher's, when expanded).
    pub relay_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub spec: ChainSpec,
    pub runs: Vec<CompletedRun>,
    pub cumulative_macs: f64,
}

impl ChainState {
    pub fn completed(&self) -> usize {
        self.runs.len()
    }

    pub fn is_complete(&self) -> bool {
        self.runs.len() == self.spec.models.len()
    }

    pub fn costs(&self) -> Vec<RunCost> {
        self.runs
            .iter()
            .map(|r| RunCost { model: r.model.clone(), macs: r.macs })
            .collect()
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(STATE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(STATE_FILE);
        let tmp = dir.join(format!("{STATE_FILE}.partial"));
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// Epoch budgets `E_2..E_n` decreasing by `d` per model, floored at `e_min`.
pub fn allocate_epochs(e_first_transfer: usize, d: usize, n: usize, e_min: usize) -> Result<Vec<usize>> {
    if e_min == 0 || e_first_transfer < e_min {
        return Err(Error::Config(format!(
            "need E_first_transfer ({e_first_transfer}) ≥ E_min ({e_min}) ≥ 1"
        )));
    }
    Ok((2..=n)
        .map(|i| e_first_transfer.saturating_sub((i - 2) * d).max(e_min))
        .collect())
}

/// Scales every budget after the first by `gamma`, rounding up.
///
/// Products within 1e-9 of an integer are treated as that integer, so a
/// `gamma` barely above 1 leaves the schedule unchanged.
pub fn relax_schedule(schedule: &[usize], gamma: f64) -> Result<Vec<usize>> {
    if !(gamma > 1.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("relaxation factor must exceed 1, got {gamma}")));
    }
    Ok(schedule
        .iter()
        .enumerate()
        .map(|(i, &e)| if i == 0 { e } else { (e as f64 * gamma - 1e-9).ceil() as usize })
        .collect())
}

/// Outcome of comparing a candidate metric with its baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtaVerdict {
    pub candidate: f64,
    pub baseline: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl LtaVerdict {
    pub fn gap(&self) -> f64 {
        self.baseline - self.candidate
    }
}

/// Passes when the candidate trails the baseline by strictly less than `threshold`.
pub fn lta_check(candidate: f64, baseline: f64, threshold: f64) -> LtaVerdict {
    LtaVerdict {
        candidate,
        baseline,
        threshold,
        pass: baseline - candidate < threshold,
    }
}

fn checkpoint_path(dir: &Path, i: usize, cfg: &ModelConfig) -> PathBuf {
    dir.join("checkpoints").join(format!("{i}-{}.comc", cfg.name))
}

/// Trains model `i` of the chain, given its predecessor when `i > 0`.
fn train_link(
    spec: &ChainSpec,
    i: usize,
    teacher: Option<(&ParamSet, &ModelConfig)>,
    train: &Dataset,
    eval: Option<&Dataset>,
    out: &Path,
) -> Result<(CompletedRun, ParamSet)> {
    let cfg = &spec.models[i];
    let run_id = spec.run_id(i);
    let (init, relay) = match (teacher, &spec.expand) {
        (Some((tp, tc)), Some(ex)) => (expand_model(tp, tc, cfg, ex)?, Some(tp.content_hash())),
        _ => (init_params(cfg, spec.seed)?, None),
    };
    let distill = if teacher.is_some() { spec.distill } else { DistillMode::Off };
    let mut writer = MetricsWriter::create(&out.join("metrics"), &run_id)?;
    let outcome = train_run(
        RunSpec {
            run_id,
            cfg: cfg.clone(),
            init,
            teacher: teacher.map(|(params, cfg)| Teacher { params, cfg }),
            distill,
            train: spec.train_config(i),
        },
        train,
        eval,
        &mut |row| writer.append(row),
    )?;
    let metrics = writer.finish()?;
    let ckpt = checkpoint_path(out, i, cfg);
    let checkpoint_sha256 = save_checkpoint(&outcome.params, cfg, &ckpt)?;
    Ok((
        CompletedRun {
            model: cfg.name.clone(),
            epochs: spec.epochs[i],
            checkpoint: ckpt,
            checkpoint_sha256,
            metrics,
            macs: outcome.macs,
            final_eval: outcome.final_eval,
            alpha: outcome.alpha,
            first_batch: outcome.first_batch,
            teacher_sha256: None,
            relay_sha256: relay,
        },
        outcome.params,
    ))
}

/// Runs the whole chain into `out`, resuming after the last completed model
/// when `out` already holds a state for the same spec.
pub fn run_chain(spec: &ChainSpec, train: &Dataset, eval: Option<&Dataset>, out: &Path) -> Result<ChainState> {
    spec.validate()?;
    let _lock = OutputLock::acquire(out)?;
    let mut state = match ChainState::load(out)? {
        Some(s) if s.spec == *spec => s,
        Some(_) => {
            return Err(Error::Config(format!(
                "{} holds a chain with a different spec",
                out.display()
            )))
        }
        None => ChainState { spec: spec.clone(), runs: Vec::new(), cumulative_macs: 0.0 },
    };
    for run in &state.runs {
        let actual = file_hash(&run.checkpoint)?;
        if actual != run.checkpoint_sha256 {
            return Err(Error::Integrity(format!(
                "{}: checkpoint changed since it was written",
                run.checkpoint.display()
            )));
        }
    }

    for i in state.completed()..spec.models.len() {
        let teacher = match i {
            0 => None,
            _ => {
                let prev = &state.runs[i - 1];
                let params = load_checkpoint_as(&prev.checkpoint, &spec.models[i - 1])?;
                Some((params, prev.checkpoint_sha256.clone(), prev.checkpoint.clone()))
            }
        };
        let (mut run, _) = train_link(
            spec,
            i,
            teacher.as_ref().map(|(p, _, _)| (p, &spec.models[i - 1])),
            train,
            eval,
            out,
        )?;
        if let Some((_, before, path)) = &teacher {
            let after = file_hash(path)?;
            if &after != before {
                return Err(Error::Integrity(format!("teacher checkpoint {} changed", path.display())));
            }
            run.teacher_sha256 = Some((before.clone(), after));
        }
        state.cumulative_macs += run.macs;
        state.runs.push(run);
        state.save(out)?;
    }
    Ok(state)
}

/// Trains model 1 of a two-model `spec` into `out` from an already trained
/// model 0, so several variants can share one teacher.
pub fn transfer_step(
    spec: &ChainSpec,
    teacher: &CompletedRun,
    train: &Dataset,
    eval: Option<&Dataset>,
    out: &Path,
) -> Result<CompletedRun> {
    spec.validate()?;
    if spec.models.len() != 2 || teacher.model != spec.models[0].name {
        return Err(Error::Config(format!(
            "transfer needs a two-model spec starting at `{}`",
            teacher.model
        )));
    }
    let _lock = OutputLock::acquire(out)?;
    let before = file_hash(&teacher.checkpoint)?;
    if before != teacher.checkpoint_sha256 {
        return Err(Error::Integrity(format!(
            "{}: checkpoint changed since it was written",
            teacher.checkpoint.display()
        )));
    }
    let params = load_checkpoint_as(&teacher.checkpoint, &spec.models[0])?;
    let (mut run, _) = train_link(spec, 1, Some((&params, &spec.models[0])), train, eval, out)?;
    let after = file_hash(&teacher.checkpoint)?;
    if after != before {
        return Err(Error::Integrity(format!("teacher checkpoint {} changed", teacher.checkpoint.display())));
    }
    run.teacher_sha256 = Some((before, after));
    Ok(run)
}

/// Result of one stand-alone baseline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub model: String,
    pub epochs: usize,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub metrics: PathBuf,
    pub macs: f64,
    pub final_eval: Option<RetrievalMetrics>,
}

/// Trains `cfg` from scratch with the task loss only.
pub fn run_baseline(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train: &Dataset,
    eval: Option<&Dataset>,
    out: &Path,
) -> Result<BaselineRun> {
    let _lock = OutputLock::acquire(out)?;
    let run_id = format!("baseline-{}-e{}", cfg.name, tc.epochs);
    let mut writer = MetricsWriter::create(&out.join("metrics"), &run_id)?;
    let outcome = train_run(
        RunSpec {
            run_id: run_id.clone(),
            cfg: cfg.clone(),
            init: init_params(cfg, tc.seed)?,
            teacher: None,
            distill: DistillMode::Off,
            train: tc.clone(),
        },
        train,
        eval,
        &mut |row| writer.append(row),
    )?;
    let metrics = writer.finish()?;
    let checkpoint = out.join("checkpoints").join(format!("{run_id}.comc"));
    let checkpoint_sha256 = save_checkpoint(&outcome.params, cfg, &checkpoint)?;
    let run = BaselineRun {
        model: cfg.name.clone(),
        epochs: tc.epochs,
        checkpoint,
        checkpoint_sha256,
        metrics,
        macs: outcome.macs,
        final_eval: outcome.final_eval,
    };
    let summary = out.join(format!("{run_id}.json"));
    fs::write(&summary, serde_json::to_string_pretty(&run)? + "\n").map_err(|e| Error::io(&summary, e))?;
    Ok(run)
}

/// One attempt of the first-pair validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAttempt {
    pub epochs: Vec<usize>,
    pub verdict: LtaVerdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairValidation {
    pub spec: ChainSpec,
    pub relaxations: usize,
    pub history: Vec<PairAttempt>,
}

impl PairValidation {
    pub fn verdict(&self) -> LtaVerdict {
        self.history.last().expect("at least one attempt").verdict
    }
}

/// Checks `m_1 → m_2` against the baseline metric of `m_2`, relaxing the
/// schedule by `gamma` after each failure, at most `max_relaxations` times.
///
/// `attempt` trains the pair under the given spec and returns the metric of `m_2`.
pub fn validate_first_pair_with(
    spec: &ChainSpec,
    baseline: f64,
    threshold: f64,
    gamma: f64,
    max_relaxations: usize,
    mut attempt: impl FnMut(&ChainSpec) -> Result<f64>,
) -> Result<PairValidation> {
    spec.validate()?;
    if spec.models.len() < 2 {
        return Err(Error::Config("first-pair validation needs at least two models".into()));
    }
    let mut current = spec.clone();
    let mut history = Vec::new();
    for relaxations in 0..=max_relaxations {
        let verdict = lta_check(attempt(&current)?, baseline, threshold);
        history.push(PairAttempt { epochs: current.epochs.clone(), verdict });
        if verdict.pass {
            return Ok(PairValidation { spec: current, relaxations, history });
        }
        if relaxations < max_relaxations {
            current.epochs = relax_schedule(&current.epochs, gamma)?;
        }
    }
    let history = history
        .iter()
        .map(|a| format!("{:?}: gap {:.2}", a.epochs, a.verdict.gap()))
        .collect::<Vec<_>>()
        .join("; ");
    Err(Error::ScheduleInfeasible { attempts: max_relaxations, history })
}

/// Trains the first pair for real under `out/attempt-<k>` and validates it.
///
/// The first model is trained once and reused by every attempt.
pub fn validate_first_pair(
    spec: &ChainSpec,
    train: &Dataset,
    eval: &Dataset,
    baseline: f64,
    threshold: f64,
    out: &Path,
) -> Result<PairValidation> {
    let _lock = OutputLock::acquire(out)?;
    let pair = ChainSpec {
        models: spec.models[..2.min(spec.models.len())].to_vec(),
        epochs: spec.epochs[..2.min(spec.epochs.len())].to_vec(),
        ..spec.clone()
    };
    let first_dir = out.join("first");
    let (first, _) = train_link(&pair, 0, None, train, Some(eval), &first_dir)?;
    let first_params = load_checkpoint_as(&first.checkpoint, &pair.models[0])?;
    let mut k = 0;
    let result = validate_first_pair_with(&pair, baseline, threshold, DEFAULT_RELAX_GAMMA, DEFAULT_MAX_RELAXATIONS, |s| {
        k += 1;
        let (run, _) = train_link(s, 1, Some((&first_params, &s.models[0])), train, Some(eval), &out.join(format!("attempt-{k}")))?;
        Ok(run.final_eval.map_or(0.0, |m| m.r1()))
    })?;
    // Every later budget is relaxed as often as the pair needed.
    let mut full = spec.clone();
    for _ in 0..result.relaxations {
        full.epochs = relax_schedule(&full.epochs, DEFAULT_RELAX_GAMMA)?;
    }
    Ok(PairValidation { spec: full, ..result })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate_epochs(24, 5, 4, 1).unwrap(), vec![24, 19, 14]);
        assert_eq!(allocate_epochs(10, 0, 4, 1).unwrap(), vec![10, 10, 10]);
        assert_eq!(allocate_epochs(10, 6, 4, 3).unwrap(), vec![10, 4, 3]);
        assert!(allocate_epochs(2, 1, 3, 3).is_err());
        assert!(allocate_epochs(24, 5, 1, 1).unwrap().is_empty());
    }

    #[test]
    fn relaxation_examples() {
        assert_eq!(relax_schedule(&[60, 24, 19, 14], 1.25).unwrap(), vec![60, 30, 24, 18]);
        assert_eq!(relax_schedule(&[60, 24, 19], 1.0 + 1e-12).unwrap(), vec![60, 24, 19]);
        assert!(relax_schedule(&[1, 2], 1.0).is_err());
    }

    #[test]
    fn lta_examples() {
        assert!(lta_check(30.24, 30.16, 0.5).pass);
        let v = lta_check(29.50, 30.16, 0.5);
        assert!(!v.pass && (v.gap() - 0.66).abs() < 1e-9);
        assert!(lta_check(30.16, 30.16, 0.5).pass);
    }

    fn pair_spec() -> ChainSpec {
        ChainSpec {
            models: vec![crate::modelzoo::nano("a", 16, 1), crate::modelzoo::nano("b", 32, 1)],
            epochs: vec![60, 24],
            expand: Some(ExpandSpec::new(0)),
            distill: DistillMode::Ratio { ratio: 0.1 },
            first: TrainConfig::default(),
            successor: TrainConfig::default(),
            seed: 0,
        }
    }

    #[test]
    fn passing_pair_keeps_spec() {
        let v = validate_first_pair_with(&pair_spec(), 80.0, 2.0, 1.25, 3, |_| Ok(79.0)).unwrap();
        assert_eq!(v.spec, pair_spec());
        assert_eq!(v.relaxations, 0);
    }

    #[test]
    fn one_relaxation_then_pass() {
        let v = validate_first_pair_with(&pair_spec(), 80.0, 2.0, 1.25, 3, |s| {
            Ok(if s.epochs[1] > 24 { 79.0 } else { 70.0 })
        })
        .unwrap();
        assert_eq!(v.relaxations, 1);
        assert_eq!(v.spec.epochs, vec![60, 30]);
        assert_eq!(v.history.len(), 2);
    }

    #[test]
    fn relaxations_are_capped() {
        let mut calls = 0;
        let err = validate_first_pair_with(&pair_spec(), 80.0, 2.0, 1.25, 3, |_| {
            calls += 1;
            Ok(0.0)
        })
        .unwrap_err();
        assert!(matches!(err, Error::ScheduleInfeasible { attempts: 3, .. }));
        assert_eq!(calls, 4);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn stale_lock_is_taken_over() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(LOCK_FILE), "4294967295").unwrap();
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn spec_validation() {
        let mut s = pair_spec();
        s.models.swap(0, 1);
        assert!(s.validate().is_err());
        let mut s = pair_spec();
        s.epochs[1] = 0;
        assert!(s.validate().is_err());
        let mut s = pair_spec();
        s.epochs.pop();
        assert!(s.validate().is_err());
    }
}
