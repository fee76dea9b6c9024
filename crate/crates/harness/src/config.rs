//! Experiment configuration, read from TOML.
//!
//! Every section and key is optional; missing values take the desk-scale
//! defaults below. Unknown keys are rejected so typos surface early.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use comchain::chain::{allocate_epochs, ChainSpec, DEFAULT_LTA_THRESHOLD};
use comchain::data::SyntheticSpec;
use comchain::expand::{DepthMethod, ExpandSpec, WidthMethod};
use comchain::modelzoo::{family, param_count, ModelConfig};
use comchain::numerics::AdamWConfig;
use comchain::train::{DistillMode, TrainConfig, BASELINE_WARMUP, CHAIN_WARMUP};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Existing manifest; when absent the dataset is generated from `spec` under `<out>/data`.
    pub manifest: Option<PathBuf>,
    pub spec: SyntheticSpec,
    /// Train and evaluation fractions.
    pub fractions: [f64; 2],
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            spec: SyntheticSpec::default(),
            fractions: [0.8, 0.2],
            split_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyConfig {
    pub preset: String,
    pub smallest: String,
    pub largest: String,
    /// Minimum parameter growth between consecutive chain models; 0 keeps every family member.
    pub expansion_ratio: f64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            preset: "nano".into(),
            smallest: "nano_t".into(),
            largest: "nano_b".into(),
            expansion_ratio: 2.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub first_epochs: usize,
    /// Budget of the second model.
    pub first_transfer_epochs: usize,
    /// Linear decrease per later model.
    pub decrement: usize,
    pub min_epochs: usize,
    /// Explicit budgets for every chain model; overrides the four values above.
    pub epochs: Option<Vec<usize>>,
    /// Budget of stand-alone baseline runs.
    pub baseline_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            first_epochs: 60,
            first_transfer_epochs: 15,
            decrement: 5,
            min_epochs: 10,
            epochs: None,
            baseline_epochs: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub baseline_warmup: usize,
    pub chain_warmup: usize,
    pub captions: usize,
    pub eval_every: usize,
    pub adamw: AdamWConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            baseline_warmup: BASELINE_WARMUP,
            chain_warmup: CHAIN_WARMUP,
            captions: t.captions,
            eval_every: t.eval_every,
            adamw: t.adamw,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpandConfig {
    pub enabled: bool,
    pub width_method: WidthMethod,
    pub depth_method: DepthMethod,
    pub fill_std: f64,
    pub seed: u64,
}

impl Default for ExpandConfig {
    fn default() -> Self {
        let s = ExpandSpec::new(0);
        Self {
            enabled: true,
            width_method: s.width_method,
            depth_method: s.depth_method,
            fill_std: s.fill_std,
            seed: s.seed,
        }
    }
}

impl ExpandConfig {
    pub fn spec(&self) -> Option<ExpandSpec> {
        self.enabled.then_some(ExpandSpec {
            width_method: self.width_method,
            depth_method: self.depth_method,
            fill_std: self.fill_std,
            seed: self.seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub lta_threshold: f64,
    pub data: DataConfig,
    pub family: FamilyConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub distill: DistillMode,
    pub expand: ExpandConfig,
    /// Model trained by `train-baseline` and the epochs sweep when `--model` is absent.
    pub baseline_model: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            lta_threshold: DEFAULT_LTA_THRESHOLD,
            data: DataConfig::default(),
            family: FamilyConfig::default(),
            schedule: ScheduleConfig::default(),
            optim: OptimConfig::default(),
            distill: DistillMode::Ratio { ratio: 0.1 },
            expand: ExpandConfig::default(),
            baseline_model: "nano_s".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate().with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    /// Every violation at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.data.spec.validate() {
            problems.push(e.to_string());
        }
        if (self.data.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            problems.push(format!("data.fractions {:?} must sum to 1", self.data.fractions));
        }
        match family(&self.family.preset) {
            Err(e) => problems.push(e.to_string()),
            Ok(f) => {
                for name in [&self.family.smallest, &self.family.largest, &self.baseline_model] {
                    if f.get(name).is_none() {
                        problems.push(format!("model `{name}` is not in family `{}`", self.family.preset));
                    }
                }
            }
        }
        if self.lta_threshold.is_nan() || self.lta_threshold <= 0.0 {
            problems.push(format!("lta_threshold must be positive, got {}", self.lta_threshold));
        }
        match self.distill {
            DistillMode::Ratio { ratio } if !(ratio >= 0.0 && ratio.is_finite()) => {
                problems.push(format!("distill.ratio must be ≥ 0, got {ratio}"))
            }
            DistillMode::Fixed { alpha } if !(alpha >= 0.0 && alpha.is_finite()) => {
                problems.push(format!("distill.alpha must be ≥ 0, got {alpha}"))
            }
            _ => {}
        }
        let o = &self.optim;
        if o.batch_size == 0 || o.lr.is_nan() || o.lr <= 0.0 || o.captions == 0 || o.captions > self.data.spec.captions {
            problems.push("optim needs batch_size ≥ 1, lr > 0 and 1 ≤ captions ≤ data.spec.captions".into());
        }
        let s = &self.schedule;
        if s.first_epochs == 0 || s.baseline_epochs == 0 || s.min_epochs == 0 || s.first_transfer_epochs < s.min_epochs {
            problems.push("schedule needs epochs ≥ 1 and first_transfer_epochs ≥ min_epochs".into());
        }
        if let Ok(models) = self.chain_models() {
            if let Some(e) = &s.epochs {
                if e.len() != models.len() {
                    problems.push(format!("schedule.epochs has {} entries for {} chain models", e.len(), models.len()));
                }
            }
        } else if let Err(e) = self.chain_models() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            bail!("{}", problems.join("\n"))
        }
    }

    /// Family members from `smallest` to `largest`, each at least
    /// `expansion_ratio` times larger than the previous one; `largest` is always kept.
    pub fn chain_models(&self) -> Result<Vec<ModelConfig>> {
        select_chain(&self.family, self.family.expansion_ratio)
    }

    pub fn baseline_train(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.optim.batch_size,
            lr: self.optim.lr,
            warmup_steps: self.optim.baseline_warmup,
            adamw: self.optim.adamw,
            captions: self.optim.captions,
            seed: self.seed,
            eval_every: self.optim.eval_every,
        }
    }

    pub fn chain_epochs(&self, n: usize) -> Result<Vec<usize>> {
        if let Some(e) = &self.schedule.epochs {
            return Ok(e.clone());
        }
        let s = &self.schedule;
        let mut out = vec![s.first_epochs];
        out.extend(allocate_epochs(s.first_transfer_epochs, s.decrement, n, s.min_epochs)?);
        Ok(out)
    }

    pub fn chain_spec(&self) -> Result<ChainSpec> {
        let models = self.chain_models()?;
        let epochs = self.chain_epochs(models.len())?;
        self.chain_spec_for(models, epochs)
    }

    pub fn chain_spec_for(&self, models: Vec<ModelConfig>, epochs: Vec<usize>) -> Result<ChainSpec> {
        let first = self.baseline_train(epochs[0]);
        let successor = TrainConfig {
            warmup_steps: self.optim.chain_warmup,
            ..first.clone()
        };
        let spec = ChainSpec {
            models,
            epochs,
            expand: self.expand.spec(),
            distill: self.distill,
            first,
            successor,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn select_chain(f: &FamilyConfig, ratio: f64) -> Result<Vec<ModelConfig>> {
    let fam = family(&f.preset)?;
    let start = fam.models.iter().position(|m| m.name == f.smallest);
    let end = fam.models.iter().position(|m| m.name == f.largest);
    let (Some(start), Some(end)) = (start, end) else {
        bail!("`{}` or `{}` is not in family `{}`", f.smallest, f.largest, f.preset);
    };
    if start > end {
        bail!("smallest `{}` comes after largest `{}`", f.smallest, f.largest);
    }
    let mut chain = vec![fam.models[start].clone()];
    for m in &fam.models[start + 1..end] {
        let last = param_count(chain.last().expect("non-empty")) as f64;
        if param_count(m) as f64 >= ratio * last && ratio * param_count(m) as f64 <= param_count(&fam.models[end]) as f64 {
            chain.push(m.clone());
        }
    }
    if end > start {
        chain.push(fam.models[end].clone());
    }
    Ok(chain)
}
