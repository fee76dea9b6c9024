//! One-dimensional sweeps over chain design choices.
//!
//! Each arm owns `<out>/sweep-<axis>/<value>/`. Arms that transfer from the
//! first chain model share one teacher trained under `teacher/`. A failed arm
//! is recorded and the sweep moves on; the caller decides the exit status.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use comchain::chain::{run_baseline, run_chain, transfer_step, ChainSpec, CompletedRun};
use comchain::complexity::{run_macs, SampleSpec};
use comchain::data::Dataset;
use comchain::eval::RetrievalMetrics;
use comchain::modelzoo::{family, ModelConfig};
use comchain::train::DistillMode;
use serde::{Deserialize, Serialize};

use crate::config::{select_chain, ExperimentConfig};
use crate::svg::{line_chart, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Epochs,
    SmallestModel,
    ExpansionRatio,
    Alpha,
    Components,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::Epochs, Axis::SmallestModel, Axis::ExpansionRatio, Axis::Alpha, Axis::Components];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Epochs => "epochs",
            Axis::SmallestModel => "smallest-model",
            Axis::ExpansionRatio => "expansion-ratio",
            Axis::Alpha => "alpha",
            Axis::Components => "components",
        }
    }

    pub fn default_values(self, cfg: &ExperimentConfig) -> Vec<String> {
        let v: Vec<String> = match self {
            Axis::Epochs => vec!["15".into(), "30".into(), "60".into()],
            Axis::SmallestModel => family(&cfg.family.preset)
                .map(|f| {
                    f.models
                        .iter()
                        .take_while(|m| m.name != cfg.family.largest)
                        .map(|m| m.name.clone())
                        .collect()
                })
                .unwrap_or_default(),
            Axis::ExpansionRatio => vec!["1".into(), "2.5".into(), "6".into()],
            Axis::Alpha => ["0", "0.05", "0.1", "0.5", "1"].map(String::from).to_vec(),
            Axis::Components => Component::ALL.map(|c| c.name().to_string()).to_vec(),
        };
        v
    }
}

impl FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| anyhow!("unknown axis `{s}`; expected one of epochs, smallest-model, expansion-ratio, alpha, components"))
    }
}

/// Arms of the two-component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    /// Random initialization, task loss only.
    None,
    /// Weight initialization from the teacher only.
    Iwi,
    /// Feature distillation from the teacher only.
    Ifd,
    Both,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::None, Component::Iwi, Component::Ifd, Component::Both];

    pub fn name(self) -> &'static str {
        match self {
            Component::None => "none",
            Component::Iwi => "iwi",
            Component::Ifd => "ifd",
            Component::Both => "both",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| anyhow!("unknown component arm `{s}`; expected none, iwi, ifd or both"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub value: String,
    pub ok: bool,
    /// Models and epochs of the arm, or the error of a failed arm.
    pub detail: String,
    /// Evaluation of the last model.
    pub eval: Option<RetrievalMetrics>,
    /// MACs of the last model's run.
    pub run_macs: Option<f64>,
    /// MACs of every run in the arm, shared teacher included.
    pub total_macs: Option<f64>,
    /// Analytic MACs of the last model trained alone for the baseline budget.
    pub baseline_macs: Option<f64>,
}

impl ArmResult {
    pub fn r1(&self) -> Option<f64> {
        self.eval.map(|e| e.r1())
    }

    pub fn acceleration(&self) -> Option<f64> {
        Some(self.baseline_macs? / self.total_macs?)
    }

    fn failed(value: &str, err: &anyhow::Error) -> Self {
        Self {
            value: value.into(),
            ok: false,
            detail: format!("{err:#}").replace(['\n', ','], " "),
            eval: None,
            run_macs: None,
            total_macs: None,
            baseline_macs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: Axis,
    pub arms: Vec<ArmResult>,
    /// Epochs axis: fewest epochs reaching the best R@1 minus the threshold, linearly interpolated.
    pub min_epochs: Option<f64>,
    /// Epochs axis: whether R@1 never drops as epochs grow.
    pub monotone: Option<bool>,
}

impl SweepReport {
    pub fn failures(&self) -> usize {
        self.arms.iter().filter(|a| !a.ok).count()
    }

    pub fn arm(&self, value: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.value == value)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("axis,value,status,r1,r1_t2i,r1_i2t,prototype_top1,run_macs,total_macs,baseline_macs,acceleration,detail\n");
        let f = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
        for a in &self.arms {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                self.axis.name(),
                a.value,
                if a.ok { "ok" } else { "failed" },
                f(a.r1()),
                f(a.eval.map(|e| e.r1_t2i)),
                f(a.eval.map(|e| e.r1_i2t)),
                f(a.eval.map(|e| e.prototype_top1)),
                f(a.run_macs),
                f(a.total_macs),
                f(a.baseline_macs),
                f(a.acceleration()),
                a.detail
            );
        }
        s
    }

    pub fn svg(&self) -> String {
        let numeric = self.arms.iter().all(|a| a.value.parse::<f64>().is_ok());
        let x = |i: usize, a: &ArmResult| if numeric { a.value.parse().unwrap_or(0.0) } else { i as f64 };
        let points = self.arms.iter().enumerate().filter_map(|(i, a)| a.r1().map(|r| (x(i, a), r))).collect();
        let x_label = if numeric {
            self.axis.name().to_string()
        } else {
            format!("arm: {}", self.arms.iter().map(|a| a.value.as_str()).collect::<Vec<_>>().join(", "))
        };
        line_chart(
            &format!("Sweep over {}", self.axis.name()),
            &x_label,
            "R@1 (%)",
            &[Series { label: "R@1".into(), points }],
        )
    }
}

/// Linear interpolation of the fewest epochs reaching `target`, over points sorted by epochs.
pub fn interpolate_min_epochs(points: &[(f64, f64)], target: f64) -> Option<f64> {
    let first = points.first()?;
    if first.1 >= target {
        return Some(first.0);
    }
    points.windows(2).find_map(|w| {
        let ((e0, a0), (e1, a1)) = (w[0], w[1]);
        (a0 < target && a1 >= target).then(|| e0 + (target - a0) / (a1 - a0) * (e1 - e0))
    })
}

/// Worker count from `COMCHAIN_THREADS`, defaulting to the available cores.
pub fn parallelism() -> usize {
    std::env::var("COMCHAIN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn baseline_macs(cfg: &ExperimentConfig, model: &ModelConfig, n_train: usize) -> f64 {
    run_macs(
        model,
        n_train,
        cfg.schedule.baseline_epochs,
        None,
        SampleSpec { text_passes: cfg.optim.captions },
        cfg.optim.batch_size,
    )
}

fn sanitize(v: &str) -> String {
    v.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn chain_arm(cfg: &ExperimentConfig, value: &str, spec: &ChainSpec, train: &Dataset, eval: &Dataset, dir: &Path) -> Result<ArmResult> {
    let state = run_chain(spec, train, Some(eval), dir)?;
    let last = state.runs.last().expect("complete chain");
    let model = spec.models.last().expect("non-empty");
    Ok(ArmResult {
        value: value.into(),
        ok: true,
        detail: describe(spec),
        eval: last.final_eval,
        run_macs: Some(last.macs),
        total_macs: Some(state.cumulative_macs),
        baseline_macs: Some(baseline_macs(cfg, model, train.len())),
    })
}

fn describe(spec: &ChainSpec) -> String {
    spec.models
        .iter()
        .zip(&spec.epochs)
        .map(|(m, e)| format!("{}x{e}", m.name))
        .collect::<Vec<_>>()
        .join(" -> ")
}

/// The first two chain models with the first two budgets.
fn pair_spec(cfg: &ExperimentConfig) -> Result<ChainSpec> {
    let spec = cfg.chain_spec()?;
    if spec.models.len() < 2 {
        bail!("the configured chain has a single model; transfer sweeps need two");
    }
    cfg.chain_spec_for(spec.models[..2].to_vec(), spec.epochs[..2].to_vec())
}

fn shared_teacher(cfg: &ExperimentConfig, pair: &ChainSpec, train: &Dataset, eval: &Dataset, root: &Path) -> Result<CompletedRun> {
    let one = cfg.chain_spec_for(pair.models[..1].to_vec(), pair.epochs[..1].to_vec())?;
    let state = run_chain(&one, train, Some(eval), &root.join("teacher")).context("training the shared teacher")?;
    Ok(state.runs[0].clone())
}

fn transfer_arm(
    cfg: &ExperimentConfig,
    value: &str,
    spec: &ChainSpec,
    teacher: &CompletedRun,
    train: &Dataset,
    eval: &Dataset,
    dir: &Path,
) -> Result<ArmResult> {
    let run = transfer_step(spec, teacher, train, Some(eval), dir)?;
    let mut detail = describe(spec);
    if let Some(e) = &spec.expand {
        let _ = write!(detail, " expand {:?}/{:?}", e.width_method, e.depth_method);
    }
    let _ = write!(detail, " alpha {:.4}", run.alpha);
    Ok(ArmResult {
        value: value.into(),
        ok: true,
        detail,
        eval: run.final_eval,
        run_macs: Some(run.macs),
        total_macs: Some(teacher.macs + run.macs),
        baseline_macs: Some(baseline_macs(cfg, &spec.models[1], train.len())),
    })
}

type Job<'a> = Box<dyn Fn() -> Result<ArmResult> + Send + Sync + 'a>;

/// Runs every arm of `axis` into `<out>/sweep-<axis>/` and writes `sweep.csv`, `sweep.svg` and `sweep.json` there.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    axis: Axis,
    values: Option<Vec<String>>,
    train: &Dataset,
    eval: &Dataset,
) -> Result<(SweepReport, PathBuf)> {
    let values = values.unwrap_or_else(|| axis.default_values(cfg));
    if values.is_empty() {
        bail!("sweep over {} has no values", axis.name());
    }
    let root = cfg.out.join(format!("sweep-{}", axis.name()));
    std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;

    // Values are parsed up front so a typo fails before any training.
    let teacher;
    let mut jobs: Vec<(String, Job)> = Vec::new();
    match axis {
        Axis::Epochs => {
            let model = comchain::modelzoo::model(&cfg.baseline_model)?;
            for v in &values {
                let epochs: usize = v.parse().with_context(|| format!("epochs value `{v}`"))?;
                let tc = cfg.baseline_train(epochs);
                let (model, dir) = (model.clone(), root.join(sanitize(v)));
                let value = v.clone();
                jobs.push((
                    v.clone(),
                    Box::new(move || {
                        let b = run_baseline(&model, &tc, train, Some(eval), &dir)?;
                        Ok(ArmResult {
                            value: value.clone(),
                            ok: true,
                            detail: format!("{}x{}", b.model, b.epochs),
                            eval: b.final_eval,
                            run_macs: Some(b.macs),
                            total_macs: Some(b.macs),
                            baseline_macs: None,
                        })
                    }),
                ));
            }
        }
        Axis::SmallestModel | Axis::ExpansionRatio => {
            for v in &values {
                let mut fam = cfg.family.clone();
                let ratio = match axis {
                    Axis::SmallestModel => {
                        fam.smallest = v.clone();
                        fam.expansion_ratio
                    }
                    _ => v.parse::<f64>().with_context(|| format!("expansion ratio `{v}`"))?,
                };
                let models = select_chain(&fam, ratio)?;
                let epochs = cfg.chain_epochs(models.len())?;
                let spec = cfg.chain_spec_for(models, epochs)?;
                let (value, dir) = (v.clone(), root.join(sanitize(v)));
                jobs.push((v.clone(), Box::new(move || chain_arm(cfg, &value, &spec, train, eval, &dir))));
            }
        }
        Axis::Alpha | Axis::Components => {
            let pair = pair_spec(cfg)?;
            let mut specs = Vec::new();
            for v in &values {
                let mut spec = pair.clone();
                match axis {
                    Axis::Alpha => {
                        let ratio: f64 = v.parse().with_context(|| format!("alpha ratio `{v}`"))?;
                        if !(ratio >= 0.0 && ratio.is_finite()) {
                            bail!("alpha ratio `{v}` must be finite and ≥ 0");
                        }
                        spec.distill = DistillMode::Ratio { ratio };
                    }
                    _ => {
                        let c = Component::parse(v)?;
                        let iwi = matches!(c, Component::Iwi | Component::Both);
                        let ifd = matches!(c, Component::Ifd | Component::Both);
                        spec.expand = if iwi { Some(cfg.expand.spec().unwrap_or_else(|| comchain::expand::ExpandSpec::new(cfg.expand.seed))) } else { None };
                        if !ifd {
                            spec.distill = DistillMode::Off;
                        } else if spec.distill.is_off() {
                            spec.distill = ExperimentConfig::default().distill;
                        }
                    }
                }
                specs.push((v.clone(), spec));
            }
            teacher = shared_teacher(cfg, &pair, train, eval, &root)?;
            let teacher = &teacher;
            for (v, spec) in specs {
                let (value, dir) = (v.clone(), root.join(sanitize(&v)));
                jobs.push((v, Box::new(move || transfer_arm(cfg, &value, &spec, teacher, train, eval, &dir))));
            }
        }
    }

    let results: Mutex<Vec<Option<ArmResult>>> = Mutex::new(vec![None; jobs.len()]);
    let next = Mutex::new(0usize);
    let workers = parallelism().min(jobs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some((value, job)) = jobs.get(i) else { break };
                let r = job().unwrap_or_else(|e| ArmResult::failed(value, &e));
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let arms: Vec<ArmResult> = results.into_inner().expect("results lock").into_iter().map(|r| r.expect("every arm ran")).collect();

    let (mut min_epochs, mut monotone) = (None, None);
    if axis == Axis::Epochs {
        let mut pts: Vec<(f64, f64)> = arms.iter().filter_map(|a| Some((a.value.parse().ok()?, a.r1()?))).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(best) = pts.iter().map(|p| p.1).reduce(f64::max) {
            min_epochs = interpolate_min_epochs(&pts, best - cfg.lta_threshold);
            monotone = Some(pts.windows(2).all(|w| w[1].1 >= w[0].1));
        }
    }
    let report = SweepReport { axis, arms, min_epochs, monotone };
    std::fs::write(root.join("sweep.csv"), report.csv())?;
    std::fs::write(root.join("sweep.svg"), report.svg())?;
    std::fs::write(root.join("sweep.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok((report, root))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_is_linear_between_points() {
        let pts = [(15.0, 60.0), (30.0, 80.0), (60.0, 90.0)];
        assert_eq!(interpolate_min_epochs(&pts, 70.0), Some(22.5));
        assert_eq!(interpolate_min_epochs(&pts, 50.0), Some(15.0));
        assert_eq!(interpolate_min_epochs(&pts, 90.0), Some(60.0));
        assert_eq!(interpolate_min_epochs(&pts, 95.0), None);
    }

    #[test]
    fn axis_names_roundtrip() {
        for a in Axis::ALL {
            assert_eq!(a.name().parse::<Axis>().unwrap(), a);
        }
        assert!("width".parse::<Axis>().is_err());
    }

    #[test]
    fn failed_arm_keeps_csv_shape() {
        let r = SweepReport {
            axis: Axis::Alpha,
            arms: vec![ArmResult::failed("0.1", &anyhow!("boom, with comma\nand newline"))],
            min_epochs: None,
            monotone: None,
        };
        let csv = r.csv();
        let cols = csv.lines().next().unwrap().split(',').count();
        assert!(csv.lines().all(|l| l.split(',').count() == cols), "{csv}");
        assert_eq!(r.failures(), 1);
    }
}
