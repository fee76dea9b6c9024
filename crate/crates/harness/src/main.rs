use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use comchain::chain::{run_baseline, run_chain, validate_first_pair, BaselineRun};
use comchain::checkpoint::load_checkpoint;
use comchain::eval::eval_retrieval;
use comchain::modelzoo::model;
use comchain_harness::config::ExperimentConfig;
use comchain_harness::sweep::{run_sweep, Axis};
use comchain_harness::{macs, report, workspace};

#[derive(Parser)]
#[command(name = "comchain", version, about = "Chain-of-models training of two-tower contrastive encoders")]
struct Cli {
    /// TOML experiment config; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the lossless-acceleration threshold in R@1 points.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its train/eval split manifests.
    GenData,
    /// Train one model from scratch with the task loss only.
    TrainBaseline {
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the configured chain, resuming if the output already holds one.
    TrainChain {
        /// Validate the first pair against its baseline first, relaxing the schedule on failure.
        #[arg(long)]
        validate_first_pair: bool,
    },
    /// Retrieval metrics of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
    },
    /// Analytic MAC and parameter tables.
    Macs {
        /// Family preset: `vit_ref` validates against the published tables, `nano` plans the desk-scale chain.
        #[arg(long, default_value = "vit_ref")]
        preset: String,
    },
    /// Sweep one chain design axis.
    Sweep {
        /// epochs, smallest-model, expansion-ratio, alpha or components.
        #[arg(long)]
        axis: Axis,
        /// Comma-separated values; each axis has defaults.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Markdown report and SVG curves from every metrics file under a directory.
    Report {
        /// Defaults to the output directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(t) = cli.threshold {
        cfg.lta_threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn baseline_dir(cfg: &ExperimentConfig, model: &str, epochs: usize) -> PathBuf {
    cfg.out.join("baselines").join(format!("{model}-e{epochs}"))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData => {
            let s = workspace::prepare(&cfg)?;
            println!(
                "data in {}: {} train, {} eval samples",
                s.dir.display(),
                s.train.len(),
                s.eval.len()
            );
        }
        Command::TrainBaseline { model: name, epochs } => {
            let name = name.unwrap_or_else(|| cfg.baseline_model.clone());
            let epochs = epochs.unwrap_or(cfg.schedule.baseline_epochs);
            let m = model(&name)?;
            let s = workspace::prepare(&cfg)?;
            let dir = baseline_dir(&cfg, &name, epochs);
            let b = run_baseline(&m, &cfg.baseline_train(epochs), &s.train, Some(&s.eval), &dir)?;
            println!("{}", serde_json::to_string_pretty(&b)?);
        }
        Command::TrainChain { validate_first_pair: validate } => {
            let s = workspace::prepare(&cfg)?;
            let mut spec = cfg.chain_spec()?;
            if validate {
                let Some(second) = spec.models.get(1) else {
                    bail!("first-pair validation needs at least two chain models");
                };
                let dir = baseline_dir(&cfg, &second.name, cfg.schedule.baseline_epochs);
                let path = dir.join(format!("baseline-{}-e{}.json", second.name, cfg.schedule.baseline_epochs));
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("{} missing; run train-baseline --model {} first", path.display(), second.name))?;
                let base: BaselineRun = serde_json::from_str(&text)?;
                let Some(metric) = base.final_eval else { bail!("{} has no evaluation", path.display()) };
                let v = validate_first_pair(&spec, &s.train, &s.eval, metric.r1(), cfg.lta_threshold, &cfg.out.join("first-pair"))?;
                println!("first pair passed after {} relaxation(s); epochs {:?}", v.relaxations, v.spec.epochs);
                spec = v.spec;
            }
            let state = run_chain(&spec, &s.train, Some(&s.eval), &cfg.out.join("chain"))?;
            for r in &state.runs {
                let r1 = r.final_eval.map_or("n/a".to_string(), |e| format!("{:.2}", e.r1()));
                println!("{} x{}: R@1 {r1}, {:.4e} MACs, alpha {:.4}", r.model, r.epochs, r.macs, r.alpha);
            }
            println!("total {:.4e} MACs", state.cumulative_macs);
        }
        Command::Eval { checkpoint, split } => {
            let (params, mcfg) = load_checkpoint(&checkpoint)?;
            workspace::prepare(&cfg)?;
            let name = match split {
                Split::Train => "train.json",
                Split::Eval => "eval.json",
            };
            let dir = match &cfg.data.manifest {
                Some(m) => m.parent().map(PathBuf::from).unwrap_or_default(),
                None => workspace::data_dir(&cfg),
            };
            let ds = workspace::open_split(&dir.join(name))?;
            println!("{}", serde_json::to_string_pretty(&eval_retrieval(&params, &mcfg, &ds)?)?);
        }
        Command::Macs { preset } => {
            if preset == "vit_ref" {
                let (text, ok) = macs::reference_report()?;
                println!("{text}");
                if !ok {
                    return Ok(ExitCode::FAILURE);
                }
            } else {
                let n_train = (cfg.data.spec.len() as f64 * cfg.data.fractions[0]).round() as usize;
                println!("{}", macs::family_report(&cfg, &preset, n_train)?);
            }
        }
        Command::Sweep { axis, values } => {
            let s = workspace::prepare(&cfg)?;
            let (rep, dir) = run_sweep(&cfg, axis, values, &s.train, &s.eval)?;
            print!("{}", rep.csv());
            if let Some(e) = rep.min_epochs {
                println!("interpolated minimum epochs: {e:.2}");
            }
            if rep.monotone == Some(false) {
                println!("note: R@1 is not monotone in epochs");
            }
            println!("written to {}", dir.display());
            if rep.failures() > 0 {
                eprintln!("{} arm(s) failed", rep.failures());
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report { dir } => {
            let dir = dir.unwrap_or_else(|| cfg.out.clone());
            let r = report::emit_report(&dir, cfg.lta_threshold)?;
            println!("{}", r.markdown.display());
            for c in r.charts {
                println!("{}", c.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
