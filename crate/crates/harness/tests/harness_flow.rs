use std::path::Path;

use comchain::chain::{run_baseline, run_chain};
use comchain::data::SyntheticSpec;
use comchain::modelzoo::model;
use comchain_harness::config::ExperimentConfig;
use comchain_harness::report::emit_report;
use comchain_harness::sweep::{run_sweep, Axis};
use comchain_harness::workspace;

/// A config small enough to train in seconds.
fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        out: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.data.spec = SyntheticSpec { n_classes: 4, per_class: 10, ..SyntheticSpec::default() };
    cfg.family.smallest = "nano_xs".into();
    cfg.family.largest = "nano_t".into();
    cfg.baseline_model = "nano_xs".into();
    cfg.schedule.epochs = Some(vec![2, 1]);
    cfg.schedule.baseline_epochs = 2;
    cfg.optim.batch_size = 16;
    cfg.optim.baseline_warmup = 2;
    cfg.optim.chain_warmup = 1;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn prepare_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let a = workspace::prepare(&cfg).unwrap();
    let b = workspace::prepare(&cfg).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.train.len() + a.eval.len(), 40);
    let reopened = workspace::open_split(&a.dir.join("eval.json")).unwrap();
    assert_eq!(reopened, a.eval);
}

#[test]
fn report_is_deterministic_and_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let s = workspace::prepare(&cfg).unwrap();
    for name in ["nano_xs", "nano_t"] {
        let m = model(name).unwrap();
        run_baseline(&m, &cfg.baseline_train(2), &s.train, Some(&s.eval), &dir.path().join("baselines").join(name)).unwrap();
    }
    let state = run_chain(&cfg.chain_spec().unwrap(), &s.train, Some(&s.eval), &dir.path().join("chain")).unwrap();
    assert!(state.is_complete());

    let first = emit_report(dir.path(), 2.0).unwrap();
    let md = std::fs::read_to_string(&first.markdown).unwrap();
    let again = emit_report(dir.path(), 2.0).unwrap();
    assert_eq!(std::fs::read_to_string(&again.markdown).unwrap(), md);
    assert!(md.contains("chain-1-nano_t") && md.contains("acc. ratio") && md.contains("| nano_t |"), "{md}");
    for chart in &first.charts {
        let svg = std::fs::read_to_string(chart).unwrap();
        roxmltree::Document::parse(&svg).unwrap();
    }
}

#[test]
fn empty_directory_names_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let msg = emit_report(dir.path(), 2.0).unwrap_err().to_string();
    assert!(msg.contains("metrics") && msg.contains(".jsonl"), "{msg}");
}

#[test]
fn single_value_sweep_equals_plain_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let s = workspace::prepare(&cfg).unwrap();
    let (rep, root) = run_sweep(&cfg, Axis::Epochs, Some(vec!["2".into()]), &s.train, &s.eval).unwrap();
    let plain = run_baseline(&model("nano_xs").unwrap(), &cfg.baseline_train(2), &s.train, Some(&s.eval), &dir.path().join("plain")).unwrap();
    let arm = rep.arm("2").unwrap();
    assert_eq!(arm.eval, plain.final_eval);
    assert_eq!(arm.run_macs, Some(plain.macs));
    assert!(root.join("sweep.csv").exists());
    roxmltree::Document::parse(&std::fs::read_to_string(root.join("sweep.svg")).unwrap()).unwrap();
}

#[test]
fn failed_arm_is_recorded_and_sweep_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let s = workspace::prepare(&cfg).unwrap();
    let (rep, root) = run_sweep(&cfg, Axis::Epochs, Some(vec!["0".into(), "1".into()]), &s.train, &s.eval).unwrap();
    assert_eq!(rep.failures(), 1);
    assert!(!rep.arm("0").unwrap().ok);
    assert!(rep.arm("1").unwrap().ok);
    let csv = std::fs::read_to_string(root.join("sweep.csv")).unwrap();
    assert!(csv.contains("epochs,0,failed") && csv.contains("epochs,1,ok"), "{csv}");
}

#[test]
fn components_arms_share_one_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let s = workspace::prepare(&cfg).unwrap();
    let (rep, root) = run_sweep(&cfg, Axis::Components, None, &s.train, &s.eval).unwrap();
    assert_eq!(rep.failures(), 0, "{}", rep.csv());
    let totals: Vec<f64> = rep.arms.iter().map(|a| a.total_macs.unwrap() - a.run_macs.unwrap()).collect();
    assert!(totals.windows(2).all(|w| w[0] == w[1]), "{totals:?}");
    assert!(root.join("teacher").join("chain_state.json").exists());
    // Only distilling arms pay for teacher forwards.
    let run = |v: &str| rep.arm(v).unwrap().run_macs.unwrap();
    assert_eq!(run("none"), run("iwi"));
    assert_eq!(run("ifd"), run("both"));
    assert!(run("ifd") > run("none"));
}

#[test]
fn unknown_sweep_value_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let s = workspace::prepare(&cfg).unwrap();
    assert!(run_sweep(&cfg, Axis::Components, Some(vec!["half".into()]), &s.train, &s.eval).is_err());
    assert!(!dir.path().join("sweep-components").join("teacher").exists());
}

#[test]
fn shipped_config_spells_out_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::default());
}
