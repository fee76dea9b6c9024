//! Analytic cost reports for the `macs` subcommand.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use comchain::complexity::{
    breakdown, chain_report, published_report, reference_checks, reference_table_markdown, run_macs, RunCost,
    SampleSpec,
};
use comchain::modelzoo::{family, param_count};

use crate::config::ExperimentConfig;

/// Models whose architecture numbers are checked at 5% (MACs) and 2% (params).
pub const CHECKED_REFERENCE_MODELS: [&str; 4] = ["vit_t16_ref", "vit_s16_ref", "vit_b16_ref", "vit_l16_ref"];

/// Reference family table, the published cost comparison, and whether every checked row is in tolerance.
pub fn reference_report() -> Result<(String, bool)> {
    let checks = reference_checks()?;
    let mut ok = true;
    let mut s = String::from("## Reference family: computed vs published\n\n");
    s += &reference_table_markdown(&checks);
    s += "\n";
    for c in checks.iter().filter(|c| CHECKED_REFERENCE_MODELS.contains(&c.model.as_str())) {
        let pass = c.forward_err() <= 0.05 && c.training_err() <= 0.05 && c.params_err() <= 0.02;
        ok &= pass;
        let _ = writeln!(
            s,
            "- {} {}: forward {:.2}%, training {:.2}%, params {:.2}%",
            if pass { "PASS" } else { "FAIL" },
            c.model,
            100.0 * c.forward_err(),
            100.0 * c.training_err(),
            100.0 * c.params_err()
        );
    }
    s += "\n## Published run costs (10¹⁰ GMACs)\n\n";
    s += &published_report()?.table(1.0, "10¹⁰ G");
    Ok((s, ok))
}

/// Per-model costs of a desk-scale family and the configured chain against analytic baselines.
pub fn family_report(cfg: &ExperimentConfig, preset: &str, n_train: usize) -> Result<String> {
    let fam = family(preset)?;
    let sample = SampleSpec { text_passes: cfg.optim.captions };
    let batch = cfg.optim.batch_size;
    let mut s = format!(
        "## Family `{preset}` ({} text passes per image, batch {batch})\n\n| model | params | C_f | C_b | C_u | C_t |\n|---|---:|---:|---:|---:|---:|\n",
        sample.text_passes
    );
    for m in &fam.models {
        let b = breakdown(m, sample, batch);
        let _ = writeln!(
            s,
            "| {} | {} | {:.4e} | {:.4e} | {:.4e} | {:.4e} |",
            m.name,
            param_count(m),
            b.c_f,
            b.c_b,
            b.c_u,
            b.c_t
        );
    }
    if preset != cfg.family.preset {
        return Ok(s);
    }
    let spec = cfg.chain_spec()?;
    if spec.models.is_empty() {
        bail!("empty chain");
    }
    let chain: Vec<RunCost> = spec
        .models
        .iter()
        .enumerate()
        .map(|(i, m)| RunCost {
            model: m.name.clone(),
            macs: run_macs(m, n_train, spec.epochs[i], (i > 0).then(|| &spec.models[i - 1]), sample, batch),
        })
        .collect();
    let base: Vec<RunCost> = spec
        .models
        .iter()
        .map(|m| RunCost {
            model: m.name.clone(),
            macs: run_macs(m, n_train, cfg.schedule.baseline_epochs, None, sample, batch),
        })
        .collect();
    let epochs: Vec<String> = spec.models.iter().zip(&spec.epochs).map(|(m, e)| format!("{}×{e}", m.name)).collect();
    let _ = write!(
        s,
        "\n## Planned chain {} on {n_train} samples vs {}-epoch baselines (GMACs)\n\n",
        epochs.join(" → "),
        cfg.schedule.baseline_epochs
    );
    s += &chain_report(&chain, &base)?.table(1e9, "GMACs");
    Ok(s)
}
