use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamSet;

/// AdamW hyperparameters. Defaults follow the baseline pre-training recipe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Per-parameter moments plus the shared step counter.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    /// Parameters updated without decoupled weight decay.
    pub no_decay: BTreeSet<String>,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
    step: u64,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            no_decay: BTreeSet::new(),
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f32]> {
        self.moments.get(name).map(|(m, _)| m.as_slice())
    }
}

/// One decoupled-weight-decay Adam update at learning rate `lr`.
///
/// All gradients are validated before any parameter is touched, so a
/// non-finite gradient leaves `params` and `state` unchanged.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| {
            Error::Contract(format!("gradient for unknown parameter `{name}`"))
        })?;
        if p.shape() != g.shape() {
            return Err(Error::dim(
                "adamw_step",
                format!("`{name}`: param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }

    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);

    for (name, g) in grads {
        let p = params.get_mut(name).expect("validated above");
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
        let decay = if state.no_decay.contains(name) {
            1.0
        } else {
            (1.0 - lr * cfg.weight_decay) as f32
        };
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = f64::from(*mi) / bc1;
            let vhat = f64::from(*vi) / bc2;
            let update = lr * mhat / (vhat.sqrt() + cfg.eps);
            *w = (f64::from(*w * decay) - update) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f32) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::scalar(p));
        ps
    }

    fn grad(g: f32) -> BTreeMap<String, Tensor<f32>> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut ps = single(0.37);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimState::new(cfg);
        for _ in 0..3 {
            adamw_step(&mut ps, &grad(0.0), &mut st, 0.1).unwrap();
        }
        assert_eq!(ps.get("p").unwrap().item(), 0.37);
        assert_eq!(st.step(), 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after bias correction, so the step is lr·g/(|g|+ε).
        let mut ps = single(1.0);
        let mut st = OptimState::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        adamw_step(&mut ps, &grad(1.0), &mut st, 0.1).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((f64::from(ps.get("p").unwrap().item()) - expected).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut ps = single(2.0);
        let mut st = OptimState::new(AdamWConfig::default());
        adamw_step(&mut ps, &grad(0.0), &mut st, 0.1).unwrap();
        assert!((ps.get("p").unwrap().item() - 2.0 * 0.99).abs() < 1e-7);
    }

    #[test]
    fn no_decay_set_is_respected() {
        let mut ps = single(2.0);
        let mut st = OptimState::new(AdamWConfig::default());
        st.no_decay.insert("p".into());
        adamw_step(&mut ps, &grad(0.0), &mut st, 0.1).unwrap();
        assert_eq!(ps.get("p").unwrap().item(), 2.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ps = single(1.0);
        let mut st = OptimState::new(AdamWConfig::default());
        let err = adamw_step(&mut ps, &grad(f32::NAN), &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p"));
        assert_eq!(st.step(), 0);
        assert_eq!(ps.get("p").unwrap().item(), 1.0);
    }

    #[test]
    fn unknown_gradient_key_rejected() {
        let mut ps = single(1.0);
        let mut st = OptimState::new(AdamWConfig::default());
        let g = BTreeMap::from([("q".to_string(), Tensor::scalar(1.0))]);
        assert!(adamw_step(&mut ps, &g, &mut st, 0.1).is_err());
    }
}
