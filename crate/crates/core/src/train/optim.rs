use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled (AdamW) decay; 0 gives plain Adam.
    pub weight_decay: f32,
}

impl AdamConfig {
    pub fn adam(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f32, weight_decay: f32) -> Self {
        Self {
            weight_decay,
            ..Self::adam(lr)
        }
    }
}

/// Weights and embedding tables decay; biases and norm parameters do not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w") || name.ends_with(".tok") || name.ends_with(".pos")
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    /// Zero moments for `names`, shaped like the stored parameters.
    pub fn for_params<'a>(
        config: AdamConfig,
        store: &ParamStore,
        names: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let mut m = BTreeMap::new();
        for n in names {
            m.insert(n.to_string(), Tensor::zeros(store.get(n)?.shape()));
        }
        Ok(Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        })
    }
}

/// One Adam(W) update of every parameter tracked by `state`.
pub fn adam_step(params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut OptimizerState) -> Result<()> {
    for name in state.m.keys() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for trainable parameter {name}")))?;
        let p = params.get(name)?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", g.shape(), p.shape()));
        }
    }
    if let Some(extra) = grads.keys().find(|k| !state.m.contains_key(*k)) {
        return Err(Error::Contract(format!("gradient for untracked parameter {extra}")));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - (c.beta1 as f64).powi(t);
    let bc2 = 1.0 - (c.beta2 as f64).powi(t);
    for (name, m) in state.m.iter_mut() {
        let v = state.v.get_mut(name).expect("moments share keys");
        let g = &grads[name];
        let p = params.get_mut(name)?;
        let decay = if decays(name) { c.weight_decay } else { 0.0 };
        for (((pi, mi), vi), &gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let m_hat = *mi as f64 / bc1;
            let v_hat = *vi as f64 / bc2;
            if decay != 0.0 {
                *pi -= c.lr * decay * *pi;
            }
            *pi -= (c.lr as f64 * m_hat / (v_hat.sqrt() + c.eps as f64)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f32, grad: f32, cfg: AdamConfig) -> (ParamStore, BTreeMap<String, Tensor>, OptimizerState) {
        let mut s = ParamStore::new();
        s.insert("p.w", Tensor::full(&[1], value));
        let st = OptimizerState::for_params(cfg, &s, ["p.w"]).unwrap();
        let mut g = BTreeMap::new();
        g.insert("p.w".to_string(), Tensor::full(&[1], grad));
        (s, g, st)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, g, mut st) = single(0.0, 1.0, AdamConfig::adam(0.1));
        adam_step(&mut s, &g, &mut st).unwrap();
        assert!((s.get("p.w").unwrap().data()[0] + 0.1).abs() < 1e-6);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_keeps_param_and_decays_moments() {
        let (mut s, g, mut st) = single(0.5, 1.0, AdamConfig::adam(0.1));
        adam_step(&mut s, &g, &mut st).unwrap();
        let after_one = s.get("p.w").unwrap().data()[0];
        let m1 = st.m["p.w"].data()[0];
        let mut zero = g.clone();
        zero.insert("p.w".into(), Tensor::zeros(&[1]));
        let mut st0 = OptimizerState::for_params(AdamConfig::adam(0.1), &s, ["p.w"]).unwrap();
        adam_step(&mut s, &zero, &mut st0).unwrap();
        assert_eq!(s.get("p.w").unwrap().data()[0], after_one);
        adam_step(&mut s, &zero, &mut st).unwrap();
        assert!(st.m["p.w"].data()[0] < m1);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let (mut s, _, mut st) = single(0.0, 1.0, AdamConfig::adam(0.1));
        assert!(matches!(adam_step(&mut s, &BTreeMap::new(), &mut st), Err(Error::Contract(_))));
    }

    #[test]
    fn adamw_skips_biases() {
        let mut s = ParamStore::new();
        s.insert("l.w", Tensor::full(&[1], 1.0));
        s.insert("l.b", Tensor::full(&[1], 1.0));
        let mut st = OptimizerState::for_params(AdamConfig::adamw(0.1, 0.5), &s, ["l.w", "l.b"]).unwrap();
        let g: BTreeMap<_, _> = [("l.w".to_string(), Tensor::zeros(&[1])), ("l.b".to_string(), Tensor::zeros(&[1]))]
            .into_iter()
            .collect();
        adam_step(&mut s, &g, &mut st).unwrap();
        assert!((s.get("l.w").unwrap().data()[0] - 0.95).abs() < 1e-6);
        assert_eq!(s.get("l.b").unwrap().data()[0], 1.0);
    }
}
