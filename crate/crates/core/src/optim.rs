//! Bias-corrected Adam.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_alpha() -> f64 {
    2e-4
}
fn default_beta1() -> f64 {
    0.5
}
fn default_beta2() -> f64 {
    0.9
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl AdamHyper {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid adam hyperparameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Array>,
    pub v: BTreeMap<String, Array>,
    pub hyper: AdamHyper,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ParamStore, hyper: AdamHyper) -> Self {
        let zeros: BTreeMap<String, Array> = params
            .iter()
            .map(|(k, v)| (k.clone(), Array::zeros(v.shape())))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            hyper,
        }
    }
}

/// One Adam update of every parameter in `params`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Array>,
    state: &mut AdamState,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::MissingKey(format!("gradient {name}")))?;
        if g.shape() != p.shape() {
            return Err(shape_err("adam_step", format!("{name}: grad {:?} vs param {:?}", g.shape(), p.shape())));
        }
        for (slot, what) in [(&state.m, "first moment"), (&state.v, "second moment")] {
            if slot.get(name).map(Array::shape) != Some(p.shape()) {
                return Err(Error::MissingKey(format!("{what} {name}")));
            }
        }
    }
    let AdamHyper {
        alpha,
        beta1,
        beta2,
        eps,
    } = state.hyper;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = grads[&name].data();
        let m = state.m.get_mut(&name).expect("checked").data_mut();
        let v = state.v.get_mut(&name).expect("checked").data_mut();
        let p = params.get_mut(&name)?.data_mut();
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= alpha * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
