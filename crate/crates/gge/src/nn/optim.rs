use serde::{Deserialize, Serialize};

use super::{ParamGrads, Params};
use crate::{Error, Result};

const EPS: f64 = 1e-8;

/// Adamax state: first moment `m`, infinity-norm accumulator `u`, and the
/// step counter used for bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Params,
    pub u: Params,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl OptimizerState {
    pub fn new(params: &Params, lr: f64) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            u: params.zeros_like(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

/// One Adamax update:
///
/// ```text
/// m <- b1*m + (1-b1)*g
/// u <- max(b2*u, |g|)
/// w <- w - lr/(1 - b1^t) * m / (u + eps)
/// ```
pub fn adamax_step(state: &mut OptimizerState, params: &mut Params, grads: &ParamGrads) -> Result<()> {
    state.t += 1;
    let correction = 1.0 - state.beta1.powi(state.t as i32);
    let step = state.lr / correction;

    for (name, layer) in params.entries.iter_mut() {
        let g = grads
            .entries
            .get(name)
            .ok_or_else(|| Error::Shape(format!("gradients missing layer `{name}`")))?;
        if !(g.w.is_finite() && g.b.iter().all(|v| v.is_finite())) {
            return Err(Error::Numeric {
                name: name.clone(),
                detail: "non-finite gradient".into(),
            });
        }
        let m = &mut state.m.entries[name];
        let u = &mut state.u.entries[name];

        for i in 0..layer.w.data().len() {
            let gv = g.w.data()[i];
            let mv = state.beta1 * m.w.data()[i] + (1.0 - state.beta1) * gv;
            let uv = (state.beta2 * u.w.data()[i]).max(gv.abs());
            m.w.data_mut()[i] = mv;
            u.w.data_mut()[i] = uv;
            layer.w.data_mut()[i] -= step * mv / (uv + EPS);
        }
        for i in 0..layer.b.len() {
            let gv = g.b[i];
            let mv = state.beta1 * m.b[i] + (1.0 - state.beta1) * gv;
            let uv = (state.beta2 * u.b[i]).max(gv.abs());
            m.b[i] = mv;
            u.b[i] = uv;
            layer.b[i] -= step * mv / (uv + EPS);
        }
    }
    Ok(())
}
