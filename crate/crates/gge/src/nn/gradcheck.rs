//! Finite-difference gradient checking for the full forward+loss pipeline.

use super::{ParamGrads, Params};
use crate::data::Instance;
use crate::losses::{loss, loss_grad_wrt_logits, LossFamily};
use crate::models::ArchitectureSpec;
use crate::Result;

/// Max relative error between `analytic` and central differences of
/// `loss_fn`, probing every scalar parameter.
///
/// The error for one scalar is `|a - n| / max(1, |a|, |n|)`, which stays
/// meaningful for near-zero gradients where plain relative error would be
/// dominated by finite-difference noise.
pub fn grad_check_generic<F>(
    params: &Params,
    analytic: &ParamGrads,
    eps: f64,
    mut loss_fn: F,
) -> Result<f64>
where
    F: FnMut(&Params) -> Result<f64>,
{
    assert!(eps > 0.0 && eps <= 1e-2, "eps must be in (0, 1e-2]");
    let mut probe = params.clone();
    let mut max_err: f64 = 0.0;

    let names: Vec<String> = params.entries.keys().cloned().collect();
    for name in &names {
        let n_w = params.entries[name].w.data().len();
        let n_b = params.entries[name].b.len();
        for i in 0..n_w + n_b {
            let read = |p: &Params| {
                let l = &p.entries[name];
                if i < n_w {
                    l.w.data()[i]
                } else {
                    l.b[i - n_w]
                }
            };
            let write = |p: &mut Params, v: f64| {
                let l = &mut p.entries[name];
                if i < n_w {
                    l.w.data_mut()[i] = v;
                } else {
                    l.b[i - n_w] = v;
                }
            };
            let orig = read(params);
            write(&mut probe, orig + eps);
            let hi = loss_fn(&probe)?;
            write(&mut probe, orig - eps);
            let lo = loss_fn(&probe)?;
            write(&mut probe, orig);
            let numeric = (hi - lo) / (2.0 * eps);
            let a = read(analytic);
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

/// Gradient check for one architecture under one loss family: analytic
/// gradients from the manual backward pass against central differences of
/// the full forward+loss pipeline on `inst`.
pub fn grad_check(
    arch: &ArchitectureSpec,
    params: &Params,
    inst: &Instance,
    family: LossFamily,
    eps: f64,
) -> Result<f64> {
    let fwd = crate::models::forward(arch, params, inst)?;
    let g = loss_grad_wrt_logits(family, &fwd.logits, &inst.label);
    let analytic = crate::models::backward(arch, params, &fwd.cache, &g)?;
    grad_check_generic(params, &analytic, eps, |p| {
        let f = crate::models::forward(arch, p, inst)?;
        Ok(loss(family, &f.logits, &inst.label))
    })
}
