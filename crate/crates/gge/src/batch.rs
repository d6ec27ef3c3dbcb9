//! Batch-level forward and backward passes used by the trainers.
//!
//! These compute exactly the same functions as the per-instance passes in
//! [`crate::models`], but over a whole batch at once with the matrix-matrix
//! kernels from [`crate::nn`], which keeps the inner loops in fused
//! multiply-adds instead of short dot products and amortizes parameter
//! lookups and buffer allocations over the batch. Evaluation and the
//! gradient checker keep using the per-instance passes; the equivalence of
//! the two paths is pinned by tests at the bottom of this file.

use crate::data::Instance;
use crate::losses::softmax;
use crate::models::{ArchitectureSpec, ModelKind};
use crate::nn::{col_sums_acc, dot, gemm_atx_acc, gemm_xw, gemm_xwt_bias, Matrix, ParamGrads, Params};
use crate::{Error, Result};

/// Forward output for a whole batch: row `i` belongs to instance `i`.
pub struct BatchForward {
    pub logits: Matrix,
    cache: BatchCache,
}

impl BatchForward {
    /// Joint representation rows (base attention model only).
    pub fn joint(&self) -> Option<&Matrix> {
        match &self.cache {
            BatchCache::Base(c) => Some(&c.joint),
            _ => None,
        }
    }
}

enum BatchCache {
    Base(BaseBatchCache),
    TwoLayer(TwoLayerBatchCache),
    Head(HeadBatchCache),
}

/// Activations are stored post-relu, like the per-instance caches. Regions
/// are flattened: row `b * n_v + i` of the region matrices belongs to region
/// `i` of instance `b`.
struct BaseBatchCache {
    n_v: usize,
    ctx: Matrix,
    ev: Matrix,
    query: Matrix,
    region_had: Matrix,
    key: Matrix,
    alpha: Matrix,
    pooled: Matrix,
    r_vision: Matrix,
    r_context: Matrix,
    joint: Matrix,
    r_cls: Matrix,
}

struct TwoLayerBatchCache {
    input: Matrix,
    h1: Matrix,
    fc1: &'static str,
    fc2: &'static str,
}

struct HeadBatchCache {
    input: Matrix,
    layer: &'static str,
}

fn rows_from_contexts(batch: &[&Instance]) -> Result<Matrix> {
    let d_q = batch[0].context.len();
    let mut m = Matrix::zeros(batch.len(), d_q);
    for (b, inst) in batch.iter().enumerate() {
        if inst.context.len() != d_q {
            return Err(Error::Shape("inconsistent context widths in batch".into()));
        }
        m.row_mut(b).copy_from_slice(&inst.context);
    }
    Ok(m)
}

fn rows_from_evidence(batch: &[&Instance]) -> Result<(Matrix, usize)> {
    let n_v = batch[0].evidence.rows();
    let d_v = batch[0].evidence.cols();
    let mut m = Matrix::zeros(batch.len() * n_v, d_v);
    for (b, inst) in batch.iter().enumerate() {
        if inst.evidence.rows() != n_v || inst.evidence.cols() != d_v {
            return Err(Error::Shape("inconsistent evidence shapes in batch".into()));
        }
        for i in 0..n_v {
            m.row_mut(b * n_v + i).copy_from_slice(inst.evidence.row(i));
        }
    }
    Ok((m, n_v))
}

/// `out[r] = a[r] (.) b[r]` elementwise over equal-shaped matrices.
fn hadamard_rows(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    for ((o, x), y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = x * y;
    }
}

/// Zero `g` wherever the stored relu activation is not positive, in place.
fn gate_by(g: &mut Matrix, act: &Matrix) {
    for (gv, &a) in g.data_mut().iter_mut().zip(act.data()) {
        if !(a > 0.0) {
            *gv = 0.0;
        }
    }
}

/// Attention-pooling base model over a batch.
pub fn forward_base_batch(params: &Params, batch: &[&Instance]) -> Result<BatchForward> {
    let wq = params.get("att.query")?;
    let wk = params.get("att.key")?;
    let ws = params.get("att.score")?;
    let wv2 = params.get("fuse.vision")?;
    let wq2 = params.get("fuse.context")?;
    let c1 = params.get("cls.fc1")?;
    let c2 = params.get("cls.fc2")?;

    let n = batch.len();
    let ctx = rows_from_contexts(batch)?;
    let (ev, n_v) = rows_from_evidence(batch)?;
    let d_v = ev.cols();
    let hidden = wk.w.rows();

    let mut query = Matrix::zeros(n, wq.w.rows());
    gemm_xwt_bias(&ctx, &wq.w, &wq.b, true, &mut query)?;

    let mut region_had = Matrix::zeros(n * n_v, d_v);
    for b in 0..n {
        let qrow = query.row(b);
        for i in 0..n_v {
            let r = b * n_v + i;
            for ((h, x), y) in region_had.row_mut(r).iter_mut().zip(ev.row(r)).zip(qrow) {
                *h = x * y;
            }
        }
    }

    let mut key = Matrix::zeros(n * n_v, hidden);
    gemm_xwt_bias(&region_had, &wk.w, &wk.b, true, &mut key)?;

    let mut alpha = Matrix::zeros(n, n_v);
    let mut scores = vec![0.0; n_v];
    for b in 0..n {
        for (i, s) in scores.iter_mut().enumerate() {
            *s = dot(ws.w.row(0), key.row(b * n_v + i)) + ws.b[0];
        }
        alpha.row_mut(b).copy_from_slice(&softmax(&scores));
    }

    let mut pooled = Matrix::zeros(n, d_v);
    for b in 0..n {
        for i in 0..n_v {
            let a = alpha.get(b, i);
            for (p, v) in pooled.row_mut(b).iter_mut().zip(ev.row(b * n_v + i)) {
                *p = a.mul_add(*v, *p);
            }
        }
    }

    let mut r_vision = Matrix::zeros(n, wv2.w.rows());
    gemm_xwt_bias(&pooled, &wv2.w, &wv2.b, true, &mut r_vision)?;
    let mut r_context = Matrix::zeros(n, wq2.w.rows());
    gemm_xwt_bias(&ctx, &wq2.w, &wq2.b, true, &mut r_context)?;
    let mut joint = Matrix::zeros(n, r_vision.cols());
    hadamard_rows(&r_vision, &r_context, &mut joint);

    let mut r_cls = Matrix::zeros(n, c1.w.rows());
    gemm_xwt_bias(&joint, &c1.w, &c1.b, true, &mut r_cls)?;
    let mut logits = Matrix::zeros(n, c2.w.rows());
    gemm_xwt_bias(&r_cls, &c2.w, &c2.b, false, &mut logits)?;

    Ok(BatchForward {
        logits,
        cache: BatchCache::Base(BaseBatchCache {
            n_v,
            ctx,
            ev,
            query,
            region_had,
            key,
            alpha,
            pooled,
            r_vision,
            r_context,
            joint,
            r_cls,
        }),
    })
}

fn forward_two_layer_batch(
    params: &Params,
    input: Matrix,
    fc1: &'static str,
    fc2: &'static str,
) -> Result<BatchForward> {
    let l1 = params.get(fc1)?;
    let l2 = params.get(fc2)?;
    let mut h1 = Matrix::zeros(input.rows(), l1.w.rows());
    gemm_xwt_bias(&input, &l1.w, &l1.b, true, &mut h1)?;
    let mut logits = Matrix::zeros(input.rows(), l2.w.rows());
    gemm_xwt_bias(&h1, &l2.w, &l2.b, false, &mut logits)?;
    Ok(BatchForward {
        logits,
        cache: BatchCache::TwoLayer(TwoLayerBatchCache { input, h1, fc1, fc2 }),
    })
}

/// Context-only branch over a batch.
pub fn forward_context_branch_batch(params: &Params, batch: &[&Instance]) -> Result<BatchForward> {
    forward_two_layer_batch(params, rows_from_contexts(batch)?, "ctx.fc1", "ctx.fc2")
}

/// Evidence-only variant over a batch: mean-pooled regions, 2-layer head.
pub fn forward_evidence_only_batch(params: &Params, batch: &[&Instance]) -> Result<BatchForward> {
    let (ev, n_v) = rows_from_evidence(batch)?;
    let mut pooled = Matrix::zeros(batch.len(), ev.cols());
    let inv = 1.0 / n_v as f64;
    for b in 0..batch.len() {
        for i in 0..n_v {
            for (p, v) in pooled.row_mut(b).iter_mut().zip(ev.row(b * n_v + i)) {
                *p += v * inv;
            }
        }
    }
    forward_two_layer_batch(params, pooled, "ev.fc1", "ev.fc2")
}

/// Self-ensemble head over a batch of (detached) joint representations.
pub fn forward_self_head_batch(params: &Params, joint: &Matrix) -> Result<BatchForward> {
    let l = params.get("self.cls")?;
    let mut logits = Matrix::zeros(joint.rows(), l.w.rows());
    gemm_xwt_bias(joint, &l.w, &l.b, false, &mut logits)?;
    Ok(BatchForward {
        logits,
        cache: BatchCache::Head(HeadBatchCache { input: joint.clone(), layer: "self.cls" }),
    })
}

/// RUBi masking head over a batch of context-branch logits.
pub fn forward_rubi_head_batch(params: &Params, branch_logits: &Matrix) -> Result<BatchForward> {
    let l = params.get("rubi.cq")?;
    let mut logits = Matrix::zeros(branch_logits.rows(), l.w.rows());
    gemm_xwt_bias(branch_logits, &l.w, &l.b, false, &mut logits)?;
    Ok(BatchForward {
        logits,
        cache: BatchCache::Head(HeadBatchCache { input: branch_logits.clone(), layer: "rubi.cq" }),
    })
}

/// Dispatching batch forward, mirroring [`crate::models::forward`].
pub fn forward_batch(
    arch: &ArchitectureSpec,
    params: &Params,
    batch: &[&Instance],
) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    match arch.kind {
        ModelKind::BaseAttention => forward_base_batch(params, batch),
        ModelKind::ContextBranch => forward_context_branch_batch(params, batch),
        ModelKind::EvidenceOnly => forward_evidence_only_batch(params, batch),
        ModelKind::SelfHead => forward_self_head_batch(params, &rows_from_contexts(batch)?),
        ModelKind::RubiHead => forward_rubi_head_batch(params, &rows_from_contexts(batch)?),
    }
}

/// Accumulate `scale * grad` over the whole batch into `grads`, given the
/// per-instance loss gradients w.r.t. the logits (one row per instance).
pub fn accumulate_backward_batch(
    params: &Params,
    fwd: &BatchForward,
    grad_logits: &Matrix,
    grads: &mut ParamGrads,
    scale: f64,
) -> Result<()> {
    if grad_logits.rows() != fwd.logits.rows() || grad_logits.cols() != fwd.logits.cols() {
        return Err(Error::Shape(format!(
            "grad_logits {}x{} vs logits {}x{}",
            grad_logits.rows(),
            grad_logits.cols(),
            fwd.logits.rows(),
            fwd.logits.cols()
        )));
    }
    match &fwd.cache {
        BatchCache::Base(c) => backward_base_batch(params, c, grad_logits, grads, scale),
        BatchCache::TwoLayer(c) => backward_two_layer_batch(params, c, grad_logits, grads, scale),
        BatchCache::Head(c) => backward_head_batch(c, grad_logits, grads, scale),
    }
}

fn grad_layer<'a>(grads: &'a mut ParamGrads, name: &str) -> Result<&'a mut crate::nn::LayerParams> {
    grads
        .entries
        .get_mut(name)
        .ok_or_else(|| Error::Cache(format!("gradient buffer missing `{name}`")))
}

fn backward_head_batch(
    c: &HeadBatchCache,
    g: &Matrix,
    grads: &mut ParamGrads,
    scale: f64,
) -> Result<()> {
    let layer = grad_layer(grads, c.layer)?;
    gemm_atx_acc(g, &c.input, scale, &mut layer.w)?;
    col_sums_acc(g, scale, &mut layer.b)
}

fn backward_two_layer_batch(
    params: &Params,
    c: &TwoLayerBatchCache,
    g: &Matrix,
    grads: &mut ParamGrads,
    scale: f64,
) -> Result<()> {
    let l2 = params.get(c.fc2)?;
    let mut dh1 = Matrix::zeros(g.rows(), l2.w.cols());
    gemm_xw(g, &l2.w, &mut dh1)?;
    {
        let g2 = grad_layer(grads, c.fc2)?;
        gemm_atx_acc(g, &c.h1, scale, &mut g2.w)?;
        col_sums_acc(g, scale, &mut g2.b)?;
    }
    gate_by(&mut dh1, &c.h1);
    let g1 = grad_layer(grads, c.fc1)?;
    gemm_atx_acc(&dh1, &c.input, scale, &mut g1.w)?;
    col_sums_acc(&dh1, scale, &mut g1.b)
}

fn backward_base_batch(
    params: &Params,
    c: &BaseBatchCache,
    g: &Matrix,
    grads: &mut ParamGrads,
    scale: f64,
) -> Result<()> {
    let c2 = params.get("cls.fc2")?;
    let c1 = params.get("cls.fc1")?;
    let wv2 = params.get("fuse.vision")?;
    let wk = params.get("att.key")?;
    let ws = params.get("att.score")?;
    let n = g.rows();
    let n_v = c.n_v;

    // classifier head
    let mut da_cls = Matrix::zeros(n, c2.w.cols());
    gemm_xw(g, &c2.w, &mut da_cls)?;
    {
        let gc2 = grad_layer(grads, "cls.fc2")?;
        gemm_atx_acc(g, &c.r_cls, scale, &mut gc2.w)?;
        col_sums_acc(g, scale, &mut gc2.b)?;
    }
    gate_by(&mut da_cls, &c.r_cls);
    let mut d_joint = Matrix::zeros(n, c1.w.cols());
    gemm_xw(&da_cls, &c1.w, &mut d_joint)?;
    {
        let gc1 = grad_layer(grads, "cls.fc1")?;
        gemm_atx_acc(&da_cls, &c.joint, scale, &mut gc1.w)?;
        col_sums_acc(&da_cls, scale, &mut gc1.b)?;
    }

    // Hadamard fusion, both relu gates applied in the same pass
    let mut da_vision = Matrix::zeros(n, d_joint.cols());
    hadamard_rows(&d_joint, &c.r_context, &mut da_vision);
    gate_by(&mut da_vision, &c.r_vision);
    let mut da_context = Matrix::zeros(n, d_joint.cols());
    hadamard_rows(&d_joint, &c.r_vision, &mut da_context);
    gate_by(&mut da_context, &c.r_context);

    let mut d_pooled = Matrix::zeros(n, wv2.w.cols());
    gemm_xw(&da_vision, &wv2.w, &mut d_pooled)?;
    {
        let gv2 = grad_layer(grads, "fuse.vision")?;
        gemm_atx_acc(&da_vision, &c.pooled, scale, &mut gv2.w)?;
        col_sums_acc(&da_vision, scale, &mut gv2.b)?;
    }
    {
        let gq2 = grad_layer(grads, "fuse.context")?;
        gemm_atx_acc(&da_context, &c.ctx, scale, &mut gq2.w)?;
        col_sums_acc(&da_context, scale, &mut gq2.b)?;
    }

    // attention pooling: d_alpha[b][i] = d_pooled_b . v_bi, softmax backward
    let mut d_scores = Matrix::zeros(n, n_v);
    for b in 0..n {
        let dp = d_pooled.row(b);
        let arow = c.alpha.row(b);
        let srow = d_scores.row_mut(b);
        for (i, s) in srow.iter_mut().enumerate() {
            *s = dot(dp, c.ev.row(b * n_v + i));
        }
        let inner = dot(arow, srow);
        for (s, &a) in srow.iter_mut().zip(arow) {
            *s = a * (*s - inner);
        }
    }

    // score layer over all regions at once: dS is a (n*n_v) x 1 column
    let ds_col = Matrix::from_vec(n * n_v, 1, d_scores.data().to_vec())?;
    {
        let gs = grad_layer(grads, "att.score")?;
        gemm_atx_acc(&ds_col, &c.key, scale, &mut gs.w)?;
        gs.b[0] = scale.mul_add(d_scores.data().iter().sum::<f64>(), gs.b[0]);
    }

    // d_key gated through the key relu in one pass
    let mut da_key = Matrix::zeros(n * n_v, c.key.cols());
    let ws_row = ws.w.row(0);
    for r in 0..n * n_v {
        let ds = ds_col.get(r, 0);
        for ((dk, &w), &k) in da_key.row_mut(r).iter_mut().zip(ws_row).zip(c.key.row(r)) {
            *dk = if k > 0.0 { w * ds } else { 0.0 };
        }
    }
    let mut dh = Matrix::zeros(n * n_v, wk.w.cols());
    gemm_xw(&da_key, &wk.w, &mut dh)?;
    {
        let gk = grad_layer(grads, "att.key")?;
        gemm_atx_acc(&da_key, &c.region_had, scale, &mut gk.w)?;
        col_sums_acc(&da_key, scale, &mut gk.b)?;
    }

    // h_bi = v_bi (.) query_b, then the query relu gate
    let mut da_query = Matrix::zeros(n, dh.cols());
    for b in 0..n {
        let qrow = da_query.row_mut(b);
        for i in 0..n_v {
            let r = b * n_v + i;
            for ((dq, &dhv), &v) in qrow.iter_mut().zip(dh.row(r)).zip(c.ev.row(r)) {
                *dq = dhv.mul_add(v, *dq);
            }
        }
    }
    gate_by(&mut da_query, &c.query);
    let gq = grad_layer(grads, "att.query")?;
    gemm_atx_acc(&da_query, &c.ctx, scale, &mut gq.w)?;
    col_sums_acc(&da_query, scale, &mut gq.b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{loss_grad_wrt_logits, LossFamily};
    use crate::models::{accumulate_backward, forward, forward_self_head, Dims};
    use crate::nn::{init_params, init_zero_grads};

    fn assert_close(a: f64, b: f64, what: &str) {
        let tol = 1e-9 * (1.0 + a.abs().max(b.abs()));
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b}");
    }

    /// Batched forward/backward must agree with the per-instance path on
    /// every architecture, including a batch size that is not a multiple of
    /// the kernels' block width.
    #[test]
    fn batched_path_matches_per_instance_path() {
        let dims = Dims { n_v: 4, d_v: 5, d_q: 6, hidden: 7, classes: 9 };
        let batch_owned: Vec<Instance> =
            (0..5).map(|s| Instance::random_for_tests(&dims, s + 10)).collect();
        let batch: Vec<&Instance> = batch_owned.iter().collect();
        let scale = 1.0 / batch.len() as f64;

        for kind in [
            ModelKind::BaseAttention,
            ModelKind::ContextBranch,
            ModelKind::EvidenceOnly,
        ] {
            let arch = ArchitectureSpec::new(kind, dims);
            let params = init_params(&arch, 3).unwrap();

            let bf = forward_batch(&arch, &params, &batch).unwrap();
            let mut g = Matrix::zeros(batch.len(), dims.classes);
            let mut batch_grads = init_zero_grads(&arch).unwrap();
            let mut single_grads = init_zero_grads(&arch).unwrap();
            for (i, inst) in batch.iter().enumerate() {
                let f = forward(&arch, &params, inst).unwrap();
                for (c, (&zb, &zs)) in bf.logits.row(i).iter().zip(&f.logits).enumerate() {
                    assert_close(zb, zs, &format!("{kind:?} logit ({i},{c})"));
                }
                let gi = loss_grad_wrt_logits(LossFamily::Bce, &f.logits, &inst.label);
                g.row_mut(i).copy_from_slice(&gi);
                accumulate_backward(&params, &f.cache, &gi, &mut single_grads, scale).unwrap();
            }
            accumulate_backward_batch(&params, &bf, &g, &mut batch_grads, scale).unwrap();

            for (name, layer) in &batch_grads.entries {
                let want = &single_grads.entries[name];
                for (a, b) in layer.w.data().iter().zip(want.w.data()) {
                    assert_close(*a, *b, &format!("{kind:?} {name} weight grad"));
                }
                for (a, b) in layer.b.iter().zip(&want.b) {
                    assert_close(*a, *b, &format!("{kind:?} {name} bias grad"));
                }
            }
        }
    }

    #[test]
    fn batched_self_head_matches_per_instance() {
        let dims = Dims { n_v: 1, d_v: 1, d_q: 3, hidden: 6, classes: 4 };
        let arch = ArchitectureSpec::new(ModelKind::SelfHead, dims);
        let params = init_params(&arch, 2).unwrap();
        let mut joint = Matrix::zeros(3, dims.hidden);
        for r in 0..3 {
            for c in 0..dims.hidden {
                joint.set(r, c, 0.3 * r as f64 - 0.1 * c as f64 + 0.05);
            }
        }
        let bf = forward_self_head_batch(&params, &joint).unwrap();
        let mut g = Matrix::zeros(3, dims.classes);
        let mut batch_grads = init_zero_grads(&arch).unwrap();
        let mut single_grads = init_zero_grads(&arch).unwrap();
        let target = vec![1.0, 0.0, 0.5, 0.0];
        for i in 0..3 {
            let f = forward_self_head(&params, joint.row(i)).unwrap();
            for (a, b) in bf.logits.row(i).iter().zip(&f.logits) {
                assert_close(*a, *b, "self-head logit");
            }
            let gi = loss_grad_wrt_logits(LossFamily::Bce, &f.logits, &target);
            g.row_mut(i).copy_from_slice(&gi);
            accumulate_backward(&params, &f.cache, &gi, &mut single_grads, 0.5).unwrap();
        }
        accumulate_backward_batch(&params, &bf, &g, &mut batch_grads, 0.5).unwrap();
        let (a, b) = (&batch_grads.entries["self.cls"], &single_grads.entries["self.cls"]);
        for (x, y) in a.w.data().iter().zip(b.w.data()) {
            assert_close(*x, *y, "self-head weight grad");
        }
        for (x, y) in a.b.iter().zip(&b.b) {
            assert_close(*x, *y, "self-head bias grad");
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let dims = Dims::default();
        let arch = ArchitectureSpec::new(ModelKind::BaseAttention, dims);
        let params = init_params(&arch, 0).unwrap();
        assert!(forward_batch(&arch, &params, &[]).is_err());
    }
}
