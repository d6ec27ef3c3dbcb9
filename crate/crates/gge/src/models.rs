//! The fixed architectures and their manual backward passes.
//!
//! * `BaseAttention` — linear attention over evidence regions queried by the
//!   context, Hadamard fusion, 2-layer classifier head. The model kept at
//!   test time.
//! * `ContextBranch` — 2-layer MLP on the context alone; absorbs the
//!   shortcut bias.
//! * `EvidenceOnly` — mean-pooled regions into the same 2-layer head; used
//!   for vision-only control runs.
//! * `SelfHead` — linear classifier on the (detached) joint representation;
//!   the self-ensemble biased branch.
//! * `RubiHead` — linear map on top of the context branch output.

use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::losses::softmax;
use crate::nn::{dot, linear_forward, Matrix, ParamGrads, Params};
use crate::{Error, Result};

/// Named integer dimensions shared by all architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Evidence regions per instance.
    pub n_v: usize,
    /// Region vector width.
    pub d_v: usize,
    /// Context vector width.
    pub d_q: usize,
    /// Hidden width.
    pub hidden: usize,
    /// Answer classes.
    pub classes: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { n_v: 8, d_v: 16, d_q: 16, hidden: 32, classes: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    BaseAttention,
    ContextBranch,
    EvidenceOnly,
    SelfHead,
    RubiHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub kind: ModelKind,
    pub dims: Dims,
}

impl ArchitectureSpec {
    pub fn new(kind: ModelKind, dims: Dims) -> Self {
        ArchitectureSpec { kind, dims }
    }

    /// Layer declarations as `(name, out_dim, in_dim)`, in forward order.
    pub fn layers(&self) -> Vec<(String, usize, usize)> {
        let d = &self.dims;
        let mk = |name: &str, o: usize, i: usize| (name.to_string(), o, i);
        match self.kind {
            ModelKind::BaseAttention => vec![
                mk("att.query", d.d_v, d.d_q),
                mk("att.key", d.hidden, d.d_v),
                mk("att.score", 1, d.hidden),
                mk("fuse.vision", d.hidden, d.d_v),
                mk("fuse.context", d.hidden, d.d_q),
                mk("cls.fc1", d.hidden, d.hidden),
                mk("cls.fc2", d.classes, d.hidden),
            ],
            ModelKind::ContextBranch => vec![
                mk("ctx.fc1", d.hidden, d.d_q),
                mk("ctx.fc2", d.classes, d.hidden),
            ],
            ModelKind::EvidenceOnly => vec![
                mk("ev.fc1", d.hidden, d.d_v),
                mk("ev.fc2", d.classes, d.hidden),
            ],
            ModelKind::SelfHead => vec![mk("self.cls", d.classes, d.hidden)],
            ModelKind::RubiHead => vec![mk("rubi.cq", d.classes, d.classes)],
        }
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v.iter_mut() {
        if !(*x > 0.0) {
            *x = 0.0;
        }
    }
}

/// Gradient gate for relu: passes `g` where the activation is positive.
/// Gating on the stored relu output is equivalent to gating on the
/// pre-activation, since `relu(z) > 0` exactly when `z > 0`.
fn relu_gate(g: &[f64], act: &[f64]) -> Vec<f64> {
    g.iter()
        .zip(act)
        .map(|(&gv, &a)| if a > 0.0 { gv } else { 0.0 })
        .collect()
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Cached activations of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub enum ForwardCache {
    Base(BaseCache),
    TwoLayer(TwoLayerCache),
    SelfHead(SelfHeadCache),
}

/// Activations are stored post-relu; the gradient gates test them directly.
#[derive(Debug, Clone)]
pub struct BaseCache {
    context: Vec<f64>,
    evidence: Matrix,
    query: Vec<f64>,
    /// Row i: evidence region i (.) query.
    region_had: Matrix,
    /// Row i: relu key vector of region i.
    key: Matrix,
    alpha: Vec<f64>,
    pooled: Vec<f64>,
    r_vision: Vec<f64>,
    r_context: Vec<f64>,
    joint: Vec<f64>,
    r_cls: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TwoLayerCache {
    /// fc1 input: context, or mean-pooled evidence.
    input: Vec<f64>,
    h1: Vec<f64>,
    /// Names of the two layers, so context and evidence variants share code.
    fc1: &'static str,
    fc2: &'static str,
}

#[derive(Debug, Clone)]
pub struct SelfHeadCache {
    input: Vec<f64>,
    layer: &'static str,
}

/// Forward output: logits plus, for the base model, the normalized
/// attention and the fused joint representation.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub attention: Option<Vec<f64>>,
    pub joint_repr: Option<Vec<f64>>,
    pub cache: ForwardCache,
}

/// Attention-pooling base model.
pub fn forward_base(params: &Params, inst: &Instance) -> Result<Forward> {
    let wq = params.get("att.query")?;
    let wk = params.get("att.key")?;
    let ws = params.get("att.score")?;
    let wv2 = params.get("fuse.vision")?;
    let wq2 = params.get("fuse.context")?;
    let c1 = params.get("cls.fc1")?;
    let c2 = params.get("cls.fc2")?;

    let mut query = linear_forward(&wq.w, &wq.b, &inst.context)?;
    relu_in_place(&mut query);

    let n_v = inst.evidence.rows();
    let d_v = inst.evidence.cols();
    let mut region_had = Matrix::zeros(n_v, d_v);
    let mut key = Matrix::zeros(n_v, wk.w.rows());
    let mut scores = Vec::with_capacity(n_v);
    for i in 0..n_v {
        for ((h, ev), qv) in region_had
            .row_mut(i)
            .iter_mut()
            .zip(inst.evidence.row(i))
            .zip(&query)
        {
            *h = ev * qv;
        }
        let k = key.row_mut(i);
        wk.w.matvec_into(region_had.row(i), k)?;
        for (kv, bv) in k.iter_mut().zip(&wk.b) {
            *kv += bv;
        }
        relu_in_place(k);
        scores.push(dot(ws.w.row(0), k) + ws.b[0]);
    }
    let alpha = softmax(&scores);

    let mut pooled = vec![0.0; d_v];
    for i in 0..n_v {
        let row = inst.evidence.row(i);
        for (p, v) in pooled.iter_mut().zip(row) {
            *p += alpha[i] * v;
        }
    }

    let mut r_vision = linear_forward(&wv2.w, &wv2.b, &pooled)?;
    relu_in_place(&mut r_vision);
    let mut r_context = linear_forward(&wq2.w, &wq2.b, &inst.context)?;
    relu_in_place(&mut r_context);
    let joint = hadamard(&r_vision, &r_context);

    let mut r_cls = linear_forward(&c1.w, &c1.b, &joint)?;
    relu_in_place(&mut r_cls);
    let logits = linear_forward(&c2.w, &c2.b, &r_cls)?;

    Ok(Forward {
        attention: Some(alpha.clone()),
        joint_repr: Some(joint.clone()),
        cache: ForwardCache::Base(BaseCache {
            context: inst.context.clone(),
            evidence: inst.evidence.clone(),
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
        logits,
    })
}

fn forward_two_layer(
    params: &Params,
    input: Vec<f64>,
    fc1: &'static str,
    fc2: &'static str,
) -> Result<Forward> {
    let l1 = params.get(fc1)?;
    let l2 = params.get(fc2)?;
    let mut h1 = linear_forward(&l1.w, &l1.b, &input)?;
    relu_in_place(&mut h1);
    let logits = linear_forward(&l2.w, &l2.b, &h1)?;
    Ok(Forward {
        logits,
        attention: None,
        joint_repr: None,
        cache: ForwardCache::TwoLayer(TwoLayerCache { input, h1, fc1, fc2 }),
    })
}

/// Context-only branch: `FC(relu(FC(context)))`.
pub fn forward_context_branch(params: &Params, inst: &Instance) -> Result<Forward> {
    forward_two_layer(params, inst.context.clone(), "ctx.fc1", "ctx.fc2")
}

/// Evidence-only variant: mean-pool regions, 2-layer head. No attention;
/// reported attention is uniform.
pub fn forward_evidence_only(params: &Params, inst: &Instance) -> Result<Forward> {
    let n_v = inst.evidence.rows();
    let d_v = inst.evidence.cols();
    let mut pooled = vec![0.0; d_v];
    for i in 0..n_v {
        for (p, v) in pooled.iter_mut().zip(inst.evidence.row(i)) {
            *p += v / n_v as f64;
        }
    }
    let mut fwd = forward_two_layer(params, pooled, "ev.fc1", "ev.fc2")?;
    fwd.attention = Some(vec![1.0 / n_v as f64; n_v]);
    Ok(fwd)
}

/// Self-ensemble head: linear classifier on the joint representation. The
/// input is treated as a constant; [`backward`] never returns gradients for
/// it, so nothing can leak into the base parameters.
pub fn forward_self_head(params: &Params, joint_repr: &[f64]) -> Result<Forward> {
    let l = params.get("self.cls")?;
    let logits = linear_forward(&l.w, &l.b, joint_repr)?;
    Ok(Forward {
        logits,
        attention: None,
        joint_repr: None,
        cache: ForwardCache::SelfHead(SelfHeadCache {
            input: joint_repr.to_vec(),
            layer: "self.cls",
        }),
    })
}

/// RUBi masking head: linear map on the context branch's output.
pub fn forward_rubi_head(params: &Params, branch_logits: &[f64]) -> Result<Forward> {
    let l = params.get("rubi.cq")?;
    let logits = linear_forward(&l.w, &l.b, branch_logits)?;
    Ok(Forward {
        logits,
        attention: None,
        joint_repr: None,
        cache: ForwardCache::SelfHead(SelfHeadCache {
            input: branch_logits.to_vec(),
            layer: "rubi.cq",
        }),
    })
}

/// Dispatching forward pass. For `SelfHead` the instance's context vector is
/// taken as the representation (used by the gradient checker); trainers call
/// [`forward_self_head`] directly with the detached joint representation.
pub fn forward(arch: &ArchitectureSpec, params: &Params, inst: &Instance) -> Result<Forward> {
    match arch.kind {
        ModelKind::BaseAttention => forward_base(params, inst),
        ModelKind::ContextBranch => forward_context_branch(params, inst),
        ModelKind::EvidenceOnly => forward_evidence_only(params, inst),
        ModelKind::SelfHead => forward_self_head(params, &inst.context),
        ModelKind::RubiHead => forward_rubi_head(params, &inst.context),
    }
}

/// Exact analytic gradients of the scalar loss whose logit-gradient is
/// `grad_logits`, with respect to every parameter of the architecture.
pub fn backward(
    arch: &ArchitectureSpec,
    params: &Params,
    cache: &ForwardCache,
    grad_logits: &[f64],
) -> Result<ParamGrads> {
    let mut grads = crate::nn::init_zero_grads(arch)?;
    accumulate_backward(params, cache, grad_logits, &mut grads, 1.0)?;
    Ok(grads)
}

/// Backward pass that accumulates `scale * grad` into `grads`; used by the
/// trainers to average over a batch without reallocating.
pub fn accumulate_backward(
    params: &Params,
    cache: &ForwardCache,
    grad_logits: &[f64],
    grads: &mut ParamGrads,
    scale: f64,
) -> Result<()> {
    match cache {
        ForwardCache::Base(c) => backward_base(params, c, grad_logits, grads, scale),
        ForwardCache::TwoLayer(c) => backward_two_layer(params, c, grad_logits, grads, scale),
        ForwardCache::SelfHead(c) => backward_self_head(c, grad_logits, grads, scale),
    }
}

fn backward_self_head(
    c: &SelfHeadCache,
    g: &[f64],
    grads: &mut ParamGrads,
    scale: f64,
) -> Result<()> {
    let layer = grads
        .entries
        .get_mut(c.layer)
        .ok_or_else(|| Error::Cache(format!("gradient buffer missing `{}`", c.layer)))?;
    if g.len() != layer.b.len() {
        return Err(Error::Cache(format!(
            "grad_output length {} vs {} logits",
            g.len(),
            layer.b.len()
        )));
    }
    layer.w.add_outer(g, &c.input, scale);
    for (b, gv) in layer.b.iter_mut().zip(g) {
        *b += scale * gv;
    }
    Ok(())
}

fn backward_two_layer(
    params: &Params,
    c: &TwoLayerCache,
    g: &[f64],
    grads: &mut ParamGrads,
    scale: f64,
) -> Result<()> {
    let l2 = params.get(c.fc2)?;
    if g.len() != l2.w.rows() {
        return Err(Error::Cache(format!(
            "grad_output length {} vs {} logits",
            g.len(),
            l2.w.rows()
        )));
    }
    let dh1 = l2.w.matvec_t(g)?;
    {
        let g2 = grads.entries.get_mut(c.fc2).unwrap();
        g2.w.add_outer(g, &c.h1, scale);
        for (b, gv) in g2.b.iter_mut().zip(g) {
            *b += scale * gv;
        }
    }
    let da1 = relu_gate(&dh1, &c.h1);
    let g1 = grads.entries.get_mut(c.fc1).unwrap();
    g1.w.add_outer(&da1, &c.input, scale);
    for (b, gv) in g1.b.iter_mut().zip(&da1) {
        *b += scale * gv;
    }
    Ok(())
}

fn backward_base(
    params: &Params,
    c: &BaseCache,
    g: &[f64],
    grads: &mut ParamGrads,
    scale: f64,
) -> Result<()> {
    let c2 = params.get("cls.fc2")?;
    if g.len() != c2.w.rows() {
        return Err(Error::Cache(format!(
            "grad_output length {} vs {} logits",
            g.len(),
            c2.w.rows()
        )));
    }

    // classifier head
    let dr_cls = c2.w.matvec_t(g)?;
    {
        let gc2 = grads.entries.get_mut("cls.fc2").unwrap();
        gc2.w.add_outer(g, &c.r_cls, scale);
        for (b, gv) in gc2.b.iter_mut().zip(g) {
            *b += scale * gv;
        }
    }
    let da_cls = relu_gate(&dr_cls, &c.r_cls);
    let c1 = params.get("cls.fc1")?;
    let d_joint = c1.w.matvec_t(&da_cls)?;
    {
        let gc1 = grads.entries.get_mut("cls.fc1").unwrap();
        gc1.w.add_outer(&da_cls, &c.joint, scale);
        for (b, gv) in gc1.b.iter_mut().zip(&da_cls) {
            *b += scale * gv;
        }
    }

    // Hadamard fusion
    let dr_vision = hadamard(&d_joint, &c.r_context);
    let dr_context = hadamard(&d_joint, &c.r_vision);

    let da_vision = relu_gate(&dr_vision, &c.r_vision);
    let wv2 = params.get("fuse.vision")?;
    let d_pooled = wv2.w.matvec_t(&da_vision)?;
    {
        let gv2 = grads.entries.get_mut("fuse.vision").unwrap();
        gv2.w.add_outer(&da_vision, &c.pooled, scale);
        for (b, gv) in gv2.b.iter_mut().zip(&da_vision) {
            *b += scale * gv;
        }
    }

    let da_context = relu_gate(&dr_context, &c.r_context);
    {
        let gq2 = grads.entries.get_mut("fuse.context").unwrap();
        gq2.w.add_outer(&da_context, &c.context, scale);
        for (b, gv) in gq2.b.iter_mut().zip(&da_context) {
            *b += scale * gv;
        }
    }

    // attention pooling: d_alpha_i = d_pooled . v_i, then softmax backward
    let n_v = c.evidence.rows();
    let mut d_alpha = vec![0.0; n_v];
    for i in 0..n_v {
        d_alpha[i] = dot(&d_pooled, c.evidence.row(i));
    }
    let alpha_dot = dot(&c.alpha, &d_alpha);
    let d_scores: Vec<f64> = c
        .alpha
        .iter()
        .zip(&d_alpha)
        .map(|(&a, &d)| a * (d - alpha_dot))
        .collect();

    // per-region score path; gradient-table positions are resolved once and
    // the per-region work buffers are reused across regions
    let ws = params.get("att.score")?;
    let wk = params.get("att.key")?;
    let score_idx = grads
        .entries
        .get_index_of("att.score")
        .ok_or_else(|| Error::Cache("gradient buffer missing `att.score`".into()))?;
    let key_idx = grads
        .entries
        .get_index_of("att.key")
        .ok_or_else(|| Error::Cache("gradient buffer missing `att.key`".into()))?;
    let mut da_key = vec![0.0; wk.w.rows()];
    let mut dh = vec![0.0; wk.w.cols()];
    let mut d_query = vec![0.0; c.query.len()];
    for i in 0..n_v {
        let ds = d_scores[i];
        // score layer: s = w . key_i + b
        {
            let gs = grads.entries.get_index_mut(score_idx).unwrap().1;
            gs.w.add_outer(&[ds], c.key.row(i), scale);
            gs.b[0] += scale * ds;
        }
        // d_key gated through the key relu in one pass
        for ((dk, &w), &k) in da_key.iter_mut().zip(ws.w.row(0)).zip(c.key.row(i)) {
            *dk = if k > 0.0 { w * ds } else { 0.0 };
        }
        wk.w.matvec_t_into(&da_key, &mut dh)?;
        {
            let gk = grads.entries.get_index_mut(key_idx).unwrap().1;
            gk.w.add_outer(&da_key, c.region_had.row(i), scale);
            for (b, gv) in gk.b.iter_mut().zip(&da_key) {
                *b += scale * gv;
            }
        }
        // h_i = v_i (.) query
        for (dq, (dhv, v)) in d_query.iter_mut().zip(dh.iter().zip(c.evidence.row(i))) {
            *dq += dhv * v;
        }
    }

    let da_query = relu_gate(&d_query, &c.query);
    let gq = grads.entries.get_mut("att.query").unwrap();
    gq.w.add_outer(&da_query, &c.context, scale);
    for (b, gv) in gq.b.iter_mut().zip(&da_query) {
        *b += scale * gv;
    }
    Ok(())
}
