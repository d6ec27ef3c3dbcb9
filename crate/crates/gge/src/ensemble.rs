//! Bias sources, ensemble composition, and the training schedules.
//!
//! A variant picks which biased branches exist (the fixed per-type answer
//! prior, a learned context-only branch, or a self-ensemble head) and the
//! schedule picks how updates interleave within a batch: `iter` updates
//! each branch in turn so later targets see the fresh parameters, `tog`
//! computes every loss from the pre-update parameters and steps everything
//! at once. Pseudo-label targets are always treated as constants; biased
//! branch losses never reach the base parameters and vice versa. Only the
//! base model is used at test time.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::batch::{
    accumulate_backward_batch, forward_batch, forward_rubi_head_batch, forward_self_head_batch,
    BatchForward,
};
use crate::data::{Dataset, Instance};
use crate::losses::{
    bce_loss, bce_loss_on_probs, bce_probs_grad, loss_grad_wrt_logits, pseudo_label_bce,
    pseudo_label_ce, sigmoid_vec, softmax, LossFamily,
};
use crate::metrics::{cgr_cgw_cgd, MetricsReport, PredictionRecord};
use crate::models::{forward, ArchitectureSpec, Dims, ModelKind};
use crate::nn::{adamax_step, gemm_xw, init_params, init_zero_grads, rng, Matrix, OptimizerState, Params};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    GgeD,
    GgeQ,
    GgeDq,
    GgeSf,
    GgeDSf,
    SumDq,
    Rubi,
    InverseSupervision,
    VisionOnly,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::GgeD => "gge-d",
            Variant::GgeQ => "gge-q",
            Variant::GgeDq => "gge-dq",
            Variant::GgeSf => "gge-sf",
            Variant::GgeDSf => "gge-d-sf",
            Variant::SumDq => "sum-dq",
            Variant::Rubi => "rubi",
            Variant::InverseSupervision => "inverse-supervision",
            Variant::VisionOnly => "vision-only",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "gge-d" => Ok(Variant::GgeD),
            "gge-q" => Ok(Variant::GgeQ),
            "gge-dq" => Ok(Variant::GgeDq),
            "gge-sf" => Ok(Variant::GgeSf),
            "gge-d-sf" => Ok(Variant::GgeDSf),
            "sum-dq" => Ok(Variant::SumDq),
            "rubi" => Ok(Variant::Rubi),
            "inverse-supervision" => Ok(Variant::InverseSupervision),
            "vision-only" => Ok(Variant::VisionOnly),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }

    fn needs_bias_table(&self) -> bool {
        matches!(self, Variant::GgeD | Variant::GgeDq | Variant::GgeDSf | Variant::SumDq)
    }

    fn needs_shortcut_branch(&self) -> bool {
        matches!(self, Variant::GgeQ | Variant::GgeDq | Variant::SumDq | Variant::Rubi)
    }

    fn needs_self_head(&self) -> bool {
        matches!(self, Variant::GgeSf | Variant::GgeDSf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Iter,
    Tog,
}

impl Schedule {
    pub fn as_str(&self) -> &'static str {
        match self {
            Schedule::Iter => "iter",
            Schedule::Tog => "tog",
        }
    }

    pub fn parse(s: &str) -> Result<Schedule> {
        match s {
            "iter" => Ok(Schedule::Iter),
            "tog" => Ok(Schedule::Tog),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default = "default_family")]
    pub loss_family: LossFamily,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_is_n")]
    pub inverse_supervision_n: usize,
    /// Swap the base forward for the evidence-only variant; biased branches
    /// are unchanged.
    #[serde(default)]
    pub vision_only: bool,
}

fn default_variant() -> Variant {
    Variant::Baseline
}
fn default_schedule() -> Schedule {
    Schedule::Tog
}
fn default_family() -> LossFamily {
    LossFamily::Bce
}
fn default_epochs() -> usize {
    160
}
fn default_batch_size() -> usize {
    64
}
fn default_lr() -> f64 {
    0.003
}
fn default_seed() -> u64 {
    1
}
fn default_is_n() -> usize {
    1
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            variant: Variant::Baseline,
            schedule: Schedule::Tog,
            loss_family: LossFamily::Bce,
            epochs: 160,
            batch_size: 64,
            lr: 0.003,
            seed: 1,
            inverse_supervision_n: 1,
            vision_only: false,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        // epochs = 0 is allowed: train returns the initialized params unchanged
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.variant == Variant::InverseSupervision && self.inverse_supervision_n == 0 {
            return Err(Error::Config("inverse_supervision_n must be >= 1".into()));
        }
        if self.variant.needs_self_head() && self.vision_only {
            return Err(Error::Config(
                "self-ensemble needs the attention base model (no joint representation in vision-only mode)".into(),
            ));
        }
        if matches!(self.variant, Variant::SumDq | Variant::Rubi)
            && self.loss_family == LossFamily::Sxce
        {
            return Err(Error::Config(format!(
                "variant {} is only defined for the bce loss family",
                self.variant.as_str()
            )));
        }
        Ok(())
    }

    /// Variants without a learned biased branch ignore the schedule.
    pub fn effective_schedule(&self) -> Option<Schedule> {
        if self.variant.needs_shortcut_branch() || self.variant.needs_self_head() {
            Some(self.schedule)
        } else {
            None
        }
    }
}

/// Per-type normalized answer-score distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionBiasTable {
    pub table: Matrix,
}

impl DistributionBiasTable {
    pub fn row(&self, type_id: usize) -> &[f64] {
        self.table.row(type_id)
    }
}

/// Accumulate soft labels per question type and normalize each row.
/// An empty type is an error: the table is a statistic, not a prior guess.
pub fn fit_distribution_bias(train: &Dataset) -> Result<DistributionBiasTable> {
    if train.is_empty() {
        return Err(Error::Empty("cannot fit distribution bias on empty data".into()));
    }
    let (types, classes) = (train.meta.types, train.meta.classes);
    let mut table = Matrix::zeros(types, classes);
    for inst in &train.instances {
        for (c, &score) in inst.label.iter().enumerate() {
            let cur = table.get(inst.type_id, c);
            table.set(inst.type_id, c, cur + score);
        }
    }
    for t in 0..types {
        let sum: f64 = table.row(t).iter().sum();
        if sum <= 0.0 {
            return Err(Error::EmptyType(t));
        }
        for c in 0..classes {
            table.set(t, c, table.get(t, c) / sum);
        }
    }
    Ok(DistributionBiasTable { table })
}

/// The ensemble output `H` at which the pseudo-label gradient is taken.
///
/// BCE family: prior variants use the raw table row (already in (0,1));
/// learned branches contribute through a sigmoid. Softmax+CE family: the
/// table row stands in for the softmax probabilities directly.
pub fn compose_ensemble(
    variant: Variant,
    family: LossFamily,
    b_d_row: Option<&[f64]>,
    biased_logits: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let need = |opt: Option<&[f64]>, what: &str| {
        opt.map(<[f64]>::to_vec)
            .ok_or_else(|| Error::Config(format!("variant {} needs {what}", variant.as_str())))
    };
    let squash = |z: &[f64]| match family {
        LossFamily::Bce => sigmoid_vec(z),
        LossFamily::Sxce => softmax(z),
    };
    match variant {
        Variant::GgeD => need(b_d_row, "a distribution-bias row"),
        Variant::GgeQ | Variant::GgeSf => {
            let z = need(biased_logits, "biased-branch logits")?;
            Ok(squash(&z))
        }
        Variant::GgeDq | Variant::GgeDSf => {
            let z = need(biased_logits, "biased-branch logits")?;
            let bd = need(b_d_row, "a distribution-bias row")?;
            Ok(squash(&z).iter().zip(&bd).map(|(s, b)| s + b).collect())
        }
        other => Err(Error::Config(format!(
            "variant {} has no ensemble composition",
            other.as_str()
        ))),
    }
}

/// Pseudo-label for the configured loss family.
fn pseudo_target(family: LossFamily, labels: &[f64], ensemble: &[f64]) -> Vec<f64> {
    match family {
        LossFamily::Bce => pseudo_label_bce(labels, ensemble),
        LossFamily::Sxce => pseudo_label_ce(labels, ensemble),
    }
}

/// Remove the `n` most-confident predicted answers from the positive label
/// set: entries of `labels` whose index ranks in the top-`n` of `probs` are
/// zeroed.
pub fn inverse_supervision_round(labels: &[f64], probs: &[f64], n: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = labels.to_vec();
    for &i in order.iter().take(n) {
        out[i] = 0.0;
    }
    out
}

struct TrainBranch {
    name: &'static str,
    arch: ArchitectureSpec,
    params: Params,
    opt: OptimizerState,
}

impl TrainBranch {
    fn new(name: &'static str, kind: ModelKind, dims: Dims, seed: u64, lr: f64) -> Result<Self> {
        let arch = ArchitectureSpec::new(kind, dims);
        let params = init_params(&arch, seed)?;
        let opt = OptimizerState::new(&params, lr);
        Ok(TrainBranch { name, arch, params, opt })
    }

    fn step(&mut self, grads: &Params) -> Result<()> {
        adamax_step(&mut self.opt, &mut self.params, grads)
    }
}

/// Mutable training state for one run.
pub struct TrainState {
    pub cfg: EnsembleConfig,
    base: TrainBranch,
    shortcut: Option<TrainBranch>,
    self_head: Option<TrainBranch>,
    rubi_head: Option<TrainBranch>,
    bias: Option<DistributionBiasTable>,
    batch_index: usize,
    /// Loss per branch for the most recent batch.
    pub last_losses: BTreeMap<String, f64>,
    /// Ensemble compositions used by the most recent batch, for structural
    /// assertions: `(stage, description)`.
    pub last_trace: Vec<(String, String)>,
}

impl TrainState {
    pub fn new(cfg: EnsembleConfig, dims: Dims, train_data: &Dataset) -> Result<TrainState> {
        cfg.validate()?;
        let base_kind = if cfg.vision_only || cfg.variant == Variant::VisionOnly {
            ModelKind::EvidenceOnly
        } else {
            ModelKind::BaseAttention
        };
        let base = TrainBranch::new("base", base_kind, dims, cfg.seed, cfg.lr)?;
        let shortcut = if cfg.variant.needs_shortcut_branch() {
            Some(TrainBranch::new("shortcut", ModelKind::ContextBranch, dims, cfg.seed, cfg.lr)?)
        } else {
            None
        };
        let self_head = if cfg.variant.needs_self_head() {
            Some(TrainBranch::new("self", ModelKind::SelfHead, dims, cfg.seed, cfg.lr)?)
        } else {
            None
        };
        let rubi_head = if cfg.variant == Variant::Rubi {
            Some(TrainBranch::new("rubi-cq", ModelKind::RubiHead, dims, cfg.seed, cfg.lr)?)
        } else {
            None
        };
        let bias = if cfg.variant.needs_bias_table() {
            Some(fit_distribution_bias(train_data)?)
        } else {
            None
        };
        Ok(TrainState {
            cfg,
            base,
            shortcut,
            self_head,
            rubi_head,
            bias,
            batch_index: 0,
            last_losses: BTreeMap::new(),
            last_trace: Vec::new(),
        })
    }

    pub fn base_arch(&self) -> &ArchitectureSpec {
        &self.base.arch
    }

    pub fn base_params(&self) -> &Params {
        &self.base.params
    }

    pub fn branch_params(&self) -> Vec<(&'static str, &ArchitectureSpec, &Params)> {
        [&self.shortcut, &self.self_head, &self.rubi_head]
            .into_iter()
            .flatten()
            .map(|b| (b.name, &b.arch, &b.params))
            .collect()
    }

    fn bias_row(&self, inst: &Instance) -> Option<&[f64]> {
        self.bias.as_ref().map(|b| b.row(inst.type_id))
    }

    fn check_finite(&self, loss: f64, branch: &str) -> Result<f64> {
        ensure_finite(loss, branch, self.batch_index)
    }

    /// One batch of the configured variant and schedule.
    pub fn step(&mut self, batch: &[&Instance]) -> Result<()> {
        self.last_losses.clear();
        self.last_trace.clear();
        match self.cfg.variant {
            Variant::Baseline | Variant::VisionOnly => self.step_plain(batch),
            Variant::GgeD => self.step_gge_d(batch),
            Variant::GgeQ | Variant::GgeDq | Variant::GgeSf | Variant::GgeDSf => {
                self.step_gge(batch)
            }
            Variant::SumDq => self.step_sum_dq(batch),
            Variant::Rubi => self.step_rubi(batch),
            Variant::InverseSupervision => self.step_inverse_supervision(batch),
        }?;
        self.batch_index += 1;
        Ok(())
    }

    /// Forward the base model on a batch.
    fn base_forwards(&self, batch: &[&Instance]) -> Result<BatchForward> {
        forward_batch(&self.base.arch, &self.base.params, batch)
    }

    /// Batch-mean loss and gradients of the base model against per-instance
    /// targets, reusing an already computed forward.
    fn base_loss_grads(
        &self,
        batch: &[&Instance],
        fwds: &BatchForward,
        targets: &[Vec<f64>],
    ) -> Result<(f64, Params)> {
        let family = self.cfg.loss_family;
        let scale = 1.0 / batch.len() as f64;
        let mut grads = init_zero_grads(&self.base.arch)?;
        let mut g = Matrix::zeros(batch.len(), fwds.logits.cols());
        let mut total = 0.0;
        for (i, target) in targets.iter().enumerate() {
            let logits = fwds.logits.row(i);
            total += crate::losses::loss(family, logits, target);
            g.row_mut(i)
                .copy_from_slice(&loss_grad_wrt_logits(family, logits, target));
        }
        accumulate_backward_batch(&self.base.params, fwds, &g, &mut grads, scale)?;
        Ok((total * scale, grads))
    }

    fn step_plain(&mut self, batch: &[&Instance]) -> Result<()> {
        let fwds = self.base_forwards(batch)?;
        let targets: Vec<Vec<f64>> = batch.iter().map(|i| i.label.clone()).collect();
        let (loss, grads) = self.base_loss_grads(batch, &fwds, &targets)?;
        self.check_finite(loss, "base")?;
        self.last_losses.insert("base".into(), loss);
        self.base.step(&grads)
    }

    fn step_gge_d(&mut self, batch: &[&Instance]) -> Result<()> {
        let family = self.cfg.loss_family;
        let fwds = self.base_forwards(batch)?;
        let targets: Vec<Vec<f64>> = batch
            .iter()
            .map(|inst| {
                let row = self.bias_row(inst).expect("gge-d has a bias table");
                let h = compose_ensemble(Variant::GgeD, family, Some(row), None)?;
                Ok(pseudo_target(family, &inst.label, &h))
            })
            .collect::<Result<_>>()?;
        self.last_trace.push(("L_base".into(), "B_d".into()));
        let (loss, grads) = self.base_loss_grads(batch, &fwds, &targets)?;
        self.check_finite(loss, "base")?;
        self.last_losses.insert("base".into(), loss);
        self.base.step(&grads)
    }

    /// Shared step for the variants with a learned biased branch
    /// (context-only or self-ensemble), either schedule.
    fn step_gge(&mut self, batch: &[&Instance]) -> Result<()> {
        let variant = self.cfg.variant;
        let family = self.cfg.loss_family;
        let schedule = self.cfg.schedule;
        let scale = 1.0 / batch.len() as f64;
        let uses_self = variant.needs_self_head();

        // base forwards first: the self-ensemble branch consumes the
        // (detached) joint representation
        let fwds = self.base_forwards(batch)?;

        let branch_forward = |branch: &TrainBranch| -> Result<BatchForward> {
            if uses_self {
                let joint = fwds
                    .joint()
                    .ok_or_else(|| Error::Cache("base forward lacks joint representation".into()))?;
                forward_self_head_batch(&branch.params, joint)
            } else {
                forward_batch(&branch.arch, &branch.params, batch)
            }
        };

        // stage 1: biased-branch loss against labels, or against the
        // prior's pseudo-label when the prior is ensembled first
        let uses_bd = matches!(variant, Variant::GgeDq | Variant::GgeDSf);
        let l1_targets: Vec<Vec<f64>> = batch
            .iter()
            .map(|inst| {
                if uses_bd {
                    let row = self.bias_row(inst).expect("bias table present");
                    Ok(pseudo_target(family, &inst.label, row))
                } else {
                    Ok(inst.label.clone())
                }
            })
            .collect::<Result<_>>()?;
        self.last_trace.push((
            "L1".into(),
            if uses_bd { "B_d" } else { "labels" }.to_string(),
        ));

        let branch = if uses_self {
            self.self_head.as_mut().unwrap()
        } else {
            self.shortcut.as_mut().unwrap()
        };
        let mut branch_fwds = branch_forward(branch)?;
        let mut branch_grads = init_zero_grads(&branch.arch)?;
        let mut gb = Matrix::zeros(batch.len(), branch_fwds.logits.cols());
        let mut branch_loss = 0.0;
        for (i, target) in l1_targets.iter().enumerate() {
            let logits = branch_fwds.logits.row(i);
            branch_loss += crate::losses::loss(family, logits, target);
            gb.row_mut(i)
                .copy_from_slice(&loss_grad_wrt_logits(family, logits, target));
        }
        accumulate_backward_batch(&branch.params, &branch_fwds, &gb, &mut branch_grads, scale)?;
        branch_loss *= scale;

        if schedule == Schedule::Iter {
            // update now, then recompute the branch output the base sees
            branch.step(&branch_grads)?;
            branch_fwds = branch_forward(branch)?;
        }

        // stage 2: base loss against the pseudo-label of the full ensemble
        let base_targets: Vec<Vec<f64>> = batch
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                let row = if uses_bd { self.bias_row(inst) } else { None };
                let h = compose_ensemble(variant, family, row, Some(branch_fwds.logits.row(i)))?;
                Ok(pseudo_target(family, &inst.label, &h))
            })
            .collect::<Result<_>>()?;
        self.last_trace.push((
            "L2".into(),
            if uses_bd { "sigma(B_q)+B_d" } else { "sigma(B_q)" }.to_string(),
        ));

        let (base_loss, base_grads) = self.base_loss_grads(batch, &fwds, &base_targets)?;
        self.check_finite(branch_loss, "branch")?;
        self.check_finite(base_loss, "base")?;
        self.base.step(&base_grads)?;
        if schedule == Schedule::Tog {
            // joint step: branch gradients were computed from pre-update
            // parameters and the base targets saw the pre-update branch
            let branch = if uses_self {
                self.self_head.as_mut().unwrap()
            } else {
                self.shortcut.as_mut().unwrap()
            };
            branch.step(&branch_grads)?;
        }

        let branch_name = if uses_self { "self" } else { "shortcut" };
        self.last_losses.insert(branch_name.into(), branch_loss);
        self.last_losses.insert("base".into(), base_loss);
        Ok(())
    }

    /// Single joint loss on the summed scores `B_d + s(B_q) + s(A~)`.
    fn step_sum_dq(&mut self, batch: &[&Instance]) -> Result<()> {
        let scale = 1.0 / batch.len() as f64;
        let fwds = self.base_forwards(batch)?;
        let shortcut = self.shortcut.as_mut().unwrap();
        let branch_fwds = forward_batch(&shortcut.arch, &shortcut.params, batch)?;
        let mut base_grads = init_zero_grads(&self.base.arch)?;
        let mut branch_grads = init_zero_grads(&shortcut.arch)?;
        let classes = fwds.logits.cols();
        let mut g_base = Matrix::zeros(batch.len(), classes);
        let mut g_branch = Matrix::zeros(batch.len(), classes);
        let mut total = 0.0;
        for (i, inst) in batch.iter().enumerate() {
            let row = self.bias.as_ref().unwrap().row(inst.type_id);
            let p_base = sigmoid_vec(fwds.logits.row(i));
            let p_branch = sigmoid_vec(branch_fwds.logits.row(i));
            let summed: Vec<f64> = row
                .iter()
                .zip(p_base.iter().zip(&p_branch))
                .map(|(bd, (pb, pq))| bd + pb + pq)
                .collect();
            total += bce_loss_on_probs(&summed, &inst.label);
            let dp = bce_probs_grad(&summed, &inst.label);
            for c in 0..classes {
                g_base.set(i, c, dp[c] * p_base[c] * (1.0 - p_base[c]));
                g_branch.set(i, c, dp[c] * p_branch[c] * (1.0 - p_branch[c]));
            }
        }
        accumulate_backward_batch(&self.base.params, &fwds, &g_base, &mut base_grads, scale)?;
        accumulate_backward_batch(&shortcut.params, &branch_fwds, &g_branch, &mut branch_grads, scale)?;
        total *= scale;
        ensure_finite(total, "sum-dq", self.batch_index)?;
        self.last_losses.insert("joint".into(), total);
        self.base.step(&base_grads)?;
        shortcut.step(&branch_grads)
    }

    /// `L(A~ (.) s(G_q), A) + L(c_q(G_q), A)`: the base logits are masked
    /// multiplicatively by the context branch's sigmoid; the extra head
    /// trains the question-only classifier on ground truth. Test-time
    /// evaluation uses the unmasked base logits.
    fn step_rubi(&mut self, batch: &[&Instance]) -> Result<()> {
        let scale = 1.0 / batch.len() as f64;
        let fwds = self.base_forwards(batch)?;
        let shortcut = self.shortcut.as_mut().unwrap();
        let rubi_head = self.rubi_head.as_mut().unwrap();

        let branch_fwds = forward_batch(&shortcut.arch, &shortcut.params, batch)?;
        let head_fwds = forward_rubi_head_batch(&rubi_head.params, &branch_fwds.logits)?;

        let mut base_grads = init_zero_grads(&self.base.arch)?;
        let mut branch_grads = init_zero_grads(&shortcut.arch)?;
        let mut head_grads = init_zero_grads(&rubi_head.arch)?;
        let classes = fwds.logits.cols();
        let mut g_base = Matrix::zeros(batch.len(), classes);
        let mut d_branch = Matrix::zeros(batch.len(), classes);
        let mut d_head = Matrix::zeros(batch.len(), classes);
        let mut loss1 = 0.0;
        let mut loss2 = 0.0;
        for (i, inst) in batch.iter().enumerate() {
            let z_base = fwds.logits.row(i);
            let gate = sigmoid_vec(branch_fwds.logits.row(i));
            let masked: Vec<f64> = z_base.iter().zip(&gate).map(|(z, s)| z * s).collect();
            loss1 += bce_loss(&masked, &inst.label);
            let d_masked = loss_grad_wrt_logits(LossFamily::Bce, &masked, &inst.label);
            for c in 0..classes {
                g_base.set(i, c, d_masked[c] * gate[c]);
                // through the gate: d/dz_q [s(z_q)] = s(1-s)
                d_branch.set(i, c, d_masked[c] * z_base[c] * gate[c] * (1.0 - gate[c]));
            }

            let head_logits = head_fwds.logits.row(i);
            loss2 += bce_loss(head_logits, &inst.label);
            d_head
                .row_mut(i)
                .copy_from_slice(&loss_grad_wrt_logits(LossFamily::Bce, head_logits, &inst.label));
        }
        // the question-only head's loss also reaches the context branch
        // through the head's input logits
        let mut through_head = Matrix::zeros(batch.len(), classes);
        gemm_xw(&d_head, &rubi_head.params.get("rubi.cq")?.w, &mut through_head)?;
        for i in 0..batch.len() {
            let th = through_head.row(i);
            let db = d_branch.row_mut(i);
            for (d, t) in db.iter_mut().zip(th) {
                *d += t;
            }
        }

        accumulate_backward_batch(&self.base.params, &fwds, &g_base, &mut base_grads, scale)?;
        accumulate_backward_batch(&shortcut.params, &branch_fwds, &d_branch, &mut branch_grads, scale)?;
        accumulate_backward_batch(&rubi_head.params, &head_fwds, &d_head, &mut head_grads, scale)?;
        loss1 *= scale;
        loss2 *= scale;
        ensure_finite(loss1, "rubi-masked", self.batch_index)?;
        ensure_finite(loss2, "rubi-question", self.batch_index)?;
        self.last_losses.insert("masked".into(), loss1);
        self.last_losses.insert("question".into(), loss2);
        self.base.step(&base_grads)?;
        shortcut.step(&branch_grads)?;
        rubi_head.step(&head_grads)
    }

    /// Two rounds per batch: ground truth first, then the label set with the
    /// round-1 top-N predictions removed. Instances whose reduced label set
    /// is empty contribute zero loss in round 2.
    fn step_inverse_supervision(&mut self, batch: &[&Instance]) -> Result<()> {
        let family = self.cfg.loss_family;
        let n = self.cfg.inverse_supervision_n;

        let fwds = self.base_forwards(batch)?;
        let probs: Vec<Vec<f64>> = (0..batch.len())
            .map(|i| match family {
                LossFamily::Bce => sigmoid_vec(fwds.logits.row(i)),
                LossFamily::Sxce => softmax(fwds.logits.row(i)),
            })
            .collect();
        let targets: Vec<Vec<f64>> = batch.iter().map(|i| i.label.clone()).collect();
        let (loss1, grads) = self.base_loss_grads(batch, &fwds, &targets)?;
        self.check_finite(loss1, "round1")?;
        self.base.step(&grads)?;

        // round 2 on the reduced label sets, with fresh forwards; a skipped
        // instance keeps its zero gradient row and contributes no loss
        let scale = 1.0 / batch.len() as f64;
        let fwds2 = self.base_forwards(batch)?;
        let mut grads = init_zero_grads(&self.base.arch)?;
        let mut g = Matrix::zeros(batch.len(), fwds2.logits.cols());
        let mut loss2 = 0.0;
        for (i, inst) in batch.iter().enumerate() {
            let reduced = inverse_supervision_round(&inst.label, &probs[i], n);
            if reduced.iter().all(|&v| v == 0.0) {
                continue;
            }
            let logits = fwds2.logits.row(i);
            loss2 += crate::losses::loss(family, logits, &reduced);
            g.row_mut(i)
                .copy_from_slice(&loss_grad_wrt_logits(family, logits, &reduced));
        }
        accumulate_backward_batch(&self.base.params, &fwds2, &g, &mut grads, scale)?;
        loss2 *= scale;
        self.check_finite(loss2, "round2")?;
        self.last_losses.insert("round1".into(), loss1);
        self.last_losses.insert("round2".into(), loss2);
        self.base.step(&grads)
    }
}

fn ensure_finite(loss: f64, branch: &str, batch_index: usize) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::Numeric {
            name: branch.to_string(),
            detail: format!("non-finite loss at batch {batch_index}"),
        });
    }
    Ok(loss)
}

/// Per-epoch mean losses per branch.
pub type EpochLosses = BTreeMap<String, f64>;

/// Everything a finished run leaves behind.
pub struct RunRecord {
    pub config: EnsembleConfig,
    pub dims: Dims,
    pub epoch_losses: Vec<EpochLosses>,
    pub base_arch: ArchitectureSpec,
    pub base_params: Params,
    pub branches: Vec<(String, ArchitectureSpec, Params)>,
    pub wall_secs: f64,
}

/// Full training loop: seeded shuffling, `epochs x batches` of the selected
/// step, last-epoch parameters kept. Evaluation uses only the base model.
pub fn train(config: &EnsembleConfig, dims: Dims, data: &Dataset) -> Result<RunRecord> {
    let started = Instant::now();
    if data.is_empty() {
        return Err(Error::Empty("training data is empty".into()));
    }
    if data.meta.classes != dims.classes
        || data.meta.n_v != dims.n_v
        || data.meta.d_v != dims.d_v
        || data.meta.d_q != dims.d_q
    {
        return Err(Error::Shape(format!(
            "dataset shapes ({}, {}, {}, {} classes) do not match the architecture",
            data.meta.n_v, data.meta.d_v, data.meta.d_q, data.meta.classes
        )));
    }

    let mut state = TrainState::new(config.clone(), dims, data)?;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut indices: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        let mut shuffle_rng = rng::derive(config.seed, &format!("shuffle/{epoch}"));
        indices.shuffle(&mut shuffle_rng);
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for chunk in indices.chunks(config.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &data.instances[i]).collect();
            state.step(&batch)?;
            for (name, &loss) in &state.last_losses {
                let e = sums.entry(name.clone()).or_insert((0.0, 0));
                e.0 += loss;
                e.1 += 1;
            }
        }
        epoch_losses.push(
            sums.into_iter()
                .map(|(name, (total, count))| (name, total / count as f64))
                .collect(),
        );
    }

    Ok(RunRecord {
        config: config.clone(),
        dims,
        epoch_losses,
        base_arch: *state.base_arch(),
        base_params: state.base_params().clone(),
        branches: state
            .branch_params()
            .into_iter()
            .map(|(name, arch, params)| (name.to_string(), *arch, params.clone()))
            .collect(),
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

/// Evaluate the base model on a dataset: argmax prediction, soft-accuracy
/// credit from the label, attention and mask for the grounding metrics.
pub fn evaluate(
    arch: &ArchitectureSpec,
    params: &Params,
    data: &Dataset,
    threshold: f64,
    cap: usize,
) -> Result<(MetricsReport, Vec<PredictionRecord>)> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation data is empty".into()));
    }
    let mut records = Vec::with_capacity(data.len());
    for inst in &data.instances {
        let fwd = forward(arch, params, inst)?;
        let pred = fwd
            .logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap_or(0);
        records.push(PredictionRecord {
            pred_index: pred,
            score: inst.label[pred],
            type_id: inst.type_id,
            attention: fwd
                .attention
                .unwrap_or_else(|| vec![1.0 / inst.evidence.rows() as f64; inst.evidence.rows()]),
            mask: inst.grounding_mask.clone(),
        });
    }
    let report = cgr_cgw_cgd(&records, threshold, cap)?;
    Ok((report, records))
}
