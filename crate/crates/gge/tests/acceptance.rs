//! Acceptance suite: one test per release criterion, each printing a single
//! PASS/FAIL line. Criteria 1-4 check the numeric kernels against
//! independent oracles; criteria 5, 6, and 8 reproduce the expected
//! orderings on the default synthetic benchmark; criterion 7 checks
//! bit-level determinism of training artifacts.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gge::benchmark::{generate, invert_grounding, SplitSet};
use gge::config::RunConfig;
use gge::data::{Dataset, DatasetMeta, Instance, Split};
use gge::ensemble::{
    evaluate, fit_distribution_bias, train, EnsembleConfig, Schedule, Variant,
};
use gge::losses::{pseudo_label_bce, pseudo_label_ce, sigmoid, LossFamily};
use gge::metrics::{cap_for_threshold, cgr_cgw_cgd, MetricsReport, PredictionRecord};
use gge::models::{forward, ArchitectureSpec, Dims, ModelKind};
use gge::nn::{init_params, save_params, Matrix};
use gge::report::write_metrics_json;

/// Print the one-line verdict and fail the test if the criterion does not
/// hold. `detail` is shown in both cases so the numbers are on record.
fn verdict(criterion: &str, ok: bool, detail: &str) {
    println!("{criterion}: {} — {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{criterion} failed: {detail}");
}

// ---------------------------------------------------------------------------
// shared benchmark data and training cache
// ---------------------------------------------------------------------------

fn benchmark() -> &'static SplitSet {
    static DATA: OnceLock<SplitSet> = OnceLock::new();
    DATA.get_or_init(|| {
        generate(&RunConfig::default().generator).expect("default benchmark generates")
    })
}

/// Out-of-distribution and in-distribution accuracy plus OOD grounding
/// difference for one trained variant.
#[derive(Clone, Copy)]
struct Cell {
    ood: f64,
    id: f64,
    cgd_ood: f64,
}

fn run_cache() -> &'static Mutex<HashMap<(String, u64), Cell>> {
    static CACHE: OnceLock<Mutex<HashMap<(String, u64), Cell>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Train one configuration on the default benchmark (memoized per
/// variant/schedule/seed) and evaluate it on both test splits.
fn run_variant(variant: Variant, schedule: Schedule, vision_only: bool, seed: u64) -> Cell {
    let key = (format!("{}/{:?}/{vision_only}", variant.as_str(), schedule), seed);
    if let Some(cell) = run_cache().lock().unwrap().get(&key) {
        return *cell;
    }
    let config = RunConfig::default();
    let training = EnsembleConfig { variant, schedule, vision_only, seed, ..config.training };
    let data = benchmark();
    let record = train(&training, config.dims(), &data.train).expect("training succeeds");
    let (t, c) = (config.evaluation.threshold, config.evaluation.cap);
    let (ood, _) =
        evaluate(&record.base_arch, &record.base_params, &data.test_ood, t, c).unwrap();
    let (id, _) = evaluate(&record.base_arch, &record.base_params, &data.test_id, t, c).unwrap();
    assert!((ood.cgd - (ood.cgr - ood.cgw)).abs() < 1e-15, "grounding identity");
    assert!((id.cgd - (id.cgr - id.cgw)).abs() < 1e-15, "grounding identity");
    let cell = Cell { ood: ood.accuracy, id: id.accuracy, cgd_ood: ood.cgd };
    run_cache().lock().unwrap().insert(key, cell);
    cell
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean OOD/ID accuracy and OOD grounding difference over `seeds` seeds.
fn averaged(variant: Variant, schedule: Schedule, vision_only: bool, seeds: u64) -> Cell {
    let cells: Vec<Cell> =
        (1..=seeds).map(|s| run_variant(variant, schedule, vision_only, s)).collect();
    Cell {
        ood: mean(&cells.iter().map(|c| c.ood).collect::<Vec<_>>()),
        id: mean(&cells.iter().map(|c| c.id).collect::<Vec<_>>()),
        cgd_ood: mean(&cells.iter().map(|c| c.cgd_ood).collect::<Vec<_>>()),
    }
}

// ---------------------------------------------------------------------------
// criterion 1: analytic gradients vs central finite differences
// ---------------------------------------------------------------------------

fn random_instance(rng: &mut ChaCha8Rng, dims: Dims, context_len: usize) -> Instance {
    let evidence: Vec<f64> = (0..dims.n_v * dims.d_v).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let context: Vec<f64> = (0..context_len).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let mut label = vec![0.0; dims.classes];
    label[rng.gen_range(0..dims.classes)] = 1.0;
    for l in label.iter_mut() {
        if rng.gen_bool(0.3) {
            *l = rng.gen_range(0.0..1.0);
        }
    }
    Instance {
        evidence: Matrix::from_vec(dims.n_v, dims.d_v, evidence).unwrap(),
        context,
        type_id: 0,
        label,
        grounding_mask: vec![0.0; dims.n_v],
    }
}

#[test]
fn criterion_1_gradient_oracle() {
    let started = Instant::now();
    let dims = Dims { n_v: 4, d_v: 8, d_q: 8, hidden: 12, classes: 6 };
    let kinds = [
        ModelKind::BaseAttention,
        ModelKind::ContextBranch,
        ModelKind::EvidenceOnly,
        ModelKind::SelfHead,
    ];
    let mut max_err: f64 = 0.0;
    for kind in kinds {
        let arch = ArchitectureSpec::new(kind, dims);
        // the self-ensemble head consumes a hidden-width representation
        let context_len = if kind == ModelKind::SelfHead { dims.hidden } else { dims.d_q };
        for family in [LossFamily::Bce, LossFamily::Sxce] {
            for seed in 0..10u64 {
                let params = init_params(&arch, seed + 1).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                // skip draws whose joint representation is exactly zero:
                // every hidden unit dead puts the downstream pre-activations
                // exactly on the ReLU kink, where a central difference is
                // undefined rather than wrong
                let inst = loop {
                    let inst = random_instance(&mut rng, dims, context_len);
                    let fwd = forward(&arch, &params, &inst).unwrap();
                    match &fwd.joint_repr {
                        Some(j) if j.iter().all(|&v| v == 0.0) => continue,
                        _ => break inst,
                    }
                };
                let err =
                    gge::nn::grad_check(&arch, &params, &inst, family, 1e-5).unwrap();
                max_err = max_err.max(err);
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        "criterion 1 (gradient oracle)",
        max_err <= 1e-4 && elapsed < 10.0,
        &format!("max relative error {max_err:.3e} over 4 architectures x 2 losses x 10 seeds in {elapsed:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// criterion 2: pseudo-label closed forms and monotonicity
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_pseudo_label_oracle() {
    let ys = [0.0, 0.3, 0.6, 0.9, 1.0];
    let hs: Vec<f64> = (0..=100).map(|i| -5.0 + 0.1 * i as f64).collect();
    let mut max_bce: f64 = 0.0;
    let mut monotone = true;
    for &y in &ys {
        let mut prev = f64::INFINITY;
        for &h in &hs {
            let got = pseudo_label_bce(&[y], &[h])[0];
            let want = (2.0 * y * sigmoid(-2.0 * y * h)).clamp(0.0, 1.0);
            max_bce = max_bce.max((got - want).abs());
            // non-increasing in the ensemble output for a fixed label
            if got > prev + 1e-12 {
                monotone = false;
            }
            prev = got;
        }
    }
    let mut max_ce: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.gen_range(2..12);
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let labels: Vec<f64> =
            (0..n).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.0..1.0) } else { 0.0 }).collect();
        let got = pseudo_label_ce(&labels, &probs);
        for i in 0..n {
            let want = if labels[i] > 0.0 { (labels[i] - probs[i]).clamp(0.0, 1.0) } else { 0.0 };
            max_ce = max_ce.max((got[i] - want).abs());
        }
    }
    verdict(
        "criterion 2 (pseudo-label oracle)",
        max_bce <= 1e-9 && max_ce <= 1e-12 && monotone,
        &format!("bce grid error {max_bce:.3e}, ce error {max_ce:.3e}, monotone in ensemble output: {monotone}"),
    );
}

// ---------------------------------------------------------------------------
// criterion 3: distribution-bias table vs brute-force recount
// ---------------------------------------------------------------------------

fn labeled_dataset(rng: &mut ChaCha8Rng, types: usize, classes: usize, n: usize) -> Dataset {
    let mut instances = Vec::with_capacity(n);
    for i in 0..n {
        // guarantee every type appears at least once
        let type_id = if i < types { i } else { rng.gen_range(0..types) };
        let mut label = vec![0.0; classes];
        label[rng.gen_range(0..classes)] = 1.0;
        for l in label.iter_mut() {
            if rng.gen_bool(0.2) {
                *l = rng.gen_range(0.0..1.0);
            }
        }
        instances.push(Instance {
            evidence: Matrix::zeros(1, 1),
            context: vec![0.0],
            type_id,
            label,
            grounding_mask: vec![0.0],
        });
    }
    Dataset {
        instances,
        meta: DatasetMeta {
            n_v: 1,
            d_v: 1,
            d_q: 1,
            classes,
            types,
            split: Split::Train,
            config_digest: String::new(),
        },
    }
}

#[test]
fn criterion_3_distribution_bias_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut max_err: f64 = 0.0;
    for _ in 0..100 {
        let types = rng.gen_range(1..5);
        let classes = rng.gen_range(2..10);
        let n = rng.gen_range(types..1000);
        let data = labeled_dataset(&mut rng, types, classes, n);
        let table = fit_distribution_bias(&data).unwrap();
        // brute force: re-accumulate and normalize from scratch
        let mut sums = vec![vec![0.0f64; classes]; types];
        for inst in &data.instances {
            for (c, &s) in inst.label.iter().enumerate() {
                sums[inst.type_id][c] += s;
            }
        }
        for (t, row) in sums.iter().enumerate() {
            let total: f64 = row.iter().sum();
            for (c, &s) in row.iter().enumerate() {
                let want = if total > 0.0 { s / total } else { 0.0 };
                max_err = max_err.max((table.row(t)[c] - want).abs());
            }
        }
    }
    verdict(
        "criterion 3 (distribution-bias oracle)",
        max_err <= 1e-12,
        &format!("max abs error {max_err:.3e} over 100 random datasets"),
    );
}

// ---------------------------------------------------------------------------
// criterion 4: grounding metrics vs brute-force recount
// ---------------------------------------------------------------------------

fn brute_force_grounding(records: &[PredictionRecord], t: f64, cap: usize) -> (f64, f64, f64) {
    let (mut n_rp, mut n_wp, mut rg_rp, mut rg_wp) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        let mut idx: Vec<usize> =
            (0..r.attention.len()).filter(|&i| r.attention[i] >= t).collect();
        idx.sort_by(|&a, &b| r.attention[b].partial_cmp(&r.attention[a]).unwrap());
        idx.truncate(cap);
        let hit = idx.iter().any(|&i| r.mask[i] >= 0.5);
        if r.score > 0.0 {
            n_rp += 1;
            rg_rp += hit as usize;
        } else {
            n_wp += 1;
            rg_wp += hit as usize;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let cgr = ratio(rg_rp, n_rp);
    let cgw = ratio(rg_wp, n_wp);
    (cgr, cgw, cgr - cgw)
}

#[test]
fn criterion_4_grounding_metrics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut exact = true;
    let mut identity = true;
    for _ in 0..50 {
        let n = rng.gen_range(1..=64);
        let regions = rng.gen_range(1..10);
        let records: Vec<PredictionRecord> = (0..n)
            .map(|_| PredictionRecord {
                pred_index: 0,
                score: if rng.gen_bool(0.5) { rng.gen_range(0.1..1.0) } else { 0.0 },
                type_id: rng.gen_range(0..3),
                attention: (0..regions).map(|_| rng.gen_range(0.0..1.0)).collect(),
                mask: (0..regions).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect(),
            })
            .collect();
        let t = [0.1, 0.2, 0.3, 0.4][rng.gen_range(0..4)];
        let cap = cap_for_threshold(t);
        let report: MetricsReport = cgr_cgw_cgd(&records, t, cap).unwrap();
        let (cgr, cgw, cgd) = brute_force_grounding(&records, t, cap);
        exact &= report.cgr == cgr && report.cgw == cgw && report.cgd == cgd;
        identity &= report.cgd == report.cgr - report.cgw;
    }
    let caps_ok = cap_for_threshold(0.1) == 9
        && cap_for_threshold(0.2) == 4
        && cap_for_threshold(0.3) == 3
        && cap_for_threshold(0.4) == 2;
    verdict(
        "criterion 4 (grounding metrics oracle)",
        exact && identity && caps_ok,
        &format!("brute-force match: {exact}, difference identity: {identity}, threshold/cap pairing: {caps_ok}"),
    );
}

// ---------------------------------------------------------------------------
// criterion 5: accuracy ordering on the default benchmark
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_debias_ordering() {
    let started = Instant::now();
    let base = averaged(Variant::Baseline, Schedule::Tog, false, 5);
    let q = averaged(Variant::GgeQ, Schedule::Tog, false, 5);
    let dq = averaged(Variant::GgeDq, Schedule::Tog, false, 5);
    let elapsed = started.elapsed().as_secs_f64();
    let ordered = base.ood < q.ood && q.ood < dq.ood;
    let gap = dq.ood - base.ood;
    let grounding = dq.cgd_ood > base.cgd_ood;
    verdict(
        "criterion 5 (de-bias ordering)",
        ordered && gap >= 0.10 && grounding && elapsed < 300.0,
        &format!(
            "OOD accuracy baseline {:.4} < two-branch {:.4} < prior+branch {:.4} (gap {:.4}), grounding difference {:.4} vs {:.4}, {elapsed:.0}s",
            base.ood, q.ood, dq.ood, gap, dq.cgd_ood, base.cgd_ood
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 6: control experiments
// ---------------------------------------------------------------------------

#[test]
fn criterion_6a_vision_only_control() {
    let plain = averaged(Variant::Baseline, Schedule::Tog, true, 3);
    let prior = averaged(Variant::GgeD, Schedule::Tog, true, 3);
    verdict(
        "criterion 6a (evidence-only control)",
        prior.ood > plain.ood,
        &format!("evidence-only base with prior branch {:.4} > plain evidence-only {:.4} OOD", prior.ood, plain.ood),
    );
}

#[test]
fn criterion_6b_inverse_supervision_control() {
    let base = averaged(Variant::Baseline, Schedule::Tog, false, 3);
    let inv = averaged(Variant::InverseSupervision, Schedule::Tog, false, 3);
    verdict(
        "criterion 6b (inverse-supervision control)",
        inv.ood > base.ood && inv.id < base.id,
        &format!(
            "OOD {:.4} > {:.4} while ID {:.4} < {:.4}",
            inv.ood, base.ood, inv.id, base.id
        ),
    );
}

#[test]
fn criterion_6c_inverted_grounding_control() {
    let config = RunConfig::default();
    let data = benchmark();
    let record = train(&config.training, config.dims(), &data.train).unwrap();
    let (t, c) = (config.evaluation.threshold, config.evaluation.cap);
    let (plain, _) =
        evaluate(&record.base_arch, &record.base_params, &data.test_ood, t, c).unwrap();
    let flipped_data = invert_grounding(&data.test_ood);
    let (flipped, _) =
        evaluate(&record.base_arch, &record.base_params, &flipped_data, t, c).unwrap();
    let acc_unchanged = plain.accuracy == flipped.accuracy;
    let cgd_moved = (plain.cgd - flipped.cgd).abs() > 0.05;
    verdict(
        "criterion 6c (inverted-grounding control)",
        acc_unchanged && cgd_moved,
        &format!(
            "accuracy {:.4} == {:.4}, grounding difference moved {:.4} -> {:.4}",
            plain.accuracy, flipped.accuracy, plain.cgd, flipped.cgd
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 7: bit-level determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_determinism() {
    let config = RunConfig::default();
    let training = EnsembleConfig { variant: Variant::GgeDq, ..config.training };
    let data = benchmark();
    let dir = tempfile::tempdir().unwrap();
    let mut artifacts: Vec<Vec<Vec<u8>>> = Vec::new();
    for pass in 0..2 {
        let record = train(&training, config.dims(), &data.train).unwrap();
        let (report, _) = evaluate(
            &record.base_arch,
            &record.base_params,
            &data.test_ood,
            config.evaluation.threshold,
            config.evaluation.cap,
        )
        .unwrap();
        let base_path = dir.path().join(format!("base_{pass}.jsonl"));
        save_params(&record.base_params, &base_path).unwrap();
        let mut blobs = vec![std::fs::read(&base_path).unwrap()];
        for (name, _, params) in &record.branches {
            let p = dir.path().join(format!("{name}_{pass}.jsonl"));
            save_params(params, &p).unwrap();
            blobs.push(std::fs::read(&p).unwrap());
        }
        let report_path = dir.path().join(format!("report_{pass}.json"));
        write_metrics_json(&report_path, &report).unwrap();
        blobs.push(std::fs::read(&report_path).unwrap());
        artifacts.push(blobs);
    }
    let identical = artifacts[0] == artifacts[1];
    verdict(
        "criterion 7 (determinism)",
        identical,
        &format!(
            "{} checkpoint/report artifacts byte-identical across two runs: {identical}",
            artifacts[0].len()
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 8: schedule parity of the two-stage ensemble
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_schedule_parity() {
    let base = averaged(Variant::Baseline, Schedule::Tog, false, 5);
    let q = averaged(Variant::GgeQ, Schedule::Tog, false, 5);
    let dq_iter = averaged(Variant::GgeDq, Schedule::Iter, false, 5);
    verdict(
        "criterion 8 (schedule parity)",
        base.ood < q.ood && q.ood < dq_iter.ood,
        &format!(
            "sequential-update schedule keeps the ordering: {:.4} < {:.4} < {:.4}",
            base.ood, q.ood, dq_iter.ood
        ),
    );
}
