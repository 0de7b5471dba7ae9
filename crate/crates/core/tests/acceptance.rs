//! End-to-end gate for the repository: ten checks, one test each, every test
//! printing a single PASS line (visible with --nocapture). Tolerances are
//! pinned here rather than in the library so the gate cannot drift.

use std::sync::OnceLock;
use std::time::Instant;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sansformer_core::data::{
    cohort_from_jsonl, cohort_to_jsonl, generate_synthetic_cohort, make_batch,
    make_pretrain_batch, BatchTask, BatchTargets, PatientRecord, SequenceBatch, Sex, SynthConfig,
    Visit, Vocabulary, DELTA_TAU_BUCKETS, NUM_DIAG_CATEGORIES, TOPCAP,
};
use sansformer_core::model::{
    bind_params, forward, gated_mixer, load_checkpoint, multitask_loss, save_checkpoint, Bound,
    LossWeights, ModelConfig, ModelParams, Task, Variant,
};
use sansformer_core::tensor::{
    finite_difference_check_multi, NodeId, Precision, Tape, Tensor,
};
use sansformer_core::train::{
    auc, eval_loss, evaluate, fit, mae, poisson_nll, pretrain_split, r2, spearman,
    transfer_from_pretrained, TrainRunConfig,
};
use sansformer_core::Result;

// ── shared helpers ──────────────────────────────────────────────────────────

fn date(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

fn visit(d: NaiveDate, codes: &[&str], los: Option<u32>, died: bool) -> Visit {
    Visit {
        visit_id: format!("v{d}"),
        date: d,
        codes: codes.iter().map(|s| s.to_string()).collect(),
        length_of_stay_days: los,
        died_this_admission: Some(died),
    }
}

fn record(id: &str, visits: Vec<Visit>) -> PatientRecord {
    PatientRecord {
        patient_id: id.into(),
        visits,
        age_at_first_visit: 70,
        sex: Sex::U,
        subgroup_labels: Default::default(),
        first_diagnosis_date: Default::default(),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

// ── 01: gradients ───────────────────────────────────────────────────────────

/// Reduce an op output to a scalar through a fixed random weighting so that
/// misplaced gradient entries cannot cancel against each other.
fn weighted_sum(tape: &mut Tape, x: NodeId, seed: u64) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = tape.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(x, c)?;
    Ok(tape.sum_all(p))
}

fn check_op(
    name: &str,
    xs: &[Tensor],
    f: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> f64 {
    let report = finite_difference_check_multi(f, xs, 1e-4).unwrap();
    assert!(
        report.max_rel_err < 1e-3,
        "{name}: rel err {} at input {} coord {}",
        report.max_rel_err,
        report.worst_input,
        report.worst_coord
    );
    report.max_rel_err
}

/// A two-record batch that exercises every head and both mask kinds, with
/// stay targets placed deep in the linear region of the robust loss so the
/// finite-difference probe never straddles its kink.
fn gradcheck_batch() -> SequenceBatch {
    let (b, t, v) = (2usize, 4usize, 3usize);
    let mut code_ids = vec![0u32; b * t * v];
    let mut code_mask = vec![0u8; b * t * v];
    let mut set = |bi: usize, ti: usize, codes: &[u32]| {
        for (vi, &c) in codes.iter().enumerate() {
            code_ids[(bi * t + ti) * v + vi] = c;
            code_mask[(bi * t + ti) * v + vi] = 1;
        }
    };
    set(0, 0, &[3, 4]);
    set(0, 1, &[5]);
    set(0, 2, &[6, 7, 8]);
    set(0, 3, &[9, 2]);
    set(1, 0, &[2, 3, 4]);
    set(1, 1, &[8, 1]);
    SequenceBatch {
        b,
        t,
        v,
        code_ids,
        delta_bucket: vec![0, 3, 1, 7, 0, 2, 0, 0],
        visit_mask: vec![1, 1, 1, 1, 1, 1, 0, 0],
        code_mask,
        targets: BatchTargets {
            y_count: Some(vec![3.0, 1.0]),
            y_diag: Some((0..b * NUM_DIAG_CATEGORIES).map(|i| (i % 4) as f64).collect()),
            y_death: Some(vec![1.0, 0.0]),
            y_los: Some(vec![3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 0.0, 0.0]),
            los_mask: Some(vec![1, 0, 1, 0, 1, 1, 0, 0]),
        },
        skipped: 0,
    }
}

#[test]
fn c01_gradient_suite() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut track = |e: f64| worst = worst.max(e);

    // every differentiable tape op, each against central differences
    let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    track(check_op("matmul", &[a, b], |t, ids| {
        let y = t.matmul(ids[0], ids[1])?;
        weighted_sum(t, y, 1)
    }));

    let a = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    track(check_op("add", &[a, b], |t, ids| {
        let y = t.add(ids[0], ids[1])?;
        weighted_sum(t, y, 2)
    }));

    // broadcast form used by the gate bias
    let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3, 1], -1.0, 1.0);
    track(check_op("add broadcast", &[a, b], |t, ids| {
        let y = t.add(ids[0], ids[1])?;
        weighted_sum(t, y, 3)
    }));

    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    track(check_op("sub", &[a, b], |t, ids| {
        let y = t.sub(ids[0], ids[1])?;
        weighted_sum(t, y, 4)
    }));

    let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    track(check_op("mul", &[a, b], |t, ids| {
        let y = t.mul(ids[0], ids[1])?;
        weighted_sum(t, y, 5)
    }));

    let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let m = rand_tensor(&mut rng, &[2, 3, 1], -1.0, 1.0);
    track(check_op("mul broadcast", &[a, m], |t, ids| {
        let y = t.mul(ids[0], ids[1])?;
        weighted_sum(t, y, 6)
    }));

    let a = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    track(check_op("scale", &[a], |t, ids| {
        let y = t.scale(ids[0], -1.7)?;
        weighted_sum(t, y, 7)
    }));

    let a = rand_tensor(&mut rng, &[2, 5], -2.0, 2.0);
    track(check_op("gelu", &[a], |t, ids| {
        let y = t.gelu(ids[0]);
        weighted_sum(t, y, 8)
    }));

    let x = rand_tensor(&mut rng, &[2, 3, 6], -1.0, 1.0);
    let g = rand_tensor(&mut rng, &[6], 0.5, 1.5);
    let bb = rand_tensor(&mut rng, &[6], -0.5, 0.5);
    track(check_op("layer_norm", &[x, g, bb], |t, ids| {
        let y = t.layer_norm(ids[0], ids[1], ids[2])?;
        weighted_sum(t, y, 9)
    }));

    let table = rand_tensor(&mut rng, &[7, 4], -1.0, 1.0);
    track(check_op("gather_rows", &[table], |t, ids| {
        let y = t.gather_rows(ids[0], &[0, 6, 3, 3, 1, 2], &[2, 3])?;
        weighted_sum(t, y, 10)
    }));

    let a = rand_tensor(&mut rng, &[2, 8], -1.0, 1.0);
    track(check_op("narrow_last", &[a], |t, ids| {
        let y = t.narrow_last(ids[0], 2, 3)?;
        weighted_sum(t, y, 11)
    }));

    let a = rand_tensor(&mut rng, &[2, 6], -1.0, 1.0);
    track(check_op("split_last", &[a], |t, ids| {
        let (z1, z2) = t.split_last(ids[0])?;
        let s1 = weighted_sum(t, z1, 12)?;
        let s2 = weighted_sum(t, z2, 13)?;
        let s2 = t.scale(s2, 2.0)?;
        t.add(s1, s2)
    }));

    let a = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
    track(check_op("concat_last", &[a, b], |t, ids| {
        let y = t.concat_last(&[ids[0], ids[1]])?;
        weighted_sum(t, y, 14)
    }));

    let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    track(check_op("sum_axis", &[a], |t, ids| {
        let y = t.sum_axis(ids[0], 1)?;
        weighted_sum(t, y, 15)
    }));

    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    track(check_op("sum_all", &[a], |t, ids| {
        let c = t.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 - 5.0) / 3.0));
        let y = t.mul(ids[0], c)?;
        Ok(t.sum_all(y))
    }));

    let w = rand_tensor(&mut rng, &[5, 5], -1.0, 1.0);
    track(check_op("causal_mask", &[w], |t, ids| {
        let y = t.causal_mask(ids[0])?;
        weighted_sum(t, y, 16)
    }));

    let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    track(check_op("reshape", &[a], |t, ids| {
        let y = t.reshape(ids[0], &[6, 4])?;
        weighted_sum(t, y, 17)
    }));

    let a = rand_tensor(&mut rng, &[3, 4, 5], -1.0, 1.0);
    track(check_op("take_steps", &[a], |t, ids| {
        let y = t.take_steps(ids[0], &[1, 3, 0])?;
        weighted_sum(t, y, 18)
    }));

    let a = rand_tensor(&mut rng, &[6], -1.0, 1.5);
    track(check_op("poisson_nll", &[a], |t, ids| {
        t.poisson_nll(ids[0], &[0.0, 2.0, 1.0, 5.0, 3.0, 0.0], Some(&[1.0, 0.5, 1.0, 2.0, 0.0, 1.0]))
    }));

    let a = rand_tensor(&mut rng, &[6], -2.0, 2.0);
    track(check_op("bce_with_logits", &[a], |t, ids| {
        t.bce_with_logits(ids[0], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0], Some(&[1.0, 1.0, 0.5, 2.0, 0.0, 1.0]))
    }));

    // residuals sit well inside the linear branch, clear of the kink
    let a = rand_tensor(&mut rng, &[6], -0.3, 0.3);
    track(check_op("huber", &[a], |t, ids| {
        t.huber(ids[0], &[3.0, -3.0, 4.0, 3.5, -2.5, 3.0], 1.0, Some(&[1.0, 1.0, 0.0, 1.0, 1.0, 2.0]))
    }));

    // full model: one axial layer, every head, gradient of the joint loss
    // with respect to every parameter tensor at once
    let mut cfg = ModelConfig::new(10, 8, 4, 3);
    cfg.proj_dim = 12;
    cfg.chunks = 4;
    cfg.ff_dim = 16;
    cfg.layers = 1;
    cfg.dropout = 0.0;
    cfg.tasks = vec![Task::Count, Task::Diag, Task::Mortality, Task::Los];
    let mut params = ModelParams::init(&cfg, 7).unwrap();
    let mut prng = ChaCha8Rng::seed_from_u64(99);
    for name in params.names() {
        if name.contains(".sgu.w") {
            for x in params.get_mut(&name).unwrap().data_mut() {
                *x += 0.4 * (prng.gen::<f64>() - 0.5);
            }
        }
    }
    params.pin_structural();
    let batch = gradcheck_batch();
    let names = params.names();
    let tensors: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    let report = finite_difference_check_multi(
        |tape, ids| {
            let bound = Bound::from_ids(&names, ids);
            let out = forward(tape, &bound, &cfg, &batch, None)?;
            multitask_loss(tape, &out, &batch, &LossWeights::default())
        },
        &tensors,
        1e-4,
    )
    .unwrap();
    assert!(
        report.max_rel_err < 1e-3,
        "model: rel err {} on {} coord {}",
        report.max_rel_err,
        names[report.worst_input],
        report.worst_coord
    );
    track(report.max_rel_err);

    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 60, "gradient suite took {elapsed:?}");
    println!("01 gradient suite: PASS (worst rel err {worst:.2e}, {elapsed:.1?})");
}

// ── 02: causal isolation ────────────────────────────────────────────────────

struct ForwardSnap {
    rep: Vec<f64>,
    count: Vec<f64>,
    los: Vec<f64>,
}

fn run_forward(cfg: &ModelConfig, params: &ModelParams, batch: &SequenceBatch) -> ForwardSnap {
    let mut tape = Tape::with_precision(Precision::Double);
    let bound = bind_params(&mut tape, params, false);
    let out = forward(&mut tape, &bound, cfg, batch, None).unwrap();
    ForwardSnap {
        rep: tape.value(out.rep).data().to_vec(),
        count: tape.value(out.count.unwrap()).data().to_vec(),
        los: tape.value(out.los.unwrap()).data().to_vec(),
    }
}

fn random_causal_batch(rng: &mut ChaCha8Rng, t: usize, v: usize, vocab: usize) -> SequenceBatch {
    let b = rng.gen_range(1..=4);
    let mut code_ids = vec![0u32; b * t * v];
    let mut code_mask = vec![0u8; b * t * v];
    let mut visit_mask = vec![0u8; b * t];
    let mut delta = vec![0u32; b * t];
    for bi in 0..b {
        let n = rng.gen_range(2..=t);
        for ti in 0..n {
            visit_mask[bi * t + ti] = 1;
            if ti > 0 {
                delta[bi * t + ti] = rng.gen_range(1..DELTA_TAU_BUCKETS as u32);
            }
            let k = rng.gen_range(1..=v);
            for vi in 0..k {
                code_ids[(bi * t + ti) * v + vi] = rng.gen_range(2..vocab as u32);
                code_mask[(bi * t + ti) * v + vi] = 1;
            }
        }
    }
    let bt = b * t;
    SequenceBatch {
        b,
        t,
        v,
        code_ids,
        delta_bucket: delta,
        visit_mask,
        code_mask,
        targets: BatchTargets {
            y_count: Some(vec![1.0; b]),
            y_diag: None,
            y_death: None,
            y_los: Some(vec![0.0; bt]),
            los_mask: Some(vec![1; bt]),
        },
        skipped: 0,
    }
}

#[test]
fn c02_causal_isolation() {
    let (t_max, v_max, vocab) = (5usize, 3usize, 12usize);
    let mut failures = 0usize;
    let mut checked = 0usize;
    for variant in [Variant::Axial, Variant::Additive] {
        let mut cfg = ModelConfig::new(vocab, 8, t_max, v_max);
        cfg.proj_dim = 8;
        cfg.chunks = 2;
        cfg.ff_dim = 16;
        cfg.layers = 2;
        cfg.dropout = 0.0;
        cfg.variant = variant;
        cfg.tasks = vec![Task::Count, Task::Los];
        let mut params = ModelParams::init(&cfg, 31).unwrap();
        // zero-init mixing maps carry nothing across positions, so open the
        // learned pathways before probing
        let mut prng = ChaCha8Rng::seed_from_u64(32);
        for name in params.names() {
            if name.contains(".sgu.w") {
                for x in params.get_mut(&name).unwrap().data_mut() {
                    *x += prng.gen::<f64>() - 0.5;
                }
            }
        }
        params.pin_structural();

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..100 {
            let mut cfg = cfg.clone();
            cfg.delta_tau_per_slot = rng.gen_bool(0.5);
            cfg.slot_positional_encoding = rng.gen_bool(0.5);
            let batch = random_causal_batch(&mut rng, t_max, v_max, vocab);
            let base = run_forward(&cfg, &params, &batch);

            let bi = rng.gen_range(0..batch.b);
            let n: usize =
                batch.visit_mask[bi * t_max..(bi + 1) * t_max].iter().map(|&m| m as usize).sum();
            let t_cut = rng.gen_range(0..n - 1);
            let s = rng.gen_range(t_cut + 1..n);

            let mut pert = batch.clone();
            match case % 4 {
                0 => {
                    // swap one live code for a different one
                    let slot = (bi * t_max + s) * v_max;
                    let old = pert.code_ids[slot];
                    pert.code_ids[slot] = if old + 1 < vocab as u32 { old + 1 } else { 2 };
                }
                1 => {
                    // move the visit in time
                    let old = pert.delta_bucket[bi * t_max + s];
                    pert.delta_bucket[bi * t_max + s] =
                        if old + 1 < DELTA_TAU_BUCKETS as u32 { old + 1 } else { 1 };
                }
                2 => {
                    // add or drop a code at the visit
                    let slot = (bi * t_max + s) * v_max + (v_max - 1);
                    if pert.code_mask[slot] == 1 {
                        pert.code_mask[slot] = 0;
                        pert.code_ids[slot] = 0;
                    } else {
                        pert.code_mask[slot] = 1;
                        pert.code_ids[slot] = 3;
                    }
                }
                _ => {
                    // drop the final visit entirely (only when it stays past the cut)
                    let last = n - 1;
                    pert.visit_mask[bi * t_max + last] = 0;
                    pert.delta_bucket[bi * t_max + last] = 0;
                    for vi in 0..v_max {
                        pert.code_mask[(bi * t_max + last) * v_max + vi] = 0;
                        pert.code_ids[(bi * t_max + last) * v_max + vi] = 0;
                    }
                }
            }
            let got = run_forward(&cfg, &params, &pert);
            let e = cfg.embed_dim;

            for row in 0..batch.b {
                let upto = if row == bi { t_cut + 1 } else { t_max };
                for step in 0..upto {
                    let lo = (row * t_max + step) * e;
                    for d in 0..e {
                        if base.rep[lo + d].to_bits() != got.rep[lo + d].to_bits() {
                            failures += 1;
                        }
                        checked += 1;
                    }
                    if base.los[row * t_max + step].to_bits()
                        != got.los[row * t_max + step].to_bits()
                    {
                        failures += 1;
                    }
                }
                if row != bi && base.count[row].to_bits() != got.count[row].to_bits() {
                    failures += 1;
                }
            }
        }
    }
    assert_eq!(failures, 0, "future content leaked into {failures} earlier outputs");
    println!("02 causal isolation: PASS (200 batches, {checked} coordinates bit-identical)");
}

// ── 03: gate at initialization ──────────────────────────────────────────────

const GELU_AT_ONE: f64 = 0.841_344_746_068_542_9;

#[test]
fn c03_gate_at_init() {
    let t_max = 6usize;
    let e = 8usize;
    let mut cfg = ModelConfig::new(10, e, t_max, 3);
    cfg.proj_dim = 8;
    cfg.chunks = 2;
    cfg.layers = 1;
    let mut params = ModelParams::init(&cfg, 5).unwrap();

    // freshly drawn mixing maps are exactly zero with unit bias
    for c in 0..cfg.chunks {
        let w = params.get(&format!("layer0.time.sgu.w{c}")).unwrap();
        assert!(w.data().iter().all(|&x| x == 0.0), "w{c} not exactly zero at init");
        let b = params.get(&format!("layer0.time.sgu.b{c}")).unwrap();
        assert!(b.data().iter().all(|&x| x == 1.0), "b{c} not exactly one at init");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[1, t_max, e], -1.0, 1.0);

    let run = |params: &ModelParams, x: &Tensor| -> Vec<f64> {
        let mut tape = Tape::with_precision(Precision::Double);
        let bound = bind_params(&mut tape, params, false);
        let xid = tape.constant(x.clone());
        let out = gated_mixer(&mut tape, &bound, "layer0.time", cfg.chunks, xid, true, None).unwrap();
        tape.value(out).data().to_vec()
    };

    // no position influences any other at init, in either direction
    let base = run(&params, &x);
    for j in 0..t_max {
        let mut pert = x.clone();
        for d in 0..e {
            pert.data_mut()[j * e + d] += 0.25 + 0.1 * d as f64;
        }
        let got = run(&params, &pert);
        for i in 0..t_max {
            if i == j {
                continue;
            }
            for d in 0..e {
                assert_eq!(
                    base[i * e + d].to_bits(),
                    got[i * e + d].to_bits(),
                    "perturbing position {j} moved position {i}"
                );
            }
        }
    }

    // with the output projection pinned to identity the mixer reduces to the
    // init gate: gelu(1) times the content half
    let v_name = "layer0.time.sgu.v";
    let p = cfg.proj_dim;
    *params.get_mut(v_name).unwrap() =
        Tensor::from_fn(&[p, e], |i| if i / e == i % e { 1.0 } else { 0.0 });
    let out = run(&params, &x);

    let z1 = {
        let mut tape = Tape::with_precision(Precision::Double);
        let bound = bind_params(&mut tape, &params, false);
        let xid = tape.constant(x.clone());
        let g = bound.get("layer0.time.ln_g").unwrap();
        let b = bound.get("layer0.time.ln_b").unwrap();
        let xn = tape.layer_norm(xid, g, b).unwrap();
        let u = bound.get("layer0.time.sgu.u").unwrap();
        let z = tape.matmul(xn, u).unwrap();
        let z = tape.gelu(z);
        let (z1, _) = tape.split_last(z).unwrap();
        tape.value(z1).data().to_vec()
    };
    let mut worst: f64 = 0.0;
    for (o, z) in out.iter().zip(&z1) {
        worst = worst.max((o - GELU_AT_ONE * z).abs());
    }
    assert!(worst < 1e-12, "gate deviates from gelu(1) by {worst:.2e}");
    println!("03 gate at init: PASS (isolation bit-exact, gate within {worst:.1e} of gelu(1)·z1)");
}

// ── 04: mixing cost scaling ─────────────────────────────────────────────────

const GRID: [(usize, usize); 4] = [(8, 4), (16, 4), (8, 8), (16, 8)];
const BENCH_E: usize = 8;
const BENCH_P: usize = 16;

fn full_batch(t: usize, v: usize) -> SequenceBatch {
    SequenceBatch {
        b: 1,
        t,
        v,
        code_ids: vec![2; t * v],
        delta_bucket: (0..t).map(|i| u32::from(i > 0)).collect(),
        visit_mask: vec![1; t],
        code_mask: vec![1; t * v],
        targets: BatchTargets { y_count: Some(vec![1.0]), ..Default::default() },
        skipped: 0,
    }
}

fn measured_macs(t: usize, v: usize) -> f64 {
    let mut cfg = ModelConfig::new(10, BENCH_E, t, v);
    cfg.proj_dim = BENCH_P;
    cfg.ff_dim = 2 * BENCH_E;
    cfg.layers = 1;
    cfg.dropout = 0.0;
    cfg.tasks = vec![Task::Count];
    let params = ModelParams::init(&cfg, 3).unwrap();
    let batch = full_batch(t, v);
    let mut tape = Tape::with_precision(Precision::Double);
    let bound = bind_params(&mut tape, &params, false);
    forward(&mut tape, &bound, &cfg, &batch, None).unwrap();
    tape.macs() as f64
}

/// Least squares over the grid for `y ~ sum_k c_k basis_k`, rows scaled by
/// `1/y` so the residual bound is relative. Normal equations, solved by
/// Gaussian elimination with partial pivoting.
fn relative_lsq(ys: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let k = basis.len();
    let n = ys.len();
    let mut ata = vec![vec![0.0; k + 1]; k];
    for r in 0..n {
        let w = 1.0 / ys[r];
        for i in 0..k {
            for j in 0..k {
                ata[i][j] += basis[i][r] * w * basis[j][r] * w;
            }
            ata[i][k] += basis[i][r] * w * ys[r] * w;
        }
    }
    for col in 0..k {
        let piv = (col..k).max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs())).unwrap();
        ata.swap(col, piv);
        for row in 0..k {
            if row != col {
                let f = ata[row][col] / ata[col][col];
                for j in col..=k {
                    ata[row][j] -= f * ata[col][j];
                }
            }
        }
    }
    (0..k).map(|i| ata[i][k] / ata[i][i]).collect()
}

#[test]
fn c04_mixing_cost_scaling() {
    let measured: Vec<f64> = GRID.iter().map(|&(t, v)| measured_macs(t, v)).collect();

    // axial cost decomposes over the three structural terms
    let basis: Vec<Vec<f64>> = vec![
        GRID.iter().map(|&(t, v)| (v * v * t) as f64).collect(),
        GRID.iter().map(|&(t, v)| (v * t * t) as f64).collect(),
        GRID.iter().map(|&(t, v)| (t * v * BENCH_E * BENCH_P) as f64).collect(),
    ];
    let c = relative_lsq(&measured, &basis);
    let mut worst = 0.0f64;
    for (r, &y) in measured.iter().enumerate() {
        let fit: f64 = (0..3).map(|i| c[i] * basis[i][r]).sum();
        worst = worst.max((fit - y).abs() / y);
    }
    assert!(worst <= 0.01, "axial cost fit leaves {:.2}% residual", worst * 100.0);
    // individual coefficients are not identifiable on a 4-point grid where the
    // projection column dwarfs both structural columns; the binding checks are
    // the residual above and the growth comparison below

    // the same gate flattened over all t*v positions pays for a full
    // position-by-position mixing map plus its projections
    let flattened: Vec<f64> = GRID
        .iter()
        .map(|&(t, v)| {
            let l = (t * v) as f64;
            (BENCH_P as f64) * l * l + 3.0 * l * (BENCH_E * BENCH_P) as f64
        })
        .collect();
    let fbasis: Vec<Vec<f64>> =
        vec![GRID.iter().map(|&(t, v)| ((t * v) * (t * v)) as f64).collect(),
             GRID.iter().map(|&(t, v)| (t * v) as f64).collect()];
    let fc = relative_lsq(&flattened, &fbasis);
    for (r, &y) in flattened.iter().enumerate() {
        let fit = fc[0] * fbasis[0][r] + fc[1] * fbasis[1][r];
        assert!((fit - y).abs() / y < 1e-9, "flattened counts are not quadratic in t*v");
    }
    assert!(fc[0] > 0.0, "flattened quadratic coefficient must be positive");
    // quadratic term dominates already at the smallest grid point
    let (t0, v0) = GRID[0];
    let l0 = (t0 * v0) as f64;
    assert!(fc[0] * l0 * l0 > fc[1] * l0);

    // doubling both axes multiplies the axial cost by ~4 (linear in t*v) but
    // the flattened cost by ~11 (quadratic once the map dominates)
    let axial_growth = measured[3] / measured[0];
    let flat_growth = flattened[3] / flattened[0];
    assert!(
        axial_growth < 0.5 * flat_growth,
        "axial cost grew {axial_growth:.2}x vs flattened {flat_growth:.2}x"
    );

    let ratios: Vec<String> = measured
        .iter()
        .zip(&flattened)
        .map(|(m, f)| format!("{:.2}", m / f))
        .collect();
    println!(
        "04 mixing cost scaling: PASS (axial fit residual {:.2}%, axial/flattened ratios [{}])",
        worst * 100.0,
        ratios.join(" ")
    );
}

// ── 05: metric oracles ──────────────────────────────────────────────────────

fn oracle_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count();
            let equal = xs.iter().filter(|&&y| y == x).count();
            less as f64 + (equal as f64 + 1.0) / 2.0
        })
        .collect()
}

fn oracle_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va.sqrt() * vb.sqrt())
}

fn oracle_auc(score: &[f64], label: &[f64]) -> f64 {
    let mut hits = 0.0;
    let mut pairs = 0.0;
    for (sp, lp) in score.iter().zip(label) {
        if *lp != 1.0 {
            continue;
        }
        for (sn, ln_) in score.iter().zip(label) {
            if *ln_ != 0.0 {
                continue;
            }
            pairs += 1.0;
            hits += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    hits / pairs
}

fn oracle_poisson_nll(log_rate: &[f64], y: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&x, &k) in log_rate.iter().zip(y) {
        let lambda = x.exp();
        let mut p = (-lambda).exp();
        for i in 1..=k as u64 {
            p *= lambda / i as f64;
        }
        total += -p.ln();
    }
    total / log_rate.len() as f64
}

#[test]
fn c05_metric_oracles() {
    // frozen case first: two clean pairs plus one tie-free crossing
    let exact = auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap();
    assert_eq!(exact, 0.75);

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n = rng.gen_range(2..=100);
        // a coarse value grid keeps ties frequent
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(-10i32..10) as f64 / 4.0).collect();
        let counts: Vec<f64> = (0..n).map(|_| rng.gen_range(0i32..7) as f64).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..6.0)).collect();

        let diff = |a: f64, b: f64| (a - b).abs();

        // mean and sum-of-squares arithmetic, written out longhand
        let mean = target.iter().sum::<f64>() / n as f64;
        let ss_tot: f64 = target.iter().map(|y| (y - mean) * (y - mean)).sum();
        if ss_tot > 0.0 {
            let ss_res: f64 = pred.iter().zip(&target).map(|(p, y)| (p - y) * (p - y)).sum();
            worst = worst.max(diff(r2(&pred, &target).unwrap(), 1.0 - ss_res / ss_tot));
        }

        let expected_mae =
            pred.iter().zip(&target).map(|(p, y)| (p - y).abs()).sum::<f64>() / n as f64;
        worst = worst.max(diff(mae(&pred, &target).unwrap(), expected_mae));

        let pr = oracle_ranks(&pred);
        let tr = oracle_ranks(&counts);
        let tied = pr.iter().all(|&r| r == pr[0]) || tr.iter().all(|&r| r == tr[0]);
        if !tied {
            worst =
                worst.max(diff(spearman(&pred, &counts).unwrap(), oracle_pearson(&pr, &tr)));
        }

        let labels: Vec<f64> =
            (0..n).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        if labels.contains(&0.0) && labels.contains(&1.0) {
            worst = worst.max(diff(auc(&pred, &labels).unwrap(), oracle_auc(&pred, &labels)));
        }

        let log_rate: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..2.0)).collect();
        worst = worst.max(diff(
            poisson_nll(&log_rate, &counts).unwrap(),
            oracle_poisson_nll(&log_rate, &counts),
        ));

        assert!(worst < 1e-12, "metric oracle drift {worst:.2e} at case {case}");
    }
    println!("05 metric oracles: PASS (200 instances, worst abs err {worst:.1e})");
}

// ── shared transfer fixture ─────────────────────────────────────────────────

const XT: usize = 8;
const XV: usize = 4;
const SUBGROUP: &str = "BP";

struct TransferFixture {
    records: Vec<PatientRecord>,
    vocab: Vocabulary,
    pre_axial: ModelParams,
    pre_additive: ModelParams,
}

fn transfer_cfg(vocab: usize, variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig::new(vocab, 8, XT, XV);
    cfg.proj_dim = 8;
    cfg.ff_dim = 16;
    cfg.layers = 1;
    cfg.dropout = 0.0;
    cfg.variant = variant;
    cfg.tasks = vec![Task::Count];
    cfg
}

fn finetune_run(epochs: usize, peak_lr: f64, seed: u64) -> TrainRunConfig {
    TrainRunConfig {
        epochs,
        batch_size: 32,
        peak_lr,
        warmup_fraction: 0.1,
        weight_decay: 0.01,
        seed,
        patience: 0,
        ..TrainRunConfig::default()
    }
}

fn fixture() -> &'static TransferFixture {
    static FIX: OnceLock<TransferFixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let synth = SynthConfig {
            n_background: 5000,
            n_subgroup: 1000,
            horizon_years: 4,
            ..SynthConfig::default()
        };
        let records = generate_synthetic_cohort(&synth, 42).unwrap();
        let vocab = Vocabulary::build(&records, 1);
        let (windows, _) = pretrain_split(&records, Some(SUBGROUP), 365, 365, 0.0, 42).unwrap();
        let pt_batch = make_pretrain_batch(&windows, &vocab, XT, XV).unwrap();

        let mut pre_axial = ModelParams::init(&transfer_cfg(vocab.len(), Variant::Axial), 42).unwrap();
        fit(
            &transfer_cfg(vocab.len(), Variant::Axial),
            &mut pre_axial,
            &finetune_run(10, 3e-3, 42),
            &pt_batch,
            None,
        )
        .unwrap();
        let mut pre_additive =
            ModelParams::init(&transfer_cfg(vocab.len(), Variant::Additive), 42).unwrap();
        fit(
            &transfer_cfg(vocab.len(), Variant::Additive),
            &mut pre_additive,
            &finetune_run(10, 3e-3, 42),
            &pt_batch,
            None,
        )
        .unwrap();
        TransferFixture { records, vocab, pre_axial, pre_additive }
    })
}

fn subgroup_batch(fix: &TransferFixture, members: std::ops::Range<usize>) -> SequenceBatch {
    let subs: Vec<&PatientRecord> = fix
        .records
        .iter()
        .filter(|r| r.subgroup_labels.contains(SUBGROUP))
        .skip(members.start)
        .take(members.end - members.start)
        .collect();
    let task =
        BatchTask::NextPeriodCounts { subgroup: Some(SUBGROUP.into()), history_days: 365 };
    make_batch(&subs, &task, &fix.vocab, XT, XV).unwrap()
}

fn finetune_pair(
    cfg: &ModelConfig,
    pre: &ModelParams,
    train: &SequenceBatch,
    test: &SequenceBatch,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> (f64, f64) {
    let mut pt = transfer_from_pretrained(pre, cfg, seed).unwrap();
    fit(cfg, &mut pt, &finetune_run(epochs, lr, seed), train, None).unwrap();
    let r_pt = evaluate(cfg, &pt, test, Task::Count, 64).unwrap().r2.unwrap();

    let mut ri = ModelParams::init(cfg, seed).unwrap();
    fit(cfg, &mut ri, &finetune_run(epochs, lr, seed), train, None).unwrap();
    let r_ri = evaluate(cfg, &ri, test, Task::Count, 64).unwrap().r2.unwrap();
    (r_pt, r_ri)
}

// ── 06: pretraining transfers ───────────────────────────────────────────────

// fine-tuning budget per variant: enough for the pretrained model to
// recalibrate to the subgroup's rate, long enough for random init to start
// memorizing the small train split
const FT_AXIAL: (usize, f64, f64) = (60, 1e-2, 0.0);
const FT_ADDITIVE: (usize, f64, f64) = (150, 1e-2, 0.2);

#[test]
fn c06_pretraining_transfers() {
    let t0 = Instant::now();
    let fix = fixture();
    let sub = subgroup_batch(fix, 0..200);

    let mut lines = Vec::new();
    for variant in [Variant::Axial, Variant::Additive] {
        let (epochs, lr, dropout) = match variant {
            Variant::Axial => FT_AXIAL,
            Variant::Additive => FT_ADDITIVE,
        };
        let mut cfg = transfer_cfg(fix.vocab.len(), variant);
        cfg.dropout = dropout;
        let pre = match variant {
            Variant::Axial => &fix.pre_axial,
            Variant::Additive => &fix.pre_additive,
        };
        let mut pt_scores = Vec::new();
        let mut ri_scores = Vec::new();
        for seed in 0..3u64 {
            let mut rows: Vec<usize> = (0..sub.b).collect();
            rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xF17));
            let train = sub.select(&rows[..150]).unwrap();
            let test = sub.select(&rows[150..]).unwrap();
            let (p, r) = finetune_pair(&cfg, pre, &train, &test, epochs, lr, seed);
            pt_scores.push(p);
            ri_scores.push(r);
        }
        let mp = pt_scores.iter().sum::<f64>() / 3.0;
        let mr = ri_scores.iter().sum::<f64>() / 3.0;
        assert!(
            mp > mr,
            "{variant}: pretrained mean R2 {mp:.3} does not beat random init {mr:.3}"
        );
        lines.push(format!("{variant} {mp:.3} vs {mr:.3}"));
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 1800, "transfer check took {elapsed:?}");
    println!("06 pretraining transfers: PASS ({}; {elapsed:.0?})", lines.join(", "));
}

// ── 07: data efficiency ─────────────────────────────────────────────────────

// same optimizer step budget at every size (epochs scaled to the batch count
// per epoch), at the pretraining learning rate
const EFF_SIZES: [usize; 3] = [50, 200, 800];
const EFF_EPOCHS: [usize; 3] = [300, 86, 24];
const EFF_LR: f64 = 3e-3;

#[test]
fn c07_data_efficiency() {
    let fix = fixture();
    let cfg = transfer_cfg(fix.vocab.len(), Variant::Axial);
    let test = subgroup_batch(fix, 800..1000);
    let pool = subgroup_batch(fix, 0..800);

    let mut gaps = Vec::new();
    for (i, &size) in EFF_SIZES.iter().enumerate() {
        let mut gap_sum = 0.0;
        for seed in 0..3u64 {
            let mut rows: Vec<usize> = (0..pool.b).collect();
            rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xDA7A));
            let take = size.min(pool.b);
            let train = pool.select(&rows[..take]).unwrap();
            let (p, r) =
                finetune_pair(&cfg, &fix.pre_axial, &train, &test, EFF_EPOCHS[i], EFF_LR, seed);
            gap_sum += p - r;
        }
        gaps.push(gap_sum / 3.0);
    }
    assert!(
        gaps[0] >= gaps[1] && gaps[1] >= gaps[2],
        "advantage should shrink with cohort size, got {gaps:?}"
    );
    println!(
        "07 data efficiency: PASS (gaps {:.3} / {:.3} / {:.3} at sizes 50/200/800)",
        gaps[0], gaps[1], gaps[2]
    );
}

// ── 08: determinism ─────────────────────────────────────────────────────────

struct PipelineArtifacts {
    cohort: Vec<u8>,
    checkpoint: Vec<u8>,
    metrics: String,
}

fn run_pipeline(dir: &std::path::Path) -> PipelineArtifacts {
    let synth =
        SynthConfig { n_background: 300, n_subgroup: 60, horizon_years: 4, ..SynthConfig::default() };
    let records = generate_synthetic_cohort(&synth, 9).unwrap();
    let cohort = cohort_to_jsonl(&records).unwrap();
    let vocab = Vocabulary::build(&records, 1);

    let mut cfg = ModelConfig::new(vocab.len(), 8, 6, 3);
    cfg.proj_dim = 8;
    cfg.chunks = 2;
    cfg.ff_dim = 16;
    cfg.layers = 1;
    cfg.dropout = 0.1;
    cfg.tasks = vec![Task::Count];

    let (windows, _) = pretrain_split(&records, Some(SUBGROUP), 365, 365, 0.0, 9).unwrap();
    let pt_batch = make_pretrain_batch(&windows, &vocab, 6, 3).unwrap();
    let mut params = ModelParams::init(&cfg, 9).unwrap();
    fit(&cfg, &mut params, &finetune_run(2, 3e-3, 9), &pt_batch, None).unwrap();

    let task = BatchTask::NextPeriodCounts { subgroup: Some(SUBGROUP.into()), history_days: 365 };
    let subs: Vec<&PatientRecord> =
        records.iter().filter(|r| r.subgroup_labels.contains(SUBGROUP)).collect();
    let sub = make_batch(&subs, &task, &vocab, 6, 3).unwrap();
    let mut tuned = transfer_from_pretrained(&params, &cfg, 9).unwrap();
    fit(&cfg, &mut tuned, &finetune_run(2, 3e-3, 9), &sub, None).unwrap();

    let ckpt_path = dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &tuned).unwrap();
    let checkpoint = std::fs::read(&ckpt_path).unwrap();

    let mut report = evaluate(&cfg, &tuned, &sub, Task::Count, 64).unwrap();
    report.runtime_seconds = 0.0; // wall time is the one field allowed to differ
    let metrics = serde_json::to_string(&report).unwrap();

    PipelineArtifacts { cohort, checkpoint, metrics }
}

#[test]
fn c08_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_pipeline(dir.path());
    let b = run_pipeline(dir.path());
    assert_eq!(a.cohort, b.cohort, "cohort bytes differ between identical runs");
    assert_eq!(a.checkpoint, b.checkpoint, "checkpoint bytes differ between identical runs");
    assert_eq!(a.metrics, b.metrics, "metrics differ between identical runs");
    println!(
        "08 determinism: PASS (cohort {} B, checkpoint {} B, metrics byte-identical)",
        a.cohort.len(),
        a.checkpoint.len()
    );
}

// ── 09: round trips ─────────────────────────────────────────────────────────

#[test]
fn c09_round_trips() {
    let dir = tempfile::tempdir().unwrap();

    // checkpoint: validation loss must survive save/load to the bit
    let synth =
        SynthConfig { n_background: 200, n_subgroup: 40, horizon_years: 4, ..SynthConfig::default() };
    let records = generate_synthetic_cohort(&synth, 13).unwrap();
    let vocab = Vocabulary::build(&records, 1);
    let mut cfg = ModelConfig::new(vocab.len(), 8, 6, 3);
    cfg.proj_dim = 8;
    cfg.chunks = 2;
    cfg.ff_dim = 16;
    cfg.layers = 1;
    cfg.dropout = 0.0;
    cfg.tasks = vec![Task::Count];
    let (windows, _) = pretrain_split(&records, None, 365, 365, 0.0, 13).unwrap();
    let batch = make_pretrain_batch(&windows, &vocab, 6, 3).unwrap();
    let mut params = ModelParams::init(&cfg, 13).unwrap();
    fit(&cfg, &mut params, &finetune_run(1, 3e-3, 13), &batch, None).unwrap();

    let weights = LossWeights::default();
    let before = eval_loss(&cfg, &params, &batch, &weights, 64, Precision::Double).unwrap();
    let path = dir.path().join("rt.ckpt");
    save_checkpoint(&path, &params).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let after = eval_loss(&cfg, &loaded, &batch, &weights, 64, Precision::Double).unwrap();
    assert_eq!(before.to_bits(), after.to_bits(), "loss changed across save/load");

    // cohort: serialize, parse, serialize again, byte for byte
    let bytes1 = cohort_to_jsonl(&records).unwrap();
    let parsed = cohort_from_jsonl(&bytes1).unwrap();
    let bytes2 = cohort_to_jsonl(&parsed).unwrap();
    assert_eq!(bytes1, bytes2, "cohort JSONL changed across a parse round trip");
    println!(
        "09 round trips: PASS (val loss {before:.6} bit-stable, {} cohort bytes stable)",
        bytes1.len()
    );
}

// ── 10: count cap and input truncation ──────────────────────────────────────

#[test]
fn c10_topcap_and_offset() {
    let vocab = {
        let seed_rec = record(
            "v",
            vec![visit(date("2020-01-01"), &["C01", "Z00", "E02", "K03", "G04"], None, false)],
        );
        Vocabulary::build(&[seed_rec], 1)
    };

    // counts in the target window are clipped at the cap
    let mut visits = vec![visit(date("2020-01-01"), &["C01"], None, false)];
    for i in 0..40u64 {
        visits.push(visit(
            date("2021-01-01") + chrono::Days::new(i * 3),
            &["Z00"],
            None,
            false,
        ));
    }
    let capped = record("cap", visits);
    let mut visits = vec![visit(date("2020-01-01"), &["C01"], None, false)];
    for i in 0..35u64 {
        visits.push(visit(
            date("2021-01-01") + chrono::Days::new(i * 3),
            &["Z00"],
            None,
            false,
        ));
    }
    let uncapped = record("under", visits);
    let task = BatchTask::NextPeriodCounts { subgroup: None, history_days: 365 };
    let batch = make_batch(&[&capped, &uncapped], &task, &vocab, 4, 2).unwrap();
    let y = batch.targets.y_count.as_ref().unwrap();
    assert_eq!(y[0], f64::from(TOPCAP), "40 target-window visits must clip to the cap");
    assert_eq!(y[1], 35.0, "counts under the cap must pass through unchanged");

    // the mortality task drops exactly `offset` trailing visits and keeps the
    // record-level label even when the terminal visit is among them
    let codes = ["C01", "Z00", "E02", "K03", "G04"];
    let visits: Vec<Visit> = (0..8u64)
        .map(|i| {
            visit(
                date("2020-01-01") + chrono::Days::new(30 * i),
                &[codes[i as usize % codes.len()]],
                None,
                i == 7,
            )
        })
        .collect();
    let rec = record("m", visits.clone());
    for offset in [0usize, 3, 5] {
        let b = make_batch(&[&rec], &BatchTask::Mortality { offset }, &vocab, 8, 2).unwrap();
        let live: usize = b.visit_mask.iter().map(|&m| m as usize).sum();
        assert_eq!(live, 8 - offset, "offset {offset} must remove exactly that many visits");
        // surviving steps are the earliest visits, in order
        for (step, v) in visits.iter().take(8 - offset).enumerate() {
            let id = b.code_ids[step * 2];
            assert_eq!(
                id,
                vocab.id(&v.codes[0]),
                "offset {offset}: step {step} holds the wrong visit"
            );
        }
        let y = b.targets.y_death.as_ref().unwrap();
        assert_eq!(y[0], 1.0, "death label must come from the full record");
    }

    // a record with no remaining visits under the offset is skipped
    let short = record("s", visits[..3].to_vec());
    let err = make_batch(&[&short], &BatchTask::Mortality { offset: 3 }, &vocab, 8, 2);
    assert!(err.is_err(), "a record fully consumed by the offset cannot form a row");
    let b = make_batch(&[&rec, &short], &BatchTask::Mortality { offset: 3 }, &vocab, 8, 2).unwrap();
    assert_eq!(b.b, 1);
    assert_eq!(b.skipped, 1);

    println!("10 count cap and input truncation: PASS");
}
