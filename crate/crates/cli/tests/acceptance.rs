//! Acceptance suite. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion fails.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use prunepath::analysis::{tau_sweep_layers, topk_mse_curve_layers, LayerRef};
use prunepath::bench::{run_decode_bench_with, BenchOptions};
use prunepath::bundle::{decode_bundle, encode_bundle, Bundle, Tensor};
use prunepath::ffn::{DenseFFN, MoefiedFFN};
use prunepath::moefication::{balanced_kmeans_with, build_moefied, centroid_router, neuron_features, DEFAULT_MAX_ITERS};
use prunepath::numkit::{softmax, Matrix};
use prunepath::routing::{route, select_cumulative, sparsity_metric, RouterState, TAU_ALL_EXPERTS};
use prunepath::synth::{generate, random_router, SynthConfig};
use prunepath::training::{
    active_sets, balance_loss, entropy_loss, gate_loss, router_grad, tau_schedule, total_loss, total_loss_with,
    Batch, Distillation, Selection, SparsityPath, TrainConfig, TrainLog,
};
use prunepath::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f32) -> Matrix {
    Matrix::from_fn(r, c, |_, _| s * rng.random_range(-1.0f32..1.0))
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    v
}

// 1. identity decomposition

fn identity_decomposition() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let e = [2, 4, 8][i % 3];
        let ffn = DenseFFN::new(uniform(&mut rng, 16, 64, 1.0), uniform(&mut rng, 16, 64, 1.0), uniform(&mut rng, 64, 16, 1.0))
            .map_err(|e| e.to_string())?;
        let m = MoefiedFFN::from_dense(&ffn, shuffled(&mut rng, 64), e).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let x: Vec<f32> = (0..16).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            let dense = ffn.forward(&x).unwrap();
            let split = m.decomposed_forward(&x).unwrap();
            let num: f64 = dense.iter().zip(&split).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            let den: f64 = dense.iter().map(|a| (*a as f64).powi(2)).sum();
            worst = worst.max((num / den).sqrt());
        }
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-4, || format!("relative error {worst:.3e} > 1e-4"))?;
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("worst relative L2 {worst:.2e} over 500 inputs in {elapsed:.2?}"))
}

// 2. cumulative-mass rule against per-expert enumeration in exact arithmetic

const SCALE_BITS: i32 = 120;

/// `v · 2^120` as an integer; panics if that is not exact.
fn fixed(v: f64) -> u128 {
    assert!(v >= 0.0);
    if v == 0.0 {
        return 0;
    }
    let bits = v.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let mant = (bits & ((1 << 52) - 1)) | (1 << 52);
    let shift = exp - 1075 + SCALE_BITS;
    assert!(shift >= 0 || mant.trailing_zeros() as i32 >= -shift, "{v} not representable");
    if shift >= 0 {
        (mant as u128) << shift
    } else {
        (mant >> -shift) as u128
    }
}

fn oracle_select(p: &[f32], tau: f64) -> Vec<usize> {
    let t = fixed(tau);
    let mut out: Vec<usize> = (0..p.len())
        .filter(|&j| {
            let ahead: Vec<usize> = (0..p.len()).filter(|&k| p[k] > p[j] || (p[k] == p[j] && k <= j)).collect();
            let mass: u128 = ahead.iter().map(|&k| fixed(p[k] as f64)).sum();
            ahead.len() == 1 || mass < t
        })
        .collect();
    out.sort_unstable();
    out
}

fn probability_vector(rng: &mut ChaCha8Rng, i: usize) -> Vec<f32> {
    let e = rng.random_range(1..=12);
    match i % 5 {
        0 => {
            let mut v = vec![0.0; e];
            v[rng.random_range(0..e)] = 1.0;
            v
        }
        1 => {
            let e = [1, 2, 4, 8][rng.random_range(0..4)];
            vec![1.0 / e as f32; e]
        }
        2 => {
            // coarse values force ties
            let logits: Vec<f32> = (0..e).map(|_| rng.random_range(0..3) as f32).collect();
            softmax(&logits)
        }
        _ => {
            let temp = rng.random_range(0.2f32..5.0);
            let logits: Vec<f32> = (0..e).map(|_| temp * rng.random_range(-3.0f32..3.0)).collect();
            softmax(&logits)
        }
    }
}

fn cumulative_mass_rule() -> Check {
    let taus: Vec<f64> = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.05];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases = 0;
    for i in 0..1000 {
        let p = probability_vector(&mut rng, i);
        let mut previous: Option<Vec<usize>> = None;
        for &tau in &taus {
            let got = select_cumulative(&p, tau);
            ensure(!got.is_empty(), || format!("empty selection for {p:?} at {tau}"))?;
            ensure(got.windows(2).all(|w| p[w[0]] >= p[w[1]]), || format!("{got:?} not in rank order"))?;
            let mut sorted = got.clone();
            sorted.sort_unstable();
            let want = oracle_select(&p, tau);
            ensure(sorted == want, || format!("p = {p:?}, tau = {tau}: got {sorted:?}, oracle {want:?}"))?;
            if let Some(prev) = &previous {
                ensure(prev.iter().all(|e| sorted.contains(e)), || format!("nesting broken at {tau} for {p:?}"))?;
            }
            previous = Some(sorted);
            cases += 1;
        }
    }
    Ok(format!("{cases} (vector, tau) cases agree; nested and non-empty"))
}

// 3. warm-up semantics

fn warm_threshold() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut traces = 0;
    for _ in 0..200 {
        let (d, e, layers, n) = (rng.random_range(2..12), rng.random_range(1..=16), rng.random_range(1..=3), rng.random_range(1..20));
        let scale = [0.1f32, 1.0, 10.0, 100.0][rng.random_range(0..4)];
        let routers: Vec<RouterState> = (0..layers)
            .map(|_| RouterState::cumulative(uniform(&mut rng, d, e, scale), TAU_ALL_EXPERTS).unwrap())
            .collect();
        let mut records = Vec::new();
        for token in 0..n {
            let x: Vec<f32> = (0..d).map(|_| rng.random_range(-3.0f32..3.0)).collect();
            for (layer, r) in routers.iter().enumerate() {
                let (_, mut rec) = route(r, &x).map_err(|e| e.to_string())?;
                ensure(rec.active.len() == e, || format!("{} of {e} experts active", rec.active.len()))?;
                rec.token = token;
                rec.layer = layer;
                records.push(rec);
            }
        }
        let s = sparsity_metric(&records, layers, e).map_err(|e| e.to_string())?;
        ensure(s == 0.0, || format!("sparsity {s}"))?;
        traces += 1;
    }
    Ok(format!("{traces} random traces, all experts active, sparsity exactly 0"))
}

// 4. loss bounds

fn loss_bounds() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let slack = 1e-6;
    for i in 0..1000 {
        let (b, e) = (rng.random_range(1..10), rng.random_range(2..=16));
        let rows: Vec<Vec<f32>> = (0..b)
            .map(|_| match i % 4 {
                0 => {
                    let mut v = vec![0.0; e];
                    v[rng.random_range(0..e)] = 1.0;
                    v
                }
                _ => {
                    let t = rng.random_range(0.1f32..20.0);
                    softmax(&(0..e).map(|_| t * rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>())
                }
            })
            .collect();
        let p = Matrix::from_rows(&rows).unwrap();
        let ent = entropy_loss(&p, 1e-8);
        let bal = balance_loss(&p);
        let log_e = (e as f64).ln();
        ensure(ent >= -slack && ent <= log_e + slack, || format!("entropy {ent} outside [0, {log_e}]"))?;
        ensure(bal >= 1.0 - slack && bal <= e as f64 + slack, || format!("balance {bal} outside [1, {e}]"))?;
        let g = uniform(&mut rng, b, e, 30.0);
        let gl = gate_loss(&g);
        ensure(gl > 0.0 && gl < 1.0, || format!("gate loss {gl}"))?;
    }
    for e in [2usize, 4, 7, 16] {
        let p = Matrix::from_fn(3, e, |_, _| 1.0 / e as f32);
        let ent = entropy_loss(&p, 1e-8);
        ensure((ent - (e as f64).ln()).abs() <= 1e-6, || format!("uniform entropy {ent} for E = {e}"))?;
        let bal = balance_loss(&p);
        ensure((bal - 1.0).abs() <= 1e-6, || format!("uniform balance {bal} for E = {e}"))?;
        let gl = gate_loss(&Matrix::zeros(3, e));
        ensure((gl - 0.5).abs() <= 1e-6, || format!("zero-logit gate loss {gl}"))?;
    }
    Ok("1000 random matrices within bounds; closed-form points within 1e-6".into())
}

// 5. gradients against central differences

fn gradient_instance(seed: u64) -> (MoefiedFFN, RouterState, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, d_ff, e, b) = (6, 24, 4, 8);
    let ffn = DenseFFN::new(uniform(&mut rng, d, d_ff, 1.0), uniform(&mut rng, d, d_ff, 1.0), uniform(&mut rng, d_ff, d, 0.5)).unwrap();
    let x = uniform(&mut rng, b, d, 1.0);
    let y = uniform(&mut rng, b, d, 1.0);
    let w = uniform(&mut rng, d, e, 0.8);
    (
        MoefiedFFN::from_dense(&ffn, shuffled(&mut rng, d_ff), e).unwrap(),
        RouterState::cumulative(w, 0.7).unwrap(),
        Batch::new(x, y).unwrap(),
    )
}

fn gradient_check() -> Check {
    const STEP: f32 = 1e-3;
    let start = Instant::now();
    let mut report = Vec::new();
    for (name, eta, lambda, gamma) in [("task", 0.0, 0.0, 0.0), ("+eta", 0.5, 0.0, 0.0), ("+lambda", 0.0, 0.5, 0.0), ("+gamma", 0.0, 0.0, 0.5)] {
        let cfg = TrainConfig {
            eta,
            lambda,
            gamma,
            exec: Exec::Sequential,
            ..TrainConfig::default()
        };
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let (m, r, batch) = gradient_instance(1000 + seed);
            let frozen = active_sets(&batch, &r, 0.7).unwrap();
            let analytic = router_grad(&batch, &m, &r, &cfg, 0.7).map_err(|e| e.to_string())?;
            let loss = |r: &RouterState| total_loss_with(&batch, &m, r, &cfg, Selection::Frozen(&frozen)).unwrap().0;
            let n = r.weights().data().len();
            let (mut diff, mut norm_a, mut norm_n) = (0.0f64, 0.0f64, 0.0f64);
            for i in 0..n {
                let mut plus = r.clone();
                plus.weights_mut().data_mut()[i] += STEP;
                let mut minus = r.clone();
                minus.weights_mut().data_mut()[i] -= STEP;
                let h = plus.weights().data()[i] as f64 - minus.weights().data()[i] as f64;
                let numeric = (loss(&plus) - loss(&minus)) / h;
                let a = analytic.data()[i] as f64;
                diff += (a - numeric).powi(2);
                norm_a += a * a;
                norm_n += numeric * numeric;
            }
            let rel = diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
        }
        ensure(worst < 1e-3, || format!("{name}: relative error {worst:.3e}"))?;
        report.push(format!("{name} {worst:.1e}"));
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("worst relative errors {} in {elapsed:.2?}", report.join(", ")))
}

// 6. schedule

fn schedule_values() -> Check {
    let mut checked = 0;
    for tau_min in [0.05, 0.1, 0.3, 0.5, 0.6, 0.75, 0.8, 0.9, 1.0] {
        for rounds in [1usize, 2, 3, 4, 5, 7, 10, 64, 1000] {
            let path = SparsityPath::new(tau_min, rounds, 2).map_err(|e| e.to_string())?;
            for t in 1..=rounds as i64 {
                let got = tau_schedule(&path, t).map_err(|e| e.to_string())?;
                let want = ((rounds as f64 - t as f64) + tau_min * t as f64) / rounds as f64;
                ensure((got - want).abs() <= 1e-9, || format!("tau_{t} = {got}, expected {want}"))?;
                checked += 1;
            }
            let last = tau_schedule(&path, rounds as i64).unwrap();
            ensure(last == tau_min, || format!("tau_T = {last} for tau_min = {tau_min}"))?;
            let first = tau_schedule(&path, 1).unwrap();
            let want = 1.0 - (1.0 - tau_min) / rounds as f64;
            ensure((first - want).abs() <= 1e-9, || format!("tau_1 = {first}"))?;
            ensure(tau_schedule(&path, 0).unwrap() == TAU_ALL_EXPERTS, || "warm-up round".into())?;
        }
    }
    Ok(format!("{checked} schedule points exact to 1e-9; tau_T equals tau_min bitwise"))
}

// 7. desk-scale training efficacy

struct Checkpoint {
    moe: MoefiedFFN,
    trained: RouterState,
    probes: Matrix,
    log: TrainLog,
}

fn training_efficacy(slot: &mut Option<Checkpoint>) -> Check {
    let start = Instant::now();
    let cfg = SynthConfig::default();
    let (d, experts) = (cfg.d, 16);
    let model = generate(&cfg).map_err(|e| e.to_string())?;
    let ffn = &model.layers[0];
    let clustering = balanced_kmeans_with(Exec::Sequential, &neuron_features(ffn), experts, 0, DEFAULT_MAX_ITERS)
        .map_err(|e| e.to_string())?;
    let moe = build_moefied(ffn, &clustering).map_err(|e| e.to_string())?;
    let reference = centroid_router(&moe, 2.0);
    let init = RouterState::cumulative(random_router(d, experts, 0.1, 1), TAU_ALL_EXPERTS).unwrap();
    let train_cfg = TrainConfig {
        exec: Exec::Sequential,
        ..TrainConfig::default()
    };
    let mut data = Distillation::new(model.token_source(11).unwrap(), &moe, &reference)
        .unwrap()
        .with_exec(Exec::Sequential);
    let path = SparsityPath::new(0.6, 6, 4).unwrap();
    let (trained, log) =
        prunepath::training::train_sparsity_path(&moe, &init, &mut data, &path, &train_cfg).map_err(|e| e.to_string())?;

    let held_out = Batch::new(model.probes.clone(), data.targets(&model.probes).unwrap()).unwrap();
    let task = |r: &RouterState| total_loss(&held_out, &moe, r, &train_cfg, 0.6).unwrap().1.task;
    let (before, after) = (task(&init), task(&trained));
    let top1 = |r: &RouterState| {
        let layer = [LayerRef::new(&moe, r).unwrap()];
        topk_mse_curve_layers(Exec::Sequential, &layer, &model.probes, &[1]).unwrap().mse_per_k[0]
    };
    let (top1_before, top1_after) = (top1(&init), top1(&trained));
    let elapsed = start.elapsed();
    *slot = Some(Checkpoint {
        moe: moe.clone(),
        trained: trained.clone(),
        probes: model.probes.clone(),
        log,
    });
    ensure(after <= 0.5 * before, || format!("L_task {after:.4e} vs untrained {before:.4e}"))?;
    ensure(top1_after < top1_before, || format!("top-1 MSE {top1_after:.4e} vs untrained {top1_before:.4e}"))?;
    ensure(elapsed < Duration::from_secs(180), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "L_task at tau 0.6 {after:.3e} vs {before:.3e} (ratio {:.3}); top-1 MSE {top1_after:.3e} vs {top1_before:.3e}; {elapsed:.1?} single-threaded",
        after / before
    ))
}

/// Statistical check from the training invariants, on criterion 7's log.
fn training_monotonicity(slot: &Option<Checkpoint>) -> Check {
    let ck = slot.as_ref().ok_or("criterion 7 produced no checkpoint")?;
    let mut bad = Vec::new();
    for (round, steps) in ck.log.rounds.iter().zip(&ck.log.step_task) {
        let tenth = (steps.len() / 10).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let (first, last) = (mean(&steps[..tenth]), mean(&steps[steps.len() - tenth..]));
        if last > first {
            bad.push(format!("round {} (tau {:.3}): {first:.4e} -> {last:.4e}", round.round, round.tau));
        }
    }
    ensure(bad.is_empty(), || format!("last-tenth mean above first-tenth mean in {}", bad.join("; ")))?;
    Ok(format!("{} rounds, task loss falls within every round", ck.log.rounds.len()))
}

// 8. single-checkpoint sweep

fn checkpoint_sweep(slot: &Option<Checkpoint>) -> Check {
    let ck = slot.as_ref().ok_or("criterion 7 produced no checkpoint")?;
    let taus = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1.0, 1.05];
    let layer = [LayerRef::new(&ck.moe, &ck.trained).unwrap()];
    let first = tau_sweep_layers(Exec::Sequential, &layer, &ck.probes, &taus).map_err(|e| e.to_string())?;
    let second = tau_sweep_layers(Exec::Parallel, &layer, &ck.probes, &taus).map_err(|e| e.to_string())?;
    for w in first.points.windows(2) {
        ensure(w[1].sparsity <= w[0].sparsity, || format!("sparsity rises from tau {} to {}", w[0].tau, w[1].tau))?;
    }
    let warm = first.points.last().unwrap();
    ensure(warm.recon_mse == 0.0 && warm.sparsity == 0.0, || format!("tau 1.05 row {warm:?}"))?;
    let (a, b) = (first.to_csv_string(), second.to_csv_string());
    ensure(a == b, || "CSV differs between runs".into())?;
    let flagged = first.recon_monotonicity_violations.len();
    Ok(format!(
        "sparsity {:.3} at tau 0.5 down to 0 at 1.05; CSV byte-identical ({} bytes); {flagged} recon monotonicity flags",
        first.points[0].sparsity,
        a.len()
    ))
}

// 9. FLOP and memory accounting

fn accounting() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let quiet = BenchOptions { timing: false };
    let mut runs = 0;
    for (d, d_ff, e) in [(16, 64, 8), (16, 128, 16), (12, 60, 5), (32, 128, 16)] {
        for tau in [0.3, 0.6, 0.9, TAU_ALL_EXPERTS] {
            let ffn = DenseFFN::new(uniform(&mut rng, d, d_ff, 0.5), uniform(&mut rng, d, d_ff, 0.5), uniform(&mut rng, d_ff, d, 0.2)).unwrap();
            let m = MoefiedFFN::from_dense(&ffn, shuffled(&mut rng, d_ff), e).unwrap();
            let r = RouterState::cumulative(uniform(&mut rng, d, e, 1.5), tau).unwrap();
            let prompts = uniform(&mut rng, 20, d, 1.0);
            let run = run_decode_bench_with(&m, &r, &prompts, 50, quiet).map_err(|e| e.to_string())?;
            let d_e = (d_ff / e) as u64;
            let (d64, e64) = (d as u64, e as u64);
            let log2 = (e as f64).log2().ceil() as u64;
            let recount: u64 = run
                .records
                .iter()
                .map(|rec| rec.active.len() as u64 * (6 * d64 * d_e + d_e) + 2 * d64 * e64 + e64 * log2)
                .sum();
            ensure(recount == run.sparse.flops, || format!("recount {recount} vs reported {}", run.sparse.flops))?;
            let peak = run.records.iter().map(|rec| rec.active.len()).max().unwrap() * (d_ff / e);
            ensure(peak == run.sparse.peak_intermediate_elems, || {
                format!("peak {} vs max|A|·d_e {peak}", run.sparse.peak_intermediate_elems)
            })?;
            runs += 1;
        }
    }
    let ffn = DenseFFN::new(uniform(&mut rng, 32, 128, 0.5), uniform(&mut rng, 32, 128, 0.5), uniform(&mut rng, 128, 32, 0.2)).unwrap();
    let m = MoefiedFFN::from_dense(&ffn, shuffled(&mut rng, 128), 16).unwrap();
    let r = RouterState::cumulative(uniform(&mut rng, 32, 16, 1.0), 0.5).unwrap().forced_topk(1).unwrap();
    let run = run_decode_bench_with(&m, &r, &uniform(&mut rng, 20, 32, 1.0), 50, quiet).map_err(|e| e.to_string())?;
    ensure(run.sparse.ffn_flops * 16 == run.dense.ffn_flops, || {
        format!("top-1 FFN flops {} vs dense {}", run.sparse.ffn_flops, run.dense.ffn_flops)
    })?;
    ensure(run.sparse.peak_intermediate_elems == 128 / 16, || "top-1 peak".into())?;
    Ok(format!("{runs} traces recounted exactly; top-1 of 16 uses exactly 1/16 of dense FFN FLOPs"))
}

// 10. bundle round trip and CLI determinism

fn bundles_and_cli() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..100 {
        let mut b = Bundle::new();
        for t in 0..rng.random_range(0..6) {
            let dims: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(0..5)).collect();
            let n = dims.iter().product();
            let data = (0..n).map(|_| f32::from_bits(rng.random())).collect();
            b.insert(format!("case{case}.t{t}"), Tensor { dims, data });
        }
        let bytes = encode_bundle(&b).map_err(|e| e.to_string())?;
        let back = decode_bundle(&bytes).map_err(|e| e.to_string())?;
        let same = back.len() == b.len()
            && back.iter().zip(&b).all(|((na, a), (nb, bb))| {
                na == nb && a.dims == bb.dims && a.data.iter().zip(&bb.data).all(|(x, y)| x.to_bits() == y.to_bits())
            });
        ensure(same, || format!("round trip changed case {case}"))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_prunepath"))
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    };
    let pipeline = |tag: &str| -> Result<Vec<Vec<u8>>, String> {
        // same file names in separate directories, since method names come from file stems
        let sub = dir.path().join(tag);
        std::fs::create_dir_all(&sub).map_err(|e| e.to_string())?;
        let p = |name: &str| sub.join(name).display().to_string();
        let (dense, moe, router) = (p("dense.ppwb"), p("moe.ppwb"), p("router.ppwb"));
        let (log, sweep, topk, bench) = (p("log.csv"), p("sweep.csv"), p("topk.csv"), p("bench.csv"));
        run(&["gen-synth", "--d", "16", "--dff", "64", "--components", "8", "--probes", "64", "--seed", "7", "--out", &dense])?;
        run(&["moefy", "--input", &dense, "--experts", "8", "--seed", "7", "--out", &moe])?;
        run(&[
            "train-router", "--model", &moe, "--rounds", "2", "--warmup-rounds", "1", "--steps", "10", "--batch-size", "16",
            "--seed", "7", "--out", &router, "--log", &log,
        ])?;
        run(&["sweep-tau", "--model", &moe, "--router", &router, "--taus", "0.5,0.8,1.05", "--out", &sweep])?;
        run(&["topk-mse", "--model", &moe, "--router", &router, "--ks", "1,2,8", "--out", &topk])?;
        run(&["bench", "--model", &moe, "--router", &router, "--steps", "8", "--no-timing", "--out", &bench])?;
        [dense, moe, router, log, sweep, topk, bench]
            .iter()
            .map(|f| std::fs::read(Path::new(f)).map_err(|e| e.to_string()))
            .collect()
    };
    let a = pipeline("a")?;
    let b = pipeline("b")?;
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        ensure(x == y, || format!("artifact {i} differs between identical runs"))?;
    }
    Ok(format!("100 random bundles round-trip bit-exactly; {} pipeline artifacts byte-identical", a.len()))
}

fn report(line: &str) {
    // bypass the test harness's output capture so every line is always shown
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

#[test]
fn acceptance() {
    let mut checkpoint = None;
    let mut results: Vec<(&str, Check)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Check| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let line = match &outcome {
            Ok(detail) => format!("PASS  {name}: {detail}"),
            Err(why) => format!("FAIL  {name}: {why}"),
        };
        report(&line);
        results.push((name, outcome));
    };
    run("1 identity decomposition", &mut identity_decomposition);
    run("2 cumulative-mass rule", &mut cumulative_mass_rule);
    run("3 warm-up semantics", &mut warm_threshold);
    run("4 loss bounds", &mut loss_bounds);
    run("5 gradient correctness", &mut gradient_check);
    run("6 schedule", &mut schedule_values);
    run("7 training efficacy", &mut || training_efficacy(&mut checkpoint));
    run("8 single-checkpoint sweep", &mut || checkpoint_sweep(&checkpoint));
    run("9 FLOP/memory accounting", &mut accounting);
    run("10 bundle round trip and CLI determinism", &mut bundles_and_cli);
    run("training monotonicity (statistical)", &mut || training_monotonicity(&checkpoint));
    let failed: Vec<&str> = results.iter().filter(|(_, r)| r.is_err()).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
