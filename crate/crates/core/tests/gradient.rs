//! Router gradients against central finite differences with the selected
//! expert sets frozen.

use prunepath::ffn::{DenseFFN, MoefiedFFN};
use prunepath::numkit::{softmax, Matrix};
use prunepath::routing::{RouterState, TAU_ALL_EXPERTS};
use prunepath::training::{
    active_sets, entropy_loss, router_grad, router_grad_with, total_loss_with, Batch, Selection,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f32 = 1e-3;

struct Instance {
    moe: MoefiedFFN,
    router: RouterState,
    batch: Batch,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, d_ff, e, b) = (6, 24, 4, 8);
    let mut m = |r, c, s: f32| Matrix::from_fn(r, c, |_, _| s * rng.random_range(-1.0f32..1.0));
    let ffn = DenseFFN::new(m(d, d_ff, 1.0), m(d, d_ff, 1.0), m(d_ff, d, 0.5)).unwrap();
    let x = m(b, d, 1.0);
    let y_ref = m(b, d, 1.0);
    let w = m(d, e, 0.8);
    Instance {
        moe: MoefiedFFN::from_dense(&ffn, (0..d_ff).collect(), e).unwrap(),
        router: RouterState::cumulative(w, 0.7).unwrap(),
        batch: Batch::new(x, y_ref).unwrap(),
    }
}

/// Central differences of `f` over every router weight.
fn finite_difference(router: &RouterState, f: impl Fn(&RouterState) -> f64) -> Vec<f64> {
    let n = router.weights().data().len();
    (0..n)
        .map(|i| {
            let mut plus = router.clone();
            plus.weights_mut().data_mut()[i] += STEP;
            let mut minus = router.clone();
            minus.weights_mut().data_mut()[i] -= STEP;
            let h = plus.weights().data()[i] as f64 - minus.weights().data()[i] as f64;
            (f(&plus) - f(&minus)) / h
        })
        .collect()
}

fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = numeric
        .iter()
        .map(|n| n * n)
        .sum::<f64>()
        .sqrt()
        .max(analytic.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn coefficients(pattern: &str) -> TrainConfig {
    let base = TrainConfig {
        eta: 0.0,
        lambda: 0.0,
        gamma: 0.0,
        ..TrainConfig::default()
    };
    match pattern {
        "task" => base,
        "eta" => TrainConfig { eta: 0.5, ..base },
        "lambda" => TrainConfig { lambda: 0.5, ..base },
        "gamma" => TrainConfig { gamma: 0.5, ..base },
        _ => unreachable!(),
    }
}

#[test]
fn frozen_selection_matches_finite_differences() {
    for pattern in ["task", "eta", "lambda", "gamma"] {
        let cfg = coefficients(pattern);
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let inst = instance(seed);
            let frozen = active_sets(&inst.batch, &inst.router, 0.7).unwrap();
            let analytic = router_grad(&inst.batch, &inst.moe, &inst.router, &cfg, 0.7).unwrap();
            let numeric = finite_difference(&inst.router, |r| {
                total_loss_with(&inst.batch, &inst.moe, r, &cfg, Selection::Frozen(&frozen))
                    .unwrap()
                    .0
            });
            let err = relative_error(analytic.data(), &numeric);
            worst = worst.max(err);
            assert!(err < 1e-3, "{pattern} seed {seed}: relative error {err}");
        }
        eprintln!("{pattern}: worst relative error {worst:.3e}");
    }
}

#[test]
fn entropy_gradient_matches_composed_finite_differences() {
    let cfg = coefficients("eta");
    let inst = instance(77);
    let analytic = router_grad(&inst.batch, &inst.moe, &inst.router, &cfg, TAU_ALL_EXPERTS).unwrap();
    // entropy ∘ softmax ∘ logits, evaluated independently of the training code
    let numeric = finite_difference(&inst.router, |r| {
        let probs: Vec<Vec<f32>> = (0..inst.batch.len())
            .map(|i| {
                let x = inst.batch.x.row(i);
                let logits: Vec<f32> = (0..r.num_experts())
                    .map(|e| (0..x.len()).map(|k| x[k] * r.weights().get(k, e)).sum())
                    .collect();
                softmax(&logits)
            })
            .collect();
        cfg.eta * entropy_loss(&Matrix::from_rows(&probs).unwrap(), cfg.epsilon)
    });
    // the task term is present too; remove it with a task-only gradient
    let task_only = router_grad(
        &inst.batch,
        &inst.moe,
        &inst.router,
        &coefficients("task"),
        TAU_ALL_EXPERTS,
    )
    .unwrap();
    let entropy_part: Vec<f32> = analytic
        .data()
        .iter()
        .zip(task_only.data())
        .map(|(a, t)| a - t)
        .collect();
    let err = relative_error(&entropy_part, &numeric);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn soft_stage_gradient_matches_finite_differences() {
    let cfg = coefficients("task");
    for seed in 0..5 {
        let inst = instance(100 + seed);
        let analytic = router_grad_with(&inst.batch, &inst.moe, &inst.router, &cfg, Selection::All).unwrap();
        let numeric = finite_difference(&inst.router, |r| {
            total_loss_with(&inst.batch, &inst.moe, r, &cfg, Selection::All).unwrap().0
        });
        let err = relative_error(analytic.data(), &numeric);
        assert!(err < 1e-3, "seed {seed}: relative error {err}");
    }
}
