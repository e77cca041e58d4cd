//! Router distillation with frozen expert weights.
//!
//! The task loss is the MSE between the router's sparse output and a
//! reference batch output. Gradients treat the selected expert set as a
//! constant: the task term reaches the router only through the sigmoid
//! gates of selected experts, the entropy and balance terms through the
//! softmax probabilities, and the gate-magnitude term through every gate.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ffn::MoefiedFFN;
use crate::numkit::{softmax, vecmat, Matrix};
use crate::routing::{
    all_expert_forward, select_cumulative, select_lte, GateMode, RouterState, TAU_ALL_EXPERTS,
};
use crate::synth::TokenSource;

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityPath {
    pub tau_min: f64,
    /// Number of path rounds `T`.
    pub rounds: usize,
    pub tau_warm: f64,
    pub warmup_rounds: usize,
}

impl SparsityPath {
    pub fn new(tau_min: f64, rounds: usize, warmup_rounds: usize) -> Result<Self> {
        let path = SparsityPath {
            tau_min,
            rounds,
            tau_warm: TAU_ALL_EXPERTS,
            warmup_rounds,
        };
        path.validate()?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau_min <= 1.0) {
            return Err(Error::Config(format!("tau_min must lie in (0, 1], got {}", self.tau_min)));
        }
        if self.rounds == 0 {
            return Err(Error::Config("the sparsity path needs at least one round".into()));
        }
        if !(self.tau_warm.is_finite() && self.tau_warm > 0.0) {
            return Err(Error::Config(format!("tau_warm must be positive, got {}", self.tau_warm)));
        }
        Ok(())
    }
}

/// Threshold for round `t`: `1 − (1 − tau_min)·t/T` for `1 ≤ t ≤ T`, with
/// `t = T` returning `tau_min` exactly. Warm-up rounds are numbered `t ≤ 0`
/// and use `tau_warm`.
pub fn tau_schedule(path: &SparsityPath, t: i64) -> Result<f64> {
    let total = path.rounds as i64;
    if t > total {
        return Err(Error::Range(format!("round {t} beyond the last round {total}")));
    }
    Ok(if t <= 0 {
        path.tau_warm
    } else if t == total {
        path.tau_min
    } else {
        1.0 - (1.0 - path.tau_min) * (t as f64) / (total as f64)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Entropy coefficient.
    pub eta: f64,
    /// Load-balance coefficient.
    pub lambda: f64,
    /// Gate-magnitude coefficient; 0 disables the term.
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps_per_round: usize,
    pub seed: u64,
    pub epsilon: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 0.01,
            lambda: 0.01,
            gamma: 0.0,
            lr: 0.05,
            batch_size: 64,
            steps_per_round: 200,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta", self.eta), ("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Token batch with aligned reference outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y_ref: Matrix,
}

impl Batch {
    pub fn new(x: Matrix, y_ref: Matrix) -> Result<Self> {
        if x.shape() != y_ref.shape() {
            return Err(Error::shape("Batch::new", x.shape_str(), y_ref.shape_str()));
        }
        Ok(Batch { x, y_ref })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

pub trait BatchSource {
    fn next_batch(&mut self, size: usize) -> Result<Batch>;
    fn describe(&self) -> serde_json::Value;
}

/// Distillation targets: tokens from `source`, references from the
/// all-expert output under fixed reference gating.
pub struct Distillation<'a, S> {
    source: S,
    model: &'a MoefiedFFN,
    reference: RouterState,
    exec: Exec,
}

impl<'a, S: TokenSource> Distillation<'a, S> {
    pub fn new(source: S, model: &'a MoefiedFFN, reference: &Matrix) -> Result<Self> {
        let reference = RouterState::cumulative(reference.clone(), TAU_ALL_EXPERTS)?;
        if source.dim() != model.d() {
            return Err(Error::shape("Distillation::new", source.dim(), model.d()));
        }
        Ok(Distillation {
            source,
            model,
            reference,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    /// Reference outputs for an explicit token matrix.
    pub fn targets(&self, x: &Matrix) -> Result<Matrix> {
        reference_outputs(self.exec, self.model, &self.reference, x)
    }
}

pub fn reference_outputs(exec: Exec, m: &MoefiedFFN, reference: &RouterState, x: &Matrix) -> Result<Matrix> {
    crate::ffn::map_rows(exec, x, m.d(), |row| all_expert_forward(m, reference, row))
}

impl<S: TokenSource> BatchSource for Distillation<'_, S> {
    fn next_batch(&mut self, size: usize) -> Result<Batch> {
        let x = self.source.sample(size);
        let y_ref = self.targets(&x)?;
        Batch::new(x, y_ref)
    }

    fn describe(&self) -> serde_json::Value {
        self.source.describe()
    }
}

fn rows_f64(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|&v| v as f64).collect())
        .collect()
}

/// `−(1/B) Σ_i Σ_j p_ij log(p_ij + ε)` over probability rows.
pub fn entropy_loss(p: &Matrix, epsilon: f64) -> f64 {
    entropy_of(&rows_f64(p), epsilon)
}

fn entropy_of(rows: &[Vec<f64>], epsilon: f64) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let total: f64 = rows
        .iter()
        .map(|row| {
            row.iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| v * (v + epsilon).ln())
                .sum::<f64>()
        })
        .sum();
    -total / rows.len() as f64
}

fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    let mut means = vec![0.0f64; cols];
    for row in rows {
        for (m, &v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    let b = rows.len().max(1) as f64;
    means.iter_mut().for_each(|m| *m /= b);
    means
}

/// `E · Σ_j (mean_i p_ij)²`; equals 1 for uniform column means.
pub fn balance_loss(p: &Matrix) -> f64 {
    balance_of(&rows_f64(p))
}

fn balance_of(rows: &[Vec<f64>]) -> f64 {
    let means = column_means(rows);
    means.len() as f64 * means.iter().map(|m| m * m).sum::<f64>()
}

/// Mean sigmoid of all router logits.
pub fn gate_loss(g: &Matrix) -> f64 {
    gate_of(&rows_f64(g))
}

fn gate_of(rows: &[Vec<f64>]) -> f64 {
    let n: usize = rows.iter().map(Vec::len).sum();
    if n == 0 {
        return 0.0;
    }
    rows.iter().flatten().map(|&v| sigmoid64(v)).sum::<f64>() / n as f64
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax64(g: &[f64]) -> Vec<f64> {
    let max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = g.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub task: f64,
    pub entropy: f64,
    pub balance: f64,
    pub gate: f64,
    pub total: f64,
    /// Mean number of selected experts per token.
    pub mean_active: f64,
}

/// How the active set is chosen while evaluating a batch.
#[derive(Clone, Copy, Debug)]
pub enum Selection<'a> {
    CumulativeMass(f64),
    Lte(f32),
    All,
    /// Per-row sets fixed in advance.
    Frozen(&'a [Vec<usize>]),
}

struct RowForward {
    probs: Vec<f64>,
    logits: Vec<f64>,
    active: Vec<usize>,
    sq_err: f64,
    /// d task / d g, before the 1/(B·d) scale, non-zero only on `active`.
    task_dlogits: Vec<f64>,
}

struct BatchEval {
    losses: LossComponents,
    grad: Option<Matrix>,
}

/// One token's forward pass. Selection uses the same `f32` routing as
/// inference; logits, probabilities, gates and the loss terms are carried in
/// `f64` so finite differences of the loss resolve small weight changes.
fn forward_row(
    m: &MoefiedFFN,
    w: &Matrix,
    x: &[f32],
    y_ref: &[f32],
    selection: &Selection<'_>,
    row: usize,
    want_grad: bool,
) -> Result<RowForward> {
    let num_experts = w.cols();
    let mut active = match selection {
        Selection::CumulativeMass(tau) => select_cumulative(&softmax(&vecmat(x, w)?), *tau),
        Selection::Lte(delta) => select_lte(&vecmat(x, w)?, *delta),
        Selection::All => (0..num_experts).collect(),
        Selection::Frozen(sets) => sets
            .get(row)
            .cloned()
            .ok_or_else(|| Error::shape("frozen selection", sets.len(), row + 1))?,
    };
    let mut ordered = active.clone();
    ordered.sort_unstable();
    ordered.dedup();
    if ordered.iter().any(|&e| e >= num_experts) {
        return Err(Error::Range(format!("selected expert outside [0, {num_experts})")));
    }
    active.dedup();

    let mut logits = vec![0.0f64; num_experts];
    for (k, &xk) in x.iter().enumerate() {
        for (g, &wv) in logits.iter_mut().zip(w.row(k)) {
            *g += xk as f64 * wv as f64;
        }
    }
    let probs = softmax64(&logits);

    let mut y = vec![0.0f64; x.len()];
    let mut outputs = Vec::with_capacity(ordered.len());
    for &e in &ordered {
        let gate = sigmoid64(logits[e]);
        let fe = m.expert(e).forward(x)?;
        for (o, &v) in y.iter_mut().zip(&fe) {
            *o += gate * v as f64;
        }
        outputs.push((e, fe));
    }
    let sq_err: f64 = y.iter().zip(y_ref).map(|(&a, &b)| (a - b as f64).powi(2)).sum();

    let mut task_dlogits = vec![0.0f64; num_experts];
    if want_grad {
        for (e, fe) in &outputs {
            let s = sigmoid64(logits[*e]);
            let dot: f64 = fe
                .iter()
                .zip(y.iter().zip(y_ref))
                .map(|(&f, (&a, &b))| f as f64 * (a - b as f64))
                .sum();
            task_dlogits[*e] = 2.0 * dot * s * (1.0 - s);
        }
    }
    Ok(RowForward {
        probs,
        logits,
        active,
        sq_err,
        task_dlogits,
    })
}

/// Backpropagates `u = dL/dp` through a softmax: `dL/dg_k = p_k (u_k − Σ_j p_j u_j)`.
fn softmax_backward(p: &[f64], u: &[f64], out: &mut [f64], scale: f64) {
    let dot: f64 = p.iter().zip(u).map(|(&pj, &uj)| pj * uj).sum();
    for ((o, &pk), &uk) in out.iter_mut().zip(p).zip(u) {
        *o += scale * pk * (uk - dot);
    }
}

fn evaluate(
    batch: &Batch,
    m: &MoefiedFFN,
    w: &Matrix,
    cfg: &TrainConfig,
    selection: Selection<'_>,
    want_grad: bool,
) -> Result<BatchEval> {
    let (b, d) = batch.x.shape();
    if d != m.d() || w.rows() != d || w.cols() != m.num_experts() {
        return Err(Error::shape(
            "router training",
            format!("tokens {} router {}", batch.x.shape_str(), w.shape_str()),
            format!("experts {}x{}", m.d(), m.num_experts()),
        ));
    }
    if batch.y_ref.shape() != batch.x.shape() {
        return Err(Error::shape("router training", batch.x.shape_str(), batch.y_ref.shape_str()));
    }
    if b == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let num_experts = m.num_experts();
    let rows = cfg.exec.map(b, |i| {
        forward_row(m, w, batch.x.row(i), batch.y_ref.row(i), &selection, i, want_grad)
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;

    let probs: Vec<Vec<f64>> = rows.iter().map(|r| r.probs.clone()).collect();
    let logits: Vec<Vec<f64>> = rows.iter().map(|r| r.logits.clone()).collect();
    let task = rows.iter().map(|r| r.sq_err).sum::<f64>() / (b * d) as f64;
    let entropy = entropy_of(&probs, cfg.epsilon);
    let balance = balance_of(&probs);
    let gate = gate_of(&logits);
    let total = task + cfg.eta * entropy + cfg.lambda * balance + cfg.gamma * gate;
    let mean_active = rows.iter().map(|r| r.active.len()).sum::<usize>() as f64 / b as f64;
    let losses = LossComponents {
        task,
        entropy,
        balance,
        gate,
        total,
        mean_active,
    };

    let grad = if want_grad {
        let means = column_means(&probs);
        let bal_u: Vec<f64> = means.iter().map(|&mj| 2.0 * num_experts as f64 * mj / b as f64).collect();
        let task_scale = 1.0 / (b * d) as f64;
        let gate_scale = cfg.gamma / (b * num_experts) as f64;
        let dlogits = cfg.exec.map(b, |i| {
            let row = &rows[i];
            let mut dg: Vec<f64> = row.task_dlogits.iter().map(|v| v * task_scale).collect();
            if cfg.eta != 0.0 {
                let u: Vec<f64> = row
                    .probs
                    .iter()
                    .map(|&p| -(p + cfg.epsilon).ln() - p / (p + cfg.epsilon))
                    .collect();
                softmax_backward(&row.probs, &u, &mut dg, cfg.eta / b as f64);
            }
            if cfg.lambda != 0.0 {
                softmax_backward(&row.probs, &bal_u, &mut dg, cfg.lambda);
            }
            if cfg.gamma != 0.0 {
                for (o, &g) in dg.iter_mut().zip(&row.logits) {
                    let s = sigmoid64(g);
                    *o += gate_scale * s * (1.0 - s);
                }
            }
            dg
        });
        let mut grad = vec![0.0f64; d * num_experts];
        for (i, dg) in dlogits.iter().enumerate() {
            for (k, &xk) in batch.x.row(i).iter().enumerate() {
                let xk = xk as f64;
                for (gv, &dv) in grad[k * num_experts..(k + 1) * num_experts].iter_mut().zip(dg) {
                    *gv += xk * dv;
                }
            }
        }
        let grad: Vec<f32> = grad.into_iter().map(|v| v as f32).collect();
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("router gradient is not finite".into()));
        }
        Some(Matrix::from_vec(d, num_experts, grad)?)
    } else {
        None
    };

    Ok(BatchEval { losses, grad })
}

/// Objective with the task term measured at cumulative-mass threshold `tau`.
pub fn total_loss(
    batch: &Batch,
    m: &MoefiedFFN,
    r: &RouterState,
    cfg: &TrainConfig,
    tau: f64,
) -> Result<(f64, LossComponents)> {
    let eval = evaluate(batch, m, r.weights(), cfg, Selection::CumulativeMass(tau), false)?;
    Ok((eval.losses.total, eval.losses))
}

/// Objective under an explicit selection rule (frozen sets, LTE thresholding
/// or all experts).
pub fn total_loss_with(
    batch: &Batch,
    m: &MoefiedFFN,
    r: &RouterState,
    cfg: &TrainConfig,
    selection: Selection<'_>,
) -> Result<(f64, LossComponents)> {
    let eval = evaluate(batch, m, r.weights(), cfg, selection, false)?;
    Ok((eval.losses.total, eval.losses))
}

/// Per-row active sets chosen by cumulative mass at `tau`.
pub fn active_sets(batch: &Batch, r: &RouterState, tau: f64) -> Result<Vec<Vec<usize>>> {
    (0..batch.len())
        .map(|i| {
            let p = softmax(&vecmat(batch.x.row(i), r.weights())?);
            Ok(select_cumulative(&p, tau))
        })
        .collect()
}

/// Gradient of [`total_loss`] with respect to the router weights, with the
/// selected sets held constant.
pub fn router_grad(batch: &Batch, m: &MoefiedFFN, r: &RouterState, cfg: &TrainConfig, tau: f64) -> Result<Matrix> {
    router_grad_with(batch, m, r, cfg, Selection::CumulativeMass(tau))
}

pub fn router_grad_with(
    batch: &Batch,
    m: &MoefiedFFN,
    r: &RouterState,
    cfg: &TrainConfig,
    selection: Selection<'_>,
) -> Result<Matrix> {
    Ok(evaluate(batch, m, r.weights(), cfg, selection, true)?
        .grad
        .expect("gradient requested"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    /// `t` of the schedule; warm-up rounds are numbered `≤ 0`.
    pub round: i64,
    /// Threshold used in the round (the LTE threshold `delta` for hard-stage
    /// LTE rounds).
    pub tau: f64,
    pub losses: LossComponents,
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rounds: Vec<RoundLog>,
    /// Task loss of every step, grouped by round.
    pub step_task: Vec<Vec<f64>>,
    pub generator: serde_json::Value,
    pub config: TrainConfig,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "round,tau,L_task,L_ent,L_bal,L_gate,total,sparsity";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rounds {
            let l = &r.losses;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.round, r.tau, l.task, l.entropy, l.balance, l.gate, l.total, r.sparsity
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }
}

struct Trainer<'c> {
    cfg: &'c TrainConfig,
    log: TrainLog,
}

impl<'c> Trainer<'c> {
    fn new(cfg: &'c TrainConfig, generator: serde_json::Value) -> Self {
        Trainer {
            cfg,
            log: TrainLog {
                rounds: Vec::new(),
                step_task: Vec::new(),
                generator,
                config: cfg.clone(),
            },
        }
    }

    /// Runs one round of plain gradient descent on `w`.
    fn round(
        &mut self,
        m: &MoefiedFFN,
        w: &mut Matrix,
        data: &mut dyn BatchSource,
        round: i64,
        logged_tau: f64,
        selection: Selection<'_>,
    ) -> Result<()> {
        let steps = self.cfg.steps_per_round;
        let mut acc = LossComponents::default();
        let mut step_task = Vec::with_capacity(steps);
        for step in 0..steps.max(1) {
            let batch = data.next_batch(self.cfg.batch_size)?;
            let train = step < steps;
            let eval = evaluate(&batch, m, w, self.cfg, selection, train)?;
            let l = eval.losses;
            if !l.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss became {} in round {round} step {step}",
                    l.total
                )));
            }
            if let Some(grad) = eval.grad {
                if !grad.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite gradient in round {round} step {step}"
                    )));
                }
                let lr = self.cfg.lr as f32;
                for (wv, gv) in w.data_mut().iter_mut().zip(grad.data()) {
                    *wv -= lr * gv;
                }
                step_task.push(l.task);
            }
            acc.task += l.task;
            acc.entropy += l.entropy;
            acc.balance += l.balance;
            acc.gate += l.gate;
            acc.total += l.total;
            acc.mean_active += l.mean_active;
        }
        let n = steps.max(1) as f64;
        let mean = LossComponents {
            task: acc.task / n,
            entropy: acc.entropy / n,
            balance: acc.balance / n,
            gate: acc.gate / n,
            total: acc.total / n,
            mean_active: acc.mean_active / n,
        };
        self.log.rounds.push(RoundLog {
            round,
            tau: logged_tau,
            losses: mean,
            sparsity: 1.0 - mean.mean_active / m.num_experts() as f64,
        });
        self.log.step_task.push(step_task);
        Ok(())
    }
}

/// Warm-up rounds at `tau_warm`, then `T` rounds along the linear schedule.
/// Each round logs its mean losses; with zero steps per round a single
/// batch is evaluated for the log and the weights are left untouched. The
/// returned router carries `tau = tau_min`.
pub fn train_sparsity_path(
    m: &MoefiedFFN,
    r: &RouterState,
    data: &mut dyn BatchSource,
    path: &SparsityPath,
    cfg: &TrainConfig,
) -> Result<(RouterState, TrainLog)> {
    path.validate()?;
    cfg.validate()?;
    let mut w = r.weights().clone();
    let mut trainer = Trainer::new(cfg, data.describe());
    let first = 1 - path.warmup_rounds as i64;
    for t in first..=path.rounds as i64 {
        let tau = tau_schedule(path, t)?;
        trainer.round(m, &mut w, data, t, tau, Selection::CumulativeMass(tau))?;
    }
    let trained = RouterState::new(w, path.tau_min, GateMode::CumulativeMass)?;
    Ok((trained, trainer.log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LteSchedule {
    pub soft_rounds: usize,
    pub hard_rounds: usize,
    pub delta: f32,
}

/// Two-stage baseline: soft rounds train every expert weighted by its gate,
/// hard rounds keep only experts whose gate exceeds `delta`. The objective
/// is the task loss plus `gamma` times the gate-magnitude term; the entropy
/// and balance coefficients are not used.
pub fn train_lte_baseline(
    m: &MoefiedFFN,
    r: &RouterState,
    data: &mut dyn BatchSource,
    cfg: &TrainConfig,
    schedule: &LteSchedule,
) -> Result<(RouterState, TrainLog)> {
    cfg.validate()?;
    if !(schedule.delta.is_finite() && (0.0..1.0).contains(&schedule.delta)) {
        return Err(Error::Config(format!("delta must lie in [0, 1), got {}", schedule.delta)));
    }
    let lte_cfg = TrainConfig {
        eta: 0.0,
        lambda: 0.0,
        ..cfg.clone()
    };
    let mut w = r.weights().clone();
    let mut trainer = Trainer::new(&lte_cfg, data.describe());
    let first = 1 - schedule.soft_rounds as i64;
    for t in first..=0 {
        trainer.round(m, &mut w, data, t, TAU_ALL_EXPERTS, Selection::All)?;
    }
    for t in 1..=schedule.hard_rounds as i64 {
        trainer.round(m, &mut w, data, t, schedule.delta as f64, Selection::Lte(schedule.delta))?;
    }
    let trained = RouterState::new(w, 1.0, GateMode::LteThreshold { delta: schedule.delta })?;
    let mut log = trainer.log;
    log.config = cfg.clone();
    Ok((trained, log))
}
