//! Router scoring, expert selection and gated sparse aggregation.
//!
//! The router maps a token to expert logits `g = W_rᵀ x`. Selection ranks
//! experts by `softmax(g)` and keeps the top expert plus every further
//! expert whose running probability mass stays strictly below `tau`.
//! Selected experts are summed with independent `sigmoid(g_e)` weights.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffn::MoefiedFFN;
use crate::numkit::{argsort_desc, sigmoid, softmax, vecmat, Matrix, Vector};

/// Threshold used during all-expert warm-up; any `tau > 1` selects every
/// expert because the cumulative mass never exceeds one.
pub const TAU_ALL_EXPERTS: f64 = 1.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GateMode {
    CumulativeMass,
    /// Independent per-expert thresholding: keep `e` when `sigmoid(g_e) > delta`.
    LteThreshold { delta: f32 },
    /// Keep exactly the `k` highest-scoring experts (analysis harness only).
    FixedTopK { k: usize },
}

impl GateMode {
    pub fn code(&self) -> u32 {
        match self {
            GateMode::CumulativeMass => 0,
            GateMode::LteThreshold { .. } => 1,
            GateMode::FixedTopK { .. } => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    weights: Matrix,
    pub tau: f64,
    pub mode: GateMode,
    /// Whether top-k ranking uses sigmoid gates (LTE-trained routers) or
    /// softmax probabilities. The two orders agree up to rounding ties.
    #[serde(default)]
    pub rank_by_gate: bool,
}

impl RouterState {
    pub fn new(weights: Matrix, tau: f64, mode: GateMode) -> Result<Self> {
        let r = RouterState {
            weights,
            tau,
            mode,
            rank_by_gate: matches!(mode, GateMode::LteThreshold { .. }),
        };
        r.validate()?;
        Ok(r)
    }

    pub fn cumulative(weights: Matrix, tau: f64) -> Result<Self> {
        RouterState::new(weights, tau, GateMode::CumulativeMass)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.weights.cols() == 0 {
            return Err(Error::Config("router needs at least one expert".into()));
        }
        match self.mode {
            GateMode::LteThreshold { delta } if !delta.is_finite() => {
                Err(Error::Config(format!("delta must be finite, got {delta}")))
            }
            GateMode::FixedTopK { k } if k == 0 || k > self.num_experts() => Err(Error::Range(
                format!("top-k {k} outside [1, {}]", self.num_experts()),
            )),
            _ => Ok(()),
        }
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn d(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.weights.cols()
    }

    pub fn with_tau(&self, tau: f64) -> Self {
        RouterState {
            tau,
            ..self.clone()
        }
    }

    pub fn with_mode(&self, mode: GateMode) -> Self {
        RouterState {
            mode,
            ..self.clone()
        }
    }

    /// Copy that keeps exactly the top `k` experts.
    pub fn forced_topk(&self, k: usize) -> Result<Self> {
        let r = self.with_mode(GateMode::FixedTopK { k });
        r.validate()?;
        Ok(r)
    }

    fn check_model(&self, m: &MoefiedFFN) -> Result<()> {
        if m.num_experts() != self.num_experts() || m.d() != self.d() {
            return Err(Error::shape(
                "router vs experts",
                self.weights.shape_str(),
                format!("{}x{}", m.d(), m.num_experts()),
            ));
        }
        Ok(())
    }
}

pub fn route_logits(r: &RouterState, x: &[f32]) -> Result<Vector> {
    vecmat(x, &r.weights)
}

/// `{π₁} ∪ {π_i | Σ_{r≤i} p_{π_r} < tau}` in descending-probability order.
/// The running sum uses Kahan-compensated `f64` accumulation.
pub fn select_cumulative(p: &[f32], tau: f64) -> Vec<usize> {
    let order = argsort_desc(p);
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    let mut active = Vec::new();
    for (rank, &e) in order.iter().enumerate() {
        let y = p[e] as f64 - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
        if rank == 0 || sum < tau {
            active.push(e);
        } else {
            break;
        }
    }
    active
}

/// Experts whose sigmoid gate strictly exceeds `delta`, highest gate first.
/// May be empty.
pub fn select_lte(g: &[f32], delta: f32) -> Vec<usize> {
    let gates = sigmoid(g);
    argsort_desc(&gates)
        .into_iter()
        .filter(|&e| gates[e] > delta)
        .collect()
}

pub fn select_topk(scores: &[f32], k: usize) -> Vec<usize> {
    let mut order = argsort_desc(scores);
    order.truncate(k);
    order
}

/// Routing outcome for one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub token: usize,
    pub layer: usize,
    /// Selected experts, highest-ranked first. Empty only when LTE
    /// thresholding selects nothing; the output is then zero.
    pub active: Vec<usize>,
    pub probs: Vec<f32>,
    pub gates: Vec<f32>,
}

impl ActivationRecord {
    pub fn is_empty_selection(&self) -> bool {
        self.active.is_empty()
    }
}

/// Logits, probabilities, gates and the selected set under `r`'s mode.
pub fn route(r: &RouterState, x: &[f32]) -> Result<(Vector, ActivationRecord)> {
    let logits = route_logits(r, x)?;
    let probs = softmax(&logits);
    let gates = sigmoid(&logits);
    let active = match r.mode {
        GateMode::CumulativeMass => select_cumulative(&probs, r.tau),
        GateMode::LteThreshold { delta } => select_lte(&logits, delta),
        GateMode::FixedTopK { k } => {
            select_topk(if r.rank_by_gate { &gates } else { &probs }, k)
        }
    };
    Ok((
        logits,
        ActivationRecord {
            token: 0,
            layer: 0,
            active,
            probs,
            gates,
        },
    ))
}

/// `Σ_{e ∈ active} gates[e] · FFN_e(x)`, accumulated in ascending expert
/// index regardless of the order of `active`.
pub fn gated_sum(m: &MoefiedFFN, x: &[f32], gates: &[f32], active: &[usize]) -> Result<Vector> {
    let mut mask = vec![false; m.num_experts()];
    for &e in active {
        if e >= mask.len() {
            return Err(Error::Range(format!("expert {e} of {}", mask.len())));
        }
        mask[e] = true;
    }
    let mut out = vec![0.0f32; m.d()];
    for (e, _) in mask.iter().enumerate().filter(|(_, &on)| on) {
        let y = m.expert(e).forward(x)?;
        for (o, v) in out.iter_mut().zip(y) {
            *o += gates[e] * v;
        }
    }
    Ok(out)
}

pub fn sparse_forward(m: &MoefiedFFN, r: &RouterState, x: &[f32]) -> Result<(Vector, ActivationRecord)> {
    r.check_model(m)?;
    if x.len() != m.d() {
        return Err(Error::shape("sparse_forward", x.len(), m.d()));
    }
    let (_, record) = route(r, x)?;
    let y = gated_sum(m, x, &record.gates, &record.active)?;
    Ok((y, record))
}

/// The all-expert sigmoid-gated output used as the reconstruction reference.
pub fn all_expert_forward(m: &MoefiedFFN, r: &RouterState, x: &[f32]) -> Result<Vector> {
    r.check_model(m)?;
    let gates = sigmoid(&route_logits(r, x)?);
    let all: Vec<usize> = (0..m.num_experts()).collect();
    gated_sum(m, x, &gates, &all)
}

/// `1 − Σ|A| / (N·L·E)` over a trace that must contain every
/// (token, layer) pair for `num_layers` layers exactly once.
pub fn sparsity_metric(records: &[ActivationRecord], num_layers: usize, num_experts: usize) -> Result<f64> {
    if records.is_empty() || num_layers == 0 || num_experts == 0 {
        return Err(Error::Accounting("empty trace".into()));
    }
    let mut seen: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    let mut active_total = 0usize;
    for r in records {
        if r.layer >= num_layers {
            return Err(Error::Accounting(format!(
                "token {} has layer {} but the model has {num_layers}",
                r.token, r.layer
            )));
        }
        let layers = seen.entry(r.token).or_insert_with(|| vec![false; num_layers]);
        if std::mem::replace(&mut layers[r.layer], true) {
            return Err(Error::Accounting(format!(
                "token {} layer {} recorded twice",
                r.token, r.layer
            )));
        }
        active_total += r.active.len();
    }
    if let Some((token, layers)) = seen.iter().find(|(_, l)| l.iter().any(|&s| !s)) {
        let missing = layers.iter().position(|&s| !s).unwrap_or(0);
        return Err(Error::Accounting(format!("token {token} missing layer {missing}")));
    }
    let denom = (seen.len() * num_layers * num_experts) as f64;
    Ok(1.0 - active_total as f64 / denom)
}

pub fn write_trace_jsonl<W: Write>(records: &[ActivationRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|source| Error::Io {
            path: "<trace>".into(),
            source,
        })?;
    }
    Ok(())
}

pub fn read_trace_jsonl<R: BufRead>(r: R) -> Result<Vec<ActivationRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|source| Error::Io {
            path: "<trace>".into(),
            source,
        })?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ffn::DenseFFN;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const P: [f32; 4] = [0.5, 0.3, 0.15, 0.05];

    fn random_setup(seed: u64, d: usize, d_ff: usize, e: usize) -> (MoefiedFFN, RouterState, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r, c| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0f32..1.0));
        let ffn = DenseFFN::new(m(d, d_ff), m(d, d_ff), m(d_ff, d)).unwrap();
        let w = m(d, e);
        let x = m(1, d).into_vec();
        let moe = MoefiedFFN::from_dense(&ffn, (0..d_ff).collect(), e).unwrap();
        (moe, RouterState::cumulative(w, 0.7).unwrap(), x)
    }

    #[test]
    fn cumulative_examples() {
        assert_eq!(select_cumulative(&P, 0.85), vec![0, 1]);
        assert_eq!(select_cumulative(&P, 0.4), vec![0]);
        assert_eq!(select_cumulative(&P, 1.05), vec![0, 1, 2, 3]);
        let shuffled = [0.15, 0.05, 0.5, 0.3];
        assert_eq!(select_cumulative(&shuffled, 0.85), vec![2, 3]);
    }

    #[test]
    fn strict_inequality_at_one() {
        let p = [0.25f32; 4];
        assert_eq!(select_cumulative(&p, 1.0), vec![0, 1, 2]);
        assert_eq!(select_cumulative(&p, 0.5), vec![0]);
    }

    #[test]
    fn lte_examples() {
        assert!(select_lte(&[0.0, 0.0, 0.0], 0.5).is_empty());
        assert_eq!(select_lte(&[2.0, -2.0], 0.5), vec![0]);
        assert_eq!(select_lte(&[-1.0, 3.0, 0.0], 0.0), vec![1, 2, 0]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn logits_match_dot_products() {
        let zero = RouterState::cumulative(Matrix::zeros(3, 2), 1.0).unwrap();
        assert_eq!(route_logits(&zero, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        let one = RouterState::cumulative(Matrix::from_vec(3, 1, vec![0.5, -1.0, 2.0]).unwrap(), 1.0).unwrap();
        assert_eq!(route_logits(&one, &[1.0, 2.0, 3.0]).unwrap(), vec![0.5 - 2.0 + 6.0]);
        let (_, r, x) = random_setup(4, 8, 16, 4);
        let g = route_logits(&r, &x).unwrap();
        for e in 0..4 {
            let mut acc = 0.0f32;
            for k in 0..8 {
                acc += x[k] * r.weights().get(k, e);
            }
            assert_eq!(g[e], acc);
        }
    }

    #[test]
    fn warm_tau_equals_all_expert_reference() {
        let (m, r, x) = random_setup(1, 8, 32, 4);
        let r = r.with_tau(TAU_ALL_EXPERTS);
        let (y, rec) = sparse_forward(&m, &r, &x).unwrap();
        assert_eq!(rec.active.len(), 4);
        assert_eq!(y, all_expert_forward(&m, &r, &x).unwrap());
        let topk = r.forced_topk(4).unwrap();
        assert_eq!(sparse_forward(&m, &topk, &x).unwrap().0, y);
    }

    #[test]
    fn single_expert_output() {
        let (m, r, x) = random_setup(2, 8, 32, 4);
        let r = r.with_tau(1e-3);
        let (y, rec) = sparse_forward(&m, &r, &x).unwrap();
        assert_eq!(rec.active.len(), 1);
        let e = rec.active[0];
        let expected: Vec<f32> = m.expert(e).forward(&x).unwrap().iter().map(|v| rec.gates[e] * v).collect();
        assert_eq!(y, expected);
    }

    #[test]
    fn lte_empty_set_gives_zero_output() {
        let (m, r, x) = random_setup(3, 8, 32, 4);
        let r = r.with_mode(GateMode::LteThreshold { delta: 1.0 });
        let (y, rec) = sparse_forward(&m, &r, &x).unwrap();
        assert!(rec.is_empty_selection());
        assert_eq!(y, vec![0.0; 8]);
    }

    #[test]
    fn sparsity_examples() {
        let rec = |token, layer, n: usize| ActivationRecord {
            token,
            layer,
            active: (0..n).collect(),
            probs: vec![],
            gates: vec![],
        };
        assert_eq!(sparsity_metric(&[rec(0, 0, 8), rec(1, 0, 8)], 1, 8).unwrap(), 0.0);
        assert_eq!(sparsity_metric(&[rec(0, 0, 1), rec(1, 0, 1)], 1, 8).unwrap(), 0.875);
        assert_eq!(sparsity_metric(&[rec(0, 0, 2), rec(1, 0, 4)], 1, 8).unwrap(), 0.625);
        assert!(sparsity_metric(&[rec(0, 0, 2), rec(0, 0, 4)], 1, 8).is_err());
        assert!(sparsity_metric(&[rec(0, 0, 2), rec(1, 1, 4)], 2, 8).is_err());
        assert!(sparsity_metric(&[], 1, 8).is_err());
    }

    #[test]
    fn invalid_router_states() {
        assert!(RouterState::cumulative(Matrix::zeros(2, 2), 0.0).is_err());
        assert!(RouterState::new(Matrix::zeros(2, 2), 1.0, GateMode::FixedTopK { k: 3 }).is_err());
        let (m, _, x) = random_setup(5, 8, 32, 4);
        let wrong = RouterState::cumulative(Matrix::zeros(8, 2), 1.0).unwrap();
        assert!(sparse_forward(&m, &wrong, &x).is_err());
    }

    #[test]
    fn trace_jsonl_round_trip() {
        let (m, r, x) = random_setup(6, 8, 32, 4);
        let (_, mut rec) = sparse_forward(&m, &r, &x).unwrap();
        rec.token = 3;
        let mut buf = Vec::new();
        write_trace_jsonl(std::slice::from_ref(&rec), &mut buf).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert!(line.starts_with("{\"token\":3,\"layer\":0,\"active\":["), "{line}");
        assert_eq!(read_trace_jsonl(&buf[..]).unwrap(), vec![rec]);
    }
}
