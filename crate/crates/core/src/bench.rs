//! Single-token decode loop over a dense and a blocked sparse layout, with
//! exact FLOP and live-activation accounting.
//!
//! FLOPs count multiply-adds as two operations. Per token:
//!
//! * FFN, dense: `6·d·d_ff + d_ff` (three projections plus the gating
//!   product), see [`count_flops_dense`].
//! * FFN, sparse: `|A|·(6·d·d_e + d_e)`, the same formula per active block.
//! * Router: `2·d·E` for the logits, charged to both paths.
//! * Selection: `E·⌈log₂ E⌉` for ranking, charged to the sparse path only.
//!
//! Activation functions, the softmax and the per-expert gate scaling are
//! not counted.
//!
//! Live activations are counted in elements. Both paths hold the same
//! fixed buffers (logits, gates and output: `2·E + d`); on top of that the
//! dense path materializes all `d_ff` intermediate values and the sparse
//! path only the `|A|·d_e` values of the active blocks.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffn::MoefiedFFN;
use crate::numkit::{silu_scalar, sigmoid_scalar, vecmat_into, Matrix};
use crate::routing::{route, ActivationRecord, RouterState};

/// Setting this to `1` disables wall-clock measurement and assertions.
pub const NO_TIMING_ENV: &str = "PRUNEPATH_NO_TIMING";

pub fn timing_disabled_by_env() -> bool {
    std::env::var(NO_TIMING_ENV).is_ok_and(|v| v == "1")
}

/// `2·d·d_ff·3 + d_ff`.
pub fn count_flops_dense(d: usize, d_ff: usize) -> u64 {
    6 * d as u64 * d_ff as u64 + d_ff as u64
}

/// Router logits, `2·d·E`.
pub fn count_flops_router(d: usize, num_experts: usize) -> u64 {
    2 * d as u64 * num_experts as u64
}

/// Ranking cost, `E·⌈log₂ E⌉`.
pub fn count_flops_selection(num_experts: usize) -> u64 {
    let log = if num_experts <= 1 {
        0
    } else {
        (usize::BITS - (num_experts - 1).leading_zeros()) as u64
    };
    num_experts as u64 * log
}

/// FFN portion of a sparse token: `active` blocks of width `d_e`.
pub fn count_flops_sparse_ffn(d: usize, d_e: usize, active: usize) -> u64 {
    active as u64 * count_flops_dense(d, d_e)
}

/// Sparse token total: active blocks plus router and selection.
pub fn count_flops_sparse(d: usize, d_e: usize, active: usize, num_experts: usize) -> Result<u64> {
    if active > num_experts {
        return Err(Error::Accounting(format!("{active} active experts out of {num_experts}")));
    }
    Ok(count_flops_sparse_ffn(d, d_e, active)
        + count_flops_router(d, num_experts)
        + count_flops_selection(num_experts))
}

/// FLOPs a sparse run must have reported for `records`.
pub fn flops_from_trace(records: &[ActivationRecord], d: usize, d_e: usize, num_experts: usize) -> Result<u64> {
    records
        .iter()
        .map(|r| count_flops_sparse(d, d_e, r.active.len(), num_experts))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecStats {
    pub mode: String,
    pub tokens: usize,
    pub flops: u64,
    /// The FFN share of `flops`, without router or selection cost.
    pub ffn_flops: u64,
    /// Peak live elements including fixed buffers.
    pub peak_activation_elems: usize,
    /// Peak live FFN intermediate elements.
    pub peak_intermediate_elems: usize,
    /// Zero when timing is disabled.
    pub wall_ns: u64,
    pub mean_active: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeBench {
    pub dense: ExecStats,
    pub sparse: ExecStats,
    /// Routing decisions of the sparse path, one per step.
    pub records: Vec<ActivationRecord>,
    /// Largest absolute difference between the two paths' outputs.
    pub max_output_diff: f32,
}

pub const REPORT_HEADER: &str = "mode,tokens,flops,peak_activation_elems,wall_ns,mean_active";

impl DecodeBench {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{REPORT_HEADER}")?;
        for s in [&self.dense, &self.sparse] {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                s.mode, s.tokens, s.flops, s.peak_activation_elems, s.wall_ns, s.mean_active
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

/// Expert blocks laid out once for both paths: the concatenated dense
/// matrices and the per-block slices of the same data.
struct Layout<'a> {
    m: &'a MoefiedFFN,
    w_gate: Matrix,
    w_up: Matrix,
    w_down: Matrix,
}

impl<'a> Layout<'a> {
    fn new(m: &'a MoefiedFFN) -> Self {
        let dense = m.permuted_dense();
        Layout {
            m,
            w_gate: dense.w_gate().clone(),
            w_up: dense.w_up().clone(),
            w_down: dense.w_down().clone(),
        }
    }
}

struct Buffers {
    logits: Vec<f32>,
    gates: Vec<f32>,
    inter: Vec<f32>,
    up: Vec<f32>,
    block_out: Vec<f32>,
    out: Vec<f32>,
}

impl Buffers {
    fn new(d: usize, d_ff: usize, num_experts: usize) -> Self {
        Buffers {
            logits: vec![0.0; num_experts],
            gates: vec![0.0; num_experts],
            inter: vec![0.0; d_ff],
            up: vec![0.0; d_ff],
            block_out: vec![0.0; d],
            out: vec![0.0; d],
        }
    }
}

/// All experts through the full `d_ff` intermediate, each block scaled by
/// its gate before the down projection.
fn dense_step(layout: &Layout<'_>, r: &RouterState, x: &[f32], buf: &mut Buffers) {
    let num_experts = layout.m.num_experts();
    let d_e = layout.m.expert_width();
    let d_ff = layout.m.d_ff();
    buf.logits.fill(0.0);
    vecmat_into(x, r.weights().data(), num_experts, &mut buf.logits);
    for (g, &l) in buf.gates.iter_mut().zip(&buf.logits) {
        *g = sigmoid_scalar(l);
    }
    let (inter, up) = (&mut buf.inter[..d_ff], &mut buf.up[..d_ff]);
    inter.fill(0.0);
    up.fill(0.0);
    vecmat_into(x, layout.w_gate.data(), d_ff, inter);
    vecmat_into(x, layout.w_up.data(), d_ff, up);
    for (j, (h, &u)) in inter.iter_mut().zip(up.iter()).enumerate() {
        *h = silu_scalar(*h) * u * buf.gates[j / d_e];
    }
    buf.out.fill(0.0);
    vecmat_into(inter, layout.w_down.data(), x.len(), &mut buf.out);
}

/// Only the active blocks, each evaluated as a contiguous block multiply and
/// accumulated in ascending expert order. Returns the live intermediate size.
fn sparse_step(layout: &Layout<'_>, record: &ActivationRecord, x: &[f32], buf: &mut Buffers) -> usize {
    let d_e = layout.m.expert_width();
    let mut active = record.active.clone();
    active.sort_unstable();
    for (slot, &e) in active.iter().enumerate() {
        let block = layout.m.expert(e);
        let inter = &mut buf.inter[slot * d_e..(slot + 1) * d_e];
        let up = &mut buf.up[slot * d_e..(slot + 1) * d_e];
        inter.fill(0.0);
        up.fill(0.0);
        vecmat_into(x, block.w_gate().data(), d_e, inter);
        vecmat_into(x, block.w_up().data(), d_e, up);
        for (h, &u) in inter.iter_mut().zip(up.iter()) {
            *h = silu_scalar(*h) * u;
        }
    }
    buf.out.fill(0.0);
    for (slot, &e) in active.iter().enumerate() {
        buf.block_out.fill(0.0);
        let inter = &buf.inter[slot * d_e..(slot + 1) * d_e];
        vecmat_into(inter, layout.m.expert(e).w_down().data(), x.len(), &mut buf.block_out);
        let g = record.gates[e];
        for (o, &v) in buf.out.iter_mut().zip(&buf.block_out) {
            *o += g * v;
        }
    }
    active.len() * d_e
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchOptions {
    pub timing: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            timing: !timing_disabled_by_env(),
        }
    }
}

pub fn run_decode_bench(m: &MoefiedFFN, r: &RouterState, prompts: &Matrix, steps: usize) -> Result<DecodeBench> {
    run_decode_bench_with(m, r, prompts, steps, BenchOptions::default())
}

/// Decodes `steps` tokens one at a time (step `t` uses prompt row
/// `t mod N`) through both paths on the calling thread. A full untimed
/// pass runs first; the timed pass repeats it.
pub fn run_decode_bench_with(
    m: &MoefiedFFN,
    r: &RouterState,
    prompts: &Matrix,
    steps: usize,
    opts: BenchOptions,
) -> Result<DecodeBench> {
    if steps == 0 {
        return Err(Error::Config("decode bench needs at least one step".into()));
    }
    if prompts.rows() == 0 || prompts.cols() != m.d() {
        return Err(Error::shape("run_decode_bench", prompts.shape_str(), format!("Nx{}", m.d())));
    }
    if r.num_experts() != m.num_experts() || r.d() != m.d() {
        return Err(Error::shape("run_decode_bench", r.weights().shape_str(), format!("{}x{}", m.d(), m.num_experts())));
    }
    let (d, d_ff, num_experts, d_e) = (m.d(), m.d_ff(), m.num_experts(), m.expert_width());
    let layout = Layout::new(m);
    let mut buf = Buffers::new(d, d_ff, num_experts);
    let token = |t: usize| prompts.row(t % prompts.rows());

    // untimed pass: records, outputs and accounting
    let mut records = Vec::with_capacity(steps);
    let mut max_diff = 0.0f32;
    let mut peak_inter = 0usize;
    let mut active_total = 0usize;
    for t in 0..steps {
        let x = token(t);
        dense_step(&layout, r, x, &mut buf);
        let dense_out = buf.out.clone();
        let (_, mut record) = route(r, x)?;
        record.token = t;
        peak_inter = peak_inter.max(sparse_step(&layout, &record, x, &mut buf));
        active_total += record.active.len();
        for (a, b) in dense_out.iter().zip(&buf.out) {
            max_diff = max_diff.max((a - b).abs());
        }
        records.push(record);
    }

    let (mut dense_ns, mut sparse_ns) = (0u64, 0u64);
    if opts.timing {
        let start = Instant::now();
        for t in 0..steps {
            dense_step(&layout, r, token(t), &mut buf);
            std::hint::black_box(&buf.out);
        }
        dense_ns = start.elapsed().as_nanos() as u64;
        let start = Instant::now();
        for t in 0..steps {
            let x = token(t);
            let (_, record) = route(r, x)?;
            sparse_step(&layout, &record, x, &mut buf);
            std::hint::black_box(&buf.out);
        }
        sparse_ns = start.elapsed().as_nanos() as u64;
    }

    let fixed = 2 * num_experts + d;
    let tokens = steps as u64;
    let dense_ffn = tokens * count_flops_dense(d, d_ff);
    let dense = ExecStats {
        mode: "dense".into(),
        tokens: steps,
        flops: dense_ffn + tokens * count_flops_router(d, num_experts),
        ffn_flops: dense_ffn,
        peak_activation_elems: d_ff + fixed,
        peak_intermediate_elems: d_ff,
        wall_ns: dense_ns,
        mean_active: num_experts as f64,
    };
    let sparse = ExecStats {
        mode: "sparse".into(),
        tokens: steps,
        flops: flops_from_trace(&records, d, d_e, num_experts)?,
        ffn_flops: count_flops_sparse_ffn(d, d_e, active_total),
        peak_activation_elems: peak_inter + fixed,
        peak_intermediate_elems: peak_inter,
        wall_ns: sparse_ns,
        mean_active: active_total as f64 / steps as f64,
    };
    Ok(DecodeBench {
        dense,
        sparse,
        records,
        max_output_diff: max_diff,
    })
}

/// Output of the blocked sparse layout for one token, for equivalence
/// checks against [`crate::routing::sparse_forward`].
pub fn blocked_sparse_forward(m: &MoefiedFFN, r: &RouterState, x: &[f32]) -> Result<(Vec<f32>, ActivationRecord)> {
    if x.len() != m.d() {
        return Err(Error::shape("blocked_sparse_forward", x.len(), m.d()));
    }
    let layout = Layout::new(m);
    let mut buf = Buffers::new(m.d(), m.d_ff(), m.num_experts());
    let (_, record) = route(r, x)?;
    sparse_step(&layout, &record, x, &mut buf);
    Ok((buf.out, record))
}
