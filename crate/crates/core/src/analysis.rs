//! Reconstruction analyses over a fixed probe set: forced top-k curves,
//! single-checkpoint threshold sweeps and side-by-side method tables.
//!
//! Errors are always measured against the router's own all-expert output
//! for the same probe.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ffn::MoefiedFFN;
use crate::numkit::{sum_sq_diff, Matrix};
use crate::routing::{route, sparsity_metric, ActivationRecord, GateMode, RouterState};

/// One sparse layer: expert blocks plus the router that drives them.
#[derive(Clone, Copy, Debug)]
pub struct LayerRef<'a> {
    pub moe: &'a MoefiedFFN,
    pub router: &'a RouterState,
}

impl<'a> LayerRef<'a> {
    pub fn new(moe: &'a MoefiedFFN, router: &'a RouterState) -> Result<Self> {
        if moe.num_experts() != router.num_experts() || moe.d() != router.d() {
            return Err(Error::shape(
                "layer",
                router.weights().shape_str(),
                format!("{}x{}", moe.d(), moe.num_experts()),
            ));
        }
        Ok(LayerRef { moe, router })
    }
}

/// Per-probe expert outputs and gates, computed once and reused across every
/// threshold or budget.
struct ProbeCache {
    gates: Vec<f32>,
    expert_out: Vec<Vec<f32>>,
    reference: Vec<f32>,
}

impl ProbeCache {
    fn build(layer: LayerRef<'_>, x: &[f32]) -> Result<Self> {
        let (_, record) = route(layer.router, x)?;
        let expert_out = layer
            .moe
            .experts()
            .iter()
            .map(|e| e.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let all: Vec<usize> = (0..expert_out.len()).collect();
        let mut cache = ProbeCache {
            gates: record.gates,
            expert_out,
            reference: Vec::new(),
        };
        cache.reference = cache.aggregate(&all);
        Ok(cache)
    }

    /// Same accumulation order as [`crate::routing::gated_sum`].
    fn aggregate(&self, active: &[usize]) -> Vec<f32> {
        let mut mask = vec![false; self.expert_out.len()];
        active.iter().for_each(|&e| mask[e] = true);
        let mut out = vec![0.0f32; self.expert_out[0].len()];
        for (e, y) in self.expert_out.iter().enumerate() {
            if mask[e] {
                for (o, &v) in out.iter_mut().zip(y) {
                    *o += self.gates[e] * v;
                }
            }
        }
        out
    }
}

fn check_probes(layers: &[LayerRef<'_>], probes: &Matrix) -> Result<()> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Config("no layers to analyse".into()))?;
    if layers.iter().any(|l| l.moe.d() != first.moe.d()) {
        return Err(Error::Config("layers disagree on hidden width".into()));
    }
    if probes.cols() != first.moe.d() {
        return Err(Error::shape("probes", probes.shape_str(), format!("Nx{}", first.moe.d())));
    }
    if probes.rows() == 0 {
        return Err(Error::Config("probe set is empty".into()));
    }
    Ok(())
}

/// Cache for every (layer, probe) pair, layer-major.
fn build_caches(exec: Exec, layers: &[LayerRef<'_>], probes: &Matrix) -> Result<Vec<Vec<ProbeCache>>> {
    layers
        .iter()
        .map(|&layer| {
            exec.map(probes.rows(), |i| ProbeCache::build(layer, probes.row(i)))
                .into_iter()
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKCurve {
    pub ks: Vec<usize>,
    pub mse_per_k: Vec<f64>,
}

fn validate_ks(ks: &[usize], num_experts: usize) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::Range("no budgets given".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > num_experts) {
        return Err(Error::Range(format!("k = {k} outside [1, {num_experts}]")));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Range(format!("budgets must be strictly increasing: {ks:?}")));
    }
    Ok(())
}

pub fn topk_mse_curve(m: &MoefiedFFN, r: &RouterState, probes: &Matrix, ks: &[usize]) -> Result<TopKCurve> {
    topk_mse_curve_layers(Exec::default(), &[LayerRef::new(m, r)?], probes, ks)
}

/// Keeps the `k` best experts per token (by probability, or by gate for
/// gate-ranked routers) and reports the mean squared error against the
/// all-expert output, averaged over probes, layers and output coordinates.
pub fn topk_mse_curve_layers(
    exec: Exec,
    layers: &[LayerRef<'_>],
    probes: &Matrix,
    ks: &[usize],
) -> Result<TopKCurve> {
    check_probes(layers, probes)?;
    for l in layers {
        validate_ks(ks, l.router.num_experts())?;
    }
    let caches = build_caches(exec, layers, probes)?;
    let mut mse_per_k = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut sq = 0.0f64;
        let mut count = 0usize;
        for (layer, cache) in layers.iter().zip(&caches) {
            let forced = layer.router.forced_topk(k)?;
            let per_probe = exec.map(probes.rows(), |i| -> Result<f64> {
                let (_, record) = route(&forced, probes.row(i))?;
                let y = cache[i].aggregate(&record.active);
                Ok(sum_sq_diff(&y, &cache[i].reference))
            });
            for v in per_probe {
                sq += v?;
            }
            count += probes.rows() * layer.moe.d();
        }
        mse_per_k.push(sq / count as f64);
    }
    Ok(TopKCurve {
        ks: ks.to_vec(),
        mse_per_k,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub tau: f64,
    pub sparsity: f64,
    pub mean_active: f64,
    pub recon_mse: f64,
    pub flops_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierReport {
    pub points: Vec<FrontierPoint>,
    /// Threshold pairs `(a, b)` with `a < b` where the larger threshold gave
    /// the larger reconstruction error. Reported, not enforced.
    pub recon_monotonicity_violations: Vec<(f64, f64)>,
}

impl FrontierReport {
    pub const CSV_HEADER: &'static str = "tau,sparsity,mean_active,recon_mse,flops_ratio";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for p in &self.points {
            writeln!(
                w,
                "{},{},{},{},{}",
                p.tau, p.sparsity, p.mean_active, p.recon_mse, p.flops_ratio
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.points)?)
    }
}

pub fn tau_sweep(m: &MoefiedFFN, r: &RouterState, probes: &Matrix, taus: &[f64]) -> Result<FrontierReport> {
    tau_sweep_layers(Exec::default(), &[LayerRef::new(m, r)?], probes, taus)
}

/// Evaluates one trained router at every threshold in `taus` without any
/// retraining, using cumulative-mass selection.
pub fn tau_sweep_layers(
    exec: Exec,
    layers: &[LayerRef<'_>],
    probes: &Matrix,
    taus: &[f64],
) -> Result<FrontierReport> {
    if taus.is_empty() {
        return Err(Error::Config("no thresholds to sweep".into()));
    }
    if let Some(t) = taus.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::Config(format!("threshold {t} must be positive")));
    }
    check_probes(layers, probes)?;
    let caches = build_caches(exec, layers, probes)?;
    let num_experts = layers[0].router.num_experts();
    if layers.iter().any(|l| l.router.num_experts() != num_experts) {
        return Err(Error::Config("layers disagree on expert count".into()));
    }

    let mut points = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut records = Vec::with_capacity(probes.rows() * layers.len());
        let mut sq = 0.0f64;
        let mut count = 0usize;
        for (li, (layer, cache)) in layers.iter().zip(&caches).enumerate() {
            let router = layer.router.with_mode(GateMode::CumulativeMass).with_tau(tau);
            let per_probe = exec.map(probes.rows(), |i| -> Result<(ActivationRecord, f64)> {
                let (_, mut record) = route(&router, probes.row(i))?;
                let y = cache[i].aggregate(&record.active);
                record.token = i;
                record.layer = li;
                Ok((record, sum_sq_diff(&y, &cache[i].reference)))
            });
            for item in per_probe {
                let (record, err) = item?;
                sq += err;
                records.push(record);
            }
            count += probes.rows() * layer.moe.d();
        }
        let sparsity = sparsity_metric(&records, layers.len(), num_experts)?;
        let mean_active = records.iter().map(|r| r.active.len()).sum::<usize>() as f64 / records.len() as f64;
        points.push(FrontierPoint {
            tau,
            sparsity,
            mean_active,
            recon_mse: sq / count as f64,
            flops_ratio: mean_active / num_experts as f64,
        });
    }

    let mut violations = Vec::new();
    for a in 0..points.len() {
        for b in 0..points.len() {
            if points[a].tau < points[b].tau && points[b].recon_mse > points[a].recon_mse {
                violations.push((points[a].tau, points[b].tau));
            }
        }
    }
    Ok(FrontierReport {
        points,
        recon_monotonicity_violations: violations,
    })
}

/// Per-budget errors of several methods side by side. With two or more
/// methods, `ratios[m][i]` is method `m + 1` divided by the first method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub ks: Vec<usize>,
    pub methods: Vec<String>,
    pub mse: Vec<Vec<f64>>,
    pub ratios: Vec<Vec<f64>>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == den {
        1.0
    } else {
        num / den
    }
}

pub fn compare_methods(curves: &[(String, TopKCurve)]) -> Result<MethodComparison> {
    let Some((_, first)) = curves.first() else {
        return Err(Error::Alignment("no curves to compare".into()));
    };
    for (name, curve) in curves {
        if curve.ks != first.ks || curve.mse_per_k.len() != curve.ks.len() {
            return Err(Error::Alignment(format!(
                "method `{name}` has budgets {:?}, expected {:?}",
                curve.ks, first.ks
            )));
        }
        if name.is_empty() || name.contains([',', '"', '\n', '\r']) {
            return Err(Error::Alignment(format!("method name {name:?} is not a valid CSV column")));
        }
    }
    let mse: Vec<Vec<f64>> = curves.iter().map(|(_, c)| c.mse_per_k.clone()).collect();
    let ratios = mse[1..]
        .iter()
        .map(|row| row.iter().zip(&mse[0]).map(|(&a, &b)| ratio(a, b)).collect())
        .collect();
    Ok(MethodComparison {
        ks: first.ks.clone(),
        methods: curves.iter().map(|(n, _)| n.clone()).collect(),
        mse,
        ratios,
    })
}

impl MethodComparison {
    /// `k,mse_<method>...` followed by `ratio_<method>_vs_<first>` columns
    /// when more than one method is present.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = vec!["k".to_string()];
        header.extend(self.methods.iter().map(|m| format!("mse_{m}")));
        header.extend(
            self.methods[1..]
                .iter()
                .map(|m| format!("ratio_{m}_vs_{}", self.methods[0])),
        );
        writeln!(w, "{}", header.join(","))?;
        for (i, k) in self.ks.iter().enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(self.mse.iter().map(|m| m[i].to_string()));
            row.extend(self.ratios.iter().map(|r| r[i].to_string()));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }
}
