//! Gated (SwiGLU-style) feed-forward layer and its expert-block form.
//!
//! `FFN(x) = (silu(x·W_gate) ⊙ x·W_up) · W_down`. Because the gate product is
//! elementwise over the intermediate dimension, permuting intermediate
//! neurons and splitting them into contiguous blocks gives experts whose
//! outputs sum back to the dense output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numkit::{silu_scalar, vecmat, Matrix, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseFFN {
    w_gate: Matrix,
    w_up: Matrix,
    w_down: Matrix,
}

impl DenseFFN {
    pub fn new(w_gate: Matrix, w_up: Matrix, w_down: Matrix) -> Result<Self> {
        if w_gate.shape() != w_up.shape() {
            return Err(Error::shape(
                "DenseFFN::new (w_gate vs w_up)",
                w_gate.shape_str(),
                w_up.shape_str(),
            ));
        }
        if w_down.shape() != (w_gate.cols(), w_gate.rows()) {
            return Err(Error::shape(
                "DenseFFN::new (w_gate vs w_down)",
                w_gate.shape_str(),
                w_down.shape_str(),
            ));
        }
        Ok(DenseFFN {
            w_gate,
            w_up,
            w_down,
        })
    }

    pub fn zeros(d: usize, d_ff: usize) -> Self {
        DenseFFN {
            w_gate: Matrix::zeros(d, d_ff),
            w_up: Matrix::zeros(d, d_ff),
            w_down: Matrix::zeros(d_ff, d),
        }
    }

    /// Hidden width `d`.
    pub fn d(&self) -> usize {
        self.w_gate.rows()
    }

    /// Intermediate width `d_ff`.
    pub fn d_ff(&self) -> usize {
        self.w_gate.cols()
    }

    pub fn w_gate(&self) -> &Matrix {
        &self.w_gate
    }

    pub fn w_up(&self) -> &Matrix {
        &self.w_up
    }

    pub fn w_down(&self) -> &Matrix {
        &self.w_down
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vector> {
        gated_forward(&self.w_gate, &self.w_up, &self.w_down, x)
    }

    /// Row-wise forward over a token batch.
    pub fn forward_batch(&self, exec: Exec, xs: &Matrix) -> Result<Matrix> {
        map_rows(exec, xs, self.d(), |x| self.forward(x))
    }
}

pub fn dense_forward(ffn: &DenseFFN, x: &[f32]) -> Result<Vector> {
    ffn.forward(x)
}

fn gated_forward(w_gate: &Matrix, w_up: &Matrix, w_down: &Matrix, x: &[f32]) -> Result<Vector> {
    let g = vecmat(x, w_gate)?;
    let u = vecmat(x, w_up)?;
    let h: Vec<f32> = g.iter().zip(&u).map(|(&a, &b)| silu_scalar(a) * b).collect();
    vecmat(&h, w_down)
}

pub(crate) fn map_rows<F>(exec: Exec, xs: &Matrix, d: usize, f: F) -> Result<Matrix>
where
    F: Fn(&[f32]) -> Result<Vector> + Sync + Send,
{
    if xs.cols() != d {
        return Err(Error::shape("batch forward", xs.shape_str(), format!("Nx{d}")));
    }
    let rows = exec.map(xs.rows(), |i| f(xs.row(i)));
    let mut data = Vec::with_capacity(xs.rows() * d);
    for r in rows {
        data.extend(r?);
    }
    Matrix::from_vec(xs.rows(), d, data)
}

/// One contiguous block of `d_e` intermediate neurons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertBlock {
    w_gate: Matrix,
    w_up: Matrix,
    w_down: Matrix,
}

impl ExpertBlock {
    pub fn new(w_gate: Matrix, w_up: Matrix, w_down: Matrix) -> Result<Self> {
        let dense = DenseFFN::new(w_gate, w_up, w_down)?;
        Ok(ExpertBlock {
            w_gate: dense.w_gate,
            w_up: dense.w_up,
            w_down: dense.w_down,
        })
    }

    pub fn d(&self) -> usize {
        self.w_gate.rows()
    }

    pub fn width(&self) -> usize {
        self.w_gate.cols()
    }

    pub fn w_gate(&self) -> &Matrix {
        &self.w_gate
    }

    pub fn w_up(&self) -> &Matrix {
        &self.w_up
    }

    pub fn w_down(&self) -> &Matrix {
        &self.w_down
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vector> {
        gated_forward(&self.w_gate, &self.w_up, &self.w_down, x)
    }

    /// The block viewed as a standalone dense layer of width `d_e`.
    pub fn to_dense(&self) -> DenseFFN {
        DenseFFN {
            w_gate: self.w_gate.clone(),
            w_up: self.w_up.clone(),
            w_down: self.w_down.clone(),
        }
    }
}

pub fn expert_forward(e: &ExpertBlock, x: &[f32]) -> Result<Vector> {
    e.forward(x)
}

/// A dense layer rewritten as `E` equal-width expert blocks.
///
/// `perm[n]` is the position of original neuron `n` in the permuted
/// intermediate dimension; expert `e` owns positions `[e·d_e, (e+1)·d_e)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoefiedFFN {
    perm: Vec<usize>,
    experts: Vec<ExpertBlock>,
}

impl MoefiedFFN {
    /// Slices a dense layer into experts according to `perm`.
    pub fn from_dense(ffn: &DenseFFN, perm: Vec<usize>, num_experts: usize) -> Result<Self> {
        let d_ff = ffn.d_ff();
        if num_experts == 0 || !d_ff.is_multiple_of(num_experts) {
            return Err(Error::Config(format!(
                "d_ff = {d_ff} is not divisible by expert count {num_experts}"
            )));
        }
        let inverse = invert_permutation(&perm, d_ff)?;
        let d_e = d_ff / num_experts;
        let experts = (0..num_experts)
            .map(|e| {
                let neurons = &inverse[e * d_e..(e + 1) * d_e];
                ExpertBlock::new(
                    ffn.w_gate.select_columns(neurons),
                    ffn.w_up.select_columns(neurons),
                    ffn.w_down.select_rows(neurons),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MoefiedFFN { perm, experts })
    }

    /// Reassembles from stored blocks; `perm` must be a bijection on the
    /// total width.
    pub fn from_parts(perm: Vec<usize>, experts: Vec<ExpertBlock>) -> Result<Self> {
        let Some(first) = experts.first() else {
            return Err(Error::Consistency("no expert blocks".into()));
        };
        let (d, d_e) = (first.d(), first.width());
        if let Some(bad) = experts.iter().position(|e| e.d() != d || e.width() != d_e) {
            return Err(Error::Consistency(format!(
                "expert {bad} has shape {}x{}, expected {d}x{d_e}",
                experts[bad].d(),
                experts[bad].width()
            )));
        }
        invert_permutation(&perm, d_e * experts.len())?;
        Ok(MoefiedFFN { perm, experts })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn expert_width(&self) -> usize {
        self.experts[0].width()
    }

    pub fn d(&self) -> usize {
        self.experts[0].d()
    }

    pub fn d_ff(&self) -> usize {
        self.expert_width() * self.num_experts()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn experts(&self) -> &[ExpertBlock] {
        &self.experts
    }

    pub fn expert(&self, e: usize) -> &ExpertBlock {
        &self.experts[e]
    }

    /// Concatenates the blocks back into permuted dense weights.
    pub fn permuted_dense(&self) -> DenseFFN {
        let (d, d_e) = (self.d(), self.expert_width());
        let d_ff = self.d_ff();
        let w_gate = Matrix::from_fn(d, d_ff, |i, j| self.experts[j / d_e].w_gate.get(i, j % d_e));
        let w_up = Matrix::from_fn(d, d_ff, |i, j| self.experts[j / d_e].w_up.get(i, j % d_e));
        let w_down = Matrix::from_fn(d_ff, d, |i, j| self.experts[i / d_e].w_down.get(i % d_e, j));
        DenseFFN {
            w_gate,
            w_up,
            w_down,
        }
    }

    /// Undoes the permutation, recovering the original dense weights.
    pub fn to_dense(&self) -> DenseFFN {
        let permuted = self.permuted_dense();
        let cols = self.perm.clone();
        DenseFFN {
            w_gate: permuted.w_gate.select_columns(&cols),
            w_up: permuted.w_up.select_columns(&cols),
            w_down: permuted.w_down.select_rows(&cols),
        }
    }

    pub fn decomposed_forward(&self, x: &[f32]) -> Result<Vector> {
        if x.len() != self.d() {
            return Err(Error::shape("decomposed_forward", x.len(), self.d()));
        }
        let mut out = vec![0.0f32; self.d()];
        for expert in &self.experts {
            for (o, y) in out.iter_mut().zip(expert.forward(x)?) {
                *o += y;
            }
        }
        Ok(out)
    }
}

pub fn decomposed_forward(m: &MoefiedFFN, x: &[f32]) -> Result<Vector> {
    m.decomposed_forward(x)
}

/// Returns `inv` with `inv[perm[n]] = n`, rejecting anything that is not a
/// bijection on `0..n`.
pub fn invert_permutation(perm: &[usize], n: usize) -> Result<Vec<usize>> {
    if perm.len() != n {
        return Err(Error::Consistency(format!(
            "permutation has length {}, expected {n}",
            perm.len()
        )));
    }
    let mut inv = vec![usize::MAX; n];
    for (neuron, &pos) in perm.iter().enumerate() {
        if pos >= n || inv[pos] != usize::MAX {
            return Err(Error::Consistency(format!(
                "permutation is not a bijection (neuron {neuron} -> {pos})"
            )));
        }
        inv[pos] = neuron;
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::relative_l2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_ffn(rng: &mut ChaCha8Rng, d: usize, d_ff: usize) -> DenseFFN {
        DenseFFN::new(
            random_matrix(rng, d, d_ff),
            random_matrix(rng, d, d_ff),
            random_matrix(rng, d_ff, d),
        )
        .unwrap()
    }

    #[allow(clippy::needless_range_loop)]
    fn oracle_forward(ffn: &DenseFFN, x: &[f32]) -> Vec<f64> {
        let (d, d_ff) = (ffn.d(), ffn.d_ff());
        let mut h = vec![0.0f64; d_ff];
        for (j, hj) in h.iter_mut().enumerate() {
            let (mut g, mut u) = (0.0f64, 0.0f64);
            for k in 0..d {
                g += x[k] as f64 * ffn.w_gate().get(k, j) as f64;
                u += x[k] as f64 * ffn.w_up().get(k, j) as f64;
            }
            *hj = g / (1.0 + (-g).exp()) * u;
        }
        (0..d)
            .map(|c| (0..d_ff).map(|j| h[j] * ffn.w_down().get(j, c) as f64).sum())
            .collect()
    }

    #[test]
    fn zero_weights_give_zero() {
        let ffn = DenseFFN::zeros(4, 8);
        assert_eq!(ffn.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn scalar_closed_form() {
        let one = || Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let ffn = DenseFFN::new(one(), one(), one()).unwrap();
        let y = ffn.forward(&[1.0]).unwrap();
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((y[0] as f64 - expected).abs() < 1e-6);
        assert!((y[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn dense_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ffn = random_ffn(&mut rng, 8, 32);
        let x: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = ffn.forward(&x).unwrap();
        let oracle = oracle_forward(&ffn, &x);
        for (a, b) in y.iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-4 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn dimension_mismatch() {
        let ffn = DenseFFN::zeros(4, 8);
        assert!(ffn.forward(&[1.0; 3]).is_err());
        assert!(DenseFFN::new(Matrix::zeros(4, 8), Matrix::zeros(4, 7), Matrix::zeros(8, 4)).is_err());
        assert!(DenseFFN::new(Matrix::zeros(4, 8), Matrix::zeros(4, 8), Matrix::zeros(8, 3)).is_err());
    }

    #[test]
    fn single_expert_is_bitwise_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ffn = random_ffn(&mut rng, 6, 12);
        let m = MoefiedFFN::from_dense(&ffn, (0..12).collect(), 1).unwrap();
        let x: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dense = ffn.forward(&x).unwrap();
        assert_eq!(m.expert(0).forward(&x).unwrap(), dense);
        assert_eq!(m.decomposed_forward(&x).unwrap(), dense);
    }

    #[test]
    fn expert_equals_its_dense_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ffn = random_ffn(&mut rng, 6, 12);
        let m = MoefiedFFN::from_dense(&ffn, (0..12).rev().collect(), 3).unwrap();
        let x: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        for e in m.experts() {
            assert_eq!(e.forward(&x).unwrap(), e.to_dense().forward(&x).unwrap());
        }
        let zero = ExpertBlock::new(Matrix::zeros(6, 4), Matrix::zeros(6, 4), Matrix::zeros(4, 6)).unwrap();
        assert_eq!(zero.forward(&x).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn decomposition_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ffn = random_ffn(&mut rng, 16, 64);
        let x: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dense = ffn.forward(&x).unwrap();
        let mut shuffled: Vec<usize> = (0..64).collect();
        for i in (1..64).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        for perm in [(0..64).collect::<Vec<_>>(), shuffled] {
            for e in [2, 4, 8] {
                let m = MoefiedFFN::from_dense(&ffn, perm.clone(), e).unwrap();
                let y = m.decomposed_forward(&x).unwrap();
                assert!(relative_l2(&y, &dense) <= 1e-4);
                assert_eq!(m.to_dense(), ffn);
            }
        }
    }

    #[test]
    fn rejects_bad_partitions() {
        let ffn = DenseFFN::zeros(2, 6);
        assert!(MoefiedFFN::from_dense(&ffn, (0..6).collect(), 4).is_err());
        assert!(MoefiedFFN::from_dense(&ffn, vec![0, 0, 1, 2, 3, 4], 2).is_err());
        assert!(invert_permutation(&[0, 1, 5], 3).is_err());
    }
}
