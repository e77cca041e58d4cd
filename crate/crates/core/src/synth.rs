//! Seeded synthetic workloads: token streams drawn from a Gaussian mixture
//! and dense layers whose intermediate neurons respond to mixture
//! components, so routing has structure worth learning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffn::DenseFFN;
use crate::numkit::Matrix;

/// Anything that can hand out batches of token representations.
pub trait TokenSource {
    fn dim(&self) -> usize;
    fn sample(&mut self, n: usize) -> Matrix;
    /// Parameters needed to reproduce the stream.
    fn describe(&self) -> serde_json::Value;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub d: usize,
    pub d_ff: usize,
    pub num_layers: usize,
    pub components: usize,
    pub probes: usize,
    /// Norm of each mixture center.
    pub center_norm: f32,
    /// Per-coordinate standard deviation of token noise.
    pub token_noise: f32,
    /// Norm of the component direction in each gate/up column.
    pub weight_align: f32,
    /// Norm of the random part of each gate/up column.
    pub weight_noise: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d: 32,
            d_ff: 128,
            num_layers: 1,
            components: 16,
            probes: 256,
            center_norm: 2.0,
            token_noise: 0.15,
            weight_align: 1.5,
            weight_noise: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_ff == 0 || self.num_layers == 0 || self.components == 0 {
            return Err(Error::Config(format!(
                "d, d_ff, layers and components must be positive (got d={}, d_ff={}, layers={}, components={})",
                self.d, self.d_ff, self.num_layers, self.components
            )));
        }
        let finite = [self.center_norm, self.token_noise, self.weight_align, self.weight_noise];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("synthetic scales must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    StandardNormal.sample(rng)
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..d).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Isotropic Gaussian mixture with equally weighted components.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    centers: Matrix,
    noise_std: f32,
    seed: u64,
    rng: ChaCha8Rng,
}

impl GaussianMixture {
    pub fn new(centers: Matrix, noise_std: f32, seed: u64) -> Result<Self> {
        if centers.rows() == 0 || centers.cols() == 0 {
            return Err(Error::Config("mixture needs at least one center".into()));
        }
        if !(noise_std.is_finite() && noise_std >= 0.0) {
            return Err(Error::Config(format!("mixture noise must be non-negative, got {noise_std}")));
        }
        Ok(GaussianMixture {
            centers,
            noise_std,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn noise_std(&self) -> f32 {
        self.noise_std
    }
}

impl TokenSource for GaussianMixture {
    fn dim(&self) -> usize {
        self.centers.cols()
    }

    fn sample(&mut self, n: usize) -> Matrix {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let c = self.rng.random_range(0..self.centers.rows());
            for k in 0..d {
                data.push(self.centers.get(c, k) + self.noise_std * gaussian(&mut self.rng));
            }
        }
        Matrix::from_vec(n, d, data).expect("finite mixture samples")
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "gaussian_mixture",
            "components": self.centers.rows(),
            "dim": self.dim(),
            "noise_std": self.noise_std,
            "seed": self.seed,
        })
    }
}

/// Draws rows of a fixed token matrix uniformly with replacement.
#[derive(Clone, Debug)]
pub struct ResampleRows {
    tokens: Matrix,
    seed: u64,
    rng: ChaCha8Rng,
}

impl ResampleRows {
    pub fn new(tokens: Matrix, seed: u64) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::Config("cannot resample from an empty token set".into()));
        }
        Ok(ResampleRows {
            tokens,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl TokenSource for ResampleRows {
    fn dim(&self) -> usize {
        self.tokens.cols()
    }

    fn sample(&mut self, n: usize) -> Matrix {
        let rows: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..self.tokens.rows())).collect();
        self.tokens.select_rows(&rows)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "resample_rows",
            "rows": self.tokens.rows(),
            "seed": self.seed,
        })
    }
}

/// A complete synthetic workload.
#[derive(Clone, Debug)]
pub struct SynthModel {
    pub layers: Vec<DenseFFN>,
    pub centers: Matrix,
    pub probes: Matrix,
    pub config: SynthConfig,
}

impl SynthModel {
    /// Token source for training, seeded independently of the probes.
    pub fn token_source(&self, seed: u64) -> Result<GaussianMixture> {
        GaussianMixture::new(self.centers.clone(), self.config.token_noise, seed)
    }
}

/// Generates layers, mixture centers and probe tokens from `cfg.seed`.
///
/// Each intermediate neuron is tied to one mixture component: its gate and
/// up columns point along that component's center direction plus noise.
/// Neuron-to-component ties are shuffled so the block structure must be
/// recovered by clustering.
pub fn generate(cfg: &SynthConfig) -> Result<SynthModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let directions: Vec<Vec<f32>> = (0..cfg.components).map(|_| unit_vector(&mut rng, cfg.d)).collect();
    let centers = Matrix::from_fn(cfg.components, cfg.d, |c, k| directions[c][k] * cfg.center_norm);

    let noise_scale = cfg.weight_noise / (cfg.d as f32).sqrt();
    let down_scale = 1.0 / (cfg.d_ff as f32).sqrt();
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for _ in 0..cfg.num_layers {
        let mut owner: Vec<usize> = (0..cfg.d_ff).map(|j| j % cfg.components).collect();
        for i in (1..owner.len()).rev() {
            owner.swap(i, rng.random_range(0..=i));
        }
        let column = |rng: &mut ChaCha8Rng, c: usize| -> Vec<f32> {
            directions[c]
                .iter()
                .map(|&u| cfg.weight_align * u + noise_scale * gaussian(rng))
                .collect()
        };
        let gate_cols: Vec<Vec<f32>> = owner.iter().map(|&c| column(&mut rng, c)).collect();
        let up_cols: Vec<Vec<f32>> = owner.iter().map(|&c| column(&mut rng, c)).collect();
        let w_gate = Matrix::from_fn(cfg.d, cfg.d_ff, |k, j| gate_cols[j][k]);
        let w_up = Matrix::from_fn(cfg.d, cfg.d_ff, |k, j| up_cols[j][k]);
        let w_down = Matrix::from_fn(cfg.d_ff, cfg.d, |_, _| down_scale * gaussian(&mut rng));
        layers.push(DenseFFN::new(w_gate, w_up, w_down)?);
    }

    let mut probe_source = GaussianMixture::new(centers.clone(), cfg.token_noise, rng.random())?;
    let probes = probe_source.sample(cfg.probes);
    Ok(SynthModel {
        layers,
        centers,
        probes,
        config: cfg.clone(),
    })
}

/// Small random router weights (`N(0, scale²)`), the untrained starting point.
pub fn random_router(d: usize, num_experts: usize, scale: f32, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(d, num_experts, |_, _| scale * gaussian(&mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            seed: 7,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.layers, b.layers);
        assert_eq!(a.probes, b.probes);
        assert_eq!(a.probes.shape(), (256, 32));
    }

    #[test]
    fn mixture_stream_is_seeded() {
        let model = generate(&SynthConfig::default()).unwrap();
        let mut s1 = model.token_source(3).unwrap();
        let mut s2 = model.token_source(3).unwrap();
        assert_eq!(s1.sample(10), s2.sample(10));
        assert_eq!(s1.describe()["noise_std"], serde_json::json!(0.15f32));
    }

    #[test]
    fn resampling_draws_existing_rows() {
        let tokens = Matrix::from_fn(5, 3, |i, j| (i * 3 + j) as f32);
        let mut src = ResampleRows::new(tokens.clone(), 1).unwrap();
        let batch = src.sample(20);
        for i in 0..20 {
            assert!((0..5).any(|r| tokens.row(r) == batch.row(i)));
        }
    }

    #[test]
    fn rejects_zero_sizes() {
        let cfg = SynthConfig {
            d: 0,
            ..SynthConfig::default()
        };
        assert!(generate(&cfg).is_err());
    }
}
