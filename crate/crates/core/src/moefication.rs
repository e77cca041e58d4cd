//! Neuron permutation via balanced k-means over input-side neuron weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ffn::{DenseFFN, MoefiedFFN};
use crate::numkit::Matrix;

pub const DEFAULT_MAX_ITERS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronFeature {
    pub neuron_index: usize,
    /// Normalized gate column followed by normalized up column.
    pub feature: Vec<f32>,
}

fn normalized(col: Vec<f32>) -> Vec<f32> {
    let norm = col.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        col
    } else {
        col.into_iter().map(|v| (v as f64 / norm) as f32).collect()
    }
}

pub fn neuron_features(ffn: &DenseFFN) -> Vec<NeuronFeature> {
    (0..ffn.d_ff())
        .map(|j| {
            let mut feature = normalized(ffn.w_gate().column(j));
            feature.extend(normalized(ffn.w_up().column(j)));
            NeuronFeature {
                neuron_index: j,
                feature,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedClustering {
    pub num_clusters: usize,
    pub capacity: usize,
    /// `assignment[n]` is the cluster of neuron `n`.
    pub assignment: Vec<usize>,
    /// Objective (sum of squared distances to assigned centroids) after
    /// each completed iteration.
    pub objective_history: Vec<f64>,
}

impl BalancedClustering {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.assignment.len() != n {
            return Err(Error::Consistency(format!(
                "assignment covers {} neurons, expected {n}",
                self.assignment.len()
            )));
        }
        if self.num_clusters == 0 || self.num_clusters * self.capacity != n {
            return Err(Error::Consistency(format!(
                "{} clusters of capacity {} do not cover {n} neurons",
                self.num_clusters, self.capacity
            )));
        }
        let mut counts = vec![0usize; self.num_clusters];
        for (neuron, &c) in self.assignment.iter().enumerate() {
            if c >= self.num_clusters {
                return Err(Error::Consistency(format!(
                    "neuron {neuron} assigned to cluster {c} of {}",
                    self.num_clusters
                )));
            }
            counts[c] += 1;
        }
        if let Some(c) = counts.iter().position(|&k| k != self.capacity) {
            return Err(Error::Consistency(format!(
                "cluster {c} has {} members, capacity is {}",
                counts[c], self.capacity
            )));
        }
        Ok(())
    }

    /// Neuron `n` goes to cluster `n / capacity`.
    pub fn contiguous(n: usize, num_clusters: usize) -> Result<Self> {
        check_divisible(n, num_clusters)?;
        let capacity = n / num_clusters;
        Ok(BalancedClustering {
            num_clusters,
            capacity,
            assignment: (0..n).map(|i| i / capacity).collect(),
            objective_history: Vec::new(),
        })
    }
}

fn check_divisible(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("expert count must be at least 1".into()));
    }
    if n == 0 || !n.is_multiple_of(k) {
        return Err(Error::Config(format!(
            "{n} neurons cannot be split evenly into {k} experts (d_ff must be divisible by the expert count)"
        )));
    }
    Ok(())
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = x as f64 - c;
            d * d
        })
        .sum()
}

fn objective(points: &[&[f32]], centroids: &[Vec<f64>], assignment: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum()
}

fn seed_centroids(points: &[&[f32]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let to_f64 = |p: &[f32]| p.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut centroids = vec![to_f64(points[chosen[0]])];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every point coincides with a centroid already
            (0..points.len()).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(pick);
        let c = to_f64(points[pick]);
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Capacity-constrained assignment: neurons with the largest gap between
/// their best and second-best cluster choose first, each taking its nearest
/// cluster that still has room.
fn greedy_assign(distances: &[Vec<f64>], capacity: usize) -> Vec<usize> {
    let k = distances.first().map_or(0, Vec::len);
    let prefs: Vec<Vec<usize>> = distances
        .iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
            order
        })
        .collect();
    let margin = |i: usize| {
        if k < 2 {
            0.0
        } else {
            distances[i][prefs[i][1]] - distances[i][prefs[i][0]]
        }
    };
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| margin(b).total_cmp(&margin(a)));

    let mut load = vec![0usize; k];
    let mut assignment = vec![0usize; distances.len()];
    for i in order {
        let c = *prefs[i]
            .iter()
            .find(|&&c| load[c] < capacity)
            .expect("total capacity equals point count");
        load[c] += 1;
        assignment[i] = c;
    }
    assignment
}

fn update_centroids(points: &[&[f32]], assignment: &[usize], k: usize, capacity: usize) -> Vec<Vec<f64>> {
    let dim = points.first().map_or(0, |p| p.len());
    let mut sums = vec![vec![0.0f64; dim]; k];
    for (p, &c) in points.iter().zip(assignment) {
        for (s, &v) in sums[c].iter_mut().zip(p.iter()) {
            *s += v as f64;
        }
    }
    for s in &mut sums {
        for v in s.iter_mut() {
            *v /= capacity as f64;
        }
    }
    sums
}

pub fn balanced_kmeans(
    features: &[NeuronFeature],
    num_clusters: usize,
    seed: u64,
    max_iters: usize,
) -> Result<BalancedClustering> {
    balanced_kmeans_with(Exec::default(), features, num_clusters, seed, max_iters)
}

/// Balanced k-means with k-means++ seeding. Stops when the assignment stops
/// changing, when a reassignment would not lower the objective, or after
/// `max_iters` iterations. The objective never increases between iterations.
pub fn balanced_kmeans_with(
    exec: Exec,
    features: &[NeuronFeature],
    num_clusters: usize,
    seed: u64,
    max_iters: usize,
) -> Result<BalancedClustering> {
    let n = features.len();
    check_divisible(n, num_clusters)?;
    let capacity = n / num_clusters;
    let points: Vec<&[f32]> = features.iter().map(|f| f.feature.as_slice()).collect();
    if let Some(bad) = features.iter().find(|f| f.feature.len() != points[0].len()) {
        return Err(Error::shape(
            "balanced_kmeans",
            points[0].len(),
            format!("neuron {} feature len {}", bad.neuron_index, bad.feature.len()),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(&points, num_clusters, &mut rng);
    let mut assignment: Option<Vec<usize>> = None;
    let mut history = Vec::new();

    for _ in 0..max_iters.max(1) {
        let distances: Vec<Vec<f64>> = exec.map(n, |i| {
            centroids.iter().map(|c| sq_dist(points[i], c)).collect()
        });
        let proposed = greedy_assign(&distances, capacity);
        if let Some(prev) = &assignment {
            if *prev == proposed {
                break;
            }
            let keep = objective(&points, &centroids, prev);
            if objective(&points, &centroids, &proposed) >= keep {
                break;
            }
        }
        let before = objective(&points, &centroids, &proposed);
        let updated = update_centroids(&points, &proposed, num_clusters, capacity);
        let after = objective(&points, &updated, &proposed);
        if after <= before {
            centroids = updated;
            history.push(after);
        } else {
            history.push(before);
        }
        assignment = Some(proposed);
    }

    let clustering = BalancedClustering {
        num_clusters,
        capacity,
        assignment: assignment.expect("at least one iteration runs"),
        objective_history: history,
    };
    clustering.validate(n)?;
    Ok(clustering)
}

/// Permutes neurons so each cluster occupies a contiguous block (members in
/// ascending neuron order) and slices the expert blocks.
pub fn build_moefied(ffn: &DenseFFN, clustering: &BalancedClustering) -> Result<MoefiedFFN> {
    clustering.validate(ffn.d_ff())?;
    let mut next = (0..clustering.num_clusters)
        .map(|c| c * clustering.capacity)
        .collect::<Vec<_>>();
    let mut perm = vec![0usize; ffn.d_ff()];
    for (neuron, &c) in clustering.assignment.iter().enumerate() {
        perm[neuron] = next[c];
        next[c] += 1;
    }
    MoefiedFFN::from_dense(ffn, perm, clustering.num_clusters)
}

/// A `d × E` router whose column `e` points along the mean normalized gate
/// column of expert `e`, scaled to length `scale`. Serves as the fixed
/// reference gating that produces distillation targets.
pub fn centroid_router(m: &MoefiedFFN, scale: f32) -> Matrix {
    let (d, num_experts) = (m.d(), m.num_experts());
    let mut w = Matrix::zeros(d, num_experts);
    for (e, expert) in m.experts().iter().enumerate() {
        let mut mean = vec![0.0f64; d];
        for j in 0..expert.width() {
            let col = normalized(expert.w_gate().column(j));
            for (acc, v) in mean.iter_mut().zip(col) {
                *acc += v as f64;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (i, v) in mean.iter().enumerate() {
                w.set(i, e, (v / norm * scale as f64) as f32);
            }
        }
    }
    w
}
