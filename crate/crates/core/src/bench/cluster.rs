//! Grouping devices by their throughput profile with k-means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::matrix::ThroughputMatrix;

pub const MAX_ITERATIONS: usize = 100;
/// Independent seedings per call; the lowest final inertia wins.
pub const RESTARTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("k={k} exceeds the {devices} devices")]
    KTooLarge { k: usize, devices: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("column {0} has no measured cell")]
    EmptyColumn(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster of each device row.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after each iteration of the winning run.
    pub inertia_history: Vec<f64>,
}

impl Clustering {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }

    pub fn iterations(&self) -> usize {
        self.inertia_history.len()
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// `log1p` of every cell, missing cells replaced by their column's median
/// feature.
pub fn features(m: &ThroughputMatrix) -> Result<Vec<Vec<f64>>, ClusterError> {
    let (rows, cols) = (m.rows().len(), m.cols().len());
    let mut out = vec![vec![0.0; cols]; rows];
    for c in 0..cols {
        let mut present: Vec<f64> = (0..rows).filter_map(|r| m.get(r, c)).map(f64::ln_1p).collect();
        if present.is_empty() {
            return Err(ClusterError::EmptyColumn(m.cols()[c].clone()));
        }
        let fill = median(&mut present);
        for (r, row) in out.iter_mut().enumerate() {
            row[c] = m.get(r, c).map(f64::ln_1p).unwrap_or(fill);
        }
    }
    Ok(out)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, dist2(x, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// k-means++ seeding.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            d.iter()
                .position(|&w| {
                    t -= w;
                    t < 0.0 && w > 0.0
                })
                .unwrap_or_else(|| d.iter().rposition(|&w| w > 0.0).unwrap_or(0))
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> Clustering {
    let mut assignment = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for (p, a) in points.iter().zip(assignment.iter_mut()) {
            let (c, _) = nearest(p, &centroids);
            changed |= *a != c;
            *a = c;
        }
        for (j, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assignment).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
            // An emptied cluster keeps its centroid.
            if !members.is_empty() {
                for (d, v) in centroid.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        history.push(points.iter().zip(&assignment).map(|(p, &a)| dist2(p, &centroids[a])).sum());
        if !changed {
            break;
        }
    }
    Clustering {
        assignment,
        centroids,
        inertia_history: history,
    }
}

/// Cluster the device rows of `m` into `k` groups. Deterministic for a
/// given seed.
pub fn cluster_devices(m: &ThroughputMatrix, k: usize, seed: u64) -> Result<Clustering, ClusterError> {
    let devices = m.rows().len();
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if k > devices {
        return Err(ClusterError::KTooLarge { k, devices });
    }
    let points = features(m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..RESTARTS {
        let run = lloyd(&points, seed_centroids(&points, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.inertia() < b.inertia()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}
