//! Lloyd's k-means with k-means++ seeding and restarts, used to turn
//! representations into pseudo labels.
//!
//! Empty-cluster policy: a cluster that loses all members is re-seeded at
//! the point farthest from its current centroid. If no point lies at a
//! positive distance (all points coincide), clustering fails with
//! [`AirError::Clustering`].

use air_tensor::Tensor;
use rand::Rng;

use crate::error::{AirError, Result};
use crate::rng::{derive_seed, rng_for, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            restarts: 10,
            iterations: 100,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    /// Number of empty-cluster re-seeds in the winning restart.
    pub reseeds: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(c, m)| (c, dist2(p, m)))
        .fold(
            (0, f64::INFINITY),
            |best, cur| if cur.1 < best.1 { cur } else { best },
        )
}

fn degenerate() -> AirError {
    AirError::Clustering("all points coincide; cannot form distinct clusters".into())
}

fn plus_plus(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].to_vec()];
    while centroids.len() < k {
        let d: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d.iter().sum();
        if total <= 0.0 {
            return Err(degenerate());
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = d.iter().rposition(|&v| v > 0.0).expect("positive distance");
        for (i, v) in d.iter().enumerate() {
            if target < *v {
                pick = i;
                break;
            }
            target -= v;
        }
        centroids.push(points[pick].to_vec());
    }
    Ok(centroids)
}

fn lloyd(points: &[&[f64]], mut centroids: Vec<Vec<f64>>, iterations: usize) -> Result<Clustering> {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments = vec![usize::MAX; points.len()];
    let mut reseeds = 0;
    for _ in 0..iterations {
        let mut changed = false;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (c, _) = nearest(p, &centroids);
            changed |= *a != c;
            *a = c;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            sums[a].iter_mut().zip(*p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] == 0 {
                let (far, d) = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, dist2(p, &centroids[c])))
                    .fold(
                        (0, -1.0),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    );
                if d <= 0.0 {
                    return Err(degenerate());
                }
                centroids[c] = points[far].to_vec();
                reseeds += 1;
                changed = true;
            } else {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    for (a, p) in assignments.iter_mut().zip(points) {
        *a = nearest(p, &centroids).0;
    }
    let mut counts = vec![0usize; k];
    assignments.iter().for_each(|&a| counts[a] += 1);
    if counts.contains(&0) {
        return Err(AirError::Clustering(
            "a cluster stayed empty after re-seeding".into(),
        ));
    }
    let inertia = assignments
        .iter()
        .zip(points)
        .map(|(&a, p)| dist2(p, &centroids[a]))
        .sum();
    Ok(Clustering {
        centroids,
        assignments,
        inertia,
        reseeds,
    })
}

/// Clusters the rows of `points`; keeps the restart with the lowest inertia.
pub fn kmeans(points: &Tensor, cfg: &KMeansConfig) -> Result<Clustering> {
    if cfg.k < 2 {
        return Err(AirError::Clustering(format!(
            "k = {} is degenerate; need k >= 2",
            cfg.k
        )));
    }
    if points.ndim() != 2 || points.rows() < cfg.k {
        return Err(AirError::Clustering(format!(
            "need at least k = {} points, got shape {:?}",
            cfg.k,
            points.shape()
        )));
    }
    let rows: Vec<&[f64]> = (0..points.rows()).map(|r| points.row(r)).collect();
    let mut best: Option<Clustering> = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut rng = rng_for(derive_seed(cfg.seed, &[stream::KMEANS]), &[restart as u64]);
        let init = plus_plus(&rows, cfg.k, &mut rng)?;
        let result = lloyd(&rows, init, cfg.iterations)?;
        if best.as_ref().is_none_or(|b| result.inertia < b.inertia) {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Fraction of points whose cluster's majority label equals their own.
pub fn purity(assignments: &[usize], labels: &[usize]) -> f64 {
    let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; classes]; k];
    for (&a, &y) in assignments.iter().zip(labels) {
        table[a][y] += 1;
    }
    let hits: usize = table
        .iter()
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .sum();
    hits as f64 / labels.len().max(1) as f64
}
