//! k-means (k-means++ seeding, Lloyd iterations) and the mixture start it yields.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gmm::{Floors, Sample, ThetaParams};

const MAX_ITERS: usize = 300;
const TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<DVector<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn nearest(x: &DVector<f64>, centroids: &[DVector<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = (x - m).norm_squared();
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus(points: &[&DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|x| (*x - &centroids[0]).norm_squared()).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, x) in dist.iter_mut().zip(points) {
            *d = d.min((*x - &c).norm_squared());
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm from k-means++ seeds. An empty cluster is reseeded at
/// the point farthest from its centroid once; a second empty cluster fails.
pub fn kmeans(data: &[Sample], k: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::KMeans("K must be positive".into()));
    }
    if data.len() < k {
        return Err(Error::KMeans(format!("{} points for {k} clusters", data.len())));
    }
    let p = data[0].x.len();
    if data.iter().any(|s| s.x.len() != p) {
        return Err(Error::validation("samples differ in dimension"));
    }
    let points: Vec<&DVector<f64>> = data.iter().map(|s| &s.x).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus(&points, k, &mut rng);
    let mut assignments = vec![0; points.len()];
    let mut reseeded = false;
    let mut iterations = 0;
    while iterations < MAX_ITERS {
        iterations += 1;
        for (a, x) in assignments.iter_mut().zip(&points) {
            *a = nearest(x, &centroids).0;
        }
        let mut sums = vec![DVector::zeros(p); k];
        let mut counts = vec![0usize; k];
        for (&a, x) in assignments.iter().zip(&points) {
            sums[a] += *x;
            counts[a] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            if reseeded {
                return Err(Error::KMeans(format!("cluster {empty} empty after reseeding")));
            }
            reseeded = true;
            let far = points
                .iter()
                .enumerate()
                .map(|(i, x)| (i, (*x - &centroids[assignments[i]]).norm_squared()))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .expect("nonempty data");
            centroids[empty] = points[far].clone();
            continue;
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            let next = &sums[c] / counts[c] as f64;
            shift = shift.max((&next - &centroids[c]).norm());
            centroids[c] = next;
        }
        if shift <= TOL {
            break;
        }
    }
    for (a, x) in assignments.iter_mut().zip(&points) {
        *a = nearest(x, &centroids).0;
    }
    Ok(KMeansFit {
        centroids,
        assignments,
        iterations,
    })
}

/// Mixture start from k-means: cluster shares, centroids and within-cluster
/// covariances (divided by the cluster size), projected onto the floors.
pub fn kmeans_init(data: &[Sample], k: usize, seed: u64, floors: &Floors) -> Result<ThetaParams> {
    let fit = kmeans(data, k, seed)?;
    let p = data[0].x.len();
    let n = data.len() as f64;
    let mut counts = vec![0usize; k];
    let mut sigma = vec![DMatrix::zeros(p, p); k];
    for (s, &a) in data.iter().zip(&fit.assignments) {
        let d = &s.x - &fit.centroids[a];
        sigma[a].ger(1.0, &d, &d, 1.0);
        counts[a] += 1;
    }
    let mut mu = fit.centroids.clone();
    for c in 0..k {
        if counts[c] == 0 {
            return Err(Error::KMeans(format!("cluster {c} ended empty")));
        }
        sigma[c] /= counts[c] as f64;
        // centroids equal cluster means after the final assignment only at convergence
        let mean = data
            .iter()
            .zip(&fit.assignments)
            .filter(|(_, &a)| a == c)
            .fold(DVector::zeros(p), |acc, (s, _)| acc + &s.x)
            / counts[c] as f64;
        let off = &mean - &fit.centroids[c];
        sigma[c].ger(-1.0, &off, &off, 1.0);
        mu[c] = mean;
    }
    let raw = ThetaParams {
        alpha: counts.iter().map(|&c| c as f64 / n).collect(),
        mu,
        sigma: sigma.into_iter().map(|s| (&s + s.transpose()) * 0.5).collect(),
    };
    raw.project(floors)
}
