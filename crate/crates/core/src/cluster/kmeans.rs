use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::invalid;
use crate::matrix::{sq_dist_f64, Matrix};
use crate::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_RESTARTS: usize = 10;
const RESTART_STREAM: u64 = 7;

/// Hard assignment of points to `k` clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainLabeling {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares of the final assignment.
    pub wcss: f64,
    pub iterations_run: usize,
}

impl DomainLabeling {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        self.labels.iter().for_each(|&l| sizes[l] += 1);
        sizes
    }
}

/// Lloyd's algorithm from a seeded k-means++ start.
///
/// Assignment ties go to the lowest centroid index. A cluster left empty
/// after assignment takes over the point farthest from its own centroid.
/// Stops once labels no longer change or after `max_iters` assignment
/// rounds.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, max_iters: usize) -> Result<DomainLabeling> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(invalid(alloc::format!("k must lie in [1, {n}], got {k}")));
    }
    if max_iters == 0 {
        return Err(invalid("max_iters must be at least 1"));
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("k-means points"));
    }
    let data: Vec<Vec<f64>> = points
        .iter_rows()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();

    let mut centroids = plus_plus_init(&data, k, seed);
    let mut labels = vec![usize::MAX; n];
    let mut iterations_run = 0;
    for _ in 0..max_iters {
        iterations_run += 1;
        let mut next = assign(&data, &centroids);
        repair_empty(&data, &centroids, &mut next, k);
        let changed = next != labels;
        labels = next;
        centroids = means(&data, &labels, k);
        if !changed {
            break;
        }
    }
    let wcss = data
        .iter()
        .zip(&labels)
        .map(|(x, &l)| sq_dist_f64(x, &centroids[l]))
        .sum();
    Ok(DomainLabeling {
        labels,
        centroids,
        wcss,
        iterations_run,
    })
}

/// Best of `restarts` independent [`kmeans`] runs by WCSS, earliest run on
/// ties. The first run uses `seed` itself, so `restarts == 1` is plain
/// [`kmeans`].
pub fn kmeans_restarts(
    points: &Matrix,
    k: usize,
    seed: u64,
    max_iters: usize,
    restarts: usize,
) -> Result<DomainLabeling> {
    if restarts == 0 {
        return Err(invalid("restarts must be at least 1"));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    seeds.set_stream(RESTART_STREAM);
    let mut best = kmeans(points, k, seed, max_iters)?;
    for _ in 1..restarts {
        let run = kmeans(points, k, seeds.random(), max_iters)?;
        if run.wcss < best.wcss {
            best = run;
        }
    }
    Ok(best)
}

fn plus_plus_init(data: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; n];
    let first = ((rng.random::<f64>() * n as f64) as usize).min(n - 1);
    chosen[first] = true;
    let mut centroids = vec![data[first].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist_f64(x, &data[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let u = rng.random::<f64>();
        let pick = if total > 0.0 {
            let target = u * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (j, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(j);
                    break;
                }
            }
            // rounding can leave target just above the final partial sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // every point coincides with a centre already chosen
            chosen.iter().position(|&c| !c).unwrap()
        };
        chosen[pick] = true;
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min(sq_dist_f64(x, &data[pick]));
        }
        centroids.push(data[pick].clone());
    }
    centroids
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, mu) in centroids.iter().enumerate() {
        let d = sq_dist_f64(x, mu);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn assign(data: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    data.iter().map(|x| nearest(x, centroids)).collect()
}

fn repair_empty(data: &[Vec<f64>], centroids: &[Vec<f64>], labels: &mut [usize], k: usize) {
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let far = (0..data.len())
            .filter(|&j| sizes[labels[j]] > 1)
            .max_by(|&a, &b| {
                let da = sq_dist_f64(&data[a], &centroids[labels[a]]);
                let db = sq_dist_f64(&data[b], &centroids[labels[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("k <= n leaves a cluster with two or more points");
        sizes[labels[far]] -= 1;
        labels[far] = c;
        sizes[c] = 1;
    }
}

fn means(data: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = data.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (x, &l) in data.iter().zip(labels) {
        sums[l].iter_mut().zip(x).for_each(|(s, v)| *s += v);
        counts[l] += 1;
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    sums
}
