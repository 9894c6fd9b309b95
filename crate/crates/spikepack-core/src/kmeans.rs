//! Exact 1-d k-means.
//!
//! In one dimension an optimal clustering is always contiguous in sorted
//! order, so the global optimum is found by dynamic programming over the
//! sorted points instead of restarted Lloyd iteration. At desk-scale layer
//! sizes the O(n^2 m) program runs in well under a second, and the tests
//! pin its output against exhaustive partition search.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
}

/// Index of the nearest centroid, ties to the lowest index.
pub fn nearest(x: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = (x - c) * (x - c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

fn inertia_of(points: &[f64], centroids: &[f64], assignment: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(&p, &a)| (p - centroids[a]) * (p - centroids[a]))
        .sum()
}

/// Within-run sum of squares for sorted[a..b] via prefix sums.
struct RunCost {
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl RunCost {
    fn new(sorted: &[f64]) -> RunCost {
        let mut sum = Vec::with_capacity(sorted.len() + 1);
        let mut sq = Vec::with_capacity(sorted.len() + 1);
        sum.push(0.0);
        sq.push(0.0);
        for &x in sorted {
            sum.push(sum.last().unwrap() + x);
            sq.push(sq.last().unwrap() + x * x);
        }
        RunCost { sum, sq }
    }

    fn cost(&self, a: usize, b: usize) -> f64 {
        let n = (b - a) as f64;
        let s = self.sum[b] - self.sum[a];
        // Cancellation can leave a tiny negative residue.
        let c = (self.sq[b] - self.sq[a]) - s * s / n;
        if c > 0.0 {
            c
        } else {
            0.0
        }
    }

    fn mean(&self, a: usize, b: usize) -> f64 {
        (self.sum[b] - self.sum[a]) / (b - a) as f64
    }
}

/// Cluster `points` into `m` centroids at the global optimum. `iters` and
/// `seed` are accepted for interface stability; the exact solver needs
/// neither.
pub fn kmeans_1d(points: &[f64], m: usize, _iters: usize, _seed: u64) -> Result<KMeansResult> {
    if m == 0 {
        return Err(Error::Contract("kmeans needs m >= 1".into()));
    }
    if points.is_empty() {
        return Err(Error::Contract("kmeans needs at least one point".into()));
    }
    let mut distinct: Vec<f64> = points.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    distinct.dedup();
    if m > distinct.len() {
        return Err(Error::Contract(alloc::format!(
            "m={m} exceeds {} distinct points",
            distinct.len()
        )));
    }

    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    let n = sorted.len();
    let rc = RunCost::new(&sorted);

    // best[j][i]: lowest cost of splitting the first i points into j+1 runs.
    // split[j][i]: start of the last run in that solution.
    let mut best = vec![vec![0.0f64; n + 1]; m];
    let mut split = vec![vec![0usize; n + 1]; m];
    for i in 1..=n {
        best[0][i] = rc.cost(0, i);
    }
    for j in 1..m {
        for i in (j + 1)..=n {
            let mut lowest = f64::INFINITY;
            let mut at = j;
            for t in j..i {
                let c = best[j - 1][t] + rc.cost(t, i);
                if c < lowest {
                    lowest = c;
                    at = t;
                }
            }
            best[j][i] = lowest;
            split[j][i] = at;
        }
    }

    // Walk the splits back into run boundaries, then means.
    let mut bounds = vec![0usize; m + 1];
    bounds[m] = n;
    let mut end = n;
    for j in (1..m).rev() {
        end = split[j][end];
        bounds[j] = end;
    }
    let centroids: Vec<f64> = (0..m).map(|j| rc.mean(bounds[j], bounds[j + 1])).collect();

    // Re-derive the assignment from the centroids so ties break low even
    // when a boundary point sits exactly between two runs.
    let assignment: Vec<usize> = points.iter().map(|&p| nearest(p, &centroids)).collect();
    let inertia = inertia_of(points, &centroids, &assignment);
    Ok(KMeansResult { centroids, assignment, inertia })
}

/// Single Lloyd run from a given initialization, exposing the inertia
/// after every iteration. The refinement loop is kept purely as a checked
/// reference: its descent property is part of the test suite.
pub fn lloyd_trace(points: &[f64], init: Vec<f64>, iters: usize) -> (KMeansResult, Vec<f64>) {
    let mut centroids = init;
    let m = centroids.len();
    let mut assignment: Vec<usize> = points.iter().map(|&p| nearest(p, &centroids)).collect();
    let mut inertia_trace = Vec::new();
    for _ in 0..iters {
        // Means of the assigned points.
        let mut sums = vec![0.0; m];
        let mut counts = vec![0usize; m];
        for (&p, &a) in points.iter().zip(&assignment) {
            sums[a] += p;
            counts[a] += 1;
        }
        for k in 0..m {
            if counts[k] > 0 {
                centroids[k] = sums[k] / counts[k] as f64;
            }
        }
        // Dead centroid: reseed at the point farthest from its current
        // centroid, lowest index on ties.
        for k in 0..m {
            if counts[k] == 0 {
                let mut far_i = 0;
                let mut far_d = -1.0;
                for (i, &p) in points.iter().enumerate() {
                    let c = centroids[assignment[i]];
                    let d = (p - c) * (p - c);
                    if d > far_d {
                        far_d = d;
                        far_i = i;
                    }
                }
                centroids[k] = points[far_i];
            }
        }
        let next: Vec<usize> = points.iter().map(|&p| nearest(p, &centroids)).collect();
        inertia_trace.push(inertia_of(points, &centroids, &next));
        let settled = next == assignment;
        assignment = next;
        if settled {
            break;
        }
    }
    let inertia = inertia_of(points, &centroids, &assignment);
    (KMeansResult { centroids, assignment, inertia }, inertia_trace)
}
