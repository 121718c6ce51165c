//! Lloyd's k-means with k-means++ seeding and best-of-restarts selection.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed;

/// Restart and convergence settings shared by the spatial and slope
/// clusterings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub restarts: usize,
    pub max_iter: usize,
    /// Relative objective change below which iteration stops.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

/// Result of the best restart.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k x dim`.
    pub centers: Vec<f64>,
    pub assignments: Vec<usize>,
    pub objective: f64,
    /// Objective after the initial assignment and after every iteration.
    pub history: Vec<f64>,
}

impl KMeansFit {
    pub fn center(&self, c: usize) -> &[f64] {
        &self.centers[c * self.dim..(c + 1) * self.dim]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

#[inline(always)]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the loop vectorize
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            let d = a[4 * i + l] - b[4 * i + l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        let d = a[i] - b[i];
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Clusters the `data.len() / dim` rows of `data` into `k` groups.
pub fn kmeans(data: &[f64], dim: usize, k: usize, params: &KMeansParams, seed: u64) -> Result<KMeansFit> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::param("dim", format!("data length {} not a multiple of {dim}", data.len())));
    }
    if k == 0 {
        return Err(Error::param("k", "must be positive"));
    }
    let n = data.len() / dim;
    if n < k {
        return Err(Error::CohortTooSmall { required: k, found: n });
    }
    let restarts = params.restarts.max(1);
    // points in ascending order, used by the one-dimensional sweep
    let sorted: Vec<usize> = if dim == 1 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| data[a].total_cmp(&data[b]));
        order
    } else {
        Vec::new()
    };
    let fits: Vec<KMeansFit> = (0..restarts)
        .into_par_iter()
        .map(|r| lloyd(data, dim, k, params, seed::derive(seed, r as u64), &sorted))
        .collect();
    let mut best = 0;
    for (r, fit) in fits.iter().enumerate() {
        if fit.objective < fits[best].objective {
            best = r;
        }
    }
    Ok(fits.into_iter().nth(best).expect("at least one restart"))
}

fn row(data: &[f64], dim: usize, i: usize) -> &[f64] {
    &data[i * dim..(i + 1) * dim]
}

fn plus_plus_init(data: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(row(data, dim, first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(data, dim, i), row(data, dim, first))).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            // rounding may leave `chosen` on a zero-weight point
            if nearest[chosen] == 0.0 {
                chosen = nearest.iter().rposition(|&d| d > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centers.len();
        centers.extend_from_slice(row(data, dim, pick));
        let c = &centers[start..start + dim];
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(data, dim, i), c));
        }
    }
    centers
}

/// Assigns each row to its nearest center (ties to the lowest index) and
/// returns the per-row squared distance.
fn assign(data: &[f64], dim: usize, centers: &[f64], labels: &mut [usize], dists: &mut [f64], sorted: &[usize]) {
    if dim == 1 {
        assign_1d(data, centers, labels, dists, sorted);
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        unsafe { assign_scan_avx2(data, dim, centers, labels, dists) };
        return;
    }
    assign_scan(data, dim, centers, labels, dists);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn assign_scan_avx2(data: &[f64], dim: usize, centers: &[f64], labels: &mut [usize], dists: &mut [f64]) {
    assign_scan(data, dim, centers, labels, dists)
}

/// Full scan over the centers. Lanes are explicit, so every instruction set
/// produces the same bits.
#[inline(always)]
fn assign_scan(data: &[f64], dim: usize, centers: &[f64], labels: &mut [usize], dists: &mut [f64]) {
    let k = centers.len() / dim;
    for (i, (label, dist)) in labels.iter_mut().zip(dists.iter_mut()).enumerate() {
        let x = row(data, dim, i);
        let mut best = 0;
        let mut best_d = sq_dist(x, &centers[..dim]);
        for c in 1..k {
            let d = sq_dist(x, &centers[c * dim..(c + 1) * dim]);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        *label = best;
        *dist = best_d;
    }
}

/// One-dimensional assignment by a sweep over sorted points. Labels and
/// distances equal those of the full scan: along sorted data the nearest
/// center is monotone, and among equal center values the lowest index wins.
fn assign_1d(data: &[f64], centers: &[f64], labels: &mut [usize], dists: &mut [f64], points: &[usize]) {
    let mut order: Vec<usize> = (0..centers.len()).collect();
    order.sort_by(|&a, &b| centers[a].total_cmp(&centers[b]).then(a.cmp(&b)));
    order.dedup_by(|later, earlier| centers[*later] == centers[*earlier]);
    let mut j = 0;
    for &i in points {
        let x = data[i];
        let mut d = (x - centers[order[j]]) * (x - centers[order[j]]);
        while j + 1 < order.len() {
            let next = order[j + 1];
            let dn = (x - centers[next]) * (x - centers[next]);
            if dn < d || (dn == d && next < order[j]) {
                j += 1;
                d = dn;
            } else {
                break;
            }
        }
        labels[i] = order[j];
        dists[i] = d;
    }
}

/// Moves the row farthest from its center into each empty cluster.
fn reseed_empty(data: &[f64], dim: usize, centers: &mut [f64], labels: &mut [usize], dists: &mut [f64]) {
    let k = centers.len() / dim;
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for i in 0..labels.len() {
            if sizes[labels[i]] > 1 && far.is_none_or(|f| dists[i] > dists[f]) {
                far = Some(i);
            }
        }
        let Some(i) = far else { break };
        sizes[labels[i]] -= 1;
        sizes[c] = 1;
        labels[i] = c;
        dists[i] = 0.0;
        centers[c * dim..(c + 1) * dim].copy_from_slice(row(data, dim, i));
    }
}

fn update_centers(data: &[f64], dim: usize, k: usize, labels: &[usize], centers: &mut [f64]) {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    if dim == 1 {
        for (&l, &x) in labels.iter().zip(data) {
            counts[l] += 1;
            sums[l] += x;
        }
        for ((dst, s), &c) in centers.iter_mut().zip(&sums).zip(&counts) {
            if c > 0 {
                *dst = s / c as f64;
            }
        }
        return;
    }
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, x) in sums[l * dim..(l + 1) * dim].iter_mut().zip(row(data, dim, i)) {
            *s += x;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let inv = counts[c] as f64;
        for (dst, s) in centers[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
            *dst = s / inv;
        }
    }
}

fn objective(data: &[f64], dim: usize, centers: &[f64], labels: &[usize]) -> f64 {
    if dim == 1 {
        return labels.iter().zip(data).map(|(&l, &x)| (x - centers[l]) * (x - centers[l])).sum();
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(row(data, dim, i), &centers[l * dim..(l + 1) * dim]))
        .sum()
}

fn lloyd(data: &[f64], dim: usize, k: usize, params: &KMeansParams, seed: u64, sorted: &[usize]) -> KMeansFit {
    let n = data.len() / dim;
    let mut rng = seed::rng(seed);
    let mut centers = plus_plus_init(data, dim, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0; n];
    assign(data, dim, &centers, &mut labels, &mut dists, sorted);
    reseed_empty(data, dim, &mut centers, &mut labels, &mut dists);
    let mut history = vec![objective(data, dim, &centers, &labels)];

    let mut next = labels.clone();
    for _ in 0..params.max_iter {
        update_centers(data, dim, k, &labels, &mut centers);
        assign(data, dim, &centers, &mut next, &mut dists, sorted);
        reseed_empty(data, dim, &mut centers, &mut next, &mut dists);
        let obj = objective(data, dim, &centers, &next);
        let prev = *history.last().expect("history is nonempty");
        history.push(obj);
        let unchanged = next == labels;
        std::mem::swap(&mut labels, &mut next);
        if unchanged || prev - obj <= params.tol * prev {
            break;
        }
    }
    // centers always reflect the final partition
    update_centers(data, dim, k, &labels, &mut centers);
    let obj = objective(data, dim, &centers, &labels);
    if obj < *history.last().expect("history is nonempty") {
        history.push(obj);
    }
    KMeansFit {
        k,
        dim,
        centers,
        assignments: labels,
        objective: *history.last().expect("history is nonempty"),
        history,
    }
}
