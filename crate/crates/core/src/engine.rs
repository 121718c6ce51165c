//! Batched evaluation of many learning rates for one target prefix.
//!
//! After the intercept fit, expert `i` predicts `clamp(ybar + s_i * tau)` at
//! a date with offset `tau` from the prefix's mean date. Dropping the clamp
//! the weighted sum over experts is `Z * ybar + tau * (W S)`, so a single
//! `K x N` by `N x D` product serves the target date and every prefix date
//! for all `K` learning rates at once. Clamped entries are recorded while
//! the losses are computed and added back as sparse corrections.
//!
//! Results agree with [`crate::aggregation`] to rounding.

use crate::aggregation::UpdateRule;
use crate::error::{Error, Result};
use crate::experts::ExpertPool;
use crate::field::{clamp_td, ols_fit, Observation, TD_MAX, TD_MIN, TD_SPAN};

/// Slopes of one pool as a dense `N x D` block.
#[derive(Debug, Clone)]
pub struct PoolSlopes {
    pub slopes: Vec<f64>,
    pub len: usize,
    pub dim: usize,
}

impl PoolSlopes {
    pub fn from_pool(pool: &ExpertPool) -> Self {
        Self {
            slopes: pool.slope_matrix(),
            len: pool.len(),
            dim: pool.dim(),
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.slopes[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy)]
struct Correction {
    expert: u32,
    point: u32,
    delta: f64,
}

#[derive(Debug)]
struct PoolCase {
    /// Per-round losses, `n x N`.
    round_losses: Vec<f64>,
    totals: Vec<f64>,
    min_total: f64,
    target_corrections: Vec<Correction>,
    /// One list per prefix date; empty unless prefix tracking was requested.
    prefix_corrections: Vec<Vec<Correction>>,
}

/// Weighted sums of one pool for each requested learning rate.
#[derive(Debug, Clone)]
pub struct PoolAggregates {
    /// Weight totals, one per rate (weights shifted by the pool's best total).
    pub weight_sums: Vec<f64>,
    /// Unnormalized target sums, `K x D`.
    pub target_sums: Vec<f64>,
    /// Normalized intermediate predictions, `K x n x D`, when requested.
    pub prefix_predictions: Option<Vec<f64>>,
    pub min_total: f64,
}

/// One target patient truncated to `n` observations.
#[derive(Debug)]
pub struct CaseEvaluation<'a> {
    pools: &'a [PoolSlopes],
    prefix: &'a [Observation],
    dim: usize,
    mean_y: Vec<f64>,
    taus: Vec<f64>,
    target_tau: f64,
    cases: Vec<PoolCase>,
}

#[inline(always)]
fn clamp_fast(x: f64) -> f64 {
    let x = if x < TD_MIN { TD_MIN } else { x };
    if x > TD_MAX {
        TD_MAX
    } else {
        x
    }
}

/// Squared distance between the clamped line `mean_y + slope * tau` and `y`.
/// Clamp corrections are appended to `out` when it is given.
#[inline(always)]
fn clamped_sq_dist(
    mean_y: &[f64],
    slope: &[f64],
    tau: f64,
    y: &[f64],
    out: Option<&mut Vec<Correction>>,
    expert: usize,
) -> f64 {
    const W: usize = 8;
    let mut acc = [0.0f64; W];
    let mut lo = [0.0f64; W];
    let mut hi = [TD_MIN; W];
    let m_chunks = mean_y.chunks_exact(W);
    let s_chunks = slope.chunks_exact(W);
    let y_chunks = y.chunks_exact(W);
    let (m_tail, s_tail, y_tail) = (m_chunks.remainder(), s_chunks.remainder(), y_chunks.remainder());
    for ((m, s), y) in m_chunks.zip(s_chunks).zip(y_chunks) {
        for l in 0..W {
            let raw = m[l] + s[l] * tau;
            lo[l] = if raw < lo[l] { raw } else { lo[l] };
            hi[l] = if raw > hi[l] { raw } else { hi[l] };
            let d = clamp_fast(raw) - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    let mut inside = true;
    for ((m, s), y) in m_tail.iter().zip(s_tail).zip(y_tail) {
        let raw = m + s * tau;
        inside &= (TD_MIN..=TD_MAX).contains(&raw);
        let d = clamp_fast(raw) - y;
        tail += d * d;
    }
    if let Some(out) = out {
        inside &= lo.iter().all(|&v| v >= TD_MIN) && hi.iter().all(|&v| v <= TD_MAX);
        if !inside {
            collect_corrections(out, expert, mean_y, slope, tau);
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[inline]
fn collect_corrections(out: &mut Vec<Correction>, expert: usize, mean_y: &[f64], slope: &[f64], tau: f64) {
    for (j, (m, s)) in mean_y.iter().zip(slope).enumerate() {
        let raw = m + s * tau;
        if !(TD_MIN..=TD_MAX).contains(&raw) {
            out.push(Correction {
                expert: expert as u32,
                point: j as u32,
                delta: clamp_td(raw) - raw,
            });
        }
    }
}

/// Appends the target-date corrections of one expert.
#[inline(always)]
fn push_target_corrections(out: &mut Vec<Correction>, expert: usize, mean_y: &[f64], slope: &[f64], tau: f64) {
    const W: usize = 8;
    let mut lo = [0.0f64; W];
    let mut hi = [TD_MIN; W];
    let m_chunks = mean_y.chunks_exact(W);
    let s_chunks = slope.chunks_exact(W);
    let (m_tail, s_tail) = (m_chunks.remainder(), s_chunks.remainder());
    for (m, s) in m_chunks.zip(s_chunks) {
        for l in 0..W {
            let raw = m[l] + s[l] * tau;
            lo[l] = if raw < lo[l] { raw } else { lo[l] };
            hi[l] = if raw > hi[l] { raw } else { hi[l] };
        }
    }
    let inside = lo.iter().all(|&v| v >= TD_MIN)
        && hi.iter().all(|&v| v <= TD_MAX)
        && m_tail.iter().zip(s_tail).all(|(m, s)| (TD_MIN..=TD_MAX).contains(&(m + s * tau)));
    if !inside {
        collect_corrections(out, expert, mean_y, slope, tau);
    }
}

#[inline(always)]
fn score_pool_body(
    pool: &PoolSlopes,
    prefix: &[Observation],
    taus: &[f64],
    mean_y: &[f64],
    target_tau: f64,
    norm: f64,
    track_prefix: bool,
) -> PoolCase {
    let rounds = prefix.len();
    let mut round_losses = vec![0.0; rounds * pool.len];
    let mut totals = vec![0.0; pool.len];
    let mut target_corrections = Vec::new();
    let mut prefix_corrections = vec![Vec::new(); if track_prefix { rounds } else { 0 }];
    for i in 0..pool.len {
        let s = pool.row(i);
        let mut total = 0.0;
        for (t, (obs, &tau)) in prefix.iter().zip(taus).enumerate() {
            let sink = prefix_corrections.get_mut(t);
            let l = clamped_sq_dist(mean_y, s, tau, obs.field.values(), sink, i).sqrt() / norm;
            round_losses[t * pool.len + i] = l;
            total += l;
        }
        totals[i] = total;
        push_target_corrections(&mut target_corrections, i, mean_y, s, target_tau);
    }
    let min_total = totals.iter().copied().fold(f64::INFINITY, f64::min);
    PoolCase {
        round_losses,
        totals,
        min_total,
        target_corrections,
        prefix_corrections,
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn score_pool_avx2(
    pool: &PoolSlopes,
    prefix: &[Observation],
    taus: &[f64],
    mean_y: &[f64],
    target_tau: f64,
    norm: f64,
    track_prefix: bool,
) -> PoolCase {
    score_pool_body(pool, prefix, taus, mean_y, target_tau, norm, track_prefix)
}

/// Per-round losses, totals and clamp corrections of one pool. The AVX2
/// build runs the same operations in the same order (no fused multiply-add),
/// so both paths give identical bits.
fn score_pool(
    pool: &PoolSlopes,
    prefix: &[Observation],
    taus: &[f64],
    mean_y: &[f64],
    target_tau: f64,
    norm: f64,
    track_prefix: bool,
) -> PoolCase {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { score_pool_avx2(pool, prefix, taus, mean_y, target_tau, norm, track_prefix) };
    }
    score_pool_body(pool, prefix, taus, mean_y, target_tau, norm, track_prefix)
}

/// Weights past this exponent are below `1e-300` of the best one and are
/// dropped.
const EXP_CUTOFF: f64 = 690.0;

/// `exp(-x)` for `0 <= x < EXP_CUTOFF`, branch-free so weight loops
/// vectorize. Within two ulp of `f64::exp`.
#[inline(always)]
fn exp_neg(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // 1.5 * 2^52: adding it rounds to an integer held in the low mantissa bits
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let y = -x;
    let t = y * LOG2E + SHIFTER;
    let k = t - SHIFTER;
    let r = (y - k * LN2_HI) - k * LN2_LO;
    // Taylor series to r^13; |r| <= ln2 / 2 bounds the truncation by 5e-18
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let ki = t.to_bits().wrapping_sub(SHIFTER.to_bits()) as i64;
    let scale = f64::from_bits(((ki + 1023) as u64) << 52);
    p * scale
}

#[inline(always)]
fn fill_weights_body(totals: &[f64], min: f64, etas: &[f64], wt: &mut [f64], sums: &mut [f64]) {
    let k = etas.len();
    for (&t, row) in totals.iter().zip(wt.chunks_exact_mut(k)) {
        let gap = t - min;
        for ((w, &eta), s) in row.iter_mut().zip(etas).zip(sums.iter_mut()) {
            let x = eta * gap;
            let v = exp_neg(if x < EXP_CUTOFF { x } else { 0.0 });
            *w = if x < EXP_CUTOFF { v } else { 0.0 };
            *s += *w;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn fill_weights_avx2(totals: &[f64], min: f64, etas: &[f64], wt: &mut [f64], sums: &mut [f64]) {
    fill_weights_body(totals, min, etas, wt, sums)
}

impl<'a> CaseEvaluation<'a> {
    /// Scores every expert on `prefix`. With `track_prefix`, clamp
    /// corrections at the prefix dates are kept for intermediate predictions.
    pub fn new(pools: &'a [PoolSlopes], prefix: &'a [Observation], target_date: f64, track_prefix: bool) -> Result<Self> {
        if prefix.is_empty() {
            return Err(Error::EmptyPrefix);
        }
        if pools.is_empty() {
            return Err(Error::param("pools", "need at least one pool"));
        }
        let dim = prefix[0].field.dim();
        for p in pools {
            if p.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: p.dim,
                });
            }
        }
        let count = prefix.len() as f64;
        let mean_date = prefix.iter().map(|o| o.date).sum::<f64>() / count;
        let mut mean_y = vec![0.0; dim];
        for o in prefix {
            for (m, y) in mean_y.iter_mut().zip(o.field.values()) {
                *m += y;
            }
        }
        mean_y.iter_mut().for_each(|m| *m /= count);
        let taus: Vec<f64> = prefix.iter().map(|o| o.date - mean_date).collect();
        let target_tau = target_date - mean_date;
        let norm = TD_SPAN * (dim as f64).sqrt();

        let cases = pools
            .iter()
            .map(|pool| score_pool(pool, prefix, &taus, &mean_y, target_tau, norm, track_prefix))
            .collect();
        Ok(Self {
            pools,
            prefix,
            dim,
            mean_y,
            taus,
            target_tau,
            cases,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rounds(&self) -> usize {
        self.prefix.len()
    }

    /// Cumulative prefix loss of every expert in pool `p`.
    pub fn totals(&self, p: usize) -> &[f64] {
        &self.cases[p].totals
    }

    /// Clamped target prediction of a single expert.
    pub fn expert_target(&self, p: usize, i: usize) -> Vec<f64> {
        let s = self.pools[p].row(i);
        self.mean_y
            .iter()
            .zip(s)
            .map(|(m, s)| clamp_td(m + s * self.target_tau))
            .collect()
    }

    /// Index `(pool, expert)` of the lowest cumulative loss across all pools,
    /// ties to the first in pool order.
    pub fn best_expert(&self, pools: &[usize]) -> (usize, usize) {
        let mut best = (pools[0], 0);
        let mut best_total = f64::INFINITY;
        for &p in pools {
            for (i, &t) in self.cases[p].totals.iter().enumerate() {
                if t < best_total {
                    best_total = t;
                    best = (p, i);
                }
            }
        }
        best
    }

    /// Fills `wt` (`N x K`, rate innermost) with weights shifted by `min`
    /// and returns the per-rate totals.
    fn fill_weights(totals: &[f64], min: f64, etas: &[f64], wt: &mut Vec<f64>) -> Vec<f64> {
        let k = etas.len();
        // entries past `N x K` are stale and never read
        let need = totals.len() * k;
        if wt.len() < need {
            wt.resize(need, 0.0);
        }
        let wt = &mut wt[..need];
        let mut sums = vec![0.0; k];
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            unsafe { fill_weights_avx2(totals, min, etas, wt, &mut sums) };
            return sums;
        }
        fill_weights_body(totals, min, etas, wt, &mut sums);
        sums
    }

    /// `K x D` product of transposed weights `wt` (`N x K`) with the slopes.
    fn weighted_slopes(pool: &PoolSlopes, wt: &[f64], k: usize) -> Vec<f64> {
        let len = k * pool.dim;
        let mut out: Vec<f64> = Vec::with_capacity(len);
        // SAFETY: the strides describe `wt` as K x N and `slopes` as N x D,
        // both fully inside their buffers, and `out` as a distinct K x D block.
        // With beta = 0 the product never reads `out`, and writes all of it.
        unsafe {
            matrixmultiply::dgemm(
                k,
                pool.len,
                pool.dim,
                1.0,
                wt.as_ptr(),
                1,
                k as isize,
                pool.slopes.as_ptr(),
                pool.dim as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                pool.dim as isize,
                1,
            );
            out.set_len(len);
        }
        out
    }

    /// `Z * ybar + tau * WS + corrections`, written to `out` as `K x D`.
    fn sums_at(&self, tau: f64, sums: &[f64], ws: &[f64], wt: &[f64], corrections: &[Correction], out: &mut [f64]) {
        let k = sums.len();
        let dim = self.dim;
        thread_local! {
            static CORR: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
        }
        CORR.with_borrow_mut(|corr| {
            // all zero between calls; only rows touched here are cleared again
            if corr.len() < dim * k {
                corr.clear();
                corr.resize(dim * k, 0.0);
            }
            self.sums_at_in(tau, sums, ws, wt, corrections, out, corr);
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn sums_at_in(
        &self,
        tau: f64,
        sums: &[f64],
        ws: &[f64],
        wt: &[f64],
        corrections: &[Correction],
        out: &mut [f64],
        corr: &mut [f64],
    ) {
        let k = sums.len();
        let dim = self.dim;
        // corrections accumulate with the rate innermost so the loop vectorizes
        for c in corrections {
            let row = &wt[c.expert as usize * k..(c.expert as usize + 1) * k];
            let dst = &mut corr[c.point as usize * k..(c.point as usize + 1) * k];
            for (d, w) in dst.iter_mut().zip(row) {
                *d += w * c.delta;
            }
        }
        for r in 0..k {
            for j in 0..dim {
                out[r * dim + j] = sums[r] * self.mean_y[j] + tau * ws[r * dim + j] + corr[j * k + r];
            }
        }
        for c in corrections {
            corr[c.point as usize * k..(c.point as usize + 1) * k].fill(0.0);
        }
    }

    /// Aggregates pool `p` under every rate in `etas`.
    ///
    /// With `prefix`, also returns the normalized intermediate prediction at
    /// each prefix date, using the final weights (batch) or the weights
    /// before that round (online).
    pub fn pool_aggregates(&self, p: usize, etas: &[f64], prefix: Option<UpdateRule>) -> PoolAggregates {
        thread_local! {
            static WEIGHTS: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
        }
        WEIGHTS.with_borrow_mut(|wt| self.pool_aggregates_in(p, etas, prefix, wt))
    }

    fn pool_aggregates_in(&self, p: usize, etas: &[f64], prefix: Option<UpdateRule>, wt: &mut Vec<f64>) -> PoolAggregates {
        let pool = &self.pools[p];
        let case = &self.cases[p];
        let k = etas.len();
        let dim = self.dim;
        let sums = Self::fill_weights(&case.totals, case.min_total, etas, wt);
        let ws = Self::weighted_slopes(pool, wt, k);
        let mut target_sums = vec![0.0; k * dim];
        self.sums_at(self.target_tau, &sums, &ws, wt, &case.target_corrections, &mut target_sums);

        let prefix_predictions = prefix.map(|rule| {
            assert_eq!(
                case.prefix_corrections.len(),
                self.rounds(),
                "prefix corrections were not tracked"
            );
            let rounds = self.rounds();
            let mut out = vec![0.0; k * rounds * dim];
            let mut buf = vec![0.0; k * dim];
            let mut partial = vec![0.0; pool.len];
            let mut wt_t = Vec::new();
            for t in 0..rounds {
                let (sums_t, ws_t, wt_ref) = match rule {
                    UpdateRule::Batch => (None, None, &wt[..]),
                    UpdateRule::Online => {
                        // totals over rounds before t
                        partial.iter_mut().for_each(|x| *x = 0.0);
                        for r in 0..t {
                            for (x, l) in partial.iter_mut().zip(&case.round_losses[r * pool.len..(r + 1) * pool.len]) {
                                *x += l;
                            }
                        }
                        let min = partial.iter().copied().fold(f64::INFINITY, f64::min);
                        let s = Self::fill_weights(&partial, min, etas, &mut wt_t);
                        let w = Self::weighted_slopes(pool, &wt_t, k);
                        (Some(s), Some(w), &wt_t[..])
                    }
                };
                let sums_used = sums_t.as_deref().unwrap_or(&sums);
                let ws_used = ws_t.as_deref().unwrap_or(&ws);
                self.sums_at(self.taus[t], sums_used, ws_used, wt_ref, &case.prefix_corrections[t], &mut buf);
                for r in 0..k {
                    for j in 0..dim {
                        out[(r * rounds + t) * dim + j] = clamp_td(buf[r * dim + j] / sums_used[r]);
                    }
                }
            }
            out
        });

        PoolAggregates {
            weight_sums: sums,
            target_sums,
            prefix_predictions,
            min_total: case.min_total,
        }
    }

    /// Normalized target prediction of a single pool at rate index `r`.
    pub fn single(&self, agg: &PoolAggregates, r: usize) -> Vec<f64> {
        let dim = self.dim;
        let z = agg.weight_sums[r];
        agg.target_sums[r * dim..(r + 1) * dim].iter().map(|s| clamp_td(s / z)).collect()
    }

    /// Flat aggregate over all pools at rate `etas[r]`.
    pub fn flat(&self, aggs: &[&PoolAggregates], etas: &[f64], r: usize) -> Vec<f64> {
        let dim = self.dim;
        let min = aggs.iter().map(|a| a.min_total).fold(f64::INFINITY, f64::min);
        let mut acc = vec![0.0; dim];
        let mut z = 0.0;
        for a in aggs {
            let x = etas[r] * (a.min_total - min);
            if x >= EXP_CUTOFF {
                continue;
            }
            let scale = exp_neg(x);
            z += scale * a.weight_sums[r];
            for (dst, s) in acc.iter_mut().zip(&a.target_sums[r * dim..(r + 1) * dim]) {
                *dst += scale * s;
            }
        }
        acc.iter().map(|s| clamp_td(s / z)).collect()
    }

    /// Hierarchical aggregate: pool `q` contributes its intermediate at rate
    /// index `level1[q]`; the top level uses `level2_eta`.
    pub fn hierarchical(&self, aggs: &[&PoolAggregates], level1: &[usize], level2_eta: f64) -> Vec<f64> {
        let dim = self.dim;
        let rounds = self.rounds();
        let norm = TD_SPAN * (dim as f64).sqrt();
        let mut level2_totals = Vec::with_capacity(aggs.len());
        for (a, &r) in aggs.iter().zip(level1) {
            let pre = a
                .prefix_predictions
                .as_ref()
                .expect("hierarchical aggregation needs prefix predictions");
            let mut total = 0.0;
            for (t, obs) in self.prefix.iter().enumerate() {
                let pred = &pre[(r * rounds + t) * dim..(r * rounds + t + 1) * dim];
                let sq: f64 = pred.iter().zip(obs.field.values()).map(|(p, y)| (p - y) * (p - y)).sum();
                total += sq.sqrt() / norm;
            }
            level2_totals.push(total);
        }
        let min = level2_totals.iter().copied().fold(f64::INFINITY, f64::min);
        let mut acc = vec![0.0; dim];
        let mut z = 0.0;
        for ((a, &r), total) in aggs.iter().zip(level1).zip(&level2_totals) {
            let w = (-level2_eta * (total - min)).exp();
            if w == 0.0 {
                continue;
            }
            z += w;
            let inter = self.single(a, r);
            for (dst, v) in acc.iter_mut().zip(inter) {
                *dst += w * v;
            }
        }
        acc.iter().map(|s| clamp_td(s / z)).collect()
    }
}

/// Patient-wise LR baseline: OLS on the prefix, extrapolated and clamped.
pub fn baseline_prediction(prefix: &[Observation], target_date: f64) -> Result<Vec<f64>> {
    let (slope, intercept) = ols_fit(prefix)?;
    Ok(slope
        .iter()
        .zip(&intercept)
        .map(|(s, b)| clamp_td(s * target_date + b))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{flat_predict_with, hierarchical_predict_with, HierarchicalEta};
    use crate::experts::fit_pool_to_target;
    use crate::field::{Expert, Method, VisualField};

    #[test]
    fn exp_neg_tracks_std_exp() {
        let mut worst = 0.0f64;
        let mut x = 0.0;
        while x < EXP_CUTOFF {
            let want = (-x).exp();
            worst = worst.max(((exp_neg(x) - want) / want).abs());
            x += 0.000_731;
        }
        assert!(worst <= 4.5e-16, "relative error {worst}");
        assert_eq!(exp_neg(0.0), 1.0);
    }
    use rand::Rng;

    fn random_setup(rng: &mut impl Rng, sizes: &[usize], dim: usize, rounds: usize) -> (Vec<ExpertPool>, Vec<Observation>) {
        let methods = [Method::PatientWiseLr, Method::SlopeClustering, Method::Tslr];
        let pools = sizes
            .iter()
            .enumerate()
            .map(|(p, &n)| {
                let m = methods[p % 3];
                let experts = (0..n)
                    .map(|i| Expert::new((0..dim).map(|_| rng.random_range(-4.0..1.5)).collect(), m, format!("{i}")))
                    .collect();
                ExpertPool::new(m, experts).unwrap()
            })
            .collect();
        let mut date = 0.0;
        let prefix = (0..rounds)
            .map(|_| {
                date += rng.random_range(0.2..1.5);
                let v = (0..dim).map(|_| rng.random_range(-30.0..=0.0)).collect();
                Observation::new(date, VisualField::new(v).unwrap())
            })
            .collect();
        (pools, prefix)
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matches_reference_paths() {
        let mut rng = crate::seed::rng(42);
        for trial in 0..40 {
            let sizes: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..7)).collect();
            let dim = rng.random_range(1..6);
            let rounds = rng.random_range(1..6);
            let (pools, prefix) = random_setup(&mut rng, &sizes, dim, rounds);
            let target = prefix.last().unwrap().date + rng.random_range(0.5..8.0);
            let etas: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..20.0)).collect();
            let slopes: Vec<PoolSlopes> = pools.iter().map(PoolSlopes::from_pool).collect();
            let fitted: Vec<ExpertPool> = pools.iter().map(|p| fit_pool_to_target(p, &prefix).unwrap()).collect();
            let rule = if trial % 2 == 0 { UpdateRule::Batch } else { UpdateRule::Online };
            let case = CaseEvaluation::new(&slopes, &prefix, target, true).unwrap();
            let aggs: Vec<PoolAggregates> = (0..pools.len()).map(|p| case.pool_aggregates(p, &etas, Some(rule))).collect();
            let refs: Vec<&PoolAggregates> = aggs.iter().collect();
            for (r, &eta) in etas.iter().enumerate() {
                let flat_ref = flat_predict_with(&fitted, &prefix, eta, rule, target).unwrap();
                close(&case.flat(&refs, &etas, r), flat_ref.values(), 1e-10);
                for p in 0..pools.len() {
                    let single_ref = flat_predict_with(&fitted[p..=p], &prefix, eta, rule, target).unwrap();
                    close(&case.single(&aggs[p], r), single_ref.values(), 1e-10);
                }
                let hier_ref =
                    hierarchical_predict_with(&fitted, &prefix, &HierarchicalEta::shared(eta, pools.len()), rule, target).unwrap();
                close(&case.hierarchical(&refs, &vec![r; pools.len()], eta), hier_ref.values(), 1e-10);
            }
            let mixed: Vec<usize> = (0..pools.len()).map(|p| p % etas.len()).collect();
            let etas_ref = HierarchicalEta {
                level1: mixed.iter().map(|&r| etas[r]).collect(),
                level2: 1.7,
            };
            let hier_ref = hierarchical_predict_with(&fitted, &prefix, &etas_ref, rule, target).unwrap();
            close(&case.hierarchical(&refs, &mixed, 1.7), hier_ref.values(), 1e-10);
        }
    }

    #[test]
    fn baseline_is_prefix_ols() {
        let prefix = [
            Observation::new(0.0, VisualField::new(vec![-1.0, 0.0]).unwrap()),
            Observation::new(1.0, VisualField::new(vec![-2.0, 0.0]).unwrap()),
        ];
        let p = baseline_prediction(&prefix, 3.0).unwrap();
        assert_eq!(p, vec![-4.0, 0.0]);
        let p = baseline_prediction(&prefix, 100.0).unwrap();
        assert_eq!(p, vec![-30.0, 0.0]);
    }
}
