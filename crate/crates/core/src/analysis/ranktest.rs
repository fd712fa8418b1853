//! Two-sided Wilcoxon–Mann–Whitney rank-sum test.
//!
//! Ranks are kept doubled so tied midranks stay integral. Small samples use
//! the exact permutation distribution of the (tied) rank sum; larger ones
//! the normal approximation with tie and continuity correction.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Pooled sizes up to this use the exact distribution.
pub const EXACT_LIMIT: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankTest {
    /// Mann–Whitney U of the first sample.
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Doubled midranks of the pooled sample `a ++ b`, in input order.
pub fn doubled_midranks(a: &[u64], b: &[u64]) -> Vec<u64> {
    let pooled: Vec<u64> = a.iter().chain(b).copied().collect();
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by_key(|&i| pooled[i]);
    let mut ranks = vec![0u64; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share rank ((i+1)+(j+1))/2
        let doubled = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            ranks[k] = doubled;
        }
        i = j + 1;
    }
    ranks
}

pub fn mann_whitney(a: &[u64], b: &[u64]) -> RankTest {
    let (n1, n2) = (a.len(), b.len());
    assert!(n1 > 0 && n2 > 0, "rank test needs two non-empty samples");
    let ranks = doubled_midranks(a, b);
    let r2: u64 = ranks[..n1].iter().sum();
    let u = r2 as f64 / 2.0 - (n1 * (n1 + 1)) as f64 / 2.0;
    if n1 + n2 <= EXACT_LIMIT {
        RankTest {
            statistic: u,
            p_value: exact_p(&ranks, n1, r2),
            exact: true,
        }
    } else {
        RankTest {
            statistic: u,
            p_value: normal_p(&ranks, n1, n2, u),
            exact: false,
        }
    }
}

/// P(|S - E| >= |s_obs - E|) where S is the doubled rank sum of a random
/// size-`n1` subset of the pooled ranks.
fn exact_p(ranks: &[u64], n1: usize, observed: u64) -> f64 {
    let n = ranks.len();
    let expected = (n1 * (n + 1)) as i64;
    let max_sum: usize = ranks.iter().map(|&r| r as usize).sum();
    // ways[k][s]: subsets of size k with doubled rank sum s
    let mut ways = vec![vec![0f64; max_sum + 1]; n1 + 1];
    ways[0][0] = 1.0;
    for &r in ranks {
        let r = r as usize;
        for k in (1..=n1).rev() {
            let (lower, upper) = ways.split_at_mut(k);
            let prev = &lower[k - 1];
            let cur = &mut upper[0];
            for s in (r..=max_sum).rev() {
                if prev[s - r] != 0.0 {
                    cur[s] += prev[s - r];
                }
            }
        }
    }
    let threshold = (observed as i64 - expected).abs();
    let (mut extreme, mut total) = (0f64, 0f64);
    for (s, &w) in ways[n1].iter().enumerate() {
        total += w;
        if (s as i64 - expected).abs() >= threshold {
            extreme += w;
        }
    }
    (extreme / total).min(1.0)
}

fn normal_p(ranks: &[u64], n1: usize, n2: usize, u: f64) -> f64 {
    let n = (n1 + n2) as f64;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let mut tie_term = 0f64;
    for group in sorted.chunk_by(|x, y| x == y) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let (f1, f2) = (n1 as f64, n2 as f64);
    let mean = f1 * f2 / 2.0;
    let var = f1 * f2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - normal.cdf(z))).min(1.0)
}
