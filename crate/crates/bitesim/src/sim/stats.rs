//! Paired Wilcoxon signed-rank test: exact null distribution for small
//! samples, normal approximation with tie correction above.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

pub const EXACT_LIMIT: usize = 25;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs remaining after zero differences are dropped.
    pub n_effective: usize,
    /// Sum of ranks of positive differences (average ranks for ties).
    pub w_plus: f64,
    pub p_two_sided: f64,
    pub exact: bool,
}

/// Two-sided paired test of `xs` vs `ys`. Zero differences are dropped; if
/// every difference is zero the test is degenerate and p = 1.
pub fn wilcoxon_signed_rank(xs: &[f64], ys: &[f64]) -> Result<WilcoxonResult> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!(
            "paired samples of length {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    let diffs: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult { n_effective: 0, w_plus: 0.0, p_two_sided: 1.0, exact: true });
    }
    // average ranks of |d|, doubled so ties (.5 ranks) stay integral
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).unwrap());
    let mut rank2 = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the average; doubled average = (i+j+2)
        let avg2 = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            rank2[k] = avg2;
        }
        i = j + 1;
    }
    let w_plus2: u64 = diffs
        .iter()
        .zip(rank2.iter())
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let w_plus = w_plus2 as f64 / 2.0;

    let p = if n <= EXACT_LIMIT {
        exact_p(&rank2, w_plus2)
    } else {
        normal_p(&rank2, w_plus, n)
    };
    Ok(WilcoxonResult {
        n_effective: n,
        w_plus,
        p_two_sided: p.min(1.0),
        exact: n <= EXACT_LIMIT,
    })
}

/// Exact two-sided p via the subset-sum distribution of doubled ranks: under
/// the null each rank is positive with probability ½.
fn exact_p(rank2: &[u64], w_plus2: u64) -> f64 {
    let total: u64 = rank2.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in rank2 {
        let r = r as usize;
        reach += r;
        for s in (0..=reach).rev() {
            if s >= r {
                counts[s] += counts[s - r];
            }
        }
    }
    let norm = 2f64.powi(rank2.len() as i32);
    let cdf_le: f64 = counts[..=w_plus2 as usize].iter().sum::<f64>() / norm;
    let cdf_ge: f64 = counts[w_plus2 as usize..].iter().sum::<f64>() / norm;
    2.0 * cdf_le.min(cdf_ge)
}

fn normal_p(rank2: &[u64], w_plus: f64, n: usize) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    // tie correction: group doubled-rank multiplicities
    let mut sorted: Vec<u64> = rank2.to_vec();
    sorted.sort_unstable();
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w_plus - mean - 0.5 * (w_plus - mean).signum()) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    2.0 * (1.0 - normal.cdf(z.abs()))
}
