//! Wilcoxon two-sample statistic kernels and placement vectors.
//!
//! Two interchangeable kernels compute the same cross-pair indicator count:
//! a brute-force O(n_j * n_k) double loop and a sort-plus-binary-search
//! O((n_j + n_k) log(n_j + n_k)) kernel. Both divide one integer count by
//! n_j * n_k, so they agree bit for bit.

use crate::error::{Error, Result};

/// Outcomes of the two compared groups.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    y_j: Vec<f64>,
    y_k: Vec<f64>,
}

impl PairSample {
    pub fn new(y_j: Vec<f64>, y_k: Vec<f64>) -> Result<Self> {
        if y_j.is_empty() {
            return Err(Error::EmptyGroup { arm: 1 });
        }
        if y_k.is_empty() {
            return Err(Error::EmptyGroup { arm: 2 });
        }
        for (col, vals) in [("y_j", &y_j), ("y_k", &y_k)] {
            if let Some(row) = vals.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    column: if col == "y_j" { "y_j" } else { "y_k" },
                    row,
                });
            }
        }
        Ok(Self { y_j, y_k })
    }

    pub fn y_j(&self) -> &[f64] {
        &self.y_j
    }

    pub fn y_k(&self) -> &[f64] {
        &self.y_k
    }

    pub fn n_j(&self) -> usize {
        self.y_j.len()
    }

    pub fn n_k(&self) -> usize {
        self.y_k.len()
    }

    /// The same comparison with the group roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            y_j: self.y_k.clone(),
            y_k: self.y_j.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Brute,
    Fast,
}

/// Per-unit placement averages: `g_j[i]` is the fraction of group-k outcomes
/// at or above `y_j[i]`; `g_k[i']` the fraction of group-j outcomes at or
/// below `y_k[i']`. Both means equal U_jk.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementVectors {
    pub g_j: Vec<f64>,
    pub g_k: Vec<f64>,
}

/// Number of entries in `sorted` that are <= v (exact comparisons, no epsilon).
fn count_le(sorted: &[f64], v: f64) -> usize {
    sorted.partition_point(|&x| x <= v)
}

/// Number of entries in `sorted` that are >= v.
fn count_ge(sorted: &[f64], v: f64) -> usize {
    sorted.len() - sorted.partition_point(|&x| x < v)
}

fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s
}

fn pair_count_brute(sample: &PairSample) -> u64 {
    let mut count = 0u64;
    for &yj in &sample.y_j {
        for &yk in &sample.y_k {
            if yj <= yk {
                count += 1;
            }
        }
    }
    count
}

fn pair_count_fast(sample: &PairSample) -> u64 {
    let sorted_k = sorted_copy(&sample.y_k);
    sample
        .y_j
        .iter()
        .map(|&yj| count_ge(&sorted_k, yj) as u64)
        .sum()
}

/// U_jk = (1 / n_j n_k) sum_i sum_i' I(Y_ij <= Y_i'k), in [0, 1].
pub fn compute_u(sample: &PairSample, kernel: Kernel) -> f64 {
    let count = match kernel {
        Kernel::Brute => pair_count_brute(sample),
        Kernel::Fast => pair_count_fast(sample),
    };
    count as f64 / (sample.n_j() as f64 * sample.n_k() as f64)
}

/// The classical rank-sum form n_j n_k U_jk + n_j (n_j + 1) / 2.
pub fn rank_sum_statistic(sample: &PairSample) -> f64 {
    let n_j = sample.n_j() as f64;
    let n_k = sample.n_k() as f64;
    n_j * n_k * compute_u(sample, Kernel::Fast) + n_j * (n_j + 1.0) / 2.0
}

/// Placement vectors via the fast kernel.
pub fn placements(sample: &PairSample) -> PlacementVectors {
    let sorted_j = sorted_copy(&sample.y_j);
    let sorted_k = sorted_copy(&sample.y_k);
    let n_j = sample.n_j() as f64;
    let n_k = sample.n_k() as f64;
    let g_j = sample
        .y_j
        .iter()
        .map(|&yj| count_ge(&sorted_k, yj) as f64 / n_k)
        .collect();
    let g_k = sample
        .y_k
        .iter()
        .map(|&yk| count_le(&sorted_j, yk) as f64 / n_j)
        .collect();
    PlacementVectors { g_j, g_k }
}
