//! Sequential treatment-assignment generators and balance diagnostics.
//!
//! All generators are deterministic under a fixed seed. Independent
//! substreams (per stratum, per replication) are derived from the master
//! seed with a splitmix64 counter so parallel use is schedule-independent.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::domain::DesignSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SchemeKind {
    Simple,
    StratifiedBlock {
        block_size: usize,
    },
    Minimization {
        /// One weight per balancing factor; uniform by default.
        #[serde(default)]
        factor_weights: Option<Vec<f64>>,
        /// Biased-coin probability of taking the imbalance-minimizing arm.
        #[serde(default = "default_biased_coin")]
        biased_coin: f64,
    },
}

fn default_biased_coin() -> f64 {
    0.75
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomizationScheme {
    pub kind: SchemeKind,
    pub pi: Vec<f64>,
    pub seed: u64,
}

impl RandomizationScheme {
    pub fn simple(pi: Vec<f64>, seed: u64) -> Self {
        Self {
            kind: SchemeKind::Simple,
            pi,
            seed,
        }
    }

    pub fn stratified_block(pi: Vec<f64>, block_size: usize, seed: u64) -> Self {
        Self {
            kind: SchemeKind::StratifiedBlock { block_size },
            pi,
            seed,
        }
    }

    pub fn minimization(pi: Vec<f64>, biased_coin: f64, seed: u64) -> Self {
        Self {
            kind: SchemeKind::Minimization {
                factor_weights: None,
                biased_coin,
            },
            pi,
            seed,
        }
    }

    pub fn num_arms(&self) -> usize {
        self.pi.len()
    }

    fn validate(&self) -> Result<()> {
        if self.pi.len() < 2 {
            return Err(Error::InvalidDesign("need at least 2 arms".into()));
        }
        if self.pi.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::InvalidDesign("all pi must be positive".into()));
        }
        let sum: f64 = self.pi.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDesign(format!("pi sums to {sum}")));
        }
        match &self.kind {
            SchemeKind::StratifiedBlock { block_size } => {
                block_composition(*block_size, &self.pi)?;
            }
            SchemeKind::Minimization {
                biased_coin,
                factor_weights,
            } => {
                if !(*biased_coin > 0.5 && *biased_coin <= 1.0) {
                    return Err(Error::InvalidDesign(format!(
                        "biased coin probability must be in (0.5, 1], got {biased_coin}"
                    )));
                }
                if let Some(w) = factor_weights {
                    if w.iter().any(|&x| !(x >= 0.0)) {
                        return Err(Error::InvalidDesign(
                            "factor weights must be non-negative".into(),
                        ));
                    }
                }
            }
            SchemeKind::Simple => {}
        }
        Ok(())
    }
}

/// splitmix64 step; derives independent substream seeds from a master seed.
pub fn substream_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn rng_for(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Arm counts per block: block_size * pi_j, which must be a positive integer.
fn block_composition(block_size: usize, pi: &[f64]) -> Result<Vec<usize>> {
    let mut counts = Vec::with_capacity(pi.len());
    for (idx, &p) in pi.iter().enumerate() {
        let exact = block_size as f64 * p;
        let rounded = exact.round();
        if rounded < 1.0 || (exact - rounded).abs() > 1e-9 {
            return Err(Error::IncompatibleBlockSize {
                block_size,
                arm: idx + 1,
                product: exact,
            });
        }
        counts.push(rounded as usize);
    }
    Ok(counts)
}

fn draw_arm(pi: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (idx, &p) in pi.iter().enumerate() {
        cum += p;
        if u < cum {
            return idx + 1;
        }
    }
    pi.len()
}

/// Simple randomization: i.i.d. arms with P(A = j) = pi_j.
pub fn assign_simple(n: usize, scheme: &RandomizationScheme) -> Result<Vec<usize>> {
    scheme.validate()?;
    let mut rng = rng_for(scheme.seed);
    Ok((0..n).map(|_| draw_arm(&scheme.pi, &mut rng)).collect())
}

fn shuffled_block(composition: &[usize], rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut block: Vec<usize> = composition
        .iter()
        .enumerate()
        .flat_map(|(idx, &c)| std::iter::repeat(idx + 1).take(c))
        .collect();
    // Fisher-Yates
    for i in (1..block.len()).rev() {
        let j = rng.random_range(0..=i);
        block.swap(i, j);
    }
    block
}

/// Stratified permuted block: within each stratum, assignments come from
/// successive independently shuffled fixed-composition blocks. An incomplete
/// final block is a full shuffled block consumed partially.
pub fn assign_stratified_block(
    strata: &[usize],
    scheme: &RandomizationScheme,
) -> Result<Vec<usize>> {
    scheme.validate()?;
    let block_size = match scheme.kind {
        SchemeKind::StratifiedBlock { block_size } => block_size,
        _ => {
            return Err(Error::InvalidDesign(
                "scheme kind must be stratified_block".into(),
            ))
        }
    };
    let composition = block_composition(block_size, &scheme.pi)?;

    let mut assignments = vec![0usize; strata.len()];
    let mut streams: BTreeMap<usize, (ChaCha12Rng, Vec<usize>)> = BTreeMap::new();
    for (i, &z) in strata.iter().enumerate() {
        let (rng, buffer) = streams
            .entry(z)
            .or_insert_with(|| (rng_for(substream_seed(scheme.seed, z as u64)), Vec::new()));
        if buffer.is_empty() {
            *buffer = shuffled_block(&composition, rng);
        }
        assignments[i] = buffer.pop().unwrap();
    }
    Ok(assignments)
}

/// Sample one of `candidates` with probability proportional to its target
/// allocation.
fn pick_weighted(candidates: &[usize], pi: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let total: f64 = candidates.iter().map(|&c| pi[c]).sum();
    let mut point = rng.random::<f64>() * total;
    for &c in candidates {
        point -= pi[c];
        if point <= 0.0 {
            return c;
        }
    }
    *candidates.last().expect("non-empty candidate set")
}

/// Pocock-Simon minimization: each unit goes to the arm minimizing the
/// weighted sum over factors of the range of (count - expected) deviations
/// at the target allocation, taken with probability `biased_coin`; all
/// random picks are weighted by the target proportions.
pub fn assign_minimization(
    covariate_levels: &[Vec<usize>],
    scheme: &RandomizationScheme,
) -> Result<Vec<usize>> {
    scheme.validate()?;
    let (weights, p_mz) = match &scheme.kind {
        SchemeKind::Minimization {
            factor_weights,
            biased_coin,
        } => (factor_weights.clone(), *biased_coin),
        _ => {
            return Err(Error::InvalidDesign(
                "scheme kind must be minimization".into(),
            ))
        }
    };
    let num_factors = covariate_levels.first().map_or(0, |l| l.len());
    if num_factors == 0 {
        return Err(Error::InvalidInput(
            "minimization needs at least one balancing factor".into(),
        ));
    }
    if covariate_levels.iter().any(|l| l.len() != num_factors) {
        return Err(Error::InvalidInput(
            "inconsistent factor tuple lengths".into(),
        ));
    }
    let weights = weights.unwrap_or_else(|| vec![1.0; num_factors]);
    if weights.len() != num_factors {
        return Err(Error::InvalidDesign(format!(
            "{} factor weights for {num_factors} factors",
            weights.len()
        )));
    }

    let arms = scheme.num_arms();
    let mut rng = rng_for(scheme.seed);
    // counts[factor][level][arm]
    let mut counts: Vec<BTreeMap<usize, Vec<f64>>> = vec![BTreeMap::new(); num_factors];
    let mut assignments = Vec::with_capacity(covariate_levels.len());

    for levels in covariate_levels {
        let mut scores = vec![0.0f64; arms];
        for candidate in 0..arms {
            let mut total = 0.0;
            for (f, (&level, &w)) in levels.iter().zip(&weights).enumerate() {
                let level_counts = counts[f].entry(level).or_insert_with(|| vec![0.0; arms]);
                let level_total: f64 = level_counts.iter().sum();
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for arm in 0..arms {
                    let hypothetical = level_counts[arm] + if arm == candidate { 1.0 } else { 0.0 };
                    // deviation from the expected count at the target
                    // allocation; bounded steps for every arm, so the level
                    // composition converges to pi exactly
                    let centered = hypothetical - (level_total + 1.0) * scheme.pi[arm];
                    lo = lo.min(centered);
                    hi = hi.max(centered);
                }
                total += w * (hi - lo);
            }
            scores[candidate] = total;
        }

        let best = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let minimizers: Vec<usize> = (0..arms).filter(|&a| scores[a] <= best + 1e-12).collect();
        // every random pick is weighted by the target proportions, so unequal
        // allocations keep their marginal frequencies
        let chosen = if minimizers.len() == arms || rng.random::<f64>() < p_mz {
            pick_weighted(&minimizers, &scheme.pi, &mut rng)
        } else {
            let rest: Vec<usize> = (0..arms).filter(|a| !minimizers.contains(a)).collect();
            pick_weighted(&rest, &scheme.pi, &mut rng)
        };

        for (f, &level) in levels.iter().enumerate() {
            counts[f].get_mut(&level).unwrap()[chosen] += 1.0;
        }
        assignments.push(chosen + 1);
    }
    Ok(assignments)
}

/// Per-stratum arm counts and the condition-(D) balance deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceDiagnostic {
    /// stratum -> per-arm counts n_zj
    pub stratum_counts: BTreeMap<usize, Vec<usize>>,
    /// max over (z, j) of |n_zj / n_z - pi_j|
    pub max_deviation: f64,
}

pub fn balance_report(
    assignments: &[usize],
    strata: &[usize],
    design: &DesignSpec,
) -> Result<BalanceDiagnostic> {
    if assignments.len() != strata.len() {
        return Err(Error::LengthMismatch {
            column: "strata",
            expected: assignments.len(),
            got: strata.len(),
        });
    }
    let arms = design.num_treatments();
    let mut stratum_counts: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&a, &z) in assignments.iter().zip(strata) {
        if a < 1 || a > arms {
            return Err(Error::LabelOutOfRange {
                label: a,
                num_treatments: arms,
            });
        }
        stratum_counts.entry(z).or_insert_with(|| vec![0; arms])[a - 1] += 1;
    }
    let mut max_deviation = 0.0f64;
    for counts in stratum_counts.values() {
        let n_z: usize = counts.iter().sum();
        for (idx, &c) in counts.iter().enumerate() {
            let dev = (c as f64 / n_z as f64 - design.pi[idx]).abs();
            max_deviation = max_deviation.max(dev);
        }
    }
    Ok(BalanceDiagnostic {
        stratum_counts,
        max_deviation,
    })
}
