//! Recall lower bound for guaranteed mode and its empirical validation.
//!
//! With independent subspace collisions, the collision count of the true
//! nearest neighbor is Binomial(M, p*); the candidate threshold tau is
//! missed with probability at most exp(-2(Mp* - tau)^2 / M), so retrieval
//! succeeds with probability at least one minus that. The bound only holds
//! when the expected collision count Mp* strictly exceeds tau.

use rayon::prelude::*;

use crate::dataset::{DatasetMatrix, GroundTruth};
use crate::error::{CrispError, Result};
use crate::index::{assign_cell, CrispIndex};
use crate::preprocess::rotate_query;
use crate::rng::{derive_seed, rng_from};
use crate::search::{
    for_each_budgeted_cell, CellCursor, SearchConfig, sorted_partial_distances,
};

/// Inputs to the recall lower bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInput {
    /// Subspace count M.
    pub m: usize,
    /// Single-subspace collision probability of the true nearest neighbor.
    pub p_star: f64,
    /// Integer collision threshold tau.
    pub tau: usize,
}

/// Lower bound on the probability that the true nearest neighbor enters the
/// candidate set: `1 - exp(-2(Mp* - tau)^2 / M)`.
///
/// Returns `None` (vacuous) unless `M * p_star > tau` strictly.
pub fn hoeffding_recall_bound(input: &BoundInput) -> Option<f64> {
    let m = input.m as f64;
    let mu = m * input.p_star;
    let tau = input.tau as f64;
    if input.m == 0 || mu.is_nan() || mu <= tau {
        return None;
    }
    let deviation = mu - tau;
    Some(1.0 - (-2.0 * deviation * deviation / m).exp())
}

/// Exact lower tail P(S < tau) for S ~ Binomial(m, p), by direct summation.
///
/// Coefficients use plain f64 products for small m and log-space beyond
/// m = 60 to avoid overflow.
pub fn exact_binomial_failure(m: usize, p: f64, tau: usize) -> f64 {
    assert!((0.0..=1.0).contains(&p), "p must be a probability");
    if tau == 0 {
        return 0.0;
    }
    if tau > m {
        return 1.0;
    }
    if p == 0.0 {
        return 1.0; // S = 0 < tau almost surely (tau >= 1 here)
    }
    if p == 1.0 {
        return 0.0; // S = m >= tau almost surely (tau <= m here)
    }
    let ln_p = p.ln();
    let ln_q = (1.0 - p).ln();
    let mut total = 0.0f64;
    if m <= 60 {
        let mut binom = 1.0f64;
        for i in 0..tau {
            if i > 0 {
                binom = binom * (m - i + 1) as f64 / i as f64;
            }
            total += binom * (ln_p * i as f64 + ln_q * (m - i) as f64).exp();
        }
    } else {
        let mut ln_binom = 0.0f64;
        for i in 0..tau {
            if i > 0 {
                ln_binom += ((m - i + 1) as f64).ln() - (i as f64).ln();
            }
            total += (ln_binom + ln_p * i as f64 + ln_q * (m - i) as f64).exp();
        }
    }
    total.clamp(0.0, 1.0)
}

/// Monte Carlo estimate of P(S < tau): draws `trials` Binomial(m, p)
/// samples and returns the failure fraction. Deterministic per seed;
/// trials run in fixed blocks with per-block derived RNG streams.
pub fn simulate_collision_retrieval(
    m: usize,
    p: f64,
    tau: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(CrispError::arg("simulation needs at least one trial"));
    }
    const BLOCK: usize = 4096;
    let blocks = trials.div_ceil(BLOCK);
    let failures: u64 = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_from(derive_seed(seed, 0x5349_4d00 ^ b as u64));
            let count = BLOCK.min(trials - b * BLOCK);
            let mut fails = 0u64;
            for _ in 0..count {
                let mut collisions = 0usize;
                for _ in 0..m {
                    if rand::Rng::random::<f64>(&mut rng) < p {
                        collisions += 1;
                    }
                }
                if collisions < tau {
                    fails += 1;
                }
            }
            fails
        })
        .sum();
    Ok(failures as f64 / trials as f64)
}

/// Measures per-query single-subspace collision probabilities of the true
/// nearest neighbor by replaying the guaranteed-mode traversal: for each
/// query, the fraction of subspaces whose activated cells contain the cell
/// of `gt` row's first id.
pub fn estimate_p_star(
    index: &CrispIndex,
    queries: &DatasetMatrix,
    gt: &GroundTruth,
    config: &SearchConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if gt.q() != queries.n() {
        return Err(CrispError::arg(
            "ground truth row count must match query count",
        ));
    }
    if gt.k() == 0 {
        return Err(CrispError::arg("ground truth must hold at least one id"));
    }
    let n = index.n();
    let budget = ((config.budget_ratio * n as f64).ceil() as usize).max(1);
    let dims = index.codebooks().dims_per_subspace();
    let half = index.codebooks().half_dim();

    (0..queries.n())
        .into_par_iter()
        .map(|qi| {
            let nn = gt.row(qi)[0];
            if nn < 0 || nn as usize >= n {
                return Err(CrispError::arg(format!(
                    "ground truth id {nn} out of range"
                )));
            }
            let nn_row = index.stored_data().row(nn as usize);
            let rotated = rotate_query(queries.row(qi), index.rotation())?;
            let padded = crate::index::pad_vector(&rotated, index.padded_d());
            let mut collisions = 0usize;
            for s in 0..index.m() {
                let target_cell = assign_cell(
                    &nn_row[s * dims..(s + 1) * dims],
                    index.codebooks().left(s),
                    index.codebooks().right(s),
                    index.k(),
                );
                let q_sub = &padded[s * dims..(s + 1) * dims];
                let dl = sorted_partial_distances(&q_sub[..half], index.codebooks().left(s), index.k());
                let dr =
                    sorted_partial_distances(&q_sub[half..], index.codebooks().right(s), index.k());
                let mut cursor = CellCursor::new(dl, dr);
                let mut hit = false;
                for_each_budgeted_cell(&mut cursor, index.postings(), s, budget, |visited, _| {
                    if visited.cell == target_cell {
                        hit = true;
                    }
                });
                if hit {
                    collisions += 1;
                }
            }
            Ok(collisions as f64 / index.m() as f64)
        })
        .collect()
}
