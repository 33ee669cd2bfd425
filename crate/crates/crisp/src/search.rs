//! Dual-mode multi-stage query execution.
//!
//! Stage 1 streams CSR posting lists for the cells nearest the query in
//! each subspace (multi-sequence traversal) and accumulates collision
//! scores — binary in guaranteed mode, rank-weighted in optimized mode.
//! Stage 2 thresholds the scores into a candidate set with a top-score
//! fallback. Stage 3 verifies candidates: exhaustive exact L2 in
//! guaranteed mode; Hamming re-ranking plus incremental distance pruning
//! and patience-based early termination in optimized mode.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::dataset::{l2_sq, Neighbor};
use crate::error::{CrispError, Result};
use crate::index::{binarize, hamming, pad_vector, CrispIndex, CsrPostingIndex};
use crate::preprocess::rotate_query;

pub const DEFAULT_PATIENCE_FACTOR: f64 = 40.0;
pub const DEFAULT_EPS0: f64 = 2.1;
pub const DEFAULT_AD_STRIDE: usize = 32;

/// Execution mode flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Binary collision scoring and exhaustive exact verification; the
    /// regime covered by the recall lower bound.
    Guaranteed,
    /// Rank-weighted scoring, Hamming re-ranking, incremental distance
    /// pruning and patience termination.
    Optimized,
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub mode: Mode,
    /// Result count per query.
    pub k: usize,
    /// Fraction of the dataset retrieved per subspace, in (0, 1].
    pub budget_ratio: f64,
    /// Fraction of subspaces a candidate must collide in, in (0, 1];
    /// the integer threshold is ceil(ratio * M).
    pub min_collision_ratio: f64,
    /// Patience is patience_factor * k consecutive non-improving
    /// verifications; infinity disables early termination.
    pub patience_factor: f64,
    /// Safety margin of the incremental pruning rule.
    pub eps0: f64,
    /// Dimensions accumulated between pruning checks.
    pub ad_stride: usize,
}

impl SearchConfig {
    pub fn new(mode: Mode, k: usize, budget_ratio: f64, min_collision_ratio: f64) -> Self {
        Self {
            mode,
            k,
            budget_ratio,
            min_collision_ratio,
            patience_factor: DEFAULT_PATIENCE_FACTOR,
            eps0: DEFAULT_EPS0,
            ad_stride: DEFAULT_AD_STRIDE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CrispError::arg("k must be >= 1"));
        }
        if !(self.budget_ratio > 0.0 && self.budget_ratio <= 1.0) {
            return Err(CrispError::arg("budget_ratio must be in (0, 1]"));
        }
        if !(self.min_collision_ratio > 0.0 && self.min_collision_ratio <= 1.0) {
            return Err(CrispError::arg("min_collision_ratio must be in (0, 1]"));
        }
        if self.patience_factor < 0.0 || self.patience_factor.is_nan() {
            return Err(CrispError::arg("patience_factor must be >= 0"));
        }
        if self.ad_stride == 0 {
            return Err(CrispError::arg("ad_stride must be >= 1"));
        }
        Ok(())
    }
}

/// Per-query instrumentation.
#[derive(Debug, Clone, Copy, Default)]
pub struct QueryStats {
    /// Candidate set size after threshold filtering.
    pub candidates: usize,
    /// Candidates whose exact distance was fully computed.
    pub verified: usize,
    /// Candidates discarded by the incremental pruning rule.
    pub pruned: usize,
    /// Cells emitted across all subspaces.
    pub cells_visited: usize,
    /// Whether patience stopped verification before the candidate list ended.
    pub early_terminated: bool,
}

/// N-slot collision score accumulator, sparse-resettable.
#[derive(Debug)]
pub struct ScoreScratch {
    scores: Vec<u32>,
    touched: Vec<u32>,
}

impl ScoreScratch {
    pub fn new(n: usize) -> Self {
        Self {
            scores: vec![0; n],
            touched: Vec::new(),
        }
    }

    /// Zeroes only the touched slots.
    pub fn reset(&mut self) {
        for &id in &self.touched {
            self.scores[id as usize] = 0;
        }
        self.touched.clear();
    }

    #[inline]
    pub fn add(&mut self, id: u32, weight: u32) {
        let slot = &mut self.scores[id as usize];
        if *slot == 0 {
            self.touched.push(id);
        }
        *slot += weight;
    }

    #[inline]
    pub fn score(&self, id: u32) -> u32 {
        self.scores[id as usize]
    }

    /// Ids with nonzero score, in first-touch order.
    pub fn touched(&self) -> &[u32] {
        &self.touched
    }
}

/// Partial squared distances from a query half to each centroid, ascending,
/// ties by ascending centroid id.
pub fn sorted_partial_distances(q_half: &[f32], centroids: &[f32], k: usize) -> Vec<(f64, u32)> {
    let dim = q_half.len();
    debug_assert_eq!(centroids.len(), k * dim);
    let mut dists: Vec<(f64, u32)> = (0..k)
        .map(|c| (l2_sq(q_half, &centroids[c * dim..(c + 1) * dim]), c as u32))
        .collect();
    dists.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dists
}

#[derive(Debug, Clone, Copy)]
struct FrontierEntry {
    cost: f64,
    i: u32,
    j: u32,
}

impl PartialEq for FrontierEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for FrontierEntry {}

impl PartialOrd for FrontierEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FrontierEntry {
    /// Inverted so the max-heap pops the lowest (cost, i, j).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.i.cmp(&self.i))
            .then_with(|| other.j.cmp(&self.j))
    }
}

/// One emitted cell of the multi-sequence traversal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisitedCell {
    /// Cell id in centroid space: left_centroid * K + right_centroid.
    pub cell: u32,
    /// Sum of the two sorted partial distances.
    pub cost: f64,
    /// 1-based visit order.
    pub rank: usize,
}

/// Multi-sequence frontier over the K x K grid of sorted partial-distance
/// pairs; emits cells strictly in ascending cost order, each exactly once.
#[derive(Debug)]
pub struct CellCursor {
    dist_left: Vec<(f64, u32)>,
    dist_right: Vec<(f64, u32)>,
    k: usize,
    frontier: BinaryHeap<FrontierEntry>,
    visited: Vec<bool>,
    rank: usize,
}

impl CellCursor {
    /// `dist_left` / `dist_right` as produced by [`sorted_partial_distances`].
    pub fn new(dist_left: Vec<(f64, u32)>, dist_right: Vec<(f64, u32)>) -> Self {
        assert_eq!(dist_left.len(), dist_right.len());
        let k = dist_left.len();
        let mut frontier = BinaryHeap::new();
        let mut visited = vec![false; k * k];
        if k > 0 {
            frontier.push(FrontierEntry {
                cost: dist_left[0].0 + dist_right[0].0,
                i: 0,
                j: 0,
            });
            visited[0] = true;
        }
        Self {
            dist_left,
            dist_right,
            k,
            frontier,
            visited,
            rank: 0,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Pops the cheapest unvisited (i, j) pair and expands its successors.
    pub fn next_cell(&mut self) -> Option<VisitedCell> {
        let entry = self.frontier.pop()?;
        let (i, j) = (entry.i as usize, entry.j as usize);
        self.rank += 1;
        let cell = self.dist_left[i].1 * self.k as u32 + self.dist_right[j].1;
        for (ni, nj) in [(i + 1, j), (i, j + 1)] {
            if ni < self.k && nj < self.k && !self.visited[ni * self.k + nj] {
                self.visited[ni * self.k + nj] = true;
                self.frontier.push(FrontierEntry {
                    cost: self.dist_left[ni].0 + self.dist_right[nj].0,
                    i: ni as u32,
                    j: nj as u32,
                });
            }
        }
        Some(VisitedCell {
            cell,
            cost: entry.cost,
            rank: self.rank,
        })
    }
}

/// Streams cells in traversal order until `budget` ids have been retrieved
/// or the grid is exhausted; returns the retrieved count.
pub(crate) fn for_each_budgeted_cell<F>(
    cursor: &mut CellCursor,
    postings: &CsrPostingIndex,
    subspace: usize,
    budget: usize,
    mut f: F,
) -> usize
where
    F: FnMut(&VisitedCell, &[u32]),
{
    let mut retrieved = 0usize;
    while retrieved < budget {
        let Some(visited) = cursor.next_cell() else {
            break;
        };
        let ids = postings.cell_ids(subspace, visited.cell as usize);
        f(&visited, ids);
        retrieved += ids.len();
    }
    retrieved
}

/// Stage 1 for one subspace: weight 2 for the first k cells in optimized
/// mode, 1 otherwise, accumulated for every id streamed from the CSR runs.
pub fn accumulate_subspace(
    cursor: &mut CellCursor,
    postings: &CsrPostingIndex,
    subspace: usize,
    scratch: &mut ScoreScratch,
    config: &SearchConfig,
    budget: usize,
) -> usize {
    let weighted = config.mode == Mode::Optimized;
    let k = config.k;
    for_each_budgeted_cell(cursor, postings, subspace, budget, |visited, ids| {
        let w = if weighted && visited.rank <= k { 2 } else { 1 };
        for &id in ids {
            scratch.add(id, w);
        }
    })
}

/// Stage 2: candidates scoring at least tau = ceil(ratio * M); when fewer
/// than k survive, fall back to the top-scoring touched ids.
pub fn filter_candidates(scratch: &ScoreScratch, config: &SearchConfig, m: usize) -> Vec<u32> {
    let tau = (config.min_collision_ratio * m as f64).ceil().max(1.0) as u32;
    let mut survivors: Vec<u32> = scratch
        .touched()
        .iter()
        .copied()
        .filter(|&id| scratch.score(id) >= tau)
        .collect();
    survivors.sort_unstable();
    if survivors.len() >= config.k {
        return survivors;
    }
    let mut ranked: Vec<u32> = scratch.touched().to_vec();
    ranked.sort_unstable_by(|&a, &b| {
        scratch
            .score(b)
            .cmp(&scratch.score(a))
            .then_with(|| a.cmp(&b))
    });
    ranked.truncate(config.k.min(scratch.touched().len()));
    ranked
}

/// Stage 2 refinement (optimized mode): stable ascending sort by Hamming
/// distance to the query code; ties keep their prior order.
pub fn hamming_rerank(candidates: &mut [u32], query_code: &[u64], codes: &[u64], words: usize) {
    candidates.sort_by_key(|&id| {
        let code = &codes[id as usize * words..(id as usize + 1) * words];
        hamming(query_code, code)
    });
}

/// Incremental distance computation with the relative-error pruning rule:
/// at every `ad_stride` dimensions, prune once the partial sum exceeds
/// `r_k_sq * (t/D) * (1 + eps0/sqrt(t))^2`. Returns the exact squared
/// distance if the candidate survives every checkpoint.
pub fn adsampling_verify(
    query: &[f32],
    point: &[f32],
    r_k_sq: f64,
    config: &SearchConfig,
) -> Option<f64> {
    let d = query.len();
    debug_assert_eq!(point.len(), d);
    let mut acc = 0.0f64;
    let mut t = 0usize;
    while t < d {
        let end = (t + config.ad_stride).min(d);
        for i in t..end {
            let diff = (query[i] - point[i]) as f64;
            acc += diff * diff;
        }
        t = end;
        if t < d {
            let margin = 1.0 + config.eps0 / (t as f64).sqrt();
            let threshold = r_k_sq * (t as f64 / d as f64) * margin * margin;
            if acc > threshold {
                return None;
            }
        }
    }
    Some(acc)
}

/// Bounded ascending (distance, id) list.
struct TopK {
    k: usize,
    entries: Vec<(f64, u32)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            entries: Vec::with_capacity(k + 1),
        }
    }

    /// Squared distance of the current k-th best; infinity until k entries
    /// have been gathered.
    fn r_k_sq(&self) -> f64 {
        if self.entries.len() < self.k {
            f64::INFINITY
        } else {
            self.entries.last().map(|e| e.0).unwrap_or(f64::INFINITY)
        }
    }

    /// Inserts when the entry belongs in the top k; returns whether the
    /// top-k content changed.
    fn insert(&mut self, dist: f64, id: u32) -> bool {
        let entry = (dist, id);
        if self.entries.len() == self.k {
            let worst = *self.entries.last().unwrap();
            if cmp_entry(&entry, &worst) != Ordering::Less {
                return false;
            }
            self.entries.pop();
        }
        let pos = self
            .entries
            .partition_point(|e| cmp_entry(e, &entry) == Ordering::Less);
        self.entries.insert(pos, entry);
        true
    }

    fn into_neighbors(self) -> Vec<Neighbor> {
        self.entries
            .into_iter()
            .map(|(dist_sq, id)| Neighbor { id, dist_sq })
            .collect()
    }
}

#[inline]
fn cmp_entry(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Full query execution; returns up to k neighbors ascending by distance
/// (ties by ascending id).
pub fn search(index: &CrispIndex, query: &[f32], config: &SearchConfig) -> Result<Vec<Neighbor>> {
    search_with_stats(index, query, config).map(|(neighbors, _)| neighbors)
}

/// [`search`] plus per-query instrumentation.
pub fn search_with_stats(
    index: &CrispIndex,
    query: &[f32],
    config: &SearchConfig,
) -> Result<(Vec<Neighbor>, QueryStats)> {
    config.validate()?;
    let n = index.n();
    if config.k > n {
        return Err(CrispError::arg(format!(
            "k {} exceeds indexed point count {}",
            config.k, n
        )));
    }
    if query.len() != index.d() {
        return Err(CrispError::arg(format!(
            "query dimension {} does not match index dimension {}",
            query.len(),
            index.d()
        )));
    }

    let rotated = rotate_query(query, index.rotation())?;
    let padded = pad_vector(&rotated, index.padded_d());
    let mut stats = QueryStats::default();

    let budget = ((config.budget_ratio * n as f64).ceil() as usize).max(1);
    let dims = index.codebooks().dims_per_subspace();
    let half = index.codebooks().half_dim();
    let mut scratch = ScoreScratch::new(n);
    for s in 0..index.m() {
        let q_sub = &padded[s * dims..(s + 1) * dims];
        let dist_left = sorted_partial_distances(&q_sub[..half], index.codebooks().left(s), index.k());
        let dist_right =
            sorted_partial_distances(&q_sub[half..], index.codebooks().right(s), index.k());
        let mut cursor = CellCursor::new(dist_left, dist_right);
        accumulate_subspace(
            &mut cursor,
            index.postings(),
            s,
            &mut scratch,
            config,
            budget,
        );
        stats.cells_visited += cursor.rank();
    }

    let mut candidates = filter_candidates(&scratch, config, index.m());
    stats.candidates = candidates.len();

    let mut top = TopK::new(config.k);
    match config.mode {
        Mode::Guaranteed => {
            for &id in &candidates {
                let dist = l2_sq(&padded, index.stored_data().row(id as usize));
                top.insert(dist, id);
            }
            stats.verified = candidates.len();
        }
        Mode::Optimized => {
            let query_code = binarize(&padded);
            hamming_rerank(
                &mut candidates,
                &query_code,
                index.binary_codes_flat(),
                index.words_per_code(),
            );
            let patience_limit = config.patience_factor * config.k as f64;
            let mut patience = 0usize;
            for (visited, &id) in candidates.iter().enumerate() {
                match adsampling_verify(
                    &padded,
                    index.stored_data().row(id as usize),
                    top.r_k_sq(),
                    config,
                ) {
                    Some(dist) => {
                        stats.verified += 1;
                        if top.insert(dist, id) {
                            patience = 0;
                        } else {
                            patience += 1;
                        }
                    }
                    None => {
                        stats.pruned += 1;
                        patience += 1;
                    }
                }
                if patience as f64 >= patience_limit {
                    stats.early_terminated = visited + 1 < candidates.len();
                    break;
                }
            }
        }
    }
    Ok((top.into_neighbors(), stats))
}
