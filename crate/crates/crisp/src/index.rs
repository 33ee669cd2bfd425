//! Inverted multi-index construction with a cache-coherent CSR layout.
//!
//! Each of the M subspaces is split into two halves, each half quantized by
//! a K-centroid codebook. A point's cell in a subspace is the Cartesian pair
//! of its nearest half-centroids. The per-subspace inverted index is stored
//! as an Offsets array (K^2+1 entries) delimiting runs inside one contiguous
//! N-entry id array, sorted by cell.

use rayon::prelude::*;

use crate::dataset::{l2_sq, DatasetMatrix};
use crate::error::{CrispError, Result};
use crate::kmeans::kmeans;
use crate::preprocess::{maybe_rotate, RotationRecord, DEFAULT_TAU_CEV};
use crate::rng::{derive_seed, rng_from};

/// Centroids per subspace half, following the collision-index convention.
pub const DEFAULT_CENTROIDS: usize = 50;
/// Lloyd iterations used for codebook training.
pub const DEFAULT_KMEANS_ITERS: usize = 20;
/// At most this many points feed each codebook's training run.
pub const MAX_TRAIN_SAMPLE: usize = 100_000;

const TRAIN_SAMPLE_TAG: u64 = 0x5452_4149;
const CODEBOOK_TAG: u64 = 0x434f_4445;

/// Per-subspace pair of K-centroid codebooks over the two subspace halves.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceCodebooks {
    m: usize,
    k: usize,
    dims_per_subspace: usize,
    /// Per subspace: k x (dims_per_subspace/2) floats, row-major.
    left: Vec<Vec<f32>>,
    right: Vec<Vec<f32>>,
}

impl SubspaceCodebooks {
    pub(crate) fn from_parts(
        m: usize,
        k: usize,
        dims_per_subspace: usize,
        left: Vec<Vec<f32>>,
        right: Vec<Vec<f32>>,
    ) -> Result<Self> {
        let half = dims_per_subspace / 2;
        if !dims_per_subspace.is_multiple_of(2) || half == 0 {
            return Err(CrispError::format("subspace dims must be even and >= 2"));
        }
        if left.len() != m || right.len() != m {
            return Err(CrispError::format("codebook count must equal m"));
        }
        for side in [&left, &right] {
            for cb in side {
                if cb.len() != k * half {
                    return Err(CrispError::format("codebook must hold k x half floats"));
                }
                if cb.iter().any(|v| !v.is_finite()) {
                    return Err(CrispError::format("codebook centroid is not finite"));
                }
            }
        }
        Ok(Self {
            m,
            k,
            dims_per_subspace,
            left,
            right,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dims_per_subspace(&self) -> usize {
        self.dims_per_subspace
    }

    pub fn half_dim(&self) -> usize {
        self.dims_per_subspace / 2
    }

    pub fn left(&self, subspace: usize) -> &[f32] {
        &self.left[subspace]
    }

    pub fn right(&self, subspace: usize) -> &[f32] {
        &self.right[subspace]
    }
}

/// Per-subspace CSR posting lists: `offsets[m]` has K^2+1 monotone entries
/// delimiting cell runs inside the contiguous N-entry `ids[m]` array.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrPostingIndex {
    cells: usize,
    offsets: Vec<Vec<u64>>,
    ids: Vec<Vec<u32>>,
}

impl CsrPostingIndex {
    pub(crate) fn from_parts(
        cells: usize,
        n: usize,
        offsets: Vec<Vec<u64>>,
        ids: Vec<Vec<u32>>,
    ) -> Result<Self> {
        if offsets.len() != ids.len() {
            return Err(CrispError::format("offsets/ids subspace count mismatch"));
        }
        for (offs, id_arr) in offsets.iter().zip(&ids) {
            if offs.len() != cells + 1 {
                return Err(CrispError::format("offsets array must have K^2+1 entries"));
            }
            if offs[0] != 0 || *offs.last().unwrap() != n as u64 {
                return Err(CrispError::format("offsets must span [0, N]"));
            }
            if offs.windows(2).any(|w| w[0] > w[1]) {
                return Err(CrispError::format("offsets must be non-decreasing"));
            }
            if id_arr.len() != n {
                return Err(CrispError::format("ids array must have exactly N entries"));
            }
        }
        Ok(Self {
            cells,
            offsets,
            ids,
        })
    }

    pub fn subspaces(&self) -> usize {
        self.offsets.len()
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn offsets(&self, subspace: usize) -> &[u64] {
        &self.offsets[subspace]
    }

    pub fn ids(&self, subspace: usize) -> &[u32] {
        &self.ids[subspace]
    }

    /// The contiguous id run for one cell.
    #[inline]
    pub fn cell_ids(&self, subspace: usize, cell: usize) -> &[u32] {
        let offs = &self.offsets[subspace];
        let lo = offs[cell] as usize;
        let hi = offs[cell + 1] as usize;
        &self.ids[subspace][lo..hi]
    }
}

/// Build-time parameters.
#[derive(Debug, Clone)]
pub struct BuildParams {
    /// Number of subspaces (M). Required; no universally good default.
    pub subspaces: usize,
    /// Centroids per subspace half (K).
    pub centroids: usize,
    /// Spectral gate threshold for the adaptive rotation.
    pub tau_cev: f64,
    pub seed: u64,
    pub kmeans_iters: usize,
    /// Zero-pad D up to the next multiple of 2M instead of rejecting.
    pub pad: bool,
}

impl BuildParams {
    pub fn new(subspaces: usize) -> Self {
        Self {
            subspaces,
            centroids: DEFAULT_CENTROIDS,
            tau_cev: DEFAULT_TAU_CEV,
            seed: 0,
            kmeans_iters: DEFAULT_KMEANS_ITERS,
            pad: true,
        }
    }
}

/// The assembled index: rotation record, codebooks, CSR postings, packed
/// binary codes and the stored (possibly rotated, possibly padded) corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CrispIndex {
    pub(crate) rotation: RotationRecord,
    pub(crate) codebooks: SubspaceCodebooks,
    pub(crate) postings: CsrPostingIndex,
    /// n x words_per_code packed sign bits.
    pub(crate) binary_codes: Vec<u64>,
    pub(crate) words_per_code: usize,
    pub(crate) data: DatasetMatrix,
    pub(crate) original_d: usize,
}

impl CrispIndex {
    pub fn n(&self) -> usize {
        self.data.n()
    }

    /// Dimensionality queries must arrive in (pre-padding).
    pub fn d(&self) -> usize {
        self.original_d
    }

    pub fn padded_d(&self) -> usize {
        self.data.d()
    }

    pub fn m(&self) -> usize {
        self.codebooks.m()
    }

    pub fn k(&self) -> usize {
        self.codebooks.k()
    }

    pub fn rotation(&self) -> &RotationRecord {
        &self.rotation
    }

    pub fn codebooks(&self) -> &SubspaceCodebooks {
        &self.codebooks
    }

    pub fn postings(&self) -> &CsrPostingIndex {
        &self.postings
    }

    /// The stored corpus (rotated and padded as recorded in the header).
    pub fn stored_data(&self) -> &DatasetMatrix {
        &self.data
    }

    pub fn words_per_code(&self) -> usize {
        self.words_per_code
    }

    #[inline]
    pub fn binary_code(&self, i: usize) -> &[u64] {
        &self.binary_codes[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    pub(crate) fn binary_codes_flat(&self) -> &[u64] {
        &self.binary_codes
    }

    /// Exact logical size of every index component in bytes:
    /// raw data + per-subspace ids and offsets + codebooks + binary codes
    /// + the rotation matrix when it was applied.
    pub fn logical_bytes(&self) -> u64 {
        let n = self.n() as u64;
        let padded_d = self.padded_d() as u64;
        let m = self.m() as u64;
        let k = self.k() as u64;
        let data = 4 * n * padded_d;
        let ids = 4 * m * n;
        let offsets = 8 * m * (k * k + 1);
        let codebooks = 4 * 2 * m * k * (self.codebooks.half_dim() as u64);
        let codes = 8 * self.words_per_code as u64 * n;
        let rotation = if self.rotation.applied() {
            4 * (self.original_d as u64) * (self.original_d as u64)
        } else {
            0
        };
        data + ids + offsets + codebooks + codes + rotation
    }
}

/// Nearest-centroid cell for one subspace vector: `i*K + j` where i and j
/// are the closest left- and right-half centroids, ties toward lower ids.
pub fn assign_cell(x_sub: &[f32], left: &[f32], right: &[f32], k: usize) -> u32 {
    let half = x_sub.len() / 2;
    debug_assert_eq!(left.len(), k * half);
    debug_assert_eq!(right.len(), k * half);
    let i = argmin_centroid(&x_sub[..half], left, half, k);
    let j = argmin_centroid(&x_sub[half..], right, half, k);
    i * k as u32 + j
}

#[inline]
fn argmin_centroid(x: &[f32], centroids: &[f32], dim: usize, k: usize) -> u32 {
    let mut best = 0u32;
    let mut best_dist = f64::INFINITY;
    for c in 0..k {
        let dist = l2_sq(x, &centroids[c * dim..(c + 1) * dim]);
        if dist < best_dist {
            best_dist = dist;
            best = c as u32;
        }
    }
    best
}

/// Sign quantization: bit i set iff x[i] > 0, packed LSB-first into u64
/// words, ceil(len/64) of them.
pub fn binarize(x: &[f32]) -> Vec<u64> {
    let words = x.len().div_ceil(64);
    let mut code = vec![0u64; words];
    for (i, &v) in x.iter().enumerate() {
        if v > 0.0 {
            code[i / 64] |= 1u64 << (i % 64);
        }
    }
    code
}

/// Hamming distance between two packed codes.
#[inline]
pub fn hamming(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x ^ y).count_ones())
        .sum()
}

/// Materializes per-subspace CSR arrays from cell assignments laid out as
/// `assignments[point * m + subspace]`: a counting sort per subspace, so
/// ids within a cell keep ascending order.
pub(crate) fn build_postings(
    assignments: &[u32],
    n: usize,
    m: usize,
    cells: usize,
) -> Result<CsrPostingIndex> {
    let per_subspace: Vec<(Vec<u64>, Vec<u32>)> = (0..m)
        .into_par_iter()
        .map(|s| {
            let mut counts = vec![0u64; cells];
            for i in 0..n {
                counts[assignments[i * m + s] as usize] += 1;
            }
            let mut offsets = vec![0u64; cells + 1];
            for c in 0..cells {
                offsets[c + 1] = offsets[c] + counts[c];
            }
            let mut cursor: Vec<u64> = offsets[..cells].to_vec();
            let mut ids = vec![0u32; n];
            for i in 0..n {
                let cell = assignments[i * m + s] as usize;
                ids[cursor[cell] as usize] = i as u32;
                cursor[cell] += 1;
            }
            (offsets, ids)
        })
        .collect();
    let (offsets, ids): (Vec<_>, Vec<_>) = per_subspace.into_iter().unzip();
    CsrPostingIndex::from_parts(cells, n, offsets, ids)
}

/// Zero-pads every row of `data` out to `padded_d` columns.
pub(crate) fn pad_dataset(data: &DatasetMatrix, padded_d: usize) -> DatasetMatrix {
    if padded_d == data.d() {
        return data.clone();
    }
    let mut out = DatasetMatrix::zeros(data.n(), padded_d);
    for i in 0..data.n() {
        out.row_mut(i)[..data.d()].copy_from_slice(data.row(i));
    }
    out
}

/// Zero-pads one query vector.
pub(crate) fn pad_vector(q: &[f32], padded_d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; padded_d];
    out[..q.len()].copy_from_slice(q);
    out
}

/// Full construction pipeline: adaptive rotation, zero-padding, codebook
/// training, cell assignment, CSR materialization and binary codes.
pub fn build_index(mut data: DatasetMatrix, params: &BuildParams) -> Result<CrispIndex> {
    let n = data.n();
    let d = data.d();
    let m = params.subspaces;
    let k = params.centroids;
    if m == 0 {
        return Err(CrispError::arg("subspace count must be >= 1"));
    }
    if k == 0 {
        return Err(CrispError::arg("centroid count must be >= 1"));
    }
    if n == 0 || d == 0 {
        return Err(CrispError::arg("cannot index an empty dataset"));
    }
    if n < k {
        return Err(CrispError::arg(format!(
            "dataset size {n} must be at least the centroid count {k}"
        )));
    }
    if n > i32::MAX as usize {
        return Err(CrispError::arg("dataset exceeds 2^31-1 points"));
    }
    let block = 2 * m;
    let padded_d = if d.is_multiple_of(block) {
        d
    } else if params.pad {
        d.div_ceil(block) * block
    } else {
        return Err(CrispError::arg(format!(
            "dimension {d} is not divisible by 2*M = {block} and padding is disabled"
        )));
    };

    let rotation = maybe_rotate(&mut data, params.tau_cev, params.seed)?;
    let data = if padded_d == d {
        data
    } else {
        pad_dataset(&data, padded_d)
    };

    let dims_per_subspace = padded_d / m;
    let half = dims_per_subspace / 2;

    // codebooks train on a bounded row sample, one seeded stream per half
    let train_rows: Vec<usize> = if n > MAX_TRAIN_SAMPLE {
        let mut rng = rng_from(derive_seed(params.seed, TRAIN_SAMPLE_TAG));
        let mut idx = rand::seq::index::sample(&mut rng, n, MAX_TRAIN_SAMPLE).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };

    let halves: Vec<(usize, usize)> = (0..m).flat_map(|s| [(s, 0), (s, 1)]).collect();
    let trained: Result<Vec<Vec<f32>>> = halves
        .par_iter()
        .map(|&(s, side)| {
            let start = s * dims_per_subspace + side * half;
            let mut train = Vec::with_capacity(train_rows.len() * half);
            for &row in &train_rows {
                train.extend_from_slice(&data.row(row)[start..start + half]);
            }
            let seed = derive_seed(params.seed, CODEBOOK_TAG ^ (2 * s + side) as u64);
            Ok(kmeans(&train, half, k, params.kmeans_iters, seed)?.centroids)
        })
        .collect();
    let mut trained = trained?;
    let mut left = Vec::with_capacity(m);
    let mut right = Vec::with_capacity(m);
    for chunk in trained.chunks_exact_mut(2) {
        left.push(std::mem::take(&mut chunk[0]));
        right.push(std::mem::take(&mut chunk[1]));
    }
    let codebooks = SubspaceCodebooks::from_parts(m, k, dims_per_subspace, left, right)?;

    // cell assignment per point per subspace, layout [point * m + subspace]
    let mut assignments = vec![0u32; n * m];
    assignments
        .par_chunks_mut(m)
        .enumerate()
        .for_each(|(i, out)| {
            let row = data.row(i);
            for (s, slot) in out.iter_mut().enumerate() {
                let sub = &row[s * dims_per_subspace..(s + 1) * dims_per_subspace];
                *slot = assign_cell(sub, codebooks.left(s), codebooks.right(s), k);
            }
        });

    let postings = build_postings(&assignments, n, m, k * k)?;

    let words_per_code = padded_d.div_ceil(64);
    let mut binary_codes = vec![0u64; n * words_per_code];
    binary_codes
        .par_chunks_mut(words_per_code)
        .enumerate()
        .for_each(|(i, out)| {
            out.copy_from_slice(&binarize(data.row(i)));
        });

    Ok(CrispIndex {
        rotation,
        codebooks,
        postings,
        binary_codes,
        words_per_code,
        data,
        original_d: d,
    })
}
