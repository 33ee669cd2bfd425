//! Correlation-aware adaptive preprocessing.
//!
//! A spectral check on a bounded sample measures how much variance the top
//! 20% of principal components explain (CEV). Datasets above the threshold
//! get a randomized orthogonal rotation applied in place; dispersed datasets
//! bypass the O(N*D^2) transform entirely.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dataset::DatasetMatrix;
use crate::error::{CrispError, Result};
use crate::rng::{derive_seed, rng_from};

/// Default gate threshold for applying the rotation.
pub const DEFAULT_TAU_CEV: f64 = 0.85;

/// Rows drawn for the spectral check: ceil(min(0.1*N, 1e5)).
pub const MAX_CEV_SAMPLE: usize = 100_000;

const SAMPLE_TAG: u64 = 0x5a4d_504c;
const ROTATION_TAG: u64 = 0x524f_5441;

/// Outcome of the adaptive rotation decision, persisted in index metadata.
///
/// The matrix is kept in float32 (as stored on disk); orthogonality is
/// verified at float64 construction time.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationRecord {
    d: usize,
    cev: f64,
    applied: bool,
    matrix: Option<Vec<f32>>,
    seed: u64,
}

impl RotationRecord {
    pub(crate) fn from_parts(
        d: usize,
        cev: f64,
        applied: bool,
        matrix: Option<Vec<f32>>,
        seed: u64,
    ) -> Result<Self> {
        if applied != matrix.is_some() {
            return Err(CrispError::format(
                "rotation matrix present iff rotation applied",
            ));
        }
        if let Some(m) = &matrix {
            if m.len() != d * d {
                return Err(CrispError::format("rotation matrix must be d x d"));
            }
        }
        Ok(Self {
            d,
            cev,
            applied,
            matrix,
            seed,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn cev(&self) -> f64 {
        self.cev
    }

    pub fn applied(&self) -> bool {
        self.applied
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row-major d x d orthogonal matrix, present iff the rotation ran.
    pub fn matrix(&self) -> Option<&[f32]> {
        self.matrix.as_deref()
    }
}

/// Uniform sample of ceil(min(0.1*N, 1e5)) rows without replacement.
///
/// Datasets of 10 rows or fewer are returned whole.
pub fn sample_rows(data: &DatasetMatrix, seed: u64) -> DatasetMatrix {
    let n = data.n();
    if n <= 10 {
        return data.select_rows(&(0..n).collect::<Vec<_>>());
    }
    let target = (0.1 * n as f64).min(MAX_CEV_SAMPLE as f64).ceil() as usize;
    let target = target.clamp(1, n);
    let mut rng = rng_from(derive_seed(seed, SAMPLE_TAG));
    let mut indices = rand::seq::index::sample(&mut rng, n, target).into_vec();
    indices.sort_unstable();
    data.select_rows(&indices)
}

/// Cumulative variance explained by the top floor(0.2*D) principal
/// components of the sample covariance (at least one component; unbiased
/// n-1 divisor; negative eigenvalues clamped to zero).
pub fn compute_cev(sample: &DatasetMatrix) -> Result<f64> {
    let n = sample.n();
    let d = sample.d();
    if n < 2 {
        return Err(CrispError::arg("CEV needs at least 2 sample rows"));
    }
    let mut mean = vec![0.0f64; d];
    for row in sample.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // Covariance accumulated over fixed row blocks so the reduction order
    // (and therefore the result) does not depend on thread scheduling.
    let block = 1024;
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(block))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0f64; d * d];
            let mut centered = vec![0.0f64; d];
            for i in b * block..((b + 1) * block).min(n) {
                for (c, (v, m)) in centered.iter_mut().zip(sample.row(i).iter().zip(&mean)) {
                    *c = *v as f64 - *m;
                }
                for r in 0..d {
                    let cr = centered[r];
                    let out = &mut acc[r * d..(r + 1) * d];
                    for (o, c) in out.iter_mut().zip(&centered) {
                        *o += cr * *c;
                    }
                }
            }
            acc
        })
        .collect();
    let mut cov = vec![0.0f64; d * d];
    for part in partials {
        for (c, p) in cov.iter_mut().zip(part) {
            *c += p;
        }
    }
    let scale = 1.0 / (n as f64 - 1.0);
    for c in &mut cov {
        *c *= scale;
    }

    let cov = DMatrix::from_row_slice(d, d, &cov);
    let eigen = cov.symmetric_eigen();
    let mut eigenvalues: Vec<f64> = eigen.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    eigenvalues.sort_unstable_by(|a, b| b.total_cmp(a));
    let total: f64 = eigenvalues.iter().sum();
    if total < 1e-12 {
        return Ok(0.0);
    }
    let top = ((0.2 * d as f64).floor() as usize).max(1);
    let leading: f64 = eigenvalues.iter().take(top).sum();
    Ok((leading / total).clamp(0.0, 1.0))
}

/// Haar-distributed d x d orthogonal matrix, row-major float64.
///
/// QR factorization of a standard-Gaussian matrix with the R diagonal
/// normalized to positive signs, so the output is canonical per seed.
pub fn generate_rotation(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(derive_seed(seed, ROTATION_TAG));
    let gaussian = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let (q, r) = gaussian.qr().unpack();
    let mut q = q;
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    debug_assert!(max_orthogonality_error(q.as_slice(), d) <= 1e-10);
    // nalgebra stores column-major; emit row-major
    let mut out = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = q[(i, j)];
        }
    }
    out
}

/// max |Q*Q^T - I| for a matrix in either storage order.
pub fn max_orthogonality_error(q: &[f64], d: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let mut dot = 0.0;
            for l in 0..d {
                dot += q[i * d + l] * q[j * d + l];
            }
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

#[inline]
fn rotate_in_place(row: &mut [f32], rot: &[f32], d: usize, scratch: &mut [f64]) {
    scratch.fill(0.0);
    for i in 0..d {
        let xi = row[i] as f64;
        if xi == 0.0 {
            continue;
        }
        let r = &rot[i * d..(i + 1) * d];
        for (s, v) in scratch.iter_mut().zip(r) {
            *s += xi * *v as f64;
        }
    }
    for (o, s) in row.iter_mut().zip(scratch.iter()) {
        *o = *s as f32;
    }
}

/// Overwrites every row x with x*R using one D-float scratch buffer per
/// worker; no second N x D copy is ever materialized.
pub fn apply_rotation_in_place(data: &mut DatasetMatrix, rot: &[f32]) {
    let d = data.d();
    assert_eq!(rot.len(), d * d, "rotation must be d x d");
    data.data_mut().par_chunks_mut(d).for_each_init(
        || vec![0.0f64; d],
        |scratch, row| rotate_in_place(row, rot, d, scratch),
    );
}

/// Runs the spectral check and rotates the dataset in place when
/// CEV exceeds `tau_cev`; returns the decision record either way.
pub fn maybe_rotate(data: &mut DatasetMatrix, tau_cev: f64, seed: u64) -> Result<RotationRecord> {
    if data.is_empty() {
        return Err(CrispError::arg("cannot preprocess an empty dataset"));
    }
    let d = data.d();
    let sample = sample_rows(data, seed);
    let cev = if sample.n() < 2 {
        0.0
    } else {
        compute_cev(&sample)?
    };
    let applied = cev > tau_cev;
    if !applied {
        return RotationRecord::from_parts(d, cev, false, None, seed);
    }
    let rotation = generate_rotation(d, seed);
    let rotation_f32: Vec<f32> = rotation.iter().map(|&v| v as f32).collect();
    drop(rotation);
    apply_rotation_in_place(data, &rotation_f32);
    RotationRecord::from_parts(d, cev, true, Some(rotation_f32), seed)
}

/// Maps a query into the indexed space: q*R when the rotation was applied,
/// the query unchanged otherwise.
pub fn rotate_query(q: &[f32], record: &RotationRecord) -> Result<Vec<f32>> {
    if q.len() != record.d() {
        return Err(CrispError::arg(format!(
            "query dimension {} does not match record dimension {}",
            q.len(),
            record.d()
        )));
    }
    match record.matrix() {
        None => Ok(q.to_vec()),
        Some(rot) => {
            let d = record.d();
            let mut scratch = vec![0.0f64; d];
            let mut out = q.to_vec();
            rotate_in_place(&mut out, rot, d, &mut scratch);
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::l2_sq;
    use rand::Rng;

    fn gaussian_matrix(n: usize, d: usize, seed: u64) -> DatasetMatrix {
        let mut rng = rng_from(seed);
        let data: Vec<f32> = (0..n * d)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        DatasetMatrix::new(d, data).unwrap()
    }

    #[test]
    fn sample_sizes_match_rule() {
        let data = gaussian_matrix(100, 4, 1);
        assert_eq!(sample_rows(&data, 7).n(), 10);
        let tiny = gaussian_matrix(5, 4, 2);
        assert_eq!(sample_rows(&tiny, 7).n(), 5);
        let data = gaussian_matrix(37, 4, 3);
        // ceil(3.7) = 4
        assert_eq!(sample_rows(&data, 7).n(), 4);
    }

    #[test]
    fn sample_is_deterministic() {
        let data = gaussian_matrix(200, 8, 4);
        let a = sample_rows(&data, 11);
        let b = sample_rows(&data, 11);
        assert_eq!(a, b);
        let c = sample_rows(&data, 12);
        assert_ne!(a, c);
    }

    #[test]
    fn cev_single_axis_is_one() {
        let mut rng = rng_from(5);
        let mut data = vec![0.0f32; 500 * 10];
        for row in data.chunks_exact_mut(10) {
            row[0] = rng.random::<f32>() * 4.0 - 2.0;
        }
        let sample = DatasetMatrix::new(10, data).unwrap();
        let cev = compute_cev(&sample).unwrap();
        assert!(cev > 0.999, "cev = {cev}");
    }

    #[test]
    fn cev_isotropic_near_one_fifth() {
        let sample = gaussian_matrix(50_000, 10, 6);
        let cev = compute_cev(&sample).unwrap();
        assert!((cev - 0.2).abs() < 0.05, "cev = {cev}");
    }

    #[test]
    fn cev_constant_data_is_zero() {
        let sample = DatasetMatrix::new(3, vec![1.5; 12]).unwrap();
        assert_eq!(compute_cev(&sample).unwrap(), 0.0);
    }

    #[test]
    fn cev_needs_two_rows() {
        let sample = DatasetMatrix::new(3, vec![0.0; 3]).unwrap();
        assert!(compute_cev(&sample).is_err());
    }

    #[test]
    fn rotation_orthogonal_across_dims() {
        for d in [1usize, 2, 8, 64] {
            let q = generate_rotation(d, 99);
            let err = max_orthogonality_error(&q, d);
            assert!(err <= 1e-10, "d = {d}, err = {err}");
        }
    }

    #[test]
    fn rotation_deterministic_per_seed() {
        assert_eq!(generate_rotation(16, 3), generate_rotation(16, 3));
        assert_ne!(generate_rotation(16, 3), generate_rotation(16, 4));
    }

    #[test]
    fn rotation_preserves_norms() {
        let d = 64;
        let rot = generate_rotation(d, 17);
        let mut rng = rng_from(18);
        for _ in 0..100 {
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm: f64 = x.iter().map(|v| v * v).sum();
            let mut y = vec![0.0f64; d];
            for (i, &xi) in x.iter().enumerate() {
                for j in 0..d {
                    y[j] += xi * rot[i * d + j];
                }
            }
            let rotated_norm: f64 = y.iter().map(|v| v * v).sum();
            assert!((rotated_norm - norm).abs() / norm <= 1e-6);
        }
    }

    #[test]
    fn bypass_leaves_data_untouched() {
        let mut data = gaussian_matrix(400, 10, 20);
        let before = data.clone();
        let record = maybe_rotate(&mut data, DEFAULT_TAU_CEV, 21).unwrap();
        assert!(!record.applied());
        assert!(record.cev() < 0.5);
        assert_eq!(data, before);
        assert!(record.matrix().is_none());
    }

    #[test]
    fn rotation_applied_drops_cev_and_record_matches() {
        // variance concentrated on axis 0 forces the gate
        let mut rng = rng_from(30);
        let d = 16;
        let mut data = vec![0.0f32; 2000 * d];
        for row in data.chunks_exact_mut(d) {
            row[0] = rng.sample::<f64, _>(StandardNormal) as f32 * 10.0;
            for v in row.iter_mut().skip(1) {
                *v = rng.sample::<f64, _>(StandardNormal) as f32 * 0.01;
            }
        }
        let mut data = DatasetMatrix::new(d, data).unwrap();
        let pristine = data.clone();
        let record = maybe_rotate(&mut data, DEFAULT_TAU_CEV, 31).unwrap();
        assert!(record.applied());
        assert!(record.cev() > DEFAULT_TAU_CEV);
        assert_ne!(data, pristine);

        // the rotation flattens per-dimension variances even though the
        // covariance spectrum (and hence the CEV itself) is invariant
        let axis_variance = |m: &DatasetMatrix, j: usize| {
            let mean: f64 = (0..m.n()).map(|i| m.row(i)[j] as f64).sum::<f64>() / m.n() as f64;
            (0..m.n())
                .map(|i| (m.row(i)[j] as f64 - mean).powi(2))
                .sum::<f64>()
                / (m.n() as f64 - 1.0)
        };
        let total_before: f64 = (0..d).map(|j| axis_variance(&pristine, j)).sum();
        let max_share_before = (0..d)
            .map(|j| axis_variance(&pristine, j))
            .fold(0.0f64, f64::max)
            / total_before;
        let total_after: f64 = (0..d).map(|j| axis_variance(&data, j)).sum();
        let max_share_after = (0..d)
            .map(|j| axis_variance(&data, j))
            .fold(0.0f64, f64::max)
            / total_after;
        assert!(max_share_before > 0.99, "axis 0 dominates before rotation");
        assert!(
            max_share_after < 0.5,
            "variance not redistributed: {max_share_after}"
        );

        // rotate_query reproduces the stored rows exactly (same kernel)
        for i in (0..data.n()).step_by(97) {
            let rotated = rotate_query(pristine.row(i), &record).unwrap();
            assert_eq!(rotated.as_slice(), data.row(i));
        }
    }

    #[test]
    fn stored_f32_matrix_stays_orthogonal() {
        let mut data = gaussian_matrix(1000, 64, 35);
        // force the gate with a dominant first axis
        for i in 0..data.n() {
            data.row_mut(i)[0] *= 50.0;
        }
        let record = maybe_rotate(&mut data, DEFAULT_TAU_CEV, 36).unwrap();
        let rot = record.matrix().expect("rotation applied");
        let d = record.d();
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let mut dot = 0.0f64;
                for l in 0..d {
                    dot += rot[i * d + l] as f64 * rot[j * d + l] as f64;
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        assert!(worst <= 1e-4, "f32 orthogonality drift {worst}");
    }

    #[test]
    fn gate_is_strict_inequality() {
        let mut data = gaussian_matrix(500, 10, 40);
        let sample = sample_rows(&data, 41);
        let cev = compute_cev(&sample).unwrap();
        let record = maybe_rotate(&mut data, cev, 41).unwrap();
        assert!(!record.applied(), "gate must fire only when cev > tau");
    }

    #[test]
    fn rotation_preserves_pairwise_distances() {
        let mut data = gaussian_matrix(200, 32, 50);
        let before = data.clone();
        let rot: Vec<f32> = generate_rotation(32, 51).iter().map(|&v| v as f32).collect();
        apply_rotation_in_place(&mut data, &rot);
        for i in 0..20 {
            for j in (i + 1)..20 {
                let orig = l2_sq(before.row(i), before.row(j));
                let rotated = l2_sq(data.row(i), data.row(j));
                if orig > 1e-9 {
                    assert!((orig - rotated).abs() / orig <= 1e-3);
                }
            }
        }
    }

    #[test]
    fn rotate_query_identity_when_bypassed() {
        let record = RotationRecord::from_parts(3, 0.1, false, None, 0).unwrap();
        let q = vec![1.0, 2.0, 3.0];
        assert_eq!(rotate_query(&q, &record).unwrap(), q);
        assert!(rotate_query(&[1.0], &record).is_err());
    }

    #[test]
    fn covariance_trace_matches_eigenvalue_sum() {
        // validates the eigensolver against the trace identity
        let sample = gaussian_matrix(2000, 12, 60);
        let n = sample.n();
        let d = sample.d();
        let mut mean = vec![0.0f64; d];
        for row in sample.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += *v as f64;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut trace = 0.0f64;
        for (j, mu) in mean.iter().enumerate() {
            let mut acc = 0.0f64;
            for i in 0..n {
                let c = sample.row(i)[j] as f64 - mu;
                acc += c * c;
            }
            trace += acc / (n as f64 - 1.0);
        }

        let mut cov = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let row = sample.row(i);
            for r in 0..d {
                for c in 0..d {
                    cov[(r, c)] += (row[r] as f64 - mean[r]) * (row[c] as f64 - mean[c]);
                }
            }
        }
        cov /= n as f64 - 1.0;
        let eigen_sum: f64 = cov.symmetric_eigen().eigenvalues.iter().sum();
        assert!((eigen_sum - trace).abs() / trace <= 1e-6);
    }
}
