//! Lloyd's k-means with k-means++ seeding, used to train the per-half
//! subspace codebooks.

use rand::Rng;

use crate::dataset::l2_sq;
use crate::error::{CrispError, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// k x dim centroids, row-major.
    pub centroids: Vec<f32>,
    /// Sum of squared distances to the assigned centroid, one entry per
    /// assignment pass (non-increasing).
    pub objective_trace: Vec<f64>,
}

/// Lloyd's algorithm over `points` (row-major, `dim` columns).
///
/// Runs `iters` iterations or stops early once assignments stabilize.
/// Empty clusters are re-seeded from the points farthest from their
/// centroid; when the data has fewer than k distinct points the surplus
/// centroids duplicate existing points. Ties break toward the lowest
/// centroid id.
pub fn kmeans(points: &[f32], dim: usize, k: usize, iters: usize, seed: u64) -> Result<KMeansResult> {
    if dim == 0 {
        return Err(CrispError::arg("kmeans requires dim >= 1"));
    }
    if points.is_empty() || !points.len().is_multiple_of(dim) {
        return Err(CrispError::arg(
            "kmeans requires a nonempty row-major point buffer",
        ));
    }
    if k == 0 {
        return Err(CrispError::arg("kmeans requires k >= 1"));
    }
    let n = points.len() / dim;
    let mut centroids = plus_plus_init(points, dim, n, k, seed);
    let mut assignments = vec![u32::MAX; n];
    let mut trace = Vec::with_capacity(iters);

    for _ in 0..iters {
        let mut changed = false;
        let mut objective = 0.0f64;
        for (i, point) in points.chunks_exact(dim).enumerate() {
            let (best, dist) = nearest_centroid(point, &centroids, dim, k);
            objective += dist;
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        trace.push(objective);
        if !changed {
            break;
        }

        let mut counts = vec![0usize; k];
        let mut sums = vec![0.0f64; k * dim];
        for (i, point) in points.chunks_exact(dim).enumerate() {
            let c = assignments[i] as usize;
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point) {
                *s += *v as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for (out, s) in centroids[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&sums[c * dim..(c + 1) * dim])
            {
                *out = (*s * inv) as f32;
            }
        }

        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empties.is_empty() {
            reseed_empty(points, dim, &assignments, &centroids.clone(), &mut centroids, &empties);
        }
    }

    Ok(KMeansResult {
        centroids,
        objective_trace: trace,
    })
}

/// Index of the closest centroid, ties toward the lowest id.
#[inline]
pub(crate) fn nearest_centroid(point: &[f32], centroids: &[f32], dim: usize, k: usize) -> (u32, f64) {
    let mut best = 0u32;
    let mut best_dist = f64::INFINITY;
    for c in 0..k {
        let dist = l2_sq(point, &centroids[c * dim..(c + 1) * dim]);
        if dist < best_dist {
            best_dist = dist;
            best = c as u32;
        }
    }
    (best, best_dist)
}

fn plus_plus_init(points: &[f32], dim: usize, n: usize, k: usize, seed: u64) -> Vec<f32> {
    let mut rng = rng_from(seed);
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);

    let mut min_dist = vec![0.0f64; n];
    for (i, point) in points.chunks_exact(dim).enumerate() {
        min_dist[i] = l2_sq(point, &centroids[..dim]);
    }

    for chosen in 1..k {
        let total: f64 = min_dist.iter().sum();
        let next = if total <= 0.0 {
            // every remaining point coincides with a chosen centroid
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in min_dist.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        let new = &points[next * dim..(next + 1) * dim];
        centroids.extend_from_slice(new);
        if chosen + 1 < k {
            for (i, point) in points.chunks_exact(dim).enumerate() {
                let dist = l2_sq(point, new);
                if dist < min_dist[i] {
                    min_dist[i] = dist;
                }
            }
        }
    }
    centroids
}

fn reseed_empty(
    points: &[f32],
    dim: usize,
    assignments: &[u32],
    old_centroids: &[f32],
    centroids: &mut [f32],
    empties: &[usize],
) {
    // farthest points from their current centroid, one per empty cluster
    let mut by_dist: Vec<(f64, usize)> = points
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, point)| {
            let c = assignments[i] as usize;
            (l2_sq(point, &old_centroids[c * dim..(c + 1) * dim]), i)
        })
        .collect();
    by_dist.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (slot, &(_, point_idx)) in empties.iter().zip(by_dist.iter()) {
        centroids[slot * dim..(slot + 1) * dim]
            .copy_from_slice(&points[point_idx * dim..(point_idx + 1) * dim]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    #[test]
    fn exact_cover_when_points_equal_k() {
        let points = vec![0.0f32, 0.0, 10.0, 10.0, -5.0, 3.0];
        let result = kmeans(&points, 2, 3, 10, 1).unwrap();
        let mut found: Vec<[f32; 2]> = result
            .centroids
            .chunks_exact(2)
            .map(|c| [c[0], c[1]])
            .collect();
        found.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(found, vec![[-5.0, 3.0], [0.0, 0.0], [10.0, 10.0]]);
        assert!(result.objective_trace.last().unwrap() < &1e-12);
    }

    #[test]
    fn k1_converges_to_mean() {
        let mut rng = rng_from(2);
        let points: Vec<f32> = (0..200)
            .map(|_| rand::Rng::sample::<f64, _>(&mut rng, StandardNormal) as f32)
            .collect();
        let result = kmeans(&points, 1, 1, 5, 3).unwrap();
        let mean: f64 = points.iter().map(|&v| v as f64).sum::<f64>() / points.len() as f64;
        assert!((result.centroids[0] as f64 - mean).abs() <= 1e-5);
    }

    #[test]
    fn separated_blobs_recovered() {
        let mut rng = rng_from(4);
        let mut points = Vec::new();
        let centers = [(-20.0f32, 0.0f32), (20.0, 5.0)];
        for &(cx, cy) in &centers {
            for _ in 0..150 {
                points.push(cx + rand::Rng::sample::<f64, _>(&mut rng, StandardNormal) as f32);
                points.push(cy + rand::Rng::sample::<f64, _>(&mut rng, StandardNormal) as f32);
            }
        }
        let result = kmeans(&points, 2, 2, 20, 5).unwrap();
        let separation = 40.0f64;
        for &(cx, cy) in &centers {
            let closest = result
                .centroids
                .chunks_exact(2)
                .map(|c| l2_sq(c, &[cx, cy]).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(closest < 0.1 * separation, "blob mean missed by {closest}");
        }
    }

    #[test]
    fn objective_is_non_increasing() {
        let mut rng = rng_from(6);
        let points: Vec<f32> = (0..500 * 8)
            .map(|_| rand::Rng::sample::<f64, _>(&mut rng, StandardNormal) as f32)
            .collect();
        let result = kmeans(&points, 8, 7, 25, 7).unwrap();
        for pair in result.objective_trace.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "objective increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn fewer_distinct_points_than_k() {
        let points = vec![1.0f32, 1.0, 1.0, 1.0, 2.0, 2.0];
        let result = kmeans(&points, 2, 4, 10, 8).unwrap();
        for c in result.centroids.chunks_exact(2) {
            assert!(c == [1.0, 1.0] || c == [2.0, 2.0], "centroid {c:?}");
        }
    }

    #[test]
    fn zero_points_rejected() {
        assert!(kmeans(&[], 4, 2, 10, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let mut rng = rng_from(9);
        let points: Vec<f32> = (0..300)
            .map(|_| rand::Rng::sample::<f64, _>(&mut rng, StandardNormal) as f32)
            .collect();
        let a = kmeans(&points, 3, 5, 15, 42).unwrap();
        let b = kmeans(&points, 3, 5, 15, 42).unwrap();
        assert_eq!(a.centroids, b.centroids);
    }
}
