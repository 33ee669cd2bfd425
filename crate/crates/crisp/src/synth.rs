//! Seeded synthetic datasets for benchmarks and tests.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::DatasetMatrix;
use crate::rng::rng_from;

/// Standard-Gaussian rows: isotropic, CEV near 0.2.
pub fn gaussian(n: usize, d: usize, seed: u64) -> DatasetMatrix {
    let mut rng = rng_from(seed);
    let data: Vec<f32> = (0..n * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    DatasetMatrix::new(d, data).expect("generated buffer is rectangular")
}

/// Uniform rows in [-1, 1).
pub fn uniform(n: usize, d: usize, seed: u64) -> DatasetMatrix {
    let mut rng = rng_from(seed);
    let data: Vec<f32> = (0..n * d).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
    DatasetMatrix::new(d, data).expect("generated buffer is rectangular")
}

/// Variance only along axis 0: a single dominant principal component.
pub fn single_axis(n: usize, d: usize, seed: u64) -> DatasetMatrix {
    let mut rng = rng_from(seed);
    let mut out = DatasetMatrix::zeros(n, d);
    for i in 0..n {
        out.row_mut(i)[0] = rng.sample::<f64, _>(StandardNormal) as f32 * 5.0;
    }
    out
}

/// Low-rank correlated data: rows are `z * A + noise` with a rank-`rank`
/// mixing matrix, concentrating variance in few directions (high CEV).
pub fn correlated_lowrank(
    n: usize,
    d: usize,
    rank: usize,
    noise: f32,
    seed: u64,
) -> DatasetMatrix {
    assert!(rank >= 1 && rank <= d);
    let mut rng = rng_from(seed);
    let mixing: Vec<f32> = (0..rank * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    let mut out = DatasetMatrix::zeros(n, d);
    for i in 0..n {
        let latent: Vec<f32> = (0..rank)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        let row = out.row_mut(i);
        for (r, &z) in latent.iter().enumerate() {
            for (out_v, mix) in row.iter_mut().zip(&mixing[r * d..(r + 1) * d]) {
                *out_v += z * mix;
            }
        }
        for v in row.iter_mut() {
            *v += rng.sample::<f64, _>(StandardNormal) as f32 * noise;
        }
    }
    out
}

/// `k` well-separated Gaussian blobs with unit within-blob deviation.
pub fn blobs(n: usize, d: usize, k: usize, separation: f32, seed: u64) -> DatasetMatrix {
    let mut rng = rng_from(seed);
    let centers: Vec<f32> = (0..k * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32 * separation)
        .collect();
    let mut out = DatasetMatrix::zeros(n, d);
    for i in 0..n {
        let c = i % k;
        let row = out.row_mut(i);
        for (v, center) in row.iter_mut().zip(&centers[c * d..(c + 1) * d]) {
            *v = center + rng.sample::<f64, _>(StandardNormal) as f32;
        }
    }
    out
}
