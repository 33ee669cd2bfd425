//! Batch query measurement, CSV reporting and Pareto filtering.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crisp::{
    recall_at_k, search_with_stats, CrispIndex, DatasetMatrix, GroundTruth, Mode, Result,
    SearchConfig,
};

pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Guaranteed => "guaranteed",
        Mode::Optimized => "optimized",
    }
}

/// One measured configuration; every row echoes the full configuration so
/// runs are reproducible from the CSV alone.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub mode: &'static str,
    pub budget_ratio: f64,
    pub min_collision_ratio: f64,
    pub subspaces: usize,
    pub centroids: usize,
    pub k: usize,
    pub seed: u64,
    pub query_mode: &'static str,
    pub patience_factor: f64,
    pub eps0: f64,
    pub ad_stride: usize,
    pub recall_at_k: f64,
    pub qps: f64,
    pub mean_latency_ms: f64,
    pub median_latency_ms: f64,
    pub build_seconds: f64,
    pub logical_bytes: u64,
    pub mean_candidates: f64,
    pub mean_verified: f64,
}

pub const CSV_HEADER: &str = "mode,budget_ratio,min_collision_ratio,subspaces,centroids,k,seed,\
query_mode,patience_factor,eps0,ad_stride,recall_at_k,qps,mean_latency_ms,median_latency_ms,\
build_seconds,logical_bytes,mean_candidates,mean_verified";

impl BenchReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.mode,
            self.budget_ratio,
            self.min_collision_ratio,
            self.subspaces,
            self.centroids,
            self.k,
            self.seed,
            self.query_mode,
            self.patience_factor,
            self.eps0,
            self.ad_stride,
            self.recall_at_k,
            self.qps,
            self.mean_latency_ms,
            self.median_latency_ms,
            self.build_seconds,
            self.logical_bytes,
            self.mean_candidates,
            self.mean_verified
        )
    }
}

/// Result rows plus aggregate timing for one batch.
pub struct BatchOutcome {
    pub results: Vec<Vec<i32>>,
    pub qps: f64,
    pub mean_latency_ms: f64,
    pub median_latency_ms: f64,
    pub mean_candidates: f64,
    pub mean_verified: f64,
}

/// Runs every query through the index, serially by default so QPS reflects
/// single-thread latency, or with one query per worker when `parallel`.
pub fn run_batch(
    index: &CrispIndex,
    queries: &DatasetMatrix,
    config: &SearchConfig,
    parallel: bool,
) -> Result<BatchOutcome> {
    let run_one = |qi: usize| -> Result<(Vec<i32>, f64, usize, usize)> {
        let start = Instant::now();
        let (neighbors, stats) = search_with_stats(index, queries.row(qi), config)?;
        let elapsed = start.elapsed().as_secs_f64();
        let mut ids: Vec<i32> = neighbors.iter().map(|n| n.id as i32).collect();
        ids.resize(config.k, -1);
        Ok((ids, elapsed, stats.candidates, stats.verified))
    };

    let wall = Instant::now();
    let per_query: Result<Vec<_>> = if parallel {
        (0..queries.n()).into_par_iter().map(run_one).collect()
    } else {
        (0..queries.n()).map(run_one).collect()
    };
    let wall_seconds = wall.elapsed().as_secs_f64();
    let per_query = per_query?;

    let q = per_query.len();
    let mut results = Vec::with_capacity(q);
    let mut latencies = Vec::with_capacity(q);
    let mut candidates = 0usize;
    let mut verified = 0usize;
    for (ids, latency, cand, ver) in per_query {
        results.push(ids);
        latencies.push(latency);
        candidates += cand;
        verified += ver;
    }
    latencies.sort_by(f64::total_cmp);
    let qps = if wall_seconds > 0.0 {
        q as f64 / wall_seconds
    } else {
        0.0
    };
    let mean_latency_ms = if q > 0 {
        latencies.iter().sum::<f64>() / q as f64 * 1e3
    } else {
        0.0
    };
    let median_latency_ms = if q > 0 {
        let mid = q / 2;
        let median = if q % 2 == 1 {
            latencies[mid]
        } else {
            (latencies[mid - 1] + latencies[mid]) / 2.0
        };
        median * 1e3
    } else {
        0.0
    };
    Ok(BatchOutcome {
        results,
        qps,
        mean_latency_ms,
        median_latency_ms,
        mean_candidates: if q > 0 { candidates as f64 / q as f64 } else { 0.0 },
        mean_verified: if q > 0 { verified as f64 / q as f64 } else { 0.0 },
    })
}

/// Measures one configuration end to end and scores it against the truth.
#[allow(clippy::too_many_arguments)]
pub fn bench_config(
    index: &CrispIndex,
    queries: &DatasetMatrix,
    gt: &GroundTruth,
    config: &SearchConfig,
    parallel: bool,
    seed: u64,
    build_seconds: f64,
) -> Result<BenchReport> {
    let outcome = run_batch(index, queries, config, parallel)?;
    let recall = recall_at_k(&outcome.results, gt, config.k)?;
    Ok(BenchReport {
        mode: mode_name(config.mode),
        budget_ratio: config.budget_ratio,
        min_collision_ratio: config.min_collision_ratio,
        subspaces: index.m(),
        centroids: index.k(),
        k: config.k,
        seed,
        query_mode: if parallel { "parallel" } else { "serial" },
        patience_factor: config.patience_factor,
        eps0: config.eps0,
        ad_stride: config.ad_stride,
        recall_at_k: recall,
        qps: outcome.qps,
        mean_latency_ms: outcome.mean_latency_ms,
        median_latency_ms: outcome.median_latency_ms,
        build_seconds,
        logical_bytes: index.logical_bytes(),
        mean_candidates: outcome.mean_candidates,
        mean_verified: outcome.mean_verified,
    })
}

/// Keeps the rows not dominated on (recall, qps): a row is dropped when
/// another row has >= recall with > qps, or > recall with >= qps.
pub fn pareto_filter(rows: &[BenchReport]) -> Vec<BenchReport> {
    let mut kept: Vec<BenchReport> = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let dominated = rows.iter().enumerate().any(|(j, other)| {
            if i == j {
                return false;
            }
            (other.recall_at_k >= row.recall_at_k && other.qps > row.qps)
                || (other.recall_at_k > row.recall_at_k && other.qps >= row.qps)
        });
        if !dominated {
            kept.push(row.clone());
        }
    }
    kept
}
