//! Vector datasets, ground truth, the standard fvecs/ivecs interchange
//! formats, and the exact brute-force oracle with its quality metric.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{CrispError, Result};

/// Row-major `n x d` float32 vector store.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMatrix {
    n: usize,
    d: usize,
    data: Vec<f32>,
}

impl DatasetMatrix {
    /// Wraps a row-major buffer; `data.len()` must be a multiple of `d`.
    pub fn new(d: usize, data: Vec<f32>) -> Result<Self> {
        if d == 0 {
            if !data.is_empty() {
                return Err(CrispError::arg("dimension 0 requires an empty buffer"));
            }
            return Ok(Self { n: 0, d: 0, data });
        }
        if !data.len().is_multiple_of(d) {
            return Err(CrispError::arg(format!(
                "buffer length {} is not a multiple of dimension {}",
                data.len(),
                d
            )));
        }
        let n = data.len() / d;
        Ok(Self { n, d, data })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            data: vec![0.0; n * d],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.d.max(1))
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Copies the given rows into a new matrix, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            n: indices.len(),
            d: self.d,
            data,
        }
    }
}

/// Exact neighbor ids per query, each row sorted by ascending true distance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    q: usize,
    k: usize,
    ids: Vec<i32>,
}

impl GroundTruth {
    pub fn new(k: usize, ids: Vec<i32>) -> Result<Self> {
        if k == 0 {
            if !ids.is_empty() {
                return Err(CrispError::arg("k = 0 requires an empty id buffer"));
            }
            return Ok(Self { q: 0, k: 0, ids });
        }
        if !ids.len().is_multiple_of(k) {
            return Err(CrispError::arg(format!(
                "id buffer length {} is not a multiple of k {}",
                ids.len(),
                k
            )));
        }
        let q = ids.len() / k;
        Ok(Self { q, k, ids })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[i32] {
        &self.ids[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[i32]> {
        self.ids.chunks_exact(self.k.max(1))
    }
}

/// One search result: point id and squared L2 distance to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u32,
    pub dist_sq: f64,
}

/// Squared Euclidean distance, accumulated in f64.
#[inline]
pub fn l2_sq(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let diff = (*x - *y) as f64;
        acc += diff * diff;
    }
    acc
}

/// Loads an fvecs file: repeated little-endian `[i32 dim][dim x f32]`.
///
/// Every record must share one dimension and every value must be finite.
pub fn load_fvecs(path: impl AsRef<Path>) -> Result<DatasetMatrix> {
    let file = File::open(path.as_ref())?;
    let mut reader = BufReader::new(file);
    let mut data = Vec::new();
    let mut dim: Option<usize> = None;
    let mut record = 0usize;
    loop {
        let mut dim_bytes = [0u8; 4];
        match reader.read_exact(&mut dim_bytes) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let rec_dim = i32::from_le_bytes(dim_bytes);
        if rec_dim <= 0 {
            return Err(CrispError::format(format!(
                "record {record}: non-positive dimension {rec_dim}"
            )));
        }
        let rec_dim = rec_dim as usize;
        match dim {
            None => dim = Some(rec_dim),
            Some(d) if d != rec_dim => {
                return Err(CrispError::format(format!(
                    "record {record}: dimension {rec_dim} differs from {d}"
                )));
            }
            Some(_) => {}
        }
        let mut buf = vec![0u8; rec_dim * 4];
        reader.read_exact(&mut buf)?;
        for (j, chunk) in buf.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(CrispError::format(format!(
                    "record {record}, component {j}: non-finite value"
                )));
            }
            data.push(v);
        }
        record += 1;
    }
    DatasetMatrix::new(dim.unwrap_or(0), data)
}

/// Writes an fvecs file; `load_fvecs` of the output is byte-exact identity.
pub fn save_fvecs(matrix: &DatasetMatrix, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut writer = BufWriter::new(file);
    for row in matrix.rows() {
        writer.write_all(&(matrix.d() as i32).to_le_bytes())?;
        for v in row {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Loads an ivecs file: repeated little-endian `[i32 k][k x i32]`.
pub fn load_ivecs(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let file = File::open(path.as_ref())?;
    let mut reader = BufReader::new(file);
    let mut ids = Vec::new();
    let mut k: Option<usize> = None;
    let mut record = 0usize;
    loop {
        let mut k_bytes = [0u8; 4];
        match reader.read_exact(&mut k_bytes) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let rec_k = i32::from_le_bytes(k_bytes);
        if rec_k <= 0 {
            return Err(CrispError::format(format!(
                "record {record}: non-positive row length {rec_k}"
            )));
        }
        let rec_k = rec_k as usize;
        match k {
            None => k = Some(rec_k),
            Some(kk) if kk != rec_k => {
                return Err(CrispError::format(format!(
                    "record {record}: row length {rec_k} differs from {kk}"
                )));
            }
            Some(_) => {}
        }
        let mut buf = vec![0u8; rec_k * 4];
        reader.read_exact(&mut buf)?;
        for chunk in buf.chunks_exact(4) {
            ids.push(i32::from_le_bytes(chunk.try_into().unwrap()));
        }
        record += 1;
    }
    GroundTruth::new(k.unwrap_or(0), ids)
}

/// Writes an ivecs file; `load_ivecs` of the output returns identical ids.
pub fn save_ivecs(gt: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut writer = BufWriter::new(file);
    for row in gt.rows() {
        writer.write_all(&(gt.k() as i32).to_le_bytes())?;
        for id in row {
            writer.write_all(&id.to_le_bytes())?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Exact k nearest neighbors of one query by linear scan.
///
/// Ascending squared distance, ties broken by ascending id.
pub fn exact_knn(data: &DatasetMatrix, query: &[f32], k: usize) -> Vec<Neighbor> {
    let mut heap: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
    for i in 0..data.n() {
        let dist = l2_sq(data.row(i), query);
        let entry = (dist, i as u32);
        if heap.len() < k {
            heap.push(entry);
            if heap.len() == k {
                heap.sort_unstable_by(|a, b| cmp_dist(b, a));
            }
        } else if k > 0 && cmp_dist(&entry, &heap[0]) == std::cmp::Ordering::Less {
            // heap[0] is the current worst; replace and restore descending order
            heap[0] = entry;
            let mut j = 0;
            while j + 1 < heap.len() && cmp_dist(&heap[j], &heap[j + 1]) == std::cmp::Ordering::Less
            {
                heap.swap(j, j + 1);
                j += 1;
            }
        }
    }
    heap.sort_unstable_by(cmp_dist);
    heap.into_iter()
        .map(|(dist_sq, id)| Neighbor { id, dist_sq })
        .collect()
}

#[inline]
fn cmp_dist(a: &(f64, u32), b: &(f64, u32)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Exact k nearest neighbors of every query, parallel across queries.
pub fn brute_force_knn(
    data: &DatasetMatrix,
    queries: &DatasetMatrix,
    k: usize,
) -> Result<GroundTruth> {
    if queries.d() != data.d() && !queries.is_empty() {
        return Err(CrispError::arg(format!(
            "query dimension {} does not match data dimension {}",
            queries.d(),
            data.d()
        )));
    }
    if k > data.n() {
        return Err(CrispError::arg(format!(
            "k {} exceeds dataset size {}",
            k,
            data.n()
        )));
    }
    let rows: Vec<Vec<i32>> = (0..queries.n())
        .into_par_iter()
        .map(|qi| {
            exact_knn(data, queries.row(qi), k)
                .into_iter()
                .map(|nb| nb.id as i32)
                .collect()
        })
        .collect();
    let mut ids = Vec::with_capacity(queries.n() * k);
    for row in rows {
        ids.extend_from_slice(&row);
    }
    GroundTruth::new(if queries.n() == 0 { 0 } else { k }, ids)
}

/// Mean over queries of `|result_row ∩ gt_row[0..k]| / k`.
///
/// Result rows beyond `gt.q()` are ignored; missing rows contribute 0.
pub fn recall_at_k(results: &[Vec<i32>], gt: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 || k > gt.k() {
        return Err(CrispError::arg(format!(
            "recall k {} must be in 1..={}",
            k,
            gt.k()
        )));
    }
    if gt.q() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0f64;
    for (qi, gt_row) in gt.rows().enumerate() {
        let Some(result_row) = results.get(qi) else {
            continue;
        };
        let truth = &gt_row[..k];
        let hits = result_row
            .iter()
            .filter(|id| truth.contains(id))
            .count()
            .min(k);
        total += hits as f64 / k as f64;
    }
    Ok(total / gt.q() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(d: usize, rows: &[&[f32]]) -> DatasetMatrix {
        let mut data = Vec::new();
        for r in rows {
            data.extend_from_slice(r);
        }
        DatasetMatrix::new(d, data).unwrap()
    }

    #[test]
    fn fvecs_round_trip_simple() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fvecs");
        let m = matrix(2, &[&[1.0, 2.0], &[3.0, 4.0]]);
        save_fvecs(&m, &path).unwrap();
        let loaded = load_fvecs(&path).unwrap();
        assert_eq!(loaded.n(), 2);
        assert_eq!(loaded.d(), 2);
        assert_eq!(loaded.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn fvecs_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.fvecs");
        std::fs::write(&path, []).unwrap();
        let loaded = load_fvecs(&path).unwrap();
        assert_eq!(loaded.n(), 0);
        assert_eq!(loaded.d(), 0);
    }

    #[test]
    fn fvecs_mixed_dims_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixed.fvecs");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        bytes.extend_from_slice(&3i32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 12]);
        std::fs::write(&path, bytes).unwrap();
        let err = load_fvecs(&path).unwrap_err();
        match err {
            CrispError::Format(msg) => assert!(msg.contains("record 1"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn fvecs_truncated_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.fvecs");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_fvecs(&path), Err(CrispError::Io(_))));
    }

    #[test]
    fn fvecs_non_finite_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.fvecs");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1i32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_fvecs(&path), Err(CrispError::Format(_))));
    }

    #[test]
    fn ivecs_exact_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.ivecs");
        let gt = GroundTruth::new(2, vec![5, 9]).unwrap();
        save_ivecs(&gt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(
            bytes,
            [2, 0, 0, 0, 5, 0, 0, 0, 9, 0, 0, 0],
            "little-endian [k][ids] layout"
        );
        assert_eq!(load_ivecs(&path).unwrap(), gt);
    }

    #[test]
    fn ivecs_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ivecs");
        let gt = GroundTruth::new(0, vec![]).unwrap();
        save_ivecs(&gt, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 0);
        assert_eq!(load_ivecs(&path).unwrap().q(), 0);
    }

    #[test]
    fn brute_force_tiny() {
        let data = matrix(2, &[&[0.0, 0.0], &[3.0, 4.0], &[1.0, 1.0]]);
        let queries = matrix(2, &[&[0.0, 0.0]]);
        let gt = brute_force_knn(&data, &queries, 2).unwrap();
        assert_eq!(gt.row(0), &[0, 2]);
    }

    #[test]
    fn brute_force_k_equals_n_is_permutation() {
        let data = matrix(1, &[&[5.0], &[1.0], &[3.0], &[2.0]]);
        let queries = matrix(1, &[&[0.0]]);
        let gt = brute_force_knn(&data, &queries, 4).unwrap();
        assert_eq!(gt.row(0), &[1, 3, 2, 0]);
    }

    #[test]
    fn brute_force_k_too_large() {
        let data = matrix(1, &[&[0.0]]);
        let queries = matrix(1, &[&[0.0]]);
        assert!(matches!(
            brute_force_knn(&data, &queries, 2),
            Err(CrispError::InvalidArgument(_))
        ));
    }

    #[test]
    fn brute_force_ties_break_by_id() {
        // points 1 and 2 are equidistant from the query
        let data = matrix(1, &[&[5.0], &[1.0], &[-1.0]]);
        let queries = matrix(1, &[&[0.0]]);
        let gt = brute_force_knn(&data, &queries, 2).unwrap();
        assert_eq!(gt.row(0), &[1, 2]);
    }

    #[test]
    fn brute_force_matches_double_loop_scan() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(77);
        let n = 200;
        let d = 16;
        let k = 10;
        let data_vec: Vec<f32> = (0..n * d).map(|_| rng.random::<f32>()).collect();
        let data = DatasetMatrix::new(d, data_vec).unwrap();
        let queries_vec: Vec<f32> = (0..20 * d).map(|_| rng.random::<f32>()).collect();
        let queries = DatasetMatrix::new(d, queries_vec).unwrap();
        let gt = brute_force_knn(&data, &queries, k).unwrap();

        for qi in 0..queries.n() {
            // independent scan: full pairwise distance table, then sort
            let mut dists: Vec<(f64, i32)> = Vec::new();
            for i in 0..n {
                let mut acc = 0.0f64;
                for j in 0..d {
                    let diff = data.row(i)[j] as f64 - queries.row(qi)[j] as f64;
                    acc += diff * diff;
                }
                dists.push((acc, i as i32));
            }
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expected: Vec<i32> = dists[..k].iter().map(|&(_, id)| id).collect();
            assert_eq!(gt.row(qi), expected.as_slice(), "query {qi}");
        }
    }

    #[test]
    fn recall_identity_disjoint_partial() {
        let gt = GroundTruth::new(4, vec![1, 2, 3, 4]).unwrap();
        assert_eq!(recall_at_k(&[vec![1, 2, 3, 4]], &gt, 4).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[vec![9, 10, 11, 12]], &gt, 4).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[vec![1, 2, 9, 4]], &gt, 4).unwrap(), 0.75);
        assert_eq!(recall_at_k(&[vec![]], &gt, 4).unwrap(), 0.0);
    }
}
