//! Property tests for the serialization formats, binarization, the
//! multi-sequence traversal and the scoring pipeline.

use proptest::prelude::*;

use crisp::search::{accumulate_subspace, CellCursor, ScoreScratch, sorted_partial_distances};
use crisp::{
    binarize, build_index, load_fvecs, load_ivecs, recall_at_k, save_fvecs, save_ivecs,
    BuildParams, DatasetMatrix, GroundTruth, Mode, SearchConfig,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fvecs_round_trip_is_byte_exact(
        d in 1usize..8,
        rows in proptest::collection::vec(
            proptest::collection::vec(-1000.0f32..1000.0, 8), 0..20)
    ) {
        let data: Vec<f32> = rows.iter().flat_map(|r| r[..d].to_vec()).collect();
        let matrix = DatasetMatrix::new(if rows.is_empty() { 0 } else { d }, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.fvecs");
        let p2 = dir.path().join("b.fvecs");
        save_fvecs(&matrix, &p1).unwrap();
        let loaded = load_fvecs(&p1).unwrap();
        prop_assert_eq!(loaded.n(), matrix.n());
        if !rows.is_empty() {
            prop_assert_eq!(loaded.data(), matrix.data());
        }
        save_fvecs(&loaded, &p2).unwrap();
        prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn ivecs_round_trip_identity(
        k in 1usize..6,
        rows in proptest::collection::vec(proptest::collection::vec(0i32..10_000, 6), 0..12)
    ) {
        let ids: Vec<i32> = rows.iter().flat_map(|r| r[..k].to_vec()).collect();
        let gt = GroundTruth::new(if rows.is_empty() { 0 } else { k }, ids).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.ivecs");
        save_ivecs(&gt, &path).unwrap();
        prop_assert_eq!(load_ivecs(&path).unwrap(), gt);
    }

    #[test]
    fn binarize_matches_sign_rule_and_antisymmetry(
        values in proptest::collection::vec(
            prop_oneof![Just(0.0f32), -100.0f32..100.0], 1..200)
    ) {
        let code = binarize(&values);
        for (i, &v) in values.iter().enumerate() {
            let bit = (code[i / 64] >> (i % 64)) & 1;
            prop_assert_eq!(bit == 1, v > 0.0);
        }
        let negated: Vec<f32> = values.iter().map(|v| -v).collect();
        let neg_code = binarize(&negated);
        for (i, &v) in values.iter().enumerate() {
            let a = (code[i / 64] >> (i % 64)) & 1;
            let b = (neg_code[i / 64] >> (i % 64)) & 1;
            if v == 0.0 {
                prop_assert_eq!((a, b), (0, 0));
            } else {
                prop_assert_eq!(a ^ b, 1);
            }
        }
    }

    #[test]
    fn traversal_equals_sorted_pair_sums(
        k in 1usize..=10,
        raw_left in proptest::collection::vec(0.0f64..100.0, 10),
        raw_right in proptest::collection::vec(0.0f64..100.0, 10)
    ) {
        let mk = |raw: &[f64]| {
            let mut v: Vec<(f64, u32)> =
                raw[..k].iter().enumerate().map(|(i, &d)| (d, i as u32)).collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            v
        };
        let dl = mk(&raw_left);
        let dr = mk(&raw_right);
        let mut expected: Vec<f64> = dl
            .iter()
            .flat_map(|l| dr.iter().map(move |r| l.0 + r.0))
            .collect();
        expected.sort_by(f64::total_cmp);
        let mut cursor = CellCursor::new(dl, dr);
        let mut emitted = Vec::new();
        while let Some(v) = cursor.next_cell() {
            emitted.push(v.cost);
        }
        prop_assert_eq!(emitted, expected);
    }

    #[test]
    fn recall_of_truth_against_itself_is_one(
        k in 1usize..8,
        q in 1usize..6
    ) {
        let ids: Vec<i32> = (0..q * k).map(|v| v as i32).collect();
        let gt = GroundTruth::new(k, ids).unwrap();
        let rows: Vec<Vec<i32>> = gt.rows().map(|r| r.to_vec()).collect();
        prop_assert_eq!(recall_at_k(&rows, &gt, k).unwrap(), 1.0);
    }
}

/// Scores accumulated through the CSR layout must equal a naive
/// map-of-lists walk over the same activated cells, in both modes.
#[test]
fn csr_scores_equal_naive_walk() {
    for seed in [1u64, 2, 3, 4, 5] {
        let n = 1000 + (seed as usize * 530) % 4000;
        let data = crisp::synth::uniform(n, 16, seed);
        let mut params = BuildParams::new(2);
        params.centroids = 4 + (seed as usize % 5);
        params.seed = seed;
        let index = build_index(data, &params).unwrap();
        let query = crisp::synth::uniform(1, 16, seed + 100);
        let padded = query.row(0).to_vec();
        let dims = index.codebooks().dims_per_subspace();
        let half = index.codebooks().half_dim();

        // map-of-lists inverted index built point by point, the layout CSR replaces
        let mut inverted: Vec<std::collections::HashMap<u32, Vec<u32>>> =
            vec![std::collections::HashMap::new(); index.m()];
        for i in 0..index.n() {
            let row = index.stored_data().row(i);
            for (s, map) in inverted.iter_mut().enumerate() {
                let cell = crisp::assign_cell(
                    &row[s * dims..(s + 1) * dims],
                    index.codebooks().left(s),
                    index.codebooks().right(s),
                    index.k(),
                );
                map.entry(cell).or_default().push(i as u32);
            }
        }

        for mode in [Mode::Guaranteed, Mode::Optimized] {
            let config = SearchConfig::new(mode, 7, 0.1, 0.1);
            let budget = ((config.budget_ratio * n as f64).ceil()) as usize;

            let mut scratch = ScoreScratch::new(n);
            let mut naive = std::collections::HashMap::<u32, u32>::new();
            for s in 0..index.m() {
                let q_sub = &padded[s * dims..(s + 1) * dims];
                let dl = sorted_partial_distances(&q_sub[..half], index.codebooks().left(s), index.k());
                let dr = sorted_partial_distances(&q_sub[half..], index.codebooks().right(s), index.k());
                let mut cursor = CellCursor::new(dl.clone(), dr.clone());
                accumulate_subspace(&mut cursor, index.postings(), s, &mut scratch, &config, budget);

                // same cell sequence walked through the map-of-lists instead
                let mut oracle_cursor = CellCursor::new(dl, dr);
                let mut retrieved = 0usize;
                while retrieved < budget {
                    let Some(v) = oracle_cursor.next_cell() else { break };
                    let empty = Vec::new();
                    let ids = inverted[s].get(&v.cell).unwrap_or(&empty);
                    let w = if mode == Mode::Optimized && v.rank <= config.k { 2 } else { 1 };
                    for &id in ids {
                        *naive.entry(id).or_insert(0) += w;
                    }
                    retrieved += ids.len();
                }
            }
            assert_eq!(scratch.touched().len(), naive.len(), "seed {seed}");
            for (&id, &score) in &naive {
                assert_eq!(scratch.score(id), score, "seed {seed}, id {id}");
            }
        }
    }
}
