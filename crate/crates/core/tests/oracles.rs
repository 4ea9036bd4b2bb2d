//! Brute-force scalar oracles for graph construction, importance averaging,
//! top-k selection and aggregation.

#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use visa_core::aggregator::kept_removed_block;
use visa_core::{
    aggregate, build_similarity_graph, compress_step, compute_importance, split_tokens, AttentionRecord,
    ImportanceScore, Matrix, SplitResult, TokenSequence, VisaConfig,
};

fn oracle_graph(rows: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len();
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut ab = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            for k in 0..rows[i].len() {
                ab += rows[i][k] * rows[j][k];
                aa += rows[i][k] * rows[i][k];
                bb += rows[j][k] * rows[j][k];
            }
            let c = ab / (aa.sqrt() * bb.sqrt());
            g[i][j] = if c < 0.0 { 0.0 } else { c };
        }
    }
    let deg: Vec<f64> = g.iter().map(|r| r.iter().sum()).collect();
    let mut norm = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if deg[i] > 0.0 && deg[j] > 0.0 {
                norm[i][j] = g[i][j] / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    (g, deg, norm)
}

fn random_rows(rng: &mut StdRng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            loop {
                let r: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                if r.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
                    return r;
                }
            }
        })
        .collect()
}

fn random_records(rng: &mut StdRng, layers: usize, heads: usize, n: usize) -> Vec<AttentionRecord> {
    (0..layers)
        .map(|l| {
            let data = (0..heads * n).map(|_| rng.gen_range(0.0..1.0) / n as f64).collect();
            AttentionRecord::new(l, Matrix::from_vec(heads, n, data)).unwrap()
        })
        .collect()
}

fn seq(rows: &[Vec<f64>]) -> TokenSequence {
    TokenSequence::from_rows(rows).unwrap()
}

#[test]
fn three_token_graph() {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let rows = vec![vec![1.0, 0.0], vec![s, s], vec![-1.0, 0.0]];
    let (g_o, deg_o, norm_o) = oracle_graph(&rows);
    // Frozen from the oracle: only the (0,1) edge survives the clamp, and
    // normalizing a single edge gives weight 1.
    let frozen_norm = [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
    for i in 0..3 {
        for j in 0..3 {
            assert!((norm_o[i][j] - frozen_norm[i][j]).abs() < 1e-12);
        }
    }
    assert!((g_o[0][1] - s).abs() < 1e-12);

    let g = build_similarity_graph(&seq(&rows)).unwrap();
    for i in 0..3 {
        assert!((g.degree()[i] - deg_o[i]).abs() < 1e-12);
        for j in 0..3 {
            assert!((g.adjacency().get(i, j) - g_o[i][j]).abs() < 1e-12);
            assert!((g.normalized().get(i, j) - frozen_norm[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn graph_matches_oracle_on_random_instances() {
    let mut rng = StdRng::seed_from_u64(0x6a09e667);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=8);
        let rows = random_rows(&mut rng, n, d);
        let (g_o, deg_o, norm_o) = oracle_graph(&rows);
        let g = build_similarity_graph(&seq(&rows)).unwrap();
        for i in 0..n {
            assert!((g.degree()[i] - deg_o[i]).abs() < 1e-12);
            assert_eq!(g.adjacency().get(i, i), 0.0);
            for j in 0..n {
                assert!((g.adjacency().get(i, j) - g_o[i][j]).abs() < 1e-12);
                assert!((g.normalized().get(i, j) - norm_o[i][j]).abs() < 1e-12);
                assert_eq!(g.normalized().get(i, j).to_bits(), g.normalized().get(j, i).to_bits());
                assert_eq!(g.adjacency().get(i, j).to_bits(), g.adjacency().get(j, i).to_bits());
            }
        }
    }
}

#[test]
fn importance_matches_triple_loop() {
    let mut rng = StdRng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=16);
        let heads = rng.gen_range(1..=4);
        let layers = rng.gen_range(1..=4);
        let m = rng.gen_range(1..=4);
        let recs = random_records(&mut rng, layers, heads, n);
        let imp = compute_importance(&recs, m).unwrap();
        let used = m.min(layers);
        for t in 0..n {
            let mut s = 0.0;
            for rec in &recs[layers - used..] {
                for h in 0..heads {
                    s += rec.rows.get(h, t);
                }
            }
            let expect = s / (used * heads) as f64;
            assert!((imp.scores[t] - expect).abs() < 1e-12);
            assert!(imp.scores[t] >= 0.0);
        }
        assert_eq!(imp.source_layers, (layers - used..layers).collect::<Vec<_>>());
    }
}

#[test]
fn importance_eight_tokens_four_heads() {
    let mut rng = StdRng::seed_from_u64(8);
    let recs = random_records(&mut rng, 2, 4, 8);
    let imp = compute_importance(&recs, 2).unwrap();
    for t in 0..8 {
        let mut s = 0.0;
        for r in &recs {
            for h in 0..4 {
                s += r.rows.get(h, t);
            }
        }
        assert!((imp.scores[t] - s / 8.0).abs() < 1e-12);
    }
}

/// Selection by repeated argmax with lowest-index tie-break.
fn oracle_split(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if !taken[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        taken[best.unwrap()] = true;
    }
    (0..scores.len()).filter(|&i| taken[i]).collect()
}

fn imp(scores: Vec<f64>) -> ImportanceScore {
    ImportanceScore { scores, source_layers: vec![], heads: 1 }
}

#[test]
fn split_matches_repeated_argmax() {
    let mut rng = StdRng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=16);
        // Coarse values so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 10.0).collect();
        let p = rng.gen_range(0.05..=1.0);
        let s = split_tokens(&imp(scores.clone()), p, 1).unwrap();
        let k = ((p * n as f64).round() as usize).clamp(1, n);
        assert_eq!(s.kept_local_indices, oracle_split(&scores, k));
    }
}

fn oracle_aggregate(rows: &[Vec<f64>], norm: &[Vec<f64>], kept: &[usize], removed: &[usize], alpha: f64) -> Vec<Vec<f64>> {
    kept.iter()
        .map(|&i| {
            (0..rows[i].len())
                .map(|c| {
                    let mut s = 0.0;
                    for &j in removed {
                        s += norm[i][j] * rows[j][c];
                    }
                    rows[i][c] + alpha * s
                })
                .collect()
        })
        .collect()
}

#[test]
fn aggregate_matches_oracle_on_random_instances() {
    let mut rng = StdRng::seed_from_u64(77);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=8);
        let rows = random_rows(&mut rng, n, d);
        let kept: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
        let split = SplitResult::from_kept(kept, n).unwrap();
        let alpha = rng.gen_range(0.0..1.0);
        let tokens = seq(&rows);
        let graph = build_similarity_graph(&tokens).unwrap();
        let (_, _, norm_o) = oracle_graph(&rows);
        let out = aggregate(&tokens, &graph, &split, alpha).unwrap();
        let expect = oracle_aggregate(&rows, &norm_o, &split.kept_local_indices, &split.removed_local_indices, alpha);
        assert_eq!(out.len(), split.kept_local_indices.len());
        for (r, e) in expect.iter().enumerate() {
            for c in 0..d {
                assert!((out.row(r)[c] - e[c]).abs() < 1e-12);
            }
        }
        let block = kept_removed_block(&graph, &split);
        assert_eq!(block.rows(), split.kept_local_indices.len());
        assert_eq!(block.cols(), split.removed_local_indices.len());
    }
}

#[test]
fn identical_tokens_uniform_attention() {
    let v = [0.3, -1.2, 0.7];
    let n = 6;
    let rows: Vec<Vec<f64>> = (0..n).map(|_| v.to_vec()).collect();
    let rec = AttentionRecord::new(1, Matrix::from_vec(1, n, vec![1.0 / n as f64; n])).unwrap();
    let mut cfg = VisaConfig::new(12, 0.5);
    cfg.alpha = 0.1;
    let r = compress_step(&seq(&rows), &[rec], &cfg).unwrap();
    assert_eq!(r.split.kept_local_indices, vec![0, 1, 2]);
    // Ĝ[i][j] = 1/(n-1) for every pair, three removed neighbours each.
    let factor = 1.0 + 0.1 * 3.0 / 5.0;
    for i in 0..3 {
        for c in 0..3 {
            assert!((r.new_tokens.row(i)[c] - v[c] * factor).abs() < 1e-12);
        }
    }
}

#[test]
fn compress_step_equals_manual_composition() {
    let mut rng = StdRng::seed_from_u64(12);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=8);
        let heads = rng.gen_range(1..=3);
        let rows = random_rows(&mut rng, n, d);
        let recs = random_records(&mut rng, 3, heads, n);
        let mut cfg = VisaConfig::new(12, rng.gen_range(0.1..=1.0));
        cfg.alpha = rng.gen_range(0.0..0.5);
        cfg.avg_layers_m = 2;
        let tokens = seq(&rows);

        let step = compress_step(&tokens, &recs, &cfg).unwrap();
        let graph = build_similarity_graph(&tokens).unwrap();
        let importance = compute_importance(&recs, cfg.avg_layers_m).unwrap();
        let split = split_tokens(&importance, cfg.keep_ratio_p, cfg.min_keep).unwrap();
        let manual = aggregate(&tokens, &graph, &split, cfg.alpha).unwrap();

        assert_eq!(step.split, split);
        let bits = |t: &TokenSequence| t.data().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&step.new_tokens), bits(&manual));
        assert_eq!(step.new_tokens.origin_indices(), manual.origin_indices());
    }
}

#[test]
fn twelve_token_trace_composition() {
    let mut rng = StdRng::seed_from_u64(2024);
    let rows = random_rows(&mut rng, 12, 4);
    let recs = random_records(&mut rng, 2, 2, 12);
    let cfg = VisaConfig::new(12, 0.5);
    let step = compress_step(&seq(&rows), &recs, &cfg).unwrap();
    let tokens = seq(&rows);
    let graph = build_similarity_graph(&tokens).unwrap();
    let split = split_tokens(&compute_importance(&recs, 2).unwrap(), 0.5, 1).unwrap();
    assert_eq!(step.new_tokens, aggregate(&tokens, &graph, &split, 0.1).unwrap());
    assert_eq!(step.new_tokens.len(), 6);
}

fn arb_rows(max_n: usize, max_d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_n, 1..=max_d).prop_flat_map(|(n, d)| {
        prop::collection::vec(
            prop::collection::vec(-1.0f64..1.0, d).prop_filter("non-zero", |r| r.iter().any(|x| x.abs() > 1e-3)),
            n,
        )
    })
}

proptest! {
    #[test]
    fn cosine_graph_is_scale_invariant(rows in arb_rows(16, 8), scales in prop::collection::vec(0.01f64..100.0, 16)) {
        let scaled: Vec<Vec<f64>> = rows.iter().zip(&scales).map(|(r, s)| r.iter().map(|x| x * s).collect()).collect();
        let a = build_similarity_graph(&seq(&rows)).unwrap();
        let b = build_similarity_graph(&seq(&scaled)).unwrap();
        for (x, y) in a.normalized().as_slice().iter().zip(b.normalized().as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.adjacency().as_slice().iter().zip(b.adjacency().as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_spectrum_is_bounded(rows in arb_rows(16, 8)) {
        let g = build_similarity_graph(&seq(&rows)).unwrap();
        let n = g.len();
        let m = nalgebra::DMatrix::from_row_slice(n, n, g.normalized().as_slice());
        let eig = nalgebra::SymmetricEigen::new(m).eigenvalues;
        prop_assert!(eig.iter().all(|e| e.abs() <= 1.0 + 1e-9));
    }

    #[test]
    fn topk_is_correct(scores in prop::collection::vec(0.0f64..1.0, 1..256), p in 0.01f64..=1.0) {
        let s = split_tokens(&imp(scores.clone()), p, 1).unwrap();
        let min_kept = s.kept_local_indices.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        let max_removed = s.removed_local_indices.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_kept >= max_removed);
        prop_assert_eq!(s.n(), scores.len());
    }

    #[test]
    fn topk_is_permutation_equivariant(n in 2usize..64, seed in any::<u64>(), p in 0.05f64..=1.0) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut scores: Vec<f64> = (0..n).map(|i| i as f64 + rng.gen_range(0.0..0.5)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        scores.iter_mut().for_each(|s| *s /= n as f64);
        let permuted: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let a = split_tokens(&imp(scores), p, 1).unwrap();
        let b = split_tokens(&imp(permuted), p, 1).unwrap();
        let mut mapped: Vec<usize> = b.kept_local_indices.iter().map(|&i| perm[i]).collect();
        mapped.sort_unstable();
        prop_assert_eq!(mapped, a.kept_local_indices);
    }

    #[test]
    fn topk_ignores_positive_rescaling(scores in prop::collection::vec(0.0f64..1.0, 1..128), c in 0.001f64..1000.0, p in 0.01f64..=1.0) {
        let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
        prop_assert_eq!(split_tokens(&imp(scores), p, 1).unwrap(), split_tokens(&imp(scaled), p, 1).unwrap());
    }

    #[test]
    fn aggregation_is_affine_in_alpha(rows in arb_rows(16, 8), a1 in 0.0f64..1.0, a2 in 0.0f64..1.0, mask in any::<u16>()) {
        let n = rows.len();
        let split = SplitResult::from_kept((0..n).filter(|i| mask >> i & 1 == 1).collect(), n).unwrap();
        let tokens = seq(&rows);
        let g = build_similarity_graph(&tokens).unwrap();
        let o1 = aggregate(&tokens, &g, &split, a1).unwrap();
        let o2 = aggregate(&tokens, &g, &split, a2).unwrap();
        let o12 = aggregate(&tokens, &g, &split, a1 + a2).unwrap();
        let base = tokens.gather(&split.kept_local_indices);
        for i in 0..o1.len() {
            for c in 0..tokens.dim() {
                let lhs = o1.row(i)[c] + o2.row(i)[c] - base.row(i)[c];
                prop_assert!((lhs - o12.row(i)[c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn isolated_kept_token_is_unchanged(rows in arb_rows(12, 6), alpha in 0.0f64..5.0) {
        // Token 0 points away from every other token, so it has no edges.
        let d = rows[0].len();
        let mut rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r.iter().map(|x| x.abs() + 0.1).collect()).collect();
        rows[0] = vec![-1.0; d];
        let n = rows.len();
        let tokens = seq(&rows);
        let g = build_similarity_graph(&tokens).unwrap();
        let split = SplitResult::from_kept(vec![0], n).unwrap();
        let out = aggregate(&tokens, &g, &split, alpha).unwrap();
        prop_assert_eq!(out.row(0), tokens.row(0));
    }

    #[test]
    fn step_output_count(rows in arb_rows(16, 4), p in 0.01f64..=1.0, min_keep in 1usize..4, seed in any::<u64>()) {
        let n = rows.len();
        let mut rng = StdRng::seed_from_u64(seed);
        let recs = random_records(&mut rng, 2, 2, n);
        let mut cfg = VisaConfig::new(12, p);
        cfg.min_keep = min_keep;
        let step = compress_step(&seq(&rows), &recs, &cfg).unwrap();
        let expect = ((p * n as f64).round() as usize).max(min_keep).min(n);
        prop_assert_eq!(step.new_tokens.len(), expect);
        let origins = step.new_tokens.origin_indices();
        prop_assert!(origins.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(origins, &step.split.kept_local_indices[..]);
    }
}
