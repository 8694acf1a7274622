use proptest::prelude::*;

use quari::config::RunConfig;
use quari::hypernet::LowRankTransform;
use quari::io::tsv::fmt_sig6;
use quari::io::{decode_embeddings, encode_embeddings};
use quari::retrieval::{
    rank_order, rerank, score_all, top_k, CandidateSet, DenseScorer, GalleryIndex, LowRankScorer,
};
use quari::tensor::Tensor2;
use quari::training::symmetric_contrastive_loss;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2<f64>> {
    proptest::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_map(move |v| Tensor2::from_vec(rows, cols, v).unwrap())
}

fn problem() -> impl Strategy<Value = (Tensor2<f64>, Tensor2<f64>, Tensor2<f64>, Vec<f64>)> {
    (2usize..12, 1usize..5, 1usize..40).prop_flat_map(|(e, r, n)| {
        (
            matrix(r, e),
            matrix(r, e),
            matrix(n, e),
            proptest::collection::vec(-1.0f64..1.0, e),
        )
    })
}

fn permute(m: &Tensor2<f64>, perm: &[usize]) -> Tensor2<f64> {
    let b = perm.len();
    let data = (0..b * b).map(|k| m.get(perm[k / b], perm[k % b])).collect();
    Tensor2::from_vec(b, b, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lowrank_matches_dense((u, v, g, q) in problem()) {
        let t = LowRankTransform::from_factor_rows(u, v).unwrap();
        let index = GalleryIndex::with_row_ids(g).unwrap();
        let low = score_all(&index, &LowRankScorer::new(&t, &q).unwrap(), 1);
        let dense = score_all(&index, &DenseScorer::new(&t, &q).unwrap(), 1);
        for (a, b) in low.iter().zip(&dense) {
            prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn top_k_is_sorted_prefix_for_any_shard_count((u, v, g, q) in problem(), k in 1usize..50, shards in 1usize..6) {
        let t = LowRankTransform::from_factor_rows(u, v).unwrap();
        let index = GalleryIndex::with_row_ids(g).unwrap();
        let scorer = LowRankScorer::new(&t, &q).unwrap();
        let one = top_k(&index, &scorer, k, 1);
        let many = top_k(&index, &scorer, k, shards);
        prop_assert_eq!(&one, &many);
        prop_assert_eq!(one.len(), k.min(index.len()));
        let scores = score_all(&index, &scorer, 1);
        let mut all: Vec<(f64, &str)> = scores.iter().enumerate().map(|(i, s)| (*s, index.id(i))).collect();
        all.sort_by(|a, b| rank_order(*a, *b));
        for (e, (s, id)) in one.entries.iter().zip(&all) {
            prop_assert_eq!(e.id.as_str(), *id);
            prop_assert_eq!(e.score, *s);
        }
    }

    #[test]
    fn rerank_permutes_distinct_candidates((u, v, g, q) in problem(), picks in proptest::collection::vec(0usize..40, 1..20)) {
        let t = LowRankTransform::from_factor_rows(u, v).unwrap();
        let index = GalleryIndex::with_row_ids(g).unwrap();
        let ids: Vec<String> = picks.iter().map(|p| index.id(p % index.len()).to_owned()).collect();
        let set = CandidateSet { query_id: "q".into(), ids: ids.clone() };
        let list = rerank(&t, &q, &index, &set).unwrap();
        let mut got: Vec<&str> = list.ids();
        got.sort_unstable();
        let mut want: Vec<&str> = ids.iter().map(String::as_str).collect();
        want.sort_unstable();
        want.dedup();
        prop_assert_eq!(got, want);
        for w in list.entries.windows(2) {
            prop_assert!(rank_order((w[0].score, &w[0].id), (w[1].score, &w[1].id)).is_lt());
        }
    }

    #[test]
    fn gram_quadratic_equals_squared_norm(u in matrix(3, 7), v in matrix(3, 7), z in proptest::collection::vec(-2.0f64..2.0, 3)) {
        let t = LowRankTransform::from_factor_rows(u, v).unwrap();
        let mut uz = [0.0f64; 7];
        for (j, zj) in z.iter().enumerate() {
            for (o, x) in uz.iter_mut().zip(t.u_rows().row(j)) {
                *o += zj * x;
            }
        }
        let norm2: f64 = uz.iter().map(|x| x * x).sum();
        let quad = t.gram_quadratic(&z);
        prop_assert!(quad >= -1e-12);
        prop_assert!((quad - norm2).abs() <= 1e-10 * (1.0 + norm2));
    }

    #[test]
    fn embeddings_round_trip(rows in 0usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let data: Vec<f32> = (0..rows * cols).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f32 - 500.0) / 7.0).collect();
        let m = Tensor2::from_vec(rows, cols, data).unwrap();
        let back = decode_embeddings("mem", &encode_embeddings(&m)).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn sig6_keeps_six_digits(x in prop_oneof![-1e9f64..1e9, -1e-3f64..1e-3]) {
        let back: f64 = fmt_sig6(x).parse().unwrap();
        prop_assert!((back - x).abs() <= 5e-6 * x.abs() + f64::MIN_POSITIVE);
    }

    #[test]
    fn loss_invariant_to_relabeling_and_transpose(
        (s, alpha, perm) in (2usize..7).prop_flat_map(|b| (
            matrix(b, b),
            proptest::collection::vec(0.0f64..0.5, b * b),
            Just((0..b).collect::<Vec<_>>()).prop_shuffle(),
        ))
    ) {
        let b = s.rows();
        let alpha = Tensor2::from_vec(b, b, (0..b * b).map(|k| if k / b == k % b { 1.0 } else { alpha[k] }).collect()).unwrap();
        let base = symmetric_contrastive_loss(&s, &alpha).unwrap();
        let relabeled = symmetric_contrastive_loss(&permute(&s, &perm), &permute(&alpha, &perm)).unwrap();
        let transposed = symmetric_contrastive_loss(&s.transpose(), &alpha.transpose()).unwrap();
        prop_assert!((base - relabeled).abs() <= 1e-12 * (1.0 + base.abs()));
        prop_assert!((base - transposed).abs() <= 1e-12 * (1.0 + base.abs()));
    }

    #[test]
    fn config_text_round_trips(rank in 1usize..128, batch in 2usize..512, tau in 0.01f64..1.0, seed in any::<u64>(), steps in proptest::option::of(1usize..10_000)) {
        let mut rc = RunConfig::default();
        rc.set("rank", &rank.to_string()).unwrap();
        rc.set("batch", &batch.to_string()).unwrap();
        rc.set("tau", &tau.to_string()).unwrap();
        rc.set("seed", &seed.to_string()).unwrap();
        if let Some(s) = steps {
            rc.set("steps", &s.to_string()).unwrap();
        }
        let back = RunConfig::parse(&rc.to_text()).unwrap();
        prop_assert_eq!(back, rc);
    }
}
