use csdr_core::eval::{average_ranks, spearman};
use csdr_core::numeric::{cosine_similarity, log_sum_exp, stable_softmax};
use csdr_core::retrieval::Index;
use csdr_core::text::{build_vocab, split_pairs, tokenize};
use proptest::prelude::*;

fn text_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            "[a-zA-Z0-9]{1,6}",
            "[\u{4e00}-\u{4e40}]{1,4}",
            "[ァ-ヶ]{1,3}",
            "[ＡＢＣａｂｃ１２３]{1,3}",
            "[ \t,.;()\\-]{1,3}",
            "[αβγΔΩ]{1,2}",
        ],
        0..10,
    )
    .prop_map(|parts| parts.concat())
}

proptest! {
    #[test]
    fn tokenize_is_idempotent(text in text_strategy()) {
        let once = tokenize(&text);
        prop_assert_eq!(tokenize(&once.join(" ")), once);
    }

    #[test]
    fn tokens_have_no_whitespace_and_are_lowercase(text in text_strategy()) {
        for t in tokenize(&text) {
            prop_assert!(!t.is_empty());
            prop_assert!(!t.chars().any(char::is_whitespace));
            prop_assert_eq!(t.to_lowercase(), t.clone());
        }
    }

    #[test]
    fn encode_decode_round_trips(texts in prop::collection::vec(text_strategy(), 1..6)) {
        let vocab = build_vocab(texts.iter().map(String::as_str), 1).unwrap();
        for t in &texts {
            let ids = vocab.encode_ids(t, 512);
            prop_assert_eq!(vocab.encode_ids(&vocab.decode(&ids), 512), ids);
        }
    }

    #[test]
    fn split_is_a_partition(n in 2usize..300, ratio in 0.01f64..0.99, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let (train, test) = split_pairs(&items, ratio, seed).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(&all, &items);
        prop_assert!(!train.is_empty() && !test.is_empty());
        let expect = ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
        prop_assert_eq!(train.len(), expect);
        prop_assert_eq!(split_pairs(&items, ratio, seed).unwrap(), (train, test));
    }

    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-300.0f64..300.0, 1..30)) {
        let p = stable_softmax(&xs).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn log_sum_exp_bounds(xs in prop::collection::vec(-700.0f64..700.0, 1..30)) {
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let l = log_sum_exp(&xs).unwrap();
        prop_assert!(l >= m && l <= m + (xs.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn cosine_symmetric_and_scale_free(
        a in prop::collection::vec(-5.0f64..5.0, 3),
        b in prop::collection::vec(-5.0f64..5.0, 3),
        alpha in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let ab = cosine_similarity(&a, &b).unwrap();
        let scaled: Vec<f64> = a.iter().map(|x| x * alpha).collect();
        prop_assert!((ab - cosine_similarity(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((ab - cosine_similarity(&scaled, &b).unwrap()).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn ranks_sum_is_triangular(xs in prop::collection::vec(0u8..5, 1..60)) {
        let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
        let n = xs.len() as f64;
        let total: f64 = average_ranks(&xs).iter().sum();
        prop_assert!((total - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn spearman_ignores_monotone_transforms(
        xs in prop::collection::vec(-50i32..50, 3..40),
        ys in prop::collection::vec(-3.0f64..3.0, 3..40),
    ) {
        let n = xs.len().min(ys.len());
        let xs: Vec<f64> = xs[..n].iter().map(|&x| f64::from(x)).collect();
        let ys = &ys[..n];
        if let Ok(base) = spearman(&xs, ys) {
            let tx: Vec<f64> = xs.iter().map(|x| x * x * x + x).collect();
            let ty: Vec<f64> = ys.iter().map(|y| y.exp()).collect();
            prop_assert!((base - spearman(&tx, &ty).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn search_scores_are_sorted(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..40),
        q in prop::collection::vec(-1.0f64..1.0, 4),
        k in 1usize..50,
    ) {
        prop_assume!(rows.iter().all(|r| r.iter().any(|x| x.abs() > 1e-3)));
        prop_assume!(q.iter().any(|x| x.abs() > 1e-3));
        let n = rows.len();
        let index = Index::from_vectors(&rows, vec![String::new(); n]).unwrap();
        let q = csdr_core::numeric::normalized(&q).unwrap();
        let hits = index.search(&q, k).unwrap();
        prop_assert_eq!(hits.len(), k.min(n));
        prop_assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
    }
}
