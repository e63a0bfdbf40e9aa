mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use altreco::data::{build_user_history, generate_synthetic, Corpus, Sample, SyntheticSpec, TagVocabulary, UserHistory};
use altreco::losses::{self, HuberConfig, JitterConfig};
use altreco::metrics::{self, PredictionSet};
use altreco::model::TagNet;
use altreco::{seed, Tape, Tensor};
use proptest::prelude::*;

fn ranking(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn instance() -> impl Strategy<Value = Vec<PredictionSet>> {
    (2usize..12).prop_flat_map(|n| {
        prop::collection::vec(
            (prop::collection::btree_set(0..n, 1..=n), ranking(n)),
            1..20,
        )
        .prop_map(|v| v.into_iter().map(|(t, r)| PredictionSet::new(t, r)).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn history_is_max_normalized(counts in prop::collection::btree_map(0usize..30, 1u32..50, 1..20)) {
        let h = UserHistory::from_counts("u", counts.clone(), 30).unwrap();
        let max = h.vector.iter().cloned().fold(0.0, f64::max);
        prop_assert_eq!(max, 1.0);
        prop_assert!(h.vector.iter().all(|v| (0.0..=1.0).contains(v)));
        let top = *counts.values().max().unwrap();
        for (t, c) in counts {
            prop_assert_eq!(h.vector[t], c as f64 / top as f64);
        }
    }

    #[test]
    fn recall_grows_with_k_and_precision_bounded_by_accuracy(preds in instance()) {
        let n = preds[0].ranked.len();
        let mut last_recall = 0.0;
        for k in 1..=n {
            let (p, r, a) = metrics::precision_recall_accuracy_at_k(&preds, k).unwrap();
            prop_assert!(r >= last_recall - 1e-12);
            prop_assert!(p <= a + 1e-12);
            last_recall = r;
        }
    }

    #[test]
    fn metrics_depend_only_on_order(scores in prop::collection::vec(-5.0f64..5.0, 3..15), k in 1usize..3) {
        let n = scores.len();
        let transformed: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
        let a = metrics::top_k(&scores, k.min(n)).unwrap();
        let b = metrics::top_k(&transformed, k.min(n)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn top_k_full_is_permutation(scores in prop::collection::vec(-1.0f64..1.0, 1..30)) {
        let mut r = metrics::top_k(&scores, scores.len()).unwrap();
        for w in r.windows(2) {
            prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
        }
        r.sort_unstable();
        prop_assert_eq!(r, (0..scores.len()).collect::<Vec<_>>());
    }

    #[test]
    fn f1_is_harmonic_mean(preds in instance(), k in 1usize..3) {
        let (cp, cr, cf) = metrics::per_class_metrics(&preds, k).unwrap();
        let (op, or, of) = metrics::overall_metrics(&preds, k).unwrap();
        for (p, r, f) in [(cp, cr, cf), (op, or, of)] {
            prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
            let expect = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            prop_assert_eq!(f, expect);
        }
    }

    #[test]
    fn jitter_stays_in_disjoint_bands(eta in 0.5f64..0.9, labels in prop::collection::vec(prop::bool::ANY, 1..200), s in any::<u64>()) {
        let iota = 1.0 - eta;
        let cfg = JitterConfig { eta, iota };
        let p: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let mut rng = seed::rng(s, seed::JITTER);
        for (v, b) in losses::jitter_ground_truth(&p, cfg, &mut rng).into_iter().zip(labels) {
            if b {
                prop_assert!(v >= eta && v < eta + iota);
            } else {
                prop_assert!((0.0..iota).contains(&v));
            }
        }
    }

    #[test]
    fn huber_is_nonnegative_and_symmetric(r in prop::collection::vec(-3.0f64..3.0, 1..20), delta in 0.1f64..2.0) {
        let mut tape = Tape::new();
        let n = r.len();
        let a = tape.constant(&Tensor::matrix(1, n, r.clone()).unwrap()).unwrap();
        let z = tape.constant(&Tensor::matrix(1, n, vec![0.0; n]).unwrap()).unwrap();
        let neg = tape.constant(&Tensor::matrix(1, n, r.iter().map(|v| -v).collect()).unwrap()).unwrap();
        let cfg = HuberConfig { delta };
        let l1 = losses::huber_reconstruction(&mut tape, a, z, cfg).unwrap();
        let l2 = losses::huber_reconstruction(&mut tape, neg, z, cfg).unwrap();
        let (v1, v2) = (tape.value(l1).item().unwrap(), tape.value(l2).item().unwrap());
        prop_assert!(v1 >= 0.0);
        prop_assert_eq!(v1, v2);
    }

    #[test]
    fn bce_is_nonnegative(p in prop::collection::vec(0.0f64..=1.0, 1..20), seed_bits in any::<u64>()) {
        let n = p.len();
        let t: Vec<f64> = (0..n).map(|i| ((seed_bits >> (i % 64)) & 1) as f64).collect();
        let mut tape = Tape::new();
        let pv = tape.constant(&Tensor::matrix(1, n, p).unwrap()).unwrap();
        let tv = tape.constant(&Tensor::matrix(1, n, t).unwrap()).unwrap();
        let l = losses::bce_multilabel(&mut tape, pv, tv).unwrap();
        prop_assert!(tape.value(l).item().unwrap() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generator_ignores_history(h in prop::collection::vec(0.0f64..=1.0, 12 * 2)) {
        let net = TagNet::new(common::tiny_config(), 4).unwrap();
        let inp = common::full_graph_inputs(net.config(), 2, 4);
        let mut a = Tape::new();
        let base = net.full_forward(&mut a, &inp.x, &inp.u_h).unwrap();
        let mut b = Tape::new();
        let other = net.full_forward(&mut b, &inp.x, &Tensor::matrix(2, 12, h).unwrap()).unwrap();
        prop_assert_eq!(a.value(base.t_g).data(), b.value(other.t_g).data());
    }

    #[test]
    fn synthetic_digest_is_a_function_of_the_spec(s in any::<u64>()) {
        let spec = SyntheticSpec {
            num_users: 8,
            num_clusters: 2,
            num_images: 40,
            vocab_size: 15,
            feature_dim: 6,
            tags_per_image: (2, 4),
            cluster_tag_affinity: 0.5,
            seed: s,
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        prop_assert_eq!(a.corpus.digest(), b.corpus.digest());
        prop_assert_eq!(a.clusters, b.clusters);
    }

    #[test]
    fn excluded_images_never_counted(s in any::<u64>(), frac in 0.1f64..0.5) {
        let corpus = generate_synthetic(&SyntheticSpec {
            num_users: 5,
            num_clusters: 2,
            num_images: 60,
            vocab_size: 12,
            feature_dim: 4,
            tags_per_image: (1, 3),
            cluster_tag_affinity: 0.5,
            seed: s,
        })
        .unwrap()
        .corpus;
        let split = corpus.split(frac, s).unwrap();
        let exclude = split.test_ids(&corpus);
        for user in corpus.samples.iter().map(|x| x.user_id.clone()).collect::<BTreeSet<_>>() {
            let h = build_user_history(&corpus.samples, &user, &exclude, 12).unwrap();
            let mut counts = BTreeMap::new();
            for &i in &split.train {
                let x = &corpus.samples[i];
                if x.user_id == user {
                    for &t in &x.tags {
                        *counts.entry(t).or_insert(0u32) += 1;
                    }
                }
            }
            prop_assert_eq!(h.counts, counts);
        }
    }
}

#[test]
fn unknown_user_gets_cold_start_vector() {
    let vocab = TagVocabulary::new(vec!["a".into(), "b".into()]).unwrap();
    let corpus = Corpus::new(
        vocab,
        vec![Sample {
            image_id: "i".into(),
            user_id: "u".into(),
            features: vec![0.0],
            tags: [0].into_iter().collect(),
        }],
    )
    .unwrap();
    let h = build_user_history(&corpus.samples, "nobody", &HashSet::new(), 2).unwrap();
    assert_eq!(h.vector, vec![0.0, 0.0]);
}
