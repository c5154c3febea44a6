use cdn_core::evaluation::{auc, eer, fpr_at_tpr, roc, ScoredSample};
use cdn_core::feature_stats::{channel_stats, decompose, domain_transform, plan_pairing, recompose, transformed_count, FeatureMap};
use cdn_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn feature_map() -> impl Strategy<Value = FeatureMap> {
    (1usize..3, 1usize..4, 2usize..5).prop_flat_map(|(n, c, s)| {
        prop::collection::vec(-3.0f64..3.0, n * c * s * s)
            .prop_map(move |v| FeatureMap::new(Tensor::new(vec![n, c, s, s], v).unwrap()).unwrap())
    })
}

fn pair_of_maps() -> impl Strategy<Value = (FeatureMap, FeatureMap)> {
    (1usize..3, 1usize..4, 2usize..5).prop_flat_map(|(n, c, s)| {
        let len = n * c * s * s;
        (prop::collection::vec(-3.0f64..3.0, len), prop::collection::vec(-3.0f64..3.0, len)).prop_map(move |(a, b)| {
            let shape = vec![n, c, s, s];
            (FeatureMap::new(Tensor::new(shape.clone(), a).unwrap()).unwrap(), FeatureMap::new(Tensor::new(shape, b).unwrap()).unwrap())
        })
    })
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn scored() -> impl Strategy<Value = Vec<ScoredSample>> {
    prop::collection::vec((0u32..20, 0u8..2), 2..60).prop_filter_map("needs both classes", |raw| {
        let has_both = raw.iter().any(|r| r.1 == 0) && raw.iter().any(|r| r.1 == 1);
        has_both.then(|| raw.into_iter().map(|(q, l)| ScoredSample::new(q as f64 / 20.0, l, 0).unwrap()).collect())
    })
}

proptest! {
    #[test]
    fn decompose_then_recompose_is_identity(z in feature_map()) {
        let (i, d) = decompose(&z, 1e-5).unwrap();
        let back = recompose(&i, &d).unwrap();
        prop_assert!(max_diff(back.tensor(), z.tensor()) < 1e-9);
    }

    #[test]
    fn self_transform_is_identity(z in feature_map()) {
        let t = domain_transform(&z, &z, 1e-5).unwrap();
        prop_assert!(max_diff(t.tensor(), z.tensor()) < 1e-9);
    }

    #[test]
    fn transform_adopts_target_mean_and_keeps_content((a, b) in pair_of_maps()) {
        let eps = 1e-5;
        let t = domain_transform(&a, &b, eps).unwrap();
        let (st, sb) = (channel_stats(&t, eps).unwrap(), channel_stats(&b, eps).unwrap());
        prop_assert!(max_diff(&st.mu, &sb.mu) < 1e-9);
        let (ia, _) = decompose(&a, 0.0).unwrap();
        let (it, _) = decompose(&t, 0.0).unwrap();
        prop_assert!(max_diff(ia.tensor(), it.tensor()) < 1e-6);
    }

    #[test]
    fn pairing_crosses_domains(domains in prop::collection::vec(0u32..3, 2..40), alpha in 0.0f64..=1.0, seed: u64) {
        prop_assume!(domains.iter().any(|&d| d != domains[0]));
        let p = plan_pairing(&domains, alpha, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(p.pairs.len(), transformed_count(alpha, domains.len()));
        let mut sources: Vec<usize> = p.pairs.iter().map(|x| x.0).collect();
        sources.sort();
        sources.dedup();
        prop_assert_eq!(sources.len(), p.pairs.len());
        prop_assert!(p.pairs.iter().all(|&(s, q)| domains[s] != domains[q]));
    }

    #[test]
    fn auc_ignores_monotone_rescaling(s in scored()) {
        let squashed: Vec<ScoredSample> = s.iter().map(|x| ScoredSample::new(x.score * x.score, x.label, 0).unwrap()).collect();
        prop_assert_eq!(auc(&s).unwrap(), auc(&squashed).unwrap());
        prop_assert_eq!(eer(&s).unwrap(), eer(&squashed).unwrap());
    }

    #[test]
    fn flipped_scores_complement_auc(s in scored()) {
        let flipped: Vec<ScoredSample> = s.iter().map(|x| ScoredSample::new(1.0 - x.score, x.label, 0).unwrap()).collect();
        prop_assert!((auc(&s).unwrap() + auc(&flipped).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roc_is_monotone_and_bounded(s in scored(), t1 in 0.01f64..=1.0, t2 in 0.01f64..=1.0) {
        let r = roc(&s).unwrap();
        prop_assert_eq!((r[0].fpr, r[0].tpr), (0.0, 0.0));
        prop_assert_eq!((r.last().unwrap().fpr, r.last().unwrap().tpr), (1.0, 1.0));
        prop_assert!(r.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr && w[1].threshold < w[0].threshold));
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(fpr_at_tpr(&s, lo).unwrap() <= fpr_at_tpr(&s, hi).unwrap());
        let e = eer(&s).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
    }
}
