use mll_core::reuse::{entropy, entropy_weights, softmax, zero_shot_predict, MemberOutput};
use mll_core::selection::{match_nodes, reuse_metric, ZWeighting};
use mll_core::store::EmbeddingMatrix;
use proptest::prelude::*;

fn unit_ish(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, dim).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn matrix(prefix: &'static str, n: usize, dim: usize) -> impl Strategy<Value = EmbeddingMatrix> {
    prop::collection::vec(unit_ish(dim), n).prop_map(move |rows| {
        EmbeddingMatrix::from_rows((0..rows.len()).map(|i| format!("{prefix}{i}")).collect(), rows).unwrap()
    })
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(scores in prop::collection::vec(-1.0f64..1.0, 1..12), t in 0.005f64..5.0) {
        let p = softmax(&scores, t);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert!(entropy(&p) >= 0.0);
        prop_assert!(entropy(&p) <= (scores.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn entropy_weights_sum_to_one(h in prop::collection::vec(0.0f64..3.0, 1..8)) {
        let w = entropy_weights(&h);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn reuse_metric_stays_in_range(p in prop::collection::vec(0.0f64..=1.0, 1..10), alpha in 0.0f64..=1.0) {
        let r = reuse_metric(&p, alpha).unwrap();
        let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(r.iter().all(|x| *x >= lo && *x <= hi));
        // alpha = 1 is plain class precision
        prop_assert_eq!(reuse_metric(&p, 1.0).unwrap(), p.clone());
    }

    #[test]
    fn normalized_columns_sum_to_one(
        (tasks, nodes) in (1usize..6, 1usize..10, 2usize..6)
            .prop_flat_map(|(c, n, d)| (matrix("y", c, d), matrix("v", n, d))),
        k in 1usize..8,
    ) {
        let z = match_nodes(&tasks, &nodes, k, ZWeighting::Normalized).unwrap();
        for column in &z.columns {
            prop_assert!(column.nodes.len() <= k);
            prop_assert!(column.nodes.iter().all(|n| n.weight > 0.0 && n.similarity > 0.0));
            if !column.nodes.is_empty() {
                let sum: f64 = column.nodes.iter().map(|n| n.weight).sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        let raw = match_nodes(&tasks, &nodes, k, ZWeighting::Raw).unwrap();
        for column in &raw.columns {
            prop_assert_eq!(column.nodes.len(), k.min(nodes.len()));
            prop_assert!(column.nodes.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        }
    }

    #[test]
    fn zero_shot_argmax_ignores_temperature(
        (image, prompts) in (1usize..6, 2usize..8).prop_flat_map(|(c, d)| (unit_ish(d), matrix("c", c, d))),
    ) {
        let base = zero_shot_predict(&image, &prompts, 1.0).unwrap();
        for tau in [0.01, 0.07, 3.0] {
            prop_assert_eq!(&zero_shot_predict(&image, &prompts, tau).unwrap().class, &base.class);
        }
    }

    #[test]
    fn member_entropy_matches_probabilities(sims in prop::collection::vec(-1.0f64..1.0, 1..10)) {
        let out = MemberOutput::from_similarities(&sims, 1.0);
        prop_assert!((out.entropy - entropy(&out.probs)).abs() < 1e-15);
    }
}
