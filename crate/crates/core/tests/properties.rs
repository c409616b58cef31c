use air_core::adversary::{project_linf, PgdConfig};
use air_core::objectives::{
    air_loss, kl_batch, probability_table, sir_loss, total_objective, uncalibrated_air,
    EmbeddingSet, RegularizerConfig, TableKind, ViewBranch,
};
use air_core::schedule::{cosine_lr, dynacl_schedule};
use air_tensor::Tensor;
use proptest::prelude::*;

fn block(beta: usize, dim: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, beta * dim)
        .prop_filter("rows must be non-zero", move |v| {
            v.chunks(dim)
                .all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6)
        })
        .prop_map(move |v| Tensor::new(vec![beta, dim], v).unwrap())
}

fn embeddings() -> impl Strategy<Value = EmbeddingSet> {
    (1usize..7, 2usize..6).prop_flat_map(|(beta, dim)| {
        (
            block(beta, dim),
            block(beta, dim),
            block(beta, dim),
            block(beta, dim),
            block(beta, dim),
        )
            .prop_map(|(originals, view_i, view_j, a, b)| EmbeddingSet {
                originals,
                view_i,
                view_j,
                adv_i: Some(a),
                adv_j: Some(b),
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tables_are_distributions(e in embeddings()) {
        for kind in [TableKind::YGivenAdv, TableKind::AdvGivenX, TableKind::YGivenX] {
            for branch in [ViewBranch::I, ViewBranch::J] {
                let t = probability_table(&e, kind, branch, 0.5).unwrap();
                prop_assert!((t.total() - 1.0).abs() <= 1e-9);
                prop_assert!(t.values.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn divergences_are_nonnegative(e in embeddings()) {
        let p = probability_table(&e, TableKind::YGivenX, ViewBranch::I, 0.5).unwrap();
        let q = probability_table(&e, TableKind::YGivenX, ViewBranch::J, 0.5).unwrap();
        prop_assert!(kl_batch(&p, &q).unwrap() >= -1e-12);
        prop_assert!(sir_loss(&e, 0.5).unwrap() >= -1e-12);
        prop_assert!(uncalibrated_air(&e, 0.5).unwrap() >= -1e-12);
        prop_assert!(air_loss(&e, 0.5).unwrap().is_finite());
    }

    #[test]
    fn objective_is_scale_invariant(e in embeddings(), c in 0.01f64..100.0) {
        let cfg = RegularizerConfig::default();
        let a = total_objective(&e, &cfg).unwrap();
        let b = total_objective(&e.scaled(c), &cfg).unwrap();
        prop_assert!((a.total - b.total).abs() <= 1e-9 * (1.0 + a.total.abs()));
    }

    #[test]
    fn projection_is_feasible(
        x in prop::collection::vec(0.0f64..=1.0, 12),
        d in prop::collection::vec(-0.5f64..0.5, 12),
        eps in 0.0f64..0.2,
    ) {
        let anchor = Tensor::new(vec![1, 3, 2, 2], x).unwrap();
        let moved = Tensor::new(vec![1, 3, 2, 2], anchor.data().iter().zip(&d).map(|(a, b)| a + b).collect()).unwrap();
        let p = project_linf(&moved, &anchor, eps).unwrap();
        for (&v, &a) in p.data().iter().zip(anchor.data()) {
            prop_assert!((v - a).abs() <= eps + 1e-12);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn schedules_are_monotone_and_bounded(k in 1usize..40, extra in 1usize..200, nu in 0.0f64..1.0) {
        let e = k + extra;
        let mut prev = (f64::INFINITY, f64::NEG_INFINITY);
        for epoch in 0..e {
            let (mu, omega) = dynacl_schedule(epoch, k, e, nu).unwrap();
            prop_assert!(mu > 0.0 && mu <= 1.0);
            prop_assert!(omega >= 0.0 && omega < nu.max(f64::MIN_POSITIVE));
            prop_assert!(mu <= prev.0 && omega >= prev.1);
            prev = (mu, omega);
        }
        for step in 0..=e {
            let lr = cosine_lr(step, e, 0.3).unwrap();
            prop_assert!((-1e-15..=0.3).contains(&lr));
        }
    }
}

#[test]
fn attack_configs_follow_stage_conventions() {
    assert_eq!(PgdConfig::default().steps, 5);
    assert_eq!(PgdConfig::finetune().steps, 10);
    assert_eq!(PgdConfig::evaluation().steps, 20);
    for c in [
        PgdConfig::default(),
        PgdConfig::finetune(),
        PgdConfig::evaluation(),
    ] {
        assert_eq!((c.eps, c.alpha), (8.0 / 255.0, 2.0 / 255.0));
    }
}
