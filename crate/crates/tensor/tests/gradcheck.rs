//! Central finite differences against the tape for every differentiable op.

use air_tensor::{ConvGeometry, Graph, Tensor, Var};
use proptest::prelude::*;

/// Deterministic pseudo-random fill in [-1, 1).
fn fill(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut s = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds a scalar from the given leaves; inputs are re-created for each probe.
fn check<F>(inputs: &[Tensor], build: F, tol: f64)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).unwrap();

    let eval = |perturbed: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], t.shape());
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            assert!(
                err < tol,
                "input {k} index {i}: analytic {a} numeric {numeric} (err {err})"
            );
        }
    }
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, v: Var) -> Var {
    let shape = g.shape(v).to_vec();
    let w = g.constant(fill(&shape, 99));
    let p = g.mul(v, w).unwrap();
    g.sum(p)
}

#[test]
fn matmul_all_transpose_combinations() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [4, 3] } else { [3, 4] };
        let b_shape = if tb { [5, 4] } else { [4, 5] };
        check(
            &[fill(&a_shape, 1), fill(&b_shape, 2)],
            |g, v| {
                let m = g.matmul_t(v[0], v[1], ta, tb).unwrap();
                weighted_sum(g, m)
            },
            1e-7,
        );
    }
}

#[test]
fn conv2d_with_stride_and_padding() {
    for geom in [
        ConvGeometry {
            stride: 1,
            padding: 1,
        },
        ConvGeometry {
            stride: 2,
            padding: 1,
        },
        ConvGeometry {
            stride: 2,
            padding: 0,
        },
    ] {
        check(
            &[fill(&[2, 3, 5, 5], 3), fill(&[4, 3, 3, 3], 4)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], geom).unwrap();
                weighted_sum(g, y)
            },
            1e-7,
        );
    }
    // 1x1 projection shortcut
    check(
        &[fill(&[2, 3, 4, 4], 5), fill(&[2, 3, 1, 1], 6)],
        |g, v| {
            let y = g
                .conv2d(
                    v[0],
                    v[1],
                    ConvGeometry {
                        stride: 2,
                        padding: 0,
                    },
                )
                .unwrap();
            weighted_sum(g, y)
        },
        1e-7,
    );
}

#[test]
fn batch_norm_train_and_fixed() {
    let x = fill(&[3, 2, 2, 2], 7);
    let gamma = fill(&[2], 8);
    let beta = fill(&[2], 9);
    check(
        &[x.clone(), gamma.clone(), beta.clone()],
        |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted_sum(g, y)
        },
        1e-6,
    );
    check(
        &[x, gamma, beta],
        |g, v| {
            let y = g
                .batch_norm_fixed(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)
                .unwrap();
            weighted_sum(g, y)
        },
        1e-7,
    );
    // 2-D input
    check(
        &[fill(&[5, 3], 10), fill(&[3], 11), fill(&[3], 12)],
        |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted_sum(g, y)
        },
        1e-6,
    );
}

#[test]
fn batch_norm_reports_unbiased_variance() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let gamma = g.constant(Tensor::from_vec(vec![1.0]));
    let beta = g.constant(Tensor::from_vec(vec![0.0]));
    let (_, stats) = g.batch_norm(x, gamma, beta, 1e-5).unwrap();
    assert_eq!(stats.mean, vec![2.5]);
    assert!((stats.var[0] - 5.0 / 3.0).abs() < 1e-12);
}

#[test]
fn pointwise_and_reductions() {
    check(
        &[fill(&[2, 3, 2, 2], 13)],
        |g, v| {
            let s = g.softplus(v[0]);
            let e = g.exp(s);
            let p = g.global_avg_pool(e).unwrap();
            weighted_sum(g, p)
        },
        1e-7,
    );
    check(
        &[fill(&[4, 3], 14), fill(&[3], 15)],
        |g, v| {
            let y = g.add_row_bias(v[0], v[1]).unwrap();
            let r = g.relu(y);
            let s = g.scale(r, -1.5);
            weighted_sum(g, s)
        },
        1e-7,
    );
}

#[test]
fn row_ops_and_log_softmax() {
    check(
        &[fill(&[4, 3], 16), fill(&[4, 3], 17)],
        |g, v| {
            let a = g.normalize_rows(v[0]).unwrap();
            let b = g.normalize_rows(v[1]).unwrap();
            let d = g.row_dot(a, b).unwrap();
            weighted_sum(g, d)
        },
        1e-7,
    );
    let mask: Vec<bool> = (0..16).map(|i| i % 5 != 0).collect();
    check(
        &[fill(&[4, 4], 18)],
        |g, v| {
            let l = g.log_softmax_rows(v[0], Some(mask.clone())).unwrap();
            let picked = g.gather(l, vec![1, 2, 3, 1]).unwrap();
            weighted_sum(g, picked)
        },
        1e-7,
    );
}

#[test]
fn structural_ops() {
    check(
        &[fill(&[2, 3], 19), fill(&[1, 3], 20)],
        |g, v| {
            let c = g.concat_rows(&[v[0], v[1]]).unwrap();
            let s = g.slice_rows(c, 1, 2).unwrap();
            let r = g.reshape(s, &[6]).unwrap();
            weighted_sum(g, r)
        },
        1e-7,
    );
    check(
        &[fill(&[3], 21), fill(&[3], 22)],
        |g, v| {
            let d = g.sub(v[0], v[1]).unwrap();
            let m = g.mul(d, v[0]).unwrap();
            let lc = g.linear_combination(&[(2.0, m), (-0.5, v[1])]).unwrap();
            weighted_sum(g, lc)
        },
        1e-7,
    );
}

#[test]
fn kl_div_of_softmaxes() {
    check(
        &[fill(&[1, 5], 23), fill(&[1, 5], 24)],
        |g, v| {
            let lp = g.log_softmax_rows(v[0], None).unwrap();
            let lq = g.log_softmax_rows(v[1], None).unwrap();
            let p = g.exp(lp);
            let q = g.exp(lq);
            let p = g.reshape(p, &[5]).unwrap();
            let q = g.reshape(q, &[5]).unwrap();
            g.kl_div(p, q, 1e-12).unwrap()
        },
        1e-7,
    );
}

#[test]
fn kl_div_conventions() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
    let q = g.constant(Tensor::from_vec(vec![0.5, 0.5]));
    let kl = g.kl_div(p, q, 1e-12).unwrap();
    assert!((g.value(kl).item() - 2f64.ln()).abs() < 1e-15);
    let rev = g.kl_div(q, p, 1e-12).unwrap();
    // 0.5 log(0.5/1) + 0.5 log(0.5/1e-12)
    let expected = 0.5 * 0.5f64.ln() + 0.5 * (0.5f64 / 1e-12).ln();
    assert!((g.value(rev).item() - expected).abs() < 1e-12);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let a = g.constant(fill(&[3], 1));
    let b = g.variable(fill(&[3], 2));
    let p = g.mul(a, b).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(a).is_none());
    assert_eq!(grads.get(b).unwrap(), g.value(a));
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::new();
    let a = g.constant(fill(&[2, 3], 1));
    let b = g.constant(fill(&[3, 2], 2));
    assert!(g.add(a, b).is_err());
    assert!(g.matmul(a, a).is_err());
    assert!(g.backward(a).is_err());
}

proptest! {
    #[test]
    fn log_softmax_rows_normalize(vals in proptest::collection::vec(-20.0f64..20.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let l = g.log_softmax_rows(x, None).unwrap();
        for r in 0..3 {
            let s: f64 = g.value(l).row(r).iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
