use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random store with the given named shapes.
fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .map(|(n, sh)| s.add(*n, Tensor::randn(sh, 0.7, &mut r)).unwrap())
        .collect();
    (s, ids)
}

fn check_max(report: &GradCheckReport, tol: f64) {
    assert!(
        report.max_rel_error < tol,
        "max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn matmul_identity_padded() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap());
    let b = g.constant(Tensor::new(vec![3, 1], vec![4.0, -5.0, 9.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 1]);
    assert_eq!(g.value(c).data(), &[4.0, -5.0]);
}

#[test]
fn matmul_shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn softmax_of_zero_row_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 4]));
    let y = g.softmax(x).unwrap();
    for v in g.value(y).data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 5], 3.5));
    let gamma = g.constant(Tensor::full(&[1, 5], 1.0));
    let beta = g.constant(Tensor::zeros(&[1, 5]));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(1000.0));
    assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
}

#[test]
fn square_has_derivative_six_at_three() {
    let mut s = ParamStore::new();
    let id = s.add("x", Tensor::scalar(3.0)).unwrap();
    let mut g = Graph::new();
    let x = g.param(&s, id);
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(&s, id).unwrap().item(), 6.0);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let (s, ids) = store_with(&[("x", &[1, 6])], 3);
    let mut g = Graph::new();
    let x = g.param(&s, ids[0]);
    let p = g.softmax(x).unwrap();
    let l = g.sum(p).unwrap();
    let grads = g.backward(l).unwrap();
    for v in grads.get(&s, ids[0]).unwrap().data() {
        assert!(v.abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_output() {
    let (s, ids) = store_with(&[("x", &[2, 2])], 1);
    let mut g = Graph::new();
    let x = g.param(&s, ids[0]);
    assert!(matches!(g.backward(x), Err(Error::NonScalar(_))));
}

#[test]
fn param_leaf_is_shared_within_a_graph() {
    let (s, ids) = store_with(&[("x", &[1, 3])], 1);
    let mut g = Graph::new();
    let a = g.param(&s, ids[0]);
    let b = g.param(&s, ids[0]);
    assert_eq!(a, b);
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let (mut s, _) = store_with(
        &[
            ("w1", &[5, 8]),
            ("b1", &[1, 8]),
            ("w2", &[8, 8]),
            ("b2", &[1, 8]),
            ("w3", &[8, 3]),
            ("b3", &[1, 3]),
        ],
        11,
    );
    let input = Tensor::randn(&[4, 5], 1.0, &mut rng(12));
    let report = finite_diff_check(&mut s, None, 1e-5, |g, s| {
        let x = g.constant(input.clone());
        let mut h = x;
        for layer in 0..3 {
            let w = g.param(s, ParamId(2 * layer));
            let b = g.param(s, ParamId(2 * layer + 1));
            let z = g.matmul(h, w)?;
            let z = g.add_row(z, b)?;
            h = if layer < 2 { g.tanh(z)? } else { z };
        }
        let lp = g.log_softmax(h)?;
        g.smoothed_nll(lp, &[0, 2, 1, 1], 0.1)
    })
    .unwrap();
    assert_eq!(report.checked, 5 * 8 + 8 + 64 + 8 + 24 + 3);
    check_max(&report, 1e-4);
}

#[test]
fn linear_layer_gradcheck_with_step_1e_4() {
    let (mut s, _) = store_with(&[("w", &[3, 2]), ("b", &[1, 2])], 5);
    let input = Tensor::randn(&[4, 3], 1.0, &mut rng(6));
    let report = finite_diff_check(&mut s, None, 1e-4, |g, s| {
        let x = g.constant(input.clone());
        let w = g.param(s, ParamId(0));
        let b = g.param(s, ParamId(1));
        let z = g.matmul(x, w)?;
        let z = g.add_row(z, b)?;
        let sq = g.mul(z, z)?;
        g.sum(sq)
    })
    .unwrap();
    check_max(&report, 1e-5);
}

#[test]
fn zero_parameter_graph_gives_empty_report() {
    let mut s = ParamStore::new();
    let report = finite_diff_check(&mut s, None, 1e-3, |g, _| {
        let c = g.constant(Tensor::scalar(2.0));
        g.sum(c)
    })
    .unwrap();
    assert!(report.is_empty());
}

/// Single-op gradient checks for every differentiable op.
fn op_check(shapes: &[(&str, &[usize])], seed: u64, f: impl Fn(&mut Graph, &[Var]) -> crate::error::Result<Var>) {
    let (mut s, ids) = store_with(shapes, seed);
    let report = finite_diff_check(&mut s, None, 1e-5, |g, s| {
        let vars: Vec<Var> = ids.iter().map(|id| g.param(s, *id)).collect();
        let out = f(g, &vars)?;
        // weight outputs so every entry matters differently
        let n = g.value(out).len();
        let shape = g.shape(out).to_vec();
        let w = g.constant(Tensor::new(shape, (0..n).map(|i| ((i * 7 % 5) as f64) - 1.7).collect())?);
        let p = g.mul(out, w)?;
        g.sum(p)
    })
    .unwrap();
    check_max(&report, 1e-6);
}

#[test]
fn elementwise_ops_gradcheck() {
    op_check(&[("a", &[3, 4]), ("b", &[3, 4])], 1, |g, v| g.add(v[0], v[1]));
    op_check(&[("a", &[3, 4]), ("b", &[3, 4])], 2, |g, v| g.sub(v[0], v[1]));
    op_check(&[("a", &[3, 4]), ("b", &[3, 4])], 3, |g, v| g.mul(v[0], v[1]));
    op_check(&[("a", &[3, 4]), ("b", &[1, 4])], 4, |g, v| g.add_row(v[0], v[1]));
    op_check(&[("a", &[3, 4])], 5, |g, v| g.scale(v[0], -2.5));
    op_check(&[("a", &[3, 4])], 6, |g, v| g.gelu(v[0]));
    op_check(&[("a", &[3, 4])], 7, |g, v| g.tanh(v[0]));
    op_check(&[("a", &[3, 4])], 8, |g, v| g.exp(v[0]));
    op_check(&[("a", &[3, 4])], 9, |g, v| g.relu(v[0]));
    op_check(&[("a", &[3, 4])], 10, |g, v| g.clamp(v[0], -0.5, 0.5));
}

#[test]
fn matrix_ops_gradcheck() {
    op_check(&[("a", &[3, 4]), ("b", &[4, 2])], 1, |g, v| g.matmul(v[0], v[1]));
    op_check(&[("a", &[3, 4]), ("b", &[5, 4])], 2, |g, v| g.matmul_nt(v[0], v[1]));
    op_check(&[("a", &[3, 5])], 3, |g, v| g.softmax(v[0]));
    op_check(&[("a", &[3, 5])], 4, |g, v| g.log_softmax(v[0]));
    op_check(&[("x", &[3, 5]), ("g", &[1, 5]), ("b", &[1, 5])], 5, |g, v| {
        g.layer_norm(v[0], v[1], v[2])
    });
    op_check(&[("a", &[3, 5])], 6, |g, v| g.sum(v[0]));
    op_check(&[("a", &[3, 5])], 7, |g, v| g.mean(v[0]));
    op_check(&[("a", &[4, 3])], 8, |g, v| g.masked_mean_rows(v[0], &[true, false, true, true]));
    op_check(&[("a", &[3, 6])], 9, |g, v| g.slice_cols(v[0], 2, 3));
    op_check(&[("a", &[3, 2]), ("b", &[3, 3])], 10, |g, v| g.concat_cols(&[v[0], v[1], v[0]]));
    op_check(&[("a", &[5, 2])], 11, |g, v| g.slice_rows(v[0], 1, 3));
    op_check(&[("a", &[2, 3]), ("b", &[1, 3])], 12, |g, v| g.concat_rows(&[v[0], v[1]]));
    op_check(&[("t", &[5, 3])], 13, |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]));
    op_check(&[("x", &[9, 2])], 14, |g, v| g.im2col(v[0], 3, 2, 1));
    op_check(&[("x", &[3, 4])], 15, |g, v| g.norm2(v[0]));
    op_check(&[("x", &[3, 4])], 16, |g, v| g.select(v[0], &[0, 5, 5, 11]));
    op_check(&[("x", &[3, 4])], 17, |g, v| g.reshape(v[0], &[2, 6]));
}

#[test]
fn fused_loss_ops_gradcheck() {
    op_check(&[("b", &[4, 5]), ("a", &[4, 5])], 1, |g, v| g.project_rows(v[0], v[1]));
    op_check(&[("x", &[7, 3]), ("m", &[7, 3]), ("l", &[7, 3])], 2, |g, v| {
        g.pairwise_gaussian_log_density(v[0], v[1], v[2], &[(0, 3), (3, 2), (5, 2)])
    });
    op_check(&[("z", &[3, 6])], 3, |g, v| {
        let lp = g.log_softmax(v[0])?;
        g.smoothed_nll(lp, &[5, 0, 2], 0.1)
    });
    op_check(&[("p", &[3, 6]), ("q", &[3, 6])], 4, |g, v| {
        let a = g.log_softmax(v[0])?;
        let b = g.log_softmax(v[1])?;
        g.jsd(a, b)
    });
}

#[test]
fn projection_guard_gives_zero_and_no_gradient() {
    let mut s = ParamStore::new();
    let b = s.add("b", Tensor::row(&[3.0, 4.0])).unwrap();
    let a = s.add("a", Tensor::row(&[0.0, 0.0])).unwrap();
    let mut g = Graph::new();
    let bv = g.param(&s, b);
    let av = g.param(&s, a);
    let p = g.project_rows(bv, av).unwrap();
    assert_eq!(g.value(p).data(), &[0.0, 0.0]);
    let l = g.sum(p).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(&s, a).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn masked_mean_pool_examples() {
    let x = Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap();
    assert_eq!(masked_mean_pool(&x, &[true, true]).unwrap(), vec![2.0, 2.0]);
    let y = Tensor::from_rows(&[vec![1.0], vec![9.0]]).unwrap();
    assert_eq!(masked_mean_pool(&y, &[true, false]).unwrap(), vec![1.0]);
    assert!(masked_mean_pool(&y, &[false, false]).is_err());
}

#[test]
fn masked_mean_pool_matches_direct_summation() {
    let mut r = rng(99);
    let x = Tensor::randn(&[100, 7], 1.0, &mut r);
    let mask: Vec<bool> = (0..100).map(|i| i % 3 != 1).collect();
    let pooled = masked_mean_pool(&x, &mask).unwrap();
    let mut sum = [0.0; 7];
    let mut count = 0.0;
    for (i, keep) in mask.iter().enumerate() {
        if *keep {
            count += 1.0;
            for (j, s) in sum.iter_mut().enumerate() {
                *s += x.at(i, j);
            }
        }
    }
    for j in 0..7 {
        assert!((pooled[j] - sum[j] / count).abs() < 1e-12);
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let (s, ids) = store_with(&[("w", &[4, 4])], 42);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng(1)));
        let w = g.param(&s, ids[0]);
        let y = g.matmul(x, w).unwrap();
        let y = g.softmax(y).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let y = g.softmax(x).unwrap();
        for r in 0..3 {
            let s: f64 = g.value(y).row_slice(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean(vals in proptest::collection::vec(-50.0f64..50.0, 16)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 8], vals).unwrap());
        let gamma = g.constant(Tensor::full(&[1, 8], 1.0));
        let beta = g.constant(Tensor::zeros(&[1, 8]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for r in 0..2 {
            let m: f64 = g.value(y).row_slice(r).iter().sum::<f64>() / 8.0;
            prop_assert!(m.abs() < 1e-6);
        }
    }
}
