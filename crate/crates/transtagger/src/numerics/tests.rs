use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn feeds() -> Feeds {
    Feeds::new()
}

#[test]
fn matmul_identity_returns_operand() {
    let mut g = Graph::new(0);
    let eye = g.constant(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
    let a_data = vec![2., -1., 0.5, 3., 4., -2., 0., 1., 7.];
    let a = g.constant(Tensor::new(vec![3, 3], a_data.clone()).unwrap());
    let prod = g.matmul(eye, a).unwrap();
    let out = g.forward(prod, &feeds()).unwrap();
    assert_eq!(out.data, a_data);
}

#[test]
fn softmax_symmetry() {
    let mut g = Graph::new(0);
    let x = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    let out = g.forward(s, &feeds()).unwrap();
    assert!((out.data[0] - 0.5).abs() < 1e-15);
    assert!((out.data[1] - 0.5).abs() < 1e-15);
}

#[test]
fn layer_norm_constant_row_normalizes_to_zero() {
    let mut g = Graph::new(0);
    let x = g.constant(Tensor::new(vec![4], vec![3.7; 4]).unwrap());
    let gamma = g.constant(Tensor::ones(&[4]));
    let beta = g.constant(Tensor::zeros(&[4]));
    let ln = g.layer_norm(x, gamma, beta).unwrap();
    let out = g.forward(ln, &feeds()).unwrap();
    for v in out.data {
        assert!(v.abs() < 1e-12, "expected ~0, got {}", v);
    }
}

#[test]
fn backward_square_at_three_is_six() {
    let mut g = Graph::new(0);
    let x = g.param("x", Tensor::scalar(3.0)).unwrap();
    let y = g.mul(x, x).unwrap();
    g.forward(y, &feeds()).unwrap();
    let grads = g.backward(y).unwrap();
    assert!((grads["x"].data[0] - 6.0).abs() < 1e-12);
}

#[test]
fn backward_softmax_cross_entropy_is_p_minus_onehot() {
    let mut g = Graph::new(0);
    let logits = vec![0.3, -1.2, 2.0, 0.0];
    let z = g
        .param("z", Tensor::new(vec![1, 4], logits.clone()).unwrap())
        .unwrap();
    let loss = g.cross_entropy_hard(z, &[2]).unwrap();
    g.forward(loss, &feeds()).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut p = vec![0.0; 4];
    ops::softmax_slice(&logits, &mut p);
    for c in 0..4 {
        let want = p[c] - if c == 2 { 1.0 } else { 0.0 };
        assert!((grads["z"].data[c] - want).abs() < 1e-12);
    }
}

#[test]
fn backward_matmul_matches_closed_form() {
    let mut g = Graph::new(0);
    let a = g
        .param("a", Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap())
        .unwrap();
    let b_data = vec![0.5, -1., 2., 0.25, -0.5, 1.5];
    let b = g.constant(Tensor::new(vec![3, 2], b_data.clone()).unwrap());
    let c = g.matmul(a, b).unwrap();
    let loss = g.mean(c);
    g.forward(loss, &feeds()).unwrap();
    let grads = g.backward(loss).unwrap();

    // dC is 1/4 everywhere, so dA = dC * B^T.
    let dc = 1.0 / 4.0;
    let da = &grads["a"];
    assert_eq!(da.shape, vec![2, 3]);
    for r in 0..2 {
        for k in 0..3 {
            let want: f64 = (0..2).map(|n| dc * b_data[k * 2 + n]).sum();
            assert!((da.at(r, k) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_fan_out_sums_branches() {
    // y = x^2 + 3x; dy/dx = 2x + 3
    let mut g = Graph::new(0);
    let x = g.param("x", Tensor::scalar(1.5)).unwrap();
    let sq = g.mul(x, x).unwrap();
    let lin = g.scale(x, 3.0).unwrap();
    let y = g.add(sq, lin).unwrap();
    g.forward(y, &feeds()).unwrap();
    let grads = g.backward(y).unwrap();
    assert!((grads["x"].data[0] - 6.0).abs() < 1e-12);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new(0);
    let x = g.param("x", Tensor::new(vec![2], vec![1., 2.]).unwrap()).unwrap();
    let y = g.gelu(x);
    g.forward(y, &feeds()).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn forward_missing_feed_is_an_error() {
    let mut g = Graph::new(0);
    let p = g.placeholder("inp", &[2, 2]).unwrap();
    let m = g.mean(p);
    assert!(matches!(g.forward(m, &feeds()), Err(Error::MissingFeed(_))));
}

#[test]
fn forward_feed_shape_checked() {
    let mut g = Graph::new(0);
    let p = g.placeholder("inp", &[2, 2]).unwrap();
    let m = g.mean(p);
    let mut f = feeds();
    f.insert("inp".into(), Tensor::zeros(&[3, 2]));
    assert!(matches!(
        g.forward(m, &f),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn matmul_shape_mismatch_names_node() {
    let mut g = Graph::new(0);
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::ShapeMismatch { node, .. }) => assert!(node.starts_with("matmul@")),
        other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn embed_lookup_rejects_out_of_range() {
    let mut g = Graph::new(0);
    let table = g.constant(Tensor::zeros(&[5, 3]));
    assert!(matches!(
        g.embed_lookup(table, &[0, 5]),
        Err(Error::IndexOutOfRange { index: 5, .. })
    ));
}

#[test]
fn affine_grad_check_is_nearly_exact() {
    let mut g = Graph::new(0);
    let w = g
        .param("w", Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.1, 0.05]).unwrap())
        .unwrap();
    let x = g.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
    let b = g.param("b", Tensor::new(vec![2], vec![0.1, -0.2]).unwrap()).unwrap();
    let xw = g.matmul(x, w).unwrap();
    let y = g.add(xw, b).unwrap();
    let loss = g.mean(y);
    let err = g.grad_check(loss, &feeds(), 1e-5).unwrap();
    assert!(err <= 1e-10, "affine grad_check error {}", err);
}

/// Build a small two-layer graph exercising one op kind, returning the loss.
fn op_graph(op: &str, g: &mut Graph) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let a = Tensor::uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = Tensor::uniform(&mut rng, &[4, 3], -1.0, 1.0);
    let pa = g.param("pa", a).unwrap();
    let pb = g.param("pb", b).unwrap();
    let first = g.matmul(pa, pb).unwrap(); // 3x3, the "first layer"
    let y = match op {
        "matmul" => {
            let w = Tensor::uniform(&mut rng, &[3, 2], -1.0, 1.0);
            let pw = g.param("pw", w).unwrap();
            g.matmul(first, pw).unwrap()
        }
        "add" => {
            let bias = g.param("bias", Tensor::uniform(&mut rng, &[3], -1.0, 1.0)).unwrap();
            g.add(first, bias).unwrap()
        }
        "mul" => {
            let other = g
                .param("other", Tensor::uniform(&mut rng, &[3, 3], -1.0, 1.0))
                .unwrap();
            g.mul(first, other).unwrap()
        }
        "concat" => {
            let other = g
                .param("other", Tensor::uniform(&mut rng, &[3, 2], -1.0, 1.0))
                .unwrap();
            g.concat(&[first, other], 1).unwrap()
        }
        "slice" => g.slice(first, 1, 1, 2).unwrap(),
        "embed_lookup" => {
            let table = g
                .param("table", Tensor::uniform(&mut rng, &[6, 3], -1.0, 1.0))
                .unwrap();
            let rows = g.embed_lookup(table, &[1, 4, 1]).unwrap();
            g.mul(first, rows).unwrap()
        }
        "softmax" => g.softmax(first, 1).unwrap(),
        "layer_norm" => {
            let gamma = g.param("gamma", Tensor::uniform(&mut rng, &[3], 0.5, 1.5)).unwrap();
            let beta = g.param("beta", Tensor::uniform(&mut rng, &[3], -0.5, 0.5)).unwrap();
            g.layer_norm(first, gamma, beta).unwrap()
        }
        "gelu" => g.gelu(first),
        "dropout" => g.dropout(first, 0.3).unwrap(), // eval mode: identity
        "cross_entropy" => g.cross_entropy_hard(first, &[0, 2, 1]).unwrap(),
        "cross_entropy_soft" => {
            let t = g.softmax(first, 1).unwrap();
            let w = Tensor::uniform(&mut rng, &[3, 3], -1.0, 1.0);
            let pw = g.param("pw", w).unwrap();
            let z = g.matmul(first, pw).unwrap();
            g.cross_entropy_soft(z, t).unwrap()
        }
        "reshape" => g.reshape(first, &[9, 1]).unwrap(),
        "transpose" => g.transpose(first).unwrap(),
        "mean" => g.mean(first),
        "mask_fill" => {
            let mask: Vec<bool> = (0..9).map(|i| i % 4 == 0).collect();
            g.mask_fill(first, Arc::new(mask), -25.0).unwrap()
        }
        other => panic!("unknown op {}", other),
    };
    // second layer: reduce to a scalar through a nonlinearity
    let act = g.gelu(y);
    g.mean(act)
}

#[test]
fn grad_check_every_op_kind() {
    let ops = [
        "matmul",
        "add",
        "mul",
        "concat",
        "slice",
        "embed_lookup",
        "softmax",
        "layer_norm",
        "gelu",
        "dropout",
        "cross_entropy",
        "cross_entropy_soft",
        "reshape",
        "transpose",
        "mean",
        "mask_fill",
    ];
    for op in ops {
        let mut g = Graph::new(7);
        let loss = op_graph(op, &mut g);
        let err = g.grad_check(loss, &feeds(), 1e-5).unwrap();
        assert!(err <= 1e-4, "op {} grad_check error {}", op, err);
    }
}

#[test]
fn grad_check_detects_corrupted_gradient() {
    let mut g = Graph::new(7);
    let loss = op_graph("layer_norm", &mut g);
    g.forward(loss, &feeds()).unwrap();
    let mut grads = g.backward(loss).unwrap();
    // corrupt one backward result
    for v in grads.get_mut("gamma").unwrap().data.iter_mut() {
        *v *= 1.5;
        *v += 0.05;
    }
    let err = g.grad_check_against(loss, &feeds(), 1e-5, &grads).unwrap();
    assert!(err > 1e-2, "corruption went undetected: {}", err);
}

#[test]
fn grad_check_rejects_training_dropout() {
    let mut g = Graph::new(7);
    let x = g.param("x", Tensor::ones(&[4])).unwrap();
    let d = g.dropout(x, 0.5).unwrap();
    let loss = g.mean(d);
    g.set_training(true);
    assert!(matches!(
        g.grad_check(loss, &feeds(), 1e-5),
        Err(Error::StochasticGradCheck)
    ));
}

#[test]
fn dropout_seeded_forward_is_deterministic() {
    let run = |seed: u64| {
        let mut g = Graph::new(seed);
        let x = g.param("x", Tensor::ones(&[64])).unwrap();
        let d = g.dropout(x, 0.5).unwrap();
        let m = g.mean(d);
        g.set_training(true);
        g.forward(m, &feeds()).unwrap().data[0]
    };
    assert_eq!(run(11), run(11));
    assert_ne!(run(11), run(12));
}

#[test]
fn eval_mode_dropout_is_identity() {
    let mut g = Graph::new(3);
    let x = g.param("x", Tensor::new(vec![3], vec![1., -2., 0.5]).unwrap()).unwrap();
    let d = g.dropout(x, 0.9).unwrap();
    let out = g.forward(d, &feeds()).unwrap();
    assert_eq!(out.data, vec![1., -2., 0.5]);
}

#[test]
fn adam_zero_gradient_leaves_parameter() {
    let mut params = ParamStore::new();
    params.insert("w", Tensor::new(vec![2], vec![0.4, -0.6]).unwrap());
    let mut grads = GradMap::new();
    grads.insert("w".into(), Tensor::zeros(&[2]));
    let mut state = AdamState::new(0.1);
    state.step(&mut params, &grads).unwrap();
    assert_eq!(params.get("w").unwrap().data, vec![0.4, -0.6]);
    assert_eq!(state.t, 1);
}

#[test]
fn adam_first_step_closed_form() {
    let mut params = ParamStore::new();
    params.insert("w", Tensor::scalar(1.0));
    let mut grads = GradMap::new();
    grads.insert("w".into(), Tensor::scalar(1.0));
    let mut state = AdamState::new(0.1);
    state.step(&mut params, &grads).unwrap();
    let want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
    assert!((params.get("w").unwrap().data[0] - want).abs() < 1e-12);
}

#[test]
fn adam_three_steps_match_scalar_oracle() {
    let gs = [1.0, -1.0, 2.0];
    let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);

    // independent scalar reference
    let mut w_ref = 0.5;
    let (mut m, mut v) = (0.0, 0.0);
    for (i, &gi) in gs.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * gi;
        v = b2 * v + (1.0 - b2) * gi * gi;
        let mh = m / (1.0 - b1_pow(b1, t));
        let vh = v / (1.0 - b1_pow(b2, t));
        w_ref -= lr * mh / (vh.sqrt() + eps);
    }

    let mut params = ParamStore::new();
    params.insert("w", Tensor::scalar(0.5));
    let mut state = AdamState::new(lr);
    for &gi in &gs {
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::scalar(gi));
        state.step(&mut params, &grads).unwrap();
    }
    assert!((params.get("w").unwrap().data[0] - w_ref).abs() < 1e-12);
}

fn b1_pow(b: f64, t: i32) -> f64 {
    b.powi(t)
}

#[test]
fn adam_rejects_nan_gradient() {
    let mut params = ParamStore::new();
    params.insert("w", Tensor::scalar(0.5));
    let mut grads = GradMap::new();
    grads.insert("w".into(), Tensor::scalar(f64::NAN));
    let mut state = AdamState::new(0.01);
    match state.step(&mut params, &grads) {
        Err(Error::NanGradient(name)) => assert_eq!(name, "w"),
        other => panic!("expected NanGradient, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn masked_softmax_zeroes_masked_columns() {
    let mut g = Graph::new(0);
    let x = g.constant(Tensor::new(vec![2, 3], vec![0.5, 1.0, 2.0, -1.0, 0.0, 3.0]).unwrap());
    let mask = Arc::new(vec![false, false, true, false, false, true]);
    let filled = g.mask_fill(x, mask, -1e30).unwrap();
    let s = g.softmax(filled, 1).unwrap();
    let out = g.forward(s, &feeds()).unwrap();
    for r in 0..2 {
        assert_eq!(out.at(r, 2), 0.0);
        let sum: f64 = out.row_slice(r).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            // beyond ~36 of logit spread the tiny entries round below the
            // f64 ulp of the sum and the max rounds to exactly 1.0
            data in proptest::collection::vec(-15.0f64..15.0, 12)
        ) {
            let mut g = Graph::new(0);
            let x = g.constant(Tensor::new(vec![3, 4], data).unwrap());
            let s = g.softmax(x, 1).unwrap();
            let out = g.forward(s, &Feeds::new()).unwrap();
            for r in 0..3 {
                let row = out.row_slice(r);
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                for &p in row {
                    prop_assert!(p > 0.0 && p < 1.0);
                }
            }
        }

        #[test]
        fn fan_out_gradient_is_branch_sum(x0 in -3.0f64..3.0) {
            // y = f(x) + g(x) with f = x^2, g = gelu(x)
            let mut g = Graph::new(0);
            let x = g.param("x", Tensor::scalar(x0)).unwrap();
            let f = g.mul(x, x).unwrap();
            let ge = g.gelu(x);
            let y = g.add(f, ge).unwrap();
            g.forward(y, &Feeds::new()).unwrap();
            let combined = g.backward(y).unwrap()["x"].data[0];

            let mut g1 = Graph::new(0);
            let x1 = g1.param("x", Tensor::scalar(x0)).unwrap();
            let f1 = g1.mul(x1, x1).unwrap();
            g1.forward(f1, &Feeds::new()).unwrap();
            let gf = g1.backward(f1).unwrap()["x"].data[0];

            let mut g2 = Graph::new(0);
            let x2 = g2.param("x", Tensor::scalar(x0)).unwrap();
            let f2 = g2.gelu(x2);
            g2.forward(f2, &Feeds::new()).unwrap();
            let gg = g2.backward(f2).unwrap()["x"].data[0];

            prop_assert!((combined - (gf + gg)).abs() < 1e-12);
        }
    }
}
