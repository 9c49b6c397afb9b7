use fusiondx_core::autodiff::{
    grad_check, relative_error, softmax_rows, AdamConfig, AdamState, Checkpoint, Feed, Graph, GraphError,
    Mode, Op, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn feed(items: Vec<(&str, Tensor)>) -> Feed {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn set_param(g: &mut Graph, name: &str, values: Vec<f64>) {
    let p = g.params_mut().iter_mut().find(|p| p.name == name).unwrap();
    p.tensor.data_mut().copy_from_slice(&values);
}

fn targets(ids: &[usize]) -> Tensor {
    Tensor::new(vec![ids.len()], ids.iter().map(|&v| v as f64).collect()).unwrap()
}

#[test]
fn affine_identity_passes_input_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let x = g.input("x", vec![2]);
    let y = g.affine("fc", x, 2, 2, &mut rng).unwrap();
    set_param(&mut g, "fc.weight", vec![1.0, 0.0, 0.0, 1.0]);
    let out = g
        .infer(&feed(vec![("x", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap())]), &[y])
        .unwrap();
    assert_eq!(out[0].data(), &[1.0, 2.0]);
}

#[test]
fn dropout_is_identity_in_eval() {
    let mut g = Graph::new();
    let x = g.input("x", vec![3]);
    let d = g.dropout(x, 0.5).unwrap();
    let t = Tensor::matrix(2, 3, vec![0.1, -2.0, 3.0, 4.0, 5.5, -0.25]).unwrap();
    let out = g.infer(&feed(vec![("x", t.clone())]), &[d]).unwrap();
    assert_eq!(out[0].data(), t.data());
}

#[test]
fn relu_of_affine_matches_hand_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let x = g.input("x", vec![2]);
    let a = g.affine("fc", x, 2, 2, &mut rng).unwrap();
    let r = g.relu(a).unwrap();
    // W = [[1, -2], [3, 0.5]] (rows = inputs), b = [0.5, -1]
    set_param(&mut g, "fc.weight", vec![1.0, -2.0, 3.0, 0.5]);
    set_param(&mut g, "fc.bias", vec![0.5, -1.0]);
    let input = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 1.0]).unwrap();
    let out = g.infer(&feed(vec![("x", input)]), &[a, r]).unwrap();
    // row 1: [1*1 + 2*3 + 0.5, 1*-2 + 2*0.5 - 1] = [7.5, -2]
    // row 2: [-1 + 3 + 0.5, 2 + 0.5 - 1] = [2.5, 1.5]
    assert_eq!(out[0].data(), &[7.5, -2.0, 2.5, 1.5]);
    assert_eq!(out[1].data(), &[7.5, 0.0, 2.5, 1.5]);
}

#[test]
fn sum_of_parameters_has_unit_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.input("x", vec![3]);
    let y = g.affine("fc", x, 3, 2, &mut rng).unwrap();
    // with a single all-ones input row, sum(output) = sum(W) + sum(b)
    g.forward(&feed(vec![("x", Tensor::filled(vec![1, 3], 1.0))]), Mode::Train { seed: 0 })
        .unwrap();
    g.backward_seeded(y, Tensor::filled(vec![1, 2], 1.0), &[]).unwrap();
    for p in g.params() {
        assert!(p.tensor.grad().unwrap().iter().all(|&v| v == 1.0), "{}", p.name);
    }
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let x = g.input("x", vec![3]);
    let _side = g.affine("side", x, 3, 4, &mut rng).unwrap();
    let logits = g.affine("head", x, 3, 2, &mut rng).unwrap();
    let loss = g.softmax_ce(logits, "y", None).unwrap();
    let f = feed(vec![("x", random_tensor(&mut rng, vec![4, 3])), ("y", targets(&[0, 1, 1, 0]))]);
    g.forward(&f, Mode::Train { seed: 0 }).unwrap();
    g.backward(loss).unwrap();
    let side = g.param_by_name("side.weight").unwrap();
    assert!(side.tensor.grad().unwrap().iter().all(|&v| v == 0.0));
    let head = g.param_by_name("head.weight").unwrap();
    assert!(head.tensor.grad().unwrap().iter().any(|&v| v != 0.0));
}

#[test]
fn backward_before_forward_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.input("x", vec![2]);
    let l = g.affine("fc", x, 2, 2, &mut rng).unwrap();
    let loss = g.softmax_ce(l, "y", None).unwrap();
    assert!(matches!(g.backward(loss), Err(GraphError::NoForward)));
}

#[test]
fn shape_mismatch_names_the_node() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let x = g.input("x", vec![2, 4, 4]);
    let c = g.conv2d("conv", x, 3, 4, &mut rng).unwrap();
    let err = g
        .infer(&feed(vec![("x", Tensor::zeros(vec![1, 2, 4, 4]))]), &[c])
        .unwrap_err();
    // declared 2 channels at the input but kernels expect 3
    assert!(matches!(err, GraphError::ShapeMismatch { node, .. } if node == c), "{err}");

    let err = g
        .infer(&feed(vec![("x", Tensor::zeros(vec![1, 3, 4, 4]))]), &[c])
        .unwrap_err();
    assert!(matches!(err, GraphError::ShapeMismatch { node: 0, .. }), "{err}");
}

#[test]
fn non_finite_input_is_rejected() {
    let mut g = Graph::new();
    let x = g.input("x", vec![2]);
    let r = g.relu(x).unwrap();
    let err = g
        .infer(&feed(vec![("x", Tensor::matrix(1, 2, vec![1.0, f64::NAN]).unwrap())]), &[r])
        .unwrap_err();
    assert!(matches!(err, GraphError::NonFiniteInput(_)));
}

fn single_conv(kernel: [f64; 9], bias: f64) -> (Graph, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.input("x", vec![1, 3, 3]);
    let c = g.conv2d("conv", x, 1, 1, &mut rng).unwrap();
    set_param(&mut g, "conv.weight", kernel.to_vec());
    set_param(&mut g, "conv.bias", vec![bias]);
    (g, c)
}

#[test]
fn conv_identity_and_constant_kernels() {
    let img = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let (g, c) = single_conv([0., 0., 0., 0., 1., 0., 0., 0., 0.], 0.0);
    let out = g.infer(&feed(vec![("x", img.clone())]), &[c]).unwrap();
    assert_eq!(out[0].data(), img.data());

    let (g, c) = single_conv([0.0; 9], 2.5);
    let out = g.infer(&feed(vec![("x", img)]), &[c]).unwrap();
    assert!(out[0].data().iter().all(|&v| v == 2.5));
}

#[test]
fn conv_matches_hand_computed_output() {
    // input 1..9 row-major, kernel [[1,0,-1],[2,0,-2],[1,0,-1]] (horizontal Sobel)
    let img = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let (g, c) = single_conv([1., 0., -1., 2., 0., -2., 1., 0., -1.], 0.0);
    let out = g.infer(&feed(vec![("x", img)]), &[c]).unwrap();
    // cross-correlation with zero padding, computed by hand
    let expect = [-9., -6., 9., -20., -8., 20., -21., -6., 21.];
    assert_eq!(out[0].data(), &expect);
    assert_eq!(out[0].shape(), &[1, 1, 3, 3]);
}

#[test]
fn maxpool_cases() {
    let mut g = Graph::new();
    let x = g.input("x", vec![1, 2, 2]);
    let p = g.maxpool2(x).unwrap();
    let out = g
        .infer(&feed(vec![("x", Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap())]), &[p])
        .unwrap();
    assert_eq!(out[0].data(), &[4.0]);

    let mut g = Graph::new();
    let x = g.input("x", vec![2, 4, 4]);
    let p = g.maxpool2(x).unwrap();
    let out = g
        .infer(&feed(vec![("x", Tensor::filled(vec![1, 2, 4, 4], 0.7))]), &[p])
        .unwrap();
    assert!(out[0].data().iter().all(|&v| v == 0.7));
    assert_eq!(out[0].shape(), &[1, 2, 2, 2]);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = random_tensor(&mut rng, vec![1, 2, 4, 4]);
    let out = g.infer(&feed(vec![("x", t.clone())]), &[p]).unwrap();
    for c in 0..2 {
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(t.data()[c * 16 + (2 * oy + dy) * 4 + 2 * ox + dx]);
                    }
                }
                assert_eq!(out[0].data()[c * 4 + oy * 2 + ox], m);
            }
        }
    }

    let mut g = Graph::new();
    let x = g.input("x", vec![1, 3, 4]);
    let p = g.maxpool2(x).unwrap();
    assert!(g.infer(&feed(vec![("x", Tensor::zeros(vec![1, 1, 3, 4]))]), &[p]).is_err());
}

fn ce_graph(k: usize, weights: Option<Vec<f64>>) -> (Graph, usize) {
    let mut g = Graph::new();
    let x = g.input("logits", vec![k]);
    let l = g.softmax_ce(x, "y", weights).unwrap();
    (g, l)
}

#[test]
fn cross_entropy_cases() {
    let (g, l) = ce_graph(3, None);
    let out = g
        .infer(&feed(vec![("logits", Tensor::zeros(vec![1, 3])), ("y", targets(&[1]))]), &[l])
        .unwrap();
    assert!((out[0].data()[0] - 3f64.ln()).abs() < 1e-15);

    let out = g
        .infer(
            &feed(vec![("logits", Tensor::matrix(1, 3, vec![0.0, 30.0, -5.0]).unwrap()), ("y", targets(&[1]))]),
            &[l],
        )
        .unwrap();
    assert!(out[0].data()[0] < 1e-9);

    // weighted hand case against the direct formula
    let logits = [0.2, -1.0, 0.5, 1.5, 0.0, -0.5];
    let ys = [2usize, 1];
    let w = [1.0, 2.0, 1.0];
    let (g, l) = ce_graph(3, Some(w.to_vec()));
    let out = g
        .infer(&feed(vec![("logits", Tensor::matrix(2, 3, logits.to_vec()).unwrap()), ("y", targets(&ys))]), &[l])
        .unwrap();
    let mut expect = 0.0;
    for r in 0..2 {
        let row = &logits[r * 3..r * 3 + 3];
        let z: f64 = row.iter().map(|v: &f64| v.exp()).sum();
        expect += w[ys[r]] * -(row[ys[r]].exp() / z).ln();
    }
    expect /= 2.0;
    assert!((out[0].data()[0] - expect).abs() < 1e-14);

    let err = g
        .infer(&feed(vec![("logits", Tensor::zeros(vec![1, 3])), ("y", targets(&[3]))]), &[l])
        .unwrap_err();
    assert!(matches!(err, GraphError::TargetOutOfRange { .. }));
}

#[test]
fn all_ones_weights_equal_unweighted_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = random_tensor(&mut rng, vec![5, 3]);
    let y = targets(&[0, 2, 1, 1, 0]);
    let (a, la) = ce_graph(3, None);
    let (b, lb) = ce_graph(3, Some(vec![1.0; 3]));
    let f = feed(vec![("logits", t), ("y", y)]);
    assert_eq!(a.infer(&f, &[la]).unwrap()[0].data(), b.infer(&f, &[lb]).unwrap()[0].data());
}

/// Every op kind appears in one of these graphs; all parameters are checked.
fn mixed_graph(rng: &mut ChaCha8Rng) -> (Graph, Feed) {
    let mut g = Graph::new();
    let x = g.input("img", vec![2, 4, 4]);
    let c1 = g.conv2d("c1", x, 2, 3, rng).unwrap();
    let r1 = g.relu(c1).unwrap();
    let c2 = g.conv2d("c2", r1, 3, 2, rng).unwrap();
    let p = g.maxpool2(c2).unwrap();
    let f = g.flatten(p).unwrap();
    let a1 = g.affine("a1", f, 8, 5, rng).unwrap();
    let bn = g.batchnorm("bn", a1, 5).unwrap();
    let d = g.dropout(bn, 0.3).unwrap();
    let t = g.input("tab", vec![3]);
    let cat = g.concat(vec![d, t]).unwrap();
    let out = g.affine("out", cat, 8, 3, rng).unwrap();
    g.softmax_ce(out, "y", Some(vec![1.0, 2.5, 0.7])).unwrap();
    let feed = feed(vec![
        ("img", random_tensor(rng, vec![4, 2, 4, 4])),
        ("tab", random_tensor(rng, vec![4, 3])),
        ("y", targets(&[0, 1, 2, 1])),
    ]);
    (g, feed)
}

#[test]
fn gradients_match_central_differences_for_every_op() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (g, f) = mixed_graph(&mut rng);
        let total = g.num_parameters();
        let r = grad_check(&g, &f, 1e-5, 1_000_000, seed).unwrap();
        assert_eq!(r.checked, total);
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {:?}", r);
    }
}

#[test]
fn bce_logit_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let x = g.input("x", vec![4]);
    let h = g.affine("h", x, 4, 6, &mut rng).unwrap();
    let r = g.relu(h).unwrap();
    let o = g.affine("o", r, 6, 1, &mut rng).unwrap();
    g.bce_logit(o, "y", 3.0).unwrap();
    let f = feed(vec![("x", random_tensor(&mut rng, vec![6, 4])), ("y", targets(&[0, 1, 1, 0, 0, 1]))]);
    let r = grad_check(&g, &f, 1e-5, 1000, 1).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn input_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut g, f) = mixed_graph(&mut rng);
    let loss = g.loss_node().unwrap();
    let mode = Mode::Train { seed: 3 };
    g.forward(&f, mode).unwrap();
    let captured = g
        .backward_seeded(loss, Tensor::filled(vec![1], 1.0), &[0])
        .unwrap();
    let analytic = captured[0].data().to_vec();
    let eps = 1e-5;
    for i in (0..analytic.len()).step_by(7) {
        let mut fp = f.clone();
        fp.get_mut("img").unwrap().data_mut()[i] += eps;
        let mut fm = f.clone();
        fm.get_mut("img").unwrap().data_mut()[i] -= eps;
        let mut h = g.clone();
        h.forward(&fp, mode).unwrap();
        let lp = h.value(loss).unwrap().data()[0];
        h.forward(&fm, mode).unwrap();
        let lm = h.value(loss).unwrap().data()[0];
        let numeric = (lp - lm) / (2.0 * eps);
        assert!(relative_error(analytic[i], numeric) < 1e-4, "i={i} {} vs {numeric}", analytic[i]);
    }
}

#[test]
fn linear_loss_grad_check_is_exact() {
    // bce with strongly negative logits on positive targets is linear in every parameter
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let x = g.input("x", vec![3]);
    let o = g.affine("o", x, 3, 1, &mut rng).unwrap();
    g.bce_logit(o, "y", 1.0).unwrap();
    set_param(&mut g, "o.weight", vec![0.1, -0.2, 0.3]);
    set_param(&mut g, "o.bias", vec![-60.0]);
    let f = feed(vec![("x", random_tensor(&mut rng, vec![4, 3])), ("y", targets(&[1, 1, 1, 1]))]);
    let r = grad_check(&g, &f, 1e-3, 100, 0).unwrap();
    assert!(r.max_rel_error < 1e-10, "{r:?}");
}

#[test]
fn eval_forward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut g, f) = mixed_graph(&mut rng);
    // move running stats away from their initial values first
    g.forward(&f, Mode::Train { seed: 1 }).unwrap();
    let out = g.nodes().len() - 2;
    let a = g.infer(&f, &[out]).unwrap();
    let b = g.infer(&f, &[out]).unwrap();
    assert_eq!(a[0].data(), b[0].data());
}

#[test]
fn batchnorm_train_output_is_standardised() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for b in [2usize, 3, 17, 64] {
        let mut g = Graph::new();
        let x = g.input("x", vec![4]);
        let bn = g.batchnorm("bn", x, 4).unwrap();
        let mut t = random_tensor(&mut rng, vec![b, 4]);
        t.data_mut().iter_mut().for_each(|v| *v = *v * 30.0 + 5.0);
        g.forward(&feed(vec![("x", t)]), Mode::Train { seed: 0 }).unwrap();
        let y = g.value(bn).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..b).map(|r| y.data()[r * 4 + j]).collect();
            let mean = col.iter().sum::<f64>() / b as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / b as f64;
            assert!(mean.abs() < 1e-6, "b={b} mean={mean}");
            assert!((var - 1.0).abs() < 1e-4, "b={b} var={var}");
        }
    }
}

#[test]
fn dropout_preserves_expectation() {
    let mut g = Graph::new();
    let x = g.input("x", vec![8]);
    let d = g.dropout(x, 0.5).unwrap();
    let input = Tensor::new(vec![1, 8], vec![1.0, 2.0, 3.0, 4.0, 0.5, 1.5, 2.5, 3.5]).unwrap();
    let in_mean = input.data().iter().sum::<f64>() / 8.0;
    let f = feed(vec![("x", input)]);
    let mut acc = 0.0;
    let n = 10_000;
    for s in 0..n {
        g.forward(&f, Mode::Train { seed: s }).unwrap();
        acc += g.value(d).unwrap().data().iter().sum::<f64>() / 8.0;
    }
    let mean = acc / n as f64;
    assert!((mean - in_mean).abs() / in_mean < 0.02, "{mean} vs {in_mean}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (mut g, f) = mixed_graph(&mut rng);
    let loss = g.loss_node().unwrap();
    let mut opt = AdamState::new(AdamConfig::default()).unwrap();
    for s in 0..3 {
        g.forward(&f, Mode::Train { seed: s }).unwrap();
        g.backward(loss).unwrap();
        opt.step_graph(&mut g).unwrap();
    }
    let ck = Checkpoint {
        graph: g.clone(),
        optimizer: Some(opt.clone()),
        metadata: serde_json::json!({"model": "mixed"}),
    };
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.graph.nodes(), g.nodes());
    for (a, b) in back.graph.params().iter().zip(g.params()) {
        assert_eq!(a.name, b.name);
        let bits_a: Vec<u64> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
    assert_eq!(back.optimizer.as_ref(), Some(&opt));
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let out = g.nodes().len() - 2;
    assert_eq!(back.graph.infer(&f, &[out]).unwrap()[0].data(), g.infer(&f, &[out]).unwrap()[0].data());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn graph_wiring_is_validated() {
    let mut g = Graph::new();
    let x = g.input("x", vec![2]);
    assert!(g.push(Op::Relu, vec![x + 1]).is_err());
    assert!(g.dropout(x, 1.0).is_err());
    assert!(g.push(Op::Concat, vec![x]).is_err());
    assert!(g.loss_node().is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_loss_nonnegative(
        logits in proptest::collection::vec(-50.0f64..50.0, 12),
        ys in proptest::collection::vec(0usize..4, 3),
    ) {
        let t = Tensor::matrix(3, 4, logits).unwrap();
        for row in softmax_rows(&t) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let (g, l) = ce_graph(4, None);
        let out = g.infer(&feed(vec![("logits", t), ("y", targets(&ys))]), &[l]).unwrap();
        prop_assert!(out[0].data()[0] >= 0.0);
    }
}

#[test]
fn relative_error_flags_real_discrepancies() {
    // a 1% slip in a moderate gradient
    assert!(relative_error(0.5, 0.505) > 1e-3);
    // a sign error on a gradient just above the floor
    assert!(relative_error(2e-5, -2e-5) > 1.0);
    // rounding noise on a structurally zero gradient
    assert!(relative_error(0.0, 1e-10) < 1e-4);
}
