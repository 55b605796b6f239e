use std::sync::Arc;

use merba::tensor::{grad_check, grad_check_against, AttrValue, Attrs, PrimitiveKind};
use merba::{Error, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Multiplies by a fixed random tensor and sums, so symmetric reductions do
/// not hide gradient errors.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(x), 1.0);
    let w = g.input(&w);
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i}")).collect()
}

#[test]
fn matmul_identity_returns_input() {
    let mut g = Graph::<f64>::new();
    let eye = Tensor::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let x = Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
    let (a, b) = (g.input(&x), g.input(&eye));
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.value(y).unwrap(), x);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.input(&Tensor::zeros(&[4]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).unwrap().data(), &[0.25; 4]);
}

#[test]
fn conv2d_center_of_ones_is_nine() {
    let mut g = Graph::<f64>::new();
    let x = g.input(&Tensor::ones(&[1, 4, 4, 1]));
    let w = g.input(&Tensor::ones(&[3, 3, 1, 1]));
    let y = g.conv2d(x, w, 1, 1).unwrap();
    let v = g.value(y).unwrap();
    assert_eq!(v.shape(), &[1, 4, 4, 1]);
    assert_eq!(v.at(&[0, 1, 1, 0]), 9.0);
    assert_eq!(v.at(&[0, 2, 2, 0]), 9.0);
    // corner covers a 2x2 patch
    assert_eq!(v.at(&[0, 0, 0, 0]), 4.0);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::<f64>::new();
    let x = g.input(&Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let f = g.sum(sq).unwrap();
    let grads = g.backward(f).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2., 4., 6.]);
}

#[test]
fn silu_gradient_at_zero_is_half() {
    let mut g = Graph::<f64>::new();
    let x = g.input(&Tensor::zeros(&[5]));
    let y = g.silu(x).unwrap();
    let f = g.sum(y).unwrap();
    let grads = g.backward(f).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.5; 5]);
}

#[test]
fn backward_rejects_non_scalar_seed() {
    let mut g = Graph::<f64>::new();
    let x = g.input(&Tensor::zeros(&[2]));
    let y = g.exp(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::InvalidShape { .. })));
}

#[test]
fn non_ancestors_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input(&Tensor::ones(&[2]));
    let unrelated = g.input(&Tensor::ones(&[2]));
    let _ = g.exp(unrelated).unwrap();
    let f = g.sum(x).unwrap();
    let grads = g.backward(f).unwrap();
    assert!(grads.contains(x));
    assert!(!grads.contains(unrelated));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.input(&Tensor::zeros(&[2, 3]));
    let b = g.input(&Tensor::zeros(&[4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn unknown_attribute_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.input(&Tensor::zeros(&[1, 4, 4, 1]));
    let w = g.input(&Tensor::zeros(&[3, 3, 1, 1]));
    let attrs = Attrs::new()
        .with("stride", AttrValue::Int(1))
        .with("padding", AttrValue::Int(1))
        .with("dilation", AttrValue::Int(2));
    let err = g.apply_primitive(PrimitiveKind::Conv2d, &[x, w], &attrs).unwrap_err();
    assert!(matches!(err, Error::UnknownAttribute { .. }));

    let attrs = Attrs::new().with("stride", AttrValue::Int(1));
    let err = g.apply_primitive(PrimitiveKind::Conv2d, &[x, w], &attrs).unwrap_err();
    assert!(matches!(err, Error::MissingAttribute { .. }));

    let attrs = Attrs::new()
        .with("stride", AttrValue::Int(1))
        .with("padding", AttrValue::Int(1));
    let y = g.apply_primitive(PrimitiveKind::Conv2d, &[x, w], &attrs).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 4, 1]);
    assert_eq!("conv2d".parse::<PrimitiveKind>().unwrap(), PrimitiveKind::Conv2d);
}

/// One graph that touches every primitive. Parameters: see `mixed_params`.
fn mixed_graph(g: &mut Graph<f64>, p: &[Var], train_bn: bool) -> merba::Result<Var> {
    let [img, conv_w, bn_g, bn_b, bn_m, bn_v, lin_w, lin_b, ln_g, ln_b, seq_w, a_log, d_skip] = [
        p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9], p[10], p[11], p[12],
    ];
    // conv + batch norm + gelu + pool
    let y = g.conv2d(img, conv_w, 2, 1)?; // (2, 3, 3, 4)
    let y = g.batch_norm(y, [bn_g, bn_b, bn_m, bn_v], 1e-5, train_bn)?;
    let y = g.gelu(y)?;
    let pooled = g.avg_pool(y)?; // (2, 4)

    // tokens through linear, layer norm, softplus
    let tokens = g.reshape(y, &[18, 4])?;
    let t = g.linear(tokens, lin_w, Some(lin_b))?; // (18, 4)
    let t = g.layer_norm(t, ln_g, ln_b, 1e-5)?;
    let t = g.softplus(t)?;

    // gather / permute / narrow / concat
    let idx: Vec<usize> = (0..18).rev().collect();
    let t = g.gather(t, Arc::new(idx))?;
    let t3 = g.reshape(t, &[2, 9, 4])?;
    let tp = g.permute(t3, &[0, 2, 1])?; // (2, 4, 9)
    let left = g.narrow(tp, 2, 0, 4)?;
    let right = g.narrow(tp, 2, 5, 4)?;
    let cat = g.concat(&[left, right], 2)?; // (2, 4, 8)

    // attention-like batch matmul + softmax
    let scores = g.batch_matmul(cat, cat, true)?; // (2, 4, 4)
    let scores = g.scale(scores, 0.3)?;
    let attn = g.softmax(scores)?;
    let mixed = g.batch_matmul(attn, cat, false)?; // (2, 4, 8)

    // selective scan over (2, 4, 8): u from silu, delta from softplus
    let conv_seq = g.conv1d_depthwise(mixed, seq_w)?;
    let u = g.silu(conv_seq)?;
    let delta = g.softplus(mixed)?;
    let a_pos = g.exp(a_log)?;
    let a = g.scale(a_pos, -1.0)?;
    let bm = g.narrow(mixed, 2, 0, 2)?; // (2, 4, 2)
    let cm = g.narrow(mixed, 2, 2, 2)?;
    let s1 = g.selective_scan([u, delta, a, bm, cm, d_skip], false)?;
    let s2 = g.selective_scan([u, delta, a, bm, cm, d_skip], true)?;
    let s = g.add(s1, s2)?;

    // classification head on pooled features
    let dropped = g.dropout(pooled, 0.25)?;
    let ce = g.cross_entropy(dropped, vec![1, 3], vec![0.5, 0.5])?;
    let ws = weighted_sum(g, s, 11);
    let m = g.mean(mixed)?;
    let total = g.add(ce, ws)?;
    g.add(total, m)
}

fn mixed_params(seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positive = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(0.5..1.5));
    let bn_g = positive(&[4]);
    let bn_v = positive(&[4]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    vec![
        rand_tensor(&mut rng, &[2, 5, 5, 3], 1.0),
        rand_tensor(&mut rng, &[3, 3, 3, 4], 0.5),
        bn_g,
        rand_tensor(&mut rng, &[4], 0.5),
        rand_tensor(&mut rng, &[4], 0.5),
        bn_v,
        rand_tensor(&mut rng, &[4, 4], 0.8),
        rand_tensor(&mut rng, &[4], 0.5),
        rand_tensor(&mut rng, &[4], 1.0),
        rand_tensor(&mut rng, &[4], 0.5),
        rand_tensor(&mut rng, &[3, 8], 0.7),
        rand_tensor(&mut rng, &[8, 2], 0.5),
        rand_tensor(&mut rng, &[8], 0.5),
    ]
}

#[test]
fn every_primitive_passes_finite_differences() {
    for (seed, train_bn) in [(1, true), (2, false), (3, true)] {
        let params = mixed_params(seed);
        let report = grad_check(
            &names(params.len()),
            &params,
            |g, p| mixed_graph(g, p, train_bn),
            1e-4,
            1e-4,
            None,
        )
        .unwrap();
        assert!(report.passed, "seed {seed}: {:#?}", report.params);
    }
}

#[test]
fn relu_gradient_away_from_the_kink() {
    let x = Tensor::from_f64(&[6], &[-2.0, -0.5, 0.3, 0.7, 1.1, -1.3]).unwrap();
    let report = grad_check(
        &names(1),
        &[x],
        |g, p| {
            let r = g.relu(p[0])?;
            Ok(weighted_sum(g, r, 5))
        },
        1e-4,
        1e-4,
        None,
    )
    .unwrap();
    assert!(report.passed);
}

#[test]
fn linear_layer_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // 8 weights + 2 biases = 10 parameters
    let params = vec![
        rand_tensor(&mut rng, &[5, 4], 1.0),
        rand_tensor(&mut rng, &[4, 2], 1.0),
        rand_tensor(&mut rng, &[2], 1.0),
    ];
    let report = grad_check(
        &names(3),
        &params,
        |g, p| {
            let y = g.linear(p[0], p[1], Some(p[2]))?;
            Ok(weighted_sum(g, y, 3))
        },
        1e-4,
        1e-4,
        None,
    )
    .unwrap();
    assert_eq!(report.params[1].coords_checked + report.params[2].coords_checked, 10);
    assert!(report.passed, "{:#?}", report.params);
}

#[test]
fn constant_graph_has_exactly_zero_error() {
    let params = vec![Tensor::<f64>::ones(&[3])];
    let report = grad_check(
        &names(1),
        &params,
        |g, _| {
            let c = g.input(&Tensor::from_f64(&[2], &[1.5, 2.5]).unwrap());
            g.sum(c)
        },
        1e-4,
        1e-4,
        None,
    )
    .unwrap();
    assert!(report.passed);
    assert_eq!(report.max_rel_err(), 0.0);
}

#[test]
fn corrupted_backward_rule_is_detected() {
    // silu'(x) = s(x) (1 + x (1 - s(x))); a common bug drops the second term
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[6], 2.0);
    let wrong: Vec<f64> = x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    let wrong = Tensor::new(vec![6], wrong).unwrap();
    let report = grad_check_against(
        &names(1),
        std::slice::from_ref(&x),
        &[wrong],
        |g, p| {
            let y = g.silu(p[0])?;
            g.sum(y)
        },
        1e-4,
        1e-4,
        None,
    )
    .unwrap();
    assert!(!report.passed);
}

#[test]
fn shape_only_evaluator_agrees_with_kernels() {
    let params = mixed_params(7);
    let mut numeric = Graph::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| numeric.input(p)).collect();
    mixed_graph(&mut numeric, &vars, true).unwrap();

    let mut shapes = Graph::<f64>::shape_only();
    let vars: Vec<Var> = params.iter().map(|p| shapes.input_shape(p.shape()).unwrap()).collect();
    mixed_graph_shape_safe(&mut shapes, &vars).unwrap();

    assert_eq!(numeric.len(), shapes.len());
    for v in numeric.vars() {
        assert_eq!(
            numeric.shape(v),
            shapes.shape(v),
            "node {} ({})",
            v.index(),
            numeric.op(v).name()
        );
        assert_eq!(
            numeric.data(v).unwrap().len(),
            numeric.shape(v).iter().product::<usize>()
        );
    }
}

// The weighted-sum helper inserts leaves with data; on a shape-only graph we
// mirror it with shape-only leaves.
fn mixed_graph_shape_safe(g: &mut Graph<f64>, p: &[Var]) -> merba::Result<Var> {
    assert!(g.is_shape_only());
    let y = g.conv2d(p[0], p[1], 2, 1)?;
    let y = g.batch_norm(y, [p[2], p[3], p[4], p[5]], 1e-5, true)?;
    let y = g.gelu(y)?;
    let pooled = g.avg_pool(y)?;
    let tokens = g.reshape(y, &[18, 4])?;
    let t = g.linear(tokens, p[6], Some(p[7]))?;
    let t = g.layer_norm(t, p[8], p[9], 1e-5)?;
    let t = g.softplus(t)?;
    let t = g.gather(t, Arc::new((0..18).rev().collect()))?;
    let t3 = g.reshape(t, &[2, 9, 4])?;
    let tp = g.permute(t3, &[0, 2, 1])?;
    let left = g.narrow(tp, 2, 0, 4)?;
    let right = g.narrow(tp, 2, 5, 4)?;
    let cat = g.concat(&[left, right], 2)?;
    let scores = g.batch_matmul(cat, cat, true)?;
    let scores = g.scale(scores, 0.3)?;
    let attn = g.softmax(scores)?;
    let mixed = g.batch_matmul(attn, cat, false)?;
    let conv_seq = g.conv1d_depthwise(mixed, p[10])?;
    let u = g.silu(conv_seq)?;
    let delta = g.softplus(mixed)?;
    let a_pos = g.exp(p[11])?;
    let a = g.scale(a_pos, -1.0)?;
    let bm = g.narrow(mixed, 2, 0, 2)?;
    let cm = g.narrow(mixed, 2, 2, 2)?;
    let s1 = g.selective_scan([u, delta, a, bm, cm, p[12]], false)?;
    let s2 = g.selective_scan([u, delta, a, bm, cm, p[12]], true)?;
    let s = g.add(s1, s2)?;
    let dropped = g.dropout(pooled, 0.25)?;
    let ce = g.cross_entropy(dropped, vec![1, 3], vec![0.5, 0.5])?;
    let w = g.input_shape(g.shape(s).to_vec().as_slice())?;
    let prod = g.mul(s, w)?;
    let ws = g.sum(prod)?;
    let m = g.mean(mixed)?;
    let total = g.add(ce, ws)?;
    g.add(total, m)
}

#[test]
fn forward_is_deterministic() {
    let params = mixed_params(5);
    let run = || {
        let mut g = Graph::<f64>::with_seed(42);
        let vars: Vec<Var> = params.iter().map(|p| g.input(p)).collect();
        let out = mixed_graph(&mut g, &vars, true).unwrap();
        g.data(out).unwrap()[0].to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn matmul_and_conv_are_additive() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, &[2, 6, 6, 3], 1.0);
    let y = rand_tensor(&mut rng, &[2, 6, 6, 3], 1.0);
    let w = rand_tensor(&mut rng, &[3, 3, 3, 5], 1.0);
    let m = rand_tensor(&mut rng, &[3, 4], 1.0);
    let mut g = Graph::<f64>::new();
    let (xv, yv, wv, mv) = (g.input(&x), g.input(&y), g.input(&w), g.input(&m));
    let sum = g.add(xv, yv).unwrap();
    for f in [
        &|g: &mut Graph<f64>, v: Var| g.conv2d(v, wv, 2, 1).unwrap() as Var,
        &|g: &mut Graph<f64>, v: Var| g.matmul(v, mv).unwrap(),
    ] as [&dyn Fn(&mut Graph<f64>, Var) -> Var; 2]
    {
        let fx = f(&mut g, xv);
        let fy = f(&mut g, yv);
        let fs = f(&mut g, sum);
        let lhs = g.value(fs).unwrap();
        let rhs: Vec<f64> = g
            .data(fx)
            .unwrap()
            .iter()
            .zip(g.data(fy).unwrap())
            .map(|(a, b)| a + b)
            .collect();
        for (a, b) in lhs.data().iter().zip(&rhs) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-12), "{a} vs {b}");
        }
    }
}

#[test]
fn forward_keeps_values_finite() {
    let params = mixed_params(17);
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| g.input(p)).collect();
    mixed_graph(&mut g, &vars, true).unwrap();
    for v in g.vars() {
        assert!(g.data(v).unwrap().iter().all(|x| x.is_finite()));
    }
}

#[test]
fn tensor_construction_checks_invariants() {
    assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 4]).is_ok());
}

proptest! {
    #[test]
    fn mert_round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t32 = Tensor::<f32>::from_fn(&shape, |_| rng.random::<f32>() * 10.0 - 5.0);
        let t64 = Tensor::<f64>::from_fn(&shape, |_| rng.random::<f64>() * 10.0 - 5.0);
        let dir = tempfile::tempdir().unwrap();
        merba::tensor::write_mert(dir.path().join("a.mert"), &t32).unwrap();
        merba::tensor::write_mert(dir.path().join("b.mert"), &t64).unwrap();
        prop_assert_eq!(merba::tensor::read_mert::<f32>(dir.path().join("a.mert")).unwrap(), t32);
        prop_assert_eq!(merba::tensor::read_mert::<f64>(dir.path().join("b.mert")).unwrap(), t64);
    }
}
