use gaitflow::nnet::{
    grad_check, random_small_network, softmax_cross_entropy, DropoutSource, Gradients, Init, LayerDef, LayerSpec, Mode, Network,
    NnError, Shape, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_networks_match_finite_differences() {
    for seed in 0..20 {
        let (net, x, masks) = random_small_network(seed);
        let r = grad_check(&net, &x, 1e-5, Some(&masks), 2000, seed).unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
        assert!(r.checked > 0);
    }
}

#[test]
fn linear_two_parameter_net_is_exact() {
    let mut net =
        Network::<f64>::with_zero_params(Shape::vector(1), vec![LayerDef::new("f", LayerSpec::FullyConnected { units: 1 })])
            .unwrap();
    let p = net.layers_mut()[0].params.as_mut().unwrap();
    p.weight[0] = 0.7;
    p.bias[0] = -0.2;
    let x = Tensor::from_vec(1, Shape::vector(1), vec![1.3]).unwrap();
    let r = grad_check(&net, &x, 1e-5, None, 10, 1).unwrap();
    assert_eq!(r.checked, 3);
    assert!(r.max_rel_error < 1e-10, "{r:?}");
}

#[test]
fn unfrozen_dropout_is_rejected() {
    let (net, x, _) = random_small_network(3);
    assert!(matches!(grad_check(&net, &x, 1e-5, None, 100, 0), Err(NnError::NonDeterministic(8))));
    // eval mode has no stochastic layers
    let net = net.eval();
    assert!(grad_check(&net, &x, 1e-5, None, 100, 0).is_ok());
}

#[test]
fn conv_stack_with_pool_and_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = Network::<f64>::new(
        Shape::new(12, 12, 3),
        vec![
            LayerDef::new("conv1", LayerSpec::Conv { filters: 4, size: 3, stride: 1 }),
            LayerDef::new("relu1", LayerSpec::Relu),
            LayerDef::new("pool1", LayerSpec::MaxPool { size: 2, stride: 2 }),
            LayerDef::new("conv2", LayerSpec::Conv { filters: 6, size: 3, stride: 2 }),
            LayerDef::new("relu2", LayerSpec::Relu),
            LayerDef::new("full", LayerSpec::FullyConnected { units: 5 }),
        ],
        &Init { weight_std: 0.3, bias: 0.05, ..Default::default() },
        &mut rng,
    )
    .unwrap();
    assert!(net.param_count() <= 2000);
    let x = Tensor::from_vec(1, Shape::new(12, 12, 3), (0..432).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let r = grad_check(&net, &x, 1e-5, None, 2000, 2).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn linear_conv_weight_gradient_is_sum_of_windows() {
    // loss = Σ outputs of a single 2×2 conv; dL/dw[c][ky][kx] = Σ over output
    // positions of the input under that tap.
    let shape = Shape::new(4, 5, 2);
    let net = Network::<f64>::new(
        shape,
        vec![LayerDef::new("c", LayerSpec::Conv { filters: 1, size: 2, stride: 1 })],
        &Init::default(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let x = Tensor::from_vec(1, shape, (0..40).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
    let trace = net.forward(&x, DropoutSource::None).unwrap();
    let ones = Tensor::from_vec(1, net.output_shape(), vec![1.0; net.output_shape().len()]).unwrap();
    let mut g = Gradients::zeros_for(&net);
    net.backward(&trace, &ones, &mut g, false).unwrap();
    let gw = &g.layers[0].as_ref().unwrap().weight;
    for c in 0..2 {
        for ky in 0..2 {
            for kx in 0..2 {
                let mut want = 0.0;
                for oy in 0..3 {
                    for ox in 0..4 {
                        want += x.data()[(c * 4 + oy + ky) * 5 + ox + kx];
                    }
                }
                assert!((gw[(c * 2 + ky) * 2 + kx] - want).abs() < 1e-12);
            }
        }
    }
    assert!((g.layers[0].as_ref().unwrap().bias[0] - 12.0).abs() < 1e-12);
}

#[test]
fn relu_blocks_gradient_at_negative_preactivation() {
    let net = Network::<f64>::with_zero_params(Shape::vector(3), vec![LayerDef::new("r", LayerSpec::Relu)]).unwrap();
    let x = Tensor::from_vec(1, Shape::vector(3), vec![-1.0, 2.0, -0.5]).unwrap();
    let t = net.forward(&x, DropoutSource::None).unwrap();
    let mut g = Gradients::zeros_for(&net);
    let dy = Tensor::from_vec(1, Shape::vector(3), vec![1.0, 1.0, 1.0]).unwrap();
    net.backward(&t, &dy, &mut g, true).unwrap();
    assert_eq!(g.input.unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn maxpool_routes_to_argmax() {
    let net = Network::<f64>::with_zero_params(
        Shape::new(2, 2, 1),
        vec![LayerDef::new("p", LayerSpec::MaxPool { size: 2, stride: 2 })],
    )
    .unwrap();
    let x = Tensor::from_vec(1, Shape::new(2, 2, 1), vec![0.1, 0.9, -3.0, 0.4]).unwrap();
    let t = net.forward(&x, DropoutSource::None).unwrap();
    assert_eq!(t.output().data(), &[0.9]);
    let mut g = Gradients::zeros_for(&net);
    net.backward(&t, &Tensor::from_vec(1, Shape::vector(1), vec![2.5]).unwrap(), &mut g, true)
        .unwrap();
    assert_eq!(g.input.unwrap().data(), &[0.0, 2.5, 0.0, 0.0]);
}

#[test]
fn dropout_expectation_matches_eval() {
    let net = Network::<f64>::with_zero_params(Shape::vector(8), vec![LayerDef::new("d", LayerSpec::Dropout { p: 0.4 })])
        .unwrap();
    let x = Tensor::from_vec(1, Shape::vector(8), (1..=8).map(|v| v as f64).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut acc = vec![0.0; 8];
    let trials = 10_000;
    for _ in 0..trials {
        let t = net.forward(&x, DropoutSource::Rng(&mut rng)).unwrap();
        for (a, v) in acc.iter_mut().zip(t.output().data()) {
            *a += v;
        }
    }
    let eval = net.clone().eval().infer(&x).unwrap();
    for (a, e) in acc.iter().zip(eval.data()) {
        let mean = a / trials as f64;
        // per-element std of the mean is sqrt(p/(1-p)/trials) relative, about 0.8%
        assert!((mean - e).abs() / e < 0.045, "{mean} vs {e}");
    }
}

#[test]
fn batch_of_samples_matches_individual_passes() {
    let (net, _, _) = random_small_network(4);
    let net = net.eval();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = net.input_shape();
    let a: Vec<f64> = (0..s.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..s.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let both = net.infer(&Tensor::stack(&[&a, &b], s).unwrap()).unwrap();
    let ya = net.infer(&Tensor::from_vec(1, s, a).unwrap()).unwrap();
    let yb = net.infer(&Tensor::from_vec(1, s, b).unwrap()).unwrap();
    for (x, y) in both.sample(0).iter().zip(ya.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in both.sample(1).iter().zip(yb.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_gradient_agrees_with_softmax_layer_backward() {
    // the fused gradient p - onehot equals backprop through the softmax layer
    // of d(-log p_label)/dp
    let net = Network::<f64>::with_zero_params(Shape::vector(4), vec![LayerDef::new("s", LayerSpec::Softmax)]).unwrap();
    let z = Tensor::from_vec(1, Shape::vector(4), vec![0.3, -1.2, 2.0, 0.1]).unwrap();
    let t = net.forward(&z, DropoutSource::None).unwrap();
    let p = t.output().data().to_vec();
    let label = 2;
    let mut dp = vec![0.0; 4];
    dp[label] = -1.0 / p[label];
    let mut g = Gradients::zeros_for(&net);
    net.backward(&t, &Tensor::from_vec(1, Shape::vector(4), dp).unwrap(), &mut g, true).unwrap();
    let (_, fused) = softmax_cross_entropy(&z, &[label]).unwrap();
    for (a, b) in g.input.unwrap().data().iter().zip(fused.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(net.mode, Mode::Train);
}
