//! Central finite-difference verification of backprop gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DropoutSource, Gradients, Init, LayerDef, LayerSpec, Mode, Network, NnError, Shape, Tensor};

/// Gradients with magnitude below this are compared in absolute terms.
const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and input coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a ReLU or pooling
    /// decision boundary, where the finite difference is not a derivative.
    pub skipped: usize,
}

/// Compares analytic gradients of `L = Σ rᵢ·yᵢ` (fixed random weights `r`)
/// against central differences with step `eps`, for up to `max_coords`
/// parameter and input coordinates spread evenly across the network.
///
/// Train-mode networks with dropout need `masks` from an earlier trace.
pub fn grad_check(
    net: &Network<f64>,
    input: &Tensor<f64>,
    eps: f64,
    masks: Option<&[Option<Vec<f64>>]>,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, NnError> {
    if net.mode == Mode::Train && masks.is_none() {
        if let Some(i) = net
            .layers()
            .iter()
            .position(|l| matches!(l.spec(), super::LayerSpec::Dropout { p } if *p > 0.0))
        {
            return Err(NnError::NonDeterministic(i));
        }
    }
    let source = || match masks {
        Some(m) => DropoutSource::Frozen(m),
        None => DropoutSource::None,
    };
    let base = net.forward(input, source())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..base.output().data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |t: &super::Trace<f64>| -> f64 { t.output().data().iter().zip(&weights).map(|(a, b)| a * b).sum() };
    let dy = Tensor::from_vec(base.output().batch(), base.output().shape(), weights.clone())?;
    let mut grads = Gradients::zeros_for(net);
    net.backward(&base, &dy, &mut grads, true)?;
    let pattern = base.pattern();

    // (layer, is_bias, index) for parameters; layer = usize::MAX for the input
    let mut coords: Vec<(usize, bool, usize)> = Vec::new();
    for (li, l) in net.layers().iter().enumerate() {
        if let Some(p) = &l.params {
            coords.extend((0..p.weight.len()).map(|i| (li, false, i)));
            coords.extend((0..p.bias.len()).map(|i| (li, true, i)));
        }
    }
    coords.extend((0..input.data().len()).map(|i| (usize::MAX, false, i)));
    let stride = coords.len().div_ceil(max_coords.max(1)).max(1);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = net.clone();
    let mut x = input.clone();
    for &(li, is_bias, idx) in coords.iter().step_by(stride) {
        let analytic = if li == usize::MAX {
            grads.input.as_ref().expect("input gradient requested").data()[idx]
        } else {
            let g = grads.layers[li].as_ref().expect("parameter gradient");
            if is_bias {
                g.bias[idx]
            } else {
                g.weight[idx]
            }
        };
        let eval = |delta: f64, probe: &mut Network<f64>, x: &mut Tensor<f64>| -> Result<(f64, bool), NnError> {
            let slot: &mut f64 = if li == usize::MAX {
                &mut x.data_mut()[idx]
            } else {
                let p = probe.layers_mut()[li].params.as_mut().expect("parameters");
                if is_bias {
                    &mut p.bias[idx]
                } else {
                    &mut p.weight[idx]
                }
            };
            let orig = *slot;
            *slot = orig + delta;
            let t = probe.forward(x, source());
            let slot: &mut f64 = if li == usize::MAX {
                &mut x.data_mut()[idx]
            } else {
                let p = probe.layers_mut()[li].params.as_mut().expect("parameters");
                if is_bias {
                    &mut p.bias[idx]
                } else {
                    &mut p.weight[idx]
                }
            };
            *slot = orig;
            let t = t?;
            Ok((loss(&t), t.pattern() == pattern))
        };
        let (lp, same_p) = eval(eps, &mut probe, &mut x)?;
        let (lm, same_m) = eval(-eps, &mut probe, &mut x)?;
        if !(same_p && same_m) {
            report.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

/// A small random network (≤ 1000 parameters) using every layer kind, in
/// train mode, together with an input and frozen dropout masks.
pub fn random_small_network(seed: u64) -> (Network<f64>, Tensor<f64>, Vec<Option<Vec<f64>>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let input = Shape::new(rng.gen_range(6..=9), rng.gen_range(6..=9), rng.gen_range(1..=3));
        let conv_size = rng.gen_range(2..=3);
        let conv_stride = rng.gen_range(1..=2);
        let defs = vec![
            LayerDef::new(
                "conv1",
                LayerSpec::Conv {
                    filters: rng.gen_range(2..=4),
                    size: conv_size,
                    stride: conv_stride,
                },
            ),
            LayerDef::new("relu1", LayerSpec::Relu),
            LayerDef::new(
                "norm1",
                LayerSpec::Lrn {
                    n: rng.gen_range(2..=5),
                    k: rng.gen_range(1.0..2.0),
                    alpha: rng.gen_range(0.1..1.0),
                    beta: if rng.gen_bool(0.5) { 0.75 } else { rng.gen_range(0.3..1.0) },
                },
            ),
            LayerDef::new(
                "pool1",
                LayerSpec::MaxPool {
                    size: 2,
                    stride: rng.gen_range(1..=2),
                },
            ),
            LayerDef::new(
                "conv2",
                LayerSpec::Conv {
                    filters: rng.gen_range(2..=3),
                    size: 2,
                    stride: 1,
                },
            ),
            LayerDef::new("relu2", LayerSpec::Relu),
            LayerDef::new("full1", LayerSpec::FullyConnected { units: rng.gen_range(3..=6) }),
            LayerDef::new("relu3", LayerSpec::Relu),
            LayerDef::new("drop1", LayerSpec::Dropout { p: 0.3 }),
            LayerDef::new("full2", LayerSpec::FullyConnected { units: rng.gen_range(2..=4) }),
            LayerDef::new("prob", LayerSpec::Softmax),
        ];
        let init = Init {
            weight_std: 0.5,
            bias: 0.1,
            ..Default::default()
        };
        let Ok(net) = Network::<f64>::new(input, defs, &init, &mut rng) else {
            continue;
        };
        if net.param_count() > 1000 {
            continue;
        }
        let x = Tensor::from_vec(
            1,
            input,
            (0..input.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .expect("input matches shape");
        let trace = net.forward(&x, DropoutSource::Rng(&mut rng)).expect("forward of a valid network");
        let masks = trace.dropout_masks();
        return (net, x, masks);
    }
}
