//! Mini-batch SGD with momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use super::{Gradients, Network, NnError, Params, Scalar};

#[derive(Clone, Debug)]
pub struct OptimizerState<T = f32> {
    /// Momentum buffers, one per parameterized layer.
    pub velocity: Vec<Option<Params<T>>>,
    pub hyper: SgdHyper,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(net: &Network<T>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            velocity: net
                .layers()
                .iter()
                .map(|l| l.params.as_ref().map(Params::zeros_like))
                .collect(),
            hyper: SgdHyper {
                lr,
                momentum,
                weight_decay,
            },
        }
    }

    pub fn lr(&self) -> f64 {
        self.hyper.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.hyper.lr = lr;
    }
}

/// `v ← μ·v − η·(g + λ·w)`, then `w ← w + v`, for every parameter.
pub fn sgd_step<T: Scalar>(
    net: &mut Network<T>,
    grads: &Gradients<T>,
    opt: &mut OptimizerState<T>,
) -> Result<(), NnError> {
    let layers = net.layers_mut();
    if grads.layers.len() != layers.len() || opt.velocity.len() != layers.len() {
        return Err(NnError::Shape("gradient or velocity list does not match the network".into()));
    }
    let mu = T::of(opt.hyper.momentum);
    let lr = T::of(opt.hyper.lr);
    let wd = T::of(opt.hyper.weight_decay);
    for (i, layer) in layers.iter_mut().enumerate() {
        let (Some(p), Some(g), Some(v)) = (layer.params.as_mut(), grads.layers[i].as_ref(), opt.velocity[i].as_mut())
        else {
            if layer.params.is_some() {
                return Err(NnError::Shape(format!("missing gradient for layer {i}")));
            }
            continue;
        };
        if g.weight.len() != p.weight.len() || g.bias.len() != p.bias.len() || v.len() != p.len() {
            return Err(NnError::Shape(format!("gradient shape mismatch at layer {i}")));
        }
        for ((w, &gw), vw) in p
            .weight
            .iter_mut()
            .chain(p.bias.iter_mut())
            .zip(g.weight.iter().chain(&g.bias))
            .zip(v.weight.iter_mut().chain(v.bias.iter_mut()))
        {
            *vw = mu * *vw - lr * (gw + wd * *w);
            *w = *w + *vw;
        }
    }
    Ok(())
}
