//! A small tensor engine with the fixed layer set needed by the gait network:
//! valid convolution, max pooling, cross-channel LRN, ReLU, fully connected,
//! dropout and softmax, with exact reverse-mode gradients and SGD.
//!
//! Activations are batches stored sample-major, each sample channel-major
//! (`[n][c][h][w]`). Networks are generic over the scalar so the same code runs
//! in `f32` for training and `f64` for gradient checks.

mod checkpoint;
mod gradcheck;
mod layers;
mod optim;

use std::fmt;

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, random_small_network, GradCheckReport};
pub use optim::{sgd_step, OptimizerState};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation after layer {layer} ({name})")]
    NonFinite { layer: usize, name: String },
    #[error("trace does not match this network: {0}")]
    StaleTrace(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dropout layer {0} needs a random source or frozen mask")]
    MissingDropoutSource(usize),
    #[error("layer {0} is non-deterministic; freeze its mask before checking gradients")]
    NonDeterministic(usize),
    #[error("invalid layer specification: {0}")]
    InvalidSpec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Floating-point element type of tensors and parameters.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + Default + fmt::Debug + Send + Sync + 'static
{
    /// `C ← α·A·B + β·C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Per-sample extent; displayed as `h×w×c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(h: usize, w: usize, c: usize) -> Self {
        Shape { h, w, c }
    }

    pub const fn vector(n: usize) -> Self {
        Shape { h: 1, w: 1, c: n }
    }

    pub const fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.h == 1 && self.w == 1 {
            write!(f, "{}", self.c)
        } else {
            write!(f, "{}×{}×{}", self.h, self.w, self.c)
        }
    }
}

/// A batch of `n` samples of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    n: usize,
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, shape: Shape) -> Self {
        Tensor {
            n,
            shape,
            data: vec![T::zero(); n * shape.len()],
        }
    }

    pub fn from_vec(n: usize, shape: Shape, data: Vec<T>) -> Result<Self, NnError> {
        if data.len() != n * shape.len() {
            return Err(NnError::Shape(format!(
                "{} values for {n} samples of {shape}",
                data.len()
            )));
        }
        Ok(Tensor { n, shape, data })
    }

    /// Stacks single samples into one batch.
    pub fn stack(samples: &[&[T]], shape: Shape) -> Result<Self, NnError> {
        let mut data = Vec::with_capacity(samples.len() * shape.len());
        for s in samples {
            if s.len() != shape.len() {
                return Err(NnError::Shape(format!("sample of {} values, expected {shape}", s.len())));
            }
            data.extend_from_slice(s);
        }
        Ok(Tensor {
            n: samples.len(),
            shape,
            data,
        })
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.shape.len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.shape.len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            n: self.n,
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Layer kinds and their geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Valid (unpadded) cross-correlation with square filters.
    Conv { filters: usize, size: usize, stride: usize },
    MaxPool { size: usize, stride: usize },
    /// Cross-channel local response normalization.
    Lrn { n: usize, k: f64, alpha: f64, beta: f64 },
    Relu,
    FullyConnected { units: usize },
    Dropout { p: f64 },
    Softmax,
}

impl LayerSpec {
    pub fn lrn_default() -> Self {
        LayerSpec::Lrn {
            n: 5,
            k: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Lrn { .. } => "lrn",
            LayerSpec::Relu => "relu",
            LayerSpec::FullyConnected { .. } => "fully_connected",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Output extent for an input extent, or an error if the geometry does not fit.
    pub fn output_shape(&self, input: Shape) -> Result<Shape, NnError> {
        let window = |size: usize, stride: usize, what: &str| -> Result<Shape, NnError> {
            if stride == 0 || size == 0 {
                return Err(NnError::InvalidSpec(format!("{what}: size and stride must be >= 1")));
            }
            if size > input.h || size > input.w {
                return Err(NnError::Shape(format!("{what} {size}×{size} does not fit input {input}")));
            }
            Ok(Shape::new((input.h - size) / stride + 1, (input.w - size) / stride + 1, input.c))
        };
        match *self {
            LayerSpec::Conv { filters, size, stride } => {
                if filters == 0 {
                    return Err(NnError::InvalidSpec("conv needs at least one filter".into()));
                }
                let s = window(size, stride, "conv")?;
                Ok(Shape::new(s.h, s.w, filters))
            }
            LayerSpec::MaxPool { size, stride } => window(size, stride, "maxpool"),
            LayerSpec::Lrn { n, .. } => {
                if n == 0 {
                    return Err(NnError::InvalidSpec("lrn neighbourhood must be >= 1".into()));
                }
                Ok(input)
            }
            LayerSpec::Relu | LayerSpec::Softmax => Ok(input),
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(NnError::InvalidSpec(format!("dropout rate {p} outside [0, 1)")));
                }
                Ok(input)
            }
            LayerSpec::FullyConnected { units } => {
                if units == 0 {
                    return Err(NnError::InvalidSpec("fully connected layer needs units".into()));
                }
                Ok(Shape::vector(units))
            }
        }
    }
}

/// A named layer specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDef {
    pub name: String,
    #[serde(flatten)]
    pub spec: LayerSpec,
}

impl LayerDef {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        LayerDef {
            name: name.into(),
            spec,
        }
    }
}

/// Weights and biases of a parameterized layer. Convolution weights are
/// `[filters][in_channels][size][size]`; dense weights are `[units][inputs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros_like(other: &Params<T>) -> Self {
        Params {
            weight: vec![T::zero(); other.weight.len()],
            bias: vec![T::zero(); other.bias.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct Layer<T> {
    pub def: LayerDef,
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub params: Option<Params<T>>,
}

impl<T> Layer<T> {
    pub fn name(&self) -> &str {
        &self.def.name
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.def.spec
    }

    /// Number of weights for one output unit / filter.
    pub fn fan_in(&self) -> usize {
        match self.def.spec {
            LayerSpec::Conv { size, .. } => self.in_shape.c * size * size,
            LayerSpec::FullyConnected { .. } => self.in_shape.len(),
            _ => 0,
        }
    }

    /// Number of filters / units.
    pub fn fan_out(&self) -> usize {
        match self.def.spec {
            LayerSpec::Conv { filters, .. } => filters,
            LayerSpec::FullyConnected { units } => units,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// How the Gaussian weight deviation is chosen per layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScale {
    /// `weight_std` for every layer.
    #[default]
    Fixed,
    /// `sqrt(2 / fan_in)`, ignoring `weight_std`.
    FanIn,
}

/// Gaussian weight initialization with constant biases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Init {
    pub weight_std: f64,
    pub bias: f64,
    #[serde(default)]
    pub scale: InitScale,
}

impl Default for Init {
    fn default() -> Self {
        Init {
            weight_std: 0.01,
            bias: 0.1,
            scale: InitScale::Fixed,
        }
    }
}

impl Init {
    pub fn std_for(&self, fan_in: usize) -> f64 {
        match self.scale {
            InitScale::Fixed => self.weight_std,
            InitScale::FanIn => (2.0 / fan_in.max(1) as f64).sqrt(),
        }
    }

    pub fn fill<T: Scalar>(&self, weights: &mut [T], fan_in: usize, rng: &mut dyn RngCore) {
        let normal = Normal::new(0.0, self.std_for(fan_in)).expect("finite std");
        for w in weights {
            *w = T::of(normal.sample(rng));
        }
    }
}

#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    input: Shape,
    layers: Vec<Layer<T>>,
    pub mode: Mode,
}

/// Where dropout layers take their masks from during a forward pass.
pub enum DropoutSource<'a, T> {
    /// No randomness available; only valid in eval mode or without dropout.
    None,
    Rng(&'a mut dyn RngCore),
    /// Masks recorded by an earlier trace, indexed by layer.
    Frozen(&'a [Option<Vec<T>>]),
}

/// Activations retained by a forward pass for use in backward.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    /// `activations[0]` is the input; `activations[i + 1]` is layer `i`'s output.
    pub activations: Vec<Tensor<T>>,
    caches: Vec<layers::Cache<T>>,
    fingerprint: Vec<Shape>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.activations.last().expect("trace holds the input")
    }

    /// Dropout masks used by this pass, for replaying it deterministically.
    pub fn dropout_masks(&self) -> Vec<Option<Vec<T>>> {
        self.caches
            .iter()
            .map(|c| match c {
                layers::Cache::Dropout(m) => Some(m.clone()),
                _ => None,
            })
            .collect()
    }

    /// ReLU sign pattern and pooling argmax choices, used to detect
    /// non-differentiable points during finite differencing.
    pub(crate) fn pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for (i, c) in self.caches.iter().enumerate() {
            match c {
                layers::Cache::Pool(arg) => out.extend_from_slice(arg),
                layers::Cache::Relu => {
                    out.extend(self.activations[i].data().iter().map(|v| (*v > T::zero()) as u32))
                }
                _ => {}
            }
        }
        out
    }
}

/// Accumulated gradients for every layer plus, optionally, the input.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub layers: Vec<Option<Params<T>>>,
    pub input: Option<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_for(net: &Network<T>) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| l.params.as_ref().map(Params::zeros_like))
                .collect(),
            input: None,
        }
    }

    pub fn scale(&mut self, factor: T) {
        for p in self.layers.iter_mut().flatten() {
            p.weight.iter_mut().chain(p.bias.iter_mut()).for_each(|v| *v = *v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|p| p.weight.iter().chain(&p.bias).all(|v| v.is_finite()))
    }
}

impl<T: Scalar> Network<T> {
    /// Validates the shape chain and initializes parameters.
    pub fn new(input: Shape, defs: Vec<LayerDef>, init: &Init, rng: &mut dyn RngCore) -> Result<Self, NnError> {
        let mut net = Self::with_zero_params(input, defs)?;
        for l in net.layers.iter_mut() {
            let fan_in = l.fan_in();
            if let Some(p) = l.params.as_mut() {
                init.fill(&mut p.weight, fan_in, rng);
                p.bias.iter_mut().for_each(|b| *b = T::of(init.bias));
            }
        }
        Ok(net)
    }

    pub fn with_zero_params(input: Shape, defs: Vec<LayerDef>) -> Result<Self, NnError> {
        if defs.is_empty() {
            return Err(NnError::InvalidSpec("network has no layers".into()));
        }
        let mut layers = Vec::with_capacity(defs.len());
        let mut shape = input;
        for def in defs {
            let out = def
                .spec
                .output_shape(shape)
                .map_err(|e| NnError::Shape(format!("layer '{}': {e}", def.name)))?;
            let mut layer = Layer {
                def,
                in_shape: shape,
                out_shape: out,
                params: None,
            };
            if layer.def.spec.has_params() {
                layer.params = Some(Params {
                    weight: vec![T::zero(); layer.fan_out() * layer.fan_in()],
                    bias: vec![T::zero(); layer.fan_out()],
                });
            }
            layers.push(layer);
            shape = out;
        }
        Ok(Network {
            input,
            layers,
            mode: Mode::Train,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.layers.last().expect("non-empty").out_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.def.name == name)
    }

    pub fn defs(&self) -> Vec<LayerDef> {
        self.layers.iter().map(|l| l.def.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.params.as_ref()).map(Params::len).sum()
    }

    pub fn has_dropout(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.def.spec, LayerSpec::Dropout { p } if p > 0.0))
    }

    pub fn eval(mut self) -> Self {
        self.mode = Mode::Eval;
        self
    }

    /// Converts parameters to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input: self.input,
            mode: self.mode,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    def: l.def.clone(),
                    in_shape: l.in_shape,
                    out_shape: l.out_shape,
                    params: l.params.as_ref().map(|p| Params {
                        weight: p.weight.iter().map(|v| U::of(v.as_f64())).collect(),
                        bias: p.bias.iter().map(|v| U::of(v.as_f64())).collect(),
                    }),
                })
                .collect(),
        }
    }

    /// Runs every layer, retaining what backward needs.
    pub fn forward(&self, input: &Tensor<T>, dropout: DropoutSource<'_, T>) -> Result<Trace<T>, NnError> {
        self.forward_to(input, self.layers.len(), dropout)
    }

    /// Runs layers `0..end` only.
    pub fn forward_to(
        &self,
        input: &Tensor<T>,
        end: usize,
        mut dropout: DropoutSource<'_, T>,
    ) -> Result<Trace<T>, NnError> {
        if input.shape() != self.input {
            return Err(NnError::Shape(format!(
                "input {} does not match network input {}",
                input.shape(),
                self.input
            )));
        }
        let end = end.min(self.layers.len());
        let mut activations = Vec::with_capacity(end + 1);
        let mut caches = Vec::with_capacity(end);
        activations.push(input.clone());
        for (i, layer) in self.layers[..end].iter().enumerate() {
            let x = activations.last().unwrap();
            let (y, cache) = match &layer.def.spec {
                LayerSpec::Dropout { p } if self.mode == Mode::Train && *p > 0.0 => {
                    let mask = match &mut dropout {
                        DropoutSource::Rng(rng) => layers::dropout_mask(x.data().len(), *p, &mut **rng),
                        DropoutSource::Frozen(masks) => masks
                            .get(i)
                            .cloned()
                            .flatten()
                            .filter(|m| m.len() == x.data().len())
                            .ok_or(NnError::MissingDropoutSource(i))?,
                        DropoutSource::None => return Err(NnError::MissingDropoutSource(i)),
                    };
                    layers::dropout_forward(x, mask)
                }
                _ => layers::forward(layer, x),
            };
            if cfg!(debug_assertions) && !y.is_finite() {
                return Err(NnError::NonFinite {
                    layer: i,
                    name: layer.def.name.clone(),
                });
            }
            activations.push(y);
            caches.push(cache);
        }
        Ok(Trace {
            activations,
            caches,
            fingerprint: self.layers[..end].iter().map(|l| l.out_shape).collect(),
        })
    }

    /// Eval-mode output of layer `end - 1` for a batch.
    pub fn infer_to(&self, input: &Tensor<T>, end: usize) -> Result<Tensor<T>, NnError> {
        let mut x = input.clone();
        if input.shape() != self.input {
            return Err(NnError::Shape(format!(
                "input {} does not match network input {}",
                input.shape(),
                self.input
            )));
        }
        for layer in &self.layers[..end.min(self.layers.len())] {
            if matches!(layer.def.spec, LayerSpec::Dropout { .. }) {
                continue;
            }
            x = layers::forward(layer, &x).0;
        }
        Ok(x)
    }

    /// Eval-mode output of the whole network.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.infer_to(input, self.layers.len())
    }

    /// Reverse pass through all layers given the gradient of the output.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        grad_out: &Tensor<T>,
        grads: &mut Gradients<T>,
        need_input_grad: bool,
    ) -> Result<(), NnError> {
        self.backward_from(trace, trace.caches.len(), grad_out, grads, need_input_grad)
    }

    /// Reverse pass through layers `0..end`, where `grad` is the gradient of
    /// `trace.activations[end]`. Parameter gradients are added into `grads`.
    pub fn backward_from(
        &self,
        trace: &Trace<T>,
        end: usize,
        grad: &Tensor<T>,
        grads: &mut Gradients<T>,
        need_input_grad: bool,
    ) -> Result<(), NnError> {
        let expected: Vec<Shape> = self.layers[..trace.caches.len().min(self.layers.len())]
            .iter()
            .map(|l| l.out_shape)
            .collect();
        if trace.fingerprint != expected || end > trace.caches.len() {
            return Err(NnError::StaleTrace("layer shapes differ from the forward pass".into()));
        }
        if grad.shape() != trace.activations[end].shape() || grad.batch() != trace.activations[end].batch() {
            return Err(NnError::Shape(format!(
                "gradient {} does not match activation {}",
                grad.shape(),
                trace.activations[end].shape()
            )));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(NnError::StaleTrace("gradient buffer built for another network".into()));
        }
        let mut g = grad.clone();
        for i in (0..end).rev() {
            let layer = &self.layers[i];
            let want_dx = i > 0 || need_input_grad;
            g = layers::backward(
                layer,
                &trace.activations[i],
                &trace.activations[i + 1],
                &trace.caches[i],
                &g,
                grads.layers[i].as_mut(),
                want_dx,
            );
        }
        if need_input_grad {
            grads.input = Some(g);
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy over a batch of logits and the gradient with
/// respect to the logits (already divided by the batch size).
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>), NnError> {
    let classes = logits.shape().len();
    if labels.len() != logits.batch() {
        return Err(NnError::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            logits.batch()
        )));
    }
    let mut grad = Tensor::zeros(logits.batch(), logits.shape());
    let mut loss = T::zero();
    let inv_n = T::one() / T::of(labels.len().max(1) as f64);
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(NnError::LabelOutOfRange { label, classes });
        }
        let z = logits.sample(i);
        let p = layers::softmax(z);
        // log-sum-exp form stays accurate when p[label] underflows
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + z.iter().map(|&v| (v - m).exp()).fold(T::zero(), |a, b| a + b).ln();
        loss = loss + (lse - z[label]) * inv_n;
        let g = grad.sample_mut(i);
        for (k, pk) in p.into_iter().enumerate() {
            g[k] = (pk - if k == label { T::one() } else { T::zero() }) * inv_n;
        }
    }
    Ok((loss, grad))
}

/// Shift-stabilized softmax of one vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    layers::softmax(logits)
}
