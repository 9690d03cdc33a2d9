//! Forward and backward kernels for each layer kind.

use rand::{Rng, RngCore};
use rayon::prelude::*;

use super::{Layer, LayerSpec, Params, Scalar, Shape, Tensor};

#[derive(Clone, Debug)]
pub(crate) enum Cache<T> {
    None,
    Relu,
    /// Flat input index of the maximum for every output element.
    Pool(Vec<u32>),
    /// Normalization denominators `k + α/n · Σ x²`.
    Lrn(Vec<T>),
    /// Scaled keep mask (`0` or `1 / (1 - p)`).
    Dropout(Vec<T>),
}

pub(crate) fn forward<T: Scalar>(layer: &Layer<T>, x: &Tensor<T>) -> (Tensor<T>, Cache<T>) {
    match layer.def.spec {
        LayerSpec::Conv { size, stride, .. } => (conv_forward(layer, x, size, stride), Cache::None),
        LayerSpec::MaxPool { size, stride } => {
            let (y, arg) = pool_forward(x, layer.out_shape, size, stride);
            (y, Cache::Pool(arg))
        }
        LayerSpec::Lrn { n, k, alpha, beta } => {
            let (y, scale) = lrn_forward(x, n, k, alpha, beta);
            (y, Cache::Lrn(scale))
        }
        LayerSpec::Relu => {
            let mut y = x.clone();
            y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
            (y, Cache::Relu)
        }
        LayerSpec::FullyConnected { units } => (fc_forward(layer, x, units), Cache::None),
        // identity outside training
        LayerSpec::Dropout { .. } => (x.clone(), Cache::None),
        LayerSpec::Softmax => {
            let mut y = x.clone();
            for i in 0..x.batch() {
                let p = softmax(x.sample(i));
                y.sample_mut(i).copy_from_slice(&p);
            }
            (y, Cache::None)
        }
    }
}

/// Gradient of the layer input; parameter gradients are added into `dparams`.
pub(crate) fn backward<T: Scalar>(
    layer: &Layer<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    cache: &Cache<T>,
    dy: &Tensor<T>,
    dparams: Option<&mut Params<T>>,
    want_dx: bool,
) -> Tensor<T> {
    match (&layer.def.spec, cache) {
        (LayerSpec::Conv { size, stride, .. }, _) => {
            conv_backward(layer, x, dy, *size, *stride, dparams.expect("conv gradients"), want_dx)
        }
        (LayerSpec::MaxPool { .. }, Cache::Pool(arg)) => {
            let mut dx = Tensor::zeros(x.batch(), x.shape());
            let dxd = dx.data_mut();
            for (o, &src) in arg.iter().enumerate() {
                dxd[src as usize] = dxd[src as usize] + dy.data()[o];
            }
            dx
        }
        (LayerSpec::Lrn { n, alpha, beta, .. }, Cache::Lrn(scale)) => lrn_backward(x, y, scale, dy, *n, *alpha, *beta),
        (LayerSpec::Relu, _) => {
            let mut dx = dy.clone();
            for (d, &out) in dx.data_mut().iter_mut().zip(y.data()) {
                if out <= T::zero() {
                    *d = T::zero();
                }
            }
            dx
        }
        (LayerSpec::FullyConnected { units }, _) => {
            fc_backward(layer, x, dy, *units, dparams.expect("dense gradients"), want_dx)
        }
        (LayerSpec::Dropout { .. }, Cache::Dropout(mask)) => {
            let mut dx = dy.clone();
            dx.data_mut().iter_mut().zip(mask).for_each(|(d, &m)| *d = *d * m);
            dx
        }
        (LayerSpec::Dropout { .. }, _) => dy.clone(),
        (LayerSpec::Softmax, _) => {
            let mut dx = dy.clone();
            for i in 0..y.batch() {
                let p = y.sample(i);
                let g = dy.sample(i);
                let dot = p.iter().zip(g).fold(T::zero(), |a, (&pi, &gi)| a + pi * gi);
                for (k, d) in dx.sample_mut(i).iter_mut().enumerate() {
                    *d = p[k] * (g[k] - dot);
                }
            }
            dx
        }
        (spec, _) => unreachable!("cache does not match layer {}", spec.kind_name()),
    }
}

pub(crate) fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s = e.iter().fold(T::zero(), |a, &b| a + b);
    e.into_iter().map(|v| v / s).collect()
}

pub(crate) fn dropout_mask<T: Scalar>(len: usize, p: f64, rng: &mut dyn RngCore) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect()
}

pub(crate) fn dropout_forward<T: Scalar>(x: &Tensor<T>, mask: Vec<T>) -> (Tensor<T>, Cache<T>) {
    let mut y = x.clone();
    y.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v = *v * m);
    (y, Cache::Dropout(mask))
}

/// Unrolls receptive fields into a `(c·k·k) × (oh·ow)` block whose rows are
/// `ld` apart.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], s: Shape, k: usize, stride: usize, oh: usize, ow: usize, cols: &mut [T], ld: usize) {
    let p = oh * ow;
    for c in 0..s.c {
        let plane = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * ld..][..p];
                for oy in 0..oh {
                    let src = &plane[(oy * stride + ky) * s.w + kx..];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        dst.copy_from_slice(&src[..ow]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src[ox * stride];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], s: Shape, k: usize, stride: usize, oh: usize, ow: usize, dx: &mut [T], ld: usize) {
    let p = oh * ow;
    for c in 0..s.c {
        let plane = &mut dx[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * ld..][..p];
                for oy in 0..oh {
                    let base = (oy * stride + ky) * s.w + kx;
                    for ox in 0..ow {
                        let d = &mut plane[base + ox * stride];
                        *d = *d + row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Budget for one unrolled block, in elements.
const COLS_BUDGET: usize = 1 << 22;

/// Samples unrolled side by side per GEMM, capped by `COLS_BUDGET` elements.
fn conv_chunk(kdim: usize, p: usize, batch: usize) -> usize {
    (COLS_BUDGET / (kdim * p).max(1)).clamp(1, batch.max(1))
}

fn conv_forward<T: Scalar>(layer: &Layer<T>, x: &Tensor<T>, k: usize, stride: usize) -> Tensor<T> {
    let params = layer.params.as_ref().expect("conv parameters");
    let (ins, outs) = (layer.in_shape, layer.out_shape);
    let kdim = layer.fan_in();
    let p = outs.h * outs.w;
    let f = outs.c;
    let chunk = conv_chunk(kdim, p, x.batch());
    let mut y = Tensor::zeros(x.batch(), outs);
    let out_len = outs.len();
    y.data_mut()
        .par_chunks_mut(out_len * chunk)
        .enumerate()
        .for_each_init(
            || (vec![T::zero(); kdim * p * chunk], vec![T::zero(); f * p * chunk]),
            |(cols, prod), (ci, out)| {
                let b = out.len() / out_len;
                let ld = b * p;
                for j in 0..b {
                    im2col(x.sample(ci * chunk + j), ins, k, stride, outs.h, outs.w, &mut cols[j * p..], ld);
                }
                // prod (F × b·P) = W (F × K) · cols (K × b·P)
                unsafe {
                    T::gemm(
                        f,
                        kdim,
                        ld,
                        T::one(),
                        params.weight.as_ptr(),
                        kdim as isize,
                        1,
                        cols.as_ptr(),
                        ld as isize,
                        1,
                        T::zero(),
                        prod.as_mut_ptr(),
                        ld as isize,
                        1,
                    );
                }
                for j in 0..b {
                    for (fi, row) in out[j * out_len..(j + 1) * out_len].chunks_mut(p).enumerate() {
                        let src = &prod[fi * ld + j * p..][..p];
                        let bias = params.bias[fi];
                        row.iter_mut().zip(src).for_each(|(v, &s)| *v = s + bias);
                    }
                }
            },
        );
    y
}

fn conv_backward<T: Scalar>(
    layer: &Layer<T>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
    k: usize,
    stride: usize,
    dparams: &mut Params<T>,
    want_dx: bool,
) -> Tensor<T> {
    let params = layer.params.as_ref().expect("conv parameters");
    let (ins, outs) = (layer.in_shape, layer.out_shape);
    let kdim = layer.fan_in();
    let p = outs.h * outs.w;
    let f = outs.c;
    let n = x.batch();
    let chunk = conv_chunk(kdim, p, n);
    let mut cols = vec![T::zero(); kdim * p * chunk];
    let mut g = vec![T::zero(); f * p * chunk];
    let mut dx = Tensor::zeros(if want_dx { n } else { 0 }, ins);
    let mut dcols = if want_dx { vec![T::zero(); kdim * p * chunk] } else { Vec::new() };
    for start in (0..n).step_by(chunk) {
        let b = chunk.min(n - start);
        let ld = b * p;
        for j in 0..b {
            im2col(x.sample(start + j), ins, k, stride, outs.h, outs.w, &mut cols[j * p..], ld);
            for (fi, row) in dy.sample(start + j).chunks(p).enumerate() {
                g[fi * ld + j * p..][..p].copy_from_slice(row);
            }
        }
        // dW (F × K) += dY (F × b·P) · colsᵀ (b·P × K)
        unsafe {
            T::gemm(
                f,
                ld,
                kdim,
                T::one(),
                g.as_ptr(),
                ld as isize,
                1,
                cols.as_ptr(),
                1,
                ld as isize,
                T::one(),
                dparams.weight.as_mut_ptr(),
                kdim as isize,
                1,
            );
        }
        for (fi, db) in dparams.bias.iter_mut().enumerate() {
            *db = *db + g[fi * ld..(fi + 1) * ld].iter().fold(T::zero(), |a, &v| a + v);
        }
        if want_dx {
            // dcols (K × b·P) = Wᵀ (K × F) · dY (F × b·P)
            unsafe {
                T::gemm(
                    kdim,
                    f,
                    ld,
                    T::one(),
                    params.weight.as_ptr(),
                    1,
                    kdim as isize,
                    g.as_ptr(),
                    ld as isize,
                    1,
                    T::zero(),
                    dcols.as_mut_ptr(),
                    ld as isize,
                    1,
                );
            }
            for j in 0..b {
                col2im(&dcols[j * p..], ins, k, stride, outs.h, outs.w, dx.sample_mut(start + j), ld);
            }
        }
    }
    dx
}

fn fc_forward<T: Scalar>(layer: &Layer<T>, x: &Tensor<T>, units: usize) -> Tensor<T> {
    let params = layer.params.as_ref().expect("dense parameters");
    let fan_in = layer.fan_in();
    let n = x.batch();
    let mut y = Tensor::zeros(n, Shape::vector(units));
    for i in 0..n {
        y.sample_mut(i).copy_from_slice(&params.bias);
    }
    // Y (N × U) = X (N × I) · Wᵀ (I × U) + b
    unsafe {
        T::gemm(
            n,
            fan_in,
            units,
            T::one(),
            x.data().as_ptr(),
            fan_in as isize,
            1,
            params.weight.as_ptr(),
            1,
            fan_in as isize,
            T::one(),
            y.data_mut().as_mut_ptr(),
            units as isize,
            1,
        );
    }
    y
}

fn fc_backward<T: Scalar>(
    layer: &Layer<T>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
    units: usize,
    dparams: &mut Params<T>,
    want_dx: bool,
) -> Tensor<T> {
    let params = layer.params.as_ref().expect("dense parameters");
    let fan_in = layer.fan_in();
    let n = x.batch();
    // dW (U × I) += dYᵀ (U × N) · X (N × I)
    unsafe {
        T::gemm(
            units,
            n,
            fan_in,
            T::one(),
            dy.data().as_ptr(),
            1,
            units as isize,
            x.data().as_ptr(),
            fan_in as isize,
            1,
            T::one(),
            dparams.weight.as_mut_ptr(),
            fan_in as isize,
            1,
        );
    }
    for i in 0..n {
        for (b, &g) in dparams.bias.iter_mut().zip(dy.sample(i)) {
            *b = *b + g;
        }
    }
    if !want_dx {
        return Tensor::zeros(0, x.shape());
    }
    let mut dx = Tensor::zeros(n, x.shape());
    // dX (N × I) = dY (N × U) · W (U × I)
    unsafe {
        T::gemm(
            n,
            units,
            fan_in,
            T::one(),
            dy.data().as_ptr(),
            units as isize,
            1,
            params.weight.as_ptr(),
            fan_in as isize,
            1,
            T::zero(),
            dx.data_mut().as_mut_ptr(),
            fan_in as isize,
            1,
        );
    }
    dx
}

fn pool_forward<T: Scalar>(x: &Tensor<T>, outs: Shape, k: usize, stride: usize) -> (Tensor<T>, Vec<u32>) {
    let ins = x.shape();
    let mut y = Tensor::zeros(x.batch(), outs);
    let mut arg = vec![0u32; x.batch() * outs.len()];
    let mut o = 0;
    for i in 0..x.batch() {
        let base_in = i * ins.len();
        for c in 0..ins.c {
            let plane = c * ins.h * ins.w;
            for oy in 0..outs.h {
                for ox in 0..outs.w {
                    let mut best = T::neg_infinity();
                    let mut best_at = 0usize;
                    for ky in 0..k {
                        for kx in 0..k {
                            let at = plane + (oy * stride + ky) * ins.w + ox * stride + kx;
                            let v = x.data()[base_in + at];
                            if v > best {
                                best = v;
                                best_at = base_in + at;
                            }
                        }
                    }
                    y.data_mut()[o] = best;
                    arg[o] = best_at as u32;
                    o += 1;
                }
            }
        }
    }
    (y, arg)
}

/// `s^(-β)`, with a fast path for the common β = 0.75.
#[inline]
fn inv_pow<T: Scalar>(s: T, beta: f64) -> T {
    if beta == 0.75 {
        let r = s.sqrt();
        T::one() / (r * r.sqrt())
    } else {
        s.powf(T::of(-beta))
    }
}

/// Sliding sum over channels `c - lo ..= c + hi` (clipped) for each pixel.
fn channel_window_sum<T: Scalar>(src: &[T], c: usize, hw: usize, lo: usize, hi: usize, out: &mut [T]) {
    let mut acc = vec![T::zero(); hw];
    for ch in 0..=hi.min(c - 1) {
        for (a, &v) in acc.iter_mut().zip(&src[ch * hw..(ch + 1) * hw]) {
            *a = *a + v;
        }
    }
    for ch in 0..c {
        out[ch * hw..(ch + 1) * hw].copy_from_slice(&acc);
        let add = ch + 1 + hi;
        if add < c {
            for (a, &v) in acc.iter_mut().zip(&src[add * hw..(add + 1) * hw]) {
                *a = *a + v;
            }
        }
        if ch >= lo {
            let rem = ch - lo;
            for (a, &v) in acc.iter_mut().zip(&src[rem * hw..(rem + 1) * hw]) {
                *a = *a - v;
            }
        }
    }
}

fn lrn_forward<T: Scalar>(x: &Tensor<T>, n: usize, k: f64, alpha: f64, beta: f64) -> (Tensor<T>, Vec<T>) {
    let s = x.shape();
    let hw = s.h * s.w;
    let mut y = x.clone();
    let mut scale = vec![T::zero(); x.data().len()];
    let (kk, an) = (T::of(k), T::of(alpha / n as f64));
    let mut sums = vec![T::zero(); s.len()];
    for i in 0..x.batch() {
        let xs = x.sample(i);
        let sq: Vec<T> = xs.iter().map(|&v| v * v).collect();
        channel_window_sum(&sq, s.c, hw, n / 2, (n - 1) / 2, &mut sums);
        let sc = &mut scale[i * s.len()..(i + 1) * s.len()];
        for ((d, &sum), ys) in sc.iter_mut().zip(&sums).zip(y.sample_mut(i).iter_mut()) {
            *d = kk + an * sum;
            *ys = *ys * inv_pow(*d, beta);
        }
    }
    (y, scale)
}

fn lrn_backward<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    scale: &[T],
    dy: &Tensor<T>,
    n: usize,
    alpha: f64,
    beta: f64,
) -> Tensor<T> {
    let s = x.shape();
    let hw = s.h * s.w;
    let len = s.len();
    let coef = T::of(2.0 * alpha * beta / n as f64);
    let mut dx = Tensor::zeros(x.batch(), s);
    let mut t = vec![T::zero(); len];
    let mut sums = vec![T::zero(); len];
    for i in 0..x.batch() {
        let sc = &scale[i * len..(i + 1) * len];
        let (xs, ys, gs) = (x.sample(i), y.sample(i), dy.sample(i));
        for j in 0..len {
            t[j] = gs[j] * ys[j] / sc[j];
        }
        // channels whose window contains j: j - (n-1)/2 ..= j + n/2
        channel_window_sum(&t, s.c, hw, (n - 1) / 2, n / 2, &mut sums);
        let d = dx.sample_mut(i);
        for j in 0..len {
            d[j] = gs[j] * inv_pow(sc[j], beta) - coef * xs[j] * sums[j];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_window(src: &[f64], c: usize, hw: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            let from = ch as isize - (n / 2) as isize;
            let to = ch as isize + ((n - 1) / 2) as isize;
            for s in from.max(0)..=to.min(c as isize - 1) {
                for p in 0..hw {
                    out[ch * hw + p] += src[s as usize * hw + p];
                }
            }
        }
        out
    }

    #[test]
    fn channel_window_matches_brute_force() {
        for c in 1..9 {
            for n in 1..7 {
                let hw = 3;
                let src: Vec<f64> = (0..c * hw).map(|v| (v as f64 * 0.7).sin()).collect();
                let mut out = vec![0.0; c * hw];
                channel_window_sum(&src, c, hw, n / 2, (n - 1) / 2, &mut out);
                let want = brute_window(&src, c, hw, n);
                for (a, b) in out.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12, "c={c} n={n}");
                }
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let s = Shape::new(7, 6, 2);
        let (k, stride) = (3, 2);
        let (oh, ow) = ((s.h - k) / stride + 1, (s.w - k) / stride + 1);
        let x: Vec<f64> = (0..s.len()).map(|v| (v as f64 * 0.31).cos()).collect();
        let g: Vec<f64> = (0..s.c * k * k * oh * ow).map(|v| (v as f64 * 0.17).sin()).collect();
        let mut cols = vec![0.0; g.len()];
        im2col(&x, s, k, stride, oh, ow, &mut cols, oh * ow);
        let mut back = vec![0.0; s.len()];
        col2im(&g, s, k, stride, oh, ow, &mut back, oh * ow);
        let lhs: f64 = cols.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
