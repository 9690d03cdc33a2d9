//! Dense optical flow by polynomial expansion (Farnebäck), plus flow mirroring
//! and the `GFOF` flow file format.
//!
//! Each frame neighbourhood is approximated by `f(p) ≈ pᵀAp + bᵀp + c` using a
//! Gaussian-weighted least-squares fit. For a pure translation `d`, the
//! expansions of the two frames satisfy `A₂ = A₁` and `b₂ = b₁ − 2A₁d`, so the
//! displacement follows from a small linear system aggregated over a Gaussian
//! window. A coarse-to-fine pyramid extends the capture range.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{gaussian_kernel, resample, separable_blur, Grid};
use crate::videoio::FrameSequence;

const GFOF_MAGIC: &[u8; 4] = b"GFOF";

// Internal working range; the solver's regularizer is tuned for 8-bit units.
const INTENSITY_SCALE: f32 = 255.0;
const SOLVE_REGULARIZER: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("frame sizes differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("frame {0}x{1} is smaller than the expansion neighbourhood {2}")]
    TooSmall(usize, usize, usize),
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("invalid flow parameters: {0}")]
    InvalidParams(String),
    #[error("malformed flow file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    pub pyramid_scale: f32,
    /// Side of the Gaussian averaging window in pixels.
    pub window: usize,
    pub iterations: usize,
    /// Side of the polynomial-expansion neighbourhood.
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            pyramid_levels: 3,
            pyramid_scale: 0.5,
            window: 9,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: &str| Err(FlowError::InvalidParams(m.to_string()));
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return bad("pyramid_scale must lie in (0, 1)");
        }
        if self.window < 3 || self.window % 2 == 0 {
            return bad("window must be odd and >= 3");
        }
        if self.poly_n < 3 || self.poly_n % 2 == 0 {
            return bad("poly_n must be odd and >= 3");
        }
        if self.pyramid_levels == 0 || self.iterations == 0 {
            return bad("pyramid_levels and iterations must be >= 1");
        }
        if !(self.poly_sigma > 0.0) {
            return bad("poly_sigma must be positive");
        }
        Ok(())
    }
}

/// Per-pixel displacement field `(u, v)` between two frames.
#[derive(Clone, Debug, PartialEq)]
pub struct OpticalFlowMap {
    pub u: Grid,
    pub v: Grid,
}

impl OpticalFlowMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        OpticalFlowMap {
            u: Grid::new(width, height),
            v: Grid::new(width, height),
        }
    }

    pub fn new(u: Grid, v: Grid) -> Self {
        assert_eq!((u.width(), u.height()), (v.width(), v.height()));
        OpticalFlowMap { u, v }
    }

    pub fn width(&self) -> usize {
        self.u.width()
    }

    pub fn height(&self) -> usize {
        self.u.height()
    }

    pub fn is_finite(&self) -> bool {
        self.u.data().iter().chain(self.v.data()).all(|v| v.is_finite())
    }
}

/// Horizontal flip of a flow field: `u'(x,y) = -u(W-1-x, y)`, `v'(x,y) = v(W-1-x, y)`.
pub fn mirror_flow(f: &OpticalFlowMap) -> OpticalFlowMap {
    OpticalFlowMap {
        u: f.u.flip_horizontal().map(|v| -v),
        v: f.v.flip_horizontal(),
    }
}

/// Quadratic expansion coefficients per pixel.
struct PolyExpansion {
    bx: Grid,
    by: Grid,
    axx: Grid,
    ayy: Grid,
    axy: Grid,
}

/// Correlation filters mapping a neighbourhood to the six coefficients of the
/// basis `{1, x, y, x², y², xy}`.
fn expansion_filters(n: usize, sigma: f64) -> [Vec<f64>; 6] {
    let r = (n / 2) as isize;
    let g: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let mut gram = SMatrix::<f64, 6, 6>::zeros();
    let mut weighted_basis = Vec::with_capacity(n * n);
    for j in -r..=r {
        for i in -r..=r {
            let (x, y) = (i as f64, j as f64);
            let a = g[(i + r) as usize] * g[(j + r) as usize];
            let b = SVector::<f64, 6>::from([1.0, x, y, x * x, y * y, x * y]);
            gram += a * b * b.transpose();
            weighted_basis.push(a * b);
        }
    }
    let inv = gram.try_inverse().expect("expansion Gram matrix is positive definite");
    let mut filters: [Vec<f64>; 6] = Default::default();
    for wb in &weighted_basis {
        let coeffs = inv * wb;
        for k in 0..6 {
            filters[k].push(coeffs[k]);
        }
    }
    filters
}

fn poly_expand(img: &Grid, filters: &[Vec<f64>; 6], n: usize) -> PolyExpansion {
    let r = (n / 2) as isize;
    let (w, h) = (img.width(), img.height());
    let mut out: [Grid; 5] = std::array::from_fn(|_| Grid::new(w, h));
    let mut patch = vec![0.0f64; n * n];
    for y in 0..h {
        for x in 0..w {
            let mut idx = 0;
            for j in -r..=r {
                for i in -r..=r {
                    patch[idx] = img.get_clamped(x as isize + i, y as isize + j) as f64;
                    idx += 1;
                }
            }
            let coeff = |k: usize| filters[k].iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>();
            out[0].set(x, y, coeff(1) as f32);
            out[1].set(x, y, coeff(2) as f32);
            out[2].set(x, y, coeff(3) as f32);
            out[3].set(x, y, coeff(4) as f32);
            out[4].set(x, y, (coeff(5) * 0.5) as f32);
        }
    }
    let [bx, by, axx, ayy, axy] = out;
    PolyExpansion {
        bx,
        by,
        axx,
        ayy,
        axy,
    }
}

/// One refinement of the flow estimate on a single pyramid level.
fn update_flow(
    p1: &PolyExpansion,
    p2: &PolyExpansion,
    flow: &OpticalFlowMap,
    window_kernel: &[f32],
) -> OpticalFlowMap {
    let (w, h) = (flow.width(), flow.height());
    let mut m: [Grid; 5] = std::array::from_fn(|_| Grid::new(w, h));
    for y in 0..h {
        for x in 0..w {
            let du = flow.u.get(x, y);
            let dv = flow.v.get(x, y);
            let (sx, sy) = (x as f32 + du, y as f32 + dv);
            let a11 = 0.5 * (p1.axx.get(x, y) + p2.axx.sample_bilinear(sx, sy));
            let a22 = 0.5 * (p1.ayy.get(x, y) + p2.ayy.sample_bilinear(sx, sy));
            let a12 = 0.5 * (p1.axy.get(x, y) + p2.axy.sample_bilinear(sx, sy));
            let db1 = -0.5 * (p2.bx.sample_bilinear(sx, sy) - p1.bx.get(x, y)) + a11 * du + a12 * dv;
            let db2 = -0.5 * (p2.by.sample_bilinear(sx, sy) - p1.by.get(x, y)) + a12 * du + a22 * dv;
            m[0].set(x, y, a11 * a11 + a12 * a12);
            m[1].set(x, y, a12 * (a11 + a22));
            m[2].set(x, y, a12 * a12 + a22 * a22);
            m[3].set(x, y, a11 * db1 + a12 * db2);
            m[4].set(x, y, a12 * db1 + a22 * db2);
        }
    }
    let m: Vec<Grid> = m.iter().map(|g| separable_blur(g, window_kernel)).collect();
    let mut out = OpticalFlowMap::zeros(w, h);
    for i in 0..w * h {
        let g11 = m[0].data()[i] as f64;
        let g12 = m[1].data()[i] as f64;
        let g22 = m[2].data()[i] as f64;
        let h1 = m[3].data()[i] as f64;
        let h2 = m[4].data()[i] as f64;
        let idet = 1.0 / (g11 * g22 - g12 * g12 + SOLVE_REGULARIZER);
        out.u.data_mut()[i] = ((g22 * h1 - g12 * h2) * idet) as f32;
        out.v.data_mut()[i] = ((g11 * h2 - g12 * h1) * idet) as f32;
    }
    out
}

fn build_pyramid(img: &Grid, levels: usize, scale: f32) -> Vec<Grid> {
    let sigma = ((1.0 / scale as f64) - 1.0) * 0.5;
    let kernel = gaussian_kernel(sigma.max(0.3), (3.0 * sigma).ceil().max(1.0) as usize);
    let mut pyr = vec![img.clone()];
    for _ in 1..levels {
        let prev = pyr.last().unwrap();
        let w = (prev.width() as f32 * scale).round() as usize;
        let h = (prev.height() as f32 * scale).round() as usize;
        pyr.push(resample(&separable_blur(prev, &kernel), w, h));
    }
    pyr
}

fn usable_levels(width: usize, height: usize, params: &FlowParams) -> usize {
    let mut levels = 1;
    let (mut w, mut h) = (width as f32, height as f32);
    while levels < params.pyramid_levels {
        w = (w * params.pyramid_scale).round();
        h = (h * params.pyramid_scale).round();
        if (w as usize) < 2 * params.poly_n || (h as usize) < 2 * params.poly_n {
            break;
        }
        levels += 1;
    }
    levels
}

/// Dense flow from `prev` to `next`: a pixel at `p` in `prev` appears at
/// `p + (u, v)` in `next`.
pub fn dense_flow(prev: &Grid, next: &Grid, params: &FlowParams) -> Result<OpticalFlowMap, FlowError> {
    params.validate()?;
    if prev.width() != next.width() || prev.height() != next.height() {
        return Err(FlowError::DimensionMismatch(
            prev.width(),
            prev.height(),
            next.width(),
            next.height(),
        ));
    }
    if prev.width() < params.poly_n || prev.height() < params.poly_n {
        return Err(FlowError::TooSmall(prev.width(), prev.height(), params.poly_n));
    }
    let levels = usable_levels(prev.width(), prev.height(), params);
    let scaled = |g: &Grid| g.map(|v| v * INTENSITY_SCALE);
    let pyr1 = build_pyramid(&scaled(prev), levels, params.pyramid_scale);
    let pyr2 = build_pyramid(&scaled(next), levels, params.pyramid_scale);
    let filters = expansion_filters(params.poly_n, params.poly_sigma);
    let half = params.window / 2;
    let window_kernel = gaussian_kernel(half as f64 * 0.3, half);

    let mut flow: Option<OpticalFlowMap> = None;
    for level in (0..levels).rev() {
        let (i1, i2) = (&pyr1[level], &pyr2[level]);
        let (w, h) = (i1.width(), i1.height());
        let mut current = match flow.take() {
            None => OpticalFlowMap::zeros(w, h),
            Some(coarse) => {
                let fx = w as f32 / coarse.width() as f32;
                let fy = h as f32 / coarse.height() as f32;
                OpticalFlowMap {
                    u: resample(&coarse.u, w, h).map(|v| v * fx),
                    v: resample(&coarse.v, w, h).map(|v| v * fy),
                }
            }
        };
        let p1 = poly_expand(i1, &filters, params.poly_n);
        let p2 = poly_expand(i2, &filters, params.poly_n);
        for _ in 0..params.iterations {
            current = update_flow(&p1, &p2, &current, &window_kernel);
        }
        flow = Some(current);
    }
    Ok(flow.expect("at least one pyramid level"))
}

/// Flow between every consecutive frame pair; element `t` maps frame `t` to `t + 1`.
pub fn flow_sequence(seq: &FrameSequence, params: &FlowParams) -> Result<Vec<OpticalFlowMap>, FlowError> {
    if seq.len() < 2 {
        return Err(FlowError::TooFewFrames(seq.len()));
    }
    seq.frames()
        .par_windows(2)
        .map(|pair| dense_flow(&pair[0], &pair[1], params))
        .collect()
}

/// Writes flow maps as `GFOF`: magic, `u32` width, height, count, then the
/// `u` and `v` planes of each map as little-endian `f32`.
pub fn write_flows(path: &Path, flows: &[OpticalFlowMap]) -> Result<(), FlowError> {
    let (w, h) = flows.first().map(|f| (f.width(), f.height())).unwrap_or((0, 0));
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(GFOF_MAGIC)?;
    for v in [w as u32, h as u32, flows.len() as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for f in flows {
        if f.width() != w || f.height() != h {
            return Err(FlowError::DimensionMismatch(w, h, f.width(), f.height()));
        }
        for plane in [&f.u, &f.v] {
            for v in plane.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_flows(path: &Path) -> Result<Vec<OpticalFlowMap>, FlowError> {
    let mut bytes = Vec::new();
    BufReader::new(fs::File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != GFOF_MAGIC {
        return Err(FlowError::Malformed("bad GFOF header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (w, h, n) = (word(1), word(2), word(3));
    let plane = w * h;
    if bytes.len() != 16 + n * 2 * plane * 4 {
        return Err(FlowError::Malformed("payload length does not match header".into()));
    }
    let floats: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(floats
        .chunks_exact(2 * plane)
        .map(|c| OpticalFlowMap {
            u: Grid::from_vec(w, h, c[..plane].to_vec()),
            v: Grid::from_vec(w, h, c[plane..].to_vec()),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_recovers_quadratic() {
        // f = 2 + 0.5x - y + 0.25x² + 0.1y² + 0.3xy around (10, 10)
        let q = |x: f64, y: f64| 2.0 + 0.5 * x - y + 0.25 * x * x + 0.1 * y * y + 0.3 * x * y;
        let img = Grid::from_fn(21, 21, |x, y| q(x as f64 - 10.0, y as f64 - 10.0) as f32);
        let f = expansion_filters(5, 1.1);
        let p = poly_expand(&img, &f, 5);
        assert!((p.bx.get(10, 10) - 0.5).abs() < 1e-3);
        assert!((p.by.get(10, 10) + 1.0).abs() < 1e-3);
        assert!((p.axx.get(10, 10) - 0.25).abs() < 1e-4);
        assert!((p.ayy.get(10, 10) - 0.1).abs() < 1e-4);
        assert!((p.axy.get(10, 10) - 0.15).abs() < 1e-4);
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let img = Grid::from_fn(40, 30, |x, y| ((x as f32 * 0.3).sin() * (y as f32 * 0.2).cos() + 1.0) / 2.0);
        let f = dense_flow(&img, &img, &FlowParams::default()).unwrap();
        assert!(f.u.data().iter().chain(f.v.data()).all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn mismatched_frames_rejected() {
        let a = Grid::new(20, 20);
        let b = Grid::new(21, 20);
        assert!(matches!(
            dense_flow(&a, &b, &FlowParams::default()),
            Err(FlowError::DimensionMismatch(..))
        ));
        let tiny = Grid::new(3, 3);
        assert!(matches!(
            dense_flow(&tiny, &tiny, &FlowParams::default()),
            Err(FlowError::TooSmall(..))
        ));
    }

    #[test]
    fn params_validation() {
        let mut p = FlowParams::default();
        assert!(p.validate().is_ok());
        p.window = 8;
        assert!(p.validate().is_err());
        p = FlowParams {
            pyramid_scale: 1.0,
            ..FlowParams::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn uniform_mirror_sign_rule() {
        let f = OpticalFlowMap::new(Grid::filled(6, 4, 1.0), Grid::filled(6, 4, 0.0));
        let m = mirror_flow(&f);
        assert!(m.u.data().iter().all(|&v| v == -1.0));
        assert!(m.v.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_sequence_rejected() {
        let seq = FrameSequence::new(vec![Grid::new(10, 10)], "one", 25.0).unwrap();
        assert!(matches!(
            flow_sequence(&seq, &FlowParams::default()),
            Err(FlowError::TooFewFrames(1))
        ));
    }
}
