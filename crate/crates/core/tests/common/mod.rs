#![allow(dead_code)]

use gaitflow::grid::Grid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth random texture, periodic in both directions.
pub fn periodic_texture(width: usize, height: usize, seed: u64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Grid::from_fn(width, height, |_, _| rng.gen::<f32>());
    let k: Vec<f32> = (-4i32..=4).map(|i| (-(i * i) as f32 / (2.0 * 1.5 * 1.5)).exp()).collect();
    let s: f32 = k.iter().sum();
    let tmp = Grid::from_fn(width, height, |x, y| {
        (0..9).map(|i| k[i] * noise.get((x + width + i - 4) % width, y)).sum::<f32>() / s
    });
    let g = Grid::from_fn(width, height, |x, y| {
        (0..9).map(|i| k[i] * tmp.get(x, (y + height + i - 4) % height)).sum::<f32>() / s
    });
    // stretch contrast to roughly [0, 1]
    let (lo, hi) = g.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    g.map(|v| (v - lo) / (hi - lo))
}

/// `src` shifted by `(dx, dy)` with periodic wrap: `out(x, y) = src(x - dx, y - dy)`.
pub fn wrap_shift(src: &Grid, dx: i32, dy: i32) -> Grid {
    let (w, h) = (src.width() as i32, src.height() as i32);
    Grid::from_fn(src.width(), src.height(), |x, y| {
        src.get((x as i32 - dx).rem_euclid(w) as usize, (y as i32 - dy).rem_euclid(h) as usize)
    })
}

/// Mean of `g` over the central `cw × ch` region.
pub fn central_mean(g: &Grid, cw: usize, ch: usize) -> f64 {
    let x0 = (g.width() - cw) / 2;
    let y0 = (g.height() - ch) / 2;
    let mut s = 0.0;
    for y in y0..y0 + ch {
        for x in x0..x0 + cw {
            s += g.get(x, y) as f64;
        }
    }
    s / (cw * ch) as f64
}
