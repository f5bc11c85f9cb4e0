//! Gradient-lattice Perlin noise.
//!
//! The grid is split into `period_y x period_x` cells. Every lattice corner
//! carries a random unit gradient; a pixel blends the four corner dot
//! products with the quintic fade `6t^5 - 15t^4 + 10t^3`. The result is
//! scaled by `sqrt(2)` so raw values span `[-1, 1]`.

use alloc::vec::Vec;
use core::f32::consts::{PI, SQRT_2};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;

#[inline]
fn fade(t: f32) -> f32 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Raw Perlin noise in `[-1, 1]`, deterministic in `seed`.
///
/// When a period does not divide the matching dimension the lattice is laid
/// out with cells of `ceil(size / period)` pixels and cropped.
pub fn perlin_noise(
    height: usize,
    width: usize,
    period_y: usize,
    period_x: usize,
    seed: u64,
) -> Result<Grid> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimensions { height, width });
    }
    if period_y == 0 || period_x == 0 {
        return Err(Error::InvalidParameter {
            name: "period",
            reason: "lattice periods must be positive",
        });
    }
    let period_y = period_y.min(height);
    let period_x = period_x.min(width);
    let cell_y = height.div_ceil(period_y);
    let cell_x = width.div_ceil(period_x);
    let corners_y = height.div_ceil(cell_y) + 1;
    let corners_x = width.div_ceil(cell_x) + 1;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gradients: Vec<(f32, f32)> = (0..corners_y * corners_x)
        .map(|_| {
            let angle = 2.0 * PI * rng.random::<f32>();
            (libm::cosf(angle), libm::sinf(angle))
        })
        .collect();
    let grad = |cy: usize, cx: usize| gradients[cy * corners_x + cx];

    Grid::from_fn(height, width, |y, x| {
        let (cy, cx) = (y / cell_y, x / cell_x);
        let fy = (y % cell_y) as f32 / cell_y as f32;
        let fx = (x % cell_x) as f32 / cell_x as f32;
        let dot = |g: (f32, f32), dy: f32, dx: f32| g.0 * dy + g.1 * dx;
        let n00 = dot(grad(cy, cx), fy, fx);
        let n10 = dot(grad(cy + 1, cx), fy - 1.0, fx);
        let n01 = dot(grad(cy, cx + 1), fy, fx - 1.0);
        let n11 = dot(grad(cy + 1, cx + 1), fy - 1.0, fx - 1.0);
        let (ty, tx) = (fade(fy), fade(fx));
        SQRT_2 * lerp(lerp(n00, n10, ty), lerp(n01, n11, ty), tx)
    })
}

/// Maps raw noise from `[-1, 1]` onto `[0, 1]`.
pub fn normalize_noise(noise: &Grid) -> Grid {
    noise.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}
