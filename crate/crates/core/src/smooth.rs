//! Separable Gaussian smoothing with half-sample symmetric ("reflect")
//! boundaries: `d c b a | a b c d | d c b a`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Kernel truncation in standard deviations.
pub const TRUNCATE: f64 = 4.0;

/// Normalized 1-D Gaussian taps with radius `round(truncate * sigma)`.
pub fn gaussian_kernel(sigma: f64, truncate: f64) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidParameter {
            name: "sigma",
            reason: "must be positive and finite",
        });
    }
    let radius = (truncate * sigma + 0.5) as isize;
    let denom = 2.0 * sigma * sigma;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| libm::exp(-((i * i) as f64) / denom))
        .collect();
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    Ok(taps)
}

#[inline]
fn reflect(index: isize, len: usize) -> usize {
    let period = 2 * len as isize;
    let mut i = index.rem_euclid(period);
    if i >= len as isize {
        i = period - 1 - i;
    }
    i as usize
}

fn filter_line(src: &[f32], stride: usize, len: usize, kernel: &[f64], dst: &mut [f32]) {
    let radius = (kernel.len() / 2) as isize;
    for i in 0..len {
        let mut acc = 0.0f64;
        for (k, &weight) in kernel.iter().enumerate() {
            let j = reflect(i as isize + k as isize - radius, len);
            acc += weight * src[j * stride] as f64;
        }
        dst[i * stride] = acc as f32;
    }
}

/// Gaussian blur of `grid` with standard deviation `sigma` pixels.
pub fn gaussian_blur(grid: &Grid, sigma: f64) -> Result<Grid> {
    let kernel = gaussian_kernel(sigma, TRUNCATE)?;
    let (h, w) = grid.shape();
    let mut rows = grid.data().to_vec();
    for y in 0..h {
        let line = &grid.data()[y * w..(y + 1) * w];
        filter_line(line, 1, w, &kernel, &mut rows[y * w..(y + 1) * w]);
    }
    let mut out = rows.clone();
    for x in 0..w {
        filter_line(&rows[x..], w, h, &kernel, &mut out[x..]);
    }
    Grid::new(h, w, out)
}
