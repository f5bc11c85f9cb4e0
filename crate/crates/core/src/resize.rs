//! Bilinear resampling with half-pixel centers and edge clamping.
//!
//! Output sample `i` reads source coordinate `(i + 0.5) * in / out - 0.5`,
//! clamped at zero. A 2x reduction therefore averages each 2x2 block.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    t: f32,
}

fn taps(in_size: usize, out_size: usize) -> Vec<Tap> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (libm::floor(src) as usize).min(in_size - 1);
            let hi = (lo + 1).min(in_size - 1);
            Tap {
                lo,
                hi,
                t: (src - lo as f64) as f32,
            }
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

fn resize_plane(
    src: &[f32],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    dst: &mut Vec<f32>,
) {
    let xs = taps(in_w, out_w);
    let ys = taps(in_h, out_h);
    let mut rows = Vec::with_capacity(in_h * out_w);
    for y in 0..in_h {
        let row = &src[y * in_w..(y + 1) * in_w];
        rows.extend(xs.iter().map(|tap| lerp(row[tap.lo], row[tap.hi], tap.t)));
    }
    for tap in &ys {
        let a = &rows[tap.lo * out_w..(tap.lo + 1) * out_w];
        let b = &rows[tap.hi * out_w..(tap.hi + 1) * out_w];
        dst.extend(a.iter().zip(b).map(|(&a, &b)| lerp(a, b, tap.t)));
    }
}

fn check_size(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimensions { height, width });
    }
    Ok(())
}

pub fn resize_grid(grid: &Grid, height: usize, width: usize) -> Result<Grid> {
    check_size(height, width)?;
    if grid.shape() == (height, width) {
        return Ok(grid.clone());
    }
    let mut out = Vec::with_capacity(height * width);
    resize_plane(
        grid.data(),
        grid.height(),
        grid.width(),
        height,
        width,
        &mut out,
    );
    Grid::new(height, width, out)
}

pub fn resize_image(image: &Image, height: usize, width: usize) -> Result<Image> {
    check_size(height, width)?;
    if (image.height(), image.width()) == (height, width) {
        return Ok(image.clone());
    }
    let mut out = Vec::with_capacity(image.channels() * height * width);
    for c in 0..image.channels() {
        resize_plane(
            image.channel(c),
            image.height(),
            image.width(),
            height,
            width,
            &mut out,
        );
    }
    Image::new(image.channels(), height, width, out)
}

/// Resizes a binary mask and re-binarizes it: cells strictly above 0.5
/// become 1, everything else 0.
pub fn resize_mask(mask: &Grid, height: usize, width: usize) -> Result<Grid> {
    Ok(resize_grid(mask, height, width)?.map(|v| if v > 0.5 { 1.0 } else { 0.0 }))
}
