//! Synthetic anomalies: binarized Perlin masks, texture overlay and
//! optional restriction to the object foreground.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};
use crate::perlin::{normalize_noise, perlin_noise};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisParams {
    /// Opacity interval for the texture overlay.
    pub beta_range: (f32, f32),
    /// Inclusive exponent range; lattice periods are `2^k`, drawn
    /// independently per axis.
    pub period_exponents: (u32, u32),
    /// Applied to noise normalized onto `[0, 1]`; strictly-greater wins.
    pub binarize_threshold: f32,
    /// Rotation applied to the noise before binarization, in degrees.
    pub rotation_range: (f32, f32),
    pub use_foreground_mask: bool,
    pub foreground_threshold: f32,
    /// Extra attempts when a mask comes out empty.
    pub max_resamples: usize,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        Self {
            beta_range: (0.15, 1.0),
            period_exponents: (0, 5),
            binarize_threshold: 0.5,
            rotation_range: (-90.0, 90.0),
            use_foreground_mask: false,
            foreground_threshold: 0.5,
            max_resamples: 8,
        }
    }
}

impl SynthesisParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.beta_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::InvalidParameter {
                name: "beta_range",
                reason: "must be an ordered sub-interval of [0, 1]",
            });
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::InvalidParameter {
                name: "binarize_threshold",
                reason: "must lie in (0, 1)",
            });
        }
        let (klo, khi) = self.period_exponents;
        if klo > khi || khi > 15 {
            return Err(Error::InvalidParameter {
                name: "period_exponents",
                reason: "must be ordered and at most 15",
            });
        }
        let (lo, hi) = self.rotation_range;
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::InvalidParameter {
                name: "rotation_range",
                reason: "must be ordered",
            });
        }
        if !(0.0..=1.0).contains(&self.foreground_threshold) {
            return Err(Error::InvalidParameter {
                name: "foreground_threshold",
                reason: "must lie in [0, 1]",
            });
        }
        Ok(())
    }
}

/// An overlay image with a stable identifier (usually its file name).
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub id: String,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub anomalous: Image,
    pub mask: Grid,
    pub beta: f32,
    /// `None` when no non-empty mask could be drawn and the normal image was
    /// returned unchanged.
    pub texture_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    pub mask: Grid,
    /// Set when the silhouette was empty or ambiguous and the all-ones
    /// fallback was used.
    pub degenerate: bool,
}

/// Rotates a grid about its center with bilinear sampling; cells that map
/// outside the source read as zero.
pub fn rotate_grid(grid: &Grid, degrees: f32) -> Grid {
    if degrees == 0.0 {
        return grid.clone();
    }
    let (h, w) = grid.shape();
    let theta = degrees.to_radians();
    let (sin, cos) = (libm::sinf(theta), libm::cosf(theta));
    let cy = (h as f32 - 1.0) * 0.5;
    let cx = (w as f32 - 1.0) * 0.5;
    let max_y = (h - 1) as f32;
    let max_x = (w - 1) as f32;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f32 - cy;
            let dx = x as f32 - cx;
            let sy = cy + cos * dy - sin * dx;
            let sx = cx + sin * dy + cos * dx;
            if !(0.0..=max_y).contains(&sy) || !(0.0..=max_x).contains(&sx) {
                out.push(0.0);
                continue;
            }
            let y0 = libm::floorf(sy) as usize;
            let x0 = libm::floorf(sx) as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let ty = sy - y0 as f32;
            let tx = sx - x0 as f32;
            let top = grid.get(y0, x0) + tx * (grid.get(y0, x1) - grid.get(y0, x0));
            let bottom = grid.get(y1, x0) + tx * (grid.get(y1, x1) - grid.get(y1, x0));
            out.push(top + ty * (bottom - top));
        }
    }
    Grid::new(h, w, out).expect("shape preserved")
}

/// Binarizes normalized noise after rotating it: cells strictly above
/// `threshold` become 1.
pub fn make_mask(noise: &Grid, threshold: f32, rotation_degrees: f32) -> Grid {
    rotate_grid(noise, rotation_degrees).map(|v| if v > threshold { 1.0 } else { 0.0 })
}

/// Object silhouette from a `[0, 1]` image.
///
/// The channel-mean image is split at `threshold`; the side covering the
/// smaller share of border pixels is taken as the object. Empty or
/// ambiguous results fall back to an all-ones mask.
pub fn foreground_mask(image: &Image, threshold: f32) -> ForegroundMask {
    let gray = image.grayscale();
    let (h, w) = gray.shape();
    let above = |y: usize, x: usize| gray.get(y, x) > threshold;

    let mut border = 0usize;
    let mut border_above = 0usize;
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                border += 1;
                border_above += above(y, x) as usize;
            }
        }
    }
    let fallback = || ForegroundMask {
        mask: Grid::filled(h, w, 1.0).expect("non-empty image"),
        degenerate: true,
    };
    let object_is_above = match (2 * border_above).cmp(&border) {
        core::cmp::Ordering::Less => true,
        core::cmp::Ordering::Greater => false,
        core::cmp::Ordering::Equal => return fallback(),
    };
    let mask = Grid::from_fn(h, w, |y, x| {
        if above(y, x) == object_is_above {
            1.0
        } else {
            0.0
        }
    })
    .expect("non-empty image");
    if !mask.any_positive() {
        return fallback();
    }
    ForegroundMask {
        mask,
        degenerate: false,
    }
}

/// Overlays `texture` on `normal` inside `mask` with opacity `beta`:
/// `(1 - M) * I_n + (1 - beta) * (M * I_n) + beta * (M * I_t)`, per channel.
pub fn blend(normal: &Image, texture: &Image, mask: &Grid, beta: f32) -> Result<SyntheticSample> {
    normal.check_same_shape(texture)?;
    normal.check_mask(mask)?;
    let plane = normal.height() * normal.width();
    let mut out = Vec::with_capacity(normal.data().len());
    for c in 0..normal.channels() {
        let n = normal.channel(c);
        let t = texture.channel(c);
        for i in 0..plane {
            let m = mask.data()[i];
            out.push((1.0 - m) * n[i] + (1.0 - beta) * (m * n[i]) + beta * (m * t[i]));
        }
    }
    Ok(SyntheticSample {
        anomalous: Image::new(normal.channels(), normal.height(), normal.width(), out)?,
        mask: mask.clone(),
        beta,
        texture_id: None,
    })
}

/// Draws one synthetic anomaly for `normal`.
///
/// Periods, noise seed and rotation come from `rng`; the mask is restricted
/// to the foreground when `params.use_foreground_mask` is set. Empty masks
/// are redrawn up to `params.max_resamples` times before giving up and
/// returning the normal image with a zero mask.
pub fn synthesize<R: RngCore + ?Sized>(
    normal: &Image,
    textures: &[Texture],
    params: &SynthesisParams,
    rng: &mut R,
) -> Result<SyntheticSample> {
    if params.use_foreground_mask {
        let fg = foreground_mask(normal, params.foreground_threshold);
        synthesize_within(normal, textures, params, Some(&fg.mask), rng)
    } else {
        synthesize_within(normal, textures, params, None, rng)
    }
}

/// Like [`synthesize`] with an explicit foreground restriction.
pub fn synthesize_within<R: RngCore + ?Sized>(
    normal: &Image,
    textures: &[Texture],
    params: &SynthesisParams,
    foreground: Option<&Grid>,
    rng: &mut R,
) -> Result<SyntheticSample> {
    params.validate()?;
    if textures.is_empty() {
        return Err(Error::NoTextures);
    }
    for texture in textures {
        normal.check_same_shape(&texture.image)?;
    }
    if let Some(fg) = foreground {
        normal.check_mask(fg)?;
    }
    let (h, w) = (normal.height(), normal.width());
    let (klo, khi) = params.period_exponents;

    for _ in 0..=params.max_resamples {
        let period_y = 1usize << rng.random_range(klo..=khi);
        let period_x = 1usize << rng.random_range(klo..=khi);
        let seed = rng.next_u64();
        let angle = rng.random_range(params.rotation_range.0..=params.rotation_range.1);
        let noise = normalize_noise(&perlin_noise(h, w, period_y, period_x, seed)?);
        let mut mask = make_mask(&noise, params.binarize_threshold, angle);
        if let Some(fg) = foreground {
            mask = mask.intersect(fg)?;
        }
        if mask.any_positive() {
            let texture = &textures[rng.random_range(0..textures.len())];
            let beta = rng.random_range(params.beta_range.0..=params.beta_range.1);
            let mut sample = blend(normal, &texture.image, &mask, beta)?;
            sample.texture_id = Some(texture.id.clone());
            return Ok(sample);
        }
    }
    Ok(SyntheticSample {
        anomalous: normal.clone(),
        mask: Grid::zeros(h, w)?,
        beta: 0.0,
        texture_id: None,
    })
}
