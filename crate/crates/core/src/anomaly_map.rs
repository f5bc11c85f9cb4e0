//! Aggregation of per-level distance maps into a pixel anomaly map.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::resize::resize_grid;
use crate::smooth::gaussian_blur;

/// Default smoothing of the summed map, in pixels.
pub const DEFAULT_SIGMA: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub map: Grid,
    /// Maximum of `map`.
    pub image_score: f32,
}

impl AnomalyMap {
    pub fn from_map(map: Grid) -> Self {
        let image_score = map.max();
        Self { map, image_score }
    }
}

/// Bilinearly upsamples each level map to `height x width`, sums them and
/// blurs the sum with a Gaussian of `sigma` (skipped when `sigma == 0`).
pub fn assemble_anomaly_map(
    levels: &[Grid],
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<AnomalyMap> {
    if levels.is_empty() {
        return Err(Error::InvalidParameter {
            name: "levels",
            reason: "at least one distance map required",
        });
    }
    let mut total = Grid::zeros(height, width)?;
    for level in levels {
        total.add_assign(&resize_grid(level, height, width)?)?;
    }
    let map = if sigma == 0.0 {
        total
    } else {
        gaussian_blur(&total, sigma)?
    };
    Ok(AnomalyMap::from_map(map))
}
