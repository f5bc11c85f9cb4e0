//! Per-region overlap (PRO).
//!
//! Every 8-connected ground-truth region counts equally regardless of its
//! size. For each threshold `t` in the sweep a pixel is predicted anomalous
//! when its score is strictly above `t`; the curve pairs the false-positive
//! rate over all normal pixels with the mean fraction of each region that is
//! predicted. The curve is integrated on `[0, fpr_limit]` with the
//! trapezoid rule and divided by `fpr_limit`. Past the largest false-positive
//! rate reached by the sweep the curve is held at its last overlap.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Default false-positive-rate integration limit.
pub const DEFAULT_FPR_LIMIT: f64 = 0.3;
/// Default cap on the number of thresholds in the sweep.
pub const DEFAULT_MAX_THRESHOLDS: usize = 5000;

/// Connected-component labelling of a binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionLabels {
    /// Per-cell label, `0` for background and `1..=count` for regions.
    pub labels: Vec<u32>,
    /// `sizes[r - 1]` is the number of cells carrying label `r`.
    pub sizes: Vec<usize>,
}

impl RegionLabels {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let next = parent[x as usize];
        parent[x as usize] = parent[next as usize];
        x = next;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Labels the 8-connected components of cells above 0.5, numbered in
/// raster order of their first cell.
pub fn label_regions(mask: &Grid) -> RegionLabels {
    let (h, w) = mask.shape();
    let mut provisional = vec![0u32; h * w];
    // parent[0] is the background sentinel.
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) <= 0.5 {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut n = 0;
            let mut push = |label: u32| {
                if label != 0 {
                    neighbours[n] = label;
                    n += 1;
                }
            };
            if x > 0 {
                push(provisional[y * w + x - 1]);
            }
            if y > 0 {
                let row = (y - 1) * w;
                if x > 0 {
                    push(provisional[row + x - 1]);
                }
                push(provisional[row + x]);
                if x + 1 < w {
                    push(provisional[row + x + 1]);
                }
            }
            let label = if n == 0 {
                let fresh = parent.len() as u32;
                parent.push(fresh);
                fresh
            } else {
                let first = neighbours[0];
                for &other in &neighbours[1..n] {
                    union(&mut parent, first, other);
                }
                first
            };
            provisional[y * w + x] = label;
        }
    }

    let mut compact = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    let mut labels = provisional;
    for label in labels.iter_mut() {
        if *label == 0 {
            continue;
        }
        let root = find(&mut parent, *label) as usize;
        if compact[root] == 0 {
            sizes.push(0);
            compact[root] = sizes.len() as u32;
        }
        *label = compact[root];
        sizes[*label as usize - 1] += 1;
    }
    RegionLabels { labels, sizes }
}

fn validate(maps: &[Grid], masks: &[Grid]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(Error::LengthMismatch {
            left: maps.len(),
            right: masks.len(),
        });
    }
    for (map, mask) in maps.iter().zip(masks) {
        map.check_same_shape(mask)?;
    }
    Ok(())
}

/// Thresholds of the sweep in ascending order: every distinct score when
/// there are at most `max_thresholds`, otherwise `max_thresholds` evenly
/// spaced quantiles of the pooled scores (both extremes included).
pub fn sweep_thresholds(sorted_scores: &[f32], max_thresholds: usize) -> Vec<f32> {
    let mut unique: Vec<f32> = sorted_scores.to_vec();
    unique.dedup();
    if unique.len() <= max_thresholds || max_thresholds < 2 {
        return unique;
    }
    let last = (sorted_scores.len() - 1) as f64;
    let steps = (max_thresholds - 1) as f64;
    let mut out: Vec<f32> = (0..max_thresholds)
        .map(|q| sorted_scores[libm::round(q as f64 * last / steps) as usize])
        .collect();
    out.dedup();
    out
}

/// `(false-positive rate, mean region overlap)` points, one per threshold in
/// descending threshold order, so both coordinates are non-decreasing.
pub fn pro_curve(maps: &[Grid], masks: &[Grid], max_thresholds: usize) -> Result<Vec<(f64, f64)>> {
    validate(maps, masks)?;

    let mut scores = Vec::new();
    // Region pixels carry their share 1 / (regions * size) of the mean
    // overlap; normal pixels carry a negative sentinel.
    let mut weights: Vec<f64> = Vec::new();
    let mut region_pixels: Vec<(usize, u32)> = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    let mut negatives = 0usize;
    for (map, mask) in maps.iter().zip(masks) {
        let labelled = label_regions(mask);
        let offset = region_sizes.len() as u32;
        region_sizes.extend_from_slice(&labelled.sizes);
        for (&score, &label) in map.data().iter().zip(&labelled.labels) {
            let index = scores.len();
            scores.push(score);
            if label == 0 {
                negatives += 1;
                weights.push(-1.0);
            } else {
                weights.push(0.0);
                region_pixels.push((index, offset + label - 1));
            }
        }
    }
    let regions = region_sizes.len();
    if regions == 0 {
        return Err(Error::NoRegions);
    }
    if negatives == 0 {
        return Err(Error::NoNegatives);
    }
    for &(index, region) in &region_pixels {
        weights[index] = 1.0 / (regions as f64 * region_sizes[region as usize] as f64);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let ascending: Vec<f32> = order.iter().rev().map(|&i| scores[i]).collect();
    let thresholds = sweep_thresholds(&ascending, max_thresholds);

    let mut curve = Vec::with_capacity(thresholds.len());
    let mut cursor = 0;
    let mut false_positives = 0usize;
    let mut overlap = 0.0f64;
    for &t in thresholds.iter().rev() {
        while cursor < order.len() && scores[order[cursor]] > t {
            let weight = weights[order[cursor]];
            if weight < 0.0 {
                false_positives += 1;
            } else {
                overlap += weight;
            }
            cursor += 1;
        }
        curve.push((false_positives as f64 / negatives as f64, overlap.min(1.0)));
    }
    Ok(curve)
}

/// Trapezoid area under `curve` on `[0, limit]`, divided by `limit`.
///
/// The segment crossing `limit` is interpolated linearly; a curve ending
/// before `limit` is extended flat at its last value.
pub fn integrate_curve(curve: &[(f64, f64)], limit: f64) -> f64 {
    let Some(&(first_x, first_y)) = curve.first() else {
        return 0.0;
    };
    let mut area = first_y * first_x.min(limit);
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= limit {
            return area / limit;
        }
        if x1 > limit {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) * 0.5;
            return area / limit;
        }
        area += (x1 - x0) * (y0 + y1) * 0.5;
    }
    let &(last_x, last_y) = curve.last().expect("non-empty");
    if last_x < limit {
        area += (limit - last_x) * last_y;
    }
    area / limit
}

/// Normalized area under the PRO curve up to `fpr_limit`.
pub fn pro(maps: &[Grid], masks: &[Grid], fpr_limit: f64, max_thresholds: usize) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::InvalidFprLimit(fpr_limit));
    }
    let curve = pro_curve(maps, masks, max_thresholds)?;
    Ok(integrate_curve(&curve, fpr_limit))
}
