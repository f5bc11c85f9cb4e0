//! Brute-force reference implementations of the ranking metrics. Shared by
//! the core oracle tests and the acceptance suite; deliberately written
//! without any of the sorting or sweeping tricks used by `ets_core`.

#![allow(dead_code)]

use std::collections::VecDeque;

/// `P(pos > neg) + P(pos == neg) / 2` by counting every pair.
pub fn auroc_pairs(scores: &[f32], labels: &[bool]) -> f64 {
    let mut wins = 0.0f64;
    let mut pairs = 0.0f64;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Walks the distinct thresholds from high to low, recounting precision and
/// recall from scratch at each one.
pub fn ap_rank_walk(scores: &[f32], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f32> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let mut tp = 0.0;
        let mut predicted = 0.0;
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= t {
                predicted += 1.0;
                if l {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / positives;
        ap += (recall - prev_recall) * (tp / predicted);
        prev_recall = recall;
    }
    ap
}

/// 8-connected regions of `mask` (row-major `h x w`, positive when > 0.5),
/// found by breadth-first flood fill.
pub fn flood_regions(mask: &[f32], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask[start] <= 0.5 {
            continue;
        }
        let mut region = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            region.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !seen[q] && mask[q] > 0.5 {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        regions.push(region);
    }
    regions
}

pub struct Instance {
    pub h: usize,
    pub w: usize,
    pub maps: Vec<Vec<f32>>,
    pub masks: Vec<Vec<f32>>,
}

/// `(fpr, mean overlap)` for prediction `score > t` at every given threshold,
/// in the order given.
pub fn pro_points(inst: &Instance, thresholds: &[f32]) -> Vec<(f64, f64)> {
    let regions: Vec<Vec<Vec<usize>>> = inst
        .masks
        .iter()
        .map(|m| flood_regions(m, inst.h, inst.w))
        .collect();
    let n_regions: usize = regions.iter().map(|r| r.len()).sum();
    let negatives: usize = inst
        .masks
        .iter()
        .map(|m| m.iter().filter(|&&v| v <= 0.5).count())
        .sum();
    thresholds
        .iter()
        .map(|&t| {
            let mut overlap_sum = 0.0;
            let mut fp = 0usize;
            for ((map, mask), regs) in inst.maps.iter().zip(&inst.masks).zip(&regions) {
                for reg in regs {
                    let hit = reg.iter().filter(|&&p| map[p] > t).count();
                    overlap_sum += hit as f64 / reg.len() as f64;
                }
                fp += map
                    .iter()
                    .zip(mask)
                    .filter(|(s, m)| **m <= 0.5 && **s > t)
                    .count();
            }
            (fp as f64 / negatives as f64, overlap_sum / n_regions as f64)
        })
        .collect()
}

/// Area under a monotone piecewise-linear curve on `[0, limit]`, divided by
/// `limit`; flat beyond the last point.
pub fn normalized_area(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut clipped: Vec<(f64, f64)> = Vec::new();
    for (k, &(x, y)) in points.iter().enumerate() {
        if x <= limit {
            clipped.push((x, y));
            continue;
        }
        let (px, py) = points[k - 1];
        clipped.push((limit, py + (y - py) * (limit - px) / (x - px)));
        break;
    }
    let last = *clipped.last().unwrap();
    if last.0 < limit {
        clipped.push((limit, last.1));
    }
    let mut area = clipped[0].0 * clipped[0].1;
    for k in 1..clipped.len() {
        let (x0, y0) = clipped[k - 1];
        let (x1, y1) = clipped[k];
        area += 0.5 * (x1 - x0) * (y0 + y1);
    }
    area / limit
}

/// PRO with every distinct pooled score as a threshold.
pub fn pro_exhaustive(inst: &Instance, limit: f64) -> f64 {
    let mut thresholds: Vec<f32> = inst.maps.iter().flatten().copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    normalized_area(&pro_points(inst, &thresholds), limit)
}

/// PRO on `count` evenly spaced thresholds between the pooled extremes.
pub fn pro_dense(inst: &Instance, limit: f64, count: usize) -> f64 {
    let all: Vec<f32> = inst.maps.iter().flatten().copied().collect();
    let lo = all.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = all.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let thresholds: Vec<f32> = (0..count)
        .map(|k| hi - (hi - lo) * k as f32 / (count - 1) as f32)
        .collect();
    normalized_area(&pro_points(inst, &thresholds), limit)
}
