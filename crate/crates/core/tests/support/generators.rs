//! Random inputs for the metric oracle comparisons.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::oracles::Instance;

/// 2 to 1000 scores, coarsely quantized half of the time.
pub fn random_labelled(rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<bool>) {
    let n = rng.random_range(2..=1000);
    // Coarse quantization in half the cases to exercise ties.
    let levels = if rng.random_bool(0.5) {
        rng.random_range(2..20)
    } else {
        0
    };
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = labels
        .iter()
        .map(|&l| {
            let base = rng.random::<f32>() + if l { 0.3 } else { 0.0 };
            if levels > 0 {
                (base * levels as f32).floor() / levels as f32
            } else {
                base
            }
        })
        .collect();
    (scores, labels)
}

/// 1 to 3 maps of up to 32x32 with blocky, partially filled masks.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let h = rng.random_range(4..=32);
    let w = rng.random_range(4..=32);
    let images = rng.random_range(1..=3);
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..images {
        let mut mask = vec![0.0f32; h * w];
        for _ in 0..rng.random_range(1..=3) {
            let (bh, bw) = (rng.random_range(1..=h / 2), rng.random_range(1..=w / 2));
            let (y0, x0) = (rng.random_range(0..=h - bh), rng.random_range(0..=w - bw));
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    if rng.random_bool(0.85) {
                        mask[y * w + x] = 1.0;
                    }
                }
            }
        }
        let levels = rng.random_range(3..40) as f32;
        let map = mask
            .iter()
            .map(|&m| ((rng.random::<f32>() + 0.4 * m) * levels).floor() / levels)
            .collect();
        maps.push(map);
        masks.push(mask);
    }
    Instance { h, w, maps, masks }
}
