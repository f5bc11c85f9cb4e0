//! Procedural striped-texture dataset with square and blob defects, and a
//! reduced-width run configuration to train on it.
#![allow(dead_code)]

use ets::backbone::ArchSpec;
use ets::config::RunConfig;
use ets_core::{Grid, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct ToySet {
    pub train: Vec<Image>,
    pub test: Vec<(Image, u8, Grid)>,
}

fn stripes(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let angle: f32 = (35.0 + rng.random_range(-4.0..4.0f32)).to_radians();
    let period: f32 = 10.0 + rng.random_range(-0.5..0.5f32);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let tint = [0.55, 0.45, 0.35].map(|c: f32| c + rng.random_range(-0.03..0.03f32));
    let noise: Vec<f32> = (0..size * size)
        .map(|_| rng.random_range(-0.04..0.04f32))
        .collect();
    let (s, c) = angle.sin_cos();
    Image::from_fn(3, size, size, |ch, y, x| {
        let u = x as f32 * c + y as f32 * s;
        let wave = (std::f32::consts::TAU * u / period + phase).sin();
        (tint[ch] + 0.25 * wave + noise[y * size + x]).clamp(0.0, 1.0)
    })
    .unwrap()
}

fn paint(img: &mut Image, mask: &Grid, rng: &mut ChaCha8Rng) {
    let size = img.height();
    let patch = if rng.random_bool(0.5) {
        let color = [0.0, 1.0, 2.0].map(|_| rng.random_range(0.1..0.9f32));
        Image::from_fn(3, size, size, |ch, _, _| color[ch]).unwrap()
    } else {
        let angle: f32 = (125.0f32).to_radians();
        let (s, c) = angle.sin_cos();
        Image::from_fn(3, size, size, |_, y, x| {
            let u = x as f32 * c + y as f32 * s;
            0.5 + 0.3 * (std::f32::consts::TAU * u / 5.0).sin()
        })
        .unwrap()
    };
    let (h, w) = mask.shape();
    let data = img.data_mut();
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) > 0.0 {
                    data[(ch * h + y) * w + x] = patch.get(ch, y, x);
                }
            }
        }
    }
}

fn square_mask(size: usize, rng: &mut ChaCha8Rng) -> Grid {
    let side = rng.random_range(size / 8..size / 5);
    let y0 = rng.random_range(4..size - side - 4);
    let x0 = rng.random_range(4..size - side - 4);
    Grid::from_fn(size, size, |y, x| {
        f32::from((y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x))
    })
    .unwrap()
}

fn blob_mask(size: usize, rng: &mut ChaCha8Rng) -> Grid {
    let ry = rng.random_range(size as f32 / 16.0..size as f32 / 9.0);
    let rx = rng.random_range(size as f32 / 16.0..size as f32 / 9.0);
    let margin = size as f32 / 9.0 + 4.0;
    let cy = rng.random_range(margin..size as f32 - margin);
    let cx = rng.random_range(margin..size as f32 - margin);
    let wobble = rng.random_range(0.0..std::f32::consts::TAU);
    Grid::from_fn(size, size, |y, x| {
        let dy = (y as f32 - cy) / ry;
        let dx = (x as f32 - cx) / rx;
        let r = 1.0 + 0.2 * (3.0 * dy.atan2(dx) + wobble).sin();
        f32::from(dy * dy + dx * dx <= r * r)
    })
    .unwrap()
}

/// `n_train` normal images; a test set of `n_test_normal` normal images and
/// `n_test_anomalous` defective ones alternating squares and blobs.
pub fn toy_set(
    size: usize,
    n_train: usize,
    n_test_normal: usize,
    n_test_anomalous: usize,
    seed: u64,
) -> ToySet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = (0..n_train).map(|_| stripes(size, &mut rng)).collect();
    let mut test = Vec::new();
    for _ in 0..n_test_normal {
        test.push((stripes(size, &mut rng), 0, Grid::zeros(size, size).unwrap()));
    }
    for i in 0..n_test_anomalous {
        let mut img = stripes(size, &mut rng);
        let mask = if i % 2 == 0 {
            square_mask(size, &mut rng)
        } else {
            blob_mask(size, &mut rng)
        };
        paint(&mut img, &mask, &mut rng);
        test.push((img, 1, mask));
    }
    ToySet { train, test }
}

/// Bottleneck layout with `width` stem channels and one block per stage.
pub fn narrow_arch(width: usize) -> ArchSpec {
    ArchSpec {
        stem_channels: width,
        planes: [width, 2 * width, 4 * width],
        width_factor: 1,
        encoder_blocks: [1, 1, 1],
        bottleneck_blocks: 1,
        decoder_blocks: [1, 1, 1],
    }
}

/// Randomly initialized run on `size` pixel images.
pub fn toy_config(width: usize, size: usize, batch_size: usize, max_iterations: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.weights = "random".into();
    cfg.model.arch = narrow_arch(width);
    cfg.train.image_size = size;
    cfg.train.batch_size = batch_size;
    cfg.train.max_iterations = max_iterations;
    cfg.synthesis.builtin_textures = 4;
    cfg
}
