//! Random pyramids for the objective tests: up to 3 images, up to 8
//! channels per level, levels of 4 or 8 pixels halving twice.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use ets::backbone::FeaturePyramid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Case {
    pub t_n: FeaturePyramid,
    pub t_a: FeaturePyramid,
    pub e_n: FeaturePyramid,
    pub s_n: FeaturePyramid,
    pub s_a: FeaturePyramid,
    pub mask: Tensor,
    pub mask_hw: (usize, usize),
}

fn random_pyramid(
    rng: &mut ChaCha8Rng,
    batch: usize,
    channels: [usize; 3],
    h: usize,
    w: usize,
) -> FeaturePyramid {
    let levels = [0, 1, 2].map(|i| {
        let shape = (batch, channels[i], h >> i, w >> i);
        let n = batch * channels[i] * (h >> i) * (w >> i);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    });
    FeaturePyramid { levels }
}

pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = rng.random_range(1..=3);
    let channels = [0; 3].map(|_| rng.random_range(1..=8));
    let h = 4 << rng.random_range(0..2);
    let w = 4 << rng.random_range(0..2);
    let scale = 1 << rng.random_range(0..2);
    let (mh, mw) = (h * scale, w * scale);
    let mut p = || random_pyramid(&mut rng, batch, channels, h, w);
    let (t_n, t_a, e_n, s_n, s_a) = (p(), p(), p(), p(), p());
    let mv: Vec<f64> = (0..batch * mh * mw)
        .map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mv, (batch, 1, mh, mw), &Device::Cpu).unwrap();
    Case {
        t_n,
        t_a,
        e_n,
        s_n,
        s_a,
        mask,
        mask_hw: (mh, mw),
    }
}

pub fn mask_rows(case: &Case) -> Vec<Vec<f64>> {
    let (mh, mw) = case.mask_hw;
    values(&case.mask)
        .chunks(mh * mw)
        .map(|c| c.to_vec())
        .collect()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

/// Largest relative deviation between the analytic gradient of `loss` and
/// central differences, over every coordinate of the three levels of
/// `target`. Relative errors use a floor of `1e-4` on the magnitude.
pub fn gradient_error(target: &FeaturePyramid, loss: impl Fn(&FeaturePyramid) -> Tensor) -> f64 {
    let vars: Vec<Var> = target
        .levels
        .iter()
        .map(|t| Var::from_tensor(t).unwrap())
        .collect();
    let as_pyramid = |levels: [Tensor; 3]| FeaturePyramid { levels };
    let live = as_pyramid([0, 1, 2].map(|i| vars[i].as_tensor().clone()));
    let grads = loss(&live).backward().unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (li, var) in vars.iter().enumerate() {
        let g = values(grads.get(var.as_tensor()).unwrap());
        let base = values(var.as_tensor());
        let shape = var.dims().to_vec();
        for i in 0..base.len() {
            let at = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let mut levels = target.levels.clone();
                levels[li] = Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap();
                scalar(&loss(&as_pyramid(levels)))
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            worst = worst.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-4));
        }
    }
    worst
}
