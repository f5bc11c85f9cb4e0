//! Scalar loop implementations of the network blocks and objectives, used
//! as oracles. Arrays are flat, row-major, one batch element at a time.
#![allow(dead_code)]

use candle_core::{DType, Tensor};
use ets::nn::ParamStore;

pub const EPS: f64 = 1e-8;

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

/// `(C, H, W)` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    /// Batch element `i` of a `(B, C, H, W)` tensor.
    pub fn from_tensor(t: &Tensor, i: usize) -> Self {
        let (_, c, h, w) = t.dims4().unwrap();
        let v = values(&t.get(i).unwrap());
        Self::new(c, h, w, v)
    }
}

/// Stride-1 convolution with zero padding `k / 2`.
pub fn conv(x: &Map, weight: &[f64], bias: &[f64], c_out: usize, k: usize) -> Map {
    assert_eq!(weight.len(), c_out * x.c * k * k);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; c_out * x.h * x.w];
    for o in 0..c_out {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = bias[o];
                for c in 0..x.c {
                    for dy in 0..k {
                        for dx in 0..k {
                            let sy = y as isize + dy as isize - pad;
                            let sx = xx as isize + dx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                continue;
                            }
                            acc += weight[((o * x.c + c) * k + dy) * k + dx]
                                * x.at(c, sy as usize, sx as usize);
                        }
                    }
                }
                out[(o * x.h + y) * x.w + xx] = acc;
            }
        }
    }
    Map::new(c_out, x.h, x.w, out)
}

pub fn avg_pool2(x: &Map) -> Map {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Vec::with_capacity(x.c * h * w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                let s = x.at(c, 2 * y, 2 * xx)
                    + x.at(c, 2 * y, 2 * xx + 1)
                    + x.at(c, 2 * y + 1, 2 * xx)
                    + x.at(c, 2 * y + 1, 2 * xx + 1);
                out.push(s / 4.0);
            }
        }
    }
    Map::new(x.c, h, w, out)
}

pub fn add(a: &Map, b: &Map) -> Map {
    Map::new(
        a.c,
        a.h,
        a.w,
        a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    )
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(EPS)
}

/// Cosine between channel vectors at every pixel, `(H, W)` row-major.
pub fn pixel_cosine(a: &Map, b: &Map) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.h * a.w);
    for y in 0..a.h {
        for x in 0..a.w {
            let va: Vec<f64> = (0..a.c).map(|c| a.at(c, y, x)).collect();
            let vb: Vec<f64> = (0..b.c).map(|c| b.at(c, y, x)).collect();
            out.push(cosine(&va, &vb));
        }
    }
    out
}

pub struct ConvWeights {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub c_out: usize,
    pub k: usize,
}

impl ConvWeights {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Self {
        let w = store.get(&format!("{prefix}.conv.weight")).unwrap();
        let b = store.get(&format!("{prefix}.conv.bias")).unwrap();
        let dims = w.dims().to_vec();
        Self {
            weight: values(w.as_tensor()),
            bias: values(b.as_tensor()),
            c_out: dims[0],
            k: dims[2],
        }
    }

    pub fn apply(&self, x: &Map) -> Map {
        conv(x, &self.weight, &self.bias, self.c_out, self.k)
    }
}

pub struct GiiWeights {
    pub lift: ConvWeights,
    pub fuse: ConvWeights,
    pub attend: ConvWeights,
    pub out: ConvWeights,
}

impl GiiWeights {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Self {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        Self {
            lift: ConvWeights::from_store(store, &p("lift")),
            fuse: ConvWeights::from_store(store, &p("fuse")),
            attend: ConvWeights::from_store(store, &p("attend")),
            out: ConvWeights::from_store(store, &p("out")),
        }
    }
}

pub struct GiiSteps {
    pub lifted: Map,
    pub fused: Map,
    pub similarity: Vec<f64>,
    pub attended: Map,
    pub output: Map,
}

/// Guided injection computed pixel by pixel, step after step.
pub fn gii(
    wt: &GiiWeights,
    t_fine: &Map,
    t_coarse: &Map,
    s: &Map,
    similarity: Option<&[f64]>,
) -> GiiSteps {
    let lifted = wt.lift.apply(&avg_pool2(t_fine));
    let fused = wt.fuse.apply(&add(&lifted, t_coarse));
    let sim = match similarity {
        Some(v) => v.to_vec(),
        None => pixel_cosine(t_coarse, s),
    };
    let mut mixed = vec![0.0; s.data.len()];
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                let i = (c * s.h + y) * s.w + x;
                let m = sim[y * s.w + x];
                mixed[i] = fused.data[i] * m + s.data[i] * (1.0 - m);
            }
        }
    }
    let attended = wt.attend.apply(&Map::new(s.c, s.h, s.w, mixed));
    let mut both = attended.data.clone();
    both.extend_from_slice(&s.data);
    let output = wt.out.apply(&Map::new(2 * s.c, s.h, s.w, both));
    GiiSteps {
        lifted,
        fused,
        similarity: sim,
        attended,
        output,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Area-averaged `(H, W)` mask at `(h, w)`.
pub fn pool_mask(mask: &[f64], mh: usize, mw: usize, h: usize, w: usize) -> Vec<f64> {
    let (ky, kx) = (mh / h, mw / w);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in 0..ky {
                for dx in 0..kx {
                    s += mask[(y * ky + dy) * mw + x * kx + dx];
                }
            }
            out[y * w + x] = s / (ky * kx) as f64;
        }
    }
    out
}

/// `[level][batch]` maps.
pub type Pyramid = Vec<Vec<Map>>;

pub fn pyramid(levels: &[Tensor; 3]) -> Pyramid {
    levels
        .iter()
        .map(|t| {
            (0..t.dim(0).unwrap())
                .map(|i| Map::from_tensor(t, i))
                .collect()
        })
        .collect()
}

/// Teacher loss halves; `masks[b]` is `(mh, mw)`.
pub fn teacher_loss(
    t_n: &Pyramid,
    t_a: &Pyramid,
    e_n: &Pyramid,
    masks: &[Vec<f64>],
    mh: usize,
    mw: usize,
) -> (f64, f64) {
    let (mut ln, mut la) = (0.0, 0.0);
    for l in 0..3 {
        let (mut sn, mut sa, mut count) = (0.0, 0.0, 0usize);
        for b in 0..t_n[l].len() {
            let (h, w) = (t_n[l][b].h, t_n[l][b].w);
            let dn = pixel_cosine(&t_n[l][b], &e_n[l][b]);
            let da = pixel_cosine(&t_a[l][b], &e_n[l][b]);
            let m = pool_mask(&masks[b], mh, mw, h, w);
            for i in 0..h * w {
                sn += (1.0 - dn[i]).abs();
                sa += (1.0 - da[i] - m[i]).abs();
            }
            count += h * w;
        }
        ln += sn / count as f64;
        la += sa / count as f64;
    }
    (ln, la)
}

/// Student loss over flattened per-image features.
pub fn student_loss(s_n: &Pyramid, s_a: &Pyramid, e_n: &Pyramid, t_n: &Pyramid) -> f64 {
    let mut total = 0.0;
    for l in 0..3 {
        let batch = s_n[l].len();
        for target in [e_n, t_n] {
            for s in [s_n, s_a] {
                let mut acc = 0.0;
                for b in 0..batch {
                    acc += 1.0 - cosine(&s[l][b].data, &target[l][b].data);
                }
                total += acc / batch as f64;
            }
        }
    }
    total
}
