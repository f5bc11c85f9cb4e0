//! Fused CPU kernels for the hot elementwise layers: batch norm (optionally
//! followed by ReLU), ReLU and 3x3/stride-2 max pooling.

use std::sync::Arc;

use candle_core::backend::BackendStorage;
use candle_core::{
    CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType,
};

type CResult<T> = candle_core::Result<T>;

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => candle_core::bail!("fused kernels expect contiguous inputs"),
    }
}

fn host<T: WithDType>(t: &Tensor) -> CResult<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

macro_rules! dispatch {
    ($dtype:expr, $f:ident, $($arg:expr),*) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
            other => candle_core::bail!("unsupported dtype {other:?}"),
        }
    };
}

/// Per-channel mean and biased variance of a `(B, C, H, W)` tensor, as
/// `(2, C)` f64.
struct ChannelStats;

fn stats_kernel<T: WithDType>(s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
    let x = slice::<T>(s, l)?;
    let (b, c, h, w) = l.shape().dims4()?;
    let hw = h * w;
    let n = (b * hw) as f64;
    let mut out = vec![0.0f64; 2 * c];
    for ci in 0..c {
        let mut sum = 0.0;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            sum += x[base..base + hw].iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let mean = sum / n;
        let mut sq = 0.0;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            sq += x[base..base + hw]
                .iter()
                .map(|v| (v.to_f64() - mean).powi(2))
                .sum::<f64>();
        }
        out[ci] = mean;
        out[c + ci] = sq / n;
    }
    Ok((CpuStorage::F64(out), Shape::from((2, c))))
}

impl CustomOp1 for ChannelStats {
    fn name(&self) -> &'static str {
        "channel-stats"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s.dtype(), stats_kernel, s, l)
    }
}

/// Returns per-channel `(mean, biased variance)`.
pub(crate) fn channel_stats(x: &Tensor) -> CResult<(Vec<f64>, Vec<f64>)> {
    let s = x.contiguous()?.apply_op1_no_bwd(&ChannelStats)?;
    let mut v = s.to_vec2::<f64>()?;
    let var = v.pop().unwrap_or_default();
    let mean = v.pop().unwrap_or_default();
    Ok((mean, var))
}

/// `y = (x - mean) * invstd * weight + bias`, optionally rectified. With
/// `batch_stats` the backward pass treats `mean`/`invstd` as functions of
/// `x`.
#[derive(Clone)]
struct BatchNormOp {
    mean: Arc<Vec<f64>>,
    invstd: Arc<Vec<f64>>,
    batch_stats: bool,
    relu: bool,
}

fn bn_fwd<T: WithDType>(
    op: &BatchNormOp,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    s3: &CpuStorage,
    l3: &Layout,
) -> CResult<(CpuStorage, Shape)> {
    let x = slice::<T>(s1, l1)?;
    let w = slice::<T>(s2, l2)?;
    let b = slice::<T>(s3, l3)?;
    let (batch, c, h, wd) = l1.shape().dims4()?;
    let hw = h * wd;
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..batch {
        for ci in 0..c {
            let scale = op.invstd[ci] * w[ci].to_f64();
            let shift = b[ci].to_f64() - op.mean[ci] * scale;
            let base = (bi * c + ci) * hw;
            out.extend(x[base..base + hw].iter().map(|v| {
                let y = v.to_f64() * scale + shift;
                T::from_f64(if op.relu && y < 0.0 { 0.0 } else { y })
            }));
        }
    }
    Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
}

fn bn_bwd<T: WithDType>(
    op: &BatchNormOp,
    x: &Tensor,
    w: &Tensor,
    y: &Tensor,
    gy: &Tensor,
) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let (batch, c, h, wd) = x.dims4()?;
    let hw = h * wd;
    let n = (batch * hw) as f64;
    let xs = host::<T>(x)?;
    let ws = host::<T>(w)?;
    let ys = if op.relu { host::<T>(y)? } else { Vec::new() };
    let mut g: Vec<f64> = host::<T>(gy)?.into_iter().map(|v| v.to_f64()).collect();
    if op.relu {
        for (gi, yi) in g.iter_mut().zip(&ys) {
            if yi.to_f64() <= 0.0 {
                *gi = 0.0;
            }
        }
    }
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for bi in 0..batch {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            for j in base..base + hw {
                let xhat = (xs[j].to_f64() - op.mean[ci]) * op.invstd[ci];
                dbeta[ci] += g[j];
                dgamma[ci] += g[j] * xhat;
            }
        }
    }
    let mut dx = Vec::with_capacity(xs.len());
    for bi in 0..batch {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let k = ws[ci].to_f64() * op.invstd[ci];
            for j in base..base + hw {
                let v = if op.batch_stats {
                    let xhat = (xs[j].to_f64() - op.mean[ci]) * op.invstd[ci];
                    k * (g[j] - (dbeta[ci] + xhat * dgamma[ci]) / n)
                } else {
                    k * g[j]
                };
                dx.push(T::from_f64(v));
            }
        }
    }
    let dev = x.device();
    let to_t = |v: Vec<f64>| -> CResult<Tensor> {
        Tensor::from_vec(v.into_iter().map(T::from_f64).collect::<Vec<T>>(), c, dev)
    };
    Ok((
        Some(Tensor::from_vec(dx, x.dims(), dev)?),
        Some(to_t(dgamma)?),
        Some(to_t(dbeta)?),
    ))
}

impl CustomOp3 for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s1.dtype(), bn_fwd, self, s1, l1, s2, l2, s3, l3)
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        y: &Tensor,
        gy: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        dispatch!(x.dtype(), bn_bwd, self, x, w, y, gy)
    }
}

/// Normalizes `x` per channel with the given statistics.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    mean: Vec<f64>,
    var: &[f64],
    eps: f64,
    batch_stats: bool,
    relu: bool,
) -> CResult<Tensor> {
    let invstd = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let op = BatchNormOp {
        mean: Arc::new(mean),
        invstd: Arc::new(invstd),
        batch_stats,
        relu,
    };
    x.contiguous()?
        .apply_op3(&weight.contiguous()?, &bias.contiguous()?, op)
}

struct Relu;
struct ReluGrad;

fn relu_kernel<T: WithDType>(s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
    let x = slice::<T>(s, l)?;
    let zero = T::from_f64(0.0);
    let out: Vec<T> = x.iter().map(|&v| if v < zero { zero } else { v }).collect();
    Ok((T::to_cpu_storage_owned(out), l.shape().clone()))
}

fn relu_grad_kernel<T: WithDType>(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
) -> CResult<(CpuStorage, Shape)> {
    let g = slice::<T>(s1, l1)?;
    let y = slice::<T>(s2, l2)?;
    let zero = T::from_f64(0.0);
    let out: Vec<T> = g
        .iter()
        .zip(y)
        .map(|(&g, &y)| if y > zero { g } else { zero })
        .collect();
    Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
}

impl CustomOp1 for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s.dtype(), relu_kernel, s, l)
    }

    fn bwd(&self, _x: &Tensor, y: &Tensor, gy: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(
            gy.contiguous()?
                .apply_op2_no_bwd(&y.contiguous()?, &ReluGrad)?,
        ))
    }
}

impl CustomOp2 for ReluGrad {
    fn name(&self) -> &'static str {
        "relu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s1.dtype(), relu_grad_kernel, s1, l1, s2, l2)
    }
}

pub(crate) fn relu(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Relu)
}

/// 3x3 max pooling, stride 2, one pixel of padding that never wins.
struct MaxPool;
struct MaxPoolGrad;

fn pooled(n: usize) -> usize {
    (n - 1) / 2 + 1
}

/// Calls `f(out_index, in_index_of_max)` for every output cell.
fn for_each_window<T: WithDType>(
    x: &[T],
    bc: usize,
    h: usize,
    w: usize,
    mut f: impl FnMut(usize, usize),
) {
    let (oh, ow) = (pooled(h), pooled(w));
    for p in 0..bc {
        let plane = p * h * w;
        for oy in 0..oh {
            let ys = (2 * oy).saturating_sub(1)..(2 * oy + 2).min(h);
            for ox in 0..ow {
                let xs = (2 * ox).saturating_sub(1)..(2 * ox + 2).min(w);
                let mut best = plane + ys.start * w + xs.start;
                for iy in ys.clone() {
                    for ix in xs.clone() {
                        let i = plane + iy * w + ix;
                        if x[i] > x[best] || x[i].to_f64().is_nan() {
                            best = i;
                        }
                    }
                }
                f((p * oh + oy) * ow + ox, best);
            }
        }
    }
}

fn maxpool_kernel<T: WithDType>(s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
    let x = slice::<T>(s, l)?;
    let (b, c, h, w) = l.shape().dims4()?;
    let mut out = vec![T::from_f64(0.0); b * c * pooled(h) * pooled(w)];
    for_each_window(x, b * c, h, w, |o, i| out[o] = x[i]);
    Ok((
        T::to_cpu_storage_owned(out),
        Shape::from((b, c, pooled(h), pooled(w))),
    ))
}

fn maxpool_grad_kernel<T: WithDType>(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
) -> CResult<(CpuStorage, Shape)> {
    let g = slice::<T>(s1, l1)?;
    let x = slice::<T>(s2, l2)?;
    let (b, c, h, w) = l2.shape().dims4()?;
    let mut out = vec![0.0f64; x.len()];
    for_each_window(x, b * c, h, w, |o, i| out[i] += g[o].to_f64());
    Ok((
        T::to_cpu_storage_owned(out.into_iter().map(T::from_f64).collect()),
        l2.shape().clone(),
    ))
}

impl CustomOp1 for MaxPool {
    fn name(&self) -> &'static str {
        "max-pool-3x3-s2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s.dtype(), maxpool_kernel, s, l)
    }

    fn bwd(&self, x: &Tensor, _y: &Tensor, gy: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(
            gy.contiguous()?
                .apply_op2_no_bwd(&x.contiguous()?, &MaxPoolGrad)?,
        ))
    }
}

impl CustomOp2 for MaxPoolGrad {
    fn name(&self) -> &'static str {
        "max-pool-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s1.dtype(), maxpool_grad_kernel, s1, l1, s2, l2)
    }
}

pub(crate) fn max_pool_3x3_s2(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(MaxPool)
}
