//! Minimal layer toolkit over candle: a named parameter store with seeded
//! initialization, convolutions and batch normalization.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Display;

use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::fused;

/// How normalization layers treat batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and update running estimates.
    Train,
    /// Normalize with running estimates.
    Eval,
    /// Overwrite running estimates with this batch's statistics, then
    /// normalize with them. Used once on randomly initialized encoders.
    Calibrate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Optimized by gradient descent.
    Param,
    /// Persistent state that is not a parameter (running statistics).
    Buffer,
}

/// Named variables of one network, in lexicographic name order.
#[derive(Debug)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    entries: BTreeMap<String, (Var, Slot)>,
}

impl ParamStore {
    pub fn new(device: &Device, dtype: DType) -> Self {
        Self {
            device: device.clone(),
            dtype,
            entries: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn insert(&mut self, name: String, value: Tensor, slot: Slot) -> Result<Var> {
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.entries.insert(name, (var.clone(), slot));
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|(v, _)| v)
    }

    /// Trainable variables, for handing to an optimizer.
    pub fn params(&self) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(_, (_, slot))| *slot == Slot::Param)
            .map(|(n, (v, _))| (n.clone(), v.clone()))
            .collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Deep copies of every variable, detached from any graph.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.entries
            .iter()
            .map(|(n, (v, _))| Ok((n.clone(), v.as_tensor().detach().copy()?.detach())))
            .collect()
    }

    /// Overwrites every variable from `tensors`, which may hold extra
    /// entries. Values are cast to the store's dtype; shapes must match.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, (var, _)) in &self.entries {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::MissingWeight(name.clone()))?;
            if src.dims() != var.dims() {
                return Err(Error::Shape {
                    context: "weight load",
                    left: src.dims().to_vec(),
                    right: var.dims().to_vec(),
                });
            }
            let src = src
                .to_device(&self.device)?
                .to_dtype(self.dtype)?
                .contiguous()?;
            var.set(&src.detach())?;
        }
        Ok(())
    }

    /// Copies values from a store with the same layout.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        let tensors: HashMap<String, Tensor> = other.snapshot()?.into_iter().collect();
        self.load(&tensors)
    }

    /// Largest absolute element difference against another store with the
    /// same names.
    pub fn max_abs_diff(&self, other: &ParamStore) -> Result<f64> {
        let mut worst = 0.0f64;
        for (name, (var, _)) in &self.entries {
            let theirs = other
                .get(name)
                .ok_or_else(|| Error::MissingWeight(name.clone()))?;
            let diff = (var.as_tensor() - theirs.as_tensor())?
                .abs()?
                .flatten_all()?
                .max(0)?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
            worst = worst.max(diff);
        }
        Ok(worst)
    }
}

/// Seeded parameter factory writing into a [`ParamStore`] under a
/// dot-separated prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: impl Display) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    fn tensor(&self, values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &self.store.device)?)
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let dist = Normal::new(0.0f32, std as f32).map_err(|e| Error::Config(e.to_string()))?;
        let values = (0..shape.iter().product::<usize>())
            .map(|_| dist.sample(self.rng))
            .collect();
        let t = self.tensor(values, shape)?;
        Ok(self
            .store
            .insert(self.full_name(leaf), t, Slot::Param)?
            .as_tensor()
            .clone())
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let dist = Uniform::new_inclusive(-bound as f32, bound as f32)
            .map_err(|e| Error::Config(e.to_string()))?;
        let values = (0..shape.iter().product::<usize>())
            .map(|_| dist.sample(self.rng))
            .collect();
        let t = self.tensor(values, shape)?;
        Ok(self
            .store
            .insert(self.full_name(leaf), t, Slot::Param)?
            .as_tensor()
            .clone())
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f32, slot: Slot) -> Result<Var> {
        let t = self.tensor(vec![value; shape.iter().product()], shape)?;
        self.store.insert(self.full_name(leaf), t, slot)
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightInit {
    /// Normal with std `sqrt(2 / (c_out * k * k))`.
    KaimingFanOut,
    /// Uniform in `+-1 / sqrt(fan_in)`, weights and bias alike.
    FanInUniform,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        scheme: WeightInit,
    ) -> Result<Self> {
        let shape = [c_out, c_in, kernel, kernel];
        let fan_in = c_in * kernel * kernel;
        let weight = match scheme {
            WeightInit::KaimingFanOut => init.normal(
                "weight",
                &shape,
                (2.0 / (c_out * kernel * kernel) as f64).sqrt(),
            )?,
            WeightInit::FanInUniform => {
                init.uniform("weight", &shape, 1.0 / (fan_in as f64).sqrt())?
            }
        };
        let bias = if bias {
            Some(init.uniform("bias", &[c_out], 1.0 / (fan_in as f64).sqrt())?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = crate::im2col::conv2d(x, &self.weight, self.stride, self.padding)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

/// Transposed convolution with `kernel == stride`, no padding: an exact
/// `stride`-fold upsampler.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: Tensor,
}

impl ConvTranspose2d {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let fan_in = c_out * stride * stride;
        let weight = init.uniform(
            "weight",
            &[c_in, c_out, stride, stride],
            1.0 / (fan_in as f64).sqrt(),
        )?;
        Ok(Self { weight })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(crate::im2col::conv_transpose_blocks(x, &self.weight)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: init
                .constant("weight", &[channels], 1.0, Slot::Param)?
                .as_tensor()
                .clone(),
            bias: init
                .constant("bias", &[channels], 0.0, Slot::Param)?
                .as_tensor()
                .clone(),
            running_mean: init.constant("running_mean", &[channels], 0.0, Slot::Buffer)?,
            running_var: init.constant("running_var", &[channels], 1.0, Slot::Buffer)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    fn running(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            self.running_mean
                .as_tensor()
                .to_dtype(DType::F64)?
                .to_vec1()?,
            self.running_var
                .as_tensor()
                .to_dtype(DType::F64)?
                .to_vec1()?,
        ))
    }

    fn set_running(&self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let (dev, dtype) = (
            self.running_mean.device().clone(),
            self.running_mean.dtype(),
        );
        let c = mean.len();
        self.running_mean
            .set(&Tensor::from_vec(mean, c, &dev)?.to_dtype(dtype)?)?;
        self.running_var
            .set(&Tensor::from_vec(var, c, &dev)?.to_dtype(dtype)?)?;
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.apply(x, mode, false)
    }

    /// Batch norm followed by ReLU, fused.
    pub fn forward_relu(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.apply(x, mode, true)
    }

    fn apply(&self, x: &Tensor, mode: Mode, relu: bool) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let n = (b * h * w) as f64;
        let bessel = n / (n - 1.0).max(1.0);
        let (mean, var, batch_stats) = match mode {
            Mode::Eval => {
                let (m, v) = self.running()?;
                (m, v, false)
            }
            Mode::Train => {
                let (m, v) = fused::channel_stats(x)?;
                let (rm, rv) = self.running()?;
                let k = self.momentum;
                let rm = rm
                    .iter()
                    .zip(&m)
                    .map(|(r, b)| (1.0 - k) * r + k * b)
                    .collect();
                let rv = rv
                    .iter()
                    .zip(&v)
                    .map(|(r, b)| (1.0 - k) * r + k * b * bessel)
                    .collect();
                self.set_running(rm, rv)?;
                (m, v, true)
            }
            Mode::Calibrate => {
                let (m, v) = fused::channel_stats(x)?;
                let v: Vec<f64> = v.iter().map(|v| v * bessel).collect();
                self.set_running(m, v)?;
                let (m, v) = self.running()?;
                (m, v, false)
            }
        };
        Ok(fused::batch_norm(
            x,
            &self.weight,
            &self.bias,
            mean,
            &var,
            self.eps,
            batch_stats,
            relu,
        )?)
    }
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(fused::relu(x)?)
}

/// 3x3/stride-2 max pooling with one pixel of padding.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    Ok(fused::max_pool_3x3_s2(x)?)
}

/// Cosine similarity along dimension 1 with the norm product floored at
/// `eps^2`, clamped to `[-1, 1]`. Equal inputs give exactly 1 and NaN
/// passes through.
pub fn cosine_along_channels(a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            context: "cosine",
            left: a.dims().to_vec(),
            right: b.dims().to_vec(),
        });
    }
    let dot = (a * b)?.sum(1)?;
    let na = a.sqr()?.sum(1)?;
    let nb = b.sqr()?.sum(1)?;
    let denom = (na * nb)?.maximum(eps * eps)?.sqrt()?;
    let cos = (dot / denom)?;
    let over = relu(&(&cos - 1.0)?)?;
    let under = relu(&(cos.neg()? - 1.0)?)?;
    Ok(((cos - over)? + under)?)
}
