//! Wide-ResNet style encoder shared by the expert and the teacher.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{max_pool_3x3_s2, relu, BatchNorm, Conv2d, Init, Mode, ParamStore, WeightInit};

/// Channel multiplier of the last convolution in a bottleneck block.
pub const EXPANSION: usize = 4;
/// Total downsampling factor of encoder plus embedding; inputs must be a
/// multiple of it.
pub const INPUT_DIVISOR: usize = 32;
/// Registry key of the ImageNet WRN50-2 weights.
pub const DEFAULT_WEIGHTS: &str = "wide_resnet50_2";
/// Environment variable naming the weight registry directory.
pub const WEIGHTS_DIR_ENV: &str = "ETS_WEIGHTS_DIR";

/// Widths and depths of the encoder, embedding and decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub stem_channels: usize,
    pub planes: [usize; 3],
    pub width_factor: usize,
    pub encoder_blocks: [usize; 3],
    pub bottleneck_blocks: usize,
    pub decoder_blocks: [usize; 3],
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self::wide_resnet50_2()
    }
}

impl ArchSpec {
    pub fn wide_resnet50_2() -> Self {
        Self {
            stem_channels: 64,
            planes: [64, 128, 256],
            width_factor: 2,
            encoder_blocks: [3, 4, 6],
            bottleneck_blocks: 3,
            decoder_blocks: [3, 4, 6],
        }
    }

    /// Identifier stored in checkpoints.
    pub fn id(&self) -> String {
        if *self == Self::wide_resnet50_2() {
            return "wide_resnet50_2".to_string();
        }
        let [p1, p2, p3] = self.planes;
        let [e1, e2, e3] = self.encoder_blocks;
        let [d1, d2, d3] = self.decoder_blocks;
        format!(
            "wrn-s{}-p{p1}.{p2}.{p3}-w{}-e{e1}.{e2}.{e3}-b{}-d{d1}.{d2}.{d3}",
            self.stem_channels, self.width_factor, self.bottleneck_blocks
        )
    }

    /// Channels of the three feature levels.
    pub fn level_channels(&self) -> [usize; 3] {
        self.planes.map(|p| p * EXPANSION)
    }

    /// Channels of the compact embedding.
    pub fn embedding_channels(&self) -> usize {
        2 * self.planes[2] * EXPANSION
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.stem_channels > 0
            && self.width_factor > 0
            && self.bottleneck_blocks > 0
            && self.planes.iter().all(|&p| p > 0)
            && self.encoder_blocks.iter().all(|&b| b > 0)
            && self.decoder_blocks.iter().all(|&b| b > 0);
        if positive {
            Ok(())
        } else {
            Err(Error::Config(
                "architecture widths and depths must be positive".into(),
            ))
        }
    }
}

/// Wide bottleneck residual block.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl Bottleneck {
    pub fn new(
        init: &mut Init,
        c_in: usize,
        planes: usize,
        width_factor: usize,
        stride: usize,
    ) -> Result<Self> {
        let width = planes * width_factor;
        let c_out = planes * EXPANSION;
        let k = WeightInit::KaimingFanOut;
        let downsample = if stride != 1 || c_in != c_out {
            let mut ds = init.pp("downsample");
            Some((
                Conv2d::new(&mut ds.pp(0), c_in, c_out, 1, stride, 0, false, k)?,
                BatchNorm::new(&mut ds.pp(1), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&mut init.pp("conv1"), c_in, width, 1, 1, 0, false, k)?,
            bn1: BatchNorm::new(&mut init.pp("bn1"), width)?,
            conv2: Conv2d::new(&mut init.pp("conv2"), width, width, 3, stride, 1, false, k)?,
            bn2: BatchNorm::new(&mut init.pp("bn2"), width)?,
            conv3: Conv2d::new(&mut init.pp("conv3"), width, c_out, 1, 1, 0, false, k)?,
            bn3: BatchNorm::new(&mut init.pp("bn3"), c_out)?,
            downsample,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.bn1.forward_relu(&self.conv1.forward(x)?, mode)?;
        let y = self.bn2.forward_relu(&self.conv2.forward(&y)?, mode)?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?, mode)?;
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        relu(&(y + identity)?)
    }
}

/// Builds a residual stage of `blocks` bottlenecks whose first block applies
/// `stride`.
pub fn residual_stage(
    init: &mut Init,
    c_in: usize,
    planes: usize,
    width_factor: usize,
    blocks: usize,
    stride: usize,
) -> Result<Vec<Bottleneck>> {
    let mut out = Vec::with_capacity(blocks);
    let mut c = c_in;
    for i in 0..blocks {
        out.push(Bottleneck::new(
            &mut init.pp(i),
            c,
            planes,
            width_factor,
            if i == 0 { stride } else { 1 },
        )?);
        c = planes * EXPANSION;
    }
    Ok(out)
}

/// Multi-scale features ordered from finest (level 1) to coarsest (level 3).
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 3],
}

impl FeaturePyramid {
    pub fn detach(&self) -> Self {
        Self {
            levels: self.levels.clone().map(|t| t.detach()),
        }
    }

    pub fn shapes(&self) -> [Vec<usize>; 3] {
        self.levels.clone().map(|t| t.dims().to_vec())
    }

    /// Splits a batch pyramid at `n` along the batch axis.
    pub fn split_batch(&self, n: usize) -> Result<(Self, Self)> {
        let b = self.levels[0].dim(0)?;
        let head = self.levels.clone().map(|t| t.narrow(0, 0, n));
        let tail = self.levels.clone().map(|t| t.narrow(0, n, b - n));
        let [a0, a1, a2] = head;
        let [b0, b1, b2] = tail;
        Ok((
            Self {
                levels: [a0?, a1?, a2?],
            },
            Self {
                levels: [b0?, b1?, b2?],
            },
        ))
    }
}

/// Stem plus the first three residual stages.
#[derive(Clone, Debug)]
pub struct Encoder {
    arch: ArchSpec,
    conv1: Conv2d,
    bn1: BatchNorm,
    stages: [Vec<Bottleneck>; 3],
    trainable: bool,
}

impl Encoder {
    pub fn new(init: &mut Init, arch: &ArchSpec, trainable: bool) -> Result<Self> {
        arch.validate()?;
        let k = WeightInit::KaimingFanOut;
        let conv1 = Conv2d::new(
            &mut init.pp("conv1"),
            3,
            arch.stem_channels,
            7,
            2,
            3,
            false,
            k,
        )?;
        let bn1 = BatchNorm::new(&mut init.pp("bn1"), arch.stem_channels)?;
        let mut c = arch.stem_channels;
        let mut stages: [Vec<Bottleneck>; 3] = Default::default();
        for (i, stage) in stages.iter_mut().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            *stage = residual_stage(
                &mut init.pp(format!("layer{}", i + 1)),
                c,
                arch.planes[i],
                arch.width_factor,
                arch.encoder_blocks[i],
                stride,
            )?;
            c = arch.planes[i] * EXPANSION;
        }
        Ok(Self {
            arch: arch.clone(),
            conv1,
            bn1,
            stages,
            trainable,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Returns the three feature levels at strides 4, 8 and 16. A frozen
    /// encoder returns detached tensors.
    pub fn encode(&self, x: &Tensor, mode: Mode) -> Result<FeaturePyramid> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape {
                context: "encoder input channels",
                left: x.dims().to_vec(),
                right: vec![3],
            });
        }
        if h % INPUT_DIVISOR != 0 || w % INPUT_DIVISOR != 0 {
            return Err(Error::IndivisibleInput {
                height: h,
                width: w,
                divisor: INPUT_DIVISOR,
            });
        }
        let mut y = self.bn1.forward_relu(&self.conv1.forward(x)?, mode)?;
        y = max_pool_3x3_s2(&y)?;
        let mut levels = Vec::with_capacity(3);
        for stage in &self.stages {
            for block in stage {
                y = block.forward(&y, mode)?;
            }
            levels.push(if self.trainable {
                y.clone()
            } else {
                y.detach()
            });
        }
        let [a, b, c]: [Tensor; 3] = levels.try_into().expect("three stages");
        Ok(FeaturePyramid { levels: [a, b, c] })
    }
}

/// Where encoder weights come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WeightSource {
    /// Seeded random initialization, calibrated on training data.
    Random,
    /// A safetensors file with torchvision parameter names.
    File(PathBuf),
    /// A key resolved to `<key>.safetensors` in the weight registry.
    Registry(String),
}

impl WeightSource {
    /// Parses `random`, `file:<path>` or a registry key.
    pub fn parse(s: &str) -> Self {
        if s == "random" {
            Self::Random
        } else if let Some(path) = s.strip_prefix("file:") {
            Self::File(PathBuf::from(path))
        } else {
            Self::Registry(s.to_string())
        }
    }

    pub fn is_random(&self) -> bool {
        matches!(self, Self::Random)
    }

    /// Resolves to a weight file path, if any.
    pub fn resolve(&self) -> Result<Option<PathBuf>> {
        let path = match self {
            Self::Random => return Ok(None),
            Self::File(p) => p.clone(),
            Self::Registry(key) => registry_dir()
                .ok_or_else(|| Error::UnknownWeights(key.clone()))?
                .join(format!("{key}.safetensors")),
        };
        if path.is_file() {
            Ok(Some(path))
        } else {
            Err(Error::MissingWeightFile(path))
        }
    }
}

fn registry_dir() -> Option<PathBuf> {
    if let Some(dir) = std::env::var_os(WEIGHTS_DIR_ENV) {
        return Some(PathBuf::from(dir));
    }
    std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache").join("ets").join("weights"))
}

/// Reads a safetensors file into a name map.
pub fn read_safetensors(path: &Path, device: &Device) -> Result<HashMap<String, Tensor>> {
    Ok(candle_core::safetensors::load(path, device)?)
}

/// Creates an encoder and its parameter store.
pub fn build_encoder(
    arch: &ArchSpec,
    weights: &WeightSource,
    init_seed: u64,
    trainable: bool,
    device: &Device,
    dtype: DType,
) -> Result<(Encoder, ParamStore)> {
    let mut store = ParamStore::new(device, dtype);
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let encoder = Encoder::new(&mut Init::new(&mut store, &mut rng), arch, trainable)?;
    if let Some(path) = weights.resolve()? {
        store.load(&read_safetensors(&path, device)?)?;
    }
    Ok((encoder, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchSpec {
        ArchSpec {
            stem_channels: 8,
            planes: [4, 8, 16],
            width_factor: 2,
            encoder_blocks: [1, 1, 1],
            bottleneck_blocks: 1,
            decoder_blocks: [1, 1, 1],
        }
    }

    #[test]
    fn pyramid_shapes_follow_strides() {
        let (enc, _) = build_encoder(
            &tiny(),
            &WeightSource::Random,
            0,
            false,
            &Device::Cpu,
            DType::F32,
        )
        .unwrap();
        let x = Tensor::zeros((2, 3, 64, 96), DType::F32, &Device::Cpu).unwrap();
        let p = enc.encode(&x, Mode::Eval).unwrap();
        assert_eq!(
            p.shapes(),
            [vec![2, 16, 16, 24], vec![2, 32, 8, 12], vec![2, 64, 4, 6]]
        );
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let (enc, _) = build_encoder(
            &tiny(),
            &WeightSource::Random,
            0,
            false,
            &Device::Cpu,
            DType::F32,
        )
        .unwrap();
        let x = Tensor::zeros((1, 3, 48, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            enc.encode(&x, Mode::Eval),
            Err(Error::IndivisibleInput { .. })
        ));
    }

    #[test]
    fn torchvision_names() {
        let (_, store) = build_encoder(
            &tiny(),
            &WeightSource::Random,
            0,
            false,
            &Device::Cpu,
            DType::F32,
        )
        .unwrap();
        let names: Vec<&str> = store.names().collect();
        for expected in [
            "conv1.weight",
            "bn1.running_var",
            "layer1.0.conv2.weight",
            "layer2.0.downsample.0.weight",
            "layer3.0.downsample.1.bias",
        ] {
            assert!(names.contains(&expected), "{expected}");
        }
    }

    #[test]
    fn ids() {
        assert_eq!(ArchSpec::wide_resnet50_2().id(), "wide_resnet50_2");
        assert_ne!(tiny().id(), "wide_resnet50_2");
        assert_eq!(
            WeightSource::parse("file:/x.st"),
            WeightSource::File("/x.st".into())
        );
        assert_eq!(WeightSource::parse("random"), WeightSource::Random);
    }
}
