//! Student network: compact embedding, mirrored decoder and the guided
//! information injection blocks between decoder stages.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{residual_stage, ArchSpec, Bottleneck, FeaturePyramid, EXPANSION};
use crate::error::{Error, Result};
use crate::nn::{
    cosine_along_channels, relu, BatchNorm, Conv2d, ConvTranspose2d, Init, Mode, ParamStore,
    WeightInit,
};

/// Floor on the norm product in every cosine computation.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentOptions {
    /// Insert guided information injection before the two finer decoder
    /// stages. When off the decoder stages are chained directly.
    pub gii: bool,
    /// Follow each injection convolution with batch norm and ReLU.
    pub gii_norm_act: bool,
}

impl Default for StudentOptions {
    fn default() -> Self {
        Self {
            gii: true,
            gii_norm_act: false,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBnRelu {
    fn new(init: &mut Init, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(
                &mut init.pp("conv"),
                c_in,
                c_out,
                3,
                stride,
                1,
                false,
                WeightInit::KaimingFanOut,
            )?,
            bn: BatchNorm::new(&mut init.pp("bn"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.bn.forward_relu(&self.conv.forward(x)?, mode)
    }
}

/// One-class bottleneck embedding: multi-scale fusion of the three teacher
/// levels followed by a strided residual stage.
#[derive(Clone, Debug)]
pub struct Ocbe {
    l1_down1: ConvBnRelu,
    l1_down2: ConvBnRelu,
    l2_down: ConvBnRelu,
    blocks: Vec<Bottleneck>,
    channels: [usize; 3],
}

impl Ocbe {
    pub fn new(init: &mut Init, arch: &ArchSpec) -> Result<Self> {
        let [c1, c2, c3] = arch.level_channels();
        let mut mff = init.pp("mff");
        let l1_down1 = ConvBnRelu::new(&mut mff.pp("l1_down1"), c1, c2, 2)?;
        let l1_down2 = ConvBnRelu::new(&mut mff.pp("l1_down2"), c2, c3, 2)?;
        let l2_down = ConvBnRelu::new(&mut mff.pp("l2_down"), c2, c3, 2)?;
        let blocks = residual_stage(
            &mut init.pp("oce"),
            3 * c3,
            2 * arch.planes[2],
            arch.width_factor,
            arch.bottleneck_blocks,
            2,
        )?;
        Ok(Self {
            l1_down1,
            l1_down2,
            l2_down,
            blocks,
            channels: [c1, c2, c3],
        })
    }

    pub fn forward(&self, features: &FeaturePyramid, mode: Mode) -> Result<Tensor> {
        check_pyramid(features, self.channels)?;
        let [f1, f2, f3] = &features.levels;
        let a = self
            .l1_down2
            .forward(&self.l1_down1.forward(f1, mode)?, mode)?;
        let b = self.l2_down.forward(f2, mode)?;
        let mut y = Tensor::cat(&[&a, &b, f3], 1)?;
        for block in &self.blocks {
            y = block.forward(&y, mode)?;
        }
        Ok(y)
    }
}

/// Checks that levels share a batch size, carry the expected channels and
/// halve in resolution from one level to the next.
pub fn check_pyramid(features: &FeaturePyramid, channels: [usize; 3]) -> Result<()> {
    let dims: Vec<(usize, usize, usize, usize)> = features
        .levels
        .iter()
        .map(|t| t.dims4())
        .collect::<candle_core::Result<_>>()?;
    let (b, _, h, w) = dims[0];
    let ok = dims.iter().enumerate().all(|(i, &(bi, ci, hi, wi))| {
        bi == b
            && ci == channels[i]
            && hi << i == h
            && wi << i == w
            && h % (1 << i) == 0
            && w % (1 << i) == 0
    });
    if ok {
        Ok(())
    } else {
        Err(Error::Shape {
            context: "feature pyramid",
            left: features
                .levels
                .iter()
                .flat_map(|t| t.dims().to_vec())
                .collect(),
            right: channels.to_vec(),
        })
    }
}

/// Decoder block mirroring the wide bottleneck; a stride of 2 upsamples with
/// 2x2 transposed convolutions.
#[derive(Clone, Debug)]
pub struct DeBottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2dOrUp,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    upsample: Option<(ConvTranspose2d, BatchNorm)>,
}

#[derive(Clone, Debug)]
enum Conv2dOrUp {
    Conv(Conv2d),
    Up(ConvTranspose2d),
}

impl DeBottleneck {
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
        let conv2 = if stride == 2 {
            Conv2dOrUp::Up(ConvTranspose2d::new(
                &mut init.pp("conv2"),
                width,
                width,
                2,
            )?)
        } else {
            Conv2dOrUp::Conv(Conv2d::new(
                &mut init.pp("conv2"),
                width,
                width,
                3,
                1,
                1,
                false,
                k,
            )?)
        };
        let upsample = if stride != 1 || c_in != c_out {
            let mut up = init.pp("upsample");
            Some((
                ConvTranspose2d::new(&mut up.pp(0), c_in, c_out, stride)?,
                BatchNorm::new(&mut up.pp(1), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&mut init.pp("conv1"), c_in, width, 1, 1, 0, false, k)?,
            bn1: BatchNorm::new(&mut init.pp("bn1"), width)?,
            conv2,
            bn2: BatchNorm::new(&mut init.pp("bn2"), width)?,
            conv3: Conv2d::new(&mut init.pp("conv3"), width, c_out, 1, 1, 0, false, k)?,
            bn3: BatchNorm::new(&mut init.pp("bn3"), c_out)?,
            upsample,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.bn1.forward_relu(&self.conv1.forward(x)?, mode)?;
        let y = match &self.conv2 {
            Conv2dOrUp::Conv(c) => c.forward(&y)?,
            Conv2dOrUp::Up(c) => c.forward(&y)?,
        };
        let y = self.bn2.forward_relu(&y, mode)?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?, mode)?;
        let identity = match &self.upsample {
            Some((up, bn)) => bn.forward(&up.forward(x)?, mode)?,
            None => x.clone(),
        };
        relu(&(y + identity)?)
    }
}

fn decoder_stage(
    init: &mut Init,
    c_in: usize,
    planes: usize,
    width_factor: usize,
    blocks: usize,
) -> Result<Vec<DeBottleneck>> {
    let mut out = Vec::with_capacity(blocks);
    let mut c = c_in;
    for i in 0..blocks {
        out.push(DeBottleneck::new(
            &mut init.pp(i),
            c,
            planes,
            width_factor,
            if i == 0 { 2 } else { 1 },
        )?);
        c = planes * EXPANSION;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct GiiConv {
    conv: Conv2d,
    bn: Option<BatchNorm>,
}

impl GiiConv {
    fn new(
        init: &mut Init,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        norm_act: bool,
    ) -> Result<Self> {
        let conv = Conv2d::new(
            &mut init.pp("conv"),
            c_in,
            c_out,
            kernel,
            1,
            kernel / 2,
            true,
            WeightInit::FanInUniform,
        )?;
        let bn = if norm_act {
            Some(BatchNorm::new(&mut init.pp("bn"), c_out)?)
        } else {
            None
        };
        Ok(Self { conv, bn })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        match &self.bn {
            Some(bn) => bn.forward_relu(&y, mode),
            None => Ok(y),
        }
    }
}

/// Intermediate tensors of one injection, for inspection.
#[derive(Clone, Debug)]
pub struct GiiTrace {
    pub lifted: Tensor,
    pub fused: Tensor,
    pub similarity: Tensor,
    pub attended: Tensor,
    pub output: Tensor,
}

/// Guided information injection: blends teacher guidance into the student
/// path wherever the two disagree.
#[derive(Clone, Debug)]
pub struct Gii {
    lift: GiiConv,
    fuse: GiiConv,
    attend: GiiConv,
    out: GiiConv,
}

impl Gii {
    /// `c_fine` channels of the finer teacher level, `c` of the coarser one.
    pub fn new(init: &mut Init, c_fine: usize, c: usize, norm_act: bool) -> Result<Self> {
        Ok(Self {
            lift: GiiConv::new(&mut init.pp("lift"), c_fine, c, 1, norm_act)?,
            fuse: GiiConv::new(&mut init.pp("fuse"), c, c, 3, norm_act)?,
            attend: GiiConv::new(&mut init.pp("attend"), c, c, 3, norm_act)?,
            out: GiiConv::new(&mut init.pp("out"), 2 * c, c, 3, norm_act)?,
        })
    }

    pub fn forward(
        &self,
        t_fine: &Tensor,
        t_coarse: &Tensor,
        s_coarse: &Tensor,
        mode: Mode,
    ) -> Result<Tensor> {
        Ok(self.trace(t_fine, t_coarse, s_coarse, None, mode)?.output)
    }

    /// Runs the block, optionally replacing the similarity map, which must
    /// have shape `(B, 1, H, W)`.
    pub fn trace(
        &self,
        t_fine: &Tensor,
        t_coarse: &Tensor,
        s_coarse: &Tensor,
        similarity: Option<&Tensor>,
        mode: Mode,
    ) -> Result<GiiTrace> {
        let (_, _, h, w) = t_coarse.dims4()?;
        if t_fine.dim(2)? != 2 * h || t_fine.dim(3)? != 2 * w || s_coarse.dims() != t_coarse.dims()
        {
            return Err(Error::Shape {
                context: "guided injection inputs",
                left: t_fine.dims().to_vec(),
                right: t_coarse.dims().to_vec(),
            });
        }
        let lifted = self.lift.forward(&t_fine.avg_pool2d(2)?, mode)?;
        let fused = self.fuse.forward(&(&lifted + t_coarse)?, mode)?;
        let similarity = match similarity {
            Some(s) => s.clone(),
            None => cosine_along_channels(t_coarse, s_coarse, COSINE_EPS)?.unsqueeze(1)?,
        };
        let inv = (1.0 - &similarity)?;
        let mixed = (fused.broadcast_mul(&similarity)? + s_coarse.broadcast_mul(&inv)?)?;
        let attended = self.attend.forward(&mixed, mode)?;
        let output = self
            .out
            .forward(&Tensor::cat(&[&attended, s_coarse], 1)?, mode)?;
        Ok(GiiTrace {
            lifted,
            fused,
            similarity,
            attended,
            output,
        })
    }
}

/// Student: embedding, three decoder stages (coarse to fine), optional
/// injections before the second and third stage.
#[derive(Clone, Debug)]
pub struct Student {
    arch: ArchSpec,
    options: StudentOptions,
    ocbe: Ocbe,
    stages: [Vec<DeBottleneck>; 3],
    gii: Option<[Gii; 2]>,
}

impl Student {
    pub fn new(init: &mut Init, arch: &ArchSpec, options: &StudentOptions) -> Result<Self> {
        arch.validate()?;
        let ocbe = Ocbe::new(&mut init.pp("ocbe"), arch)?;
        let [c1, c2, c3] = arch.level_channels();
        let mut dec = init.pp("decoder");
        let s3 = decoder_stage(
            &mut dec.pp("s3"),
            arch.embedding_channels(),
            arch.planes[2],
            arch.width_factor,
            arch.decoder_blocks[0],
        )?;
        let s2 = decoder_stage(
            &mut dec.pp("s2"),
            c3,
            arch.planes[1],
            arch.width_factor,
            arch.decoder_blocks[1],
        )?;
        let s1 = decoder_stage(
            &mut dec.pp("s1"),
            c2,
            arch.planes[0],
            arch.width_factor,
            arch.decoder_blocks[2],
        )?;
        let gii = if options.gii {
            let mut g = init.pp("gii");
            Some([
                Gii::new(&mut g.pp("l2"), c2, c3, options.gii_norm_act)?,
                Gii::new(&mut g.pp("l1"), c1, c2, options.gii_norm_act)?,
            ])
        } else {
            None
        };
        Ok(Self {
            arch: arch.clone(),
            options: options.clone(),
            ocbe,
            stages: [s3, s2, s1],
            gii,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn options(&self) -> &StudentOptions {
        &self.options
    }

    pub fn gii(&self) -> Option<&[Gii; 2]> {
        self.gii.as_ref()
    }

    /// Compact embedding of a teacher pyramid.
    pub fn embed(&self, teacher: &FeaturePyramid, mode: Mode) -> Result<Tensor> {
        self.ocbe.forward(&teacher.detach(), mode)
    }

    /// Reconstructs the teacher pyramid. Teacher features are treated as
    /// constants.
    pub fn forward(&self, teacher: &FeaturePyramid, mode: Mode) -> Result<FeaturePyramid> {
        let t = teacher.detach();
        let [t1, t2, t3] = &t.levels;
        let run = |stage: &[DeBottleneck], x: Tensor| -> Result<Tensor> {
            stage.iter().try_fold(x, |y, b| b.forward(&y, mode))
        };
        let e = self.ocbe.forward(&t, mode)?;
        let s3 = run(&self.stages[0], e)?;
        let x = match &self.gii {
            Some(g) => g[0].forward(t2, t3, &s3, mode)?,
            None => s3.clone(),
        };
        let s2 = run(&self.stages[1], x)?;
        let x = match &self.gii {
            Some(g) => g[1].forward(t1, t2, &s2, mode)?,
            None => s2.clone(),
        };
        let s1 = run(&self.stages[2], x)?;
        Ok(FeaturePyramid {
            levels: [s1, s2, s3],
        })
    }
}

pub fn build_student(
    arch: &ArchSpec,
    options: &StudentOptions,
    init_seed: u64,
    device: &Device,
    dtype: DType,
) -> Result<(Student, ParamStore)> {
    let mut store = ParamStore::new(device, dtype);
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let student = Student::new(&mut Init::new(&mut store, &mut rng), arch, options)?;
    Ok((student, store))
}
