//! Teacher sensitivity and student denoising objectives.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::model::COSINE_EPS;
use crate::nn::cosine_along_channels;

/// Reduction used to bring the ground-truth mask to feature resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPooling {
    /// Mean over each cell: a soft mask in [0, 1].
    #[default]
    Area,
    /// Any positive pixel marks the cell.
    Max,
}

/// `1 - cos` over channels at every location: `(B, C, H, W) -> (B, H, W)`.
pub fn cosine_distance_map(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((1.0 - cosine_along_channels(a, b, COSINE_EPS)?)?)
}

/// Pools a `(B, 1, H, W)` mask to `(B, h, w)`; `h` and `w` must divide the
/// input size.
pub fn downsample_mask(mask: &Tensor, h: usize, w: usize, pooling: MaskPooling) -> Result<Tensor> {
    let (_, c, mh, mw) = mask.dims4()?;
    if c != 1 {
        return Err(Error::Shape {
            context: "mask channels",
            left: mask.dims().to_vec(),
            right: vec![1],
        });
    }
    if h == 0 || w == 0 || mh % h != 0 || mw % w != 0 {
        return Err(Error::Shape {
            context: "mask downsampling",
            left: vec![mh, mw],
            right: vec![h, w],
        });
    }
    let k = (mh / h, mw / w);
    let pooled = if k == (1, 1) {
        mask.clone()
    } else {
        match pooling {
            MaskPooling::Area => mask.avg_pool2d_with_stride(k, k)?,
            MaskPooling::Max => mask.max_pool2d_with_stride(k, k)?,
        }
    };
    Ok(pooled.squeeze(1)?)
}

/// The two halves of the teacher loss, as scalar tensors.
#[derive(Clone, Debug)]
pub struct TeacherLoss {
    pub normal: Tensor,
    pub anomalous: Tensor,
}

impl TeacherLoss {
    pub fn total(&self) -> Result<Tensor> {
        Ok((&self.normal + &self.anomalous)?)
    }
}

/// Teacher loss: normal features should match the expert, synthetic
/// anomalies should be pushed away from it in proportion to the mask.
pub fn teacher_loss(
    teacher_normal: &FeaturePyramid,
    teacher_anomalous: &FeaturePyramid,
    expert_normal: &FeaturePyramid,
    mask: &Tensor,
    pooling: MaskPooling,
) -> Result<TeacherLoss> {
    let mut normal = Vec::with_capacity(3);
    let mut anomalous = Vec::with_capacity(3);
    for i in 0..3 {
        let e = expert_normal.levels[i].detach();
        let d_n = cosine_distance_map(&teacher_normal.levels[i], &e)?;
        let d_a = cosine_distance_map(&teacher_anomalous.levels[i], &e)?;
        let (_, h, w) = d_a.dims3()?;
        let m = downsample_mask(mask, h, w, pooling)?;
        if m.dims() != d_a.dims() {
            return Err(Error::Shape {
                context: "teacher loss mask",
                left: m.dims().to_vec(),
                right: d_a.dims().to_vec(),
            });
        }
        normal.push(d_n.abs()?.mean_all()?);
        anomalous.push((d_a - m)?.abs()?.mean_all()?);
    }
    Ok(TeacherLoss {
        normal: Tensor::stack(&normal, 0)?.sum_all()?,
        anomalous: Tensor::stack(&anomalous, 0)?.sum_all()?,
    })
}

/// Reshapes `(B, ...)` to `(B, N)`.
pub fn flatten_feature(f: &Tensor) -> Result<Tensor> {
    Ok(f.flatten_from(1)?)
}

fn flat_cosine_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            context: "student loss",
            left: a.dims().to_vec(),
            right: b.dims().to_vec(),
        });
    }
    let cos = cosine_along_channels(&flatten_feature(a)?, &flatten_feature(b)?, COSINE_EPS)?;
    Ok((1.0 - cos)?.mean_all()?)
}

/// Student loss: both student reconstructions should match the expert and
/// the teacher on the normal image, compared as whole flattened features.
pub fn student_loss(
    student_normal: &FeaturePyramid,
    student_anomalous: &FeaturePyramid,
    expert_normal: &FeaturePyramid,
    teacher_normal: &FeaturePyramid,
) -> Result<Tensor> {
    let mut terms = Vec::with_capacity(12);
    for i in 0..3 {
        for target in [&expert_normal.levels[i], &teacher_normal.levels[i]] {
            let target = target.detach();
            terms.push(flat_cosine_distance(&student_normal.levels[i], &target)?);
            terms.push(flat_cosine_distance(&student_anomalous.levels[i], &target)?);
        }
    }
    Ok(Tensor::stack(&terms, 0)?.sum_all()?)
}
