//! Inference: anomaly maps from teacher/student disagreement, and the
//! image- and pixel-level evaluation metrics.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ets_core::{
    assemble_anomaly_map, auroc, average_precision, label_regions, pro, AnomalyMap, Grid, Image,
};
use serde::{Deserialize, Serialize};

use crate::backbone::{build_encoder, Encoder, FeaturePyramid, WeightSource};
use crate::checkpoint::Checkpoint;
use crate::config::{EvalConfig, RunConfig};
use crate::data::{images_to_tensor, Sample};
use crate::error::{Error, Result};
use crate::losses::cosine_distance_map;
use crate::model::{build_student, Student};
use crate::nn::{Mode, ParamStore};

/// Per-image anomaly maps for a batch of teacher/student pyramids, at
/// `height x width`.
pub fn anomaly_maps(
    teacher: &FeaturePyramid,
    student: &FeaturePyramid,
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<Vec<AnomalyMap>> {
    let mut per_level = Vec::with_capacity(3);
    for (t, s) in teacher.levels.iter().zip(&student.levels) {
        let d = cosine_distance_map(t, s)?.to_dtype(DType::F32)?;
        let (b, h, w) = d.dims3()?;
        let values: Vec<f32> = d.flatten_all()?.to_vec1()?;
        let grids: Vec<Grid> = values
            .chunks(h * w)
            .map(|c| Grid::new(h, w, c.to_vec()))
            .collect::<ets_core::Result<_>>()?;
        debug_assert_eq!(grids.len(), b);
        per_level.push(grids);
    }
    let batch = per_level[0].len();
    (0..batch)
        .map(|i| {
            let levels: Vec<Grid> = per_level.iter().map(|l| l[i].clone()).collect();
            Ok(assemble_anomaly_map(&levels, height, width, sigma)?)
        })
        .collect()
}

/// Frozen teacher and student for inference.
#[derive(Debug)]
pub struct Scorer {
    pub config: RunConfig,
    teacher: Encoder,
    _teacher_store: ParamStore,
    student: Student,
    _student_store: ParamStore,
    device: Device,
}

impl Scorer {
    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        let config: RunConfig = serde_json::from_value(ck.config.clone())?;
        ck.expect_arch(&config.model.arch.id())?;
        let m = &config.model;
        let (teacher, teacher_store) = build_encoder(
            &m.arch,
            &WeightSource::Random,
            m.init_seed,
            false,
            device,
            DType::F32,
        )?;
        let (student, student_store) =
            build_student(&m.arch, &m.student, m.init_seed, device, DType::F32)?;
        teacher_store.load(&ck.group("teacher/"))?;
        student_store.load(&ck.group("student/"))?;
        Ok(Self {
            config,
            teacher,
            _teacher_store: teacher_store,
            student,
            _student_store: student_store,
            device: device.clone(),
        })
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, device)
    }

    pub fn image_size(&self) -> usize {
        self.config.train.image_size
    }

    pub fn score(&self, images: &[&Image]) -> Result<Vec<AnomalyMap>> {
        score_images(
            &self.teacher,
            &self.student,
            images,
            &self.config.eval,
            &self.device,
        )
    }
}

/// Anomaly maps for `images`, computed in batches of `eval.batch_size`.
pub fn score_images(
    teacher: &Encoder,
    student: &Student,
    images: &[&Image],
    eval: &EvalConfig,
    device: &Device,
) -> Result<Vec<AnomalyMap>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(eval.batch_size.max(1)) {
        let (_, h, w) = chunk[0].shape();
        let x: Tensor = images_to_tensor(chunk, device, DType::F32)?;
        let t = teacher.encode(&x, Mode::Eval)?.detach();
        let s = student.forward(&t, Mode::Eval)?.detach();
        out.extend(anomaly_maps(&t, &s, h, w, eval.sigma)?);
    }
    Ok(out)
}

/// The five reported metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub i_auc: f64,
    pub i_ap: f64,
    pub p_auc: f64,
    pub p_ap: f64,
    pub p_pro: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: Metrics,
    pub n_images: usize,
    pub n_pixels: usize,
    pub n_regions: usize,
}

/// Pools image scores and pixels across the whole set.
pub fn compute_metrics(
    maps: &[AnomalyMap],
    labels: &[u8],
    masks: &[&Grid],
    eval: &EvalConfig,
) -> Result<MetricsReport> {
    if maps.len() != labels.len() || maps.len() != masks.len() {
        return Err(ets_core::Error::LengthMismatch {
            left: maps.len(),
            right: labels.len().min(masks.len()),
        }
        .into());
    }
    let image_scores: Vec<f32> = maps.iter().map(|m| m.image_score).collect();
    let image_labels: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    let mut pixel_scores = Vec::new();
    let mut pixel_labels = Vec::new();
    for (m, gt) in maps.iter().zip(masks) {
        if m.map.shape() != gt.shape() {
            return Err(Error::Shape {
                context: "anomaly map vs mask",
                left: vec![m.map.height(), m.map.width()],
                right: vec![gt.height(), gt.width()],
            });
        }
        pixel_scores.extend_from_slice(m.map.data());
        pixel_labels.extend(gt.data().iter().map(|&v| v > 0.5));
    }
    let score_maps: Vec<Grid> = maps.iter().map(|m| m.map.clone()).collect();
    let gt_masks: Vec<Grid> = masks.iter().map(|&g| g.clone()).collect();
    let n_regions = gt_masks.iter().map(|g| label_regions(g).count()).sum();
    Ok(MetricsReport {
        metrics: Metrics {
            i_auc: auroc(&image_scores, &image_labels)?,
            i_ap: average_precision(&image_scores, &image_labels)?,
            p_auc: auroc(&pixel_scores, &pixel_labels)?,
            p_ap: average_precision(&pixel_scores, &pixel_labels)?,
            p_pro: pro(&score_maps, &gt_masks, eval.fpr_limit, eval.max_thresholds)?,
        },
        n_images: maps.len(),
        n_pixels: pixel_scores.len(),
        n_regions,
    })
}

/// Scores a labelled test set and computes all metrics.
pub fn evaluate(scorer: &Scorer, samples: &[Sample]) -> Result<(MetricsReport, Vec<AnomalyMap>)> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let maps = scorer.score(&images)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let masks: Vec<&Grid> = samples.iter().map(|s| &s.mask).collect();
    Ok((
        compute_metrics(&maps, &labels, &masks, &scorer.config.eval)?,
        maps,
    ))
}

/// `report.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub category: String,
    pub metrics: Metrics,
    pub config_digest: String,
    pub n_images: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub min: f32,
    pub max: f32,
    pub image_score: f32,
}

/// Writes an 8-bit grayscale PNG, min-max normalized, plus a JSON sidecar
/// with the raw range next to it.
pub fn write_heatmap(map: &AnomalyMap, path: &Path) -> Result<()> {
    let (min, max) = (map.map.min(), map.map.max());
    let span = if max > min { max - min } else { 1.0 };
    let pixels: Vec<u8> = map
        .map
        .data()
        .iter()
        .map(|v| ((v - min) / span * 255.0).round() as u8)
        .collect();
    let (h, w) = map.map.shape();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .expect("buffer matches dimensions")
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    let sidecar = HeatmapSidecar {
        min,
        max,
        image_score: map.image_score,
    };
    let json_path = path.with_extension("json");
    fs::write(&json_path, serde_json::to_vec_pretty(&sidecar)?).map_err(Error::io(&json_path))
}
