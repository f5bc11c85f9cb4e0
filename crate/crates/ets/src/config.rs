//! Run configuration: one nested document covering data, synthesis, model,
//! training and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backbone::{ArchSpec, DEFAULT_WEIGHTS};
use crate::error::{Error, Result};
use crate::losses::MaskPooling;
use crate::model::StudentOptions;
use crate::synthesis::SynthesisConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub category: String,
    /// JSON-lines manifest replacing the folder layout.
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchSpec,
    /// `random`, `file:<path>` or a weight registry key.
    pub weights: String,
    pub init_seed: u64,
    pub student: StudentOptions,
    /// Run the teacher's batch norm on running statistics during training,
    /// so teacher and expert agree exactly at initialization.
    pub teacher_norm_eval: bool,
    /// Training images used to set batch-norm statistics of randomly
    /// initialized encoders.
    pub calibration_images: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: ArchSpec::default(),
            weights: DEFAULT_WEIGHTS.to_string(),
            init_seed: 0,
            student: StudentOptions::default(),
            teacher_norm_eval: true,
            calibration_images: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iterations: u64,
    pub teacher_lr: f64,
    pub student_lr: f64,
    pub adam_betas: [f64; 2],
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 writes only the
    /// final one.
    pub checkpoint_every: u64,
    /// Validate every this many iterations; 0 disables validation.
    pub eval_every: u64,
    /// Stop after this many validations without improvement; 0 never stops
    /// early.
    pub patience: u64,
    /// Manifest listing validation images with masks.
    pub validation_manifest: Option<PathBuf>,
    pub image_size: usize,
    pub mask_pooling: MaskPooling,
    pub update_teacher: bool,
    pub update_student: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_iterations: 10_000,
            teacher_lr: 1e-4,
            student_lr: 5e-3,
            adam_betas: [0.5, 0.999],
            seed: 0,
            checkpoint_every: 1000,
            eval_every: 0,
            patience: 0,
            validation_manifest: None,
            image_size: 256,
            mask_pooling: MaskPooling::Area,
            update_teacher: true,
            update_student: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.teacher_lr > 0.0 && self.student_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.image_size == 0
            || !self
                .image_size
                .is_multiple_of(crate::backbone::INPUT_DIVISOR)
        {
            return Err(Error::Config(format!(
                "train.image_size must be a positive multiple of {}",
                crate::backbone::INPUT_DIVISOR
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sigma: f64,
    pub fpr_limit: f64,
    pub max_thresholds: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sigma: ets_core::anomaly_map::DEFAULT_SIGMA,
            fpr_limit: ets_core::pro::DEFAULT_FPR_LIMIT,
            max_thresholds: ets_core::pro::DEFAULT_MAX_THRESHOLDS,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synthesis: SynthesisConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn unknown_keys(given: &Value, known: &Value, path: &str, out: &mut Vec<String>) {
    if let (Value::Object(g), Value::Object(k)) = (given, known) {
        for (key, value) in g {
            let full = if path.is_empty() {
                key.clone()
            } else {
                format!("{path}.{key}")
            };
            match k.get(key) {
                Some(sub) => unknown_keys(value, sub, &full, out),
                None => out.push(full),
            }
        }
    }
}

impl RunConfig {
    /// Parses YAML or JSON (JSON is valid YAML), reporting every unknown key.
    pub fn parse(text: &str) -> Result<Self> {
        let yaml: serde_yaml::Value = serde_yaml::from_str(text)?;
        let given: Value = match yaml {
            serde_yaml::Value::Null => Value::Object(Default::default()),
            other => serde_json::to_value(other)?,
        };
        let known = serde_json::to_value(Self::default())?;
        let mut offenders = Vec::new();
        unknown_keys(&given, &known, "", &mut offenders);
        if !offenders.is_empty() {
            return Err(Error::UnknownKeys(offenders));
        }
        Ok(serde_json::from_value(given)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(Error::io(path))?)
    }

    pub fn to_yaml(&self) -> Result<String> {
        Ok(serde_yaml::to_string(self)?)
    }

    pub fn to_json_value(&self) -> Result<Value> {
        Ok(serde_json::to_value(self)?)
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.arch.validate()?;
        self.synthesis.params().validate()?;
        if !(self.eval.fpr_limit > 0.0 && self.eval.fpr_limit <= 1.0) {
            return Err(Error::Config("eval.fpr_limit must lie in (0, 1]".into()));
        }
        Ok(())
    }
}
