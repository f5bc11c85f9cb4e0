//! Dual-optimizer training: expert, teacher and student assembled from a
//! config, one joint backward per iteration, checkpointing and an optional
//! validation hook.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use ets_core::Image;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_encoder, Encoder, WeightSource};
use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, RunConfig};
use crate::data::{images_to_tensor, masks_to_tensor};
use crate::error::{Error, Result};
use crate::losses::{student_loss, teacher_loss};
use crate::model::{build_student, Student};
use crate::nn::{Mode, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::synthesis::Synthesizer;

/// Loss values of one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub l_te_n: f64,
    pub l_te_a: f64,
    pub l_s: f64,
    /// Seconds since the start of `fit`.
    pub wall_clock: f64,
}

/// The three networks of one run.
#[derive(Debug)]
pub struct Networks {
    pub expert: Encoder,
    pub expert_store: ParamStore,
    pub teacher: Encoder,
    pub teacher_store: ParamStore,
    pub student: Student,
    pub student_store: ParamStore,
}

impl Networks {
    /// Builds all three networks. The expert is a frozen copy of the
    /// teacher's initialization.
    pub fn new(model: &ModelConfig, device: &Device) -> Result<Self> {
        Self::with_weights(model, &WeightSource::parse(&model.weights), device)
    }

    pub fn with_weights(
        model: &ModelConfig,
        weights: &WeightSource,
        device: &Device,
    ) -> Result<Self> {
        let dtype = DType::F32;
        let (teacher, teacher_store) =
            build_encoder(&model.arch, weights, model.init_seed, true, device, dtype)?;
        let (expert, expert_store) =
            build_encoder(&model.arch, weights, model.init_seed, false, device, dtype)?;
        expert_store.copy_from(&teacher_store)?;
        let (student, student_store) = build_student(
            &model.arch,
            &model.student,
            model.init_seed.wrapping_add(1),
            device,
            dtype,
        )?;
        Ok(Self {
            expert,
            expert_store,
            teacher,
            teacher_store,
            student,
            student_store,
        })
    }

    /// Sets the teacher's batch-norm statistics from `images` and copies the
    /// result into the expert.
    pub fn calibrate(&self, images: &[&Image]) -> Result<()> {
        let x = images_to_tensor(
            images,
            self.teacher_store.device(),
            self.teacher_store.dtype(),
        )?;
        self.teacher.encode(&x, Mode::Calibrate)?;
        self.expert_store.copy_from(&self.teacher_store)
    }
}

/// Everything that evolves during training.
#[derive(Debug)]
pub struct TrainState {
    pub config: RunConfig,
    pub nets: Networks,
    pub teacher_opt: Adam,
    pub student_opt: Adam,
    pub iteration: u64,
    synthesizer: Synthesizer,
}

fn tensor_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl TrainState {
    /// Fresh state. Randomly initialized encoders are calibrated on up to
    /// `model.calibration_images` of `train_images`.
    pub fn new(config: RunConfig, train_images: &[&Image], device: &Device) -> Result<Self> {
        config.validate()?;
        let nets = Networks::new(&config.model, device)?;
        if WeightSource::parse(&config.model.weights).is_random() && !train_images.is_empty() {
            let n = config.model.calibration_images.clamp(1, train_images.len());
            nets.calibrate(&train_images[..n])?;
        }
        let synthesizer = Synthesizer::new(&config.synthesis, config.train.image_size)?;
        Self::assemble(config, nets, synthesizer)
    }

    fn assemble(config: RunConfig, nets: Networks, synthesizer: Synthesizer) -> Result<Self> {
        let [beta1, beta2] = config.train.adam_betas;
        let adam = |lr| AdamConfig {
            lr,
            beta1,
            beta2,
            ..AdamConfig::default()
        };
        let teacher_opt = Adam::new(nets.teacher_store.params(), adam(config.train.teacher_lr))?;
        let student_opt = Adam::new(nets.student_store.params(), adam(config.train.student_lr))?;
        Ok(Self {
            config,
            nets,
            teacher_opt,
            student_opt,
            iteration: 0,
            synthesizer,
        })
    }

    /// Replaces the synthesizer, for callers that supply their own textures.
    pub fn set_synthesizer(&mut self, synthesizer: Synthesizer) {
        self.synthesizer = synthesizer;
    }

    pub fn synthesizer(&self) -> &Synthesizer {
        &self.synthesizer
    }

    fn teacher_mode(&self) -> Mode {
        if self.config.model.teacher_norm_eval {
            Mode::Eval
        } else {
            Mode::Train
        }
    }

    /// Random stream for the synthesis of one iteration.
    fn iteration_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.config.synthesis.seed ^ self.config.train.seed.rotate_left(32),
        );
        rng.set_stream(self.iteration);
        rng
    }

    /// One iteration on a batch of normal images.
    pub fn train_step(&mut self, batch: &[&Image]) -> Result<LossRecord> {
        let mut rng = self.iteration_rng();
        let mut anomalous = Vec::with_capacity(batch.len());
        let mut masks = Vec::with_capacity(batch.len());
        for image in batch {
            let s = self.synthesizer.sample(image, &mut rng)?;
            anomalous.push(s.anomalous);
            masks.push(s.mask);
        }
        let device = self.nets.teacher_store.device().clone();
        let dtype = self.nets.teacher_store.dtype();
        let x_n = images_to_tensor(batch, &device, dtype)?;
        let x_a = images_to_tensor(&anomalous.iter().collect::<Vec<_>>(), &device, dtype)?;
        let m = masks_to_tensor(&masks.iter().collect::<Vec<_>>(), &device, dtype)?;

        let nets = &self.nets;
        let e_n = nets.expert.encode(&x_n, Mode::Eval)?.detach();
        let t_n = nets.teacher.encode(&x_n, self.teacher_mode())?;
        let t_a = nets.teacher.encode(&x_a, self.teacher_mode())?;
        let s_n = nets.student.forward(&t_n, Mode::Train)?;
        let s_a = nets.student.forward(&t_a, Mode::Train)?;

        let lte = teacher_loss(&t_n, &t_a, &e_n, &m, self.config.train.mask_pooling)?;
        let ls = student_loss(&s_n, &s_a, &e_n, &t_n)?;
        let (l_te_n, l_te_a, l_s) = (
            tensor_scalar(&lte.normal)?,
            tensor_scalar(&lte.anomalous)?,
            tensor_scalar(&ls)?,
        );
        if !(l_te_n.is_finite() && l_te_a.is_finite() && l_s.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                teacher_normal: l_te_n,
                teacher_anomalous: l_te_a,
                student: l_s,
            });
        }
        let grads = (lte.total()? + ls)?.backward()?;
        if self.config.train.update_teacher {
            self.teacher_opt.step(&grads)?;
        }
        if self.config.train.update_student {
            self.student_opt.step(&grads)?;
        }
        let record = LossRecord {
            iteration: self.iteration,
            l_te_n,
            l_te_a,
            l_s,
            wall_clock: 0.0,
        };
        self.iteration += 1;
        Ok(record)
    }

    /// Serializes the networks, both optimizers and the config.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = BTreeMap::new();
        for (prefix, store) in [
            ("teacher/", &self.nets.teacher_store),
            ("expert/", &self.nets.expert_store),
            ("student/", &self.nets.student_store),
        ] {
            for (name, t) in store.snapshot()? {
                tensors.insert(format!("{prefix}{name}"), t);
            }
        }
        for (prefix, opt) in [
            ("opt.teacher", &self.teacher_opt),
            ("opt.student", &self.student_opt),
        ] {
            for (name, m, v) in opt.moments() {
                tensors.insert(format!("{prefix}.m/{name}"), m.copy()?);
                tensors.insert(format!("{prefix}.v/{name}"), v.copy()?);
            }
        }
        let counters = BTreeMap::from([
            ("opt.teacher.steps".to_string(), self.teacher_opt.steps()),
            ("opt.student.steps".to_string(), self.student_opt.steps()),
        ]);
        Ok(Checkpoint {
            arch_id: self.config.model.arch.id(),
            iteration: self.iteration,
            config: self.config.to_json_value()?,
            counters,
            tensors,
        })
    }

    /// Restores a state saved by [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        let config: RunConfig = serde_json::from_value(ck.config.clone())?;
        ck.expect_arch(&config.model.arch.id())?;
        let nets = Networks::with_weights(&config.model, &WeightSource::Random, device)?;
        nets.teacher_store.load(&ck.group("teacher/"))?;
        nets.expert_store.load(&ck.group("expert/"))?;
        nets.student_store.load(&ck.group("student/"))?;
        let synthesizer = Synthesizer::new(&config.synthesis, config.train.image_size)?;
        let mut state = Self::assemble(config, nets, synthesizer)?;
        for (prefix, opt) in [
            ("opt.teacher", &mut state.teacher_opt),
            ("opt.student", &mut state.student_opt),
        ] {
            let m = ck.group(&format!("{prefix}.m/"));
            let v = ck.group(&format!("{prefix}.v/"));
            let steps = ck
                .counters
                .get(&format!("{prefix}.steps"))
                .copied()
                .unwrap_or(0);
            opt.restore(steps, |name| {
                Some((
                    m.get(name)?.to_device(device).ok()?,
                    v.get(name)?.to_device(device).ok()?,
                ))
            })?;
        }
        state.iteration = ck.iteration;
        Ok(state)
    }
}

/// Validation callback: returns a score where larger is better.
pub type Validator<'a> = dyn FnMut(&TrainState) -> Result<f64> + 'a;

/// Where `fit` writes its artifacts.
#[derive(Clone, Debug)]
pub struct FitOutputs {
    pub dir: PathBuf,
}

impl FitOutputs {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.ets")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.ets")
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.yaml")
    }
}

/// Summary of a finished run.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub records: Vec<LossRecord>,
    pub iterations: u64,
    pub stopped_early: bool,
    pub best_validation: Option<f64>,
}

/// Trains until `max_iterations` or until validation stops improving for
/// `patience` rounds. Batches are drawn from a per-epoch shuffle.
pub fn fit(
    state: &mut TrainState,
    train_images: &[&Image],
    outputs: Option<&FitOutputs>,
    mut validator: Option<&mut Validator<'_>>,
) -> Result<FitReport> {
    if train_images.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let cfg = state.config.train.clone();
    let mut log = match outputs {
        Some(out) => {
            fs::create_dir_all(&out.dir).map_err(Error::io(&out.dir))?;
            fs::write(out.config(), state.config.to_yaml()?).map_err(Error::io(out.config()))?;
            Some(fs::File::create(out.log()).map_err(Error::io(out.log()))?)
        }
        None => None,
    };
    let start = Instant::now();
    let batch_size = cfg.batch_size.min(train_images.len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = state.iteration * batch_size as u64 / train_images.len() as u64;
    let mut records = Vec::new();
    let mut best: Option<f64> = None;
    let mut stale = 0;
    let mut stopped_early = false;

    while state.iteration < cfg.max_iterations {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order = (0..train_images.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(epoch);
                order.shuffle(&mut rng);
                epoch += 1;
                cursor = 0;
            }
            batch.push(train_images[order[cursor]]);
            cursor += 1;
        }
        let mut record = state.train_step(&batch)?;
        record.wall_clock = start.elapsed().as_secs_f64();
        log::debug!(
            "iter {} l_te_n {:.5} l_te_a {:.5} l_s {:.5}",
            record.iteration,
            record.l_te_n,
            record.l_te_a,
            record.l_s
        );
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(f, "{line}")
                .map_err(Error::io(outputs.map(|o| o.log()).unwrap_or_default()))?;
        }
        records.push(record);

        if let Some(out) = outputs {
            if cfg.checkpoint_every > 0 && state.iteration.is_multiple_of(cfg.checkpoint_every) {
                state.to_checkpoint()?.save(&out.checkpoint())?;
            }
        }
        if let Some(v) = validator.as_deref_mut() {
            if cfg.eval_every > 0 && state.iteration.is_multiple_of(cfg.eval_every) {
                let score = v(state)?;
                log::info!("iter {} validation {score:.5}", state.iteration);
                if best.is_none_or(|b| score > b) {
                    best = Some(score);
                    stale = 0;
                    if let Some(out) = outputs {
                        state.to_checkpoint()?.save(&out.best_checkpoint())?;
                    }
                } else {
                    stale += 1;
                    if cfg.patience > 0 && stale >= cfg.patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    if let Some(out) = outputs {
        state.to_checkpoint()?.save(&out.checkpoint())?;
    }
    Ok(FitReport {
        records,
        iterations: state.iteration,
        stopped_early,
        best_validation: best,
    })
}

/// Reads a training log written by [`fit`].
pub fn read_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
