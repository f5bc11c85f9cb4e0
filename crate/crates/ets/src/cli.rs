//! `ets` command line: train, eval, synth-preview and score.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use ets_core::Image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{
    list_split, load_entry, load_split, write_image, write_mask, DatasetSpec, Sample, Split,
};
use crate::error::{Error, Result};
use crate::scoring::{compute_metrics, evaluate, score_images, write_heatmap, Report, Scorer};
use crate::synthesis::Synthesizer;
use crate::trainer::{fit, FitOutputs, TrainState};

#[derive(Debug, Parser)]
#[command(
    name = "ets",
    version,
    about = "Expert-teacher-student anomaly detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model for one category.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test split.
    Eval(EvalArgs),
    /// Write (normal, anomalous, mask) PNG triples.
    SynthPreview(SynthArgs),
    /// Score one image.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// YAML or JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    category: Option<String>,
    /// JSON-lines manifest instead of the folder layout.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for checkpoints, log and resolved config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    texture_dir: Option<PathBuf>,
    /// Encoder weights: `random`, `file:<path>` or a registry key.
    #[arg(long)]
    weights: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    category: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Path of the JSON report.
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-image heat maps.
    #[arg(long)]
    heatmaps: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    data_root: PathBuf,
    #[arg(long)]
    category: String,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    texture_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Confine anomalies to the object foreground.
    #[arg(long)]
    foreground: bool,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Heat map path; defaults to `<image stem>_heatmap.png` in the working
    /// directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::SynthPreview(a) => cmd_synth_preview(a),
        Command::Score(a) => cmd_score(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn dataset(cfg: &RunConfig, split: Split) -> Result<DatasetSpec> {
    let root = match (&cfg.data.root, &cfg.data.manifest) {
        (Some(r), _) => r.clone(),
        (None, Some(_)) => PathBuf::from("."),
        (None, None) => return Err(Error::Config("a data root or manifest is required".into())),
    };
    if cfg.data.manifest.is_none() && cfg.data.category.is_empty() {
        return Err(Error::Config("a category is required".into()));
    }
    Ok(DatasetSpec {
        root,
        category: cfg.data.category.clone(),
        image_size: cfg.train.image_size,
        split,
        manifest: cfg.data.manifest.clone(),
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = a.data_root {
        cfg.data.root = Some(v);
    }
    if let Some(v) = a.category {
        cfg.data.category = v;
    }
    if let Some(v) = a.manifest {
        cfg.data.manifest = Some(v);
    }
    if let Some(v) = a.max_iterations {
        cfg.train.max_iterations = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.image_size {
        cfg.train.image_size = v;
    }
    if let Some(v) = a.texture_dir {
        cfg.synthesis.texture_source = Some(v);
    }
    if let Some(v) = a.weights {
        cfg.model.weights = v;
    }
    cfg.validate()?;

    let samples = load_split(&dataset(&cfg, Split::Train)?)?;
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let validation = match (&cfg.train.validation_manifest, cfg.train.eval_every) {
        (Some(m), n) if n > 0 => {
            let spec = DatasetSpec {
                root: PathBuf::from("."),
                category: cfg.data.category.clone(),
                image_size: cfg.train.image_size,
                split: Split::Test,
                manifest: Some(m.clone()),
            };
            Some(load_split(&spec)?)
        }
        _ => None,
    };
    let device = Device::Cpu;
    let mut state = TrainState::new(cfg, &images, &device)?;
    let outputs = FitOutputs { dir: a.out };
    let mut hook = |s: &TrainState| -> Result<f64> {
        let val: &[Sample] = validation.as_deref().unwrap_or_default();
        let imgs: Vec<&Image> = val.iter().map(|v| &v.image).collect();
        let maps = score_images(
            &s.nets.teacher,
            &s.nets.student,
            &imgs,
            &s.config.eval,
            &device,
        )?;
        let labels: Vec<u8> = val.iter().map(|v| v.label).collect();
        let masks: Vec<_> = val.iter().map(|v| &v.mask).collect();
        Ok(compute_metrics(&maps, &labels, &masks, &s.config.eval)?
            .metrics
            .p_auc)
    };
    let validator: Option<&mut crate::trainer::Validator<'_>> = if validation.is_some() {
        Some(&mut hook)
    } else {
        None
    };
    let report = fit(&mut state, &images, Some(&outputs), validator)?;
    if let Some(last) = report.records.last() {
        println!(
            "trained {} iterations: l_te_n {:.5} l_te_a {:.5} l_s {:.5}",
            report.iterations, last.l_te_n, last.l_te_a, last.l_s
        );
    } else {
        println!("trained {} iterations", report.iterations);
    }
    println!("checkpoint: {}", outputs.checkpoint().display());
    Ok(())
}

fn heatmap_name(sample: &Sample, index: usize) -> String {
    let stem = sample
        .path
        .file_stem()
        .unwrap_or_default()
        .to_string_lossy();
    let parent = sample
        .path
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    format!("{index:04}_{parent}_{stem}.png")
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let device = Device::Cpu;
    let ck = Checkpoint::load(&a.ckpt)?;
    let scorer = Scorer::from_checkpoint(&ck, &device)?;
    let mut cfg = scorer.config.clone();
    if let Some(v) = a.data_root {
        cfg.data.root = Some(v);
    }
    if let Some(v) = a.category {
        cfg.data.category = v;
    }
    if let Some(v) = a.manifest {
        cfg.data.manifest = Some(v);
    }
    let samples = load_split(&dataset(&cfg, Split::Test)?)?;
    let (report, maps) = evaluate(&scorer, &samples)?;
    let m = report.metrics;
    println!("i_auc\ti_ap\tp_auc\tp_ap\tp_pro");
    println!(
        "{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
        m.i_auc, m.i_ap, m.p_auc, m.p_ap, m.p_pro
    );
    let out = Report {
        category: cfg.data.category.clone(),
        metrics: m,
        config_digest: scorer.config.digest()?,
        n_images: report.n_images,
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(&a.out, serde_json::to_vec_pretty(&out)?).map_err(Error::io(&a.out))?;
    if let Some(dir) = a.heatmaps {
        for (i, (sample, map)) in samples.iter().zip(&maps).enumerate() {
            write_heatmap(map, &dir.join(heatmap_name(sample, i)))?;
        }
    }
    Ok(())
}

fn cmd_synth_preview(a: SynthArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.data.root = Some(a.data_root);
    cfg.data.category = a.category;
    if let Some(v) = a.manifest {
        cfg.data.manifest = Some(v);
    }
    if let Some(v) = a.texture_dir {
        cfg.synthesis.texture_source = Some(v);
    }
    if let Some(v) = a.seed {
        cfg.synthesis.seed = v;
    }
    if let Some(v) = a.image_size {
        cfg.train.image_size = v;
    }
    if a.foreground {
        cfg.synthesis.use_foreground_mask = true;
    }
    let entries = list_split(&dataset(&cfg, Split::Train)?)?;
    if entries.is_empty() {
        return Err(Error::EmptyFolder(
            cfg.data.root.clone().unwrap_or_default(),
        ));
    }
    let synth = Synthesizer::new(&cfg.synthesis, cfg.train.image_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.synthesis.seed);
    fs::create_dir_all(&a.out).map_err(Error::io(&a.out))?;
    for i in 0..a.n {
        let normal = load_entry(&entries[i % entries.len()], cfg.train.image_size)?.image;
        let sample = synth.sample(&normal, &mut rng)?;
        write_image(&normal, &a.out.join(format!("{i:03}_normal.png")))?;
        write_image(
            &sample.anomalous,
            &a.out.join(format!("{i:03}_anomalous.png")),
        )?;
        write_mask(&sample.mask, &a.out.join(format!("{i:03}_mask.png")))?;
    }
    println!("wrote {} previews to {}", a.n, a.out.display());
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let scorer = Scorer::load(&a.ckpt, &Device::Cpu)?;
    let size = scorer.image_size();
    let entry = crate::data::Entry {
        path: a.image.clone(),
        label: 0,
        mask_path: None,
    };
    let sample = load_entry(&entry, size)?;
    let map = scorer.score(&[&sample.image])?.remove(0);
    let out = a.out.unwrap_or_else(|| {
        let stem = a.image.file_stem().unwrap_or_default().to_string_lossy();
        PathBuf::from(format!("{stem}_heatmap.png"))
    });
    write_heatmap(&map, &out)?;
    println!("{}\t{:.6}", a.image.display(), map.image_score);
    Ok(())
}
