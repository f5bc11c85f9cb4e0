//! Dataset ingestion: MVTec-style folders or JSON-lines manifests, decoded to
//! resized `[0, 1]` images and binary masks.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ets_core::resize::{resize_image, resize_mask};
use ets_core::{Grid, Image};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel mean of the backbone's pretraining corpus.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
/// Per-channel standard deviation of the backbone's pretraining corpus.
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];
const NORMAL_DIR: &str = "good";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub category: String,
    pub image_size: usize,
    pub split: Split,
    /// JSON-lines manifest used instead of the folder layout.
    pub manifest: Option<PathBuf>,
}

/// One decoded item.
#[derive(Clone, Debug)]
pub struct Sample {
    pub path: PathBuf,
    pub image: Image,
    pub label: u8,
    pub mask: Grid,
}

#[derive(Clone, Debug, Deserialize)]
struct ManifestLine {
    path: PathBuf,
    split: Split,
    label: u8,
    #[serde(default)]
    mask_path: Option<PathBuf>,
}

/// An undecoded item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub path: PathBuf,
    pub label: u8,
    pub mask_path: Option<PathBuf>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn require_dir(path: PathBuf) -> Result<PathBuf> {
    if path.is_dir() {
        Ok(path)
    } else {
        Err(Error::DatasetLayout(path))
    }
}

/// Image files directly inside `dir`, sorted.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        if path.is_file() && is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Lists a split of the folder layout. Test items come `good` first, then
/// each defect folder in name order; files within a folder are sorted.
pub fn list_folder(root: &Path, category: &str, split: Split) -> Result<Vec<Entry>> {
    let base = require_dir(root.join(category))?;
    let split_dir = require_dir(base.join(split.dir()))?;
    match split {
        Split::Train => {
            let good = require_dir(split_dir.join(NORMAL_DIR))?;
            Ok(list_images(&good)?
                .into_iter()
                .map(|path| Entry {
                    path,
                    label: 0,
                    mask_path: None,
                })
                .collect())
        }
        Split::Test => {
            let mut dirs = sorted_subdirs(&split_dir)?;
            dirs.sort_by_key(|d| d.file_name().map(|n| n != NORMAL_DIR));
            let mut out = Vec::new();
            for dir in dirs {
                let defect = dir
                    .file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned();
                let normal = defect == NORMAL_DIR;
                let gt_dir = if normal {
                    None
                } else {
                    Some(require_dir(base.join("ground_truth").join(&defect))?)
                };
                for path in list_images(&dir)? {
                    let mask_path = match &gt_dir {
                        None => None,
                        Some(gt) => {
                            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
                            let mask = gt.join(format!("{stem}_mask.png"));
                            if !mask.is_file() {
                                return Err(Error::MissingMask(mask));
                            }
                            Some(mask)
                        }
                    };
                    out.push(Entry {
                        path,
                        label: u8::from(!normal),
                        mask_path,
                    });
                }
            }
            Ok(out)
        }
    }
}

/// Lists a split from a JSON-lines manifest; relative paths resolve against
/// the manifest's directory.
pub fn list_manifest(manifest: &Path, split: Split) -> Result<Vec<Entry>> {
    let file = fs::File::open(manifest).map_err(Error::io(manifest))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(manifest))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Manifest {
            path: manifest.to_path_buf(),
            line: i + 1,
            reason,
        };
        let item: ManifestLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if item.label > 1 {
            return Err(bad(format!("label must be 0 or 1, got {}", item.label)));
        }
        if item.split != split {
            continue;
        }
        let mask_path = item.mask_path.map(|m| base.join(m));
        if item.label == 1 && mask_path.is_none() {
            return Err(Error::MissingMask(base.join(&item.path)));
        }
        out.push(Entry {
            path: base.join(item.path),
            label: item.label,
            mask_path,
        });
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

/// Decodes an RGB image to `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = rgb.into_raw();
    Ok(Image::from_fn(3, h, w, |c, y, x| {
        raw[(y * w + x) * 3 + c].clamp(0.0, 1.0)
    })?)
}

/// Decodes a single-channel mask to `{0, 1}`.
pub fn read_mask(path: &Path) -> Result<Grid> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    if img.color().channel_count() != 1 {
        return Err(Error::MaskChannels(path.to_path_buf()));
    }
    let luma = img.to_luma32f();
    let (w, h) = luma.dimensions();
    let raw = luma.into_raw();
    Ok(Grid::new(
        h as usize,
        w as usize,
        raw.into_iter().map(|v| f32::from(v > 0.5)).collect(),
    )?)
}

/// Decodes and resizes one entry.
pub fn load_entry(entry: &Entry, image_size: usize) -> Result<Sample> {
    if image_size == 0 {
        return Err(Error::Config("image_size must be positive".into()));
    }
    let image = resize_image(&read_image(&entry.path)?, image_size, image_size)?;
    let mask = match &entry.mask_path {
        Some(p) => resize_mask(&read_mask(p)?, image_size, image_size)?,
        None => Grid::zeros(image_size, image_size)?,
    };
    if entry.label == 1 && !mask.any_positive() {
        log::warn!(
            "{}: anomalous mask vanished after resizing",
            entry.path.display()
        );
    }
    Ok(Sample {
        path: entry.path.clone(),
        image,
        label: entry.label,
        mask,
    })
}

/// Lists the split described by `spec`.
pub fn list_split(spec: &DatasetSpec) -> Result<Vec<Entry>> {
    match &spec.manifest {
        Some(m) => list_manifest(m, spec.split),
        None => list_folder(&spec.root, &spec.category, spec.split),
    }
}

/// Loads every item of a split in listing order.
pub fn load_split(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    let entries = list_split(spec)?;
    if entries.is_empty() {
        return Err(Error::EmptyFolder(match &spec.manifest {
            Some(m) => m.clone(),
            None => spec.root.join(&spec.category).join(spec.split.dir()),
        }));
    }
    entries
        .iter()
        .map(|e| load_entry(e, spec.image_size))
        .collect()
}

/// Stacks images into a normalized `(B, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[&Image], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Config("empty image batch".into()))?;
    let (c, h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.shape() != (c, h, w) || c != 3 {
            return Err(Error::Shape {
                context: "image batch",
                left: vec![c, h, w],
                right: {
                    let (c, h, w) = img.shape();
                    vec![c, h, w]
                },
            });
        }
        for (ch, plane) in img.data().chunks(h * w).enumerate() {
            data.extend(
                plane
                    .iter()
                    .map(|v| (v - IMAGENET_MEAN[ch]) / IMAGENET_STD[ch]),
            );
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// Stacks masks into a `(B, 1, H, W)` tensor.
pub fn masks_to_tensor(masks: &[&Grid], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Config("empty mask batch".into()))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.shape() != (h, w) {
            return Err(Error::Shape {
                context: "mask batch",
                left: vec![h, w],
                right: vec![m.height(), m.width()],
            });
        }
        data.extend_from_slice(m.data());
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

fn save_png(buffer: image::DynamicImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    buffer.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[0, 1]` RGB image as 8-bit PNG.
pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    let (_, h, w) = img.shape();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| to_u8(img.get(c, y as usize, x as usize))))
    });
    save_png(buf.into(), path)
}

/// Writes a mask as an 8-bit single-channel PNG (0 or 255).
pub fn write_mask(mask: &Grid, path: &Path) -> Result<()> {
    let (h, w) = mask.shape();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(mask.get(y as usize, x as usize))])
    });
    save_png(buf.into(), path)
}
