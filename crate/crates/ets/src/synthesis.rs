//! Configuration and texture handling around the anomaly synthesizer.

use std::path::{Path, PathBuf};

use ets_core::perlin::{normalize_noise, perlin_noise};
use ets_core::resize::resize_image;
use ets_core::synthesis::{
    foreground_mask, synthesize_within, SynthesisParams, SyntheticSample, Texture,
};
use ets_core::{Grid, Image};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{list_images, read_image};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub beta_range: [f32; 2],
    /// Lattice periods are `2^k` with `k` drawn from this inclusive range.
    pub period_exponents: [u32; 2],
    pub binarize_threshold: f32,
    /// Degrees.
    pub rotation_range: [f32; 2],
    pub use_foreground_mask: bool,
    pub foreground_threshold: f32,
    pub max_resamples: usize,
    /// Folder of texture images. When unset, procedurally generated
    /// textures are used.
    pub texture_source: Option<PathBuf>,
    /// Number of procedural textures when no folder is given.
    pub builtin_textures: usize,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        let p = SynthesisParams::default();
        Self {
            beta_range: [p.beta_range.0, p.beta_range.1],
            period_exponents: [p.period_exponents.0, p.period_exponents.1],
            binarize_threshold: p.binarize_threshold,
            rotation_range: [p.rotation_range.0, p.rotation_range.1],
            use_foreground_mask: p.use_foreground_mask,
            foreground_threshold: p.foreground_threshold,
            max_resamples: p.max_resamples,
            texture_source: None,
            builtin_textures: 16,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn params(&self) -> SynthesisParams {
        SynthesisParams {
            beta_range: (self.beta_range[0], self.beta_range[1]),
            period_exponents: (self.period_exponents[0], self.period_exponents[1]),
            binarize_threshold: self.binarize_threshold,
            rotation_range: (self.rotation_range[0], self.rotation_range[1]),
            use_foreground_mask: self.use_foreground_mask,
            foreground_threshold: self.foreground_threshold,
            max_resamples: self.max_resamples,
        }
    }
}

/// Reads every image in `dir`, resized to `size`, in file-name order.
pub fn load_textures(dir: &Path, size: usize) -> Result<Vec<Texture>> {
    if !dir.is_dir() {
        return Err(Error::DatasetLayout(dir.to_path_buf()));
    }
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::EmptyFolder(dir.to_path_buf()));
    }
    paths
        .iter()
        .map(|p| {
            Ok(Texture {
                id: p
                    .file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
                image: resize_image(&read_image(p)?, size, size)?,
            })
        })
        .collect()
}

/// Colored Perlin patterns, one independent noise field per channel.
pub fn builtin_textures(count: usize, size: usize, seed: u64) -> Result<Vec<Texture>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut planes = Vec::with_capacity(3);
            for _ in 0..3 {
                let period = 1usize << rng.random_range(1..=5u32);
                let lo: f32 = rng.random_range(0.0..0.6);
                let span: f32 = rng.random_range(0.2..=(1.0 - lo));
                let noise =
                    normalize_noise(&perlin_noise(size, size, period, period, rng.next_u64())?);
                planes.push(noise.map(|v| lo + span * v));
            }
            Ok(Texture {
                id: format!("builtin-{i}"),
                image: Image::from_channels(&planes)?,
            })
        })
        .collect()
}

/// Synthesizer with its texture pool resolved.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    params: SynthesisParams,
    textures: Vec<Texture>,
}

impl Synthesizer {
    pub fn new(config: &SynthesisConfig, image_size: usize) -> Result<Self> {
        let params = config.params();
        params.validate()?;
        let textures = match &config.texture_source {
            Some(dir) => load_textures(dir, image_size)?,
            None => builtin_textures(config.builtin_textures, image_size, config.seed)?,
        };
        Self::with_textures(params, textures)
    }

    pub fn with_textures(params: SynthesisParams, textures: Vec<Texture>) -> Result<Self> {
        params.validate()?;
        if textures.is_empty() {
            return Err(ets_core::Error::NoTextures.into());
        }
        Ok(Self { params, textures })
    }

    pub fn textures(&self) -> &[Texture] {
        &self.textures
    }

    pub fn params(&self) -> &SynthesisParams {
        &self.params
    }

    /// Synthesizes one anomaly for `normal`. A degenerate foreground falls
    /// back to the whole image and logs a warning.
    pub fn sample<R: RngCore + ?Sized>(
        &self,
        normal: &Image,
        rng: &mut R,
    ) -> Result<SyntheticSample> {
        let fg: Option<Grid> = if self.params.use_foreground_mask {
            let fg = foreground_mask(normal, self.params.foreground_threshold);
            if fg.degenerate {
                log::warn!("foreground mask is degenerate; synthesizing over the whole image");
            }
            Some(fg.mask)
        } else {
            None
        };
        Ok(synthesize_within(
            normal,
            &self.textures,
            &self.params,
            fg.as_ref(),
            rng,
        )?)
    }
}
