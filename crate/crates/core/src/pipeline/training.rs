//! Training-sample assembly for an external trainer.
//!
//! The reference branch gets a clean, augmented object crop at timestep 0.
//! The denoiser branch gets the source latent noised to a uniformly drawn
//! timestep, plus the box mask and the perturbed source as conditions.

use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::ddim::NoiseSchedule;
use crate::lattice::LatentGrid;
use crate::maskops::{self, BinaryMask};
use crate::rng::{self, SeededRng};

use super::augment::{self, AugmentOp};
use super::codec::LatentCodec;
use super::imageio;
use super::pair::PairRecord;
use super::{PipelineError, Result};

/// The reference branch is always fed noise-free.
pub const REFERENCE_TIMESTEP: usize = 0;

/// Uniform draw from `{0, ..., steps}`.
pub fn sample_timestep(rng: &mut SeededRng, steps: usize) -> usize {
    rng::uniform_below(rng, steps as u64 + 1) as usize
}

/// `sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn noise_latent(z0: &LatentGrid, eps: &LatentGrid, alpha_bar: f64) -> Result<LatentGrid> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(z0.zip_map(eps, |z, e| a * z + b * e)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub pair_id: String,
    pub seed: u64,
    pub reference_crop_path: PathBuf,
    pub reference_timestep: usize,
    pub augmentations: Vec<AugmentOp>,
    /// Denoiser target: the clean source image.
    pub target_path: PathBuf,
    /// Denoiser condition: the perturbed source.
    pub condition_path: PathBuf,
    pub box_mask_path: PathBuf,
    pub timestep: usize,
    pub alpha_bar: f64,
    pub noisy_latent_path: PathBuf,
    pub noise_path: PathBuf,
}

/// Options that are not part of the pair record.
#[derive(Debug, Clone, Copy, Default)]
pub struct AssembleOptions {
    /// Opening radius for the reference mask; `None` uses the image-size default.
    pub clean_radius: Option<usize>,
    pub box_margin: usize,
}

/// Object crop of `image` inside the bbox of `mask`, background zeroed.
pub fn reference_crop(image: &LatentGrid, mask: &BinaryMask) -> Result<LatentGrid> {
    let bbox = mask.bbox().ok_or(PipelineError::EmptyReferenceMask)?;
    Ok(LatentGrid::from_fn(image.channels(), bbox.height(), bbox.width(), |c, y, x| {
        let (r, q) = (bbox.row_min + y, bbox.col_min + x);
        if mask.get(r, q) {
            image.get(c, r, q)
        } else {
            0.0
        }
    })?)
}

/// Builds one training sample from a pair and writes its tensors to `out_dir`.
pub fn assemble_training_sample(
    pair: &PairRecord,
    codec: &dyn LatentCodec,
    schedule: &NoiseSchedule,
    seed: u64,
    opts: &AssembleOptions,
    out_dir: &Path,
) -> Result<TrainingSample> {
    for p in [&pair.source_path, &pair.mask_path, &pair.perturbed_path] {
        if !p.is_file() {
            return Err(PipelineError::MissingFile(p.clone()));
        }
    }
    let source = imageio::load_rgb(&pair.source_path)?;
    let mask = BinaryMask::load_png(&pair.mask_path)?;
    let radius = opts.clean_radius.unwrap_or_else(|| maskops::default_clean_radius(mask.height(), mask.width()));
    let cleaned = maskops::clean_reference_mask(&mask, radius);
    if cleaned.is_empty() {
        return Err(PipelineError::EmptyReferenceMask);
    }

    let mut r = rng::seeded(seed);
    let aug_seed = r.next_u64();
    let ops = augment::sample_ops(aug_seed);
    let crop = augment::augment_reference(&reference_crop(&source, &cleaned)?, &ops, aug_seed)?;

    let t = sample_timestep(&mut r, schedule.steps());
    let alpha_bar = schedule.alpha_bar(t);
    let z0 = codec.encode(&source)?;
    let (c, h, w) = z0.shape();
    let eps = LatentGrid::from_fn(c, h, w, |_, _, _| rng::standard_normal(&mut r))?;
    let noisy = noise_latent(&z0, &eps, alpha_bar)?;
    let box_mask = maskops::to_bbox_mask(&mask, opts.box_margin)?;

    let dir = out_dir.join(super::pair::sanitize(&pair.id));
    fs::create_dir_all(&dir)?;
    let sample = TrainingSample {
        pair_id: pair.id.clone(),
        seed,
        reference_crop_path: dir.join("reference.tensor"),
        reference_timestep: REFERENCE_TIMESTEP,
        augmentations: ops,
        target_path: pair.source_path.clone(),
        condition_path: pair.perturbed_path.clone(),
        box_mask_path: dir.join("box_mask.png"),
        timestep: t,
        alpha_bar,
        noisy_latent_path: dir.join("noisy_latent.tensor"),
        noise_path: dir.join("noise.tensor"),
    };
    imageio::save_tensor(&crop, &sample.reference_crop_path)?;
    imageio::save_tensor(&noisy, &sample.noisy_latent_path)?;
    imageio::save_tensor(&eps, &sample.noise_path)?;
    box_mask.save_png(&sample.box_mask_path)?;
    Ok(sample)
}
