//! Pseudo-pair construction: encode, invert, perturb the initial noise
//! inside the object mask, sample back and decode.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddim::{self, ConditioningRef, Denoiser, NoiseSchedule, ScheduleSummary};
use crate::lattice::LatentGrid;
use crate::maskops::{self, BinaryMask, SizeVerdict};
use crate::perturb::{self, PermutationSpec, PerturbMode, PerturbParams};
use crate::rng;

use super::codec::LatentCodec;
use super::imageio;
use super::manifest::{write_jsonl, DatasetManifest, ManifestEntry};
use super::{PipelineError, Result};

/// Shared, read-only inputs for a batch of pairs.
#[derive(Clone, Copy)]
pub struct PairContext<'a> {
    pub codec: &'a (dyn LatentCodec + Sync),
    pub denoiser: &'a (dyn Denoiser + Sync),
    pub schedule: &'a NoiseSchedule,
    /// `perturb.seed` is the run seed; each entry derives its own from it.
    pub perturb: PerturbParams,
}

#[derive(Debug, Clone)]
pub struct SynthesizedPair {
    pub perturbed_image: LatentGrid,
    pub initial_noise: LatentGrid,
    pub perturbed_noise: LatentGrid,
    pub latent_mask: BinaryMask,
}

/// In-memory pair synthesis. `mask` is at image resolution.
pub fn synthesize_pair(
    image: &LatentGrid,
    mask: &BinaryMask,
    codec: &dyn LatentCodec,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    params: &PerturbParams,
    cond: ConditioningRef,
) -> Result<SynthesizedPair> {
    synthesize_inner(image, mask, codec, denoiser, schedule, params, None, cond)
}

/// As [`synthesize_pair`] with an explicit permutation instead of one drawn
/// from `params.seed`.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_pair_with_permutation(
    image: &LatentGrid,
    mask: &BinaryMask,
    codec: &dyn LatentCodec,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    params: &PerturbParams,
    spec: &PermutationSpec,
    cond: ConditioningRef,
) -> Result<SynthesizedPair> {
    synthesize_inner(image, mask, codec, denoiser, schedule, params, Some(spec), cond)
}

#[allow(clippy::too_many_arguments)]
fn synthesize_inner(
    image: &LatentGrid,
    mask: &BinaryMask,
    codec: &dyn LatentCodec,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    params: &PerturbParams,
    spec: Option<&PermutationSpec>,
    cond: ConditioningRef,
) -> Result<SynthesizedPair> {
    if mask.dims() != (image.height(), image.width()) {
        return Err(PipelineError::Format(format!(
            "mask {:?} does not match image {}x{}",
            mask.dims(),
            image.height(),
            image.width()
        )));
    }
    let z0 = codec.encode(image)?;
    let latent_mask = maskops::resample_to_latent(mask, z0.height(), z0.width())?;
    if latent_mask.is_empty() {
        return Err(PipelineError::EmptyLatentMask);
    }
    let trajectory = ddim::ddim_invert(&z0, denoiser, schedule, cond)?;
    let initial_noise = trajectory.last().expect("trajectory has T + 1 entries").clone();
    let trace = match spec {
        Some(spec) => {
            perturb::perturb_with_permutation(&initial_noise, &latent_mask, params.mode, spec, params.stop_frequency)?
        }
        None => perturb::perturb_traced(&initial_noise, &latent_mask, params.mode, params.seed, params.stop_frequency)?,
    };
    let sampled = ddim::ddim_sample(&trace.perturbed, denoiser, schedule, cond)?;
    let perturbed_image = codec.decode(&sampled)?;
    Ok(SynthesizedPair { perturbed_image, initial_noise, perturbed_noise: trace.perturbed, latent_mask })
}

/// Provenance of one generated pair. `source_path` is the clean image
/// (the training target) and `perturbed_path` its perturbed counterpart
/// (the condition).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub source_path: PathBuf,
    pub perturbed_path: PathBuf,
    /// Full-precision decoded output as a tensor file.
    pub perturbed_tensor_path: PathBuf,
    pub mask_path: PathBuf,
    pub initial_noise_path: PathBuf,
    pub perturbed_noise_path: PathBuf,
    pub caption: String,
    pub cond: u64,
    pub seed: u64,
    pub mode: PerturbMode,
    pub stop_frequency: f64,
    pub schedule: ScheduleSummary,
    pub codec: String,
    pub created_unix: u64,
}

impl PairRecord {
    pub fn artifact_paths(&self) -> [&Path; 6] {
        [
            &self.source_path,
            &self.perturbed_path,
            &self.perturbed_tensor_path,
            &self.mask_path,
            &self.initial_noise_path,
            &self.perturbed_noise_path,
        ]
    }

    pub fn missing_artifacts(&self) -> Vec<PathBuf> {
        self.artifact_paths().into_iter().filter(|p| !p.is_file()).map(Path::to_path_buf).collect()
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Loads one manifest entry, filters it by mask size, synthesizes the pair
/// and writes its artifacts under `out_dir/<id>/`.
pub fn build_pair(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    ctx: &PairContext<'_>,
    out_dir: &Path,
) -> Result<PairRecord> {
    let source_path = manifest.resolve(&entry.image_path);
    let mask_path = manifest.resolve(&entry.mask_path);
    let image = imageio::load_rgb(&source_path)?;
    let mask = BinaryMask::load_png(&mask_path)?;
    if let SizeVerdict::Reject(reason) = maskops::size_filter(&mask, image.height(), image.width())? {
        return Err(PipelineError::Filtered(reason));
    }
    let seed = rng::derive_seed(ctx.perturb.seed, &entry.id);
    let params = PerturbParams { seed, ..ctx.perturb };
    let pair = synthesize_pair(&image, &mask, ctx.codec, ctx.denoiser, ctx.schedule, &params, entry.conditioning())?;

    let dir = out_dir.join(sanitize(&entry.id));
    fs::create_dir_all(&dir)?;
    let record = PairRecord {
        id: entry.id.clone(),
        source_path,
        perturbed_path: dir.join("perturbed.png"),
        perturbed_tensor_path: dir.join("perturbed.tensor"),
        mask_path,
        initial_noise_path: dir.join("z_T.tensor"),
        perturbed_noise_path: dir.join("z_T_perturbed.tensor"),
        caption: entry.caption.clone(),
        cond: entry.cond,
        seed,
        mode: params.mode,
        stop_frequency: params.stop_frequency,
        schedule: ctx.schedule.summary(),
        codec: ctx.codec.id().to_string(),
        created_unix: now_unix(),
    };
    imageio::save_rgb(&pair.perturbed_image, &record.perturbed_path)?;
    imageio::save_tensor(&pair.perturbed_image, &record.perturbed_tensor_path)?;
    imageio::save_tensor(&pair.initial_noise, &record.initial_noise_path)?;
    imageio::save_tensor(&pair.perturbed_noise, &record.perturbed_noise_path)?;
    Ok(record)
}

pub(crate) fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub records: Vec<PairRecord>,
    pub skipped: Vec<SkippedEntry>,
}

impl RunSummary {
    pub fn is_complete(&self) -> bool {
        self.skipped.is_empty()
    }
}

/// Builds pairs for every entry on `jobs` worker threads, skipping and
/// logging failures. Output order follows the manifest. Writes
/// `pairs.jsonl` and `skipped.jsonl` into `out_dir`.
pub fn run_pairs(manifest: &DatasetManifest, ctx: &PairContext<'_>, out_dir: &Path, jobs: usize) -> Result<RunSummary> {
    fs::create_dir_all(out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PipelineError::Format(e.to_string()))?;
    let results: Vec<(String, Result<PairRecord>)> = pool.install(|| {
        manifest.entries.par_iter().map(|entry| (entry.id.clone(), build_pair(manifest, entry, ctx, out_dir))).collect()
    });
    let mut summary = RunSummary::default();
    for (id, result) in results {
        match result {
            Ok(record) => summary.records.push(record),
            Err(e) => {
                log::warn!("skipping {id}: {e}");
                summary.skipped.push(SkippedEntry { id, reason: e.to_string() });
            }
        }
    }
    write_jsonl(out_dir.join("pairs.jsonl"), &summary.records)?;
    write_jsonl(out_dir.join("skipped.jsonl"), &summary.skipped)?;
    Ok(summary)
}
