//! Dataset ingest, pseudo-pair construction and training-sample assembly.

pub mod augment;
pub mod codec;
pub mod imageio;
pub mod manifest;
pub mod pair;
pub mod training;

use std::path::PathBuf;

use thiserror::Error;

use crate::bridge::BridgeError;
use crate::ddim::DdimError;
use crate::lattice::LatticeError;
use crate::maskops::{MaskError, SizeRejection};
use crate::perturb::PerturbError;

pub use codec::{AvgPoolCodec, CodecKind, IdentityCodec, LatentCodec};
pub use manifest::{ingest, DatasetManifest, ManifestEntry};
pub use pair::{build_pair, run_pairs, synthesize_pair, PairContext, PairRecord, RunSummary};
pub use training::{assemble_training_sample, sample_timestep, TrainingSample};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("image: {0}")]
    Image(String),
    #[error("format: {0}")]
    Format(String),
    #[error("codec: {0}")]
    Codec(String),
    #[error("augmentation: {0}")]
    Augment(String),
    #[error("duplicate manifest id {0:?}")]
    DuplicateId(String),
    #[error("manifest has no valid entries ({rejected} rejected)")]
    EmptyManifest { rejected: usize },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("filtered: {0}")]
    Filtered(SizeRejection),
    #[error("mask vanishes at latent resolution")]
    EmptyLatentMask,
    #[error("reference mask is empty after cleaning")]
    EmptyReferenceMask,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Ddim(#[from] DdimError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
