//! Pseudo-pair synthesis for reference-based object swapping.
//!
//! A single image becomes a training pair by inverting it to its DDIM
//! initial noise, shuffling the high-frequency part of that noise inside the
//! object mask, and sampling again. This crate holds the numeric core
//! ([`lattice`], [`perturb`], [`ddim`]), mask geometry ([`maskops`]), the
//! data pipeline ([`pipeline`]), iterative refinement ([`refine`]),
//! region-restricted evaluation ([`evalkit`]) and the binary protocol used
//! to reach external model backends ([`bridge`]).

pub mod bridge;
pub mod config;
pub mod ddim;
pub mod evalkit;
pub mod lattice;
pub mod maskops;
pub mod perturb;
pub mod pipeline;
pub mod refine;
pub mod rng;

pub use lattice::{LatentGrid, LowPassFilter};
pub use maskops::{BBox, BinaryMask};
pub use perturb::{PermutationSpec, PerturbMode, PerturbParams};
