//! Initial-noise perturbation.
//!
//! The inverted latent `z_T` is split into low and high frequency bands with
//! a Gaussian low-pass filter. Inside the object mask the high band is
//! shuffled across spatial positions with a single permutation shared by all
//! channels, then added back to the masked low band, while everything outside
//! the mask is copied from `z_T` verbatim. The permutation keeps the value
//! multiset (and hence the energy) of the shuffled band intact but destroys
//! its local arrangement, which changes appearance and keeps coarse layout.
//!
//! Three ablation variants are selectable through [`PerturbMode`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{self, LatentGrid, LatticeError};
use crate::maskops::BinaryMask;
use crate::rng;

/// Cutoff used unless configured otherwise.
pub const DEFAULT_STOP_FREQUENCY: f64 = 0.3;

/// Maximum disagreement tolerated between the frequency-domain and the
/// spatial-domain recombination.
pub const PATH_AGREEMENT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask {mask:?} does not match latent plane {latent:?}")]
    MaskShape { mask: (usize, usize), latent: (usize, usize) },
    #[error("permutation covers {perm} positions but the mask has {mask}")]
    PermutationSize { perm: usize, mask: usize },
    #[error("indices do not form a bijection on 0..{0}")]
    NotBijection(usize),
    #[error("recombination paths disagree by {0:e}")]
    PathMismatch(f64),
    #[error("unknown perturbation mode {0:?}")]
    UnknownMode(String),
}

pub type Result<T, E = PerturbError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    /// Permute the high band only (the method proper).
    #[default]
    HighOnly,
    /// Permute the low band and keep the high band.
    LowOnly,
    /// Permute raw `z_T` values directly.
    AllComponents,
    /// Replace in-mask values with fresh `N(0, 1)` draws.
    ResampleGaussian,
}

impl PerturbMode {
    pub const ALL: [PerturbMode; 4] =
        [PerturbMode::HighOnly, PerturbMode::LowOnly, PerturbMode::AllComponents, PerturbMode::ResampleGaussian];

    pub fn as_str(&self) -> &'static str {
        match self {
            PerturbMode::HighOnly => "high-only",
            PerturbMode::LowOnly => "low-only",
            PerturbMode::AllComponents => "all-components",
            PerturbMode::ResampleGaussian => "resample-gaussian",
        }
    }

    /// Modes that never touch the FFT and therefore leave the background
    /// bit-identical.
    pub fn is_spatial(&self) -> bool {
        matches!(self, PerturbMode::AllComponents | PerturbMode::ResampleGaussian)
    }
}

impl fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbMode {
    type Err = PerturbError;

    fn from_str(s: &str) -> Result<Self> {
        PerturbMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s || m.as_str().replace('-', "_") == s)
            .ok_or_else(|| PerturbError::UnknownMode(s.to_string()))
    }
}

/// Bijection over the `N` in-mask positions, indexed in row-major order of
/// the set pixels. Output slot `k` receives the value from slot
/// `indices[k]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationSpec {
    seed: u64,
    indices: Vec<usize>,
}

impl PermutationSpec {
    /// Fisher–Yates permutation of `0..n` drawn from `seed`.
    pub fn from_seed(seed: u64, n: usize) -> Self {
        let mut indices: Vec<usize> = (0..n).collect();
        rng::fisher_yates(&mut rng::seeded(seed), &mut indices);
        Self { seed, indices }
    }

    pub fn for_mask(seed: u64, mask: &BinaryMask) -> Self {
        Self::from_seed(seed, mask.count())
    }

    pub fn identity(n: usize) -> Self {
        Self { seed: 0, indices: (0..n).collect() }
    }

    pub fn from_indices(seed: u64, indices: Vec<usize>) -> Result<Self> {
        let n = indices.len();
        let mut seen = vec![false; n];
        for &i in &indices {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(PerturbError::NotBijection(n));
            }
        }
        Ok(Self { seed, indices })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.indices.iter().enumerate().all(|(k, &i)| k == i)
    }
}

/// Parameters of one perturbation, recorded with every generated pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbParams {
    pub mode: PerturbMode,
    pub seed: u64,
    pub stop_frequency: f64,
}

impl Default for PerturbParams {
    fn default() -> Self {
        Self { mode: PerturbMode::HighOnly, seed: 0, stop_frequency: DEFAULT_STOP_FREQUENCY }
    }
}

fn check_mask(z: &LatentGrid, mask: &BinaryMask) -> Result<()> {
    if mask.dims() != (z.height(), z.width()) {
        return Err(PerturbError::MaskShape { mask: mask.dims(), latent: (z.height(), z.width()) });
    }
    Ok(())
}

/// `(z_low, z_high)` with `z_low = IFFT(LPF * FFT(z))` and
/// `z_high = IFFT((1 - LPF) * FFT(z))`.
pub fn split_frequency(z: &LatentGrid, lpf: &lattice::LowPassFilter) -> Result<(LatentGrid, LatentGrid)> {
    let spectrum = lattice::fft2(z)?;
    let low = lattice::ifft2(&lattice::hadamard(&spectrum, lpf.response())?)?;
    let high = lattice::ifft2(&lattice::hadamard(&spectrum, &lpf.complement())?)?;
    Ok((low, high))
}

/// `mask * z`, zero elsewhere.
pub fn apply_mask(z: &LatentGrid, mask: &BinaryMask) -> Result<LatentGrid> {
    check_mask(z, mask)?;
    let plane = z.plane_len();
    let mut out = z.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !mask.bits()[i % plane] {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Shuffles the in-mask positions of `component` with `spec`, using the same
/// permutation for every channel. Positions outside the mask are zeroed.
pub fn permute_masked(component: &LatentGrid, mask: &BinaryMask, spec: &PermutationSpec) -> Result<LatentGrid> {
    check_mask(component, mask)?;
    let positions = mask.set_positions();
    if spec.len() != positions.len() {
        return Err(PerturbError::PermutationSize { perm: spec.len(), mask: positions.len() });
    }
    let mut out = LatentGrid::zeros(component.channels(), component.height(), component.width())?;
    for c in 0..component.channels() {
        let src = component.channel(c);
        let dst = out.channel_mut(c);
        for (k, &from) in spec.indices().iter().enumerate() {
            dst[positions[k]] = src[positions[from]];
        }
    }
    Ok(out)
}

/// Result of the two recombination routes.
#[derive(Debug, Clone)]
pub struct Recombined {
    /// Spatial-route result; bit-exact copy of `z_orig` outside the mask.
    pub grid: LatentGrid,
    /// Max abs difference to `IFFT(FFT(permuted) + FFT(mask * kept)) + (1 - mask) * z_orig`.
    pub path_discrepancy: f64,
}

/// Merges a permuted band (already zero outside the mask) with the masked
/// kept band and the untouched background.
///
/// Both the frequency-domain sum and its spatial equivalent are evaluated;
/// they must agree to [`PATH_AGREEMENT_TOLERANCE`].
pub fn recombine_paths(
    permuted: &LatentGrid,
    kept: &LatentGrid,
    z_orig: &LatentGrid,
    mask: &BinaryMask,
) -> Result<Recombined> {
    permuted.ensure_same_shape(kept)?;
    permuted.ensure_same_shape(z_orig)?;
    check_mask(z_orig, mask)?;
    let masked_kept = apply_mask(kept, mask)?;
    let background = apply_mask(z_orig, &mask.not())?;

    let spectral = lattice::fft2(permuted)?.add(&lattice::fft2(&masked_kept)?)?;
    let frequency_route = lattice::ifft2(&spectral)?.add(&background)?;

    let plane = z_orig.plane_len();
    let mut grid = z_orig.clone();
    for (i, v) in grid.data_mut().iter_mut().enumerate() {
        if mask.bits()[i % plane] {
            *v = permuted.data()[i] + masked_kept.data()[i];
        }
    }
    let path_discrepancy = grid.max_abs_diff(&frequency_route)?;
    if path_discrepancy > PATH_AGREEMENT_TOLERANCE {
        return Err(PerturbError::PathMismatch(path_discrepancy));
    }
    Ok(Recombined { grid, path_discrepancy })
}

/// `z_T^P` for the high-only recombination; see [`recombine_paths`].
pub fn recombine(
    z_high_permuted: &LatentGrid,
    z_low: &LatentGrid,
    z_orig: &LatentGrid,
    mask: &BinaryMask,
) -> Result<LatentGrid> {
    Ok(recombine_paths(z_high_permuted, z_low, z_orig, mask)?.grid)
}

/// Everything produced along the way, for inspection and verification.
#[derive(Debug, Clone)]
pub struct PerturbTrace {
    pub perturbed: LatentGrid,
    /// The band (or raw grid) that was shuffled, masked, before shuffling.
    pub permuted_before: Option<LatentGrid>,
    pub permuted_after: Option<LatentGrid>,
    pub path_discrepancy: f64,
}

/// Perturbs `z_t` inside `mask` according to `mode`, drawing the
/// permutation (or Gaussian samples) from `seed`.
pub fn perturb_initial_noise(
    z_t: &LatentGrid,
    mask: &BinaryMask,
    mode: PerturbMode,
    seed: u64,
    stop_frequency: f64,
) -> Result<LatentGrid> {
    Ok(perturb_traced(z_t, mask, mode, seed, stop_frequency)?.perturbed)
}

pub fn perturb_traced(
    z_t: &LatentGrid,
    mask: &BinaryMask,
    mode: PerturbMode,
    seed: u64,
    stop_frequency: f64,
) -> Result<PerturbTrace> {
    check_mask(z_t, mask)?;
    if mask.is_empty() {
        return Err(PerturbError::EmptyMask);
    }
    let spec = PermutationSpec::for_mask(seed, mask);
    perturb_with_permutation(z_t, mask, mode, &spec, stop_frequency)
}

/// Like [`perturb_traced`] with an explicit permutation. For
/// [`PerturbMode::ResampleGaussian`] the Gaussian draws are seeded from
/// `spec.seed()`.
pub fn perturb_with_permutation(
    z_t: &LatentGrid,
    mask: &BinaryMask,
    mode: PerturbMode,
    spec: &PermutationSpec,
    stop_frequency: f64,
) -> Result<PerturbTrace> {
    check_mask(z_t, mask)?;
    z_t.ensure_finite()?;
    if mask.is_empty() {
        return Err(PerturbError::EmptyMask);
    }
    let lpf = lattice::make_lpf(z_t.height(), z_t.width(), stop_frequency)?;
    match mode {
        PerturbMode::HighOnly | PerturbMode::LowOnly => {
            let (low, high) = split_frequency(z_t, &lpf)?;
            let (shuffled, kept) = if mode == PerturbMode::HighOnly { (high, low) } else { (low, high) };
            let before = apply_mask(&shuffled, mask)?;
            let after = permute_masked(&shuffled, mask, spec)?;
            let merged = recombine_paths(&after, &kept, z_t, mask)?;
            Ok(PerturbTrace {
                perturbed: merged.grid,
                permuted_before: Some(before),
                permuted_after: Some(after),
                path_discrepancy: merged.path_discrepancy,
            })
        }
        PerturbMode::AllComponents => {
            let before = apply_mask(z_t, mask)?;
            let after = permute_masked(z_t, mask, spec)?;
            let plane = z_t.plane_len();
            let mut out = z_t.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                if mask.bits()[i % plane] {
                    *v = after.data()[i];
                }
            }
            Ok(PerturbTrace {
                perturbed: out,
                permuted_before: Some(before),
                permuted_after: Some(after),
                path_discrepancy: 0.0,
            })
        }
        PerturbMode::ResampleGaussian => {
            let mut rng = rng::seeded(spec.seed());
            let positions = mask.set_positions();
            let mut out = z_t.clone();
            for c in 0..z_t.channels() {
                let channel = out.channel_mut(c);
                for &p in &positions {
                    channel[p] = rng::standard_normal(&mut rng);
                }
            }
            Ok(PerturbTrace { perturbed: out, permuted_before: None, permuted_after: None, path_discrepancy: 0.0 })
        }
    }
}

/// Sorted in-mask values of each channel, for multiset comparisons.
pub fn masked_multisets(z: &LatentGrid, mask: &BinaryMask) -> Vec<Vec<f64>> {
    let positions = mask.set_positions();
    (0..z.channels())
        .map(|c| {
            let ch = z.channel(c);
            let mut v: Vec<f64> = positions.iter().map(|&p| ch[p]).collect();
            v.sort_by(f64::total_cmp);
            v
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, standard_normal};

    fn noise(c: usize, h: usize, w: usize, seed: u64) -> LatentGrid {
        let mut r = seeded(seed);
        LatentGrid::from_fn(c, h, w, |_, _, _| standard_normal(&mut r)).unwrap()
    }

    fn disc(h: usize, w: usize, radius: f64) -> BinaryMask {
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        BinaryMask::from_fn(h, w, |y, x| {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            dy * dy + dx * dx <= radius * radius
        })
        .unwrap()
    }

    #[test]
    fn mode_names_round_trip() {
        for m in PerturbMode::ALL {
            assert_eq!(m.as_str().parse::<PerturbMode>().unwrap(), m);
        }
        assert_eq!("high_only".parse::<PerturbMode>().unwrap(), PerturbMode::HighOnly);
        assert!("bogus".parse::<PerturbMode>().is_err());
        assert_eq!(PerturbMode::default(), PerturbMode::HighOnly);
    }

    #[test]
    fn constant_grid_is_all_low() {
        let z = LatentGrid::filled(2, 16, 16, 0.7).unwrap();
        let lpf = lattice::make_lpf(16, 16, 0.3).unwrap();
        let (low, high) = split_frequency(&z, &lpf).unwrap();
        assert!(low.max_abs_diff(&z).unwrap() < 1e-8);
        assert!(high.max_abs() < 1e-8);
    }

    #[test]
    fn nyquist_checkerboard_is_mostly_high() {
        let n = 16;
        let z = LatentGrid::from_fn(1, n, n, |_, y, x| if (x + y) % 2 == 0 { 1.0 } else { -1.0 }).unwrap();
        let lpf = lattice::make_lpf(n, n, 0.3).unwrap();
        let (low, high) = split_frequency(&z, &lpf).unwrap();
        // all energy sits at the corner bin, radius sqrt(2)
        let gain = 1.0 - lpf.eval(2f64.sqrt());
        assert!(high.max_abs_diff(&z.scale(gain)).unwrap() < 1e-10);
        assert!(low.max_abs_diff(&z.scale(1.0 - gain)).unwrap() < 1e-10);
        // H(sqrt 2) = 2^(-2 / 0.09)
        assert!((1.0 - gain - 2f64.powf(-2.0 / 0.09)).abs() < 1e-15);
    }

    #[test]
    fn split_partition_random() {
        let z = noise(4, 64, 64, 3);
        let lpf = lattice::make_lpf(64, 64, 0.3).unwrap();
        let (low, high) = split_frequency(&z, &lpf).unwrap();
        assert!(low.add(&high).unwrap().max_abs_diff(&z).unwrap() < 1e-8);
    }

    #[test]
    fn single_position_is_identity() {
        let z = noise(3, 5, 5, 1);
        let mut m = BinaryMask::empty(5, 5).unwrap();
        m.set(2, 3, true);
        let spec = PermutationSpec::for_mask(99, &m);
        assert!(spec.is_identity());
        let out = permute_masked(&z, &m, &spec).unwrap();
        assert_eq!(out, apply_mask(&z, &m).unwrap());
    }

    #[test]
    fn fixed_seed_permutation_on_2x2() {
        // enumeration oracle: replay the same Fisher–Yates draws by hand
        let seed = 2024;
        let mut r = seeded(seed);
        let mut expected_idx = vec![0usize, 1, 2, 3];
        for i in (1..4).rev() {
            let j = rng::uniform_below(&mut r, i as u64 + 1) as usize;
            expected_idx.swap(i, j);
        }
        let spec = PermutationSpec::from_seed(seed, 4);
        assert_eq!(spec.indices(), expected_idx.as_slice());

        let z = LatentGrid::new(1, 2, 2, vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let full = BinaryMask::full(2, 2).unwrap();
        let out = permute_masked(&z, &full, &spec).unwrap();
        let values = [10.0, 20.0, 30.0, 40.0];
        let expected: Vec<f64> = expected_idx.iter().map(|&i| values[i]).collect();
        assert_eq!(out.data(), expected.as_slice());
    }

    #[test]
    fn channels_travel_together() {
        let z = noise(2, 6, 6, 4);
        let m = disc(6, 6, 2.5);
        let spec = PermutationSpec::for_mask(5, &m);
        let out = permute_masked(&z, &m, &spec).unwrap();
        let mut before: Vec<(u64, u64)> =
            m.set_positions().iter().map(|&p| (z.channel(0)[p].to_bits(), z.channel(1)[p].to_bits())).collect();
        let mut after: Vec<(u64, u64)> =
            m.set_positions().iter().map(|&p| (out.channel(0)[p].to_bits(), out.channel(1)[p].to_bits())).collect();
        before.sort_unstable();
        after.sort_unstable();
        assert_eq!(before, after);
    }

    #[test]
    fn permutation_size_mismatch() {
        let z = noise(1, 4, 4, 0);
        let m = disc(4, 4, 1.5);
        let spec = PermutationSpec::identity(m.count() + 1);
        assert!(matches!(permute_masked(&z, &m, &spec), Err(PerturbError::PermutationSize { .. })));
        assert!(PermutationSpec::from_indices(0, vec![0, 0, 1]).is_err());
        assert!(PermutationSpec::from_indices(0, vec![2, 0, 1]).is_ok());
    }

    #[test]
    fn identity_permutation_returns_input() {
        let z = noise(4, 32, 32, 8);
        let m = disc(32, 32, 9.0);
        let spec = PermutationSpec::identity(m.count());
        for mode in [PerturbMode::HighOnly, PerturbMode::LowOnly, PerturbMode::AllComponents] {
            let out = perturb_with_permutation(&z, &m, mode, &spec, 0.3).unwrap();
            assert!(out.perturbed.max_abs_diff(&z).unwrap() < 1e-8, "{mode}");
        }
    }

    #[test]
    fn background_copied_verbatim() {
        let z = noise(4, 32, 32, 10);
        let m = disc(32, 32, 10.0);
        for mode in PerturbMode::ALL {
            let out = perturb_initial_noise(&z, &m, mode, 77, 0.3).unwrap();
            for c in 0..4 {
                for p in 0..32 * 32 {
                    if !m.bits()[p] {
                        assert_eq!(out.channel(c)[p].to_bits(), z.channel(c)[p].to_bits());
                    }
                }
            }
            assert_ne!(out, z, "{mode} changed nothing");
        }
    }

    #[test]
    fn high_band_energy_and_multiset_preserved() {
        let z = noise(4, 32, 32, 12);
        let m = disc(32, 32, 8.0);
        let trace = perturb_traced(&z, &m, PerturbMode::HighOnly, 3, 0.3).unwrap();
        let before = trace.permuted_before.unwrap();
        let after = trace.permuted_after.unwrap();
        assert_eq!(masked_multisets(&before, &m), masked_multisets(&after, &m));
        // direct-summation oracle over the in-mask positions
        let energy = |g: &LatentGrid| -> f64 {
            let pos = m.set_positions();
            (0..g.channels()).map(|c| pos.iter().map(|&p| g.channel(c)[p].powi(2)).sum::<f64>()).sum()
        };
        let (eb, ea) = (energy(&before), energy(&after));
        assert!((eb - ea).abs() <= 1e-12 * eb);
        assert!(trace.path_discrepancy <= PATH_AGREEMENT_TOLERANCE);
    }

    #[test]
    fn all_components_preserves_raw_multiset() {
        let z = noise(3, 16, 16, 14);
        let m = disc(16, 16, 5.0);
        let out = perturb_initial_noise(&z, &m, PerturbMode::AllComponents, 1, 0.3).unwrap();
        assert_eq!(masked_multisets(&z, &m), masked_multisets(&out, &m));
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let z = noise(4, 24, 24, 15);
        let m = disc(24, 24, 7.0);
        for mode in PerturbMode::ALL {
            let a = perturb_initial_noise(&z, &m, mode, 5, 0.3).unwrap();
            let b = perturb_initial_noise(&z, &m, mode, 5, 0.3).unwrap();
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            let c = perturb_initial_noise(&z, &m, mode, 6, 0.3).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn errors() {
        let z = noise(1, 8, 8, 0);
        let empty = BinaryMask::empty(8, 8).unwrap();
        assert!(matches!(
            perturb_initial_noise(&z, &empty, PerturbMode::HighOnly, 0, 0.3),
            Err(PerturbError::EmptyMask)
        ));
        let m = disc(8, 8, 3.0);
        assert!(matches!(
            perturb_initial_noise(&z, &m, PerturbMode::HighOnly, 0, 0.0),
            Err(PerturbError::Lattice(LatticeError::StopFrequency(_)))
        ));
        assert!(matches!(
            perturb_initial_noise(&z, &disc(4, 4, 1.0), PerturbMode::HighOnly, 0, 0.3),
            Err(PerturbError::MaskShape { .. })
        ));
    }
}
