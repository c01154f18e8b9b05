//! Iterative refinement: each round's output becomes the next round's
//! source while the reference and mask stay fixed.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::lattice::LatentGrid;
use crate::maskops::BinaryMask;

/// Rounds used at inference by default.
pub const DEFAULT_ROUNDS: usize = 2;

#[derive(Debug, Error)]
#[error("{0}")]
pub struct SwapError(pub String);

impl SwapError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

/// One application of the swap model `D(reference, source)`.
pub trait SwapOperator {
    fn apply(&self, reference: &LatentGrid, source: &LatentGrid, mask: &BinaryMask) -> Result<LatentGrid, SwapError>;

    /// Operators that can run without a decode/encode between rounds expose
    /// their latent form here.
    fn latent(&self) -> Option<&dyn LatentSwap> {
        None
    }
}

/// Latent-space form of a [`SwapOperator`]. Chaining rounds in latent space
/// avoids compounding codec losses.
pub trait LatentSwap {
    fn encode(&self, image: &LatentGrid) -> Result<LatentGrid, SwapError>;
    fn decode(&self, latent: &LatentGrid) -> Result<LatentGrid, SwapError>;
    fn apply_latent(
        &self,
        reference: &LatentGrid,
        source: &LatentGrid,
        mask: &BinaryMask,
    ) -> Result<LatentGrid, SwapError>;
}

impl<T: SwapOperator + ?Sized> SwapOperator for &T {
    fn apply(&self, reference: &LatentGrid, source: &LatentGrid, mask: &BinaryMask) -> Result<LatentGrid, SwapError> {
        (**self).apply(reference, source, mask)
    }

    fn latent(&self) -> Option<&dyn LatentSwap> {
        (**self).latent()
    }
}

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("refinement needs at least one round")]
    NoRounds,
    #[error("round {round} failed: {source}")]
    Round {
        /// 1-based.
        round: usize,
        /// Output of round `round - 1` (the input source for round 1).
        last_good: Box<LatentGrid>,
        #[source]
        source: SwapError,
    },
    #[error("round {round} returned shape {actual:?}, expected {expected:?}")]
    ShapeContract {
        round: usize,
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
        last_good: Box<LatentGrid>,
    },
    #[error("latent chaining requested but the operator has no latent form")]
    NoLatentForm,
}

impl RefineError {
    pub fn last_good(&self) -> Option<&LatentGrid> {
        match self {
            RefineError::Round { last_good, .. } | RefineError::ShapeContract { last_good, .. } => Some(last_good),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefineOptions {
    pub rounds: usize,
    pub keep_intermediates: bool,
    pub latent_chaining: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { rounds: DEFAULT_ROUNDS, keep_intermediates: false, latent_chaining: false }
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub output: LatentGrid,
    /// Output of every round when retention is on; the last equals `output`.
    pub intermediates: Vec<LatentGrid>,
    pub round_times: Vec<Duration>,
}

impl RefineOutcome {
    pub fn total_time(&self) -> Duration {
        self.round_times.iter().sum()
    }
}

/// Applies `op` `opts.rounds` times, feeding each output back as the source.
pub fn refine(
    op: &dyn SwapOperator,
    reference: &LatentGrid,
    source: &LatentGrid,
    mask: &BinaryMask,
    opts: &RefineOptions,
) -> Result<RefineOutcome, RefineError> {
    if opts.rounds == 0 {
        return Err(RefineError::NoRounds);
    }
    if opts.latent_chaining {
        let latent = op.latent().ok_or(RefineError::NoLatentForm)?;
        return refine_latent(latent, reference, source, mask, opts);
    }
    let mut current = source.clone();
    let mut intermediates = Vec::new();
    let mut round_times = Vec::with_capacity(opts.rounds);
    for round in 1..=opts.rounds {
        let start = Instant::now();
        let next = op.apply(reference, &current, mask).map_err(|e| RefineError::Round {
            round,
            last_good: Box::new(current.clone()),
            source: e,
        })?;
        check_shape(round, &current, &next)?;
        round_times.push(start.elapsed());
        log::debug!("refine round {round} took {:?}", round_times[round - 1]);
        if opts.keep_intermediates {
            intermediates.push(next.clone());
        }
        current = next;
    }
    Ok(RefineOutcome { output: current, intermediates, round_times })
}

fn refine_latent(
    op: &dyn LatentSwap,
    reference: &LatentGrid,
    source: &LatentGrid,
    mask: &BinaryMask,
    opts: &RefineOptions,
) -> Result<RefineOutcome, RefineError> {
    let fail = |round: usize, last_good: &LatentGrid, e: SwapError| RefineError::Round {
        round,
        last_good: Box::new(last_good.clone()),
        source: e,
    };
    let mut z = op.encode(source).map_err(|e| fail(1, source, e))?;
    let mut last_image = source.clone();
    let mut intermediates = Vec::new();
    let mut round_times = Vec::with_capacity(opts.rounds);
    for round in 1..=opts.rounds {
        let start = Instant::now();
        let next = op.apply_latent(reference, &z, mask).map_err(|e| fail(round, &last_image, e))?;
        if next.shape() != z.shape() {
            return Err(RefineError::ShapeContract {
                round,
                expected: z.shape(),
                actual: next.shape(),
                last_good: Box::new(last_image),
            });
        }
        z = next;
        // only decode when someone needs the image
        if opts.keep_intermediates || round == opts.rounds {
            let img = op.decode(&z).map_err(|e| fail(round, &last_image, e))?;
            check_shape(round, source, &img)?;
            if opts.keep_intermediates {
                intermediates.push(img.clone());
            }
            last_image = img;
        }
        round_times.push(start.elapsed());
    }
    Ok(RefineOutcome { output: last_image, intermediates, round_times })
}

fn check_shape(round: usize, current: &LatentGrid, next: &LatentGrid) -> Result<(), RefineError> {
    if next.shape() != current.shape() {
        return Err(RefineError::ShapeContract {
            round,
            expected: current.shape(),
            actual: next.shape(),
            last_good: Box::new(current.clone()),
        });
    }
    Ok(())
}

/// Returns the source unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentitySwap;

impl SwapOperator for IdentitySwap {
    fn apply(&self, _reference: &LatentGrid, source: &LatentGrid, _mask: &BinaryMask) -> Result<LatentGrid, SwapError> {
        Ok(source.clone())
    }
}

/// Desk-scale stand-in for a trained swap model: resizes the reference to
/// the mask's bounding box (bilinear) and blends it into the masked pixels
/// with weight `alpha`. Repeated rounds converge geometrically towards the
/// pasted reference.
#[derive(Debug, Clone, Copy)]
pub struct CompositeSwap {
    pub alpha: f64,
}

impl Default for CompositeSwap {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

impl SwapOperator for CompositeSwap {
    fn apply(&self, reference: &LatentGrid, source: &LatentGrid, mask: &BinaryMask) -> Result<LatentGrid, SwapError> {
        let (c, h, w) = source.shape();
        if mask.dims() != (h, w) {
            return Err(SwapError::new(format!("mask {:?} does not match source {h}x{w}", mask.dims())));
        }
        if reference.channels() != c {
            return Err(SwapError::new(format!("reference has {} channels, source {c}", reference.channels())));
        }
        let bbox = mask.bbox().ok_or_else(|| SwapError::new("empty mask"))?;
        let (rh, rw) = (reference.height(), reference.width());
        let sample = |ch: usize, y: usize, x: usize| {
            // pixel-centre alignment between bbox and reference
            let fy = ((y - bbox.row_min) as f64 + 0.5) * rh as f64 / bbox.height() as f64 - 0.5;
            let fx = ((x - bbox.col_min) as f64 + 0.5) * rw as f64 / bbox.width() as f64 - 0.5;
            bilinear(reference, ch, fy, fx)
        };
        LatentGrid::from_fn(c, h, w, |ch, y, x| {
            let s = source.get(ch, y, x);
            if mask.get(y, x) {
                (1.0 - self.alpha) * s + self.alpha * sample(ch, y, x)
            } else {
                s
            }
        })
        .map_err(|e| SwapError::new(e.to_string()))
    }
}

fn bilinear(img: &LatentGrid, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (img.height(), img.width());
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(c, y0, x0) * (1.0 - tx) + img.get(c, y0, x1) * tx;
    let bottom = img.get(c, y1, x0) * (1.0 - tx) + img.get(c, y1, x1) * tx;
    top * (1.0 - ty) + bottom * ty
}
