//! Reference-crop augmentations: Gaussian blur, zoom, perspective warp and
//! elastic deformation. All randomness is drawn from the supplied seed.

use serde::{Deserialize, Serialize};

use crate::lattice::LatentGrid;
use crate::rng::{self, SeededRng};

use super::{PipelineError, Result};

/// Parameter ranges used by [`sample_ops`].
pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.5, 2.0);
pub const ZOOM_RANGE: (f64, f64) = (0.8, 1.25);
pub const MAX_PERSPECTIVE_JITTER: f64 = 0.05;
pub const MAX_ELASTIC_ALPHA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    Blur {
        sigma: f64,
    },
    /// `scale > 1` zooms in (crop), `scale < 1` zooms out (pad with zeros).
    Zoom {
        scale: f64,
    },
    /// Each corner moves by up to `jitter` times the side length.
    Perspective {
        jitter: f64,
    },
    /// Smooth random displacement of at most `alpha` pixels.
    Elastic {
        alpha: f64,
        smoothness: f64,
    },
}

/// Draws one op of each kind with probability 1/2, parameters inside the
/// mild ranges above, in a fixed order.
pub fn sample_ops(seed: u64) -> Vec<AugmentOp> {
    let mut r = rng::seeded(seed);
    let mut ops = Vec::new();
    if rng::unit_f64(&mut r) < 0.5 {
        ops.push(AugmentOp::Blur { sigma: rng::uniform_range(&mut r, BLUR_SIGMA_RANGE.0, BLUR_SIGMA_RANGE.1) });
    }
    if rng::unit_f64(&mut r) < 0.5 {
        // log-uniform so zoom-in and zoom-out are equally likely
        let (lo, hi) = (ZOOM_RANGE.0.ln(), ZOOM_RANGE.1.ln());
        ops.push(AugmentOp::Zoom { scale: rng::uniform_range(&mut r, lo, hi).exp() });
    }
    if rng::unit_f64(&mut r) < 0.5 {
        ops.push(AugmentOp::Perspective { jitter: rng::uniform_range(&mut r, 0.0, MAX_PERSPECTIVE_JITTER) });
    }
    if rng::unit_f64(&mut r) < 0.5 {
        ops.push(AugmentOp::Elastic { alpha: rng::uniform_range(&mut r, 0.0, MAX_ELASTIC_ALPHA), smoothness: 4.0 });
    }
    ops
}

/// Applies `ops` in order. Op `i` draws from a generator seeded with
/// `seed + i`, so removing a trailing op does not change earlier ones.
pub fn augment_reference(crop: &LatentGrid, ops: &[AugmentOp], seed: u64) -> Result<LatentGrid> {
    let mut out = crop.clone();
    for (i, op) in ops.iter().enumerate() {
        let op_seed = seed.wrapping_add(i as u64);
        out = match *op {
            AugmentOp::Blur { sigma } => gaussian_blur(&out, sigma)?,
            AugmentOp::Zoom { scale } => zoom(&out, scale)?,
            AugmentOp::Perspective { jitter } => perspective(&out, jitter, op_seed)?,
            AugmentOp::Elastic { alpha, smoothness } => elastic(&out, alpha, smoothness, op_seed)?,
        };
    }
    Ok(out)
}

/// Normalized 1D Gaussian taps for radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable blur with edge clamping.
pub fn gaussian_blur(img: &LatentGrid, sigma: f64) -> Result<LatentGrid> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(PipelineError::Augment(format!("blur sigma must be positive, got {sigma}")));
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (c, h, w) = img.shape();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let rows = LatentGrid::from_fn(c, h, w, |ch, y, x| {
        k.iter().enumerate().map(|(i, t)| t * img.get(ch, y, clamp(x as i64 + i as i64 - r, w))).sum()
    })?;
    Ok(LatentGrid::from_fn(c, h, w, |ch, y, x| {
        k.iter().enumerate().map(|(i, t)| t * rows.get(ch, clamp(y as i64 + i as i64 - r, h), x)).sum()
    })?)
}

/// Bilinear sample at fractional `(y, x)`; zero outside the frame.
fn sample_zero(img: &LatentGrid, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (img.height() as f64, img.width() as f64);
    if y < -0.5 || x < -0.5 || y > h - 0.5 || x > w - 0.5 {
        return 0.0;
    }
    sample_clamped(img, c, y, x)
}

fn sample_clamped(img: &LatentGrid, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (img.height(), img.width());
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
    let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Scales about the image center, keeping the frame size.
pub fn zoom(img: &LatentGrid, scale: f64) -> Result<LatentGrid> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(PipelineError::Augment(format!("zoom scale must be positive, got {scale}")));
    }
    if scale == 1.0 {
        return Ok(img.clone());
    }
    let (c, h, w) = img.shape();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    Ok(LatentGrid::from_fn(c, h, w, |ch, y, x| {
        sample_zero(img, ch, cy + (y as f64 - cy) / scale, cx + (x as f64 - cx) / scale)
    })?)
}

/// 3x3 projective map, row-major, `m[8] = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    /// Maps `from[i]` onto `to[i]` (points as `(x, y)`). `None` when the
    /// system is singular.
    pub fn from_points(from: [(f64, f64); 4], to: [(f64, f64); 4]) -> Option<Self> {
        let mut a = [[0.0f64; 9]; 8];
        for i in 0..4 {
            let ((x, y), (u, v)) = (from[i], to[i]);
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v, v];
        }
        // Gauss-Jordan with partial pivoting on the augmented 8x9 system
        for col in 0..8 {
            let pivot = (col..8).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))?;
            if a[pivot][col].abs() < 1e-10 {
                return None;
            }
            a.swap(col, pivot);
            let d = a[col][col];
            for v in &mut a[col][col..] {
                *v /= d;
            }
            let pivot_row = a[col];
            for (row, r) in a.iter_mut().enumerate() {
                let f = r[col];
                if row != col && f != 0.0 {
                    for (v, p) in r[col..].iter_mut().zip(&pivot_row[col..]) {
                        *v -= f * p;
                    }
                }
            }
        }
        let mut m = [0.0; 9];
        for (i, row) in a.iter().enumerate() {
            m[i] = row[8];
        }
        m[8] = 1.0;
        Some(Homography(m))
    }

    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let d = m[6] * x + m[7] * y + m[8];
        if d.abs() < 1e-12 {
            return None;
        }
        Some(((m[0] * x + m[1] * y + m[2]) / d, (m[3] * x + m[4] * y + m[5]) / d))
    }
}

fn is_convex(quad: &[(f64, f64); 4]) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let (a, b, c) = (quad[i], quad[(i + 1) % 4], quad[(i + 2) % 4]);
        let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
        if cross.abs() < 1e-9 || (sign != 0.0 && cross.signum() != sign) {
            return false;
        }
        sign = cross.signum();
    }
    true
}

const MAX_WARP_ATTEMPTS: u64 = 16;

/// Moves the four corners by seeded offsets and warps projectively. A
/// degenerate draw is retried with `seed + 1`.
pub fn perspective(img: &LatentGrid, jitter: f64, seed: u64) -> Result<LatentGrid> {
    if !(0.0..0.5).contains(&jitter) {
        return Err(PipelineError::Augment(format!("perspective jitter {jitter} outside [0, 0.5)")));
    }
    let (c, h, w) = img.shape();
    let (wm, hm) = ((w - 1) as f64, (h - 1) as f64);
    let corners = [(0.0, 0.0), (wm, 0.0), (wm, hm), (0.0, hm)];
    for attempt in 0..MAX_WARP_ATTEMPTS {
        let mut r: SeededRng = rng::seeded(seed.wrapping_add(attempt));
        let moved = corners.map(|(x, y)| {
            (
                x + rng::uniform_range(&mut r, -jitter, jitter) * w as f64,
                y + rng::uniform_range(&mut r, -jitter, jitter) * h as f64,
            )
        });
        if !is_convex(&moved) {
            continue;
        }
        // inverse map: output pixel -> source location
        let Some(inv) = Homography::from_points(moved, corners) else {
            continue;
        };
        return Ok(LatentGrid::from_fn(c, h, w, |ch, y, x| match inv.apply(x as f64, y as f64) {
            Some((sx, sy)) => sample_zero(img, ch, sy, sx),
            None => 0.0,
        })?);
    }
    Err(PipelineError::Augment("no non-degenerate perspective warp found".into()))
}

/// Smooth seeded displacement field with peak magnitude `alpha` pixels.
pub fn elastic(img: &LatentGrid, alpha: f64, smoothness: f64, seed: u64) -> Result<LatentGrid> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(PipelineError::Augment(format!("elastic alpha must be non-negative, got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(img.clone());
    }
    let (c, h, w) = img.shape();
    let mut r = rng::seeded(seed);
    let raw = LatentGrid::from_fn(2, h, w, |_, _, _| rng::uniform_range(&mut r, -1.0, 1.0))?;
    let field = gaussian_blur(&raw, smoothness)?;
    let peak = field.max_abs();
    let gain = if peak > 0.0 { alpha / peak } else { 0.0 };
    Ok(LatentGrid::from_fn(c, h, w, |ch, y, x| {
        let dy = field.get(0, y, x) * gain;
        let dx = field.get(1, y, x) * gain;
        sample_clamped(img, ch, y as f64 + dy, x as f64 + dx)
    })?)
}
