//! Latent grids and the frequency-domain primitives used by the noise
//! perturbation: a DC-centered 2D FFT, its inverse, and a radial Gaussian
//! low-pass filter parameterized by its half-power frequency.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Imaginary residue allowed by [`ifft2`], relative to the largest real part.
pub const IMAG_RESIDUE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("grid dimensions must be positive, got {channels}x{height}x{width}")]
    EmptyShape { channels: usize, height: usize, width: usize },
    #[error("data length {actual} does not match shape {channels}x{height}x{width}")]
    LengthMismatch { channels: usize, height: usize, width: usize, actual: usize },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: (usize, usize, usize), actual: (usize, usize, usize) },
    #[error("stop frequency must lie in (0, 1], got {0}")]
    StopFrequency(f64),
    #[error(
        "imaginary residue {residue:e} exceeds tolerance (max real part {max_real:e}); \
         conjugate symmetry was broken upstream"
    )]
    ImaginaryResidue { residue: f64, max_real: f64 },
    #[error("spectrum layout mismatch: expected DC-centered spectrum")]
    Layout,
}

pub type Result<T, E = LatticeError> = std::result::Result<T, E>;

/// A `C x H x W` grid of real values stored channel-major, then row-major.
///
/// Used for latents `z_t`, noise, and pixel-space images alike (the identity
/// codec treats RGB pixels in `[0, 1]` as a 3-channel latent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(channels, height, width)?;
        if data.len() != channels * height * width {
            return Err(LatticeError::LengthMismatch { channels, height, width, actual: data.len() });
        }
        let grid = Self { channels, height, width, data };
        grid.ensure_finite()?;
        Ok(grid)
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    /// Builds a grid by evaluating `f(channel, row, col)` at every position.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        check_shape(channels, height, width)?;
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Number of spatial positions (`H * W`).
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers are responsible for keeping
    /// values finite; [`LatentGrid::ensure_finite`] re-checks.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(LatticeError::NonFinite { index, value: self.data[index] }),
            None => Ok(()),
        }
    }

    pub fn ensure_same_shape(&self, other: &LatentGrid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LatticeError::ShapeMismatch { expected: self.shape(), actual: other.shape() });
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> LatentGrid {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two equally shaped grids.
    pub fn zip_map(&self, other: &LatentGrid, mut f: impl FnMut(f64, f64) -> f64) -> Result<LatentGrid> {
        self.ensure_same_shape(other)?;
        Ok(self.with_data(self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect()))
    }

    pub fn add(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> LatentGrid {
        self.map(|v| v * factor)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    fn with_data(&self, data: Vec<f64>) -> LatentGrid {
        debug_assert_eq!(data.len(), self.data.len());
        LatentGrid { channels: self.channels, height: self.height, width: self.width, data }
    }
}

fn check_shape(channels: usize, height: usize, width: usize) -> Result<()> {
    if channels == 0 || height == 0 || width == 0 {
        return Err(LatticeError::EmptyShape { channels, height, width });
    }
    Ok(())
}

/// Complex spectrum of a [`LatentGrid`], one `H x W` plane per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<Complex64>,
    centered: bool,
    from_real: bool,
}

impl FrequencyGrid {
    /// Wraps an arbitrary spectrum. Such grids are not known to carry
    /// conjugate symmetry, so [`ifft2`] keeps the real part without checking.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<Complex64>, centered: bool) -> Result<Self> {
        check_shape(channels, height, width)?;
        if data.len() != channels * height * width {
            return Err(LatticeError::LengthMismatch { channels, height, width, actual: data.len() });
        }
        Ok(Self { channels, height, width, data, centered, from_real: false })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// True when the DC bin sits at `(H / 2, W / 2)`.
    pub fn is_centered(&self) -> bool {
        self.centered
    }

    /// True when the spectrum descends from real data through operations
    /// that keep conjugate symmetry.
    pub fn is_from_real(&self) -> bool {
        self.from_real
    }

    pub fn get(&self, c: usize, u: usize, v: usize) -> Complex64 {
        self.data[(c * self.height + u) * self.width + v]
    }

    /// Bin-wise sum. The result keeps the real-origin flag only if both
    /// operands carry it.
    pub fn add(&self, other: &FrequencyGrid) -> Result<FrequencyGrid> {
        if self.shape() != other.shape() {
            return Err(LatticeError::ShapeMismatch { expected: self.shape(), actual: other.shape() });
        }
        if self.centered != other.centered {
            return Err(LatticeError::Layout);
        }
        Ok(FrequencyGrid {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
            from_real: self.from_real && other.from_real,
            ..self.clone_header()
        })
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    fn clone_header(&self) -> FrequencyGrid {
        FrequencyGrid {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: Vec::new(),
            centered: self.centered,
            from_real: self.from_real,
        }
    }
}

/// A real-valued `H x W` response on the DC-centered frequency plane.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterResponse {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FilterResponse {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_shape(1, height, width)?;
        if values.len() != height * width {
            return Err(LatticeError::LengthMismatch { channels: 1, height, width, actual: values.len() });
        }
        Ok(Self { height, width, values })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[u * self.width + v]
    }

    /// `1 - response`, the high-pass counterpart.
    pub fn complement(&self) -> FilterResponse {
        FilterResponse { height: self.height, width: self.width, values: self.values.iter().map(|h| 1.0 - h).collect() }
    }
}

/// Radial Gaussian low-pass filter `H(r) = exp(-r^2 / (2 sigma^2))` with
/// `sigma` chosen so that `H(stop_frequency) = 1/2`.
///
/// `r` is the frequency radius normalized by Nyquist along each axis, so it
/// ranges over `[0, sqrt(2)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowPassFilter {
    stop_frequency: f64,
    sigma: f64,
    response: FilterResponse,
}

impl LowPassFilter {
    pub fn stop_frequency(&self) -> f64 {
        self.stop_frequency
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn height(&self) -> usize {
        self.response.height
    }

    pub fn width(&self) -> usize {
        self.response.width
    }

    pub fn response(&self) -> &FilterResponse {
        &self.response
    }

    pub fn complement(&self) -> FilterResponse {
        self.response.complement()
    }

    /// Evaluates the continuous response at normalized radius `r`.
    pub fn eval(&self, r: f64) -> f64 {
        gaussian_response(r, self.sigma)
    }
}

fn gaussian_response(r: f64, sigma: f64) -> f64 {
    (-(r * r) / (2.0 * sigma * sigma)).exp()
}

/// Signed Nyquist-normalized frequency of centered index `k` along an axis of
/// length `n`.
pub fn normalized_frequency(k: usize, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let center = (n / 2) as f64;
    (k as f64 - center) / (n as f64 / 2.0)
}

/// Normalized radius of centered bin `(u, v)`.
pub fn normalized_radius(u: usize, v: usize, height: usize, width: usize) -> f64 {
    let fy = normalized_frequency(u, height);
    let fx = normalized_frequency(v, width);
    (fy * fy + fx * fx).sqrt()
}

pub fn make_lpf(height: usize, width: usize, stop_frequency: f64) -> Result<LowPassFilter> {
    check_shape(1, height, width)?;
    if !(stop_frequency > 0.0 && stop_frequency <= 1.0) {
        return Err(LatticeError::StopFrequency(stop_frequency));
    }
    let sigma = stop_frequency / (2.0 * std::f64::consts::LN_2).sqrt();
    let mut values = Vec::with_capacity(height * width);
    for u in 0..height {
        for v in 0..width {
            values.push(gaussian_response(normalized_radius(u, v, height, width), sigma));
        }
    }
    Ok(LowPassFilter { stop_frequency, sigma, response: FilterResponse::new(height, width, values)? })
}

/// Multiplies every channel of `freq` bin-wise by `filter`.
pub fn hadamard(freq: &FrequencyGrid, filter: &FilterResponse) -> Result<FrequencyGrid> {
    if (freq.height, freq.width) != (filter.height, filter.width) {
        return Err(LatticeError::ShapeMismatch {
            expected: (freq.channels, freq.height, freq.width),
            actual: (freq.channels, filter.height, filter.width),
        });
    }
    if !freq.centered {
        return Err(LatticeError::Layout);
    }
    let plane = freq.height * freq.width;
    let data = freq.data.iter().enumerate().map(|(i, z)| z * filter.values[i % plane]).collect();
    Ok(FrequencyGrid { data, ..freq.clone_header() })
}

struct Plans {
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
}

fn plans(height: usize, width: usize, inverse: bool) -> Plans {
    let mut planner = FftPlanner::new();
    if inverse {
        Plans { rows: planner.plan_fft_inverse(width), cols: planner.plan_fft_inverse(height) }
    } else {
        Plans { rows: planner.plan_fft_forward(width), cols: planner.plan_fft_forward(height) }
    }
}

/// Unnormalized 2D transform of one `H x W` plane in place.
fn transform_plane(plane: &mut [Complex64], height: usize, width: usize, plans: &Plans) {
    for row in plane.chunks_exact_mut(width) {
        plans.rows.process(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = plane[y * width + x];
        }
        plans.cols.process(&mut column);
        for y in 0..height {
            plane[y * width + x] = column[y];
        }
    }
}

/// Circularly shifts a plane so that index `(0, 0)` moves to `(H/2, W/2)`.
fn fftshift(plane: &[Complex64], height: usize, width: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); plane.len()];
    let (sy, sx) = (height / 2, width / 2);
    for y in 0..height {
        for x in 0..width {
            out[((y + sy) % height) * width + (x + sx) % width] = plane[y * width + x];
        }
    }
    out
}

fn ifftshift(plane: &[Complex64], height: usize, width: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); plane.len()];
    let (sy, sx) = (height / 2, width / 2);
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = plane[((y + sy) % height) * width + (x + sx) % width];
        }
    }
    out
}

/// Per-channel 2D DFT with the DC bin moved to the center.
///
/// The forward transform is unnormalized, so
/// `sum |x|^2 = (1 / (H W)) sum |X|^2`.
pub fn fft2(grid: &LatentGrid) -> Result<FrequencyGrid> {
    grid.ensure_finite()?;
    let (channels, height, width) = grid.shape();
    let plans = plans(height, width, false);
    let mut data = Vec::with_capacity(grid.data.len());
    for c in 0..channels {
        let mut plane: Vec<Complex64> = grid.channel(c).iter().map(|&v| Complex64::new(v, 0.0)).collect();
        transform_plane(&mut plane, height, width, &plans);
        data.extend(fftshift(&plane, height, width));
    }
    Ok(FrequencyGrid { channels, height, width, data, centered: true, from_real: true })
}

/// Inverse of [`fft2`]. For spectra of real data the imaginary residue must
/// stay below [`IMAG_RESIDUE_TOLERANCE`] times the largest real part.
pub fn ifft2(freq: &FrequencyGrid) -> Result<LatentGrid> {
    if !freq.centered {
        return Err(LatticeError::Layout);
    }
    let (channels, height, width) = freq.shape();
    let plans = plans(height, width, true);
    let norm = 1.0 / (height * width) as f64;
    let plane_len = height * width;
    let mut out = Vec::with_capacity(freq.data.len());
    let mut max_real = 0.0f64;
    let mut max_imag = 0.0f64;
    for c in 0..channels {
        let mut plane = ifftshift(&freq.data[c * plane_len..(c + 1) * plane_len], height, width);
        transform_plane(&mut plane, height, width, &plans);
        for z in plane {
            let z = z * norm;
            max_real = max_real.max(z.re.abs());
            max_imag = max_imag.max(z.im.abs());
            out.push(z.re);
        }
    }
    // The absolute floor keeps an all-zero result from tripping on rounding.
    if freq.from_real && max_imag > IMAG_RESIDUE_TOLERANCE * max_real && max_imag > f64::EPSILON * plane_len as f64 {
        return Err(LatticeError::ImaginaryResidue { residue: max_imag, max_real });
    }
    LatentGrid::new(channels, height, width, out)
}
