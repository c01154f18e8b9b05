//! Binary mask geometry: square-element morphology, bounding boxes,
//! resampling to latent resolution, the dataset size filter and the
//! boundary region used for scene-fidelity evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask dimensions must be positive, got {height}x{width}")]
    EmptyShape { height: usize, width: usize },
    #[error("bit count {actual} does not match {height}x{width}")]
    LengthMismatch { height: usize, width: usize, actual: usize },
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask {mask:?} does not fit inside image {image:?}")]
    OutOfBounds { mask: (usize, usize), image: (usize, usize) },
    #[error("mask shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("mask image i/o: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = MaskError> = std::result::Result<T, E>;

/// `H x W` boolean grid, row-major.
///
/// Empty masks are valid values; [`BinaryMask::is_empty`] is the flag
/// callers inspect after operations that can erase every pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }

    /// Grows the box by `margin` on every side, clipped to `height x width`.
    pub fn grow(&self, margin: usize, height: usize, width: usize) -> BBox {
        BBox {
            row_min: self.row_min.saturating_sub(margin),
            col_min: self.col_min.saturating_sub(margin),
            row_max: (self.row_max + margin).min(height - 1),
            col_max: (self.col_max + margin).min(width - 1),
        }
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(MaskError::EmptyShape { height, width });
        }
        if bits.len() != height * width {
            return Err(MaskError::LengthMismatch { height, width, actual: bits.len() });
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self::new(height, width, bits)
    }

    /// Filled rectangle.
    pub fn from_bbox(height: usize, width: usize, bbox: BBox) -> Result<Self> {
        Self::from_fn(height, width, |y, x| bbox.contains(y, x))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Flat indices of set pixels in row-major order.
    pub fn set_positions(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }

    pub fn bbox(&self) -> Option<BBox> {
        let mut out: Option<BBox> = None;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (y, x) = (i / self.width, i % self.width);
            out = Some(match out {
                None => BBox { row_min: y, col_min: x, row_max: y, col_max: x },
                Some(b) => BBox {
                    row_min: b.row_min.min(y),
                    col_min: b.col_min.min(x),
                    row_max: b.row_max.max(y),
                    col_max: b.col_max.max(x),
                },
            });
        }
        out
    }

    fn check_same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(MaskError::ShapeMismatch(self.dims(), other.dims()));
        }
        Ok(())
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn is_disjoint(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !(a && b))
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.combine(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.combine(other, |a, b| a || b)
    }

    /// Pixels set in `self` but not in `other`.
    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.combine(other, |a, b| a && !b)
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask { height: self.height, width: self.width, bits: self.bits.iter().map(|b| !b).collect() }
    }

    fn combine(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        self.check_same_dims(other)?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Loads an 8-bit grayscale PNG (any other format is converted to
    /// luma first); nonzero pixels are set.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.pixels().map(|p| p.0[0] != 0).collect())
    }

    /// Writes an 8-bit single-channel PNG with set pixels at 255.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = image::GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        )
        .expect("buffer length matches dimensions");
        img.save(path)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MorphOp {
    Erode,
    Dilate,
}

/// Sliding-window pass along rows or columns. With `all = true` a pixel
/// survives only if every in-bounds pixel of the window is set (erosion);
/// otherwise if any is set (dilation). Out-of-frame pixels do not take part.
fn window_pass(src: &[bool], height: usize, width: usize, radius: usize, along_rows: bool, all: bool) -> Vec<bool> {
    let (lines, len) = if along_rows { (height, width) } else { (width, height) };
    let at = |line: usize, k: usize| if along_rows { line * width + k } else { k * width + line };
    let mut out = vec![false; src.len()];
    let mut prefix = vec![0usize; len + 1];
    for line in 0..lines {
        for k in 0..len {
            prefix[k + 1] = prefix[k] + src[at(line, k)] as usize;
        }
        for k in 0..len {
            let lo = k.saturating_sub(radius);
            let hi = (k + radius).min(len - 1);
            let set = prefix[hi + 1] - prefix[lo];
            out[at(line, k)] = if all { set == hi - lo + 1 } else { set > 0 };
        }
    }
    out
}

/// Erosion or dilation with the `(2r+1) x (2r+1)` square, clipped at the
/// frame border. Radius 0 is the identity.
pub fn morph(mask: &BinaryMask, op: MorphOp, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let all = op == MorphOp::Erode;
    let (h, w) = mask.dims();
    let rows = window_pass(&mask.bits, h, w, radius, true, all);
    let bits = window_pass(&rows, h, w, radius, false, all);
    BinaryMask { height: h, width: w, bits }
}

pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    morph(mask, MorphOp::Erode, radius)
}

pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    morph(mask, MorphOp::Dilate, radius)
}

/// Default radius for reference-mask cleaning: `ceil(0.01 * min(H, W))`.
pub fn default_clean_radius(height: usize, width: usize) -> usize {
    (0.01 * height.min(width) as f64).ceil() as usize
}

/// Morphological opening (erode, then dilate with the same radius). Strips
/// speckles and protrusions thinner than `2r + 1`. The result may be empty;
/// callers decide whether to drop the sample.
pub fn clean_reference_mask(mask: &BinaryMask, radius: usize) -> BinaryMask {
    dilate(&erode(mask, radius), radius)
}

/// Filled bounding rectangle of the set pixels, grown by `margin`.
pub fn to_bbox_mask(mask: &BinaryMask, margin: usize) -> Result<BinaryMask> {
    let bbox = mask.bbox().ok_or(MaskError::EmptyMask)?;
    BinaryMask::from_bbox(mask.height, mask.width, bbox.grow(margin, mask.height, mask.width))
}

/// Resamples a pixel-space mask to `target_h x target_w`.
///
/// Shrinking uses exact area coverage and sets a cell when at least half of
/// it is covered; when neither dimension shrinks, nearest neighbour is used.
pub fn resample_to_latent(mask: &BinaryMask, target_h: usize, target_w: usize) -> Result<BinaryMask> {
    if target_h == 0 || target_w == 0 {
        return Err(MaskError::EmptyShape { height: target_h, width: target_w });
    }
    let (h, w) = mask.dims();
    if (h, w) == (target_h, target_w) {
        return Ok(mask.clone());
    }
    if target_h >= h && target_w >= w {
        return BinaryMask::from_fn(target_h, target_w, |i, j| mask.get(i * h / target_h, j * w / target_w));
    }
    // In units of 1/target along each axis, target cell i spans [i*h, (i+1)*h)
    // and source pixel y spans [y*target_h, (y+1)*target_h).
    let overlaps = |cell: usize, src_len: usize, dst_len: usize| -> Vec<(usize, usize)> {
        let (lo, hi) = (cell * src_len, (cell + 1) * src_len);
        let first = lo / dst_len;
        let last = (hi - 1) / dst_len;
        (first..=last)
            .map(|p| {
                let (plo, phi) = (p * dst_len, (p + 1) * dst_len);
                (p, phi.min(hi) - plo.max(lo))
            })
            .collect()
    };
    let row_cover: Vec<_> = (0..target_h).map(|i| overlaps(i, h, target_h)).collect();
    let col_cover: Vec<_> = (0..target_w).map(|j| overlaps(j, w, target_w)).collect();
    let cell_area = (h * w) as u128;
    BinaryMask::from_fn(target_h, target_w, |i, j| {
        let mut covered: u128 = 0;
        for &(y, wy) in &row_cover[i] {
            for &(x, wx) in &col_cover[j] {
                if mask.get(y, x) {
                    covered += (wy * wx) as u128;
                }
            }
        }
        2 * covered >= cell_area
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeRejection {
    EmptyMask,
    TooTall,
    TooWide,
    TooShort,
    TooNarrow,
}

impl std::fmt::Display for SizeRejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SizeRejection::EmptyMask => "mask size: empty mask",
            SizeRejection::TooTall => "mask size: bbox height above 3/4 of image height",
            SizeRejection::TooWide => "mask size: bbox width above 3/4 of image width",
            SizeRejection::TooShort => "mask size: bbox height below 1/5 of image height",
            SizeRejection::TooNarrow => "mask size: bbox width below 1/5 of image width",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeVerdict {
    Accept,
    Reject(SizeRejection),
}

impl SizeVerdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, SizeVerdict::Accept)
    }
}

/// Rejects masks whose bounding box is taller/wider than 3/4 or
/// shorter/narrower than 1/5 of the image. Comparisons are strict and done
/// in integers.
pub fn size_filter_bbox(bbox_h: usize, bbox_w: usize, image_h: usize, image_w: usize) -> SizeVerdict {
    use SizeRejection::*;
    if 4 * bbox_h > 3 * image_h {
        SizeVerdict::Reject(TooTall)
    } else if 4 * bbox_w > 3 * image_w {
        SizeVerdict::Reject(TooWide)
    } else if 5 * bbox_h < image_h {
        SizeVerdict::Reject(TooShort)
    } else if 5 * bbox_w < image_w {
        SizeVerdict::Reject(TooNarrow)
    } else {
        SizeVerdict::Accept
    }
}

pub fn size_filter(mask: &BinaryMask, image_h: usize, image_w: usize) -> Result<SizeVerdict> {
    if mask.height > image_h || mask.width > image_w {
        return Err(MaskError::OutOfBounds { mask: mask.dims(), image: (image_h, image_w) });
    }
    Ok(match mask.bbox() {
        None => SizeVerdict::Reject(SizeRejection::EmptyMask),
        Some(b) => size_filter_bbox(b.height(), b.width(), image_h, image_w),
    })
}

/// Evaluation region around an object: the bounding rectangle of the
/// dilated fine mask, minus the dilated mask itself.
///
/// A full-frame mask yields an empty region (returned, not an error).
pub fn boundary_region(fine_mask: &BinaryMask, dilate_radius: usize, rect_margin: usize) -> Result<BinaryMask> {
    if fine_mask.is_empty() {
        return Err(MaskError::EmptyMask);
    }
    let dilated = dilate(fine_mask, dilate_radius);
    let rect = to_bbox_mask(&dilated, rect_margin)?;
    rect.and_not(&dilated)
}

/// Default evaluation dilation: `ceil(0.02 * min(H, W))`.
pub fn default_eval_dilate_radius(height: usize, width: usize) -> usize {
    (0.02 * height.min(width) as f64).ceil() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Brute-force morphology straight from the definition.
    fn morph_oracle(m: &BinaryMask, op: MorphOp, r: usize) -> BinaryMask {
        let (h, w) = m.dims();
        BinaryMask::from_fn(h, w, |y, x| {
            let mut any = false;
            let mut all = true;
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    any |= m.get(yy, xx);
                    all &= m.get(yy, xx);
                }
            }
            match op {
                MorphOp::Erode => all,
                MorphOp::Dilate => any,
            }
        })
        .unwrap()
    }

    fn square(h: usize, w: usize, r0: usize, c0: usize, side: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| (r0..r0 + side).contains(&y) && (c0..c0 + side).contains(&x)).unwrap()
    }

    fn arb_mask(max: usize) -> impl Strategy<Value = BinaryMask> {
        (1..=max, 1..=max).prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<bool>(), h * w).prop_map(move |bits| BinaryMask::new(h, w, bits).unwrap())
        })
    }

    #[test]
    fn erode_radius_zero_is_identity() {
        let m = square(6, 6, 1, 2, 3);
        assert_eq!(erode(&m, 0), m);
        assert_eq!(dilate(&m, 0), m);
    }

    #[test]
    fn solid_square_erodes_to_interior() {
        // 4x4 square placed inside an 8x8 frame
        let m = square(8, 8, 2, 2, 4);
        let e = erode(&m, 1);
        assert_eq!(e, square(8, 8, 3, 3, 2));
        assert_eq!(e, morph_oracle(&m, MorphOp::Erode, 1));
        assert_eq!(e.count(), 4);
    }

    #[test]
    fn border_clipping_keeps_full_frame() {
        let full = BinaryMask::full(5, 7).unwrap();
        assert_eq!(erode(&full, 2), full);
        assert_eq!(dilate(&full, 2), full);
    }

    #[test]
    fn opening_removes_isolated_pixels() {
        let m = BinaryMask::from_fn(9, 9, |y, x| y % 3 == 1 && x % 3 == 1).unwrap();
        let cleaned = clean_reference_mask(&m, 1);
        assert!(cleaned.is_empty());
        assert_eq!(clean_reference_mask(&m, 0), m);
    }

    #[test]
    fn opening_trims_thin_protrusion() {
        // 5x5 blob with a one-pixel-wide spur to the right
        let mut m = square(10, 12, 2, 2, 5);
        for x in 7..11 {
            m.set(4, x, true);
        }
        let cleaned = clean_reference_mask(&m, 1);
        assert_eq!(cleaned, square(10, 12, 2, 2, 5));
        assert_eq!(cleaned, morph_oracle(&morph_oracle(&m, MorphOp::Erode, 1), MorphOp::Dilate, 1));
    }

    #[test]
    fn default_radii() {
        assert_eq!(default_clean_radius(512, 768), 6);
        assert_eq!(default_clean_radius(50, 80), 1);
        assert_eq!(default_eval_dilate_radius(512, 512), 11);
    }

    #[test]
    fn bbox_of_l_shape() {
        let mut m = BinaryMask::empty(8, 6).unwrap();
        for y in 2..=5 {
            m.set(y, 1, true);
        }
        for x in 1..=3 {
            m.set(5, x, true);
        }
        let boxed = to_bbox_mask(&m, 0).unwrap();
        let expected = BinaryMask::from_fn(8, 6, |y, x| (2..=5).contains(&y) && (1..=3).contains(&x)).unwrap();
        assert_eq!(boxed, expected);
        assert_eq!(boxed.count(), 12);
    }

    #[test]
    fn bbox_identity_and_clipping() {
        let rect = square(10, 10, 3, 4, 3);
        assert_eq!(to_bbox_mask(&rect, 0).unwrap(), rect);
        assert_eq!(to_bbox_mask(&rect, 20).unwrap(), BinaryMask::full(10, 10).unwrap());
        assert!(matches!(to_bbox_mask(&BinaryMask::empty(3, 3).unwrap(), 0), Err(MaskError::EmptyMask)));
    }

    #[test]
    fn resample_full_empty_and_half() {
        let full = BinaryMask::full(8, 8).unwrap();
        for (h, w) in [(4, 4), (3, 5), (16, 16), (1, 1)] {
            assert_eq!(resample_to_latent(&full, h, w).unwrap().count(), h * w);
            assert!(resample_to_latent(&BinaryMask::empty(8, 8).unwrap(), h, w).unwrap().is_empty());
        }
        let left = BinaryMask::from_fn(8, 8, |_, x| x < 4).unwrap();
        let small = resample_to_latent(&left, 4, 4).unwrap();
        assert_eq!(small, BinaryMask::from_fn(4, 4, |_, x| x < 2).unwrap());
    }

    #[test]
    fn resample_threshold_ties_set() {
        // each 2x2 cell has exactly two set pixels
        let stripes = BinaryMask::from_fn(4, 4, |_, x| x % 2 == 0).unwrap();
        assert_eq!(resample_to_latent(&stripes, 2, 2).unwrap().count(), 4);
        // one of four set -> below threshold
        let sparse = BinaryMask::from_fn(4, 4, |y, x| y % 2 == 0 && x % 2 == 0).unwrap();
        assert!(resample_to_latent(&sparse, 2, 2).unwrap().is_empty());
    }

    #[test]
    fn resample_non_integer_ratio_matches_area_oracle() {
        let m = BinaryMask::from_fn(7, 5, |y, x| (y * 3 + x * 5) % 4 < 2).unwrap();
        let (th, tw) = (3, 2);
        let out = resample_to_latent(&m, th, tw).unwrap();
        // oracle: supersample each source pixel on a th x tw sub-grid
        for i in 0..th {
            for j in 0..tw {
                let mut covered = 0usize;
                let mut total = 0usize;
                for sy in 0..7 * th {
                    for sx in 0..5 * tw {
                        if sy / 7 == i && sx / 5 == j {
                            total += 1;
                            covered += m.get(sy / th, sx / tw) as usize;
                        }
                    }
                }
                assert_eq!(out.get(i, j), 2 * covered >= total, "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn size_filter_examples() {
        assert_eq!(size_filter_bbox(800, 300, 1000, 800), SizeVerdict::Reject(SizeRejection::TooTall));
        assert_eq!(size_filter_bbox(500, 400, 1000, 800), SizeVerdict::Accept);
        assert_eq!(size_filter_bbox(19, 50, 100, 100), SizeVerdict::Reject(SizeRejection::TooShort));
        // boundaries are inclusive-accept
        assert_eq!(size_filter_bbox(75, 20, 100, 100), SizeVerdict::Accept);
        assert_eq!(size_filter_bbox(20, 75, 100, 100), SizeVerdict::Accept);
    }

    #[test]
    fn size_filter_on_masks() {
        let m = square(100, 100, 10, 10, 50);
        assert_eq!(size_filter(&m, 100, 100).unwrap(), SizeVerdict::Accept);
        assert_eq!(
            size_filter(&BinaryMask::empty(10, 10).unwrap(), 10, 10).unwrap(),
            SizeVerdict::Reject(SizeRejection::EmptyMask)
        );
        assert!(size_filter(&m, 50, 50).is_err());
    }

    #[test]
    fn boundary_region_worked_example() {
        let fine = square(10, 10, 3, 3, 4);
        // dilation fills its own rectangle exactly
        let r = boundary_region(&fine, 1, 0).unwrap();
        assert_eq!(r.count(), 0);
        // no dilation, one pixel of margin: 6x6 ring around the 4x4 block
        let r = boundary_region(&fine, 0, 1).unwrap();
        assert_eq!(r.count(), 20);
        assert_eq!(r, square(10, 10, 2, 2, 6).and_not(&fine).unwrap());
        assert!(boundary_region(&BinaryMask::empty(4, 4).unwrap(), 1, 0).is_err());
        assert!(boundary_region(&BinaryMask::full(4, 4).unwrap(), 1, 0).unwrap().is_empty());
    }

    #[test]
    fn boundary_region_of_disc_is_corners() {
        let (c, rad) = (10.0, 6.0);
        let disc = BinaryMask::from_fn(21, 21, |y, x| {
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            dy * dy + dx * dx <= rad * rad
        })
        .unwrap();
        let region = boundary_region(&disc, 1, 0).unwrap();
        let d = morph_oracle(&disc, MorphOp::Dilate, 1);
        let bb = d.bbox().unwrap();
        let expected = BinaryMask::from_fn(21, 21, |y, x| bb.contains(y, x) && !d.get(y, x)).unwrap();
        assert_eq!(region, expected);
        // all four corners of the rectangle are in the region, the center is not
        for (y, x) in
            [(bb.row_min, bb.col_min), (bb.row_min, bb.col_max), (bb.row_max, bb.col_min), (bb.row_max, bb.col_max)]
        {
            assert!(region.get(y, x));
        }
        assert!(!region.get(10, 10));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = BinaryMask::from_fn(5, 9, |y, x| (x + y) % 3 == 0).unwrap();
        m.save_png(&path).unwrap();
        assert_eq!(BinaryMask::load_png(&path).unwrap(), m);
    }

    proptest! {
        #[test]
        fn morph_matches_oracle(m in arb_mask(12), r in 0usize..4) {
            prop_assert_eq!(erode(&m, r), morph_oracle(&m, MorphOp::Erode, r));
            prop_assert_eq!(dilate(&m, r), morph_oracle(&m, MorphOp::Dilate, r));
        }

        #[test]
        fn morph_is_monotone(m in arb_mask(10), extra in proptest::collection::vec(any::<bool>(), 100), r in 0usize..3) {
            let bigger = BinaryMask::from_fn(m.height(), m.width(), |y, x| {
                m.get(y, x) || extra[(y * m.width() + x) % extra.len()]
            }).unwrap();
            prop_assert!(dilate(&m, r).is_subset_of(&dilate(&bigger, r)));
            prop_assert!(erode(&m, r).is_subset_of(&erode(&bigger, r)));
        }

        #[test]
        fn opening_is_anti_extensive(m in arb_mask(12), r in 0usize..4) {
            prop_assert!(clean_reference_mask(&m, r).is_subset_of(&m));
        }

        #[test]
        fn boundary_region_disjoint_and_contained(m in arb_mask(14), d in 0usize..3, margin in 0usize..3) {
            prop_assume!(!m.is_empty());
            let region = boundary_region(&m, d, margin).unwrap();
            let dilated = dilate(&m, d);
            prop_assert!(region.is_disjoint(&dilated));
            prop_assert!(region.is_subset_of(&to_bbox_mask(&dilated, margin).unwrap()));
        }
    }
}
