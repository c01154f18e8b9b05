//! Scene-fidelity evaluation: distances between source and result computed
//! only on the band between the object's bounding rectangle and its dilated
//! mask, plus report and 2AFC trial emission.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{BridgeError, RemoteBackend};
use crate::lattice::{LatentGrid, LatticeError};
use crate::maskops::{self, BinaryMask, MaskError};
use crate::rng;

/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("images differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("mask {mask:?} does not match image {image:?}")]
    MaskShape { mask: (usize, usize), image: (usize, usize) },
    #[error("fine mask is empty")]
    EmptyMask,
    #[error("evaluation region is empty")]
    EmptyRegion,
    #[error("metric {0:?} needs a bridge backend")]
    NeedsBackend(String),
    #[error("report has no rows")]
    NoRows,
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MetricKind {
    Mse,
    /// `1 - SSIM` over masked 7x7 windows.
    SsimDistance,
    /// Evaluated by the bridge under this name (e.g. `lpips`, `dreamsim`).
    Remote(String),
}

impl MetricKind {
    pub fn id(&self) -> &str {
        match self {
            MetricKind::Mse => "mse",
            MetricKind::SsimDistance => "1-ssim",
            MetricKind::Remote(name) => name,
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for MetricKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(MetricKind::Mse),
            "1-ssim" | "ssim" => Ok(MetricKind::SsimDistance),
            "lpips" | "dreamsim" => Ok(MetricKind::Remote(s.to_string())),
            other => match other.strip_prefix("remote:") {
                Some(name) if !name.is_empty() => Ok(MetricKind::Remote(name.to_string())),
                _ => Err(EvalError::UnknownMetric(other.to_string())),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegionParams {
    /// `None` uses `ceil(0.02 * min(H, W))`.
    pub dilate_radius: Option<usize>,
    pub rect_margin: usize,
}

impl RegionParams {
    pub fn resolve_dilate(&self, height: usize, width: usize) -> usize {
        self.dilate_radius.unwrap_or_else(|| maskops::default_eval_dilate_radius(height, width))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionScore {
    pub value: f64,
    pub pixel_count: usize,
}

/// Evaluation region for `fine_mask`; errors when it is empty.
pub fn evaluation_region(fine_mask: &BinaryMask, params: &RegionParams) -> Result<BinaryMask> {
    if fine_mask.is_empty() {
        return Err(EvalError::EmptyMask);
    }
    let (h, w) = fine_mask.dims();
    let region = maskops::boundary_region(fine_mask, params.resolve_dilate(h, w), params.rect_margin)?;
    if region.is_empty() {
        return Err(EvalError::EmptyRegion);
    }
    Ok(region)
}

/// Scene-fidelity distance between `source` and `result` on the boundary
/// region of `fine_mask`. Remote metrics need `backend`.
pub fn region_metric(
    source: &LatentGrid,
    result: &LatentGrid,
    fine_mask: &BinaryMask,
    metric: &MetricKind,
    params: &RegionParams,
    backend: Option<&RemoteBackend>,
) -> Result<RegionScore> {
    if source.shape() != result.shape() {
        return Err(EvalError::ShapeMismatch(source.shape(), result.shape()));
    }
    let image_dims = (source.height(), source.width());
    if fine_mask.dims() != image_dims {
        return Err(EvalError::MaskShape { mask: fine_mask.dims(), image: image_dims });
    }
    let region = evaluation_region(fine_mask, params)?;
    let value = match metric {
        MetricKind::Mse => masked_mse(source, result, &region),
        MetricKind::SsimDistance => 1.0 - masked_ssim(source, result, &region),
        MetricKind::Remote(name) => {
            let backend = backend.ok_or_else(|| EvalError::NeedsBackend(name.clone()))?;
            backend.with_session(|s| s.metric(name, source, result, &region))?
        }
    };
    Ok(RegionScore { value, pixel_count: region.count() })
}

/// Mean over region pixels of the channel-averaged squared difference.
pub fn masked_mse(a: &LatentGrid, b: &LatentGrid, region: &BinaryMask) -> f64 {
    let c = a.channels();
    let positions = region.set_positions();
    let plane = a.plane_len();
    let mut acc = 0.0;
    for &p in &positions {
        for ch in 0..c {
            let d = a.data()[ch * plane + p] - b.data()[ch * plane + p];
            acc += d * d;
        }
    }
    acc / (positions.len() * c) as f64
}

/// Mean SSIM over region pixels and channels. Each window only uses pixels
/// that are both inside the frame and inside the region, so nothing outside
/// the region influences the score.
pub fn masked_ssim(a: &LatentGrid, b: &LatentGrid, region: &BinaryMask) -> f64 {
    let (c, h, w) = a.shape();
    let half = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if !region.get(y, x) {
                    continue;
                }
                let (mut sa, mut sb, mut saa, mut sbb, mut sab, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for wy in y.saturating_sub(half)..(y + half + 1).min(h) {
                    for wx in x.saturating_sub(half)..(x + half + 1).min(w) {
                        if !region.get(wy, wx) {
                            continue;
                        }
                        let (va, vb) = (a.get(ch, wy, wx), b.get(ch, wy, wx));
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                        n += 1.0;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    total / count as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub region_pixel_count: usize,
    pub metric_id: String,
    pub value: f64,
}

impl EvalRow {
    pub fn is_flagged(&self) -> bool {
        !self.value.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean: f64,
    pub median: f64,
    /// Rows that entered the aggregates.
    pub counted: usize,
    /// Rows excluded for a non-finite value.
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// `None` when every row is flagged.
    pub aggregates: Option<Aggregates>,
}

impl EvalReport {
    pub fn new(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(EvalError::NoRows);
        }
        let aggregates = aggregate(&rows);
        Ok(Self { rows, aggregates })
    }
}

pub fn aggregate(rows: &[EvalRow]) -> Option<Aggregates> {
    let mut values: Vec<f64> = rows.iter().filter(|r| !r.is_flagged()).map(|r| r.value).collect();
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let median = if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) };
    Some(Aggregates { mean: values.iter().sum::<f64>() / n as f64, median, counted: n, flagged: rows.len() - n })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    id: &'a str,
    region_pixel_count: String,
    metric_id: &'a str,
    value: String,
    status: &'a str,
}

/// Writes the report as CSV (rows, then `mean` and `median` lines) and JSON.
pub fn emit_report(report: &EvalReport, csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
    fs::write(csv_path, report_csv(report)?)?;
    fs::write(json_path, serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

pub fn report_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &report.rows {
        w.serialize(CsvRow {
            id: &row.id,
            region_pixel_count: row.region_pixel_count.to_string(),
            metric_id: &row.metric_id,
            value: row.value.to_string(),
            status: if row.is_flagged() { "flagged" } else { "ok" },
        })?;
    }
    let metric = report.rows.first().map(|r| r.metric_id.as_str()).unwrap_or("");
    if let Some(agg) = &report.aggregates {
        for (name, value) in [("mean", agg.mean), ("median", agg.median)] {
            w.serialize(CsvRow {
                id: name,
                region_pixel_count: String::new(),
                metric_id: metric,
                value: value.to_string(),
                status: "aggregate",
            })?;
        }
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One two-alternative forced-choice trial. The judge itself is external.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub pair_id: String,
    pub left_method: String,
    pub right_method: String,
    pub seed: u64,
}

/// Orders two methods left/right by a coin flip from `seed`.
pub fn make_trial(pair_id: &str, method_a: &str, method_b: &str, seed: u64) -> TrialRecord {
    let swap = rng::uniform_below(&mut rng::seeded(seed), 2) == 1;
    let (left, right) = if swap { (method_b, method_a) } else { (method_a, method_b) };
    TrialRecord { pair_id: pair_id.to_string(), left_method: left.to_string(), right_method: right.to_string(), seed }
}

/// Side-by-side concatenation `[reference | source | left | right]`. Inputs
/// shorter than the tallest are padded with zeros at the bottom.
pub fn concat_trial_images(images: [&LatentGrid; 4]) -> Result<LatentGrid> {
    let c = images[0].channels();
    if let Some(bad) = images.iter().find(|g| g.channels() != c) {
        return Err(EvalError::ShapeMismatch(images[0].shape(), bad.shape()));
    }
    let h = images.iter().map(|g| g.height()).max().unwrap_or(0);
    let offsets: Vec<usize> = images
        .iter()
        .scan(0, |acc, g| {
            let start = *acc;
            *acc += g.width();
            Some(start)
        })
        .collect();
    let total_w = offsets[3] + images[3].width();
    Ok(LatentGrid::from_fn(c, h, total_w, |ch, y, x| {
        let i = offsets.iter().rposition(|&o| o <= x).expect("offset 0 exists");
        let g = images[i];
        let lx = x - offsets[i];
        if y < g.height() {
            g.get(ch, y, lx)
        } else {
            0.0
        }
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_mask() -> BinaryMask {
        BinaryMask::from_fn(10, 10, |y, x| (3..7).contains(&y) && (3..7).contains(&x)).unwrap()
    }

    fn image(seed: u64) -> LatentGrid {
        let mut r = rng::seeded(seed);
        LatentGrid::from_fn(3, 10, 10, |_, _, _| rng::unit_f64(&mut r)).unwrap()
    }

    #[test]
    fn identical_images_score_zero() {
        let img = image(1);
        let p = RegionParams { dilate_radius: Some(0), rect_margin: 1 };
        for m in [MetricKind::Mse, MetricKind::SsimDistance] {
            let s = region_metric(&img, &img, &square_mask(), &m, &p, None).unwrap();
            assert!(s.value.abs() < 1e-12, "{m}: {}", s.value);
            assert_eq!(s.pixel_count, 20);
        }
    }

    #[test]
    fn single_pixel_mse() {
        let src = LatentGrid::zeros(1, 10, 10).unwrap();
        let mut res = src.clone();
        // (2, 2) is a corner of the 6x6 rectangle, outside the 4x4 mask
        res.set(0, 2, 2, 0.5);
        let p = RegionParams { dilate_radius: Some(0), rect_margin: 1 };
        let s = region_metric(&src, &res, &square_mask(), &MetricKind::Mse, &p, None).unwrap();
        assert_eq!(s.value, 0.25 / 20.0);
    }

    #[test]
    fn remote_metric_without_backend() {
        let img = image(2);
        let m = MetricKind::Remote("lpips".into());
        let p = RegionParams { dilate_radius: Some(0), rect_margin: 1 };
        assert!(matches!(region_metric(&img, &img, &square_mask(), &m, &p, None), Err(EvalError::NeedsBackend(_))));
    }

    #[test]
    fn empty_region_is_an_error() {
        let img = image(3);
        let p = RegionParams { dilate_radius: Some(1), rect_margin: 0 };
        assert!(matches!(
            region_metric(&img, &img, &square_mask(), &MetricKind::Mse, &p, None),
            Err(EvalError::EmptyRegion)
        ));
    }

    #[test]
    fn aggregates() {
        let row = |id: &str, v| EvalRow { id: id.into(), region_pixel_count: 4, metric_id: "mse".into(), value: v };
        let r = EvalReport::new(vec![row("a", 0.1), row("b", 0.2), row("c", 0.6)]).unwrap();
        let agg = r.aggregates.unwrap();
        assert!((agg.mean - 0.3).abs() < 1e-15);
        assert_eq!(agg.median, 0.2);
        let r = EvalReport::new(vec![row("a", 0.7), row("b", f64::NAN)]).unwrap();
        let agg = r.aggregates.unwrap();
        assert_eq!((agg.mean, agg.median, agg.counted, agg.flagged), (0.7, 0.7, 1, 1));
        assert!(EvalReport::new(vec![]).is_err());
    }

    #[test]
    fn csv_quotes_and_orders_columns() {
        let rows = vec![EvalRow { id: "a,\"b\"".into(), region_pixel_count: 3, metric_id: "mse".into(), value: 0.5 }];
        let text = report_csv(&EvalReport::new(rows).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,region_pixel_count,metric_id,value,status");
        assert_eq!(lines[1], "\"a,\"\"b\"\"\",3,mse,0.5,ok");
        assert_eq!(lines[2], "mean,,mse,0.5,aggregate");
        assert_eq!(lines[3], "median,,mse,0.5,aggregate");
    }

    #[test]
    fn trials_are_seeded_and_concatenated() {
        let t = make_trial("p1", "ours", "baseline", 9);
        assert_eq!(t, make_trial("p1", "ours", "baseline", 9));
        let methods = [t.left_method.as_str(), t.right_method.as_str()];
        assert!(methods.contains(&"ours") && methods.contains(&"baseline"));
        let a = LatentGrid::filled(3, 4, 2, 1.0).unwrap();
        let b = LatentGrid::filled(3, 3, 3, 2.0).unwrap();
        let cat = concat_trial_images([&a, &b, &a, &b]).unwrap();
        assert_eq!(cat.shape(), (3, 4, 10));
        assert_eq!(cat.get(0, 0, 2), 2.0);
        assert_eq!(cat.get(0, 3, 2), 0.0);
        assert_eq!(cat.get(0, 3, 5), 1.0);
    }

    #[test]
    fn metric_names_parse() {
        assert_eq!("mse".parse::<MetricKind>().unwrap(), MetricKind::Mse);
        assert_eq!("dreamsim".parse::<MetricKind>().unwrap().id(), "dreamsim");
        assert_eq!("remote:clip".parse::<MetricKind>().unwrap(), MetricKind::Remote("clip".into()));
        assert!("psnr".parse::<MetricKind>().is_err());
    }
}
