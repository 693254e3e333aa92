//! Template-matching defect detection: score maps between a photo and its
//! simulated golden die, thresholding, and pixel-level average precision.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::write_gray16;
use crate::metrics::{l1, l2, ssim, SsimParams};
use crate::raster::{Mask, PatchRegion, RasterImage};

pub const DEFAULT_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelMetric {
    L2,
    L1,
}

impl PixelMetric {
    pub fn name(self) -> &'static str {
        match self {
            PixelMetric::L2 => "l2",
            PixelMetric::L1 => "l1",
        }
    }
}

/// Patch dissimilarities for sliding-window scoring. `Ssim` scores `1 - SSIM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMetric {
    L2,
    L1,
    Ssim,
}

impl WindowMetric {
    pub fn name(self) -> &'static str {
        match self {
            WindowMetric::L2 => "l2",
            WindowMetric::L1 => "l1",
            WindowMetric::Ssim => "ssim_dissim",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [WindowMetric::L2, WindowMetric::L1, WindowMetric::Ssim]
            .into_iter()
            .find(|m| m.name() == name || (name == "ssim" && *m == WindowMetric::Ssim))
    }

    fn dissimilarity(self, a: &RasterImage, b: &RasterImage) -> Result<f64> {
        match self {
            WindowMetric::L2 => l2(a, b),
            WindowMetric::L1 => l1(a, b),
            WindowMetric::Ssim => Ok((1.0 - ssim(a, b, SsimParams::default())?).max(0.0)),
        }
    }
}

/// Per-pixel dissimilarity between a photo and a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    pub metric: String,
    pub window: Option<usize>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, metric: impl Into<String>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "score map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("score {v} is not a finite non-negative value")));
        }
        Ok(ScoreMap {
            height,
            width,
            values,
            metric: metric.into(),
            window: None,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Applies `f` to every score (useful for monotone rescaling).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<ScoreMap> {
        let mut out = ScoreMap::new(self.height, self.width, self.values.iter().map(|&v| f(v)).collect(), self.metric.clone())?;
        out.window = self.window;
        Ok(out)
    }

    pub fn extract(&self, region: &PatchRegion) -> Result<ScoreMap> {
        region.check_within(self.height, self.width)?;
        let mut values = Vec::with_capacity(region.area());
        for y in region.y0..region.y0 + region.h {
            let row = y * self.width;
            values.extend_from_slice(&self.values[row + region.x0..row + region.x0 + region.w]);
        }
        Ok(ScoreMap {
            height: region.h,
            width: region.w,
            values,
            metric: self.metric.clone(),
            window: self.window,
        })
    }
}

fn check_pair(photo: &RasterImage, simulation: &RasterImage) -> Result<()> {
    if photo.dims() != simulation.dims() {
        return Err(Error::DimensionMismatch {
            what: "photo and simulation".into(),
            expected_h: photo.height(),
            expected_w: photo.width(),
            found_h: simulation.height(),
            found_w: simulation.width(),
        });
    }
    Ok(())
}

/// Channel-mean squared (or absolute) difference at every pixel.
pub fn score_pixelwise(photo: &RasterImage, simulation: &RasterImage, metric: PixelMetric) -> Result<ScoreMap> {
    check_pair(photo, simulation)?;
    let values = photo
        .as_slice()
        .par_chunks(3)
        .zip(simulation.as_slice().par_chunks(3))
        .map(|(a, b)| {
            let s: f64 = a
                .iter()
                .zip(b)
                .map(|(p, q)| match metric {
                    PixelMetric::L2 => (p - q) * (p - q),
                    PixelMetric::L1 => (p - q).abs(),
                })
                .sum();
            s / 3.0
        })
        .collect();
    let (h, w) = photo.dims();
    ScoreMap::new(h, w, values, metric.name())
}

/// Window origins along one axis: every `stride`, plus a final edge-aligned
/// window so that every pixel is covered.
fn origins(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=len - window).step_by(stride).collect();
    if *v.last().expect("window fits") != len - window {
        v.push(len - window);
    }
    v
}

/// Index range of the sorted `origins` whose windows contain `p`.
fn covering(origins: &[usize], p: usize, window: usize) -> (usize, usize) {
    let a = origins.partition_point(|&o| o + window <= p);
    let b = origins.partition_point(|&o| o <= p);
    (a, b)
}

/// Scores each pixel with the mean patch dissimilarity over all sliding
/// windows that cover it.
pub fn score_windowed(
    photo: &RasterImage,
    simulation: &RasterImage,
    metric: WindowMetric,
    window: usize,
    stride: usize,
) -> Result<ScoreMap> {
    check_pair(photo, simulation)?;
    let (h, w) = photo.dims();
    if window == 0 || window > h || window > w {
        return Err(Error::InvalidArgument(format!("window {window} does not fit a {h}x{w} image")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("window stride must be at least 1".into()));
    }
    let ys = origins(h, window, stride);
    let xs = origins(w, window, stride);
    let windows: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    let scores = windows
        .par_iter()
        .map(|&(y, x)| {
            let r = PatchRegion::new(x, y, window, window);
            metric.dissimilarity(&photo.extract(&r)?, &simulation.extract(&r)?)
        })
        .collect::<Result<Vec<f64>>>()?;

    let (nx, ny) = (xs.len(), ys.len());
    let rx: Vec<(usize, usize)> = (0..w).map(|x| covering(&xs, x, window)).collect();
    let ry: Vec<(usize, usize)> = (0..h).map(|y| covering(&ys, y, window)).collect();
    // Sums over covering window columns, then over covering window rows.
    let rows: Vec<f64> = (0..ny)
        .flat_map(|iy| rx.iter().map(move |&(a, b)| (iy, a, b)))
        .map(|(iy, a, b)| scores[iy * nx + a..iy * nx + b].iter().sum())
        .collect();
    let values = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| {
            let (a, b) = ry[y];
            let s: f64 = (a..b).map(|iy| rows[iy * w + x]).sum();
            (s / ((b - a) * (rx[x].1 - rx[x].0)) as f64).max(0.0)
        })
        .collect();
    let mut map = ScoreMap::new(h, w, values, metric.name())?;
    map.window = Some(window);
    Ok(map)
}

/// Box-filter mean over a `(2 * radius + 1)` square, truncated at the borders.
pub fn smooth(map: &ScoreMap, radius: usize) -> ScoreMap {
    let (h, w) = map.dims();
    let mut integral = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += map.get(y, x);
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let values = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| {
            let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
            let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
            (s / ((y1 - y0) * (x1 - x0)) as f64).max(0.0)
        })
        .collect();
    ScoreMap {
        height: h,
        width: w,
        values,
        metric: map.metric.clone(),
        window: map.window,
    }
}

/// Pixels scoring strictly above `threshold`.
pub fn binarize(map: &ScoreMap, threshold: f64) -> Mask {
    let (h, w) = map.dims();
    Mask::new(h, w, map.values.iter().map(|&v| v > threshold).collect()).expect("dims match")
}

/// Precision-recall curve over descending distinct score thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct PRResult {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub average_precision: f64,
}

/// Area under the precision-recall curve. Pixels with equal scores enter the
/// detection set together.
pub fn average_precision(map: &ScoreMap, labels: &Mask) -> Result<PRResult> {
    if map.dims() != labels.dims() {
        return Err(Error::DimensionMismatch {
            what: "score map and labels".into(),
            expected_h: map.height,
            expected_w: map.width,
            found_h: labels.height(),
            found_w: labels.width(),
        });
    }
    let positives = labels.count();
    if positives == 0 {
        return Err(Error::NoPositiveLabels);
    }
    let mut order: Vec<(f64, bool)> = map.values.iter().copied().zip(labels.as_slice().iter().copied()).collect();
    order.par_sort_unstable_by(|a, b| b.0.total_cmp(&a.0));

    let mut result = PRResult {
        thresholds: Vec::new(),
        precision: Vec::new(),
        recall: Vec::new(),
        average_precision: 0.0,
    };
    let (mut tp, mut seen, mut prev_recall) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = order[i].0;
        while i < order.len() && order[i].0 == t {
            tp += order[i].1 as usize;
            seen += 1;
            i += 1;
        }
        let p = tp as f64 / seen as f64;
        let r = tp as f64 / positives as f64;
        result.average_precision += (r - prev_recall) * p;
        prev_recall = r;
        result.thresholds.push(t);
        result.precision.push(p);
        result.recall.push(r);
    }
    result.average_precision = result.average_precision.clamp(0.0, 1.0);
    Ok(result)
}

/// Whole-pixel shift that best aligns a photo to its simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentProbe {
    /// `(dx, dy)` such that `photo(x - dx, y - dy)` best matches `simulation(x, y)`.
    pub shift: (i32, i32),
    pub score_before: f64,
    pub score_after: f64,
}

impl fmt::Display for AlignmentProbe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "best shift ({}, {}): l2 {:.6} -> {:.6}",
            self.shift.0, self.shift.1, self.score_before, self.score_after
        )
    }
}

fn shifted_l2(photo: &RasterImage, simulation: &RasterImage, margin: usize, dx: i32, dy: i32) -> f64 {
    let (h, w) = photo.dims();
    let mut total = 0.0;
    for y in margin..h - margin {
        let py = (y as i64 - dy as i64) as usize;
        for x in margin..w - margin {
            let px = (x as i64 - dx as i64) as usize;
            let a = photo.pixel(py, px);
            let b = simulation.pixel(y, x);
            total += (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
        }
    }
    total / (3 * (h - 2 * margin) * (w - 2 * margin)) as f64
}

/// Exhaustive search over shifts in `[-max_shift, max_shift]^2`, scored by
/// l2 over the interior that every shift can reach. Ties go to the smaller shift.
pub fn misalignment_probe(photo: &RasterImage, simulation: &RasterImage, max_shift: usize) -> Result<AlignmentProbe> {
    check_pair(photo, simulation)?;
    let (h, w) = photo.dims();
    if 2 * max_shift >= h.min(w) {
        return Err(Error::InvalidArgument(format!("shift range {max_shift} too large for a {h}x{w} image")));
    }
    let m = max_shift as i32;
    let mut shifts: Vec<(i32, i32)> = (-m..=m).flat_map(|dy| (-m..=m).map(move |dx| (dx, dy))).collect();
    shifts.sort_by_key(|&(dx, dy)| (dx.abs() + dy.abs(), dy, dx));
    let scores: Vec<f64> = shifts
        .par_iter()
        .map(|&(dx, dy)| shifted_l2(photo, simulation, max_shift, dx, dy))
        .collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    Ok(AlignmentProbe {
        shift: shifts[best],
        score_before: scores[0],
        score_after: scores[best],
    })
}

/// Image translated so that `out(x, y) = img(x - dx, y - dy)`, replicating edges.
pub fn shift_image(img: &RasterImage, dx: i32, dy: i32) -> RasterImage {
    let (h, w) = img.dims();
    let mut out = img.clone();
    for y in 0..h {
        let sy = (y as i64 - dy as i64).clamp(0, h as i64 - 1) as usize;
        for x in 0..w {
            let sx = (x as i64 - dx as i64).clamp(0, w as i64 - 1) as usize;
            out.set_pixel(y, x, img.pixel(sy, sx));
        }
    }
    out
}

/// Writes the map as a 16-bit grayscale PNG scaled linearly from 0 to the map
/// maximum, with the scale recorded in a `.txt` sidecar. Returns the sidecar path.
pub fn write_score_map(path: &Path, map: &ScoreMap) -> Result<PathBuf> {
    let max = map.max();
    let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
    let values: Vec<u16> = map.values.iter().map(|&v| (v * scale).round() as u16).collect();
    write_gray16(path, map.height, map.width, &values)?;
    let sidecar = path.with_extension("txt");
    let window = map.window.map_or("none".to_string(), |w| w.to_string());
    let text = format!(
        "metric = {}\nwindow = {window}\nscore_at_0 = 0\nscore_at_65535 = {max:e}\n",
        map.metric
    );
    fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
    Ok(sidecar)
}

/// Black, red, yellow, white ramp over `[0, max]`.
pub fn heatmap(map: &ScoreMap, max: Option<f64>) -> RasterImage {
    let top = max.unwrap_or_else(|| map.max());
    let (h, w) = map.dims();
    let mut data = Vec::with_capacity(h * w * 3);
    for &v in &map.values {
        let t = if top > 0.0 { (v / top).clamp(0.0, 1.0) } else { 0.0 } * 3.0;
        data.extend([t.min(1.0), (t - 1.0).clamp(0.0, 1.0), (t - 2.0).clamp(0.0, 1.0)]);
    }
    RasterImage::new(h, w, data).expect("ramp stays in range")
}

/// Places equally sized images side by side with a white gutter.
pub fn montage(images: &[&RasterImage], gutter: usize) -> Result<RasterImage> {
    let first = images.first().ok_or_else(|| Error::Empty("montage needs images".into()))?;
    let (h, w) = first.dims();
    let n = images.len();
    let mut out = RasterImage::filled(h, n * w + (n - 1) * gutter, [1.0; 3]);
    for (i, img) in images.iter().enumerate() {
        check_pair(first, img)?;
        out.paste(img, 0, i * (w + gutter))?;
    }
    Ok(out)
}

/// White-on-black rendering of a detection mask.
pub fn mask_image(mask: &Mask) -> RasterImage {
    let (h, w) = mask.dims();
    let data = mask.as_slice().iter().flat_map(|&on| [on as u8 as f64; 3]).collect();
    RasterImage::new(h, w, data).expect("binary values")
}

/// Target photo, simulation and binarized detections in one row.
pub fn triptych(photo: &RasterImage, simulation: &RasterImage, detections: &Mask) -> Result<RasterImage> {
    montage(&[photo, simulation, &mask_image(detections)], 4)
}
