//! Similarity and dissimilarity measures between simulations and photos,
//! patchwise aggregation and cross-metric correlation.
//!
//! RGB metrics compare two [`RasterImage`]s. Classification metrics compare
//! per-pixel [`Logits`] or predicted indices against a quantized target.

use crate::error::{Error, Result};
use crate::raster::{ensure_same_dims, Logits, Mask, QuantizedImage, RasterImage};
use crate::stats::{mean, pairwise_sum, std_dev};

/// Mean absolute error over all pixels and channels.
pub fn l1(pred: &RasterImage, target: &RasterImage) -> Result<f64> {
    ensure_same_dims("l1", target.dims(), pred.dims())?;
    let diffs: Vec<f64> = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (a - b).abs())
        .collect();
    Ok(mean(&diffs))
}

/// Mean squared error over all pixels and channels.
pub fn l2(pred: &RasterImage, target: &RasterImage) -> Result<f64> {
    ensure_same_dims("l2", target.dims(), pred.dims())?;
    let diffs: Vec<f64> = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    Ok(mean(&diffs))
}

/// Peak signal-to-noise ratio in decibels. Identical inputs give `+inf`.
pub fn psnr(pred: &RasterImage, target: &RasterImage, max_val: f64) -> Result<f64> {
    let mse = l2(pred, target)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 8,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Structural similarity averaged over every `window x window` position
/// (stride 1, uniform weights, population moments) and over the three channels.
pub fn ssim(pred: &RasterImage, target: &RasterImage, params: SsimParams) -> Result<f64> {
    ensure_same_dims("ssim", target.dims(), pred.dims())?;
    let (h, w) = pred.dims();
    let win = params.window;
    if win == 0 || h < win || w < win {
        return Err(Error::InvalidArgument(format!(
            "ssim window {win} larger than {h}x{w} patch"
        )));
    }
    let c1 = params.k1 * params.k1;
    let c2 = params.k2 * params.k2;
    let n = (win * win) as f64;
    let mut channel_means = [0.0; 3];
    for (ch, out) in channel_means.iter_mut().enumerate() {
        // summed-area tables of x, y, x^2, y^2 and xy
        let stride = w + 1;
        let mut sat = vec![[0.0f64; 5]; (h + 1) * stride];
        for y in 0..h {
            let mut row = [0.0f64; 5];
            for x in 0..w {
                let a = pred.as_slice()[(y * w + x) * 3 + ch];
                let b = target.as_slice()[(y * w + x) * 3 + ch];
                let v = [a, b, a * a, b * b, a * b];
                for k in 0..5 {
                    row[k] += v[k];
                    sat[(y + 1) * stride + x + 1][k] = sat[y * stride + x + 1][k] + row[k];
                }
            }
        }
        let mut values = Vec::with_capacity((h - win + 1) * (w - win + 1));
        for y in 0..=h - win {
            for x in 0..=w - win {
                let mut s = [0.0; 5];
                for (k, sk) in s.iter_mut().enumerate() {
                    *sk = sat[(y + win) * stride + x + win][k] - sat[y * stride + x + win][k]
                        - sat[(y + win) * stride + x][k]
                        + sat[y * stride + x][k];
                }
                let mx = s[0] / n;
                let my = s[1] / n;
                let vx = (s[2] / n - mx * mx).max(0.0);
                let vy = (s[3] / n - my * my).max(0.0);
                let cxy = s[4] / n - mx * my;
                values.push(
                    ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)),
                );
            }
        }
        *out = mean(&values);
    }
    Ok(mean(&channel_means))
}

fn check_targets(logits: &Logits, target: &QuantizedImage) -> Result<()> {
    ensure_same_dims("class logits", target.dims(), logits.dims())?;
    if let Some(&i) = target.as_slice().iter().find(|&&i| i as usize >= logits.classes()) {
        return Err(Error::ClassOutOfRange {
            index: i as usize,
            classes: logits.classes(),
        });
    }
    Ok(())
}

/// Numerically stable `log softmax(scores)[target]`.
pub(crate) fn log_softmax_at(scores: &[f64], target: usize) -> f64 {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    scores[target] - lse
}

fn per_pixel_log_probs(logits: &Logits, target: &QuantizedImage) -> Vec<f64> {
    let (h, w) = logits.dims();
    let n = h * w;
    let k = logits.classes();
    let data = logits.as_slice();
    let mut scores = vec![0.0; k];
    (0..n)
        .map(|i| {
            for (c, s) in scores.iter_mut().enumerate() {
                *s = data[c * n + i];
            }
            log_softmax_at(&scores, target.as_slice()[i] as usize)
        })
        .collect()
}

/// Mean categorical cross entropy over pixels.
pub fn cross_entropy(logits: &Logits, target: &QuantizedImage) -> Result<f64> {
    check_targets(logits, target)?;
    let nll: Vec<f64> = per_pixel_log_probs(logits, target).into_iter().map(|l| -l).collect();
    Ok(mean(&nll))
}

/// Mean focal loss `-(1 - p_t)^gamma * log p_t` over pixels (unit class weight).
pub fn focal(logits: &Logits, target: &QuantizedImage, gamma: f64) -> Result<f64> {
    check_targets(logits, target)?;
    let losses: Vec<f64> = per_pixel_log_probs(logits, target)
        .into_iter()
        .map(|lp| {
            let p = lp.exp();
            -(1.0 - p).powf(gamma) * lp
        })
        .collect();
    Ok(mean(&losses))
}

/// Palette-index distance, optionally wrapping around the palette ends.
pub fn index_distance(a: usize, b: usize, classes: usize, cyclic: bool) -> usize {
    let d = a.abs_diff(b);
    if cyclic {
        d.min(classes - d)
    } else {
        d
    }
}

/// Fraction of pixels whose predicted index lies within `k` palette
/// positions of the target.
pub fn k_off_accuracy(
    pred: &QuantizedImage,
    target: &QuantizedImage,
    k: usize,
    classes: usize,
    cyclic: bool,
) -> Result<f64> {
    ensure_same_dims("k-off", target.dims(), pred.dims())?;
    let hits = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .filter(|(&p, &t)| index_distance(p as usize, t as usize, classes, cyclic) <= k)
        .count();
    Ok(hits as f64 / pred.as_slice().len() as f64)
}

/// Dice coefficient; two empty masks score 1.
pub fn dice(pred: &Mask, target: &Mask) -> Result<f64> {
    ensure_same_dims("dice", target.dims(), pred.dims())?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.as_slice().iter().zip(target.as_slice()) {
        inter += (p && t) as usize;
        a += p as usize;
        b += t as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Whether larger metric values indicate a better simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
}

/// Per-patch values of one metric with their summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation across patches.
    pub sd: f64,
    pub direction: Direction,
    /// Non-finite values (e.g. infinite PSNR) left out of mean and SD.
    pub excluded: usize,
}

pub fn aggregate(metric: &str, values: Vec<f64>, direction: Direction) -> MetricReport {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    MetricReport {
        metric: metric.to_string(),
        mean: mean(&finite),
        sd: std_dev(&finite),
        excluded: values.len() - finite.len(),
        values,
        direction,
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let sxy: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let sxx: Vec<f64> = x.iter().map(|a| (a - mx) * (a - mx)).collect();
    let syy: Vec<f64> = y.iter().map(|b| (b - my) * (b - my)).collect();
    pairwise_sum(&sxy) / (pairwise_sum(&sxx) * pairwise_sum(&syy)).sqrt()
}

/// 1-based ranks; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Pearson and Spearman correlation matrices between metrics, where each
/// metric contributes one value per model.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTable {
    pub metrics: Vec<String>,
    pub pearson: Vec<Vec<f64>>,
    pub spearman: Vec<Vec<f64>>,
}

impl CorrelationTable {
    /// Single matrix with Pearson above the diagonal and Spearman below.
    pub fn combined(&self) -> Vec<Vec<f64>> {
        let n = self.metrics.len();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| match i.cmp(&j) {
                        std::cmp::Ordering::Less => self.pearson[i][j],
                        std::cmp::Ordering::Greater => self.spearman[i][j],
                        std::cmp::Ordering::Equal => 1.0,
                    })
                    .collect()
            })
            .collect()
    }
}

/// `columns[m][i]` is the value of metric `m` for model `i`.
pub fn correlate(metrics: &[String], columns: &[Vec<f64>]) -> Result<CorrelationTable> {
    if metrics.len() != columns.len() {
        return Err(Error::InvalidArgument("one column per metric is required".into()));
    }
    let models = columns.first().map_or(0, Vec::len);
    if models < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs at least 2 models, got {models}"
        )));
    }
    if columns.iter().any(|c| c.len() != models) {
        return Err(Error::InvalidArgument("metric columns differ in length".into()));
    }
    let n = metrics.len();
    let mut p = vec![vec![1.0; n]; n];
    let mut s = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            p[i][j] = pearson(&columns[i], &columns[j]);
            p[j][i] = p[i][j];
            s[i][j] = spearman(&columns[i], &columns[j]);
            s[j][i] = s[i][j];
        }
    }
    Ok(CorrelationTable {
        metrics: metrics.to_vec(),
        pearson: p,
        spearman: s,
    })
}

/// Patch metrics usable for sliding-window scoring and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchMetric {
    L1,
    L2,
    Psnr,
    Ssim,
}

impl PatchMetric {
    pub fn name(self) -> &'static str {
        match self {
            PatchMetric::L1 => "l1",
            PatchMetric::L2 => "l2",
            PatchMetric::Psnr => "psnr",
            PatchMetric::Ssim => "ssim",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            PatchMetric::L1 | PatchMetric::L2 => Direction::LowerIsBetter,
            PatchMetric::Psnr | PatchMetric::Ssim => Direction::HigherIsBetter,
        }
    }

    pub fn evaluate(self, pred: &RasterImage, target: &RasterImage) -> Result<f64> {
        match self {
            PatchMetric::L1 => l1(pred, target),
            PatchMetric::L2 => l2(pred, target),
            PatchMetric::Psnr => psnr(pred, target, 1.0),
            PatchMetric::Ssim => ssim(pred, target, SsimParams::default()),
        }
    }
}
