//! k-means colour palettes ordered along a short open path through RGB space.
//!
//! Ordering the palette so that neighbouring indices hold similar colours is
//! what makes the k-off accuracy metric meaningful.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{QuantizedImage, RasterImage, MAX_CLASSES};

pub const DEFAULT_K: usize = 64;
pub const DEFAULT_SAMPLE_SIZE: usize = 1_000_000;
const MAX_ITERATIONS: usize = 100;
const TOLERANCE: f64 = 1e-6;
/// Centroids are stored with this many decimals so files and memory agree.
const DECIMALS: f64 = 1e6;

pub type Rgb = [f64; 3];

fn dist2(a: &Rgb, b: &Rgb) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn dist(a: &Rgb, b: &Rgb) -> f64 {
    dist2(a, b).sqrt()
}

/// Index of the nearest centroid; ties resolve to the lowest index.
pub fn nearest(centroids: &[Rgb], p: &Rgb) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(c, p);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Ordered colour palette.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    centroids: Vec<Rgb>,
    order_cost: f64,
}

impl Palette {
    /// Wraps centroids in the given order without reordering them.
    pub fn from_ordered(centroids: Vec<Rgb>) -> Result<Self> {
        if centroids.len() < 2 || centroids.len() > MAX_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "palette size {} outside [2, {MAX_CLASSES}]",
                centroids.len()
            )));
        }
        for (i, c) in centroids.iter().enumerate() {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!("centroid {i} outside [0, 1]")));
            }
            if centroids[..i].contains(c) {
                return Err(Error::InvalidArgument(format!("centroid {i} duplicates an earlier entry")));
            }
        }
        let order_cost = path_cost(&centroids);
        Ok(Palette {
            centroids,
            order_cost,
        })
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn centroids(&self) -> &[Rgb] {
        &self.centroids
    }

    pub fn color(&self, index: usize) -> Rgb {
        self.centroids[index]
    }

    /// Total Euclidean length of the open path through the centroids in order.
    pub fn order_cost(&self) -> f64 {
        self.order_cost
    }

    /// Stable 64-bit FNV-1a digest of the centroid values.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for c in &self.centroids {
            for v in c {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, c) in self.centroids.iter().enumerate() {
            writeln!(s, "{i} {:.6} {:.6} {:.6}", c[0], c[1], c[2]).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut centroids = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::InvalidArgument(format!("palette line {}: {line:?}", line_no + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(bad());
            }
            let idx: usize = fields[0].parse().map_err(|_| bad())?;
            if idx != centroids.len() {
                return Err(bad());
            }
            let mut rgb = [0.0; 3];
            for (c, f) in rgb.iter_mut().zip(&fields[1..]) {
                *c = f.parse().map_err(|_| bad())?;
            }
            centroids.push(rgb);
        }
        Palette::from_ordered(centroids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Palette::from_text(&text)
    }
}

fn path_cost(points: &[Rgb]) -> f64 {
    points.windows(2).map(|w| dist(&w[0], &w[1])).sum()
}

/// Result of Lloyd's algorithm on a point sample.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Vec<Rgb>,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia: Vec<f64>,
}

fn assign(points: &[Rgb], centroids: &[Rgb]) -> Vec<(usize, f64)> {
    points
        .par_iter()
        .with_min_len(4096)
        .map(|p| {
            let i = nearest(centroids, p);
            (i, dist2(&centroids[i], p))
        })
        .collect()
}

fn kmeans_plus_plus(points: &[Rgb], k: usize, rng: &mut ChaCha8Rng) -> Vec<Rgb> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            points[pick]
        } else {
            points[rng.gen_range(0..points.len())]
        };
        centroids.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &next));
        }
    }
    centroids
}

/// Lloyd's iterations from k-means++ seeding. Empty clusters are re-seeded at
/// the sample point farthest from its assigned centroid.
pub fn kmeans(points: &[Rgb], k: usize, rng: &mut ChaCha8Rng) -> Result<KMeans> {
    if k < 2 {
        return Err(Error::InvalidArgument("k-means needs k >= 2".into()));
    }
    if points.is_empty() {
        return Err(Error::Empty("k-means sample".into()));
    }
    let mut centroids = kmeans_plus_plus(points, k, rng);
    let mut inertia = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let assignment = assign(points, &centroids);
        let dists: Vec<f64> = assignment.iter().map(|a| a.1).collect();
        inertia.push(crate::stats::pairwise_sum(&dists));

        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &(c, _)) in points.iter().zip(&assignment) {
            for ch in 0..3 {
                sums[c][ch] += p[ch];
            }
            counts[c] += 1;
        }
        let mut next = centroids.clone();
        let mut taken = vec![false; points.len()];
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                next[c] = [sums[c][0] / n, sums[c][1] / n, sums[c][2] / n];
            } else {
                let far = assignment
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i);
                if let Some(i) = far {
                    taken[i] = true;
                    next[c] = points[i];
                }
            }
        }
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| dist(a, b))
            .fold(0.0, f64::max);
        centroids = next;
        if shift < TOLERANCE {
            break;
        }
    }
    Ok(KMeans { centroids, inertia })
}

/// Nudges coincident centroids apart so that every palette entry is unique.
fn repair_duplicates(centroids: &mut [Rgb]) {
    for i in 1..centroids.len() {
        let mut step = 1;
        while centroids[..i].contains(&centroids[i]) {
            let delta = step as f64 / DECIMALS;
            let c = centroids[i];
            let mut moved = c;
            for ch in 0..3 {
                moved[ch] = if c[ch] + delta <= 1.0 { c[ch] + delta } else { c[ch] - delta };
            }
            centroids[i] = moved;
            step += 1;
        }
    }
}

/// Fits a `k`-colour palette on a uniform random pixel sample of `photo`
/// and orders it with [`order_palette`].
pub fn fit_palette(photo: &RasterImage, k: usize, sample_size: usize, seed: u64) -> Result<Palette> {
    if k < 2 || k > MAX_CLASSES {
        return Err(Error::InvalidArgument(format!("k={k} outside [2, {MAX_CLASSES}]")));
    }
    let n = photo.pixel_count();
    if sample_size == 0 || sample_size > n {
        return Err(Error::InvalidArgument(format!(
            "sample size {sample_size} must be in [1, {n}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = photo.as_slice();
    let px = |i: usize| [data[3 * i], data[3 * i + 1], data[3 * i + 2]];
    let points: Vec<Rgb> = if sample_size == n {
        (0..n).map(px).collect()
    } else {
        let mut idx = index::sample(&mut rng, n, sample_size).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(px).collect()
    };
    let mut centroids = kmeans(&points, k, &mut rng)?.centroids;
    for c in &mut centroids {
        for v in c.iter_mut() {
            *v = ((*v * DECIMALS).round() / DECIMALS).clamp(0.0, 1.0);
        }
    }
    repair_duplicates(&mut centroids);
    order_palette(centroids)
}

/// Orders centroids along a short open path: nearest-neighbour construction
/// from every start, each refined with 2-opt and or-opt moves until neither
/// improves, keeping the cheapest path.
pub fn order_palette(centroids: Vec<Rgb>) -> Result<Palette> {
    let n = centroids.len();
    if n < 3 {
        return Err(Error::InvalidArgument("ordering needs at least 3 centroids".into()));
    }
    let d: Vec<Vec<f64>> = centroids
        .iter()
        .map(|a| centroids.iter().map(|b| dist(a, b)).collect())
        .collect();
    let identity: Vec<usize> = (0..n).collect();
    let mut best = identity.clone();
    let mut best_cost = tour_cost(&identity, &d);
    for start in 0..n {
        let mut path = nearest_neighbour_path(start, &d);
        while two_opt(&mut path, &d) | or_opt(&mut path, &d) {}
        let cost = tour_cost(&path, &d);
        if cost < best_cost - 1e-12 {
            best_cost = cost;
            best = path;
        }
    }
    let ordered = best.iter().map(|&i| centroids[i]).collect();
    Palette::from_ordered(ordered)
}

fn tour_cost(path: &[usize], d: &[Vec<f64>]) -> f64 {
    path.windows(2).map(|w| d[w[0]][w[1]]).sum()
}

fn nearest_neighbour_path(start: usize, d: &[Vec<f64>]) -> Vec<usize> {
    let n = d.len();
    let mut visited = vec![false; n];
    let mut path = Vec::with_capacity(n);
    let mut cur = start;
    visited[cur] = true;
    path.push(cur);
    for _ in 1..n {
        let next = (0..n)
            .filter(|&j| !visited[j])
            .min_by(|&a, &b| d[cur][a].total_cmp(&d[cur][b]))
            .unwrap();
        visited[next] = true;
        path.push(next);
        cur = next;
    }
    path
}

/// 2-opt on an open path. Reversing `path[i..=j]` replaces edge
/// `(i-1, i)` and `(j, j+1)`; a missing edge at either end costs nothing,
/// so prefix and suffix reversals move the path endpoints.
fn two_opt(path: &mut [usize], d: &[Vec<f64>]) -> bool {
    let n = path.len();
    let mut any = false;
    loop {
        let mut improved = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let mut delta = 0.0;
                if i > 0 {
                    delta += d[path[i - 1]][path[j]] - d[path[i - 1]][path[i]];
                }
                if j + 1 < n {
                    delta += d[path[i]][path[j + 1]] - d[path[j]][path[j + 1]];
                }
                if delta < -1e-12 {
                    path[i..=j].reverse();
                    improved = true;
                }
            }
        }
        if !improved {
            return any;
        }
        any = true;
    }
}

/// Or-opt: relocates a segment of up to three nodes, optionally reversed,
/// to any other gap of the path. Applies the first improving move found.
fn or_opt(path: &mut Vec<usize>, d: &[Vec<f64>]) -> bool {
    let n = path.len();
    let edge = |a: Option<usize>, b: Option<usize>| match (a, b) {
        (Some(a), Some(b)) => d[a][b],
        _ => 0.0,
    };
    for len in 1..=3.min(n - 1) {
        for i in 0..=n - len {
            let j = i + len - 1;
            let before = i.checked_sub(1).map(|k| path[k]);
            let after = path.get(j + 1).copied();
            let removal = edge(before, Some(path[i])) + edge(Some(path[j]), after) - edge(before, after);
            let rest: Vec<usize> = path[..i].iter().chain(&path[j + 1..]).copied().collect();
            for k in 0..=rest.len() {
                if k == i {
                    continue;
                }
                let left = k.checked_sub(1).map(|k| rest[k]);
                let right = rest.get(k).copied();
                for reversed in [false, true] {
                    let (first, last) = if reversed { (path[j], path[i]) } else { (path[i], path[j]) };
                    let insertion = edge(left, Some(first)) + edge(Some(last), right) - edge(left, right);
                    if insertion - removal < -1e-12 {
                        let mut seg: Vec<usize> = path[i..=j].to_vec();
                        if reversed {
                            seg.reverse();
                        }
                        let mut next = rest[..k].to_vec();
                        next.extend(seg);
                        next.extend_from_slice(&rest[k..]);
                        *path = next;
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Maps each pixel to its nearest palette entry.
pub fn quantize(photo: &RasterImage, palette: &Palette) -> QuantizedImage {
    let idx: Vec<u8> = photo
        .as_slice()
        .par_chunks_exact(3)
        .with_min_len(4096)
        .map(|p| nearest(palette.centroids(), &[p[0], p[1], p[2]]) as u8)
        .collect();
    QuantizedImage::new(photo.height(), photo.width(), idx).expect("palette has at most 64 entries")
}

/// Replaces every index with its palette colour.
pub fn reconstruct(q: &QuantizedImage, palette: &Palette) -> Result<RasterImage> {
    let mut data = Vec::with_capacity(q.as_slice().len() * 3);
    for &i in q.as_slice() {
        let i = i as usize;
        if i >= palette.len() {
            return Err(Error::ClassOutOfRange {
                index: i,
                classes: palette.len(),
            });
        }
        data.extend_from_slice(&palette.color(i));
    }
    RasterImage::new(q.height(), q.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn random_colors(n: usize, seed: u64) -> Vec<Rgb> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
    }

    fn brute_force_open_path(points: &[Rgb]) -> f64 {
        fn permute(k: usize, idx: &mut Vec<usize>, pts: &[Rgb], best: &mut f64) {
            if k == idx.len() {
                let c: f64 = idx.windows(2).map(|w| dist(&pts[w[0]], &pts[w[1]])).sum();
                if c < *best {
                    *best = c;
                }
                return;
            }
            for i in k..idx.len() {
                idx.swap(k, i);
                permute(k + 1, idx, pts, best);
                idx.swap(k, i);
            }
        }
        let mut best = f64::INFINITY;
        permute(0, &mut (0..points.len()).collect(), points, &mut best);
        best
    }

    #[test]
    fn four_distinct_colors_are_recovered() {
        let colors = [[0.1, 0.2, 0.3], [0.9, 0.1, 0.1], [0.2, 0.8, 0.2], [0.5, 0.5, 0.9]];
        let data: Vec<f64> = (0..400).flat_map(|i| colors[i % 4]).collect();
        let photo = RasterImage::new(20, 20, data).unwrap();
        let pal = fit_palette(&photo, 4, 400, 3).unwrap();
        let mut got: Vec<Rgb> = pal.centroids().to_vec();
        let mut want = colors.to_vec();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
        let rec = reconstruct(&quantize(&photo, &pal), &pal).unwrap();
        assert_eq!(rec, photo);
    }

    #[test]
    fn fit_is_deterministic() {
        let data: Vec<f64> = random_colors(1024, 9).into_iter().flatten().collect();
        let photo = RasterImage::new(32, 32, data).unwrap();
        let a = fit_palette(&photo, 16, 500, 1).unwrap();
        let b = fit_palette(&photo, 16, 500, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_colors_are_repaired_into_distinct_entries() {
        let photo = RasterImage::filled(8, 8, [0.5, 0.5, 0.5]);
        let pal = fit_palette(&photo, 4, 64, 0).unwrap();
        assert_eq!(pal.len(), 4);
        assert!(quantize(&photo, &pal).as_slice().iter().all(|&i| pal.color(i as usize) == [0.5; 3]));
    }

    #[test]
    fn collinear_gray_goes_in_the_middle() {
        let pal = order_palette(vec![[0.0; 3], [1.0; 3], [0.5; 3]]).unwrap();
        assert_eq!(pal.color(1), [0.5; 3]);
        assert!((pal.order_cost() - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn eight_colors_match_brute_force_optimum() {
        for seed in 0..40 {
            let colors = random_colors(8, seed);
            let exact = brute_force_open_path(&colors);
            let pal = order_palette(colors).unwrap();
            assert!(
                (pal.order_cost() - exact).abs() < 1e-9,
                "seed {seed}: {} vs optimum {exact}",
                pal.order_cost()
            );
        }
    }

    #[test]
    fn kmeans_inertia_never_increases() {
        let pts = random_colors(3000, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fit = kmeans(&pts, 12, &mut rng).unwrap();
        assert!(fit.inertia.len() > 1);
        for w in fit.inertia.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn constant_centroid_photo_quantizes_to_that_index() {
        let pal = order_palette(random_colors(10, 2)).unwrap();
        let photo = RasterImage::filled(4, 4, pal.color(7));
        assert!(quantize(&photo, &pal).as_slice().iter().all(|&i| i == 7));
    }

    #[test]
    fn quantize_matches_exhaustive_search() {
        let pal = order_palette(random_colors(16, 11)).unwrap();
        let data: Vec<f64> = random_colors(256, 12).into_iter().flatten().collect();
        let photo = RasterImage::new(16, 16, data).unwrap();
        let q = quantize(&photo, &pal);
        for (p, &got) in photo.pixels().zip(q.as_slice()) {
            let mut best = (f64::INFINITY, 0);
            for (i, c) in pal.centroids().iter().enumerate() {
                let d: f64 = (0..3).map(|k| (p[k] - c[k]).powi(2)).sum();
                if d < best.0 {
                    best = (d, i);
                }
            }
            assert_eq!(got as usize, best.1);
        }
    }

    #[test]
    fn all_zero_indices_reconstruct_centroid_zero() {
        let pal = order_palette(random_colors(5, 4)).unwrap();
        let q = QuantizedImage::new(3, 3, vec![0; 9]).unwrap();
        let img = reconstruct(&q, &pal).unwrap();
        assert!(img.pixels().all(|p| p == pal.color(0)));
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let pal = order_palette(random_colors(5, 4)).unwrap();
        let q = QuantizedImage::new(1, 1, vec![5]).unwrap();
        assert!(matches!(reconstruct(&q, &pal), Err(Error::ClassOutOfRange { .. })));
    }

    #[test]
    fn text_round_trip_of_six_decimal_palette() {
        let colors: Vec<Rgb> = random_colors(6, 8)
            .into_iter()
            .map(|c| c.map(|v| (v * 1e6).round() / 1e6))
            .collect();
        let pal = Palette::from_ordered(colors).unwrap();
        assert_eq!(Palette::from_text(&pal.to_text()).unwrap(), pal);
    }

    proptest! {
        #[test]
        fn ordering_is_a_permutation_that_never_worsens(seed in any::<u64>(), n in 3usize..20) {
            let colors = random_colors(n, seed);
            let identity = path_cost(&colors);
            let pal = order_palette(colors.clone()).unwrap();
            prop_assert!(pal.order_cost() <= identity + 1e-12);
            let mut a = colors.clone();
            let mut b = pal.centroids().to_vec();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            prop_assert_eq!(a, b);
            // mean adjacent distance can only shrink
            prop_assert!(pal.order_cost() / (n - 1) as f64 <= identity / (n - 1) as f64 + 1e-12);
        }

        #[test]
        fn quantize_is_idempotent_on_reconstructions(seed in any::<u64>(), idx in proptest::collection::vec(0u8..12, 36)) {
            let pal = order_palette(random_colors(12, seed)).unwrap();
            let q = QuantizedImage::new(6, 6, idx).unwrap();
            let rec = reconstruct(&q, &pal).unwrap();
            prop_assert_eq!(quantize(&rec, &pal), q);
        }
    }
}
