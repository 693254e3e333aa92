//! Procedural synthetic wafers: a photo, its five-layer CAD stack and
//! pixel-exact defect labels.
//!
//! Layout grammar, one component family per layer:
//!
//! | layer | content |
//! |-------|---------|
//! | 0 | large doped regions that tint the substrate |
//! | 1 | thin straight waveguides |
//! | 2 | metal traces (Manhattan routes between pads plus stubs) |
//! | 3 | rectangular contact pads |
//! | 4 | text strings in a 5x7 bitmap font |
//!
//! The renderer colours each pixel from its CAD column, except near layer
//! boundaries: conductors get a darker rim where they meet bare substrate,
//! the substrate is shadowed next to conductors and brightened next to
//! waveguides. Those rims are invisible in the CAD stack, so a pixelwise model
//! cannot reproduce them.
//!
//! Three independent random streams derive from the seed (layout, defects,
//! noise), so the same seed with zero defect rates renders the golden image of
//! the same layout under the same noise.

mod font;

use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{CadStack, DefectClass, DefectLabels, Mask, PatchRegion, RasterImage};

pub use font::{GLYPH_H, GLYPH_W};

pub const LAYERS: usize = 5;
pub const LAYER_REGION: usize = 0;
pub const LAYER_WAVEGUIDE: usize = 1;
pub const LAYER_METAL: usize = 2;
pub const LAYER_PAD: usize = 3;
pub const LAYER_TEXT: usize = 4;
pub const MIN_SIZE: usize = 256;

type Rgb = [f64; 3];

const SUBSTRATE: [Rgb; 2] = [[0.42, 0.36, 0.52], [0.34, 0.45, 0.50]];
const WAVEGUIDE: Rgb = [0.64, 0.60, 0.72];
const METAL: Rgb = [0.82, 0.70, 0.36];
const METAL_RIM: Rgb = [0.58, 0.46, 0.22];
const PAD: Rgb = [0.70, 0.70, 0.66];
const PAD_RIM: Rgb = [0.50, 0.50, 0.47];
const TEXT: Rgb = [0.90, 0.84, 0.56];
const SHADOW_GAIN: f64 = 0.62;

const DUST: Rgb = [0.13, 0.11, 0.10];
const NITRIDE: Rgb = [0.93, 0.94, 0.96];
const RESIST: Rgb = [0.24, 0.62, 0.30];
const BURN_INK: Rgb = [0.32, 0.17, 0.10];
const BURN_HAZE: Rgb = [0.60, 0.36, 0.22];

const PAD_RIM_PX: usize = 3;
const SHADOW_PX: usize = 4;
const HALO_PX: usize = 3;
const TEXT_MARGIN: usize = 6;

fn default_size() -> usize {
    1024
}
fn default_rate() -> f64 {
    8.0
}
fn default_letter_fraction() -> f64 {
    0.2
}
fn default_noise() -> f64 {
    0.02
}
fn default_rim() -> usize {
    3
}
fn default_glyphs() -> f64 {
    100.0
}
fn default_pads() -> f64 {
    24.0
}
fn default_traces() -> f64 {
    26.0
}
fn default_waveguides() -> f64 {
    14.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Side length of the square canvas in pixels.
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Expected dust particles per megapixel.
    #[serde(default = "default_rate")]
    pub rate_dust: f64,
    #[serde(default = "default_rate")]
    pub rate_nitride: f64,
    #[serde(default = "default_rate")]
    pub rate_resist: f64,
    /// Share of glyphs rendered burned.
    #[serde(default = "default_letter_fraction")]
    pub letter_defect_fraction: f64,
    /// Standard deviation of the additive per-channel noise.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Horizontal shift of the photo relative to the CAD stack.
    #[serde(default)]
    pub misalignment_px: i32,
    /// Width of the dark rim drawn inside metal traces.
    #[serde(default = "default_rim")]
    pub metal_rim_px: usize,
    #[serde(default = "default_glyphs")]
    pub glyphs_per_mpx: f64,
    #[serde(default = "default_pads")]
    pub pads_per_mpx: f64,
    #[serde(default = "default_traces")]
    pub stubs_per_mpx: f64,
    #[serde(default = "default_waveguides")]
    pub waveguides_per_mpx: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: default_size(),
            seed: 0,
            rate_dust: default_rate(),
            rate_nitride: default_rate(),
            rate_resist: default_rate(),
            letter_defect_fraction: default_letter_fraction(),
            noise_sigma: default_noise(),
            misalignment_px: 0,
            metal_rim_px: default_rim(),
            glyphs_per_mpx: default_glyphs(),
            pads_per_mpx: default_pads(),
            stubs_per_mpx: default_traces(),
            waveguides_per_mpx: default_waveguides(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_SIZE {
            return Err(Error::InvalidArgument(format!(
                "synthetic canvas size {} below minimum {MIN_SIZE}",
                self.size
            )));
        }
        let rates = [
            self.rate_dust,
            self.rate_nitride,
            self.rate_resist,
            self.glyphs_per_mpx,
            self.pads_per_mpx,
            self.stubs_per_mpx,
            self.waveguides_per_mpx,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidArgument("rates must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.letter_defect_fraction) {
            return Err(Error::InvalidArgument("letter_defect_fraction outside [0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise_sigma must be non-negative".into()));
        }
        if self.misalignment_px.unsigned_abs() as usize >= self.size {
            return Err(Error::InvalidArgument("misalignment exceeds canvas".into()));
        }
        Ok(())
    }

    fn megapixels(&self) -> f64 {
        (self.size * self.size) as f64 / 1e6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    fn clipped(x0: i64, y0: i64, w: i64, h: i64, size: usize) -> Option<Rect> {
        let x1 = (x0 + w).min(size as i64);
        let y1 = (y0 + h).min(size as i64);
        let x0 = x0.max(0);
        let y0 = y0.max(0);
        (x1 > x0 && y1 > y0).then(|| Rect {
            x0: x0 as usize,
            y0: y0 as usize,
            w: (x1 - x0) as usize,
            h: (y1 - y0) as usize,
        })
    }

    fn center(&self) -> (i64, i64) {
        ((self.x0 + self.w / 2) as i64, (self.y0 + self.h / 2) as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Glyph {
    pub ch: u8,
    /// Bounding box in CAD coordinates.
    pub bbox: PatchRegion,
    pub scale: usize,
}

impl Glyph {
    /// Whether CAD pixel `(y, x)` inside the box is inked.
    pub fn inked(&self, y: usize, x: usize) -> bool {
        self.bbox.contains(y, x)
            && font::ink(self.ch, (y - self.bbox.y0) / self.scale, (x - self.bbox.x0) / self.scale)
    }
}

/// Components of a generated layout, grouped by CAD layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthScene {
    pub size: usize,
    pub regions: Vec<Rect>,
    pub waveguides: Vec<Rect>,
    pub traces: Vec<Rect>,
    pub pads: Vec<Rect>,
    pub glyphs: Vec<Glyph>,
}

/// Realized defect statistics of a generated dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SceneReport {
    pub dust: usize,
    pub nitride: usize,
    pub resist: usize,
    pub glyphs: usize,
    pub burned_glyphs: usize,
    pub labeled_pixels: usize,
}

impl fmt::Display for SceneReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "dust={} nitride={} resist={} burned_letters={}/{} labeled_pixels={}",
            self.dust, self.nitride, self.resist, self.burned_glyphs, self.glyphs, self.labeled_pixels
        )
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub photo: RasterImage,
    /// The same photo without defects (same layout, misalignment and noise).
    pub golden: RasterImage,
    pub cad: CadStack,
    pub labels: DefectLabels,
    pub scene: SynthScene,
    pub report: SceneReport,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn density_count(per_mpx: f64, mpx: f64) -> usize {
    (per_mpx * mpx).round() as usize
}

fn layout(config: &SynthConfig, rng: &mut ChaCha8Rng) -> SynthScene {
    let s = config.size;
    let si = s as i64;
    let mpx = config.megapixels();
    let mut scene = SynthScene {
        size: s,
        ..Default::default()
    };

    for _ in 0..(3.0 * mpx).round().max(1.0) as usize {
        let w = rng.gen_range(s / 8..=s / 3) as i64;
        let h = rng.gen_range(s / 8..=s / 3) as i64;
        let x = rng.gen_range(-w / 2..si - w / 2);
        let y = rng.gen_range(-h / 2..si - h / 2);
        scene.regions.extend(Rect::clipped(x, y, w, h, s));
    }

    let want_pads = density_count(config.pads_per_mpx, mpx);
    for _ in 0..want_pads * 40 {
        if scene.pads.len() >= want_pads {
            break;
        }
        let w = rng.gen_range(28..=64);
        let h = rng.gen_range(28..=64);
        if w + 16 >= s || h + 16 >= s {
            break;
        }
        let x = rng.gen_range(8..s - w - 8);
        let y = rng.gen_range(8..s - h - 8);
        let clear = scene.pads.iter().all(|p| {
            x + w + 24 <= p.x0 || p.x0 + p.w + 24 <= x || y + h + 24 <= p.y0 || p.y0 + p.h + 24 <= y
        });
        if clear {
            scene.pads.push(Rect { x0: x, y0: y, w, h });
        }
    }

    let route = |a: (i64, i64), b: (i64, i64), width: i64, traces: &mut Vec<Rect>| {
        let half = width / 2;
        let (x0, x1) = (a.0.min(b.0), a.0.max(b.0));
        let (y0, y1) = (a.1.min(b.1), a.1.max(b.1));
        traces.extend(Rect::clipped(x0 - half, a.1 - half, x1 - x0 + width, width, s));
        traces.extend(Rect::clipped(b.0 - half, y0 - half, width, y1 - y0 + width, s));
    };
    let pads = scene.pads.clone();
    for (i, p) in pads.iter().enumerate() {
        let mut others: Vec<(i64, usize)> = pads
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(j, q)| {
                let (a, b) = (p.center(), q.center());
                ((a.0 - b.0).abs() + (a.1 - b.1).abs(), j)
            })
            .collect();
        others.sort();
        let links = rng.gen_range(1..=2).min(others.len());
        for &(_, j) in &others[..links] {
            if j > i || rng.gen_bool(0.3) {
                let width = rng.gen_range(6..=10);
                route(p.center(), pads[j].center(), width, &mut scene.traces);
            }
        }
    }
    for _ in 0..density_count(config.stubs_per_mpx, mpx) {
        let a = (rng.gen_range(0..si), rng.gen_range(0..si));
        let len = rng.gen_range(60..=300i64);
        let b = if rng.gen_bool(0.5) {
            (a.0 + len * if rng.gen_bool(0.5) { 1 } else { -1 }, a.1 + rng.gen_range(-len..=len))
        } else {
            (a.0 + rng.gen_range(-len..=len), a.1 + len * if rng.gen_bool(0.5) { 1 } else { -1 })
        };
        let width = rng.gen_range(6..=10);
        route(a, b, width, &mut scene.traces);
    }

    for _ in 0..density_count(config.waveguides_per_mpx, mpx) {
        let width = rng.gen_range(3..=4);
        let len = rng.gen_range(si / 4..=si);
        let along = rng.gen_range(-len / 2..si - len / 2);
        let across = rng.gen_range(0..si - width);
        let r = if rng.gen_bool(0.5) {
            Rect::clipped(along, across, len, width, s)
        } else {
            Rect::clipped(across, along, width, len, s)
        };
        scene.waveguides.extend(r);
    }

    let mut blocked = vec![false; s * s];
    for r in scene.waveguides.iter().chain(&scene.traces).chain(&scene.pads) {
        fill(&mut blocked, s, r);
    }
    let blocked = dilate(&blocked, s, s, TEXT_MARGIN);
    let mut taken = vec![false; s * s];
    let want_glyphs = density_count(config.glyphs_per_mpx, mpx);
    for _ in 0..want_glyphs.max(1) * 60 {
        if scene.glyphs.len() >= want_glyphs {
            break;
        }
        let remaining = want_glyphs - scene.glyphs.len();
        let len = rng.gen_range(3..=8).min(remaining);
        let scale = rng.gen_range(2..=3);
        let gw = GLYPH_W * scale;
        let gh = GLYPH_H * scale;
        let total_w = len * gw + (len - 1) * scale;
        if total_w + 2 * TEXT_MARGIN >= s || gh + 2 * TEXT_MARGIN >= s {
            continue;
        }
        let x = rng.gen_range(TEXT_MARGIN..s - total_w - TEXT_MARGIN);
        let y = rng.gen_range(TEXT_MARGIN..s - gh - TEXT_MARGIN);
        let free = (y - TEXT_MARGIN..y + gh + TEXT_MARGIN).all(|yy| {
            (x - TEXT_MARGIN..x + total_w + TEXT_MARGIN)
                .all(|xx| !blocked[yy * s + xx] && !taken[yy * s + xx])
        });
        if !free {
            continue;
        }
        let alphabet = font::alphabet();
        for i in 0..len {
            let ch = alphabet[rng.gen_range(0..alphabet.len())];
            let bbox = PatchRegion::new(x + i * (gw + scale), y, gw, gh);
            scene.glyphs.push(Glyph { ch, bbox, scale });
        }
        fill(
            &mut taken,
            s,
            &Rect {
                x0: x,
                y0: y,
                w: total_w,
                h: gh,
            },
        );
    }
    scene
}

fn fill(mask: &mut [bool], width: usize, r: &Rect) {
    for y in r.y0..r.y0 + r.h {
        mask[y * width + r.x0..y * width + r.x0 + r.w].fill(true);
    }
}

/// Square (Chebyshev) dilation by `radius` using separable box counts.
fn dilate(mask: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let mut horiz = vec![false; mask.len()];
    let mut prefix = vec![0u32; width.max(height) + 1];
    for y in 0..height {
        for x in 0..width {
            prefix[x + 1] = prefix[x] + mask[y * width + x] as u32;
        }
        for x in 0..width {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius + 1).min(width);
            horiz[y * width + x] = prefix[hi] > prefix[lo];
        }
    }
    let mut out = vec![false; mask.len()];
    for x in 0..width {
        for y in 0..height {
            prefix[y + 1] = prefix[y] + horiz[y * width + x] as u32;
        }
        for y in 0..height {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius + 1).min(height);
            out[y * width + x] = prefix[hi] > prefix[lo];
        }
    }
    out
}

/// Rasterizes the scene into a five-layer CAD stack.
pub fn rasterize(scene: &SynthScene) -> CadStack {
    let s = scene.size;
    let mut masks = vec![vec![false; s * s]; LAYERS];
    for r in &scene.regions {
        fill(&mut masks[LAYER_REGION], s, r);
    }
    for r in &scene.waveguides {
        fill(&mut masks[LAYER_WAVEGUIDE], s, r);
    }
    for r in &scene.traces {
        fill(&mut masks[LAYER_METAL], s, r);
    }
    for r in &scene.pads {
        fill(&mut masks[LAYER_PAD], s, r);
    }
    for g in &scene.glyphs {
        for y in g.bbox.y0..g.bbox.y0 + g.bbox.h {
            for x in g.bbox.x0..g.bbox.x0 + g.bbox.w {
                if g.inked(y, x) {
                    masks[LAYER_TEXT][y * s + x] = true;
                }
            }
        }
    }
    CadStack::from_masks(s, s, &masks).expect("square masks")
}

/// Noise-free rendering of a CAD stack with context-dependent rims.
pub fn render_clean(cad: &CadStack, metal_rim_px: usize) -> RasterImage {
    let (h, w) = cad.dims();
    let on = |l: usize| -> Vec<bool> { cad.layer(l).iter().map(|&v| v > 0).collect() };
    let region = on(LAYER_REGION);
    let waveguide = on(LAYER_WAVEGUIDE);
    let metal = on(LAYER_METAL);
    let pad = on(LAYER_PAD);
    let text = on(LAYER_TEXT);
    let conductor: Vec<bool> = metal.iter().zip(&pad).map(|(a, b)| *a || *b).collect();
    let bare: Vec<bool> = conductor.iter().zip(&text).map(|(c, t)| !c && !t).collect();
    let near_bare_metal = dilate(&bare, h, w, metal_rim_px);
    let near_bare_pad = dilate(&bare, h, w, PAD_RIM_PX);
    let near_conductor = dilate(&conductor, h, w, SHADOW_PX);
    let near_waveguide = dilate(&waveguide, h, w, HALO_PX);

    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        let sub = SUBSTRATE[region[i] as usize];
        let rgb = if text[i] {
            TEXT
        } else if pad[i] {
            if near_bare_pad[i] {
                PAD_RIM
            } else {
                PAD
            }
        } else if metal[i] {
            if near_bare_metal[i] {
                METAL_RIM
            } else {
                METAL
            }
        } else if waveguide[i] {
            WAVEGUIDE
        } else if near_conductor[i] {
            sub.map(|v| v * SHADOW_GAIN)
        } else if near_waveguide[i] {
            [(sub[0] + WAVEGUIDE[0]) / 2.0, (sub[1] + WAVEGUIDE[1]) / 2.0, (sub[2] + WAVEGUIDE[2]) / 2.0]
        } else {
            sub
        };
        data.extend_from_slice(&rgb);
    }
    RasterImage::new(h, w, data).expect("palette colours lie in [0, 1]")
}

/// Shifts image content `dx` pixels to the right, replicating the edge column.
fn shift_x(img: &RasterImage, dx: i32) -> RasterImage {
    if dx == 0 {
        return img.clone();
    }
    let (h, w) = img.dims();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let src = (x as i64 - dx as i64).clamp(0, w as i64 - 1) as usize;
            data.extend_from_slice(&img.pixel(y, src));
        }
    }
    RasterImage::new(h, w, data).expect("shifted values stay in range")
}

fn jitter(rng: &mut impl Rng, base: Rgb, amount: f64) -> Rgb {
    base.map(|v| (v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn paint(photo: &mut RasterImage, labels: &mut Mask, y: i64, x: i64, rgb: Rgb) {
    let (h, w) = photo.dims();
    if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
        return;
    }
    photo.set_pixel(y as usize, x as usize, rgb);
    labels.set(y as usize, x as usize, true);
}

/// Draws `count` dark specks of 1 to 4 pixels per side.
pub fn inject_dust(photo: &mut RasterImage, labels: &mut Mask, count: usize, rng: &mut impl Rng) {
    let (h, w) = photo.dims();
    for _ in 0..count {
        let y0 = rng.gen_range(0..h) as i64;
        let x0 = rng.gen_range(0..w) as i64;
        let sh = rng.gen_range(1..=4i64);
        let sw = rng.gen_range(1..=4i64);
        let rgb = jitter(rng, DUST, 0.03);
        let cy = (sh - 1) as f64 / 2.0;
        let cx = (sw - 1) as f64 / 2.0;
        let r2 = ((sh.max(sw) as f64) / 2.0 + 0.25).powi(2);
        for dy in 0..sh {
            for dx in 0..sw {
                let d2 = (dy as f64 - cy).powi(2) + (dx as f64 - cx).powi(2);
                if d2 <= r2 {
                    paint(photo, labels, y0 + dy, x0 + dx, rgb);
                }
            }
        }
    }
}

/// Filled blob whose radius varies with angle through a few random harmonics.
fn blob(
    photo: &mut RasterImage,
    labels: &mut Mask,
    rng: &mut impl Rng,
    radius: f64,
    roughness: f64,
    harmonics: usize,
    rgb: Rgb,
) {
    let (h, w) = photo.dims();
    let cy = rng.gen_range(0..h) as f64;
    let cx = rng.gen_range(0..w) as f64;
    let terms: Vec<(f64, f64, f64)> = (1..=harmonics)
        .map(|k| {
            (
                (k + 1) as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..roughness) / k as f64,
            )
        })
        .collect();
    let reach = (radius * (1.0 + roughness * 2.0)).ceil() as i64 + 1;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let (fy, fx) = (dy as f64, dx as f64);
            let theta = fy.atan2(fx);
            let scale: f64 = 1.0 + terms.iter().map(|(f, p, a)| a * (f * theta + p).sin()).sum::<f64>();
            if (fy * fy + fx * fx).sqrt() <= radius * scale.max(0.2) {
                paint(photo, labels, cy as i64 + dy, cx as i64 + dx, rgb);
            }
        }
    }
}

/// Bright irregular lift-off blobs, 8 to 40 pixels across.
pub fn inject_nitride(photo: &mut RasterImage, labels: &mut Mask, count: usize, rng: &mut impl Rng) {
    for _ in 0..count {
        let radius = rng.gen_range(4.0..=20.0) / 1.15;
        let rgb = jitter(rng, NITRIDE, 0.02);
        blob(photo, labels, rng, radius, 0.15, 3, rgb);
    }
}

/// Mid-tone particles with ragged outlines.
pub fn inject_resist(photo: &mut RasterImage, labels: &mut Mask, count: usize, rng: &mut impl Rng) {
    for _ in 0..count {
        let radius = rng.gen_range(3.0..=12.0);
        let rgb = jitter(rng, RESIST, 0.03);
        blob(photo, labels, rng, radius, 0.35, 7, rgb);
    }
}

/// Burns `fraction` of the glyphs (rounded to the nearest count): the whole
/// glyph box turns to scorched ink and haze and is labeled. `dx` is the
/// photo's horizontal offset relative to the CAD stack. Returns the number of
/// glyphs burned.
pub fn burn_letters(
    photo: &mut RasterImage,
    labels: &mut Mask,
    scene: &SynthScene,
    fraction: f64,
    dx: i32,
    rng: &mut impl Rng,
) -> usize {
    let n = scene.glyphs.len();
    let burn = ((fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    if burn == 0 {
        return 0;
    }
    let mut picks = index::sample(rng, n, burn).into_vec();
    picks.sort_unstable();
    for i in picks {
        let g = &scene.glyphs[i];
        let ink = jitter(rng, BURN_INK, 0.03);
        let haze = jitter(rng, BURN_HAZE, 0.03);
        for y in g.bbox.y0..g.bbox.y0 + g.bbox.h {
            for x in g.bbox.x0..g.bbox.x0 + g.bbox.w {
                let rgb = if g.inked(y, x) { ink } else { haze };
                paint(photo, labels, y as i64, x as i64 + dx as i64, rgb);
            }
        }
    }
    burn
}

fn poisson(mean: f64, rng: &mut impl Rng) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

/// Generates a synthetic wafer dataset.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let s = config.size;
    let mut layout_rng = stream(config.seed, 0);
    let mut defect_rng = stream(config.seed, 1);
    let mut noise_rng = stream(config.seed, 2);

    let scene = layout(config, &mut layout_rng);
    let cad = rasterize(&scene);
    let clean = shift_x(&render_clean(&cad, config.metal_rim_px), config.misalignment_px);

    let mpx = config.megapixels();
    let mut photo = clean.clone();
    let mut masks: Vec<(DefectClass, Mask)> = DefectClass::ALL
        .iter()
        .map(|&c| (c, Mask::empty(s, s)))
        .collect();
    let burned = burn_letters(
        &mut photo,
        &mut masks[3].1,
        &scene,
        config.letter_defect_fraction,
        config.misalignment_px,
        &mut defect_rng,
    );
    let nitride = poisson(config.rate_nitride * mpx, &mut defect_rng);
    inject_nitride(&mut photo, &mut masks[1].1, nitride, &mut defect_rng);
    let resist = poisson(config.rate_resist * mpx, &mut defect_rng);
    inject_resist(&mut photo, &mut masks[2].1, resist, &mut defect_rng);
    let dust = poisson(config.rate_dust * mpx, &mut defect_rng);
    inject_dust(&mut photo, &mut masks[0].1, dust, &mut defect_rng);

    let labels = DefectLabels::from_classes(s, s, masks)?;
    let (photo, golden) = if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).expect("valid sigma");
        let noise: Vec<f64> = (0..s * s * 3).map(|_| normal.sample(&mut noise_rng)).collect();
        let add = |img: &RasterImage| {
            let data = img.as_slice().iter().zip(&noise).map(|(v, n)| v + n).collect();
            RasterImage::from_clamped(s, s, data).expect("clamped")
        };
        (add(&photo), add(&clean))
    } else {
        (photo, clean)
    };

    let report = SceneReport {
        dust,
        nitride,
        resist,
        glyphs: scene.glyphs.len(),
        burned_glyphs: burned,
        labeled_pixels: labels.mask().count(),
    };
    Ok(SynthOutput {
        photo,
        golden,
        cad,
        labels,
        scene,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            size: 256,
            seed,
            ..SynthConfig::default()
        }
    }

    fn diff_mask(a: &RasterImage, b: &RasterImage) -> Vec<bool> {
        a.pixels().zip(b.pixels()).map(|(p, q)| p != q).collect()
    }

    #[test]
    fn rejects_small_canvas() {
        let cfg = SynthConfig {
            size: 64,
            ..SynthConfig::default()
        };
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate(&small(3)).unwrap();
        let b = generate(&small(3)).unwrap();
        assert_eq!(a.photo, b.photo);
        assert_eq!(a.cad, b.cad);
        assert_eq!(a.labels, b.labels);
        let c = generate(&small(4)).unwrap();
        assert_ne!(a.photo, c.photo);
    }

    #[test]
    fn zero_rates_give_empty_labels_and_golden_photo() {
        let cfg = SynthConfig {
            rate_dust: 0.0,
            rate_nitride: 0.0,
            rate_resist: 0.0,
            letter_defect_fraction: 0.0,
            ..small(5)
        };
        let out = generate(&cfg).unwrap();
        assert_eq!(out.labels.mask().count(), 0);
        assert_eq!(out.photo, out.golden);
        let defective = generate(&small(5)).unwrap();
        assert_eq!(defective.golden, out.photo);
        assert_eq!(defective.cad, out.cad);
    }

    #[test]
    fn labels_equal_pixels_changed_by_defects() {
        let cfg = SynthConfig {
            size: 512,
            rate_dust: 200.0,
            rate_nitride: 40.0,
            rate_resist: 40.0,
            letter_defect_fraction: 0.5,
            ..small(6)
        };
        let out = generate(&cfg).unwrap();
        assert!(out.report.dust > 0 && out.report.burned_glyphs > 0);
        assert_eq!(diff_mask(&out.photo, &out.golden), out.labels.mask().as_slice());
    }

    #[test]
    fn dust_oracle_and_size_bounds() {
        let cad = rasterize(&layout(&small(1), &mut stream(1, 0)));
        let clean = render_clean(&cad, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);

        let mut photo = clean.clone();
        let mut labels = Mask::empty(256, 256);
        inject_dust(&mut photo, &mut labels, 0, &mut rng);
        assert_eq!(photo, clean);

        for _ in 0..50 {
            let mut photo = clean.clone();
            let mut labels = Mask::empty(256, 256);
            inject_dust(&mut photo, &mut labels, 1, &mut rng);
            assert!((1..=16).contains(&labels.count()));
            assert_eq!(diff_mask(&photo, &clean), labels.as_slice());
        }
    }

    #[test]
    fn blob_injectors_label_exactly_the_changed_pixels() {
        let cad = rasterize(&layout(&small(2), &mut stream(2, 0)));
        let clean = render_clean(&cad, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        type Injector = fn(&mut RasterImage, &mut Mask, usize, &mut ChaCha8Rng);
        let injectors: [Injector; 2] = [inject_nitride, inject_resist];
        for inject in injectors {
            let mut photo = clean.clone();
            let mut labels = Mask::empty(256, 256);
            inject(&mut photo, &mut labels, 0, &mut rng);
            assert_eq!(photo, clean);
            inject(&mut photo, &mut labels, 5, &mut rng);
            assert!(labels.count() > 0);
            assert_eq!(diff_mask(&photo, &clean), labels.as_slice());
        }
    }

    #[test]
    fn nitride_blobs_span_8_to_40_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            // keep the blob away from the border so it is not clipped
            let labels = loop {
                let mut photo = RasterImage::filled(300, 300, [0.4; 3]);
                let mut labels = Mask::empty(300, 300);
                inject_nitride(&mut photo, &mut labels, 1, &mut rng);
                let edge = (0..300)
                    .any(|i| labels.get(0, i) || labels.get(299, i) || labels.get(i, 0) || labels.get(i, 299));
                if !edge {
                    break labels;
                }
            };
            let rows: Vec<usize> = (0..300).filter(|&y| (0..300).any(|x| labels.get(y, x))).collect();
            let extent = rows.last().unwrap() - rows.first().unwrap() + 1;
            assert!((6..=44).contains(&extent), "extent {extent}");
        }
    }

    #[test]
    fn burn_fraction_counts() {
        let scene = layout(&small(7), &mut stream(7, 0));
        assert!(!scene.glyphs.is_empty());
        let cad = rasterize(&scene);
        let clean = render_clean(&cad, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);

        let mut photo = clean.clone();
        let mut labels = Mask::empty(256, 256);
        assert_eq!(burn_letters(&mut photo, &mut labels, &scene, 0.0, 0, &mut rng), 0);
        assert_eq!(photo, clean);

        let burned = burn_letters(&mut photo, &mut labels, &scene, 1.0, 0, &mut rng);
        assert_eq!(burned, scene.glyphs.len());
        for g in &scene.glyphs {
            let hit = (g.bbox.y0..g.bbox.y0 + g.bbox.h)
                .any(|y| (g.bbox.x0..g.bbox.x0 + g.bbox.w).any(|x| labels.get(y, x)));
            assert!(hit);
        }
        assert_eq!(diff_mask(&photo, &clean), labels.as_slice());
    }

    #[test]
    fn twenty_percent_of_hundred_glyphs() {
        let cfg = SynthConfig {
            size: 1024,
            glyphs_per_mpx: 100.0 / 1.048576,
            ..small(8)
        };
        let scene = layout(&cfg, &mut stream(8, 0));
        assert_eq!(scene.glyphs.len(), 100);
        let mut photo = RasterImage::filled(1024, 1024, [0.4; 3]);
        let mut labels = Mask::empty(1024, 1024);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(burn_letters(&mut photo, &mut labels, &scene, 0.2, 0, &mut rng), 20);
    }

    #[test]
    fn appearance_depends_on_context() {
        let out = generate(&SynthConfig {
            noise_sigma: 0.0,
            ..small(9)
        })
        .unwrap();
        let mut seen: std::collections::HashMap<u64, [u64; 3]> = Default::default();
        let mut found = false;
        for y in 0..256 {
            for x in 0..256 {
                let rgb = out.golden.pixel(y, x).map(f64::to_bits);
                let prev = *seen.entry(out.cad.pattern(y, x)).or_insert(rgb);
                if prev != rgb {
                    found = true;
                }
            }
        }
        assert!(found);
    }

    #[test]
    fn every_layer_is_populated() {
        let out = generate(&SynthConfig {
            size: 512,
            ..small(12)
        })
        .unwrap();
        for l in 0..LAYERS {
            assert!(out.cad.layer(l).iter().any(|&v| v > 0), "layer {l} empty");
        }
    }

    #[test]
    fn misalignment_shifts_photo_right() {
        let base = SynthConfig {
            rate_dust: 0.0,
            rate_nitride: 0.0,
            rate_resist: 0.0,
            letter_defect_fraction: 0.0,
            noise_sigma: 0.0,
            ..small(13)
        };
        let aligned = generate(&base).unwrap();
        let shifted = generate(&SynthConfig {
            misalignment_px: 2,
            ..base
        })
        .unwrap();
        assert_eq!(aligned.cad, shifted.cad);
        for y in 0..256 {
            for x in 2..256 {
                assert_eq!(shifted.photo.pixel(y, x), aligned.photo.pixel(y, x - 2));
            }
        }
    }
}
