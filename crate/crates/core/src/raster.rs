//! Raster containers shared by every stage of the pipeline.
//!
//! Photos are stored row-major with interleaved RGB channels in `[0, 1]`.
//! CAD stacks are stored layer-planar with values in `{-1, +1}`, which is the
//! layout the network consumes directly.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Maximum number of palette classes representable in a [`QuantizedImage`].
pub const MAX_CLASSES: usize = 64;

/// Rectangular pixel region `[x0, x0 + w) x [y0, y0 + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchRegion {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchRegion {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        PatchRegion { y0, x0, h, w }
    }

    pub fn full(height: usize, width: usize) -> Self {
        PatchRegion::new(0, 0, width, height)
    }

    pub fn check_within(&self, height: usize, width: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 || self.x0 + self.w > width || self.y0 + self.h > height {
            return Err(Error::OutOfBounds {
                region: self.to_string(),
                height,
                width,
            });
        }
        Ok(())
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.h && x >= self.x0 && x < self.x0 + self.w
    }
}

impl fmt::Display for PatchRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}+{}+{}", self.w, self.h, self.x0, self.y0)
    }
}

fn check_dims(what: &str, expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            what: what.to_string(),
            expected_h: expected.0,
            expected_w: expected.1,
            found_h: found.0,
            found_w: found.1,
        });
    }
    Ok(())
}

pub(crate) fn ensure_same_dims(
    what: &str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<()> {
    check_dims(what, a, b)
}

/// An RGB photo with channel intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "raster data length {} does not match {height}x{width}x3",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "raster value {v} outside [0, 1]"
            )));
        }
        Ok(RasterImage {
            height,
            width,
            data,
        })
    }

    /// Builds an image by clamping every value into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        RasterImage::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        RasterImage::new(height, width, data).expect("fill colour must lie in [0, 1]")
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

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Interleaved RGB values, row-major.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn extract(&self, region: &PatchRegion) -> Result<RasterImage> {
        region.check_within(self.height, self.width)?;
        let mut data = Vec::with_capacity(region.area() * 3);
        for y in region.y0..region.y0 + region.h {
            let start = (y * self.width + region.x0) * 3;
            data.extend_from_slice(&self.data[start..start + region.w * 3]);
        }
        Ok(RasterImage {
            height: region.h,
            width: region.w,
            data,
        })
    }

    /// Copies `patch` into this image with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, patch: &RasterImage, y0: usize, x0: usize) -> Result<()> {
        PatchRegion::new(x0, y0, patch.width, patch.height).check_within(self.height, self.width)?;
        for y in 0..patch.height {
            let dst = ((y0 + y) * self.width + x0) * 3;
            let src = y * patch.width * 3;
            self.data[dst..dst + patch.width * 3]
                .copy_from_slice(&patch.data[src..src + patch.width * 3]);
        }
        Ok(())
    }
}

/// Stack of binary CAD layers, values exactly `-1` or `+1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CadStack {
    height: usize,
    width: usize,
    layers: usize,
    data: Vec<i8>,
}

impl CadStack {
    pub fn new(height: usize, width: usize, layers: usize, data: Vec<i8>) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidArgument("CAD stack needs at least one layer".into()));
        }
        if data.len() != height * width * layers {
            return Err(Error::InvalidArgument(format!(
                "CAD data length {} does not match {layers}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v != -1 && v != 1) {
            return Err(Error::InvalidArgument(format!("CAD value {v} is not -1 or +1")));
        }
        Ok(CadStack {
            height,
            width,
            layers,
            data,
        })
    }

    /// A stack with every layer empty (`-1`).
    pub fn empty(height: usize, width: usize, layers: usize) -> Self {
        CadStack::new(height, width, layers, vec![-1; height * width * layers])
            .expect("valid empty stack")
    }

    /// Builds a stack from per-layer boolean masks (`true` maps to `+1`).
    pub fn from_masks(height: usize, width: usize, masks: &[Vec<bool>]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * masks.len());
        for (i, m) in masks.iter().enumerate() {
            if m.len() != height * width {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} has {} pixels, expected {}",
                    m.len(),
                    height * width
                )));
            }
            data.extend(m.iter().map(|&b| if b { 1i8 } else { -1 }));
        }
        CadStack::new(height, width, masks.len(), data)
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

    pub fn layer_count(&self) -> usize {
        self.layers
    }

    /// One layer plane, row-major.
    pub fn layer(&self, l: usize) -> &[i8] {
        let n = self.height * self.width;
        &self.data[l * n..(l + 1) * n]
    }

    pub fn value(&self, l: usize, y: usize, x: usize) -> i8 {
        self.data[(l * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, l: usize, y: usize, x: usize, on: bool) {
        self.data[(l * self.height + y) * self.width + x] = if on { 1 } else { -1 };
    }

    /// CAD column vector at a pixel packed into bits (bit `l` set when layer `l` is `+1`).
    pub fn pattern(&self, y: usize, x: usize) -> u64 {
        let n = self.height * self.width;
        let i = y * self.width + x;
        (0..self.layers).fold(0u64, |acc, l| {
            if self.data[l * n + i] > 0 {
                acc | (1 << l)
            } else {
                acc
            }
        })
    }

    pub fn column(&self, y: usize, x: usize) -> Vec<i8> {
        (0..self.layers).map(|l| self.value(l, y, x)).collect()
    }

    pub fn extract(&self, region: &PatchRegion) -> Result<CadStack> {
        region.check_within(self.height, self.width)?;
        let mut data = Vec::with_capacity(region.area() * self.layers);
        for l in 0..self.layers {
            let plane = self.layer(l);
            for y in region.y0..region.y0 + region.h {
                let start = y * self.width + region.x0;
                data.extend_from_slice(&plane[start..start + region.w]);
            }
        }
        Ok(CadStack {
            height: region.h,
            width: region.w,
            layers: self.layers,
            data,
        })
    }
}

/// Single-channel image of palette indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl QuantizedImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "index data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(&v) = data.iter().find(|&&v| v as usize >= MAX_CLASSES) {
            return Err(Error::ClassOutOfRange {
                index: v as usize,
                classes: MAX_CLASSES,
            });
        }
        Ok(QuantizedImage {
            height,
            width,
            data,
        })
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

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn extract(&self, region: &PatchRegion) -> Result<QuantizedImage> {
        region.check_within(self.height, self.width)?;
        let mut data = Vec::with_capacity(region.area());
        for y in region.y0..region.y0 + region.h {
            let start = y * self.width + region.x0;
            data.extend_from_slice(&self.data[start..start + region.w]);
        }
        Ok(QuantizedImage {
            height: region.h,
            width: region.w,
            data,
        })
    }
}

/// Per-pixel class scores, class-planar (`classes x height x width`).
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Logits {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || data.len() != classes * height * width {
            return Err(Error::InvalidArgument(format!(
                "logit data length {} does not match {classes}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Logits {
            classes,
            height,
            width,
            data,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, class: usize, y: usize, x: usize) -> f64 {
        self.data[(class * self.height + y) * self.width + x]
    }

    /// Scores of every class at one pixel.
    pub fn scores(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.classes).map(|c| self.get(c, y, x)).collect()
    }

    /// Highest-scoring class per pixel; ties resolve to the lowest class.
    pub fn argmax(&self) -> QuantizedImage {
        let n = self.height * self.width;
        let idx = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.data[c * n + i] > self.data[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        QuantizedImage::new(self.height, self.width, idx).expect("at most 64 classes")
    }
}

/// Binary per-pixel mask; `true` corresponds to the `+1` state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "mask length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
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

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Signed view of a pixel: `+1` when set, `-1` otherwise.
    pub fn signed(&self, y: usize, x: usize) -> i8 {
        if self.get(y, x) {
            1
        } else {
            -1
        }
    }

    pub fn union_with(&mut self, other: &Mask) -> Result<()> {
        check_dims("mask union", self.dims(), other.dims())?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
        Ok(())
    }

    pub fn extract(&self, region: &PatchRegion) -> Result<Mask> {
        region.check_within(self.height, self.width)?;
        let mut data = Vec::with_capacity(region.area());
        for y in region.y0..region.y0 + region.h {
            let start = y * self.width + region.x0;
            data.extend_from_slice(&self.data[start..start + region.w]);
        }
        Ok(Mask {
            height: region.h,
            width: region.w,
            data,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DefectClass {
    Dust,
    Nitride,
    Resist,
    Letters,
}

impl DefectClass {
    pub const ALL: [DefectClass; 4] = [
        DefectClass::Dust,
        DefectClass::Nitride,
        DefectClass::Resist,
        DefectClass::Letters,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefectClass::Dust => "dust",
            DefectClass::Nitride => "nitride",
            DefectClass::Resist => "resist",
            DefectClass::Letters => "letters",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        DefectClass::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// Ground-truth defect mask with optional per-class breakdown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DefectLabels {
    mask: Mask,
    per_class: Vec<(DefectClass, Mask)>,
}

impl DefectLabels {
    pub fn from_mask(mask: Mask) -> Self {
        DefectLabels {
            mask,
            per_class: Vec::new(),
        }
    }

    /// Builds labels whose combined mask is the union of the class masks.
    pub fn from_classes(height: usize, width: usize, per_class: Vec<(DefectClass, Mask)>) -> Result<Self> {
        let mut mask = Mask::empty(height, width);
        for (_, m) in &per_class {
            mask.union_with(m)?;
        }
        Ok(DefectLabels { mask, per_class })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        DefectLabels::from_mask(Mask::empty(height, width))
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn per_class(&self) -> &[(DefectClass, Mask)] {
        &self.per_class
    }

    pub fn class_mask(&self, class: DefectClass) -> Option<&Mask> {
        self.per_class.iter().find(|(c, _)| *c == class).map(|(_, m)| m)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    pub fn extract(&self, region: &PatchRegion) -> Result<DefectLabels> {
        Ok(DefectLabels {
            mask: self.mask.extract(region)?,
            per_class: self
                .per_class
                .iter()
                .map(|(c, m)| Ok((*c, m.extract(region)?)))
                .collect::<Result<_>>()?,
        })
    }
}

/// Train/validation partition of a raster into fixed-size tiles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSplit {
    pub train: Vec<PatchRegion>,
    pub val: Vec<PatchRegion>,
}

/// Tiles a `height x width` raster into `patch_size` squares (partial edge tiles
/// are dropped) and scatters them randomly into train and validation sets.
pub fn split_patches(
    height: usize,
    width: usize,
    patch_size: usize,
    fraction: f64,
    seed: u64,
) -> Result<PatchSplit> {
    if patch_size == 0 || patch_size > height || patch_size > width {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} does not fit a {height}x{width} raster"
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction {fraction} outside (0, 1)"
        )));
    }
    let mut tiles: Vec<PatchRegion> = (0..height / patch_size)
        .flat_map(|r| {
            (0..width / patch_size)
                .map(move |c| PatchRegion::new(c * patch_size, r * patch_size, patch_size, patch_size))
        })
        .collect();
    let n_train = (tiles.len() as f64 * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tiles.shuffle(&mut rng);
    let mut val = tiles.split_off(n_train);
    let mut train = tiles;
    train.sort();
    val.sort();
    Ok(PatchSplit { train, val })
}
