//! Pixelwise decision-tree simulator.
//!
//! Each pixel's palette class is predicted from its own CAD column vector only,
//! so the tree cannot reproduce appearance that depends on neighbouring
//! structures. It serves as the baseline the U-Net has to beat.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::palette::{reconstruct, Palette};
use crate::raster::{ensure_same_dims, CadStack, QuantizedImage, RasterImage};

pub const DEFAULT_SAMPLES: usize = 5_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeNode {
    /// Sends `-1` to `low` and `+1` to `high`.
    Split { layer: usize, low: usize, high: usize },
    Leaf { class: u8 },
}

/// Binary tree over CAD layers with leaf palette classes. Nodes are stored
/// in an arena, root at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeModel {
    pub(crate) layers: usize,
    pub(crate) classes: usize,
    pub(crate) nodes: Vec<TreeNode>,
}

impl TreeModel {
    pub fn layer_count(&self) -> usize {
        self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub(crate) fn from_parts(layers: usize, classes: usize, nodes: Vec<TreeNode>) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("invalid tree: {m}"));
        if nodes.is_empty() {
            return Err(bad("no nodes"));
        }
        for (i, n) in nodes.iter().enumerate() {
            match *n {
                TreeNode::Split { layer, low, high } => {
                    if layer >= layers || low >= nodes.len() || high >= nodes.len() {
                        return Err(bad("split references out of range"));
                    }
                    if low <= i || high <= i {
                        return Err(bad("children must follow their parent"));
                    }
                }
                TreeNode::Leaf { class } => {
                    if class as usize >= classes {
                        return Err(bad("leaf class out of range"));
                    }
                }
            }
        }
        Ok(TreeModel {
            layers,
            classes,
            nodes,
        })
    }

    /// Class for one CAD pattern (bit `l` set when layer `l` is `+1`).
    pub fn predict_pattern(&self, pattern: u64) -> u8 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { class } => return class,
                TreeNode::Split { layer, low, high } => {
                    i = if pattern >> layer & 1 == 1 { high } else { low };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { low, high, .. } => 1 + walk(nodes, low).max(walk(nodes, high)),
            }
        }
        walk(&self.nodes, 0)
    }
}

fn gini(counts: &[u64], total: u64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

fn majority(counts: &[u64]) -> u8 {
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best as u8
}

/// Training rows grouped by CAD pattern: `hist[pattern][class]`.
struct PatternHistogram {
    patterns: Vec<(u64, Vec<u64>)>,
    classes: usize,
}

fn grow(hist: &PatternHistogram, rows: &[usize], layers: usize, nodes: &mut Vec<TreeNode>) -> usize {
    let k = hist.classes;
    let mut counts = vec![0u64; k];
    for &r in rows {
        for (c, &n) in hist.patterns[r].1.iter().enumerate() {
            counts[c] += n;
        }
    }
    let total: u64 = counts.iter().sum();
    let id = nodes.len();
    nodes.push(TreeNode::Leaf {
        class: majority(&counts),
    });
    let pure = counts.iter().filter(|&&n| n > 0).count() <= 1;
    if pure || rows.len() <= 1 {
        return id;
    }
    let parent = gini(&counts, total);
    // Greedy Gini split. A zero-gain split is still taken while distinct
    // patterns share the node, so every observed pattern ends in its own leaf
    // or in a pure one.
    let mut best: Option<(f64, usize)> = None;
    for layer in 0..layers {
        let mut high = vec![0u64; k];
        let mut n_high_rows = 0;
        for &r in rows {
            if hist.patterns[r].0 >> layer & 1 == 1 {
                n_high_rows += 1;
                for (c, &n) in hist.patterns[r].1.iter().enumerate() {
                    high[c] += n;
                }
            }
        }
        if n_high_rows == 0 || n_high_rows == rows.len() {
            continue;
        }
        let low: Vec<u64> = counts.iter().zip(&high).map(|(a, b)| a - b).collect();
        let th: u64 = high.iter().sum();
        let tl = total - th;
        let weighted = (tl as f64 * gini(&low, tl) + th as f64 * gini(&high, th)) / total as f64;
        let gain = parent - weighted;
        if best.map_or(true, |(g, _)| gain > g + 1e-15) {
            best = Some((gain, layer));
        }
    }
    let Some((_, layer)) = best else {
        return id;
    };
    let (high_rows, low_rows): (Vec<usize>, Vec<usize>) = rows
        .iter()
        .partition(|&&r| hist.patterns[r].0 >> layer & 1 == 1);
    let low = grow(hist, &low_rows, layers, nodes);
    let high = grow(hist, &high_rows, layers, nodes);
    nodes[id] = TreeNode::Split { layer, low, high };
    id
}

/// Fits a tree on up to `n_samples` randomly chosen pixels pairing each CAD
/// column vector with the pixel's quantized class.
pub fn train_tree(
    cad: &CadStack,
    target: &QuantizedImage,
    classes: usize,
    n_samples: usize,
    seed: u64,
) -> Result<TreeModel> {
    ensure_same_dims("tree training target", cad.dims(), target.dims())?;
    if cad.layer_count() > 63 {
        return Err(Error::InvalidArgument("at most 63 CAD layers are supported".into()));
    }
    let n = cad.height() * cad.width();
    let take = n_samples.min(n);
    if take == 0 {
        return Err(Error::Empty("tree training sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if take == n {
        (0..n).collect()
    } else {
        index::sample(&mut rng, n, take).into_vec()
    };
    let mut by_pattern: std::collections::BTreeMap<u64, Vec<u64>> = Default::default();
    for i in picks {
        let (y, x) = (i / cad.width(), i % cad.width());
        let class = target.as_slice()[i] as usize;
        if class >= classes {
            return Err(Error::ClassOutOfRange { index: class, classes });
        }
        by_pattern.entry(cad.pattern(y, x)).or_insert_with(|| vec![0; classes])[class] += 1;
    }
    let hist = PatternHistogram {
        patterns: by_pattern.into_iter().collect(),
        classes,
    };
    let rows: Vec<usize> = (0..hist.patterns.len()).collect();
    let mut nodes = Vec::new();
    grow(&hist, &rows, cad.layer_count(), &mut nodes);
    Ok(TreeModel {
        layers: cad.layer_count(),
        classes,
        nodes,
    })
}

/// Per-pixel class map predicted by the tree.
pub fn predict_classes(model: &TreeModel, cad: &CadStack) -> Result<QuantizedImage> {
    if cad.layer_count() != model.layers {
        return Err(Error::LayerCountMismatch {
            expected: model.layers,
            found: cad.layer_count(),
        });
    }
    let mut cache = std::collections::HashMap::new();
    let mut out = Vec::with_capacity(cad.height() * cad.width());
    for y in 0..cad.height() {
        for x in 0..cad.width() {
            let p = cad.pattern(y, x);
            out.push(*cache.entry(p).or_insert_with(|| model.predict_pattern(p)));
        }
    }
    QuantizedImage::new(cad.height(), cad.width(), out)
}

/// Simulated RGB image: tree classes mapped through the palette.
pub fn predict_tree(model: &TreeModel, cad: &CadStack, palette: &Palette) -> Result<RasterImage> {
    if palette.len() != model.classes {
        return Err(Error::InvalidArgument(format!(
            "palette has {} colours, tree predicts {} classes",
            palette.len(),
            model.classes
        )));
    }
    reconstruct(&predict_classes(model, cad)?, palette)
}
