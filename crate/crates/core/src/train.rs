//! U-Net training on CAD/photo patch pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    cad_tensor, learning_rate, to_rgb, zero_grad, Layer, Loss, Mode, Optimizer, OptimizerKind,
    Target, Tensor, UNet, UNetConfig, UNetMode, DEFAULT_WIDTHS,
};
use crate::palette::{quantize, Palette};
use crate::raster::{split_patches, CadStack, PatchRegion, QuantizedImage, RasterImage};
use crate::stats::{mean, variance_u8};
use crate::{metrics, raster};

/// Patches evaluated per forward pass during validation.
const EVAL_BATCH: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L2,
    CrossEntropy,
    Focal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub max_batch: usize,
    /// Minimum population variance of a training patch's palette indices.
    pub variance_threshold: f64,
    pub lr0: f64,
    pub decay_factor: f64,
    /// Epochs (1-based) after which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub epochs: usize,
    pub optimizer: OptimizerChoice,
    pub loss: LossKind,
    pub focal_gamma: f64,
    pub widths: [usize; 4],
    pub split_fraction: f64,
    /// Seed of the train/validation split; `seed` when absent.
    pub split_seed: Option<u64>,
    /// Pixels sampled to fit the decision-tree baseline.
    pub tree_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 64,
            batch_size: 32,
            max_batch: 128,
            variance_threshold: 0.0,
            lr0: 5e-3,
            decay_factor: 0.6,
            decay_epochs: vec![1, 3, 5, 8],
            epochs: 10,
            optimizer: OptimizerChoice::Sgd,
            loss: LossKind::CrossEntropy,
            focal_gamma: Loss::DEFAULT_FOCAL_GAMMA,
            widths: DEFAULT_WIDTHS,
            split_fraction: 0.7,
            split_seed: None,
            tree_samples: 1_000_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Adaptive-moment variant: Adam at a constant 1e-4 with batches of 32.
    pub fn adam_preset() -> Self {
        TrainConfig {
            lr0: 1e-4,
            decay_epochs: Vec::new(),
            optimizer: OptimizerChoice::Adam,
            batch_size: 32,
            ..TrainConfig::default()
        }
    }

    pub fn loss(&self) -> Loss {
        match self.loss {
            LossKind::L2 => Loss::L2,
            LossKind::CrossEntropy => Loss::CrossEntropy,
            LossKind::Focal => Loss::Focal {
                gamma: self.focal_gamma,
            },
        }
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
            OptimizerChoice::Adam => OptimizerKind::adam(),
        }
    }

    /// Learning rate used throughout 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        learning_rate(self.lr0, self.decay_factor, &self.decay_epochs, epoch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch_size == 0 || self.patch_size % 8 != 0 {
            return bad("train.patch_size must be a positive multiple of 8");
        }
        if self.batch_size == 0 || self.batch_size > self.max_batch {
            return bad("train.batch_size must be in 1..=max_batch");
        }
        if !(0.0..=50.0).contains(&self.variance_threshold) {
            return bad("train.variance_threshold must lie in [0, 50]");
        }
        if !(self.lr0 > 0.0 && self.decay_factor > 0.0) {
            return bad("train.lr0 and train.decay_factor must be positive");
        }
        if self.epochs == 0 {
            return bad("train.epochs must be positive");
        }
        if !(self.focal_gamma >= 0.0) {
            return bad("train.focal_gamma must be non-negative");
        }
        if self.widths.contains(&0) {
            return bad("train.widths must be positive");
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad("train.split_fraction must lie in (0, 1)");
        }
        if self.tree_samples == 0 {
            return bad("train.tree_samples must be positive");
        }
        Ok(())
    }
}

/// Scores of one epoch's model on the validation patches.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochScores {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean squared error of the rendered validation patches against the photo.
    pub val_l2: f64,
    /// Validation value of the training loss.
    pub val_loss: f64,
    /// Validation cross-entropy (classification only).
    pub val_ce: Option<f64>,
}

/// A model snapshot taken at the end of an epoch.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: UNet,
    pub loss: Loss,
    pub scores: EpochScores,
    /// Digest of the palette a classification model was trained against.
    pub palette_digest: Option<u64>,
}

impl Checkpoint {
    pub fn epoch(&self) -> usize {
        self.scores.epoch
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoints: Vec<Checkpoint>,
    pub split: raster::PatchSplit,
    /// Training patches that passed the variance filter.
    pub kept: Vec<PatchRegion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectBy {
    L2,
    /// The loss the model was trained with.
    Loss,
}

/// Index of the best checkpoint; ties go to the earliest.
pub fn select_best(checkpoints: &[Checkpoint], by: SelectBy) -> Result<usize> {
    let score = |c: &Checkpoint| match by {
        SelectBy::L2 => c.scores.val_l2,
        SelectBy::Loss => c.scores.val_loss,
    };
    let mut best: Option<usize> = None;
    for (i, c) in checkpoints.iter().enumerate() {
        if best.map_or(true, |b| score(c) < score(&checkpoints[b])) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::Empty("no checkpoints to select from".into()))
}

/// Keeps the regions whose quantized target has index variance of at least
/// `threshold`.
pub fn variance_filter(
    target: &QuantizedImage,
    regions: &[PatchRegion],
    threshold: f64,
) -> Result<Vec<PatchRegion>> {
    let mut kept = Vec::new();
    for r in regions {
        if variance_u8(target.extract(r)?.as_slice()) >= threshold {
            kept.push(*r);
        }
    }
    Ok(kept)
}

/// Row-interleaved RGB as a single-sample channel-planar tensor.
pub fn rgb_tensor(img: &RasterImage) -> Tensor {
    let (h, w) = img.dims();
    let src = img.as_slice();
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = src[p * 3 + c];
        }
    }
    Tensor::from_vec(1, 3, h, w, data)
}

struct Patches<'a> {
    cad: &'a CadStack,
    photo: &'a RasterImage,
    classes: Option<&'a QuantizedImage>,
}

impl Patches<'_> {
    fn inputs(&self, regions: &[PatchRegion]) -> Result<Tensor> {
        let parts = regions
            .iter()
            .map(|r| Ok(cad_tensor(&self.cad.extract(r)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&parts))
    }

    fn rgb(&self, regions: &[PatchRegion]) -> Result<Tensor> {
        let parts = regions
            .iter()
            .map(|r| Ok(rgb_tensor(&self.photo.extract(r)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&parts))
    }

    fn class_indices(&self, regions: &[PatchRegion]) -> Result<Vec<u8>> {
        let q = self.classes.expect("classification target");
        let mut out = Vec::new();
        for r in regions {
            out.extend_from_slice(q.extract(r)?.as_slice());
        }
        Ok(out)
    }

    fn loss(&self, loss: Loss, logits: &Tensor, regions: &[PatchRegion]) -> Result<(f64, Tensor)> {
        if loss.is_classification() {
            loss.evaluate(logits, &Target::Classes(&self.class_indices(regions)?))
        } else {
            loss.evaluate(logits, &Target::Rgb(&self.rgb(regions)?))
        }
    }
}

/// Trains a U-Net on `photo` given its CAD stack, returning one checkpoint per
/// epoch. Classification losses need the palette the targets are quantized
/// with. `on_epoch` sees each checkpoint as soon as it is taken.
pub fn train_unet(
    cad: &CadStack,
    photo: &RasterImage,
    palette: Option<&Palette>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&Checkpoint),
) -> Result<TrainRun> {
    config.validate()?;
    raster::ensure_same_dims("training photo", cad.dims(), photo.dims())?;
    let loss = config.loss();
    let classes = palette.map(|p| quantize(photo, p));
    if loss.is_classification() && palette.is_none() {
        return Err(Error::InvalidArgument("classification losses need a palette".into()));
    }
    if config.variance_threshold > 0.0 && classes.is_none() {
        return Err(Error::InvalidArgument("the variance filter needs a palette".into()));
    }
    let (h, w) = cad.dims();
    let split = split_patches(h, w, config.patch_size, config.split_fraction, config.split_seed.unwrap_or(config.seed))?;
    let kept = match &classes {
        Some(q) => variance_filter(q, &split.train, config.variance_threshold)?,
        None => split.train.clone(),
    };
    if kept.is_empty() {
        return Err(Error::Empty("no training patch passes the variance filter".into()));
    }
    if split.val.is_empty() {
        return Err(Error::Empty("validation split is empty".into()));
    }

    let net_config = match loss {
        Loss::L2 => UNetConfig::regression(cad.layer_count()),
        _ => UNetConfig::classification(cad.layer_count(), palette.map_or(0, Palette::len)),
    }
    .with_widths(config.widths);
    let mut net = UNet::new(net_config, config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer_kind());
    let patches = Patches {
        cad,
        photo,
        classes: classes.as_ref(),
    };

    let mut order = kept.clone();
    let mut checkpoints = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for batch in order.chunks(config.batch_size) {
            let x = patches.inputs(batch)?;
            zero_grad(&mut net);
            let logits = net.forward(&x, Mode::Train);
            let (value, grad) = patches.loss(loss, &logits, batch)?;
            net.backward(&grad);
            optimizer.step(&mut net, lr);
            batch_losses.push(value);
        }
        net.clear_caches();
        let mut model = net.clone();
        model.round_to_f32();
        let scores = validate(&mut model, &patches, &split.val, loss, palette, epoch, lr, mean(&batch_losses))?;
        let checkpoint = Checkpoint {
            model,
            loss,
            scores,
            palette_digest: palette.filter(|_| loss.is_classification()).map(Palette::digest),
        };
        on_epoch(&checkpoint);
        checkpoints.push(checkpoint);
    }
    Ok(TrainRun {
        checkpoints,
        split,
        kept,
    })
}

#[allow(clippy::too_many_arguments)]
fn validate(
    model: &mut UNet,
    patches: &Patches,
    val: &[PatchRegion],
    loss: Loss,
    palette: Option<&Palette>,
    epoch: usize,
    lr: f64,
    train_loss: f64,
) -> Result<EpochScores> {
    let mode = model.config().mode;
    let mut l2s = Vec::with_capacity(val.len());
    let mut losses = Vec::new();
    let mut ces = Vec::new();
    for batch in val.chunks(EVAL_BATCH) {
        let logits = model.run(&patches.inputs(batch)?, Mode::Infer)?;
        for (i, r) in batch.iter().enumerate() {
            let rendered = to_rgb(&logits, i, mode, palette)?;
            l2s.push(metrics::l2(&rendered, &patches.photo.extract(r)?)?);
        }
        losses.push(patches.loss(loss, &logits, batch)?.0 * batch.len() as f64);
        if mode == UNetMode::Classification {
            ces.push(patches.loss(Loss::CrossEntropy, &logits, batch)?.0 * batch.len() as f64);
        }
    }
    let n = val.len() as f64;
    Ok(EpochScores {
        epoch,
        lr,
        train_loss,
        val_l2: mean(&l2s),
        val_loss: losses.iter().sum::<f64>() / n,
        val_ce: (!ces.is_empty()).then(|| ces.iter().sum::<f64>() / n),
    })
}
