use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{concat_channels, split_channels, BatchNorm2d, Conv2d, MaxPool2, Relu, Upsample2};
use super::{Layer, Mode, Param, Tensor};
use crate::error::{Error, Result};
use crate::palette::Palette;
use crate::raster::{CadStack, Logits, RasterImage};

pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 128];
const DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UNetMode {
    /// Three outputs mapped to colour by a scaled tanh.
    Regression,
    /// One score per palette entry.
    Classification,
}

impl UNetMode {
    pub fn name(self) -> &'static str {
        match self {
            UNetMode::Regression => "regression",
            UNetMode::Classification => "classification",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    pub mode: UNetMode,
    pub k_in: usize,
    pub k_out: usize,
    /// Channel widths of the three encoder stages and the bottleneck.
    pub widths: [usize; 4],
}

impl UNetConfig {
    pub fn regression(k_in: usize) -> Self {
        UNetConfig {
            mode: UNetMode::Regression,
            k_in,
            k_out: 3,
            widths: DEFAULT_WIDTHS,
        }
    }

    pub fn classification(k_in: usize, classes: usize) -> Self {
        UNetConfig {
            mode: UNetMode::Classification,
            k_in,
            k_out: classes,
            widths: DEFAULT_WIDTHS,
        }
    }

    pub fn with_widths(self, widths: [usize; 4]) -> Self {
        UNetConfig { widths, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_in == 0 || self.widths.contains(&0) {
            return Err(Error::InvalidArgument("network widths must be positive".into()));
        }
        match self.mode {
            UNetMode::Regression if self.k_out != 3 => {
                Err(Error::InvalidArgument("regression networks emit 3 channels".into()))
            }
            UNetMode::Classification if !(2..=64).contains(&self.k_out) => Err(
                Error::InvalidArgument("classification networks emit 2 to 64 classes".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Two 3x3 convolutions, each followed by batch norm and ReLU.
#[derive(Debug, Clone)]
struct Block {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    relu2: Relu,
}

impl Block {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Block {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, false, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), cout),
            relu1: Relu::default(),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, false, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), cout),
            relu2: Relu::default(),
        }
    }

    fn clear(&mut self) {
        self.conv1.clear();
        self.bn1.clear();
        self.relu1.clear();
        self.conv2.clear();
        self.bn2.clear();
        self.relu2.clear();
    }

    fn batch_norms(&mut self) -> [&mut BatchNorm2d; 2] {
        [&mut self.bn1, &mut self.bn2]
    }
}

impl Layer for Block {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let x = self.conv1.forward(x, mode);
        let x = self.bn1.forward(&x, mode);
        let x = self.relu1.forward(&x, mode);
        let x = self.conv2.forward(&x, mode);
        let x = self.bn2.forward(&x, mode);
        self.relu2.forward(&x, mode)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let d = self.relu2.backward(dy);
        let d = self.bn2.backward(&d);
        let d = self.conv2.backward(&d);
        let d = self.relu1.backward(&d);
        let d = self.bn1.backward(&d);
        self.conv1.backward(&d)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
    }
}

/// Encoder-decoder network with skip connections and three 2x downsamplings.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    encoders: Vec<Block>,
    pools: Vec<MaxPool2>,
    bottleneck: Block,
    ups: Vec<Upsample2>,
    decoders: Vec<Block>,
    head: Conv2d,
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w0, w1, w2, wb] = config.widths;
        let enc_widths = [w0, w1, w2];
        let mut encoders = Vec::new();
        let mut cin = config.k_in;
        for (i, &w) in enc_widths.iter().enumerate() {
            encoders.push(Block::new(&format!("enc{i}"), cin, w, &mut rng));
            cin = w;
        }
        let bottleneck = Block::new("bottleneck", w2, wb, &mut rng);
        let mut decoders = Vec::new();
        let mut below = wb;
        for i in 0..DEPTH {
            let skip = enc_widths[DEPTH - 1 - i];
            decoders.push(Block::new(&format!("dec{i}"), below + skip, skip, &mut rng));
            below = skip;
        }
        let head = Conv2d::new("head", w0, config.k_out, 1, true, &mut rng);
        Ok(UNet {
            config,
            encoders,
            pools: vec![MaxPool2::default(); DEPTH],
            bottleneck,
            ups: vec![Upsample2::default(); DEPTH],
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Sets the final projection to zero so every output starts at 0.
    pub fn zero_head(&mut self) {
        self.head.weight.value.fill(0.0);
        if let Some(b) = &mut self.head.bias {
            b.value.fill(0.0);
        }
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c != self.config.k_in {
            return Err(Error::LayerCountMismatch {
                expected: self.config.k_in,
                found: x.c,
            });
        }
        if x.h % 8 != 0 || x.w % 8 != 0 || x.h == 0 || x.w == 0 {
            return Err(Error::IndivisibleSize {
                height: x.h,
                width: x.w,
                divisor: 8,
            });
        }
        Ok(())
    }

    /// Checked forward pass.
    pub fn run(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.forward(x, mode))
    }

    /// Drops activations kept for a backward pass.
    pub fn clear_caches(&mut self) {
        self.encoders.iter_mut().for_each(Block::clear);
        self.bottleneck.clear();
        self.decoders.iter_mut().for_each(Block::clear);
        self.pools.iter_mut().for_each(MaxPool2::clear);
        self.ups.iter_mut().for_each(Upsample2::clear);
        self.head.clear();
    }

    /// Visits batch-norm running statistics as `(name, values)`.
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        let blocks = self
            .encoders
            .iter_mut()
            .chain(std::iter::once(&mut self.bottleneck))
            .chain(self.decoders.iter_mut());
        for block in blocks {
            for bn in block.batch_norms() {
                let base = bn.gamma.name.trim_end_matches(".gamma").to_string();
                f(&format!("{base}.running_mean"), &mut bn.running_mean);
                f(&format!("{base}.running_var"), &mut bn.running_var);
            }
        }
    }

    /// Rounds every parameter and statistic to the nearest `f32`, making the
    /// model exactly representable in a checkpoint.
    pub fn round_to_f32(&mut self) {
        self.visit_params(&mut |p| p.value.iter_mut().for_each(|v| *v = *v as f32 as f64));
        self.visit_buffers(&mut |_, b| b.iter_mut().for_each(|v| *v = *v as f32 as f64));
    }
}

impl Layer for UNet {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let mut skips = Vec::with_capacity(DEPTH);
        let mut cur = x.clone();
        for (enc, pool) in self.encoders.iter_mut().zip(&mut self.pools) {
            let e = enc.forward(&cur, mode);
            cur = pool.forward(&e, mode);
            skips.push(e);
        }
        cur = self.bottleneck.forward(&cur, mode);
        for (dec, up) in self.decoders.iter_mut().zip(&mut self.ups) {
            let skip = skips.pop().expect("one skip per stage");
            let u = up.forward(&cur, mode);
            cur = dec.forward(&concat_channels(&u, &skip), mode);
        }
        self.head.forward(&cur, mode)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut d = self.head.backward(dy);
        let mut skip_grads = Vec::with_capacity(DEPTH);
        for i in (0..DEPTH).rev() {
            let below = if i == 0 {
                self.config.widths[3]
            } else {
                self.config.widths[DEPTH - i]
            };
            let dcat = self.decoders[i].backward(&d);
            let (du, dskip) = split_channels(&dcat, below);
            skip_grads.push(dskip);
            d = self.ups[i].backward(&du);
        }
        d = self.bottleneck.backward(&d);
        for i in (0..DEPTH).rev() {
            let mut de = self.pools[i].backward(&d);
            de.add_assign(&skip_grads[i]);
            d = self.encoders[i].backward(&de);
        }
        d
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for e in &mut self.encoders {
            e.visit_params(f);
        }
        self.bottleneck.visit_params(f);
        for d in &mut self.decoders {
            d.visit_params(f);
        }
        self.head.visit_params(f);
    }
}

/// CAD columns as a single-sample network input with values in `{-1, +1}`.
pub fn cad_tensor(cad: &CadStack) -> Tensor {
    let (h, w) = cad.dims();
    let mut data = Vec::with_capacity(cad.layer_count() * h * w);
    for l in 0..cad.layer_count() {
        data.extend(cad.layer(l).iter().map(|&v| v as f64));
    }
    Tensor::from_vec(1, cad.layer_count(), h, w, data)
}

/// Converts one sample of network output to an RGB image: scaled tanh in
/// regression mode, palette lookup of the top-scoring class otherwise.
pub fn to_rgb(
    logits: &Tensor,
    sample: usize,
    mode: UNetMode,
    palette: Option<&Palette>,
) -> Result<RasterImage> {
    let (h, w, hw) = (logits.h, logits.w, logits.plane());
    let s = logits.sample(sample);
    match mode {
        UNetMode::Regression => {
            if logits.c != 3 {
                return Err(Error::InvalidArgument("regression output needs 3 channels".into()));
            }
            let mut data = Vec::with_capacity(hw * 3);
            for p in 0..hw {
                for c in 0..3 {
                    data.push(s[c * hw + p].tanh() / 2.0 + 0.5);
                }
            }
            RasterImage::new(h, w, data)
        }
        UNetMode::Classification => {
            let palette = palette
                .ok_or_else(|| Error::InvalidArgument("classification output needs a palette".into()))?;
            if palette.len() != logits.c {
                return Err(Error::InvalidArgument(format!(
                    "palette has {} colours, network emits {} classes",
                    palette.len(),
                    logits.c
                )));
            }
            let classes = Logits::new(logits.c, h, w, s.to_vec())?.argmax();
            crate::palette::reconstruct(&classes, palette)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_grad;

    fn toy(mode: UNetMode, k_out: usize) -> UNet {
        let config = UNetConfig {
            mode,
            k_in: 2,
            k_out,
            widths: [2, 4, 8, 16],
        };
        UNet::new(config, 1).unwrap()
    }

    #[test]
    fn output_matches_input_size() {
        let mut net = toy(UNetMode::Classification, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::random(2, 2, 16, 24, &mut rng);
        let y = net.run(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), [2, 5, 16, 24]);
        let d = net.backward(&y);
        assert_eq!(d.shape(), x.shape());
    }

    #[test]
    fn indivisible_and_wrong_layer_inputs_fail() {
        let mut net = toy(UNetMode::Regression, 3);
        assert!(matches!(
            net.run(&Tensor::zeros(1, 2, 12, 16), Mode::Infer),
            Err(Error::IndivisibleSize { .. })
        ));
        assert!(matches!(
            net.run(&Tensor::zeros(1, 3, 16, 16), Mode::Infer),
            Err(Error::LayerCountMismatch { .. })
        ));
    }

    #[test]
    fn zero_head_gives_zero_logits_and_grey_output() {
        let mut net = toy(UNetMode::Regression, 3);
        net.zero_head();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = net.run(&Tensor::random(1, 2, 8, 8, &mut rng), Mode::Infer).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
        let img = to_rgb(&y, 0, UNetMode::Regression, None).unwrap();
        assert!(img.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn constant_input_gives_translation_invariant_interior() {
        let mut net = toy(UNetMode::Regression, 3);
        let x = Tensor::from_vec(1, 2, 16, 16, vec![1.0; 512]);
        let y = net.run(&x, Mode::Infer).unwrap();
        let y2 = net.run(&x.clone(), Mode::Infer).unwrap();
        assert_eq!(y, y2);
    }

    #[test]
    fn regression_and_classification_share_body_shapes() {
        let mut a = toy(UNetMode::Regression, 3);
        let mut b = toy(UNetMode::Classification, 64);
        let mut shapes_a = Vec::new();
        let mut shapes_b = Vec::new();
        a.visit_params(&mut |p| shapes_a.push((p.name.clone(), p.shape.clone())));
        b.visit_params(&mut |p| shapes_b.push((p.name.clone(), p.shape.clone())));
        let body = |v: &Vec<(String, Vec<usize>)>| {
            v.iter().filter(|(n, _)| !n.starts_with("head")).cloned().collect::<Vec<_>>()
        };
        assert_eq!(body(&shapes_a), body(&shapes_b));
        assert_ne!(shapes_a, shapes_b);
    }

    #[test]
    fn default_decoder_widths() {
        let mut net = UNet::new(UNetConfig::classification(5, 64), 0).unwrap();
        let mut shapes = Vec::new();
        net.visit_params(&mut |p| {
            if p.name.ends_with("conv1.weight") {
                shapes.push((p.name.clone(), p.shape[1], p.shape[0]));
            }
        });
        let dec: Vec<_> = shapes.iter().filter(|s| s.0.starts_with("dec")).map(|s| (s.1, s.2)).collect();
        assert_eq!(dec, vec![(192, 64), (96, 32), (48, 16)]);
        zero_grad(&mut net);
    }

    #[test]
    fn to_rgb_classification_uses_palette() {
        let palette = Palette::from_ordered(vec![[0.0; 3], [0.2, 0.4, 0.6], [1.0; 3]]).unwrap();
        let mut logits = Tensor::zeros(1, 3, 1, 2);
        logits.data[2] = 5.0; // class 1 at pixel 0
        let img = to_rgb(&logits, 0, UNetMode::Classification, Some(&palette)).unwrap();
        assert_eq!(img.pixel(0, 0), [0.2, 0.4, 0.6]);
        assert_eq!(img.pixel(0, 1), [0.0; 3]);
        assert!(to_rgb(&logits, 0, UNetMode::Classification, None).is_err());
    }
}
