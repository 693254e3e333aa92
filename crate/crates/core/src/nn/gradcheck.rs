//! Central finite-difference checks of analytic gradients.
//!
//! Errors are reported as `|analytic - numeric| / max(|analytic|, |numeric|, floor)`,
//! so gradients far below `floor` are compared in absolute terms. Numeric
//! derivatives combine central differences at steps `h` and `h/2` by Richardson
//! extrapolation. When the two differences disagree, a ReLU or max-pool kink
//! lies inside the step, and the step shrinks tenfold until they agree.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{zero_grad, Layer, Loss, Mode, Target, Tensor};

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-5;
/// Smallest step tried when differences at `h` and `h/2` disagree.
pub const MIN_STEP: f64 = 1e-8;
const AGREE: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradReport {
    /// Worst relative error over input coordinates.
    pub input: f64,
    /// Worst relative error over parameters, with the offending parameter name.
    pub params: f64,
    pub worst_param: String,
    pub checked: usize,
}

impl GradReport {
    pub fn max(&self) -> f64 {
        self.input.max(self.params)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Checks a layer under the scalar objective `sum(r * y)` for a fixed random
/// projection `r`.
pub fn check_layer(layer: &mut dyn Layer, x: &Tensor, mode: Mode, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = layer.forward(x, mode);
    let r = Tensor::random(probe.n, probe.c, probe.h, probe.w, &mut rng);
    let objective = |layer: &mut dyn Layer, x: &Tensor| -> (f64, Tensor) {
        let y = layer.forward(x, mode);
        let value = y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum();
        (value, r.clone())
    };
    check(layer, x, &objective)
}

/// Checks a network end to end under one of the training losses.
pub fn check_loss(layer: &mut dyn Layer, x: &Tensor, loss: Loss, target: &Target, mode: Mode) -> GradReport {
    let objective = |layer: &mut dyn Layer, x: &Tensor| -> (f64, Tensor) {
        let y = layer.forward(x, mode);
        loss.evaluate(&y, target).expect("loss matches target")
    };
    check(layer, x, &objective)
}

type Objective<'a> = dyn Fn(&mut dyn Layer, &Tensor) -> (f64, Tensor) + 'a;

fn check(layer: &mut dyn Layer, x: &Tensor, objective: &Objective) -> GradReport {
    zero_grad(layer);
    let (_, dy) = objective(layer, x);
    let dx = layer.backward(&dy);

    let mut report = GradReport::default();
    let mut xp = x.clone();
    for i in 0..x.data.len() {
        let orig = x.data[i];
        let numeric = derivative(|d| {
            xp.data[i] = orig + d;
            let v = objective(layer, &xp).0;
            xp.data[i] = orig;
            v
        });
        report.input = report.input.max(relative_error(dx.data[i], numeric));
        report.checked += 1;
    }

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    layer.visit_params(&mut |p| analytic.push((p.name.clone(), p.grad.clone())));
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for (j, &g) in grads.iter().enumerate() {
            let numeric = derivative(|d| {
                nudge(layer, pi, j, d);
                let v = objective(layer, x).0;
                nudge(layer, pi, j, -d);
                v
            });
            let err = relative_error(g, numeric);
            if err > report.params {
                report.params = err;
                report.worst_param = format!("{name}[{j}]");
            }
            report.checked += 1;
        }
    }
    report
}

fn derivative(mut f: impl FnMut(f64) -> f64) -> f64 {
    let mut h = STEP;
    loop {
        let (fp, fm) = (f(h), f(-h));
        let coarse = (fp - fm) / (2.0 * h);
        let fine = (f(h / 2.0) - f(-h / 2.0)) / h;
        let noise = 64.0 * f64::EPSILON * fp.abs().max(fm.abs()).max(1.0) / h;
        let agree = (coarse - fine).abs() <= AGREE * coarse.abs().max(fine.abs()) + noise;
        if agree || h <= MIN_STEP {
            return (4.0 * fine - coarse) / 3.0;
        }
        h /= 10.0;
    }
}

fn nudge(layer: &mut dyn Layer, param: usize, index: usize, delta: f64) {
    let mut k = 0;
    layer.visit_params(&mut |p| {
        if k == param {
            p.value[index] += delta;
        }
        k += 1;
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BatchNorm2d, Conv2d, MaxPool2, Relu, UNet, UNetConfig, UNetMode, Upsample2};

    const TOL: f64 = 1e-4;

    fn input(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::random(2, c, h, w, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn conv_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, bias) in [(3, false), (1, true)] {
            let mut conv = Conv2d::new("c", 3, 2, k, bias, &mut rng);
            let r = check_layer(&mut conv, &input(2, 3, 4, 5), Mode::Train, 3);
            assert!(r.max() < TOL, "{r:?}");
        }
    }

    #[test]
    fn batch_norm_both_modes() {
        for mode in [Mode::Train, Mode::Eval] {
            let mut bn = BatchNorm2d::new("bn", 3);
            bn.gamma.value = vec![0.7, 1.3, -0.4];
            bn.beta.value = vec![0.1, -0.2, 0.3];
            bn.running_mean = vec![0.2, -0.1, 0.0];
            bn.running_var = vec![0.5, 1.5, 2.0];
            let r = check_layer(&mut bn, &input(4, 3, 3, 4), mode, 5);
            assert!(r.max() < TOL, "{mode:?} {r:?}");
        }
    }

    #[test]
    fn parameter_free_layers() {
        let x = input(6, 2, 4, 6);
        for (name, layer) in [
            ("relu", &mut Relu::default() as &mut dyn Layer),
            ("pool", &mut MaxPool2::default()),
            ("upsample", &mut Upsample2::default()),
        ] {
            let r = check_layer(layer, &x, Mode::Train, 7);
            assert!(r.max() < TOL, "{name} {r:?}");
        }
    }

    #[test]
    fn losses_on_raw_logits() {
        let logits = input(8, 5, 3, 3);
        let classes: Vec<u8> = (0..18).map(|i| (i * 7 % 5) as u8).collect();
        let rgb = Tensor::random(2, 3, 3, 3, &mut ChaCha8Rng::seed_from_u64(9));
        let rgb = Tensor::from_vec(2, 3, 3, 3, rgb.data.iter().map(|v| (v + 1.0) / 2.0).collect());
        struct Identity;
        impl Layer for Identity {
            fn forward(&mut self, x: &Tensor, _: Mode) -> Tensor {
                x.clone()
            }
            fn backward(&mut self, dy: &Tensor) -> Tensor {
                dy.clone()
            }
        }
        for loss in [Loss::CrossEntropy, Loss::Focal { gamma: 2.0 }, Loss::Focal { gamma: 0.5 }] {
            let r = check_loss(&mut Identity, &logits, loss, &Target::Classes(&classes), Mode::Train);
            assert!(r.max() < TOL, "{loss:?} {r:?}");
        }
        let lx = Tensor::from_vec(2, 3, 3, 3, logits.data[..54].to_vec());
        let r = check_loss(&mut Identity, &lx, Loss::L2, &Target::Rgb(&rgb), Mode::Train);
        assert!(r.max() < TOL, "{r:?}");
    }

    #[test]
    fn small_unet_regression() {
        let config = UNetConfig {
            mode: UNetMode::Regression,
            k_in: 2,
            k_out: 3,
            widths: [2, 2, 2, 2],
        };
        let mut net = UNet::new(config, 3).unwrap();
        let x = input(10, 2, 8, 8);
        let target = Tensor::from_vec(2, 3, 8, 8, input(11, 3, 8, 8).data.iter().map(|v| v.abs()).collect());
        let r = check_loss(&mut net, &x, Loss::L2, &Target::Rgb(&target), Mode::Train);
        assert!(r.max() < TOL, "{r:?}");
    }
}
