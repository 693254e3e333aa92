//! Minimal convolutional network toolkit: NCHW tensors, layers with explicit
//! backward passes, losses and optimizers.

pub mod gradcheck;
mod layers;
mod loss;
mod optim;
mod unet;

pub use layers::{concat_channels, split_channels, BatchNorm2d, Conv2d, MaxPool2, Relu, Upsample2};
pub use loss::{Loss, Target};
pub use optim::{learning_rate, Optimizer, OptimizerKind};
pub use unet::{cad_tensor, to_rgb, UNet, UNetConfig, UNetMode, DEFAULT_WIDTHS};

use rand::Rng;

/// Dense 4-d array in batch, channel, row, column order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Tensor { n, c, h, w, data }
    }

    pub fn random(n: usize, c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    /// Stacks equally shaped single samples along the batch axis.
    pub fn stack(samples: &[Tensor]) -> Tensor {
        let first = &samples[0];
        let mut data = Vec::with_capacity(samples.len() * first.sample_len());
        for s in samples {
            assert_eq!((s.c, s.h, s.w), (first.c, first.h, first.w), "stacked shapes");
            data.extend_from_slice(&s.data);
        }
        Tensor::from_vec(samples.iter().map(|s| s.n).sum(), first.c, first.h, first.w, data)
    }

    fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// A trainable array and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param {
            name: name.into(),
            shape,
            value,
            grad,
        }
    }
}

/// How a forward pass treats batch normalization and activation caching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated, activations kept for backward.
    Train,
    /// Running statistics, activations kept for backward.
    Eval,
    /// Running statistics, nothing kept.
    Infer,
}

impl Mode {
    fn records(self) -> bool {
        self != Mode::Infer
    }
}

pub trait Layer {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor;
    /// Propagates `dy` back to the input and accumulates parameter gradients.
    /// Requires a preceding recording forward pass.
    fn backward(&mut self, dy: &Tensor) -> Tensor;
    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
}

pub fn zero_grad(layer: &mut dyn Layer) {
    layer.visit_params(&mut |p| p.grad.fill(0.0));
}

pub fn param_count(layer: &mut dyn Layer) -> usize {
    let mut n = 0;
    layer.visit_params(&mut |p| n += p.value.len());
    n
}

/// Row-major product `c = op(a) * op(b) + beta * c` with `op(a)` of shape
/// `m x k` and `op(b)` of shape `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover every element addressed by the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_in_all_layouts() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                want[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
            }
        }
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, 0.0, &mut c);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
