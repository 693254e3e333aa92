use rand::Rng;
use rayon::prelude::*;

use super::{gemm, Layer, Mode, Param, Tensor};

/// Square convolution with stride 1 and zero padding that preserves the
/// spatial size. Kernel side 1 or 3.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv2d {
    /// Uniform initialization in `±1/sqrt(fan_in)`.
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel side must be 1 or 3");
        let fan_in = cin * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = (0..cout * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
        let bias = bias.then(|| {
            let b = (0..cout).map(|_| rng.gen_range(-bound..bound)).collect();
            Param::new(format!("{name}.bias"), vec![cout], b)
        });
        Conv2d {
            cin,
            cout,
            kernel,
            weight: Param::new(
                format!("{name}.weight"),
                vec![cout, cin, kernel, kernel],
                weight,
            ),
            bias,
            input: None,
        }
    }

    pub(crate) fn clear(&mut self) {
        self.input = None;
    }

    fn taps(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn forward_sample(&self, x: &[f64], h: usize, w: usize, out: &mut [f64]) {
        let hw = h * w;
        let cols;
        let cols_ref = if self.kernel == 1 {
            x
        } else {
            cols = im2col(x, self.cin, h, w);
            &cols
        };
        gemm(self.cout, self.taps(), hw, &self.weight.value, false, cols_ref, false, 0.0, out);
        if let Some(b) = &self.bias {
            for (o, bv) in out.chunks_mut(hw).zip(&b.value) {
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

/// Patch matrix of shape `(cin * 9) x (h * w)` for a 3x3 zero-padded kernel.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; cin * 9 * hw];
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                for y in 0..h {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let src = &plane[yy as usize * w..(yy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    for xo in x_lo..x_hi {
                        dst[xo] = src[xo + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch gradients into an input gradient.
fn col2im(cols: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; cin * hw];
    for ci in 0..cin {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                for y in 0..h {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[yy as usize * w..(yy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    for xo in x_lo..x_hi {
                        dst[xo + kx - 1] += src[xo];
                    }
                }
            }
        }
    }
    x
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (h, w) = (x.h, x.w);
        let mut out = Tensor::zeros(x.n, self.cout, h, w);
        let this = &*self;
        out.data
            .par_chunks_mut(self.cout * h * w)
            .zip(x.data.par_chunks(self.cin * h * w))
            .for_each(|(o, xs)| this.forward_sample(xs, h, w, o));
        self.input = mode.records().then(|| x.clone());
        out
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("conv backward without recorded forward");
        let (h, w, hw) = (x.h, x.w, x.plane());
        let (cin, cout, taps, kernel) = (self.cin, self.cout, self.taps(), self.kernel);
        let weight = &self.weight.value;
        let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..x.n)
            .into_par_iter()
            .map(|i| {
                let xs = x.sample(i);
                let dys = dy.sample(i);
                let cols;
                let cols_ref = if kernel == 1 {
                    xs
                } else {
                    cols = im2col(xs, cin, h, w);
                    &cols
                };
                let mut dw = vec![0.0; cout * taps];
                gemm(cout, hw, taps, dys, false, cols_ref, true, 0.0, &mut dw);
                let mut dcols = vec![0.0; taps * hw];
                gemm(taps, cout, hw, weight, true, dys, false, 0.0, &mut dcols);
                let dx = if kernel == 1 { dcols } else { col2im(&dcols, cin, h, w) };
                (dw, dx)
            })
            .collect();
        let mut dx = Tensor::zeros(x.n, cin, h, w);
        for (i, (dw, dxs)) in per_sample.into_iter().enumerate() {
            for (g, d) in self.weight.grad.iter_mut().zip(&dw) {
                *g += d;
            }
            dx.data[i * cin * hw..(i + 1) * cin * hw].copy_from_slice(&dxs);
        }
        if let Some(b) = &mut self.bias {
            for i in 0..dy.n {
                for (c, g) in b.grad.iter_mut().enumerate() {
                    *g += dy.sample(i)[c * hw..(c + 1) * hw].iter().sum::<f64>();
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

/// Per-channel batch normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![1.0; channels]),
            beta: Param::new(format!("{name}.beta"), vec![channels], vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache: None,
        }
    }

    pub(crate) fn clear(&mut self) {
        self.cache = None;
    }

    fn channel_values<'a>(x: &'a Tensor, c: usize) -> impl Iterator<Item = &'a f64> + 'a {
        let hw = x.plane();
        (0..x.n).flat_map(move |n| x.data[(n * x.c + c) * hw..][..hw].iter())
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        assert_eq!(x.c, self.channels, "batch norm channels");
        let hw = x.plane();
        let m = (x.n * hw) as f64;
        let batch_stats = mode == Mode::Train;
        let mut inv_std = vec![0.0; x.c];
        let mut shift = vec![0.0; x.c];
        for c in 0..x.c {
            let (mean, var) = if batch_stats {
                let mean = Self::channel_values(x, c).sum::<f64>() / m;
                let var = Self::channel_values(x, c).map(|v| (v - mean).powi(2)).sum::<f64>() / m;
                self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean;
                let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * unbiased;
                (mean, var)
            } else {
                (self.running_mean[c], self.running_var[c])
            };
            inv_std[c] = 1.0 / (var + BN_EPS).sqrt();
            shift[c] = mean;
        }
        let mut xhat = x.clone();
        for (i, chunk) in xhat.data.chunks_mut(hw).enumerate() {
            let c = i % x.c;
            chunk.iter_mut().for_each(|v| *v = (*v - shift[c]) * inv_std[c]);
        }
        let mut out = xhat.clone();
        for (i, chunk) in out.data.chunks_mut(hw).enumerate() {
            let c = i % x.c;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            chunk.iter_mut().for_each(|v| *v = *v * g + b);
        }
        self.cache = mode.records().then_some(BnCache {
            xhat,
            inv_std,
            batch_stats,
        });
        out
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("batch norm backward without recorded forward");
        let hw = dy.plane();
        let m = (dy.n * hw) as f64;
        let mut sum_dy = vec![0.0; dy.c];
        let mut sum_dy_xhat = vec![0.0; dy.c];
        for c in 0..dy.c {
            for n in 0..dy.n {
                let off = (n * dy.c + c) * hw;
                for (d, xh) in dy.data[off..off + hw].iter().zip(&cache.xhat.data[off..off + hw]) {
                    sum_dy[c] += d;
                    sum_dy_xhat[c] += d * xh;
                }
            }
            self.gamma.grad[c] += sum_dy_xhat[c];
            self.beta.grad[c] += sum_dy[c];
        }
        let mut dx = dy.clone();
        for (i, chunk) in dx.data.chunks_mut(hw).enumerate() {
            let c = i % dy.c;
            let scale = self.gamma.value[c] * cache.inv_std[c];
            let xhat = &cache.xhat.data[i * hw..(i + 1) * hw];
            if cache.batch_stats {
                let (mean_dy, mean_dy_xhat) = (sum_dy[c] / m, sum_dy_xhat[c] / m);
                for (d, xh) in chunk.iter_mut().zip(xhat) {
                    *d = scale * (*d - mean_dy - xh * mean_dy_xhat);
                }
            } else {
                chunk.iter_mut().for_each(|d| *d *= scale);
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    active: Option<Vec<bool>>,
}

impl Relu {
    pub(crate) fn clear(&mut self) {
        self.active = None;
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let mut out = x.clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.active = mode.records().then(|| x.data.iter().map(|&v| v > 0.0).collect());
        out
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let active = self.active.as_ref().expect("relu backward without recorded forward");
        let mut dx = dy.clone();
        for (d, &a) in dx.data.iter_mut().zip(active) {
            if !a {
                *d = 0.0;
            }
        }
        dx
    }
}

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major
/// order within the window.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    argmax: Option<(Vec<u8>, [usize; 4])>,
}

impl MaxPool2 {
    pub(crate) fn clear(&mut self) {
        self.argmax = None;
    }
}

impl Layer for MaxPool2 {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        assert!(x.h % 2 == 0 && x.w % 2 == 0, "max pool needs even sides");
        let (oh, ow) = (x.h / 2, x.w / 2);
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        let mut arg = vec![0u8; out.data.len()];
        for p in 0..x.n * x.c {
            let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
            for y in 0..oh {
                for xo in 0..ow {
                    let base = 2 * y * x.w + 2 * xo;
                    let cand = [src[base], src[base + 1], src[base + x.w], src[base + x.w + 1]];
                    let mut best = 0;
                    for k in 1..4 {
                        if cand[k] > cand[best] {
                            best = k;
                        }
                    }
                    let o = p * oh * ow + y * ow + xo;
                    out.data[o] = cand[best];
                    arg[o] = best as u8;
                }
            }
        }
        self.argmax = mode.records().then_some((arg, x.shape()));
        out
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (arg, [n, c, h, w]) = self.argmax.as_ref().expect("pool backward without recorded forward");
        let mut dx = Tensor::zeros(*n, *c, *h, *w);
        let (oh, ow) = (h / 2, w / 2);
        for p in 0..n * c {
            for y in 0..oh {
                for xo in 0..ow {
                    let o = p * oh * ow + y * ow + xo;
                    let k = arg[o] as usize;
                    let idx = p * h * w + (2 * y + k / 2) * w + 2 * xo + k % 2;
                    dx.data[idx] += dy.data[o];
                }
            }
        }
        dx
    }
}

/// Source indices and weight of the upper neighbour for each output
/// coordinate of a 2x bilinear upsample with half-pixel centres.
fn upsample_axis(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Parameter-free 2x bilinear upsampling.
#[derive(Debug, Clone, Default)]
pub struct Upsample2 {
    input_shape: Option<[usize; 4]>,
}

impl Upsample2 {
    pub(crate) fn clear(&mut self) {
        self.input_shape = None;
    }
}

impl Layer for Upsample2 {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let (oh, ow) = (2 * x.h, 2 * x.w);
        let ys = upsample_axis(x.h);
        let xs = upsample_axis(x.w);
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        for p in 0..x.n * x.c {
            let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
            let dst = &mut out.data[p * oh * ow..(p + 1) * oh * ow];
            for (y, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (xo, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let top = (1.0 - lx) * src[y0 * x.w + x0] + lx * src[y0 * x.w + x1];
                    let bottom = (1.0 - lx) * src[y1 * x.w + x0] + lx * src[y1 * x.w + x1];
                    dst[y * ow + xo] = (1.0 - ly) * top + ly * bottom;
                }
            }
        }
        self.input_shape = mode.records().then_some(x.shape());
        out
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let [n, c, h, w] = self.input_shape.expect("upsample backward without recorded forward");
        let ys = upsample_axis(h);
        let xs = upsample_axis(w);
        let (oh, ow) = (2 * h, 2 * w);
        let mut dx = Tensor::zeros(n, c, h, w);
        for p in 0..n * c {
            let g = &dy.data[p * oh * ow..(p + 1) * oh * ow];
            let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
            for (y, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (xo, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let d = g[y * ow + xo];
                    dst[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * d;
                    dst[y0 * w + x1] += (1.0 - ly) * lx * d;
                    dst[y1 * w + x0] += ly * (1.0 - lx) * d;
                    dst[y1 * w + x1] += ly * lx * d;
                }
            }
        }
        dx
    }
}

/// Concatenates along the channel axis, `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shapes");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for i in 0..a.n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor::from_vec(a.n, a.c + b.c, a.h, a.w, data)
}

/// Inverse of [`concat_channels`]: the first `ca` channels and the rest.
pub fn split_channels(t: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let hw = t.plane();
    let cb = t.c - ca;
    let mut a = Vec::with_capacity(t.n * ca * hw);
    let mut b = Vec::with_capacity(t.n * cb * hw);
    for i in 0..t.n {
        let s = t.sample(i);
        a.extend_from_slice(&s[..ca * hw]);
        b.extend_from_slice(&s[ca * hw..]);
    }
    (
        Tensor::from_vec(t.n, ca, t.h, t.w, a),
        Tensor::from_vec(t.n, cb, t.h, t.w, b),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let r = (conv.kernel / 2) as isize;
        let mut out = Tensor::zeros(x.n, conv.cout, x.h, x.w);
        for n in 0..x.n {
            for co in 0..conv.cout {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[co]);
                        for ci in 0..conv.cin {
                            for ky in 0..conv.kernel {
                                for kx in 0..conv.kernel {
                                    let sy = y as isize + ky as isize - r;
                                    let sx = xx as isize + kx as isize - r;
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let wi = ((co * conv.cin + ci) * conv.kernel + ky) * conv.kernel + kx;
                                    acc += conv.weight.value[wi] * x.get(n, ci, sy as usize, sx as usize);
                                }
                            }
                        }
                        out.data[((n * conv.cout + co) * x.h + y) * x.w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, bias) in [(3, false), (3, true), (1, true)] {
            let mut conv = Conv2d::new("c", 3, 4, k, bias, &mut rng);
            let x = Tensor::random(2, 3, 5, 6, &mut rng);
            let got = conv.forward(&x, Mode::Infer);
            let want = naive_conv(&conv, &x);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..2 * 4 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..2 * 9 * 4 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = im2col(&x, 2, 4, 5).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&c, 2, 4, 5)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_train_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::new("bn", 2);
        let x = Tensor::random(3, 2, 4, 4, &mut rng);
        let y = bn.forward(&x, Mode::Train);
        for c in 0..2 {
            let vals: Vec<f64> = BatchNorm2d::channel_values(&y, c).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::random(1, 2, 4, 6, &mut rng);
        let p = MaxPool2::default().forward(&x, Mode::Infer);
        assert_eq!(p.shape(), [1, 2, 2, 3]);
        assert_eq!(p.get(0, 1, 1, 2), [x.get(0, 1, 2, 4), x.get(0, 1, 2, 5), x.get(0, 1, 3, 4), x.get(0, 1, 3, 5)]
            .into_iter()
            .fold(f64::MIN, f64::max));
        let u = Upsample2::default().forward(&x, Mode::Infer);
        assert_eq!(u.shape(), [1, 2, 8, 12]);
    }

    #[test]
    fn upsample_reference_values() {
        // 1-d profile [0, 1] upsamples to [0, 0.25, 0.75, 1]
        let x = Tensor::from_vec(1, 1, 1, 2, vec![0.0, 1.0]);
        let u = Upsample2::default().forward(&x, Mode::Infer);
        assert_eq!(&u.data[..4], &[0.0, 0.25, 0.75, 1.0]);
        let c = Tensor::from_vec(1, 1, 2, 2, vec![0.3; 4]);
        assert!(Upsample2::default().forward(&c, Mode::Infer).data.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::random(2, 3, 2, 2, &mut rng);
        let b = Tensor::random(2, 1, 2, 2, &mut rng);
        let (a2, b2) = split_channels(&concat_channels(&a, &b), 3);
        assert_eq!((a, b), (a2, b2));
    }
}
