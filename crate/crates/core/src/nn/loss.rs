use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::stats::pairwise_sum;

/// Training objective applied to raw network outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Loss {
    /// Mean squared error after mapping outputs through `tanh(x)/2 + 1/2`.
    L2,
    CrossEntropy,
    Focal { gamma: f64 },
}

impl Loss {
    pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;

    pub fn name(&self) -> &'static str {
        match self {
            Loss::L2 => "l2",
            Loss::CrossEntropy => "cross_entropy",
            Loss::Focal { .. } => "focal",
        }
    }

    pub fn from_name(name: &str) -> Option<Loss> {
        match name {
            "l2" => Some(Loss::L2),
            "cross_entropy" | "ce" => Some(Loss::CrossEntropy),
            "focal" => Some(Loss::Focal {
                gamma: Self::DEFAULT_FOCAL_GAMMA,
            }),
            _ => None,
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self, Loss::L2)
    }

    /// Mean loss over the batch and its gradient with respect to `logits`.
    pub fn evaluate(&self, logits: &Tensor, target: &Target) -> Result<(f64, Tensor)> {
        match (self, target) {
            (Loss::L2, Target::Rgb(t)) => Ok(l2_tanh(logits, t)),
            (Loss::CrossEntropy, Target::Classes(t)) => classification(logits, t, 0.0, false),
            (Loss::Focal { gamma }, Target::Classes(t)) => classification(logits, t, *gamma, true),
            _ => Err(Error::InvalidArgument(format!(
                "loss {} does not accept this target kind",
                self.name()
            ))),
        }
    }
}

pub enum Target<'a> {
    /// Colours in `[0, 1]`, shaped like the logits with three channels.
    Rgb(&'a Tensor),
    /// One class index per pixel in batch, row, column order.
    Classes(&'a [u8]),
}

fn l2_tanh(logits: &Tensor, target: &Tensor) -> (f64, Tensor) {
    assert_eq!(logits.shape(), target.shape(), "l2 target shape");
    let m = logits.data.len() as f64;
    let mut grad = logits.clone();
    let mut terms = Vec::with_capacity(logits.data.len());
    for (g, t) in grad.data.iter_mut().zip(&target.data) {
        let th = g.tanh();
        let diff = th / 2.0 + 0.5 - t;
        terms.push(diff * diff);
        *g = diff * (1.0 - th * th) / m;
    }
    (pairwise_sum(&terms) / m, grad)
}

fn classification(logits: &Tensor, target: &[u8], gamma: f64, focal: bool) -> Result<(f64, Tensor)> {
    let hw = logits.plane();
    let k = logits.c;
    if target.len() != logits.n * hw {
        return Err(Error::InvalidArgument("class target length differs from logits".into()));
    }
    let pixels = target.len() as f64;
    let mut grad = Tensor::zeros(logits.n, k, logits.h, logits.w);
    let mut terms = Vec::with_capacity(target.len());
    let mut probs = vec![0.0; k];
    for n in 0..logits.n {
        let s = logits.sample(n);
        for p in 0..hw {
            let t = target[n * hw + p] as usize;
            if t >= k {
                return Err(Error::ClassOutOfRange { index: t, classes: k });
            }
            let max = (0..k).map(|c| s[c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, pr) in probs.iter_mut().enumerate() {
                *pr = (s[c * hw + p] - max).exp();
                z += *pr;
            }
            probs.iter_mut().for_each(|v| *v /= z);
            let log_pt = s[t * hw + p] - max - z.ln();
            let pt = probs[t];
            // dL/dz_c = coef * (1[c == t] - p_c)
            let (loss, coef) = if focal {
                let q = 1.0 - pt;
                let mod_pow = q.powf(gamma);
                let lead = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * pt * log_pt };
                (-mod_pow * log_pt, lead - mod_pow)
            } else {
                (-log_pt, -1.0)
            };
            terms.push(loss);
            let g = &mut grad.data[n * k * hw..(n + 1) * k * hw];
            for (c, pr) in probs.iter().enumerate() {
                let ind = if c == t { 1.0 } else { 0.0 };
                g[c * hw + p] = coef * (ind - pr) / pixels;
            }
        }
    }
    Ok((pairwise_sum(&terms) / pixels, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        let logits = Tensor::zeros(2, 64, 3, 3);
        let target = vec![7u8; 18];
        let (v, _) = Loss::CrossEntropy.evaluate(&logits, &Target::Classes(&target)).unwrap();
        assert!((v - 64f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn focal_gamma_zero_equals_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor::random(2, 5, 3, 4, &mut rng);
        let target: Vec<u8> = (0..24).map(|i| (i % 5) as u8).collect();
        let (ce, gce) = Loss::CrossEntropy.evaluate(&logits, &Target::Classes(&target)).unwrap();
        let (fl, gfl) = Loss::Focal { gamma: 0.0 }
            .evaluate(&logits, &Target::Classes(&target))
            .unwrap();
        assert!((ce - fl).abs() < 1e-12);
        for (a, b) in gce.data.iter().zip(&gfl.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn focal_is_below_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor::random(1, 4, 2, 2, &mut rng);
        let target = [0u8, 1, 2, 3];
        let (ce, _) = Loss::CrossEntropy.evaluate(&logits, &Target::Classes(&target)).unwrap();
        let (fl, _) = Loss::Focal { gamma: 2.0 }.evaluate(&logits, &Target::Classes(&target)).unwrap();
        assert!(fl < ce);
    }

    #[test]
    fn l2_of_zero_logits_against_half_grey_is_zero() {
        let logits = Tensor::zeros(1, 3, 2, 2);
        let target = Tensor::from_vec(1, 3, 2, 2, vec![0.5; 12]);
        let (v, g) = Loss::L2.evaluate(&logits, &Target::Rgb(&target)).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mismatched_target_kind_is_rejected() {
        let logits = Tensor::zeros(1, 3, 2, 2);
        assert!(Loss::L2.evaluate(&logits, &Target::Classes(&[0; 4])).is_err());
        assert!(Loss::CrossEntropy
            .evaluate(&logits, &Target::Classes(&[3, 0, 0, 0]))
            .is_err());
    }
}
