use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::real::Real;

/// Per-channel batch normalization over `(N, H, W)`.
///
/// Training mode normalizes with the biased batch variance and folds the
/// unbiased variance into the running estimate with `momentum`; evaluation
/// mode uses the running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// Saved activations for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var_unbiased: Vec<f64>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.iter_mut().for_each(|g| *g = T::zero());
        self.grad_beta.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        assert_eq!(x.c, self.channels, "batch-norm channels");
        let hw = x.plane_len();
        let count = (x.n * hw) as f64;
        let mut out = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut xhat = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut inv_std = vec![0.0; x.c];
        let mut batch_mean = vec![0.0; x.c];
        let mut batch_var_unbiased = vec![0.0; x.c];
        for c in 0..x.c {
            let planes = || (0..x.n).map(move |n| (n * x.c + c) * hw);
            let mut sum = 0.0;
            for base in planes() {
                sum += x.data[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for base in planes() {
                sq += x.data[base..base + hw]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            let var = sq / count;
            let istd = 1.0 / libm::sqrt(var + self.eps);
            let (g, b) = (self.gamma[c], self.beta[c]);
            let (mean_t, istd_t) = (T::lit(mean), T::lit(istd));
            for base in planes() {
                for i in base..base + hw {
                    let xh = (x.data[i] - mean_t) * istd_t;
                    xhat.data[i] = xh;
                    out.data[i] = g * xh + b;
                }
            }
            inv_std[c] = istd;
            batch_mean[c] = mean;
            batch_var_unbiased[c] = if count > 1.0 {
                var * count / (count - 1.0)
            } else {
                var
            };
        }
        let cache = BnCache {
            xhat,
            inv_std,
            batch_mean,
            batch_var_unbiased,
        };
        self.update_running(&cache);
        (out, cache)
    }

    /// Folds a batch's statistics into the running estimates. Called once per
    /// training forward; callers may replay it for a branch that reuses a
    /// batch permutation instead of a second forward pass.
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        let m = self.momentum;
        for c in 0..self.channels {
            let rm = self.running_mean[c].as_f64();
            let rv = self.running_var[c].as_f64();
            self.running_mean[c] = T::lit((1.0 - m) * rm + m * cache.batch_mean[c]);
            self.running_var[c] = T::lit((1.0 - m) * rv + m * cache.batch_var_unbiased[c]);
        }
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.channels, "batch-norm channels");
        let hw = x.plane_len();
        let mut out = x.clone();
        for n in 0..x.n {
            for c in 0..x.c {
                let istd = 1.0 / libm::sqrt(self.running_var[c].as_f64() + self.eps);
                let scale = T::lit(self.gamma[c].as_f64() * istd);
                let shift = T::lit(
                    self.beta[c].as_f64() - self.running_mean[c].as_f64() * self.gamma[c].as_f64() * istd,
                );
                let base = (n * x.c + c) * hw;
                for v in &mut out.data[base..base + hw] {
                    *v = *v * scale + shift;
                }
            }
        }
        out
    }

    pub fn backward(&mut self, cache: &BnCache<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let xhat = &cache.xhat;
        let hw = xhat.plane_len();
        let count = (xhat.n * hw) as f64;
        let mut grad_in = Tensor::zeros(xhat.n, xhat.c, xhat.h, xhat.w);
        for c in 0..xhat.c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for n in 0..xhat.n {
                let base = (n * xhat.c + c) * hw;
                for i in base..base + hw {
                    let dy = grad_out.data[i].as_f64();
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat.data[i].as_f64();
                }
            }
            self.grad_gamma[c] += T::lit(sum_dy_xhat);
            self.grad_beta[c] += T::lit(sum_dy);
            let k = self.gamma[c].as_f64() * cache.inv_std[c] / count;
            let (mean_dy, mean_dy_xhat) = (sum_dy / count, sum_dy_xhat / count);
            let kt = T::lit(k * count);
            let (a, b) = (T::lit(mean_dy), T::lit(mean_dy_xhat));
            for n in 0..xhat.n {
                let base = (n * xhat.c + c) * hw;
                for i in base..base + hw {
                    grad_in.data[i] = kt * (grad_out.data[i] - a - xhat.data[i] * b);
                }
            }
        }
        grad_in
    }
}
