use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::real::Real;
use crate::rng::Rng;

/// Square-kernel 2-D convolution with stride 1 and zero padding `k / 2`,
/// so spatial size is preserved for odd kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out x (in * k * k)`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    /// He (Kaiming normal, fan-in) initialization; biases start at zero.
    pub fn he_init(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut Rng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = libm::sqrt(2.0 / fan_in as f64);
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = (0..out_channels * fan_in)
            .map(|_| T::lit(normal.sample(rng)))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias: vec![T::zero(); out_channels],
            grad_weight: vec![T::zero(); out_channels * fan_in],
            grad_bias: vec![T::zero(); out_channels],
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.iter_mut().for_each(|g| *g = T::zero());
        self.grad_bias.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.in_channels, "conv input channels");
        let hw = x.plane_len();
        let mut out = Tensor::zeros(x.n, self.out_channels, x.h, x.w);
        let mut cols = if self.kernel == 1 {
            Vec::new()
        } else {
            vec![T::zero(); self.patch_len() * hw]
        };
        for i in 0..x.n {
            let input = x.sample(i);
            let rhs: &[T] = if self.kernel == 1 {
                input
            } else {
                im2col(input, self.in_channels, x.h, x.w, self.kernel, &mut cols);
                &cols
            };
            let dst = out.sample_mut(i);
            for (o, row) in dst.chunks_exact_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = self.bias[o]);
            }
            T::gemm(
                self.out_channels,
                self.patch_len(),
                hw,
                T::one(),
                &self.weight,
                (self.patch_len() as isize, 1),
                rhs,
                (hw as isize, 1),
                T::one(),
                dst,
            );
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `want_input_grad` is set.
    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        want_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let hw = x.plane_len();
        let patch = self.patch_len();
        let mut cols = if self.kernel == 1 {
            Vec::new()
        } else {
            vec![T::zero(); patch * hw]
        };
        let mut dcols = vec![T::zero(); patch * hw];
        let mut grad_in = want_input_grad.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        for i in 0..x.n {
            let g = grad_out.sample(i);
            for (o, row) in g.chunks_exact(hw).enumerate() {
                let s: f64 = row.iter().map(|v| v.as_f64()).sum();
                self.grad_bias[o] += T::lit(s);
            }
            let input = x.sample(i);
            let cols_ref: &[T] = if self.kernel == 1 {
                input
            } else {
                im2col(input, self.in_channels, x.h, x.w, self.kernel, &mut cols);
                &cols
            };
            // dW += dOut * cols^T
            T::gemm(
                self.out_channels,
                hw,
                patch,
                T::one(),
                g,
                (hw as isize, 1),
                cols_ref,
                (1, hw as isize),
                T::one(),
                &mut self.grad_weight,
            );
            if let Some(gi) = grad_in.as_mut() {
                // dcols = W^T * dOut
                T::gemm(
                    patch,
                    self.out_channels,
                    hw,
                    T::one(),
                    &self.weight,
                    (1, patch as isize),
                    g,
                    (hw as isize, 1),
                    T::zero(),
                    &mut dcols,
                );
                let dst = gi.sample_mut(i);
                if self.kernel == 1 {
                    dst.copy_from_slice(&dcols);
                } else {
                    col2im(&dcols, self.in_channels, x.h, x.w, self.kernel, dst);
                }
            }
        }
        grad_in
    }
}

/// Unfolds one `c x h x w` sample into a `(c * k * k) x (h * w)` matrix.
fn im2col<T: Real>(input: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut row = 0;
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out_row[..x_lo].iter_mut().for_each(|v| *v = T::zero());
                    out_row[x_hi..].iter_mut().for_each(|v| *v = T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out_row[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    out.iter_mut().for_each(|v| *v = T::zero());
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let s0 = (x_lo as isize + dx) as usize;
                    let dst_row = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    for (d, &s) in dst_row.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}
