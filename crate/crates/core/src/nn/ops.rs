//! Parameter-free layers: ReLU, 2x2 max pooling, nearest-neighbour 2x
//! upsampling and channel concatenation.

use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::real::Real;

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `grad` by the positive entries of the ReLU output.
pub fn relu_backward_inplace<T: Real>(output: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max pooling. Returns the pooled tensor and, per output element, the
/// offset (0..4) of the winning input within its window.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    assert!(x.h.is_multiple_of(2) && x.w.is_multiple_of(2), "pooling needs even spatial size");
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = Vec::with_capacity(out.data.len());
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * x.h * x.w..(plane + 1) * x.h * x.w];
        let dst = &mut out.data[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = 2 * y * x.w + 2 * xx;
                let cand = [src[i0], src[i0 + 1], src[i0 + x.w], src[i0 + x.w + 1]];
                let mut best = 0u8;
                for k in 1..4u8 {
                    if cand[k as usize] > cand[best as usize] {
                        best = k;
                    }
                }
                dst[y * ow + xx] = cand[best as usize];
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Real>(grad_out: &Tensor<T>, arg: &[u8]) -> Tensor<T> {
    let (oh, ow) = (grad_out.h, grad_out.w);
    let (h, w) = (oh * 2, ow * 2);
    let mut grad_in = Tensor::zeros(grad_out.n, grad_out.c, h, w);
    for plane in 0..grad_out.n * grad_out.c {
        let g = &grad_out.data[plane * oh * ow..(plane + 1) * oh * ow];
        let a = &arg[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut grad_in.data[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let k = a[y * ow + xx] as usize;
                let idx = (2 * y + k / 2) * w + 2 * xx + k % 2;
                dst[idx] = g[y * ow + xx];
            }
        }
    }
    grad_in
}

/// Replaces every pixel with a 2x2 square of the same value.
pub fn upsample_nearest2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * x.h * x.w..(plane + 1) * x.h * x.w];
        let dst = &mut out.data[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            let srow = &src[(y / 2) * x.w..(y / 2 + 1) * x.w];
            for (xx, d) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (grad_out.h / 2, grad_out.w / 2);
    let mut grad_in = Tensor::zeros(grad_out.n, grad_out.c, h, w);
    for plane in 0..grad_out.n * grad_out.c {
        let src = &grad_out.data[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut grad_in.data[plane * h * w..(plane + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
        }
    }
    grad_in
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shapes");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for i in 0..a.n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor {
        n: a.n,
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

pub fn split_channels<T: Real>(x: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let second = x.c - first;
    let hw = x.plane_len();
    let mut a = Tensor::zeros(x.n, first, x.h, x.w);
    let mut b = Tensor::zeros(x.n, second, x.h, x.w);
    for i in 0..x.n {
        let s = x.sample(i);
        a.sample_mut(i).copy_from_slice(&s[..first * hw]);
        b.sample_mut(i).copy_from_slice(&s[first * hw..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn upsampling_a_constant_map_is_constant() {
        let x = Tensor::from_vec(1, 2, 3, 3, vec![0.75f64; 18]).unwrap();
        let up = upsample_nearest2(&x);
        assert_eq!(up.shape(), [1, 2, 6, 6]);
        assert!(up.data.iter().all(|&v| v == 0.75));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let g = Tensor::from_vec(1, 1, 4, 4, (0..16).map(|v| v as f64).collect()).unwrap();
        let lhs: f64 = upsample_nearest2(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .data
            .iter()
            .zip(&upsample_nearest2_backward(&g).data)
            .map(|(a, b)| a * b)
            .sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn pooling_routes_gradient_to_the_maximum() {
        let x = Tensor::from_vec(1, 1, 2, 4, vec![1.0f64, 5.0, 0.0, -1.0, 2.0, 3.0, 7.0, 0.5]).unwrap();
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data, vec![5.0, 7.0]);
        let g = Tensor::from_vec(1, 1, 1, 2, vec![1.0, 2.0]).unwrap();
        let gi = max_pool2_backward(&g, &arg);
        assert_eq!(gi.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = Tensor::from_vec(2, 1, 1, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(2, 2, 1, 2, (10..18).map(|v| v as f64).collect()).unwrap();
        let ab = concat_channels(&a, &b);
        assert_eq!(&ab.data[..6], &[1.0, 2.0, 10.0, 11.0, 12.0, 13.0]);
        let (a2, b2) = split_channels(&ab, 1);
        assert_eq!((a2, b2), (a, b));
    }
}
