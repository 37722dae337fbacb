//! U-Net encoder with nearest-neighbour upsampling, the 1x1 prediction head,
//! and the sigmoid-output supervised variant.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::{
    concat_channels, max_pool2, max_pool2_backward, relu_backward_inplace, relu_inplace,
    split_channels, upsample_nearest2, upsample_nearest2_backward, BatchNorm2d, BnCache, Conv2d,
    Tensor,
};
use crate::real::Real;
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Number of pooling (and upsampling) stages.
    pub depth: usize,
    /// Filters in the top-level convolutions; level `d` uses `base * 2^d`.
    pub base_channels: usize,
    pub in_channels: usize,
    /// Convolutions per expansive-path block.
    pub up_convs: usize,
    pub kernel: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            base_channels: 8,
            in_channels: 1,
            up_convs: 2,
            kernel: 3,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 {
            bail!(InvalidArgument, "depth, base channels and input channels must be >= 1");
        }
        if self.up_convs == 0 {
            bail!(InvalidArgument, "expansive blocks need at least one convolution");
        }
        if self.kernel.is_multiple_of(2) {
            bail!(InvalidArgument, "convolution kernel must be odd");
        }
        if self.depth > 16 {
            bail!(InvalidArgument, "depth {} is unreasonably large", self.depth);
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Size of each pixel's output encoding.
    pub fn encoding_channels(&self) -> usize {
        self.base_channels
    }

    pub fn check_tile_side(&self, side: usize) -> Result<()> {
        let step = 1usize << self.depth;
        if side == 0 || !side.is_multiple_of(step) {
            bail!(
                InvalidArgument,
                "tile side {side} is not divisible by 2^{} = {step}",
                self.depth
            );
        }
        Ok(())
    }
}

/// Whether a state tensor is trained or only tracked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateKind {
    Param,
    Buffer,
}

/// Layer inventory used for architecture introspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { in_channels: usize, out_channels: usize, kernel: usize },
    BatchNorm { channels: usize },
    Relu,
    MaxPool2,
    UpsampleNearest2,
    ConcatSkip,
    Sigmoid,
}

/// Uniform access to trainable parameters and serializable state.
pub trait Module<T: Real> {
    /// Visits `(value, grad)` for every trainable tensor in a fixed order.
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [T], &mut [T]));
    fn for_each_state(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &[T]));
    fn for_each_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut [T]));
    fn layers(&self) -> Vec<LayerKind>;

    fn zero_grad(&mut self) {
        self.for_each_param(&mut |_, g| g.iter_mut().for_each(|v| *v = T::zero()));
    }

    fn param_count(&self) -> usize {
        let mut total = 0;
        self.for_each_state("", &mut |_, kind, v| {
            if kind == StateKind::Param {
                total += v.len();
            }
        });
        total
    }
}

/// Exact number of trainable scalars.
pub fn count_parameters<T: Real>(model: &dyn Module<T>) -> usize {
    model.param_count()
}

fn conv_state<T: Real>(
    conv: &Conv2d<T>,
    prefix: &str,
    f: &mut dyn FnMut(&str, StateKind, &[T]),
) {
    f(&format!("{prefix}.weight"), StateKind::Param, &conv.weight);
    f(&format!("{prefix}.bias"), StateKind::Param, &conv.bias);
}

fn conv_state_mut<T: Real>(
    conv: &mut Conv2d<T>,
    prefix: &str,
    f: &mut dyn FnMut(&str, StateKind, &mut [T]),
) {
    f(&format!("{prefix}.weight"), StateKind::Param, &mut conv.weight);
    f(&format!("{prefix}.bias"), StateKind::Param, &mut conv.bias);
}

fn bn_state<T: Real>(bn: &BatchNorm2d<T>, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &[T])) {
    f(&format!("{prefix}.gamma"), StateKind::Param, &bn.gamma);
    f(&format!("{prefix}.beta"), StateKind::Param, &bn.beta);
    f(&format!("{prefix}.running_mean"), StateKind::Buffer, &bn.running_mean);
    f(&format!("{prefix}.running_var"), StateKind::Buffer, &bn.running_var);
}

fn bn_state_mut<T: Real>(
    bn: &mut BatchNorm2d<T>,
    prefix: &str,
    f: &mut dyn FnMut(&str, StateKind, &mut [T]),
) {
    f(&format!("{prefix}.gamma"), StateKind::Param, &mut bn.gamma);
    f(&format!("{prefix}.beta"), StateKind::Param, &mut bn.beta);
    f(&format!("{prefix}.running_mean"), StateKind::Buffer, &mut bn.running_mean);
    f(&format!("{prefix}.running_var"), StateKind::Buffer, &mut bn.running_var);
}

/// `[conv -> batch-norm -> ReLU] x len`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub convs: Vec<Conv2d<T>>,
    pub norms: Vec<BatchNorm2d<T>>,
}

#[derive(Debug, Clone)]
pub struct BlockTape<T> {
    /// `acts[0]` is the block input, `acts[i + 1]` the ReLU output of layer `i`.
    acts: Vec<Tensor<T>>,
    norms: Vec<BnCache<T>>,
}

impl<T: Real> ConvBlock<T> {
    fn new(
        in_channels: usize,
        out_channels: usize,
        layers: usize,
        kernel: usize,
        rng: &mut crate::rng::Rng,
    ) -> Self {
        let mut convs = Vec::with_capacity(layers);
        let mut norms = Vec::with_capacity(layers);
        for i in 0..layers {
            let cin = if i == 0 { in_channels } else { out_channels };
            convs.push(Conv2d::he_init(cin, out_channels, kernel, rng));
            norms.push(BatchNorm2d::new(out_channels));
        }
        Self { convs, norms }
    }

    fn forward_train(&mut self, x: Tensor<T>) -> (Tensor<T>, BlockTape<T>) {
        let mut acts = Vec::with_capacity(self.convs.len() + 1);
        let mut caches = Vec::with_capacity(self.convs.len());
        acts.push(x);
        for (conv, bn) in self.convs.iter().zip(self.norms.iter_mut()) {
            let z = conv.forward(acts.last().unwrap());
            let (mut y, cache) = bn.forward_train(&z);
            relu_inplace(&mut y);
            caches.push(cache);
            acts.push(y);
        }
        let out = acts.last().unwrap().clone();
        (out, BlockTape { acts, norms: caches })
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            h = bn.forward_eval(&conv.forward(&h));
            relu_inplace(&mut h);
        }
        h
    }

    fn backward(&mut self, tape: &BlockTape<T>, grad: Tensor<T>, want_input: bool) -> Option<Tensor<T>> {
        let mut g = Some(grad);
        for i in (0..self.convs.len()).rev() {
            let mut gi = g.take().expect("gradient flows through inner layers");
            relu_backward_inplace(&tape.acts[i + 1], &mut gi);
            let gz = self.norms[i].backward(&tape.norms[i], &gi);
            g = self.convs[i].backward(&tape.acts[i], &gz, want_input || i > 0);
        }
        g
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [T], &mut [T])) {
        for (conv, bn) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            f(&mut conv.weight, &mut conv.grad_weight);
            f(&mut conv.bias, &mut conv.grad_bias);
            f(&mut bn.gamma, &mut bn.grad_gamma);
            f(&mut bn.beta, &mut bn.grad_beta);
        }
    }

    fn for_each_state(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &[T])) {
        for (i, (conv, bn)) in self.convs.iter().zip(&self.norms).enumerate() {
            conv_state(conv, &format!("{prefix}.conv{i}"), f);
            bn_state(bn, &format!("{prefix}.bn{i}"), f);
        }
    }

    fn for_each_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut [T])) {
        for (i, (conv, bn)) in self.convs.iter_mut().zip(self.norms.iter_mut()).enumerate() {
            conv_state_mut(conv, &format!("{prefix}.conv{i}"), f);
            bn_state_mut(bn, &format!("{prefix}.bn{i}"), f);
        }
    }

    fn layers(&self, out: &mut Vec<LayerKind>) {
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            out.push(LayerKind::Conv {
                in_channels: conv.in_channels,
                out_channels: conv.out_channels,
                kernel: conv.kernel,
            });
            out.push(LayerKind::BatchNorm { channels: bn.channels });
            out.push(LayerKind::Relu);
        }
    }
}

/// U-Net encoder mapping `N x 1 x S x S` images to `N x N_enc x S x S`
/// per-pixel encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetEncoder<T> {
    pub config: UNetConfig,
    /// Contracting blocks for levels `0..=depth`; the last one is the bottom.
    pub down: Vec<ConvBlock<T>>,
    /// Expansive blocks indexed by the level they restore (`0..depth`).
    pub up: Vec<ConvBlock<T>>,
}

#[derive(Debug, Clone)]
pub struct EncoderTape<T> {
    down: Vec<BlockTape<T>>,
    pool_args: Vec<Vec<u8>>,
    up: Vec<BlockTape<T>>,
}

impl<T: Real> UNetEncoder<T> {
    /// He-initialized encoder; weights are a pure function of `init_seed`.
    pub fn new(config: UNetConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(init_seed, &[0xE0C0]);
        let k = config.kernel;
        let mut down = Vec::with_capacity(config.depth + 1);
        for level in 0..=config.depth {
            let cin = if level == 0 {
                config.in_channels
            } else {
                config.channels_at(level - 1)
            };
            down.push(ConvBlock::new(cin, config.channels_at(level), 2, k, &mut rng));
        }
        let mut up: Vec<ConvBlock<T>> = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            let cin = config.channels_at(level + 1) + config.channels_at(level);
            up.push(ConvBlock::new(cin, config.channels_at(level), config.up_convs, k, &mut rng));
        }
        up.reverse();
        Ok(Self { config, down, up })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c != self.config.in_channels {
            bail!(ShapeMismatch, "encoder expects {} input channels, got {}", self.config.in_channels, x.c);
        }
        self.config.check_tile_side(x.h)?;
        self.config.check_tile_side(x.w)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, EncoderTape<T>)> {
        self.check_input(x)?;
        let depth = self.config.depth;
        let mut down_tapes = Vec::with_capacity(depth + 1);
        let mut pool_args = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for level in 0..depth {
            let (out, tape) = self.down[level].forward_train(h);
            down_tapes.push(tape);
            let (pooled, arg) = max_pool2(&out);
            pool_args.push(arg);
            skips.push(out);
            h = pooled;
        }
        let (bottom, tape) = self.down[depth].forward_train(h);
        down_tapes.push(tape);
        h = bottom;
        let mut up_tapes: Vec<Option<BlockTape<T>>> = (0..depth).map(|_| None).collect();
        for level in (0..depth).rev() {
            let cat = concat_channels(&upsample_nearest2(&h), &skips[level]);
            let (out, tape) = self.up[level].forward_train(cat);
            up_tapes[level] = Some(tape);
            h = out;
        }
        Ok((
            h,
            EncoderTape {
                down: down_tapes,
                pool_args,
                up: up_tapes.into_iter().map(|t| t.unwrap()).collect(),
            },
        ))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for level in 0..depth {
            let out = self.down[level].forward_eval(&h);
            h = max_pool2(&out).0;
            skips.push(out);
        }
        h = self.down[depth].forward_eval(&h);
        for level in (0..depth).rev() {
            let cat = concat_channels(&upsample_nearest2(&h), &skips[level]);
            h = self.up[level].forward_eval(&cat);
        }
        Ok(h)
    }

    /// Accumulates parameter gradients. The gradient with respect to the input
    /// image is not needed and not computed.
    pub fn backward(&mut self, tape: &EncoderTape<T>, grad: Tensor<T>) {
        let depth = self.config.depth;
        let mut g = grad;
        let mut skip_grads: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
        for (level, slot) in skip_grads.iter_mut().enumerate() {
            let gcat = self.up[level]
                .backward(&tape.up[level], g, true)
                .expect("input gradient requested");
            let up_channels = self.config.channels_at(level + 1);
            let (g_up, g_skip) = split_channels(&gcat, up_channels);
            *slot = Some(g_skip);
            g = upsample_nearest2_backward(&g_up);
        }
        g = self.down[depth]
            .backward(&tape.down[depth], g, depth > 0)
            .expect("input gradient requested");
        for level in (0..depth).rev() {
            let mut gl = max_pool2_backward(&g, &tape.pool_args[level]);
            gl.add_assign(skip_grads[level].as_ref().unwrap());
            match self.down[level].backward(&tape.down[level], gl, level > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
    }
}

impl<T: Real> Module<T> for UNetEncoder<T> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [T], &mut [T])) {
        for block in self.down.iter_mut().chain(self.up.iter_mut()) {
            block.for_each_param(f);
        }
    }

    fn for_each_state(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &[T])) {
        for (i, b) in self.down.iter().enumerate() {
            b.for_each_state(&format!("{prefix}down{i}"), f);
        }
        for (i, b) in self.up.iter().enumerate() {
            b.for_each_state(&format!("{prefix}up{i}"), f);
        }
    }

    fn for_each_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut [T])) {
        for (i, b) in self.down.iter_mut().enumerate() {
            b.for_each_state_mut(&format!("{prefix}down{i}"), f);
        }
        for (i, b) in self.up.iter_mut().enumerate() {
            b.for_each_state_mut(&format!("{prefix}up{i}"), f);
        }
    }

    fn layers(&self) -> Vec<LayerKind> {
        let mut out = Vec::new();
        let depth = self.config.depth;
        for level in 0..depth {
            self.down[level].layers(&mut out);
            out.push(LayerKind::MaxPool2);
        }
        self.down[depth].layers(&mut out);
        for level in (0..depth).rev() {
            out.push(LayerKind::UpsampleNearest2);
            out.push(LayerKind::ConcatSkip);
            self.up[level].layers(&mut out);
        }
        out
    }
}

/// Per-pixel `1x1` convolution followed by batch normalization. Emits logits;
/// class probabilities are the softmax over the class axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHead<T> {
    pub conv: Conv2d<T>,
    pub norm: BatchNorm2d<T>,
}

#[derive(Debug, Clone)]
pub struct HeadTape<T> {
    input: Tensor<T>,
    norm: BnCache<T>,
}

impl<T: Real> HeadTape<T> {
    pub fn norm_cache(&self) -> &BnCache<T> {
        &self.norm
    }
}

impl<T: Real> PredictionHead<T> {
    pub fn new(encoding_channels: usize, n_class: usize, init_seed: u64) -> Result<Self> {
        if n_class < 2 {
            bail!(InvalidArgument, "need at least 2 classes, got {n_class}");
        }
        let mut rng = rng_from(init_seed, &[0x4EAD]);
        Ok(Self {
            conv: Conv2d::he_init(encoding_channels, n_class, 1, &mut rng),
            norm: BatchNorm2d::new(n_class),
        })
    }

    pub fn n_class(&self) -> usize {
        self.conv.out_channels
    }

    pub fn forward_train(&mut self, encoding: &Tensor<T>) -> (Tensor<T>, HeadTape<T>) {
        let z = self.conv.forward(encoding);
        let (y, cache) = self.norm.forward_train(&z);
        (
            y,
            HeadTape {
                input: encoding.clone(),
                norm: cache,
            },
        )
    }

    pub fn forward_eval(&self, encoding: &Tensor<T>) -> Tensor<T> {
        self.norm.forward_eval(&self.conv.forward(encoding))
    }

    pub fn backward(&mut self, tape: &HeadTape<T>, grad: &Tensor<T>) -> Tensor<T> {
        let gz = self.norm.backward(&tape.norm, grad);
        self.conv
            .backward(&tape.input, &gz, true)
            .expect("input gradient requested")
    }
}

impl<T: Real> Module<T> for PredictionHead<T> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [T], &mut [T])) {
        f(&mut self.conv.weight, &mut self.conv.grad_weight);
        f(&mut self.conv.bias, &mut self.conv.grad_bias);
        f(&mut self.norm.gamma, &mut self.norm.grad_gamma);
        f(&mut self.norm.beta, &mut self.norm.grad_beta);
    }

    fn for_each_state(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &[T])) {
        conv_state(&self.conv, &format!("{prefix}conv"), f);
        bn_state(&self.norm, &format!("{prefix}bn"), f);
    }

    fn for_each_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut [T])) {
        conv_state_mut(&mut self.conv, &format!("{prefix}conv"), f);
        bn_state_mut(&mut self.norm, &format!("{prefix}bn"), f);
    }

    fn layers(&self) -> Vec<LayerKind> {
        alloc::vec![
            LayerKind::Conv {
                in_channels: self.conv.in_channels,
                out_channels: self.conv.out_channels,
                kernel: 1
            },
            LayerKind::BatchNorm {
                channels: self.norm.channels
            },
        ]
    }
}

/// Encoder plus a `1x1` convolution to one channel and a sigmoid; outputs the
/// per-pixel water probability.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedModel<T> {
    pub encoder: UNetEncoder<T>,
    pub out_conv: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct SupervisedTape<T> {
    encoder: EncoderTape<T>,
    encoding: Tensor<T>,
}

pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

impl<T: Real> SupervisedModel<T> {
    pub fn new(config: UNetConfig, init_seed: u64) -> Result<Self> {
        let encoder = UNetEncoder::new(config, init_seed)?;
        let mut rng = rng_from(init_seed, &[0x5C9E]);
        let out_conv = Conv2d::he_init(config.encoding_channels(), 1, 1, &mut rng);
        Ok(Self { encoder, out_conv })
    }

    /// Returns probabilities of shape `N x 1 x S x S`.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, SupervisedTape<T>)> {
        let (encoding, tape) = self.encoder.forward_train(x)?;
        let mut out = self.out_conv.forward(&encoding);
        out.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok((out, SupervisedTape { encoder: tape, encoding }))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let encoding = self.encoder.forward_eval(x)?;
        let mut out = self.out_conv.forward(&encoding);
        out.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok(out)
    }

    /// `grad_prob` is the loss gradient with respect to the probabilities.
    pub fn backward(&mut self, tape: &SupervisedTape<T>, probs: &Tensor<T>, grad_prob: &Tensor<T>) {
        let mut gz = grad_prob.clone();
        for (g, &p) in gz.data.iter_mut().zip(&probs.data) {
            *g *= p * (T::one() - p);
        }
        let ge = self
            .out_conv
            .backward(&tape.encoding, &gz, true)
            .expect("input gradient requested");
        self.encoder.backward(&tape.encoder, ge);
    }
}

impl<T: Real> Module<T> for SupervisedModel<T> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [T], &mut [T])) {
        self.encoder.for_each_param(f);
        f(&mut self.out_conv.weight, &mut self.out_conv.grad_weight);
        f(&mut self.out_conv.bias, &mut self.out_conv.grad_bias);
    }

    fn for_each_state(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &[T])) {
        self.encoder.for_each_state(&format!("{prefix}encoder."), f);
        conv_state(&self.out_conv, &format!("{prefix}out"), f);
    }

    fn for_each_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut [T])) {
        self.encoder.for_each_state_mut(&format!("{prefix}encoder."), f);
        conv_state_mut(&mut self.out_conv, &format!("{prefix}out"), f);
    }

    fn layers(&self) -> Vec<LayerKind> {
        let mut out = self.encoder.layers();
        out.push(LayerKind::Conv {
            in_channels: self.out_conv.in_channels,
            out_channels: 1,
            kernel: 1,
        });
        out.push(LayerKind::Sigmoid);
        out
    }
}

/// Names of all state tensors with their lengths, in visitation order.
pub fn state_layout<T: Real>(module: &dyn Module<T>) -> Vec<(String, StateKind, usize)> {
    let mut out = Vec::new();
    module.for_each_state("", &mut |name, kind, v| out.push((String::from(name), kind, v.len())));
    out
}
