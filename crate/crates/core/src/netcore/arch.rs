use crate::nn::{self, Conv2d, FrozenBatchNorm, MaxPool};
use crate::params::{Grads, Group, ParamSpec, ParamStore};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{param_spec, uniform};

#[derive(Debug, Clone, PartialEq)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    conv2: Conv2d,
    bn2: FrozenBatchNorm,
    downsample: Option<(Conv2d, FrozenBatchNorm)>,
}

#[derive(Debug, Clone, PartialEq)]
enum Block {
    ConvRelu(Conv2d),
    ConvBnRelu(Conv2d, FrozenBatchNorm),
    MaxPool,
    Basic(Box<BasicBlock>),
}

enum BlockCache<T> {
    ConvRelu {
        x: Tensor<T>,
        y: Tensor<T>,
    },
    ConvBnRelu {
        x: Tensor<T>,
        c: Tensor<T>,
        y: Tensor<T>,
    },
    MaxPool {
        shape: Vec<usize>,
        arg: Vec<usize>,
    },
    Basic {
        x: Tensor<T>,
        c1: Tensor<T>,
        a1: Tensor<T>,
        c2: Tensor<T>,
        shortcut_conv: Option<Tensor<T>>,
        y: Tensor<T>,
    },
}

/// Cached activations of one traced backbone forward.
pub struct BackboneTrace<T> {
    caches: Vec<BlockCache<T>>,
}

/// Θ's convolutional feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    blocks: Vec<Block>,
}

fn conv<T: Scalar>(
    params: &mut ParamStore<T>,
    rng: &mut rng::Rng,
    name: &str,
    (cin, cout, kernel, stride, pad): (usize, usize, usize, usize, usize),
    bias: bool,
) -> Conv2d {
    let fan_in = cin * kernel * kernel;
    // He-uniform for ReLU networks.
    let bound = (6.0 / fan_in as f64).sqrt();
    let weight = params.register(
        param_spec(&format!("{name}.weight"), &[cout, cin, kernel, kernel], Group::Theta, false),
        uniform(rng, cout * fan_in, bound),
    );
    let bias = bias.then(|| {
        params.register(
            param_spec(&format!("{name}.bias"), &[cout], Group::Theta, false),
            vec![T::zero(); cout],
        )
    });
    Conv2d {
        weight,
        bias,
        cin,
        cout,
        kernel,
        stride,
        pad,
    }
}

fn batch_norm<T: Scalar>(params: &mut ParamStore<T>, name: &str, channels: usize) -> FrozenBatchNorm {
    let mut reg = |suffix: &str, value: T, trainable: bool| {
        params.register(
            ParamSpec {
                name: format!("{name}.{suffix}"),
                shape: vec![channels],
                group: Group::Theta,
                head: false,
                trainable,
            },
            vec![value; channels],
        )
    };
    FrozenBatchNorm {
        weight: reg("weight", T::one(), true),
        bias: reg("bias", T::zero(), true),
        running_mean: reg("running_mean", T::zero(), false),
        running_var: reg("running_var", T::one(), false),
        channels,
    }
}

impl Backbone {
    /// One 3×3 conv + ReLU per stage; every stage after the first halves the resolution.
    pub(crate) fn desk<T: Scalar>(
        params: &mut ParamStore<T>,
        rng: &mut rng::Rng,
        in_channels: usize,
        widths: &[usize],
    ) -> Self {
        let mut cin = in_channels;
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let stride = if i == 0 { 1 } else { 2 };
                let c = conv(params, rng, &format!("stage{}.conv", i + 1), (cin, w, 3, stride, 1), true);
                cin = w;
                Block::ConvRelu(c)
            })
            .collect();
        Backbone { blocks }
    }

    /// ResNet-18 with torchvision parameter names and frozen batch statistics.
    pub(crate) fn resnet18<T: Scalar>(params: &mut ParamStore<T>, rng: &mut rng::Rng, in_channels: usize) -> Self {
        let mut blocks = vec![
            Block::ConvBnRelu(
                conv(params, rng, "conv1", (in_channels, 64, 7, 2, 3), false),
                batch_norm(params, "bn1", 64),
            ),
            Block::MaxPool,
        ];
        let mut cin = 64;
        for (layer, &width) in [64usize, 128, 256, 512].iter().enumerate() {
            for idx in 0..2 {
                let stride = if layer > 0 && idx == 0 { 2 } else { 1 };
                let p = format!("layer{}.{}", layer + 1, idx);
                let conv1 = conv(params, rng, &format!("{p}.conv1"), (cin, width, 3, stride, 1), false);
                let bn1 = batch_norm(params, &format!("{p}.bn1"), width);
                let conv2 = conv(params, rng, &format!("{p}.conv2"), (width, width, 3, 1, 1), false);
                let bn2 = batch_norm(params, &format!("{p}.bn2"), width);
                let downsample = (stride != 1 || cin != width).then(|| {
                    (
                        conv(params, rng, &format!("{p}.downsample.0"), (cin, width, 1, stride, 0), false),
                        batch_norm(params, &format!("{p}.downsample.1"), width),
                    )
                });
                blocks.push(Block::Basic(Box::new(BasicBlock {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    downsample,
                })));
                cin = width;
            }
        }
        Backbone { blocks }
    }

    /// `(C, H, W)` of the final feature map for an `h × w` input.
    pub fn output_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let (mut c, mut h, mut w) = (0, h, w);
        for b in &self.blocks {
            match b {
                Block::ConvRelu(conv) | Block::ConvBnRelu(conv, _) => {
                    if h + 2 * conv.pad < conv.kernel || w + 2 * conv.pad < conv.kernel {
                        return (conv.cout, 0, 0);
                    }
                    (h, w) = conv.out_size(h, w);
                    c = conv.cout;
                }
                Block::MaxPool => (h, w) = MaxPool::out_size(h, w),
                Block::Basic(bb) => {
                    (h, w) = bb.conv1.out_size(h, w);
                    c = bb.conv2.cout;
                }
            }
        }
        (c, h, w)
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = match b {
                Block::ConvRelu(conv) => {
                    let mut y = conv.forward(params, &h);
                    nn::relu_inplace(&mut y);
                    y
                }
                Block::ConvBnRelu(conv, bn) => {
                    let mut y = bn.forward(params, &conv.forward(params, &h));
                    nn::relu_inplace(&mut y);
                    y
                }
                Block::MaxPool => MaxPool::forward(&h).0,
                Block::Basic(bb) => bb.forward(params, h).0,
            };
        }
        h
    }

    pub fn forward_traced<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, BackboneTrace<T>) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks {
            match b {
                Block::ConvRelu(conv) => {
                    let mut y = conv.forward(params, &h);
                    nn::relu_inplace(&mut y);
                    caches.push(BlockCache::ConvRelu { x: h, y: y.clone() });
                    h = y;
                }
                Block::ConvBnRelu(conv, bn) => {
                    let c = conv.forward(params, &h);
                    let mut y = bn.forward(params, &c);
                    nn::relu_inplace(&mut y);
                    caches.push(BlockCache::ConvBnRelu { x: h, c, y: y.clone() });
                    h = y;
                }
                Block::MaxPool => {
                    let shape = h.shape().to_vec();
                    let (y, arg) = MaxPool::forward(&h);
                    caches.push(BlockCache::MaxPool { shape, arg });
                    h = y;
                }
                Block::Basic(bb) => {
                    let (y, cache) = bb.forward(params, h);
                    caches.push(cache.expect("basic block cache"));
                    h = y;
                }
            }
        }
        (h, BackboneTrace { caches })
    }

    /// Accumulate parameter gradients from the gradient at the backbone output.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        trace: BackboneTrace<T>,
        dout: Tensor<T>,
        grads: &mut Grads<T>,
    ) {
        let mut d = dout;
        for (i, (b, cache)) in self.blocks.iter().zip(trace.caches).enumerate().rev() {
            let need_dx = i > 0;
            d = match (b, cache) {
                (Block::ConvRelu(conv), BlockCache::ConvRelu { x, y }) => {
                    let dz = nn::relu_backward(&y, d);
                    match conv.backward(params, &x, &dz, grads, need_dx) {
                        Some(dx) => dx,
                        None => return,
                    }
                }
                (Block::ConvBnRelu(conv, bn), BlockCache::ConvBnRelu { x, c, y }) => {
                    let dz = nn::relu_backward(&y, d);
                    let dc = bn.backward(params, &c, &dz, grads);
                    match conv.backward(params, &x, &dc, grads, need_dx) {
                        Some(dx) => dx,
                        None => return,
                    }
                }
                (Block::MaxPool, BlockCache::MaxPool { shape, arg }) => MaxPool::backward(&shape, &arg, &d),
                (Block::Basic(bb), cache @ BlockCache::Basic { .. }) => bb.backward(params, cache, d, grads),
                _ => unreachable!("trace does not match the backbone"),
            };
        }
    }
}

impl BasicBlock {
    fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: Tensor<T>) -> (Tensor<T>, Option<BlockCache<T>>) {
        let c1 = self.conv1.forward(params, &x);
        let mut a1 = self.bn1.forward(params, &c1);
        nn::relu_inplace(&mut a1);
        let c2 = self.conv2.forward(params, &a1);
        let mut y = self.bn2.forward(params, &c2);
        let shortcut_conv = match &self.downsample {
            Some((conv, bn)) => {
                let sc = conv.forward(params, &x);
                y.add_assign(&bn.forward(params, &sc));
                Some(sc)
            }
            None => {
                y.add_assign(&x);
                None
            }
        };
        nn::relu_inplace(&mut y);
        let cache = BlockCache::Basic {
            x,
            c1,
            a1,
            c2,
            shortcut_conv,
            y: y.clone(),
        };
        (y, Some(cache))
    }

    fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        cache: BlockCache<T>,
        dy: Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let BlockCache::Basic {
            x,
            c1,
            a1,
            c2,
            shortcut_conv,
            y,
        } = cache
        else {
            unreachable!()
        };
        let dsum = nn::relu_backward(&y, dy);
        let dc2 = self.bn2.backward(params, &c2, &dsum, grads);
        let da1 = self.conv2.backward(params, &a1, &dc2, grads, true).expect("requested");
        let da1 = nn::relu_backward(&a1, da1);
        let dc1 = self.bn1.backward(params, &c1, &da1, grads);
        let mut dx = self.conv1.backward(params, &x, &dc1, grads, true).expect("requested");
        match (&self.downsample, shortcut_conv) {
            (Some((conv, bn)), Some(sc)) => {
                let dsc = bn.backward(params, &sc, &dsum, grads);
                dx.add_assign(&conv.backward(params, &x, &dsc, grads, true).expect("requested"));
            }
            _ => dx.add_assign(&dsum),
        }
        dx
    }
}
