//! Layers with explicit forward and backward passes.
//!
//! Layers own only [`ParamId`]s; values live in a [`ParamStore`] and
//! gradients accumulate into a [`Grads`] with the same layout. Backward
//! passes take the cached forward input and return the input gradient only
//! when asked for it.

use crate::params::{Grads, ParamId, ParamStore};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, img: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let (ho, wo) = self.out_size(h, w);
        let plane = ho * wo;
        for ci in 0..self.cin {
            let src = &img[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        let out = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            out.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let line = &src[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *o = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                line[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], h: usize, w: usize, img: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let (ho, wo) = self.out_size(h, w);
        let plane = ho * wo;
        for ci in 0..self.cin {
            let dst = &mut img[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                line[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.cin, "conv input channels");
        let (ho, wo) = self.out_size(h, w);
        let plane = ho * wo;
        let ckk = self.cin * self.kernel * self.kernel;
        let weight = params.value(self.weight);
        let mut y = Tensor::zeros(&[n, self.cout, ho, wo]);
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * plane] };
        for i in 0..n {
            let xi = x.item(i);
            let src: &[T] = if self.is_pointwise() {
                xi
            } else {
                self.im2col(xi, h, w, &mut cols);
                &cols
            };
            let yi = y.item_mut(i);
            gemm(self.cout, ckk, plane, weight, Layout::RowMajor, src, Layout::RowMajor, T::zero(), yi);
            if let Some(b) = self.bias {
                for (o, &bv) in params.value(b).iter().enumerate() {
                    yi[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let (n, _, h, w) = x.dims4();
        let (ho, wo) = self.out_size(h, w);
        let plane = ho * wo;
        let ckk = self.cin * self.kernel * self.kernel;
        let weight = params.value(self.weight);
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * plane] };
        let mut dcols = vec![T::zero(); ckk * plane];
        for i in 0..n {
            let dyi = dy.item(i);
            if let Some(b) = self.bias {
                let gb = grads.get_mut(b);
                for (o, g) in gb.iter_mut().enumerate() {
                    *g += dyi[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
                }
            }
            let xi = x.item(i);
            let src: &[T] = if self.is_pointwise() {
                xi
            } else {
                self.im2col(xi, h, w, &mut cols);
                &cols
            };
            gemm(
                self.cout,
                plane,
                ckk,
                dyi,
                Layout::RowMajor,
                src,
                Layout::Transposed,
                T::one(),
                grads.get_mut(self.weight),
            );
            if let Some(dx) = dx.as_mut() {
                if self.is_pointwise() {
                    gemm(ckk, self.cout, plane, weight, Layout::Transposed, dyi, Layout::RowMajor, T::zero(), dx.item_mut(i));
                } else {
                    gemm(ckk, self.cout, plane, weight, Layout::Transposed, dyi, Layout::RowMajor, T::zero(), &mut dcols);
                    self.col2im(&dcols, h, w, dx.item_mut(i));
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        assert_eq!(x.item_len(), self.fan_in, "linear input width");
        let mut y = Tensor::zeros(&[n, self.fan_out]);
        gemm(
            n,
            self.fan_in,
            self.fan_out,
            x.data(),
            Layout::RowMajor,
            params.value(self.weight),
            Layout::Transposed,
            T::zero(),
            y.data_mut(),
        );
        let b = params.value(self.bias);
        for i in 0..n {
            for (v, &bv) in y.item_mut(i).iter_mut().zip(b) {
                *v += bv;
            }
        }
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let n = x.batch();
        gemm(
            self.fan_out,
            n,
            self.fan_in,
            dy.data(),
            Layout::Transposed,
            x.data(),
            Layout::RowMajor,
            T::one(),
            grads.get_mut(self.weight),
        );
        let gb = grads.get_mut(self.bias);
        for i in 0..n {
            for (g, &d) in gb.iter_mut().zip(dy.item(i)) {
                *g += d;
            }
        }
        need_dx.then(|| {
            let mut dx = Tensor::zeros(&[n, self.fan_in]);
            gemm(
                n,
                self.fan_out,
                self.fan_in,
                dy.data(),
                Layout::RowMajor,
                params.value(self.weight),
                Layout::RowMajor,
                T::zero(),
                dx.data_mut(),
            );
            dx
        })
    }
}

/// Batch normalization in inference form: per-channel affine over frozen
/// running statistics, with trainable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBatchNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

pub const BN_EPS: f64 = 1e-5;

impl FrozenBatchNorm {
    fn inv_std<T: Scalar>(&self, params: &ParamStore<T>) -> Vec<T> {
        let eps = T::from_f64_lossy(BN_EPS);
        params
            .value(self.running_var)
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect()
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let inv = self.inv_std(params);
        let (g, b, m) = (
            params.value(self.weight),
            params.value(self.bias),
            params.value(self.running_mean),
        );
        let mut y = x.clone();
        for i in 0..n {
            let yi = y.item_mut(i);
            for ch in 0..c {
                let scale = g[ch] * inv[ch];
                let shift = b[ch] - m[ch] * scale;
                yi[ch * plane..(ch + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let inv = self.inv_std(params);
        let g = params.value(self.weight).to_vec();
        let m = params.value(self.running_mean).to_vec();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = dy.clone();
        for i in 0..n {
            let xi = x.item(i);
            let dyi = dy.item(i);
            let dxi = dx.item_mut(i);
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                for (&xv, &d) in xi[r.clone()].iter().zip(&dyi[r.clone()]) {
                    dgamma[ch] += d * (xv - m[ch]) * inv[ch];
                    dbeta[ch] += d;
                }
                let scale = g[ch] * inv[ch];
                dxi[r].iter_mut().for_each(|v| *v *= scale);
            }
        }
        for (a, b) in grads.get_mut(self.weight).iter_mut().zip(dgamma) {
            *a += b;
        }
        for (a, b) in grads.get_mut(self.bias).iter_mut().zip(dbeta) {
            *a += b;
        }
        dx
    }
}

/// 3×3 max pooling, stride 2, padding 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxPool;

impl MaxPool {
    const K: usize = 3;
    const S: usize = 2;
    const P: usize = 1;

    pub fn out_size(h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * Self::P - Self::K) / Self::S + 1,
            (w + 2 * Self::P - Self::K) / Self::S + 1,
        )
    }

    /// Output and, per output element, the flat index of the winning input within its item.
    pub fn forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = Self::out_size(h, w);
        let mut y = Tensor::zeros(&[n, c, ho, wo]);
        let mut arg = vec![0usize; n * c * ho * wo];
        for i in 0..n {
            let xi = x.item(i);
            let base = i * c * ho * wo;
            let yi = y.item_mut(i);
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = T::neg_infinity();
                        let mut at = 0;
                        for ky in 0..Self::K {
                            let iy = (oy * Self::S + ky) as isize - Self::P as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..Self::K {
                                let ix = (ox * Self::S + kx) as isize - Self::P as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = (ch * h + iy as usize) * w + ix as usize;
                                if xi[idx] > best {
                                    best = xi[idx];
                                    at = idx;
                                }
                            }
                        }
                        let o = (ch * ho + oy) * wo + ox;
                        yi[o] = best;
                        arg[base + o] = at;
                    }
                }
            }
        }
        (y, arg)
    }

    pub fn backward<T: Scalar>(input_shape: &[usize], arg: &[usize], dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = Tensor::zeros(input_shape);
        let per = dy.item_len();
        for i in 0..dy.batch() {
            let dyi = dy.item(i);
            let dxi = dx.item_mut(i);
            for (o, &d) in dyi.iter().enumerate() {
                dxi[arg[i * per + o]] += d;
            }
        }
        dx
    }
}

/// `N×C×H×W → N×C` spatial mean.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let scale = T::one() / T::from_usize(plane).expect("plane size");
    let mut y = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let xi = x.item(i);
        for (ch, out) in y.item_mut(i).iter_mut().enumerate() {
            *out = xi[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>() * scale;
        }
    }
    y
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let (_, _, h, w) = dx.dims4();
    let plane = h * w;
    let scale = T::one() / T::from_usize(plane).expect("plane size");
    for i in 0..dy.batch() {
        let dyi = dy.item(i).to_vec();
        let dxi = dx.item_mut(i);
        for (ch, d) in dyi.into_iter().enumerate() {
            dxi[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|v| *v = d * scale);
        }
    }
    dx
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Mask `dy` by the positions where the ReLU output was positive.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, mut dy: Tensor<T>) -> Tensor<T> {
    for (d, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dy
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits, scaled by `scale`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize], scale: T) -> (T, Tensor<T>) {
    let n = logits.batch();
    assert_eq!(n, labels.len(), "one label per row");
    let k = logits.item_len();
    let inv_n = T::one() / T::from_usize(n).expect("batch size");
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        assert!(y < k, "label {y} outside {k} classes");
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[y];
        for (j, g) in grad.item_mut(i).iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            let onehot = if j == y { T::one() } else { T::zero() };
            *g = (p - onehot) * inv_n * scale;
        }
    }
    (total * inv_n, grad)
}

/// Per-row loss without gradient.
pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> T {
    cross_entropy(logits, labels, T::one()).0
}
