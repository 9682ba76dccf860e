//! Primitive layers. Every layer has a forward pass producing whatever it
//! needs for its backward pass, and a backward pass that accumulates
//! parameter gradients into [`Gradients`] and returns the input gradient.
//!
//! Activations are `N×C×H×W` (or `N×F` for dense layers). Per-sample work is
//! spread over rayon workers; parameter gradients are reduced over fixed
//! sample chunks in index order, so results do not depend on the worker count.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::store::{Gradients, ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Samples per gradient-reduction chunk.
const GRAD_CHUNK: usize = 4;

pub(crate) fn normal_tensor<T: Scalar, R: Rng>(
    shape: &[usize],
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect()).expect("shape")
}

fn dims4<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::Contract(format!(
            "{what}: expected N×C×H×W input, got {s:?}"
        ))),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Bias-free convolution with He-normal initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = normal_tensor(
            &[out_channels, in_channels, kernel, kernel],
            (2.0 / fan_in as f64).sqrt(),
            rng,
        );
        let weight = store.register(format!("{name}.weight"), w, ParamKind::Trainable);
        Conv2d {
            weight,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfolds one sample `C×H×W` into `(C·k·k)×(Ho·Wo)`.
    fn im2col<T: Scalar>(&self, x: &[T], h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let plane = ho * wo;
        let mut col = vec![T::zero(); self.patch_len() * plane];
        for c in 0..self.in_channels {
            let src = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((c * k + ky) * k + kx) * plane..][..plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T], h: usize, w: usize, ho: usize, wo: usize) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let plane = ho * wo;
        for c in 0..self.in_channels {
            let dst = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((c * k + ky) * k + kx) * plane..][..plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = dims4(x, "conv2d")?;
        if c != self.in_channels {
            return Err(Error::Contract(format!(
                "conv2d expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = self.output_hw(h, w);
        let weight = store.get(self.weight).data();
        let (in_len, out_len) = (c * h * w, self.out_channels * ho * wo);
        let mut y = Tensor::zeros(&[n, self.out_channels, ho, wo]);
        y.data_mut()
            .par_chunks_mut(out_len)
            .enumerate()
            .for_each(|(s, ys)| {
                let xs = &x.data()[s * in_len..(s + 1) * in_len];
                if self.is_pointwise() {
                    gemm_nn(self.out_channels, ho * wo, self.patch_len(), weight, xs, ys);
                } else {
                    let col = self.im2col(xs, h, w, ho, wo);
                    gemm_nn(
                        self.out_channels,
                        ho * wo,
                        self.patch_len(),
                        weight,
                        &col,
                        ys,
                    );
                }
            });
        Ok(y)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Tensor<T> {
        let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let (ho, wo) = self.output_hw(h, w);
        let weight = store.get(self.weight).data();
        let (in_len, out_len, plane) = (c * h * w, self.out_channels * ho * wo, ho * wo);
        let wlen = weight.len();
        let samples: Vec<usize> = (0..n).collect();
        let parts: Vec<(Vec<T>, Vec<T>)> = samples
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut dw = vec![T::zero(); wlen];
                let mut dx = vec![T::zero(); chunk.len() * in_len];
                for (i, &s) in chunk.iter().enumerate() {
                    let xs = &x.data()[s * in_len..(s + 1) * in_len];
                    let dys = &dy.data()[s * out_len..(s + 1) * out_len];
                    let dxs = &mut dx[i * in_len..(i + 1) * in_len];
                    if self.is_pointwise() {
                        gemm_nt(self.out_channels, self.patch_len(), plane, dys, xs, &mut dw);
                        gemm_tn(self.patch_len(), plane, self.out_channels, weight, dys, dxs);
                    } else {
                        let col = self.im2col(xs, h, w, ho, wo);
                        gemm_nt(
                            self.out_channels,
                            self.patch_len(),
                            plane,
                            dys,
                            &col,
                            &mut dw,
                        );
                        let mut dcol = vec![T::zero(); col.len()];
                        gemm_tn(
                            self.patch_len(),
                            plane,
                            self.out_channels,
                            weight,
                            dys,
                            &mut dcol,
                        );
                        self.col2im(&dcol, dxs, h, w, ho, wo);
                    }
                }
                (dw, dx)
            })
            .collect();
        let mut dx = Vec::with_capacity(n * in_len);
        for (dw, part) in &parts {
            grads.accumulate(self.weight, dw);
            dx.extend_from_slice(part);
        }
        Tensor::from_vec(x.shape(), dx).expect("input shape")
    }
}

/// Which statistics normalization uses during a training forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStatistics {
    /// Per-batch statistics; running averages are updated.
    #[default]
    Batch,
    /// Stored running statistics, which stay fixed.
    Running,
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    stats: NormStatistics,
}

/// Normalized output, backward cache and the running-statistics update, if any.
pub type NormOutput<T> = (Tensor<T>, NormCache<T>, Option<RunningUpdate<T>>);

/// Pending running-statistics update from a batch-statistics forward pass.
#[derive(Clone, Debug)]
pub struct RunningUpdate<T> {
    mean_id: ParamId,
    var_id: ParamId,
    momentum: f64,
    batch_mean: Vec<T>,
    batch_var_unbiased: Vec<T>,
}

impl<T: Scalar> RunningUpdate<T> {
    pub fn apply(&self, store: &mut ParamStore<T>) {
        let m = T::of(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in store
            .get_mut(self.mean_id)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_mean)
        {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store
            .get_mut(self.var_id)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_var_unbiased)
        {
            *r = keep * *r + m * b;
        }
    }
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            weight: store.register(
                format!("{name}.weight"),
                Tensor::full(&[channels], T::one()),
                ParamKind::Trainable,
            ),
            bias: store.register(
                format!("{name}.bias"),
                Tensor::zeros(&[channels]),
                ParamKind::Trainable,
            ),
            running_mean: store.register(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            ),
            running_var: store.register(
                format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
                ParamKind::Buffer,
            ),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        stats: NormStatistics,
    ) -> Result<NormOutput<T>> {
        let (n, c, h, w) = dims4(x, "batch_norm")?;
        if c != self.channels {
            return Err(Error::Contract(format!(
                "batch_norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let plane = h * w;
        let count = n * plane;
        let data = x.data();
        let (mean, var, update) = match stats {
            NormStatistics::Running => (
                store.get(self.running_mean).data().to_vec(),
                store.get(self.running_var).data().to_vec(),
                None,
            ),
            NormStatistics::Batch => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut sum = T::zero();
                    for s in 0..n {
                        sum += data[(s * c + ch) * plane..][..plane]
                            .iter()
                            .copied()
                            .sum::<T>();
                    }
                    let mu = sum / T::of_usize(count);
                    let mut sq = T::zero();
                    for s in 0..n {
                        for &v in &data[(s * c + ch) * plane..][..plane] {
                            sq += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / T::of_usize(count);
                }
                let correction = if count > 1 {
                    T::of_usize(count) / T::of_usize(count - 1)
                } else {
                    T::one()
                };
                let update = RunningUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    momentum: self.momentum,
                    batch_mean: mean.clone(),
                    batch_var_unbiased: var.iter().map(|&v| v * correction).collect(),
                };
                (mean, var, Some(update))
            }
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::of(self.eps)).sqrt())
            .collect();
        let gamma = store.get(self.weight).data();
        let beta = store.get(self.bias).data();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                let span = off..off + plane;
                let xs = &mut xhat.data_mut()[span.clone()];
                let ys = &mut y.data_mut()[span.clone()];
                for ((xh, yv), &v) in xs.iter_mut().zip(ys).zip(&data[span]) {
                    *xh = (v - mean[ch]) * inv_std[ch];
                    *yv = gamma[ch] * *xh + beta[ch];
                }
            }
        }
        Ok((
            y,
            NormCache {
                xhat,
                inv_std,
                stats,
            },
            update,
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &NormCache<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Tensor<T> {
        let shape = dy.shape();
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let count = T::of_usize(n * plane);
        let gamma = store.get(self.weight).data();
        let (dyd, xh) = (dy.data(), cache.xhat.data());
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    dbeta[ch] += dyd[i];
                    dgamma[ch] += dyd[i] * xh[i];
                }
            }
        }
        let mut dx = dy.clone();
        let out = dx.data_mut();
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                let scale = gamma[ch] * cache.inv_std[ch];
                match cache.stats {
                    NormStatistics::Running => {
                        for v in &mut out[off..off + plane] {
                            *v *= scale;
                        }
                    }
                    NormStatistics::Batch => {
                        for i in off..off + plane {
                            out[i] =
                                scale * (dyd[i] - dbeta[ch] / count - xh[i] * dgamma[ch] / count);
                        }
                    }
                }
            }
        }
        grads.accumulate(self.weight, &dgamma);
        grads.accumulate(self.bias, &dbeta);
        dx
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Fan-in normal weights (`std = 1/sqrt(in)`), zero bias.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let w = normal_tensor(
            &[out_features, in_features],
            (1.0 / in_features as f64).sqrt(),
            rng,
        );
        Linear {
            weight: store.register(format!("{name}.weight"), w, ParamKind::Trainable),
            bias: store.register(
                format!("{name}.bias"),
                Tensor::zeros(&[out_features]),
                ParamKind::Trainable,
            ),
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = match *x.shape() {
            [n, f] if f == self.in_features => n,
            ref s => {
                return Err(Error::Contract(format!(
                    "linear expects N×{} input, got {s:?}",
                    self.in_features
                )))
            }
        };
        let bias = store.get(self.bias).data();
        let mut y = Tensor::zeros(&[n, self.out_features]);
        for row in y.data_mut().chunks_mut(self.out_features) {
            row.copy_from_slice(bias);
        }
        gemm_nt(
            n,
            self.out_features,
            self.in_features,
            x.data(),
            store.get(self.weight).data(),
            y.data_mut(),
        );
        Ok(y)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Tensor<T> {
        let n = x.shape()[0];
        let mut dw = vec![T::zero(); self.in_features * self.out_features];
        gemm_tn(
            self.out_features,
            self.in_features,
            n,
            dy.data(),
            x.data(),
            &mut dw,
        );
        let mut db = vec![T::zero(); self.out_features];
        for row in dy.data().chunks(self.out_features) {
            for (b, &v) in db.iter_mut().zip(row) {
                *b += v;
            }
        }
        grads.accumulate(self.weight, &dw);
        grads.accumulate(self.bias, &db);
        let mut dx = Tensor::zeros(&[n, self.in_features]);
        gemm_nn(
            n,
            self.in_features,
            self.out_features,
            dy.data(),
            store.get(self.weight).data(),
            dx.data_mut(),
        );
        dx
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}

/// `N×C×H×W → N×C` spatial mean.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "global_avg_pool")?;
    let plane = h * w;
    let inv = T::one() / T::of_usize(plane);
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let plane = h * w;
    let inv = T::one() / T::of_usize(plane);
    let mut data = Vec::with_capacity(dy.len() * plane);
    for &g in dy.data() {
        data.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::from_vec(&[dy.shape()[0], dy.shape()[1], h, w], data).expect("shape")
}

/// 3×3 max pooling, stride 2, padding 1.
#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    input_shape: Vec<usize>,
}

pub fn max_pool_3x3_s2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, MaxPoolCache)> {
    let (n, c, h, w) = dims4(x, "max_pool")?;
    let (ho, wo) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (T::neg_infinity(), 0);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = ((oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if plane[idx] > best.0 {
                            best = (plane[idx], idx);
                        }
                    }
                }
                y.push(best.0);
                argmax.push(p * h * w + best.1);
            }
        }
    }
    Ok((
        Tensor::from_vec(&[n, c, ho, wo], y)?,
        MaxPoolCache {
            argmax,
            input_shape: x.shape().to_vec(),
        },
    ))
}

pub fn max_pool_backward<T: Scalar>(cache: &MaxPoolCache, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(&cache.input_shape);
    for (&i, &g) in cache.argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += g;
    }
    dx
}
