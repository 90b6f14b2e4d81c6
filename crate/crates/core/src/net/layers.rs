//! Forward and backward passes for the non-convolution layers.
//!
//! Activations are `[N, C, H, W]`; dense layers work on `[N, F, 1, 1]`.

use crate::error::{Result, SgsError};
use crate::tensor::{Scalar, Tensor4};

pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// `dX = dY` where `X > 0`, else 0.
pub fn relu_backward<T: Scalar>(x: &Tensor4<T>, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
    if x.shape() != dy.shape() {
        return Err(SgsError::shape(format!(
            "relu backward: {:?} vs {:?}",
            x.shape(),
            dy.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::from_vec(x.shape(), data)
}

/// 2x2 max pooling, stride 2; trailing odd rows/columns are dropped.
/// Returns the output and the flat input index of each maximum.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<usize>)> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(SgsError::shape(format!(
            "maxpool needs spatial extent >= 2, got {h}x{w}"
        )));
    }
    let mut y = Tensor4::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for r in 0..oh {
            for q in 0..ow {
                let mut best = base + 2 * r * w + 2 * q;
                for (dr, dq) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * r + dr) * w + 2 * q + dq;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                y.data_mut()[(plane * oh + r) * ow + q] = src[best];
                argmax.push(best);
            }
        }
    }
    Ok((y, argmax))
}

pub fn maxpool2_backward<T: Scalar>(
    input_shape: [usize; 4],
    argmax: &[usize],
    dy: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    if argmax.len() != dy.len() {
        return Err(SgsError::shape("maxpool backward: gradient/argmax mismatch"));
    }
    let mut dx = Tensor4::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[idx] += g;
    }
    Ok(dx)
}

/// Mean over the spatial extent: `[N, C, H, W] -> [N, C, 1, 1]`.
pub fn avgpool_global_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.shape();
    let area = T::of((h * w) as f64);
    let mut y = Tensor4::zeros([n, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            let mut acc = T::zero();
            for &v in x.plane(b, ch) {
                acc += v;
            }
            y.set([b, ch, 0, 0], acc / area);
        }
    }
    y
}

pub fn avgpool_global_backward<T: Scalar>(
    input_shape: [usize; 4],
    dy: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let [n, c, h, w] = input_shape;
    if dy.shape() != [n, c, 1, 1] {
        return Err(SgsError::shape(format!(
            "avgpool backward: got {:?} for input {:?}",
            dy.shape(),
            input_shape
        )));
    }
    let area = T::of((h * w) as f64);
    let mut dx = Tensor4::zeros(input_shape);
    for b in 0..n {
        for ch in 0..c {
            let g = dy.get([b, ch, 0, 0]) / area;
            for v in dx.plane_mut(b, ch) {
                *v = g;
            }
        }
    }
    Ok(dx)
}

/// `y[n,o] = sum_i W[o,i] x[n,i] + b[o]`; `W` is `[out, in, 1, 1]`, `b` is
/// `[out, 1, 1, 1]`.
pub fn dense_forward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let [n, fin, xh, xw] = x.shape();
    let [out, win, _, _] = w.shape();
    if xh != 1 || xw != 1 || win != fin || b.len() != out {
        return Err(SgsError::shape(format!(
            "dense: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut y = Tensor4::zeros([n, out, 1, 1]);
    let xs = x.data();
    let ws = w.data();
    for s in 0..n {
        let row = &xs[s * fin..(s + 1) * fin];
        for o in 0..out {
            let wr = &ws[o * fin..(o + 1) * fin];
            let mut acc = T::zero();
            for (a, bv) in wr.iter().zip(row) {
                acc += *a * *bv;
            }
            y.data_mut()[s * out + o] = acc + b.data()[o];
        }
    }
    Ok(y)
}

pub struct DenseGrads<T: Scalar> {
    pub dx: Tensor4<T>,
    pub dw: Tensor4<T>,
    pub db: Tensor4<T>,
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
) -> Result<DenseGrads<T>> {
    let [n, fin, _, _] = x.shape();
    let [out, _, _, _] = w.shape();
    if dy.shape() != [n, out, 1, 1] {
        return Err(SgsError::shape(format!(
            "dense backward: dy {:?}, expected {:?}",
            dy.shape(),
            [n, out, 1, 1]
        )));
    }
    let mut dx = Tensor4::zeros(x.shape());
    let mut dw = Tensor4::zeros(w.shape());
    let mut db = Tensor4::zeros([out, 1, 1, 1]);
    let (xs, ws, gs) = (x.data(), w.data(), dy.data());
    for s in 0..n {
        let xrow = &xs[s * fin..(s + 1) * fin];
        for o in 0..out {
            let g = gs[s * out + o];
            db.data_mut()[o] += g;
            let dwr = &mut dw.data_mut()[o * fin..(o + 1) * fin];
            for (d, &xv) in dwr.iter_mut().zip(xrow) {
                *d += g * xv;
            }
            let wr = &ws[o * fin..(o + 1) * fin];
            let dxr = &mut dx.data_mut()[s * fin..(s + 1) * fin];
            for (d, &wv) in dxr.iter_mut().zip(wr) {
                *d += g * wv;
            }
        }
    }
    Ok(DenseGrads { dx, dw, db })
}

pub struct LossOutput<T: Scalar> {
    /// Mean cross-entropy over the batch.
    pub loss: T,
    pub dlogits: Tensor4<T>,
    pub correct: usize,
}

/// Softmax cross-entropy averaged over the batch. Logits are `[N, K, 1, 1]`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor4<T>,
    labels: &[usize],
) -> Result<LossOutput<T>> {
    let [n, k, h, w] = logits.shape();
    if h != 1 || w != 1 || labels.len() != n || n == 0 {
        return Err(SgsError::shape(format!(
            "softmax cross-entropy: logits {:?} with {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let inv_n = T::one() / T::of((n) as f64);
    let mut dlogits = Tensor4::zeros(logits.shape());
    let mut loss = T::zero();
    let mut correct = 0;
    for (s, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(SgsError::invalid(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let row = &logits.data()[s * k..(s + 1) * k];
        let (argmax, max) = row
            .iter()
            .enumerate()
            .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        if argmax == label {
            correct += 1;
        }
        let mut denom = T::zero();
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        loss += (log_denom - (row[label] - max)) * inv_n;
        let grad = &mut dlogits.data_mut()[s * k..(s + 1) * k];
        for (j, g) in grad.iter_mut().enumerate() {
            let p = (row[j] - max).exp() / denom;
            let target = if j == label { T::one() } else { T::zero() };
            *g = (p - target) * inv_n;
        }
    }
    Ok(LossOutput {
        loss,
        dlogits,
        correct,
    })
}

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: Tensor4<T>,
    pub beta: Tensor4<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

pub struct BatchNormCache<T: Scalar> {
    x_hat: Tensor4<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor4::ones([channels, 1, 1, 1]),
            beta: Tensor4::zeros([channels, 1, 1, 1]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::of(0.1),
            eps: T::of(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Training mode normalizes with batch statistics and updates the
    /// running estimates; evaluation mode uses the running estimates.
    pub fn forward(
        &mut self,
        x: &Tensor4<T>,
        train: bool,
    ) -> Result<(Tensor4<T>, Option<BatchNormCache<T>>)> {
        let [n, c, h, w] = x.shape();
        if c != self.channels() {
            return Err(SgsError::shape(format!(
                "batch norm over {} channels got input {:?}",
                self.channels(),
                x.shape()
            )));
        }
        let count = T::of((n * h * w) as f64);
        let mut y = Tensor4::zeros(x.shape());
        let mut x_hat = Tensor4::zeros(x.shape());
        let mut inv_stds = vec![T::zero(); c];
        #[allow(clippy::needless_range_loop)]
        for ch in 0..c {
            let (mean, var) = if train {
                let mut sum = T::zero();
                for b in 0..n {
                    for &v in x.plane(b, ch) {
                        sum += v;
                    }
                }
                let mean = sum / count;
                let mut sq = T::zero();
                for b in 0..n {
                    for &v in x.plane(b, ch) {
                        sq += (v - mean) * (v - mean);
                    }
                }
                let var = sq / count;
                let m = self.momentum;
                let unbiased = if n * h * w > 1 {
                    sq / T::of((n * h * w - 1) as f64)
                } else {
                    var
                };
                self.running_mean[ch] = (T::one() - m) * self.running_mean[ch] + m * mean;
                self.running_var[ch] = (T::one() - m) * self.running_var[ch] + m * unbiased;
                (mean, var)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            let inv_std = T::one() / (var + self.eps).sqrt();
            inv_stds[ch] = inv_std;
            let (g, bt) = (self.gamma.data()[ch], self.beta.data()[ch]);
            for b in 0..n {
                let src = x.plane(b, ch);
                let xh = x_hat.plane_mut(b, ch);
                for (o, &v) in xh.iter_mut().zip(src) {
                    *o = (v - mean) * inv_std;
                }
                let xh = x_hat.plane(b, ch).to_vec();
                for (o, v) in y.plane_mut(b, ch).iter_mut().zip(xh) {
                    *o = g * v + bt;
                }
            }
        }
        let cache = train.then_some(BatchNormCache {
            x_hat,
            inv_std: inv_stds,
        });
        Ok((y, cache))
    }

    /// Returns `(dx, dgamma, dbeta)` for a training-mode forward.
    pub fn backward(
        &self,
        cache: &BatchNormCache<T>,
        dy: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, Tensor4<T>, Tensor4<T>)> {
        let [n, c, h, w] = dy.shape();
        if dy.shape() != cache.x_hat.shape() {
            return Err(SgsError::shape("batch norm backward shape mismatch"));
        }
        let count = T::of((n * h * w) as f64);
        let mut dx = Tensor4::zeros(dy.shape());
        let mut dgamma = Tensor4::zeros([c, 1, 1, 1]);
        let mut dbeta = Tensor4::zeros([c, 1, 1, 1]);
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                for (&g, &xh) in dy.plane(b, ch).iter().zip(cache.x_hat.plane(b, ch)) {
                    sum_dy += g;
                    sum_dy_xhat += g * xh;
                }
            }
            dgamma.data_mut()[ch] = sum_dy_xhat;
            dbeta.data_mut()[ch] = sum_dy;
            let scale = self.gamma.data()[ch] * cache.inv_std[ch] / count;
            for b in 0..n {
                let g = dy.plane(b, ch);
                let xh = cache.x_hat.plane(b, ch);
                let out: Vec<T> = g
                    .iter()
                    .zip(xh)
                    .map(|(&gv, &xv)| scale * (count * gv - sum_dy - xv * sum_dy_xhat))
                    .collect();
                dx.plane_mut(b, ch).copy_from_slice(&out);
            }
        }
        Ok((dx, dgamma, dbeta))
    }
}
