//! Forward and backward kernels over [`Tensor`]s.

use super::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight on the old running statistic.
pub const BN_MOMENTUM: f64 = 0.9;

/// Row-major `c = a * b + beta * c` with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel convolution over one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: (usize, usize, usize), out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let (in_ch, in_h, in_w) = input;
        ConvGeom {
            in_ch,
            in_h,
            in_w,
            out_ch,
            kernel,
            stride,
            padding,
            out_h: (in_h + 2 * padding - kernel) / stride + 1,
            out_w: (in_w + 2 * padding - kernel) / stride + 1,
        }
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.col_rows()
    }

    /// Whether im2col would just copy the input.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let area = g.out_area();
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let dst = &mut col[row * area..(row + 1) * area];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                    let out_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.in_h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                        *o = if iw < 0 || iw >= g.in_w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let area = g.out_area();
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let src = &col[row * area..(row + 1) * area];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution via im2col and a matrix product. `weight` is
/// `[out_ch, in_ch, k, k]`; no bias.
pub fn conv2d_forward(x: &Tensor, weight: &[f64], g: &ConvGeom) -> Tensor {
    assert_eq!(x.sample_shape(), (g.in_ch, g.in_h, g.in_w));
    assert_eq!(weight.len(), g.weight_len());
    let batch = x.batch();
    let area = g.out_area();
    let rows = g.col_rows();
    let mut out = Tensor::zeros([batch, g.out_ch, g.out_h, g.out_w]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * area] };
    for b in 0..batch {
        let cols: &[f64] = if g.is_pointwise() {
            x.sample(b)
        } else {
            im2col(x.sample(b), g, &mut col);
            &col
        };
        gemm(g.out_ch, rows, area, weight, rows, 1, cols, area, 1, 0.0, out.sample_mut(b));
    }
    out
}

/// Accumulates the kernel gradient into `dweight` and returns the input
/// gradient when `need_dx` is set.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &[f64],
    g: &ConvGeom,
    dy: &Tensor,
    dweight: &mut [f64],
    need_dx: bool,
) -> Option<Tensor> {
    let batch = x.batch();
    let area = g.out_area();
    let rows = g.col_rows();
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * area] };
    let mut dcol = vec![0.0; rows * area];
    let mut dx = need_dx.then(|| Tensor::zeros(x.dims()));
    for b in 0..batch {
        let cols: &[f64] = if g.is_pointwise() {
            x.sample(b)
        } else {
            im2col(x.sample(b), g, &mut col);
            &col
        };
        let dyb = dy.sample(b);
        // dW += dy_b * col^T
        gemm(g.out_ch, area, rows, dyb, area, 1, cols, 1, area, 1.0, dweight);
        if let Some(dx) = dx.as_mut() {
            // dcol = W^T * dy_b
            gemm(rows, g.out_ch, area, weight, 1, rows, dyb, area, 1, 0.0, &mut dcol);
            if g.is_pointwise() {
                dx.sample_mut(b).copy_from_slice(&dcol);
            } else {
                col2im(&dcol, g, dx.sample_mut(b));
            }
        }
    }
    dx
}

/// Direct seven-loop convolution, kept as an independent reference for the
/// im2col path.
pub fn conv2d_reference(x: &Tensor, weight: &[f64], out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Tensor {
    let [batch, in_ch, in_h, in_w] = x.dims();
    let out_h = (in_h + 2 * padding - kernel) / stride + 1;
    let out_w = (in_w + 2 * padding - kernel) / stride + 1;
    let mut out = Tensor::zeros([batch, out_ch, out_h, out_w]);
    for b in 0..batch {
        for o in 0..out_ch {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = 0.0;
                    for c in 0..in_ch {
                        for kh in 0..kernel {
                            for kw in 0..kernel {
                                let ih = (oh * stride + kh) as isize - padding as isize;
                                let iw = (ow * stride + kw) as isize - padding as isize;
                                if ih < 0 || iw < 0 || ih >= in_h as isize || iw >= in_w as isize {
                                    continue;
                                }
                                let wv = weight[((o * in_ch + c) * kernel + kh) * kernel + kw];
                                acc += wv * x.at(b, c, ih as usize, iw as usize);
                            }
                        }
                    }
                    let idx = out.index(b, o, oh, ow);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

/// Batch statistics kept from a train-mode batch-norm forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatch {
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub xhat: Tensor,
}

fn per_channel(x: &Tensor) -> (usize, usize, usize) {
    let [b, c, h, w] = x.dims();
    (b, c, h * w)
}

pub fn batchnorm_train(x: &Tensor, gamma: &[f64], beta: &[f64]) -> (Tensor, BnBatch) {
    let (batch, channels, area) = per_channel(x);
    let count = (batch * area) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    let data = x.data();
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * area;
            s += data[off..off + area].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * area;
            v += data[off..off + area].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = v / count;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.dims());
    let mut y = Tensor::zeros(x.dims());
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * area;
            for i in off..off + area {
                let n = (data[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = n;
                y.data_mut()[i] = gamma[c] * n + beta[c];
            }
        }
    }
    (
        y,
        BnBatch {
            mean,
            var,
            inv_std,
            xhat,
        },
    )
}

pub fn batchnorm_eval(x: &Tensor, gamma: &[f64], beta: &[f64], running_mean: &[f64], running_var: &[f64]) -> Tensor {
    let (batch, channels, area) = per_channel(x);
    let mut y = Tensor::zeros(x.dims());
    for c in 0..channels {
        let scale = gamma[c] / (running_var[c] + BN_EPSILON).sqrt();
        let shift = beta[c] - running_mean[c] * scale;
        for b in 0..batch {
            let off = (b * channels + c) * area;
            for i in off..off + area {
                y.data_mut()[i] = x.data()[i] * scale + shift;
            }
        }
    }
    y
}

/// Fold a batch into running statistics; the variance is stored unbiased.
pub fn update_running_stats(stats: &BnBatch, count: usize, running_mean: &mut [f64], running_var: &mut [f64]) {
    let correction = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
    for c in 0..running_mean.len() {
        running_mean[c] = BN_MOMENTUM * running_mean[c] + (1.0 - BN_MOMENTUM) * stats.mean[c];
        running_var[c] = BN_MOMENTUM * running_var[c] + (1.0 - BN_MOMENTUM) * stats.var[c] * correction;
    }
}

/// Backward of the train-mode normalization. Accumulates into `dgamma` and
/// `dbeta`.
pub fn batchnorm_backward_train(dy: &Tensor, saved: &BnBatch, gamma: &[f64], dgamma: &mut [f64], dbeta: &mut [f64]) -> Tensor {
    let (batch, channels, area) = per_channel(dy);
    let count = (batch * area) as f64;
    let g = dy.data();
    let xh = saved.xhat.data();
    let mut dx = Tensor::zeros(dy.dims());
    for c in 0..channels {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * area;
            for i in off..off + area {
                sum_dy += g[i];
                sum_dy_xhat += g[i] * xh[i];
            }
        }
        dgamma[c] += sum_dy_xhat;
        dbeta[c] += sum_dy;
        let k = gamma[c] * saved.inv_std[c] / count;
        for b in 0..batch {
            let off = (b * channels + c) * area;
            for i in off..off + area {
                dx.data_mut()[i] = k * (count * g[i] - sum_dy - xh[i] * sum_dy_xhat);
            }
        }
    }
    dx
}

/// Backward of the eval-mode (affine) normalization.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward_eval(
    x: &Tensor,
    dy: &Tensor,
    gamma: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Tensor {
    let (batch, channels, area) = per_channel(dy);
    let mut dx = Tensor::zeros(dy.dims());
    for c in 0..channels {
        let inv = 1.0 / (running_var[c] + BN_EPSILON).sqrt();
        for b in 0..batch {
            let off = (b * channels + c) * area;
            for i in off..off + area {
                let g = dy.data()[i];
                dgamma[c] += g * (x.data()[i] - running_mean[c]) * inv;
                dbeta[c] += g;
                dx.data_mut()[i] = g * gamma[c] * inv;
            }
        }
    }
    dx
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &o) in dx.data_mut().iter_mut().zip(y.data()) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Non-overlapping `k x k` average pooling; trailing rows and columns that
/// do not fill a window are ignored.
pub fn avg_pool(x: &Tensor, k: usize) -> Tensor {
    let [b, c, h, w] = x.dims();
    let (oh, ow) = (h / k, w / k);
    let mut y = Tensor::zeros([b, c, oh, ow]);
    let norm = 1.0 / (k * k) as f64;
    for n in 0..b {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for di in 0..k {
                        for dj in 0..k {
                            s += x.at(n, ch, i * k + di, j * k + dj);
                        }
                    }
                    let idx = y.index(n, ch, i, j);
                    y.data_mut()[idx] = s * norm;
                }
            }
        }
    }
    y
}

pub fn avg_pool_backward(dy: &Tensor, k: usize, input_dims: [usize; 4]) -> Tensor {
    let [b, c, oh, ow] = dy.dims();
    let mut dx = Tensor::zeros(input_dims);
    let norm = 1.0 / (k * k) as f64;
    for n in 0..b {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let g = dy.at(n, ch, i, j) * norm;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = dx.index(n, ch, i * k + di, j * k + dj);
                            dx.data_mut()[idx] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (b, c, area) = per_channel(x);
    let mut y = Tensor::zeros([b, c, 1, 1]);
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v = x.data()[i * area..(i + 1) * area].iter().sum::<f64>() / area as f64;
    }
    y
}

pub fn global_avg_pool_backward(dy: &Tensor, input_dims: [usize; 4]) -> Tensor {
    let area = input_dims[2] * input_dims[3];
    let mut dx = Tensor::zeros(input_dims);
    for (i, &g) in dy.data().iter().enumerate() {
        let share = g / area as f64;
        dx.data_mut()[i * area..(i + 1) * area].fill(share);
    }
    dx
}

/// `y = x W^T + b` with `W` stored `[out, in]`. Output is `(batch, out, 1, 1)`.
pub fn linear(x: &Tensor, weight: &[f64], bias: &[f64], out_features: usize) -> Tensor {
    let batch = x.batch();
    let in_features = x.sample_len();
    let mut y = Tensor::zeros([batch, out_features, 1, 1]);
    for b in 0..batch {
        y.sample_mut(b).copy_from_slice(bias);
    }
    gemm(batch, in_features, out_features, x.data(), in_features, 1, weight, 1, in_features, 1.0, y.data_mut());
    y
}

pub fn linear_backward(x: &Tensor, weight: &[f64], dy: &Tensor, dweight: &mut [f64], dbias: &mut [f64]) -> Tensor {
    let batch = x.batch();
    let in_features = x.sample_len();
    let out_features = dy.sample_len();
    // dW += dy^T x
    gemm(out_features, batch, in_features, dy.data(), 1, out_features, x.data(), in_features, 1, 1.0, dweight);
    for b in 0..batch {
        for (db, g) in dbias.iter_mut().zip(dy.sample(b)) {
            *db += g;
        }
    }
    let mut dx = Tensor::zeros(x.dims());
    gemm(batch, out_features, in_features, dy.data(), out_features, 1, weight, in_features, 1, 0.0, dx.data_mut());
    dx
}

pub fn zero_pad_channels(x: &Tensor, extra: usize) -> Tensor {
    let [b, c, h, w] = x.dims();
    let mut y = Tensor::zeros([b, c + extra, h, w]);
    let n = c * h * w;
    for i in 0..b {
        y.sample_mut(i)[..n].copy_from_slice(x.sample(i));
    }
    y
}

/// Keeps the gradient of the original channels only.
pub fn zero_pad_channels_backward(dy: &Tensor, in_channels: usize) -> Tensor {
    let [b, _, h, w] = dy.dims();
    let mut dx = Tensor::zeros([b, in_channels, h, w]);
    let n = in_channels * h * w;
    for i in 0..b {
        dx.sample_mut(i).copy_from_slice(&dy.sample(i)[..n]);
    }
    dx
}

/// Row-wise softmax of `(batch, classes, 1, 1)` logits.
pub fn softmax(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.batch())
        .map(|b| {
            let row = logits.sample(b);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        })
        .collect()
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits, `(p - onehot(y)) / batch`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let batch = logits.batch();
    assert_eq!(labels.len(), batch);
    let probs = softmax(logits);
    let mut grad = Tensor::zeros(logits.dims());
    let mut loss = 0.0;
    for (b, (p, &y)) in probs.iter().zip(labels).enumerate() {
        let row = logits.sample(b);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let g = grad.sample_mut(b);
        for (k, (gk, pk)) in g.iter_mut().zip(p).enumerate() {
            *gk = (pk - if k == y { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    (loss / batch as f64, grad)
}

/// Index of the largest logit per sample.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.batch())
        .map(|b| {
            let row = logits.sample(b);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
