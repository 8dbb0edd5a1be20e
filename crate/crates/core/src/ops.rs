//! Forward kernels and their analytic backward passes.
//!
//! Every kernel is a pure function returning fresh tensors. The tape in
//! [`crate::tape`] records calls to these and chains the `*_backward`
//! functions in reverse order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-12;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.ndim() != rank {
        return Err(TensorError::Config(format!(
            "{op}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- matmul

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(TensorError::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    require_rank("transpose", a, 2)?;
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Returns `(dA, dB)` for `C = A·B`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    let da = matmul(dc, &transpose(b)?)?;
    let db = matmul(&transpose(a)?, dc)?;
    Ok((da, db))
}

// ---------------------------------------------------------------- conv2d

/// Geometry of a square-kernel 2-D convolution over a `C×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        require_rank("conv2d input", x, 3)?;
        require_rank("conv2d kernel", kernel, 4)?;
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let ks = kernel.shape();
        let (c_out, kc, k) = (ks[0], ks[1], ks[2]);
        if kc != c_in {
            return Err(TensorError::dim("conv2d", x.shape(), ks));
        }
        if ks[3] != k || !(k == 1 || k == 3) {
            return Err(TensorError::Config(format!(
                "conv2d: kernel must be 1x1 or 3x3, got {}x{}",
                k, ks[3]
            )));
        }
        if stride == 0 {
            return Err(TensorError::Config(
                "conv2d: stride must be positive".into(),
            ));
        }
        let out_dim = |n: usize| -> Result<usize> {
            let span = n + 2 * pad;
            if span < k || !(span - k).is_multiple_of(stride) {
                return Err(TensorError::Config(format!(
                    "conv2d: ({n} + 2*{pad} - {k}) / {stride} + 1 is not integral"
                )));
            }
            Ok((span - k) / stride + 1)
        };
        Ok(ConvGeom {
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
            pad,
            h_out: out_dim(h)?,
            w_out: out_dim(w)?,
        })
    }

    /// Input coordinate for output position `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, n: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < n).then_some(p as usize)
    }
}

fn check_bias(bias: Option<&Tensor>, c_out: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(TensorError::dim("conv2d bias", b.shape(), &[c_out]));
        }
    }
    Ok(())
}

/// Cross-correlation of `x` (`C_in×H×W`) with `kernel` (`C_out×C_in×k×k`), direct loops.
pub fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(x, kernel, stride, pad)?;
    check_bias(bias, g.c_out)?;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; g.c_out * g.h_out * g.w_out];
    for co in 0..g.c_out {
        let b0 = bias.map_or(0.0, |b| b.data()[co]);
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut acc = 0.0;
                for ci in 0..g.c_in {
                    for ky in 0..g.k {
                        let Some(iy) = g.src(oy, ky, g.h) else {
                            continue;
                        };
                        for kx in 0..g.k {
                            let Some(ix) = g.src(ox, kx, g.w) else {
                                continue;
                            };
                            acc += kd[((co * g.c_in + ci) * g.k + ky) * g.k + kx]
                                * xd[(ci * g.h + iy) * g.w + ix];
                        }
                    }
                }
                out[(co * g.h_out + oy) * g.w_out + ox] = acc + b0;
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.c_out, g.h_out, g.w_out], out))
}

/// Unfolds `x` into a `(C_in·k·k) × (H'·W')` patch matrix.
pub fn im2col(x: &Tensor, g: &ConvGeom) -> Tensor {
    let xd = x.data();
    let cols = g.h_out * g.w_out;
    let mut out = vec![0.0; g.c_in * g.k * g.k * cols];
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                for oy in 0..g.h_out {
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        continue;
                    };
                    for ox in 0..g.w_out {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            out[row * cols + oy * g.w_out + ox] = xd[(ci * g.h + iy) * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![g.c_in * g.k * g.k, cols], out)
}

/// Same contract as [`conv2d`], computed as a single matrix product over an im2col buffer.
pub fn conv2d_im2col(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(x, kernel, stride, pad)?;
    check_bias(bias, g.c_out)?;
    let cols = im2col(x, &g);
    let wmat = kernel.reshape(&[g.c_out, g.c_in * g.k * g.k])?;
    let mut y = matmul(&wmat, &cols)?;
    if let Some(b) = bias {
        let n = g.h_out * g.w_out;
        for (co, chunk) in y.data_mut().chunks_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b.data()[co]);
        }
    }
    y.reshape(&[g.c_out, g.h_out, g.w_out])
}

/// Returns `(dx, dkernel, dbias)`.
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeom::new(x, kernel, stride, pad)?;
    if dy.shape() != [g.c_out, g.h_out, g.w_out] {
        return Err(TensorError::dim(
            "conv2d backward",
            dy.shape(),
            &[g.c_out, g.h_out, g.w_out],
        ));
    }
    let (xd, kd, gd) = (x.data(), kernel.data(), dy.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; g.c_out];
    for co in 0..g.c_out {
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let go = gd[(co * g.h_out + oy) * g.w_out + ox];
                db[co] += go;
                if go == 0.0 {
                    continue;
                }
                for ci in 0..g.c_in {
                    for ky in 0..g.k {
                        let Some(iy) = g.src(oy, ky, g.h) else {
                            continue;
                        };
                        for kx in 0..g.k {
                            let Some(ix) = g.src(ox, kx, g.w) else {
                                continue;
                            };
                            let ki = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                            let xi = (ci * g.h + iy) * g.w + ix;
                            dk[ki] += go * xd[xi];
                            dx[xi] += go * kd[ki];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
        Tensor::from_parts(vec![g.c_out], db),
    ))
}

// ------------------------------------------------------------ activations

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Gelu,
    Sigmoid,
}

impl FromStr for Activation {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "silu" => Ok(Activation::Silu),
            "gelu" => Ok(Activation::Gelu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(TensorError::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
        })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
                let t = u.tanh();
                let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}

pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    x.map(|v| kind.eval(v))
}

pub fn activation_backward(kind: Activation, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.zip_map(dy, |v, g| g * kind.derivative(v))
}

// ---------------------------------------------------------------- softmax

/// Softmax along the last axis, with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap_or(&1);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Gradient through softmax given its output `y`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(TensorError::dim("softmax backward", y.shape(), dy.shape()));
    }
    let n = *y.shape().last().unwrap_or(&1);
    let mut dx = vec![0.0; y.len()];
    for ((yr, gr), dr) in y
        .data()
        .chunks(n)
        .zip(dy.data().chunks(n))
        .zip(dx.chunks_mut(n))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), dx))
}

// ---------------------------------------------------------- normalization

/// Per-group normalization statistics kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NormCache {
    pub xhat: Tensor,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Layer norm over the last axis of an `N×C` tensor.
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    require_rank("layer_norm", x, 2)?;
    if eps <= 0.0 {
        return Err(TensorError::Config(
            "layer_norm: eps must be positive".into(),
        ));
    }
    let c = x.shape()[1];
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(TensorError::dim("layer_norm", x.shape(), gain.shape()));
    }
    let (gd, bd) = (gain.data(), bias.data());
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let (mut means, mut vars, mut invs) = (Vec::new(), Vec::new(), Vec::new());
    for (r, row) in x.data().chunks(c).enumerate() {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            let xh = (row[j] - mean) * inv;
            xhat[r * c + j] = xh;
            y[r * c + j] = xh * gd[j] + bd[j];
        }
        means.push(mean);
        vars.push(var);
        invs.push(inv);
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        NormCache {
            xhat: Tensor::from_parts(x.shape().to_vec(), xhat),
            mean: means,
            var: vars,
            inv_std: invs,
        },
    ))
}

/// Backward of a normalization over groups of `len` contiguous values where
/// `dxhat` has already been multiplied by the gain.
fn normalized_group_backward(xhat: &[f64], dxhat: &[f64], inv_std: f64, out: &mut [f64]) {
    let n = xhat.len() as f64;
    let s1: f64 = dxhat.iter().sum();
    let s2: f64 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum();
    for ((o, &d), &xh) in out.iter_mut().zip(dxhat).zip(xhat) {
        *o = inv_std / n * (n * d - s1 - xh * s2);
    }
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &NormCache,
    gain: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if cache.xhat.shape() != dy.shape() {
        return Err(TensorError::dim(
            "layer_norm backward",
            cache.xhat.shape(),
            dy.shape(),
        ));
    }
    let c = gain.len();
    let gd = gain.data();
    let mut dx = vec![0.0; dy.len()];
    let mut dg = vec![0.0; c];
    let mut dbias = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for (r, (xr, gr)) in cache
        .xhat
        .data()
        .chunks(c)
        .zip(dy.data().chunks(c))
        .enumerate()
    {
        for j in 0..c {
            dg[j] += gr[j] * xr[j];
            dbias[j] += gr[j];
            dxhat[j] = gr[j] * gd[j];
        }
        normalized_group_backward(xr, &dxhat, cache.inv_std[r], &mut dx[r * c..(r + 1) * c]);
    }
    Ok((
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dg),
        Tensor::from_parts(vec![c], dbias),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn fresh(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }

    /// Exponential moving update from one train-mode batch. The stored
    /// variance uses the unbiased estimator when more than one value was seen.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], count: usize, momentum: f64) {
        let correction = if count > 1 {
            count as f64 / (count as f64 - 1.0)
        } else {
            1.0
        };
        for (k, (m, v)) in batch_mean.iter().zip(batch_var).enumerate() {
            let rm = &mut self.mean.data_mut()[k];
            *rm = (1.0 - momentum) * *rm + momentum * m;
            let rv = &mut self.var.data_mut()[k];
            *rv = (1.0 - momentum) * *rv + momentum * v * correction;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Train,
    Infer,
}

/// Batch norm over a single `C×H×W` sample: statistics are taken per channel
/// across spatial positions in train mode, or read from `running` in infer mode.
pub fn batch_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    running: Option<&RunningStats>,
    mode: NormMode,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    require_rank("batch_norm", x, 3)?;
    let c = x.shape()[0];
    let hw = x.shape()[1] * x.shape()[2];
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(TensorError::dim("batch_norm", x.shape(), gain.shape()));
    }
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        NormMode::Train => x
            .data()
            .chunks(hw)
            .map(|ch| {
                let m = ch.iter().sum::<f64>() / hw as f64;
                let v = ch.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / hw as f64;
                (m, v)
            })
            .unzip(),
        NormMode::Infer => {
            let rs = running.ok_or_else(|| {
                TensorError::State("batch_norm: infer mode requires running statistics".into())
            })?;
            if rs.mean.shape() != [c] || rs.var.shape() != [c] {
                return Err(TensorError::dim(
                    "batch_norm running stats",
                    rs.mean.shape(),
                    &[c],
                ));
            }
            (rs.mean.data().to_vec(), rs.var.data().to_vec())
        }
    };
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for (k, ch) in x.data().chunks(hw).enumerate() {
        for (i, &v) in ch.iter().enumerate() {
            let xh = (v - mean[k]) * inv[k];
            xhat[k * hw + i] = xh;
            y[k * hw + i] = xh * gain.data()[k] + bias.data()[k];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        NormCache {
            xhat: Tensor::from_parts(x.shape().to_vec(), xhat),
            mean,
            var,
            inv_std: inv,
        },
    ))
}

/// Returns `(dx, dgain, dbias)`.
pub fn batch_norm_backward(
    cache: &NormCache,
    gain: &Tensor,
    mode: NormMode,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if cache.xhat.shape() != dy.shape() {
        return Err(TensorError::dim(
            "batch_norm backward",
            cache.xhat.shape(),
            dy.shape(),
        ));
    }
    let c = gain.len();
    let hw = dy.len() / c;
    let mut dx = vec![0.0; dy.len()];
    let mut dg = vec![0.0; c];
    let mut dbias = vec![0.0; c];
    for k in 0..c {
        let xr = &cache.xhat.data()[k * hw..(k + 1) * hw];
        let gr = &dy.data()[k * hw..(k + 1) * hw];
        dg[k] = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
        dbias[k] = gr.iter().sum();
        let gk = gain.data()[k];
        let dxhat: Vec<f64> = gr.iter().map(|g| g * gk).collect();
        let out = &mut dx[k * hw..(k + 1) * hw];
        match mode {
            NormMode::Train => normalized_group_backward(xr, &dxhat, cache.inv_std[k], out),
            NormMode::Infer => {
                for (o, d) in out.iter_mut().zip(&dxhat) {
                    *o = d * cache.inv_std[k];
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dg),
        Tensor::from_parts(vec![c], dbias),
    ))
}

/// Divides each row by `max(‖row‖₂, eps)`.
pub fn l2_normalize_rows(x: &Tensor, eps: f64) -> Tensor {
    let n = *x.shape().last().unwrap_or(&1);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn l2_normalize_rows_backward(x: &Tensor, eps: f64, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(TensorError::dim(
            "l2_normalize backward",
            x.shape(),
            dy.shape(),
        ));
    }
    let n = *x.shape().last().unwrap_or(&1);
    let mut dx = vec![0.0; x.len()];
    for ((xr, gr), dr) in x
        .data()
        .chunks(n)
        .zip(dy.data().chunks(n))
        .zip(dx.chunks_mut(n))
    {
        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > eps {
            let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((d, &xv), &gv) in dr.iter_mut().zip(xr).zip(gr) {
                *d = (gv - xv * dot / (norm * norm)) / norm;
            }
        } else {
            for (d, &gv) in dr.iter_mut().zip(gr) {
                *d = gv / eps;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), dx))
}

/// Mean over the spatial axes of a `C×H×W` tensor.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    require_rank("global_avg_pool", x, 3)?;
    let c = x.shape()[0];
    let hw = x.shape()[1] * x.shape()[2];
    let z = x
        .data()
        .chunks(hw)
        .map(|ch| ch.iter().sum::<f64>() / hw as f64)
        .collect();
    Ok(Tensor::from_parts(vec![c], z))
}

pub fn global_avg_pool_backward(input_shape: &[usize], dz: &Tensor) -> Tensor {
    let hw = input_shape[1] * input_shape[2];
    let data = dz
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / hw as f64, hw))
        .collect();
    Tensor::from_parts(input_shape.to_vec(), data)
}

// ------------------------------------------------------------ broadcasting

/// Numpy-style broadcast of two shapes (right-aligned, size-1 axes stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat source offset in a tensor of shape `src` for each element of `out`.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, rank - src.len())
        .chain(src.iter().copied())
        .collect();
    let mut strides = vec![0; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        strides[i] = if padded[i] == 1 { 0 } else { s };
        s *= padded[i];
    }
    let n: usize = out.iter().product();
    let mut idx = vec![0usize; n];
    let mut counter = vec![0usize; rank];
    for slot in idx.iter_mut() {
        *slot = counter.iter().zip(&strides).map(|(c, s)| c * s).sum();
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            if counter[ax] < out[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    idx
}

pub fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| TensorError::dim(op, a.shape(), b.shape()))?;
    let ia = broadcast_index(a.shape(), &shape);
    let ib = broadcast_index(b.shape(), &shape);
    let data = ia
        .iter()
        .zip(&ib)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect();
    Ok(Tensor::from_parts(shape, data))
}

/// Sums a broadcast gradient back down to `shape`.
pub fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let idx = broadcast_index(shape, grad.shape());
    let mut out = vec![0.0; shape.iter().product()];
    for (&i, &g) in idx.iter().zip(grad.data()) {
        out[i] += g;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Values of `a` and `b` expanded to their common broadcast shape.
pub fn broadcast_pair(a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| TensorError::dim("broadcast", a.shape(), b.shape()))?;
    let expand = |t: &Tensor| {
        let idx = broadcast_index(t.shape(), &shape);
        Tensor::from_parts(shape.clone(), idx.iter().map(|&i| t.data()[i]).collect())
    };
    Ok((expand(a), expand(b)))
}
