//! Forward pass of the fusion block, recorded on a [`Tape`].
//!
//! Data flow for an input `X` of shape `C×H×W`:
//!
//! ```text
//! X_l = silu(bn(conv3x3(silu(bn(conv3x3(X))))))          local branch
//! T   = tokens(X)                                          N×C, n = i·W + j
//! T'  = T  + Wo·MHSA(LN(T))                                cosine attention per head
//! X_g = untokens(T' + FFN(LN(T')))                         global branch
//! w_s = sigmoid(conv1x1(X_l))                              1×H×W
//! w_c = sigmoid(conv1x1(gelu(conv1x1(GAP(X_g)))))          C×1×1
//! Y   = X + conv1x1(w_c ⊙ X_l + w_s ⊙ X_g)
//! ```

use super::params::{SfmParams, SfmVars};
use crate::error::{Result, TensorError};
use crate::ops::{self, Activation, NormMode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Handles to the intermediate maps of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SfmTrace {
    pub output: Var,
    pub local: Var,
    pub global: Var,
    pub spatial: Var,
    pub channel: Var,
    pub bn1: Var,
    pub bn2: Var,
}

fn input_dims(tape: &Tape, x: Var, channels: usize) -> Result<(usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 3 || s[0] != channels {
        return Err(TensorError::dim("sfm input", s, &[channels, 0, 0]));
    }
    Ok((s[1], s[2]))
}

/// Two `conv3x3 → BN → SiLU` stages. Returns `(X_l, bn1, bn2)`.
pub fn local_branch(
    tape: &mut Tape,
    x: Var,
    w: &SfmVars,
    params: &SfmParams,
    mode: NormMode,
) -> Result<(Var, Var, Var)> {
    let eps = params.config.bn_eps;
    let h = tape.conv2d(x, w.local_conv1, None, 1, 1)?;
    let bn1 = tape.batch_norm(
        h,
        w.local_bn1_gain,
        w.local_bn1_bias,
        params.bn1_running.as_ref(),
        mode,
        eps,
    )?;
    let a = tape.activation(Activation::Silu, bn1);
    let h = tape.conv2d(a, w.local_conv2, None, 1, 1)?;
    let bn2 = tape.batch_norm(
        h,
        w.local_bn2_gain,
        w.local_bn2_bias,
        params.bn2_running.as_ref(),
        mode,
        eps,
    )?;
    Ok((tape.activation(Activation::Silu, bn2), bn1, bn2))
}

/// `softmax(N(q)·N(k)ᵀ / γ)·v` for one head; `log_gamma` is a 1-element view.
pub fn cosine_attention_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    log_gamma: Var,
    eps: f64,
) -> Result<Var> {
    let qn = tape.l2_normalize_rows(q, eps);
    let kn = tape.l2_normalize_rows(k, eps);
    let (kn, v) = canonical_key_order(tape, kn, v)?;
    let kt = tape.transpose(kn)?;
    let logits = tape.matmul(qn, kt)?;
    let gamma = tape.exp(log_gamma);
    let scaled = tape.div(logits, gamma)?;
    let attn = tape.softmax_rows(scaled);
    tape.matmul(attn, v)
}

/// Reorders key/value rows by value so that the reductions over keys run in
/// an order that does not depend on token order. Token permutations then
/// commute with attention bit-for-bit.
fn canonical_key_order(tape: &mut Tape, k: Var, v: Var) -> Result<(Var, Var)> {
    let (n, dk) = (tape.shape(k)[0], tape.shape(k)[1]);
    let dv = tape.shape(v)[1];
    let (kd, vd) = (tape.value(k).data(), tape.value(v).data());
    let row = |j: usize| {
        kd[j * dk..(j + 1) * dk]
            .iter()
            .chain(&vd[j * dv..(j + 1) * dv])
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        row(a)
            .zip(row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    if order.iter().enumerate().all(|(i, &j)| i == j) {
        return Ok((k, v));
    }
    let pick =
        |d: usize| -> Vec<usize> { order.iter().flat_map(|&j| j * d..(j + 1) * d).collect() };
    let (ki, vi) = (pick(dk), pick(dv));
    let k = tape.gather(k, &ki)?;
    let k = tape.reshape(k, &[n, dk])?;
    let v = tape.gather(v, &vi)?;
    let v = tape.reshape(v, &[n, dv])?;
    Ok((k, v))
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Row-major tokens: `C×H×W → (H·W)×C`.
pub fn to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    tape.transpose(flat)
}

pub fn from_tokens(tape: &mut Tape, t: Var, h: usize, w: usize) -> Result<Var> {
    let c = tape.shape(t)[1];
    let cm = tape.transpose(t)?;
    tape.reshape(cm, &[c, h, w])
}

/// Pre-norm multi-head cosine attention and FFN, each with a residual.
pub fn global_branch(tape: &mut Tape, x: Var, w: &SfmVars, params: &SfmParams) -> Result<Var> {
    let cfg = &params.config;
    let (h, wd) = input_dims(tape, x, cfg.channels)?;
    let tokens = to_tokens(tape, x)?;

    let normed = tape.layer_norm(tokens, w.ln1_gain, w.ln1_bias, cfg.ln_eps)?;
    let q = linear(tape, normed, w.wq, w.bq)?;
    let k = linear(tape, normed, w.wk, w.bk)?;
    let v = linear(tape, normed, w.wv, w.bv)?;
    let d = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.heads);
    for hd in 0..cfg.heads {
        let (lo, hi) = (hd * d, (hd + 1) * d);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let lg = tape.view(w.log_gamma, hd, &[1])?;
        heads.push(cosine_attention_head(tape, qh, kh, vh, lg, cfg.l2_eps)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let attn = linear(tape, merged, w.wo, w.bo)?;
    let after_attn = tape.add(tokens, attn)?;

    let normed = tape.layer_norm(after_attn, w.ln2_gain, w.ln2_bias, cfg.ln_eps)?;
    let hidden = linear(tape, normed, w.ffn_w1, w.ffn_b1)?;
    let hidden = tape.activation(Activation::Gelu, hidden);
    let ffn = linear(tape, hidden, w.ffn_w2, w.ffn_b2)?;
    let out = tape.add(after_attn, ffn)?;
    from_tokens(tape, out, h, wd)
}

/// `w_s = sigmoid(conv1x1(X_l))`, shape `1×H×W`.
pub fn spatial_guidance(tape: &mut Tape, x_local: Var, w: &SfmVars) -> Result<Var> {
    let s = tape.conv2d(x_local, w.spatial_w, Some(w.spatial_b), 1, 0)?;
    Ok(tape.activation(Activation::Sigmoid, s))
}

/// `w_c = sigmoid(conv1x1(gelu(conv1x1(GAP(X_g)))))`, shape `C×1×1`.
pub fn channel_guidance(tape: &mut Tape, x_global: Var, w: &SfmVars) -> Result<Var> {
    let c = tape.shape(x_global)[0];
    let z = tape.global_avg_pool(x_global)?;
    let z = tape.reshape(z, &[c, 1, 1])?;
    let h = tape.conv2d(z, w.channel_w1, Some(w.channel_b1), 1, 0)?;
    let h = tape.activation(Activation::Gelu, h);
    let h = tape.conv2d(h, w.channel_w2, Some(w.channel_b2), 1, 0)?;
    Ok(tape.activation(Activation::Sigmoid, h))
}

/// `X + conv1x1(w_c ⊙ X_l + w_s ⊙ X_g)` with `w_c` broadcast over space and
/// `w_s` broadcast over channels.
pub fn fuse(
    tape: &mut Tape,
    x: Var,
    x_local: Var,
    x_global: Var,
    w_spatial: Var,
    w_channel: Var,
    w: &SfmVars,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    for v in [x_local, x_global] {
        if tape.shape(v) != shape.as_slice() {
            return Err(TensorError::dim("fuse", &shape, tape.shape(v)));
        }
    }
    let (c, h, wd) = (shape[0], shape[1], shape[2]);
    if tape.shape(w_channel) != [c, 1, 1] {
        return Err(TensorError::dim(
            "fuse channel weights",
            tape.shape(w_channel),
            &[c, 1, 1],
        ));
    }
    if tape.shape(w_spatial) != [1, h, wd] {
        return Err(TensorError::dim(
            "fuse spatial weights",
            tape.shape(w_spatial),
            &[1, h, wd],
        ));
    }
    let fl = tape.mul(w_channel, x_local)?;
    let fg = tape.mul(w_spatial, x_global)?;
    let sum = tape.add(fl, fg)?;
    let mixed = tape.conv2d(sum, w.fusion_w, Some(w.fusion_b), 1, 0)?;
    tape.add(x, mixed)
}

/// Full block forward.
pub fn sfm_forward(
    tape: &mut Tape,
    x: Var,
    w: &SfmVars,
    params: &SfmParams,
    mode: NormMode,
) -> Result<SfmTrace> {
    input_dims(tape, x, params.config.channels)?;
    let (local, bn1, bn2) = local_branch(tape, x, w, params, mode)?;
    let global = global_branch(tape, x, w, params)?;
    let spatial = spatial_guidance(tape, local, w)?;
    let channel = channel_guidance(tape, global, w)?;
    let output = fuse(tape, x, local, global, spatial, channel, w)?;
    Ok(SfmTrace {
        output,
        local,
        global,
        spatial,
        channel,
        bn1,
        bn2,
    })
}

impl SfmParams {
    /// Tensor-in, tensor-out forward. Running statistics are not touched.
    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.leaves(&mut tape);
        let xv = tape.leaf(x.clone());
        let trace = sfm_forward(&mut tape, xv, &w, self, mode)?;
        Ok(tape.value(trace.output).clone())
    }

    /// Folds the batch statistics of a train-mode pass into the running averages.
    pub fn update_running_stats(&mut self, tape: &Tape, trace: &SfmTrace) {
        let m = self.config.bn_momentum;
        let count = {
            let s = tape.shape(trace.bn1);
            s[1] * s[2]
        };
        for (node, slot) in [
            (trace.bn1, &mut self.bn1_running),
            (trace.bn2, &mut self.bn2_running),
        ] {
            if let (Some((mean, var)), Some(rs)) = (tape.batch_stats(node), slot.as_mut()) {
                rs.update(mean, var, count, m);
            }
        }
    }
}

/// Attention weights `softmax(N(q)·N(k)ᵀ / γ)` for one head, `q`,`k` of shape `N×d`.
pub fn attention_weights(q: &Tensor, k: &Tensor, gamma: f64, eps: f64) -> Result<Tensor> {
    if !(gamma > 0.0) {
        return Err(TensorError::Domain(format!(
            "temperature must be positive, got {gamma}"
        )));
    }
    let qn = ops::l2_normalize_rows(q, eps);
    let kn = ops::l2_normalize_rows(k, eps);
    let logits = ops::matmul(&qn, &ops::transpose(&kn)?)?;
    Ok(ops::softmax_rows(&logits.map(|v| v / gamma)))
}

/// Cosine attention over stacked heads: `q`,`k`,`v` are `heads×N×d`, `gamma` has one
/// entry per head.
pub fn cosine_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    gamma: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if q.ndim() != 3 || q.shape() != k.shape() || q.shape()[..2] != v.shape()[..2] || v.ndim() != 3
    {
        return Err(TensorError::dim("cosine_attention", q.shape(), v.shape()));
    }
    let (heads, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dv = v.shape()[2];
    if gamma.shape() != [heads] {
        return Err(TensorError::dim(
            "cosine_attention gamma",
            gamma.shape(),
            &[heads],
        ));
    }
    let mut out = Vec::with_capacity(heads * n * dv);
    for h in 0..heads {
        let slice = |t: &Tensor, w: usize| {
            Tensor::new(vec![n, w], t.data()[h * n * w..(h + 1) * n * w].to_vec())
        };
        let a = attention_weights(&slice(q, d)?, &slice(k, d)?, gamma.data()[h], eps)?;
        out.extend_from_slice(ops::matmul(&a, &slice(v, dv)?)?.data());
    }
    Tensor::new(vec![heads, n, dv], out)
}
