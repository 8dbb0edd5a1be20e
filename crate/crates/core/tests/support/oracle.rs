//! Brute-force loop implementations of the kernels and the fusion block,
//! plus sweeps that compare the library against them. Sweeps panic on the
//! first mismatch.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfmkit_core::ops::{self, NormMode, RunningStats};
use sfmkit_core::sfm::{self, SfmConfig, SfmParams};
use sfmkit_core::{Tape, Tensor};

pub const TOL: f64 = 1e-12;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol * 1f64.max(y.abs()),
            "{what}[{i}]: {x} vs {y}"
        );
    }
}

// ------------------------------------------------------------ scalar oracles

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

// ------------------------------------------------------------ tensor oracles

/// `C×H×W` convolution straight from the definition.
pub fn conv_oracle(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: &[f64],
    (o, ks): (usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - ks) / stride + 1;
    let wo = (w + 2 * pad - ks) / stride + 1;
    let mut y = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for i in 0..ho {
            for j in 0..wo {
                let mut s = bias.map_or(0.0, |b| b[oc]);
                for ic in 0..c {
                    for u in 0..ks {
                        for v in 0..ks {
                            let yy = (i * stride + u) as isize - pad as isize;
                            let xx = (j * stride + v) as isize - pad as isize;
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            s += k[((oc * c + ic) * ks + u) * ks + v]
                                * x[(ic * h + yy as usize) * w + xx as usize];
                        }
                    }
                }
                y[(oc * ho + i) * wo + j] = s;
            }
        }
    }
    (y, ho, wo)
}

pub fn matmul_oracle(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                c[i * m + j] += a[i * k + t] * b[t * m + j];
            }
        }
    }
    c
}

pub fn gap_oracle(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..c)
        .map(|k| x[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}

/// Row-wise two-pass normalization over groups of `n`.
pub fn normalize_groups(
    x: &[f64],
    n: usize,
    eps: f64,
    mean_var: Option<(&[f64], &[f64])>,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for (g, row) in x.chunks(n).enumerate() {
        let (m, v) = match mean_var {
            Some((m, v)) => (m[g], v[g]),
            None => {
                let m = row.iter().sum::<f64>() / n as f64;
                (
                    m,
                    row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n as f64,
                )
            }
        };
        out.extend(row.iter().map(|a| (a - m) / (v + eps).sqrt()));
    }
    out
}

/// One head of cosine attention, `N×d` inputs.
pub fn attention_oracle(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    d: usize,
    dv: usize,
    gamma: f64,
) -> Vec<f64> {
    let unit = |r: &[f64]| {
        let norm = r.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        r.iter().map(|a| a / norm).collect::<Vec<_>>()
    };
    let qn: Vec<Vec<f64>> = q.chunks(d).map(unit).collect();
    let kn: Vec<Vec<f64>> = k.chunks(d).map(unit).collect();
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| qn[i].iter().zip(&kn[j]).map(|(a, b)| a * b).sum::<f64>() / gamma)
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            for t in 0..dv {
                out[i * dv + t] += e[j] / z * v[j * dv + t];
            }
        }
    }
    out
}

// ------------------------------------------------------------- block oracle

pub struct Block<'a> {
    pub p: &'a SfmParams,
}

impl Block<'_> {
    pub fn t(&self, name: &str) -> &[f64] {
        self.p
            .weights
            .entries()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.data())
            .unwrap()
    }

    pub fn local(&self, x: &[f64], c: usize, h: usize, w: usize, mode: NormMode) -> Vec<f64> {
        let eps = self.p.config.bn_eps;
        let mut a = x.to_vec();
        for (conv, gain, bias, running) in [
            (
                "local.conv1.weight",
                "local.bn1.gain",
                "local.bn1.bias",
                &self.p.bn1_running,
            ),
            (
                "local.conv2.weight",
                "local.bn2.gain",
                "local.bn2.bias",
                &self.p.bn2_running,
            ),
        ] {
            let (y, _, _) = conv_oracle(&a, (c, h, w), self.t(conv), (c, 3), None, 1, 1);
            let stats = match mode {
                NormMode::Train => None,
                NormMode::Infer => {
                    let r = running.as_ref().unwrap();
                    Some((r.mean.data(), r.var.data()))
                }
            };
            let n = normalize_groups(&y, h * w, eps, stats);
            a = n
                .iter()
                .enumerate()
                .map(|(i, v)| silu(v * self.t(gain)[i / (h * w)] + self.t(bias)[i / (h * w)]))
                .collect();
        }
        a
    }

    pub fn linear(&self, x: &[f64], n: usize, k: usize, m: usize, w: &str, b: &str) -> Vec<f64> {
        let mut y = matmul_oracle(x, self.t(w), n, k, m);
        for (i, v) in y.iter_mut().enumerate() {
            *v += self.t(b)[i % m];
        }
        y
    }

    pub fn layer_norm(&self, x: &[f64], c: usize, g: &str, b: &str) -> Vec<f64> {
        normalize_groups(x, c, self.p.config.ln_eps, None)
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.t(g)[i % c] + self.t(b)[i % c])
            .collect()
    }

    pub fn global(&self, x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let n = h * w;
        let mut tok = vec![0.0; n * c];
        for ch in 0..c {
            for p in 0..n {
                tok[p * c + ch] = x[ch * n + p];
            }
        }
        let ln = self.layer_norm(&tok, c, "global.ln1.gain", "global.ln1.bias");
        let q = self.linear(&ln, n, c, c, "global.attn.wq", "global.attn.bq");
        let k = self.linear(&ln, n, c, c, "global.attn.wk", "global.attn.bk");
        let v = self.linear(&ln, n, c, c, "global.attn.wv", "global.attn.bv");
        let heads = self.p.config.heads;
        let d = c / heads;
        let mut merged = vec![0.0; n * c];
        for hd in 0..heads {
            let cols = |m: &[f64]| -> Vec<f64> {
                (0..n)
                    .flat_map(|r| m[r * c + hd * d..r * c + (hd + 1) * d].to_vec())
                    .collect()
            };
            let gamma = self.t("global.attn.log_gamma")[hd].exp();
            let o = attention_oracle(&cols(&q), &cols(&k), &cols(&v), n, d, d, gamma);
            for r in 0..n {
                merged[r * c + hd * d..r * c + (hd + 1) * d]
                    .copy_from_slice(&o[r * d..(r + 1) * d]);
            }
        }
        let proj = self.linear(&merged, n, c, c, "global.attn.wo", "global.attn.bo");
        let t1: Vec<f64> = tok.iter().zip(&proj).map(|(a, b)| a + b).collect();
        let ln2 = self.layer_norm(&t1, c, "global.ln2.gain", "global.ln2.bias");
        let dh = self.p.config.ffn_hidden();
        let hid: Vec<f64> = self
            .linear(&ln2, n, c, dh, "global.ffn.w1", "global.ffn.b1")
            .into_iter()
            .map(gelu)
            .collect();
        let f = self.linear(&hid, n, dh, c, "global.ffn.w2", "global.ffn.b2");
        let t2: Vec<f64> = t1.iter().zip(&f).map(|(a, b)| a + b).collect();
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            for p in 0..n {
                out[ch * n + p] = t2[p * c + ch];
            }
        }
        out
    }

    pub fn spatial(&self, xl: &[f64], c: usize, n: usize) -> Vec<f64> {
        let wgt = self.t("spatial.conv.weight");
        let b = self.t("spatial.conv.bias")[0];
        (0..n)
            .map(|p| sigmoid(b + (0..c).map(|k| wgt[k] * xl[k * n + p]).sum::<f64>()))
            .collect()
    }

    pub fn channel(&self, xg: &[f64], c: usize, n: usize) -> Vec<f64> {
        let z = gap_oracle(xg, c, n);
        let s = self.p.config.se_hidden();
        let (w1, b1) = (self.t("channel.conv1.weight"), self.t("channel.conv1.bias"));
        let (w2, b2) = (self.t("channel.conv2.weight"), self.t("channel.conv2.bias"));
        let hid: Vec<f64> = (0..s)
            .map(|j| gelu(b1[j] + (0..c).map(|k| w1[j * c + k] * z[k]).sum::<f64>()))
            .collect();
        (0..c)
            .map(|k| sigmoid(b2[k] + (0..s).map(|j| w2[k * s + j] * hid[j]).sum::<f64>()))
            .collect()
    }

    pub fn fuse(
        &self,
        x: &[f64],
        xl: &[f64],
        xg: &[f64],
        ws: &[f64],
        wc: &[f64],
        c: usize,
        n: usize,
    ) -> Vec<f64> {
        let (wf, bf) = (self.t("fusion.conv.weight"), self.t("fusion.conv.bias"));
        let mut out = vec![0.0; c * n];
        for o in 0..c {
            for p in 0..n {
                let mut s = bf[o];
                for k in 0..c {
                    s += wf[o * c + k] * (wc[k] * xl[k * n + p] + ws[p] * xg[k * n + p]);
                }
                out[o * n + p] = x[o * n + p] + s;
            }
        }
        out
    }
}

pub fn randomized_params(cfg: &SfmConfig, r: &mut ChaCha8Rng) -> SfmParams {
    let mut p = SfmParams::init(cfg, r).unwrap();
    for (name, t) in p.weights.entries_mut() {
        let scale = if name.ends_with("log_gamma") {
            0.5
        } else {
            0.7
        };
        *t = Tensor::randn(t.shape(), scale, r);
        if name.ends_with(".gain") {
            *t = t.map(|v| 1.0 + 0.3 * v);
        }
    }
    let c = cfg.channels;
    p.bn1_running = Some(RunningStats {
        mean: Tensor::randn(&[c], 0.3, r),
        var: Tensor::uniform(&[c], 0.5, 2.0, r),
    });
    p.bn2_running = Some(RunningStats {
        mean: Tensor::randn(&[c], 0.3, r),
        var: Tensor::uniform(&[c], 0.5, 2.0, r),
    });
    p
}

pub fn heads_for(c: usize) -> usize {
    [3, 2, 1]
        .into_iter()
        .find(|h| c.is_multiple_of(*h))
        .unwrap()
}

// ------------------------------------------------------------------ sweeps

/// Direct and im2col convolution against the loop oracle for every `C,H,W ≤ 6`.
pub fn sweep_conv2d() {
    let mut r = rng(2);
    for c in 1..=6 {
        for h in 1..=6 {
            for w in 1..=6 {
                for &(o, ks, stride, pad, bias) in &[
                    (2, 3, 1, 1, false),
                    (3, 3, 1, 1, true),
                    (2, 1, 1, 0, true),
                    (2, 3, 2, 1, true),
                    (1, 3, 1, 0, false),
                ] {
                    let x = Tensor::randn(&[c, h, w], 1.0, &mut r);
                    let k = Tensor::randn(&[o, c, ks, ks], 1.0, &mut r);
                    let b = Tensor::randn(&[o], 1.0, &mut r);
                    let bref = bias.then_some(&b);
                    let valid = h + 2 * pad >= ks
                        && w + 2 * pad >= ks
                        && (h + 2 * pad - ks) % stride == 0
                        && (w + 2 * pad - ks) % stride == 0;
                    let got = ops::conv2d(&x, &k, bref, stride, pad);
                    if !valid {
                        assert!(
                            got.is_err(),
                            "expected a config error for {c}x{h}x{w} k{ks} s{stride}"
                        );
                        continue;
                    }
                    let got = got.unwrap();
                    let (y, ho, wo) = conv_oracle(
                        x.data(),
                        (c, h, w),
                        k.data(),
                        (o, ks),
                        bias.then_some(b.data()),
                        stride,
                        pad,
                    );
                    assert_eq!(got.shape(), [o, ho, wo]);
                    assert_close(got.data(), &y, TOL, "conv2d");
                    let alt = ops::conv2d_im2col(&x, &k, bref, stride, pad).unwrap();
                    assert_close(alt.data(), &y, TOL, "conv2d im2col");
                }
            }
        }
    }
}

/// Global average pooling for every `C,H,W ≤ 6`.
pub fn sweep_gap() {
    let mut r = rng(3);
    for c in 1..=6 {
        for h in 1..=6 {
            for w in 1..=6 {
                let x = Tensor::randn(&[c, h, w], 1.0, &mut r);
                let z = ops::global_avg_pool(&x).unwrap();
                assert_close(z.data(), &gap_oracle(x.data(), c, h * w), TOL, "gap");
            }
        }
    }
}

/// Multi-head cosine attention for up to 3 heads and `N,d ≤ 6`.
pub fn sweep_cosine_attention() {
    let mut r = rng(8);
    for heads in 1..=3 {
        for n in 1..=6 {
            for d in 1..=6 {
                let q = Tensor::randn(&[heads, n, d], 1.0, &mut r);
                let k = Tensor::randn(&[heads, n, d], 1.0, &mut r);
                let v = Tensor::randn(&[heads, n, d], 1.0, &mut r);
                let gamma = Tensor::uniform(&[heads], 0.2, 2.0, &mut r);
                let y = sfm::cosine_attention(&q, &k, &v, &gamma, ops::L2_EPS).unwrap();
                let mut want = Vec::new();
                for h in 0..heads {
                    let s = |t: &Tensor| t.data()[h * n * d..(h + 1) * n * d].to_vec();
                    want.extend(attention_oracle(
                        &s(&q),
                        &s(&k),
                        &s(&v),
                        n,
                        d,
                        d,
                        gamma.data()[h],
                    ));
                }
                assert_close(y.data(), &want, TOL, "cosine attention");
            }
        }
    }
}

/// Spatial and channel guidance plus fusion for every `C,H,W ≤ 6`.
pub fn sweep_guidance_and_fusion() {
    let mut r = rng(9);
    for c in 1..=6 {
        for h in 1..=6 {
            for w in 1..=6 {
                let cfg = SfmConfig::new(c)
                    .with_heads(heads_for(c))
                    .with_se_reduction(1);
                let p = randomized_params(&cfg, &mut r);
                let o = Block { p: &p };
                let x = Tensor::randn(&[c, h, w], 1.0, &mut r);
                let xl = Tensor::randn(&[c, h, w], 1.0, &mut r);
                let xg = Tensor::randn(&[c, h, w], 1.0, &mut r);

                let mut t = Tape::new();
                let wv = p.leaves(&mut t);
                let (xv, lv, gv) = (t.leaf(x.clone()), t.leaf(xl.clone()), t.leaf(xg.clone()));
                let ws = sfm::spatial_guidance(&mut t, lv, &wv).unwrap();
                let wc = sfm::channel_guidance(&mut t, gv, &wv).unwrap();
                let y = sfm::fuse(&mut t, xv, lv, gv, ws, wc, &wv).unwrap();

                let n = h * w;
                let ows = o.spatial(xl.data(), c, n);
                let owc = o.channel(xg.data(), c, n);
                assert_eq!(t.shape(ws), [1, h, w]);
                assert_eq!(t.shape(wc), [c, 1, 1]);
                assert_close(t.value(ws).data(), &ows, TOL, "spatial guidance");
                assert_close(t.value(wc).data(), &owc, TOL, "channel guidance");
                let oy = o.fuse(x.data(), xl.data(), xg.data(), &ows, &owc, c, n);
                assert_close(t.value(y).data(), &oy, TOL, "fusion");
            }
        }
    }
}

/// The whole block, both norm modes, for every `C,H,W ≤ 6`.
pub fn sweep_full_block() {
    let mut r = rng(10);
    for c in 1..=6 {
        for h in 1..=6 {
            for w in 1..=6 {
                let cfg = SfmConfig::new(c)
                    .with_heads(heads_for(c))
                    .with_se_reduction(if c % 2 == 0 { 2 } else { 1 });
                let p = randomized_params(&cfg, &mut r);
                let o = Block { p: &p };
                let x = Tensor::randn(&[c, h, w], 1.0, &mut r);
                for mode in [NormMode::Train, NormMode::Infer] {
                    let mut t = Tape::new();
                    let wv = p.leaves(&mut t);
                    let xv = t.leaf(x.clone());
                    let tr = sfm::sfm_forward(&mut t, xv, &wv, &p, mode).unwrap();
                    let n = h * w;
                    let xl = o.local(x.data(), c, h, w, mode);
                    let xg = o.global(x.data(), c, h, w);
                    assert_close(t.value(tr.local).data(), &xl, TOL, "local branch");
                    assert_close(t.value(tr.global).data(), &xg, TOL, "global branch");
                    let ws = o.spatial(&xl, c, n);
                    let wc = o.channel(&xg, c, n);
                    let y = o.fuse(x.data(), &xl, &xg, &ws, &wc, c, n);
                    assert_close(t.value(tr.output).data(), &y, TOL, "block output");
                }
            }
        }
    }
}

/// A freshly initialized block returns its input bit for bit (20 inputs).
pub fn sweep_zero_fusion_identity() {
    let mut r = rng(11);
    for i in 0..20 {
        let c = 2 + i % 5;
        let cfg = SfmConfig::new(c)
            .with_heads(heads_for(c))
            .with_se_reduction(1);
        let p = SfmParams::init(&cfg, &mut r).unwrap();
        let (h, w) = (r.random_range(1..=7), r.random_range(1..=7));
        let x = Tensor::randn(&[c, h, w], 2.0, &mut r);
        for mode in [NormMode::Train, NormMode::Infer] {
            let y = p.forward(&x, mode).unwrap();
            assert_eq!(y, x);
        }
    }
}
