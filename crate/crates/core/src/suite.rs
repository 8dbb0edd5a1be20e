//! The standard gradient-check suite: every differentiable tape op, the
//! detection losses and the end-to-end fusion block, each over several seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gradcheck::grad_check_with;
use crate::loss;
use crate::ops::{Activation, NormMode, RunningStats};
use crate::sfm::{cosine_attention_head, sfm_forward, SfmConfig, SfmParams};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseGroup {
    Op,
    Loss,
    Block,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seeds: u64,
    pub base_seed: u64,
    pub h: f64,
    pub op_tolerance: f64,
    pub loss_tolerance: f64,
    pub block_tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seeds: 10,
            base_seed: 0,
            h: 1e-5,
            op_tolerance: 1e-5,
            loss_tolerance: 1e-6,
            block_tolerance: 1e-4,
        }
    }
}

impl SuiteConfig {
    pub fn tolerance(&self, g: CaseGroup) -> f64 {
        match g {
            CaseGroup::Op => self.op_tolerance,
            CaseGroup::Loss => self.loss_tolerance,
            CaseGroup::Block => self.block_tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub group: CaseGroup,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub coordinates: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }

    /// Case with the largest error relative to its tolerance.
    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases.iter().max_by(|a, b| {
            (a.max_rel_error / a.tolerance).total_cmp(&(b.max_rel_error / b.tolerance))
        })
    }
}

type Objective = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

struct Case {
    name: &'static str,
    group: CaseGroup,
    build: fn(&mut ChaCha8Rng) -> (Tensor, Objective),
}

/// `Σ r ⊙ y` with fixed irregular weights `r`, so every output element matters.
fn probe(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let r: Vec<f64> = (0..numel(&shape))
        .map(|i| (0.91 * i as f64 + 0.3).sin() + 0.05)
        .collect();
    let rv = tape.leaf(Tensor::new(shape, r)?);
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Builds θ from segments; segment `i` has `shapes[i]` and is sampled by `gen`.
fn theta(
    rng: &mut ChaCha8Rng,
    shapes: &[&[usize]],
    gen: impl Fn(&mut ChaCha8Rng, usize) -> f64,
) -> Tensor {
    let mut data = Vec::new();
    for (i, s) in shapes.iter().enumerate() {
        for _ in 0..numel(s) {
            data.push(gen(rng, i));
        }
    }
    Tensor::from_vec(data)
}

/// Carves consecutive views of `shapes` out of the flat leaf `x`.
fn split(tape: &mut Tape, x: Var, shapes: &[Vec<usize>]) -> Result<Vec<Var>> {
    let mut off = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for s in shapes {
        out.push(tape.view(x, off, s)?);
        off += numel(s);
    }
    Ok(out)
}

fn normal(rng: &mut ChaCha8Rng, _: usize) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}

fn positive(rng: &mut ChaCha8Rng, _: usize) -> f64 {
    rng.random_range(0.5..2.0)
}

/// A unary elementwise case over a `3×4` input.
macro_rules! unary {
    ($gen:expr, |$t:ident, $a:ident| $body:expr) => {
        |rng: &mut ChaCha8Rng| {
            let shape = vec![3usize, 4];
            let th = theta(rng, &[&shape], $gen);
            let f: Objective = Box::new(move |$t: &mut Tape, x: Var| {
                let $a = $t.reshape(x, &shape)?;
                let y = $body;
                probe($t, y)
            });
            (th, f)
        }
    };
}

/// A binary case: `a` of `sa`, `b` of `sb`.
macro_rules! binary {
    ($sa:expr, $sb:expr, $gen:expr, |$t:ident, $a:ident, $b:ident| $body:expr) => {
        |rng: &mut ChaCha8Rng| {
            let (sa, sb): (Vec<usize>, Vec<usize>) = ($sa, $sb);
            let th = theta(rng, &[&sa, &sb], $gen);
            let f: Objective = Box::new(move |$t: &mut Tape, x: Var| {
                let v = split($t, x, &[sa.clone(), sb.clone()])?;
                let ($a, $b) = (v[0], v[1]);
                let y = $body;
                probe($t, y)
            });
            (th, f)
        }
    };
}

/// Values kept at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, kinks: &[f64], gap: f64) -> f64 {
    loop {
        let v = normal(rng, 0);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            return v;
        }
    }
}

fn conv_case(
    rng: &mut ChaCha8Rng,
    c_in: usize,
    c_out: usize,
    hw: usize,
    k: usize,
    stride: usize,
    pad: usize,
    bias: bool,
) -> (Tensor, Objective) {
    let sx = vec![c_in, hw, hw];
    let sk = vec![c_out, c_in, k, k];
    let mut shapes = vec![sx, sk];
    if bias {
        shapes.push(vec![c_out]);
    }
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let th = theta(rng, &refs, normal);
    let f: Objective = Box::new(move |t: &mut Tape, x: Var| {
        let v = split(t, x, &shapes)?;
        let b = v.get(2).copied();
        let y = t.conv2d(v[0], v[1], b, stride, pad)?;
        probe(t, y)
    });
    (th, f)
}

fn block_case(rng: &mut ChaCha8Rng, mode: NormMode) -> (Tensor, Objective) {
    let cfg = SfmConfig::new(4).with_heads(2).with_se_reduction(2);
    let mut params = SfmParams::init(&cfg, rng).expect("valid config");
    // Non-zero fusion so the whole block contributes to the objective.
    params.weights.fusion_w = randn(rng, params.weights.fusion_w.shape()).map(|v| 0.5 * v);
    params.weights.fusion_b = randn(rng, params.weights.fusion_b.shape());
    params.weights.log_gamma = Tensor::uniform(params.weights.log_gamma.shape(), -1.0, 0.5, rng);
    for g in [
        &mut params.weights.local_bn1_gain,
        &mut params.weights.ln1_gain,
    ] {
        *g = Tensor::uniform(g.shape(), 0.5, 1.5, rng);
    }
    if mode == NormMode::Infer {
        let stats = |rng: &mut ChaCha8Rng| RunningStats {
            mean: Tensor::from_vec((0..4).map(|_| normal(rng, 0) * 0.1).collect()),
            var: Tensor::from_vec((0..4).map(|_| rng.random_range(0.5..2.0)).collect()),
        };
        params.bn1_running = Some(stats(rng));
        params.bn2_running = Some(stats(rng));
    }
    let sx = vec![4usize, 3, 3];
    let x0 = randn(rng, &sx);
    let mut data = x0.into_data();
    data.extend_from_slice(params.flatten().data());
    let th = Tensor::from_vec(data);
    let f: Objective = Box::new(move |t: &mut Tape, x: Var| {
        let xv = t.view(x, 0, &sx)?;
        let flat = t.view(x, numel(&sx), &[params.param_count()])?;
        let w = SfmParams::views(&params.config, t, flat)?;
        let tr = sfm_forward(t, xv, &w, &params, mode)?;
        probe(t, tr.output)
    });
    (th, f)
}

/// Corner boxes with positive size in `[0.5, 3]` around random centres.
fn random_boxes(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(4 * m);
    for _ in 0..m {
        let (cx, cy) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
        let (w, h) = (rng.random_range(0.5..3.0), rng.random_range(0.5..3.0));
        v.extend([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]);
    }
    v
}

fn cases() -> Vec<Case> {
    use CaseGroup::*;
    vec![
        Case {
            name: "matmul",
            group: Op,
            build: binary!(vec![3, 4], vec![4, 2], normal, |t, a, b| t.matmul(a, b)?),
        },
        Case {
            name: "transpose",
            group: Op,
            build: unary!(normal, |t, a| t.transpose(a)?),
        },
        Case {
            name: "reshape",
            group: Op,
            build: unary!(normal, |t, a| t.reshape(a, &[2, 6])?),
        },
        Case {
            name: "add",
            group: Op,
            build: binary!(vec![3, 4], vec![4], normal, |t, a, b| t.add(a, b)?),
        },
        Case {
            name: "sub",
            group: Op,
            build: binary!(vec![2, 3, 4], vec![3, 1], normal, |t, a, b| t.sub(a, b)?),
        },
        Case {
            name: "mul",
            group: Op,
            build: binary!(vec![3, 4], vec![3, 1], normal, |t, a, b| t.mul(a, b)?),
        },
        Case {
            name: "div",
            group: Op,
            build: binary!(
                vec![3, 4],
                vec![4],
                |r, i| if i == 0 { normal(r, i) } else { positive(r, i) },
                |t, a, b| t.div(a, b)?
            ),
        },
        Case {
            name: "scale",
            group: Op,
            build: unary!(normal, |t, a| t.scale(a, -1.7)),
        },
        Case {
            name: "exp",
            group: Op,
            build: unary!(normal, |t, a| t.exp(a)),
        },
        Case {
            name: "log",
            group: Op,
            build: unary!(positive, |t, a| t.log(a)),
        },
        Case {
            name: "sqrt",
            group: Op,
            build: unary!(positive, |t, a| t.sqrt(a)),
        },
        Case {
            name: "square",
            group: Op,
            build: unary!(normal, |t, a| t.square(a)),
        },
        Case {
            name: "atan",
            group: Op,
            build: unary!(normal, |t, a| t.atan(a)),
        },
        Case {
            name: "silu",
            group: Op,
            build: unary!(normal, |t, a| t.activation(Activation::Silu, a)),
        },
        Case {
            name: "gelu",
            group: Op,
            build: unary!(normal, |t, a| t.activation(Activation::Gelu, a)),
        },
        Case {
            name: "sigmoid",
            group: Op,
            build: unary!(normal, |t, a| t.activation(Activation::Sigmoid, a)),
        },
        Case {
            name: "clamp",
            group: Op,
            build: unary!(|r, _| away_from(r, &[-0.5, 0.5], 1e-3), |t, a| t
                .clamp(a, -0.5, 0.5)),
        },
        Case {
            name: "minimum",
            group: Op,
            build: |rng| {
                let s = vec![3usize, 4];
                let a: Vec<f64> = (0..12).map(|_| normal(rng, 0)).collect();
                let mut data = a.clone();
                data.extend(a.iter().map(|&x| away_from(rng, &[x], 1e-3)));
                let f: Objective = Box::new(move |t, x| {
                    let v = split(t, x, &[s.clone(), s.clone()])?;
                    let y = t.minimum(v[0], v[1])?;
                    probe(t, y)
                });
                (Tensor::from_vec(data), f)
            },
        },
        Case {
            name: "maximum",
            group: Op,
            build: |rng| {
                let s = vec![3usize, 4];
                let a: Vec<f64> = (0..12).map(|_| normal(rng, 0)).collect();
                let mut data = a.clone();
                data.extend(a.iter().map(|&x| away_from(rng, &[x], 1e-3)));
                let f: Objective = Box::new(move |t, x| {
                    let v = split(t, x, &[s.clone(), s.clone()])?;
                    let y = t.maximum(v[0], v[1])?;
                    probe(t, y)
                });
                (Tensor::from_vec(data), f)
            },
        },
        Case {
            name: "softmax_rows",
            group: Op,
            build: unary!(normal, |t, a| t.softmax_rows(a)),
        },
        Case {
            name: "layer_norm",
            group: Op,
            build: |rng| {
                let (sx, sg) = (vec![4usize, 6], vec![6usize]);
                let th = theta(rng, &[&sx, &sg, &sg], |r, i| match i {
                    1 => positive(r, i),
                    _ => normal(r, i),
                });
                let f: Objective = Box::new(move |t, x| {
                    let v = split(t, x, &[sx.clone(), sg.clone(), sg.clone()])?;
                    let y = t.layer_norm(v[0], v[1], v[2], crate::ops::LN_EPS)?;
                    probe(t, y)
                });
                (th, f)
            },
        },
        Case {
            name: "batch_norm_train",
            group: Op,
            build: |rng| {
                let (sx, sg) = (vec![3usize, 4, 4], vec![3usize]);
                let th = theta(rng, &[&sx, &sg, &sg], |r, i| match i {
                    1 => positive(r, i),
                    _ => normal(r, i),
                });
                let f: Objective = Box::new(move |t, x| {
                    let v = split(t, x, &[sx.clone(), sg.clone(), sg.clone()])?;
                    let y =
                        t.batch_norm(v[0], v[1], v[2], None, NormMode::Train, crate::ops::BN_EPS)?;
                    probe(t, y)
                });
                (th, f)
            },
        },
        Case {
            name: "batch_norm_infer",
            group: Op,
            build: |rng| {
                let (sx, sg) = (vec![3usize, 4, 4], vec![3usize]);
                let th = theta(rng, &[&sx, &sg, &sg], normal);
                let stats = RunningStats {
                    mean: Tensor::from_vec((0..3).map(|_| normal(rng, 0)).collect()),
                    var: Tensor::from_vec((0..3).map(|_| positive(rng, 0)).collect()),
                };
                let f: Objective = Box::new(move |t, x| {
                    let v = split(t, x, &[sx.clone(), sg.clone(), sg.clone()])?;
                    let y = t.batch_norm(
                        v[0],
                        v[1],
                        v[2],
                        Some(&stats),
                        NormMode::Infer,
                        crate::ops::BN_EPS,
                    )?;
                    probe(t, y)
                });
                (th, f)
            },
        },
        Case {
            name: "l2_normalize_rows",
            group: Op,
            build: unary!(normal, |t, a| t.l2_normalize_rows(a, crate::ops::L2_EPS)),
        },
        Case {
            name: "global_avg_pool",
            group: Op,
            build: |rng| {
                let s = vec![3usize, 4, 5];
                let th = theta(rng, &[&s], normal);
                let f: Objective = Box::new(move |t, x| {
                    let a = t.reshape(x, &s)?;
                    let sq = t.square(a);
                    let y = t.global_avg_pool(sq)?;
                    probe(t, y)
                });
                (th, f)
            },
        },
        Case {
            name: "conv2d_3x3",
            group: Op,
            build: |rng| conv_case(rng, 2, 3, 5, 3, 1, 1, false),
        },
        Case {
            name: "conv2d_3x3_stride2_bias",
            group: Op,
            build: |rng| conv_case(rng, 2, 2, 5, 3, 2, 1, true),
        },
        Case {
            name: "conv2d_1x1_bias",
            group: Op,
            build: |rng| conv_case(rng, 3, 2, 4, 1, 1, 0, true),
        },
        Case {
            name: "sum",
            group: Op,
            build: unary!(normal, |t, a| {
                let s = t.square(a);
                t.sum(s)
            }),
        },
        Case {
            name: "mean",
            group: Op,
            build: unary!(normal, |t, a| {
                let s = t.exp(a);
                t.mean(s)
            }),
        },
        Case {
            name: "view",
            group: Op,
            build: unary!(normal, |t, a| {
                let flat = t.reshape(a, &[12])?;
                let v = t.view(flat, 3, &[2, 3])?;
                t.square(v)
            }),
        },
        Case {
            name: "slice_cols",
            group: Op,
            build: unary!(normal, |t, a| {
                let s = t.slice_cols(a, 1, 3)?;
                t.square(s)
            }),
        },
        Case {
            name: "concat_cols",
            group: Op,
            build: binary!(vec![3, 2], vec![3, 3], normal, |t, a, b| {
                let c = t.concat_cols(&[b, a, b])?;
                t.square(c)
            }),
        },
        Case {
            name: "gather",
            group: Op,
            build: unary!(normal, |t, a| {
                let g = t.gather(a, &[11, 0, 5, 5, 7])?;
                t.square(g)
            }),
        },
        Case {
            name: "cosine_attention",
            group: Op,
            build: |rng| {
                let s = vec![5usize, 3];
                let th = theta(rng, &[&s, &s, &s, &[1]], |r, i| {
                    if i == 3 {
                        r.random_range(-1.0..0.5)
                    } else {
                        normal(r, i)
                    }
                });
                let f: Objective = Box::new(move |t, x| {
                    let v = split(t, x, &[s.clone(), s.clone(), s.clone(), vec![1]])?;
                    let y = cosine_attention_head(t, v[0], v[1], v[2], v[3], crate::ops::L2_EPS)?;
                    probe(t, y)
                });
                (th, f)
            },
        },
        Case {
            name: "ciou_loss",
            group: Loss,
            build: |rng| {
                let th = Tensor::from_vec([random_boxes(rng, 3), random_boxes(rng, 3)].concat());
                let f: Objective = Box::new(|t, x| {
                    let p = t.view(x, 0, &[3, 4])?;
                    let g = t.view(x, 12, &[3, 4])?;
                    let c = loss::ciou_tape(t, p, g)?;
                    Ok(t.sum(c))
                });
                (th, f)
            },
        },
        Case {
            name: "bce_loss",
            group: Loss,
            build: |rng| {
                let th = Tensor::uniform(&[8], 0.05, 0.95, rng);
                let targets =
                    Tensor::from_vec((0..8).map(|i| [0.0, 1.0, rng.random()][i % 3]).collect());
                let f: Objective = Box::new(move |t, x| loss::bce_tape(t, x, &targets));
                (th, f)
            },
        },
        Case {
            name: "dfl_loss",
            group: Loss,
            build: |rng| {
                let th = randn(rng, &[4 * loss::DEFAULT_BINS]);
                let ys: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..15.0)).collect();
                let f: Objective = Box::new(move |t, x| {
                    let l = t.reshape(x, &[4, loss::DEFAULT_BINS])?;
                    loss::dfl_tape(t, l, &ys)
                });
                (th, f)
            },
        },
        Case {
            name: "sfm_block_train",
            group: Block,
            build: |rng| block_case(rng, NormMode::Train),
        },
        Case {
            name: "sfm_block_infer",
            group: Block,
            build: |rng| block_case(rng, NormMode::Infer),
        },
    ]
}

pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs the suite. With `fault` set, the analytic gradients come from a tape
/// whose backward for that op kind has its sign flipped.
pub fn run_grad_suite(cfg: &SuiteConfig, fault: Option<OpKind>) -> Result<SuiteReport> {
    let mut out = Vec::new();
    for case in cases() {
        let tol = cfg.tolerance(case.group);
        let mut worst = (0.0f64, cfg.base_seed);
        let mut coordinates = 0;
        for k in 0..cfg.seeds {
            let seed = cfg.base_seed + k;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (th, f) = (case.build)(&mut rng);
            let r = grad_check_with(|t, x| f(t, x), &th, cfg.h, fault)?;
            coordinates = r.coordinates;
            if r.max_rel_error > worst.0 || k == 0 {
                worst = (r.max_rel_error, seed);
            }
        }
        out.push(CaseResult {
            name: case.name.to_string(),
            group: case.group,
            tolerance: tol,
            max_rel_error: worst.0,
            worst_seed: worst.1,
            coordinates,
            passed: worst.0 <= tol,
        });
    }
    Ok(SuiteReport { cases: out })
}
