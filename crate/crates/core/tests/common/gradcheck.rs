//! Central finite-difference checks for graph ops and the decoder loss.

use sparsecap::autodiff::Graph;
use sparsecap::decoder::{
    CellKind, DecoderModel, Dims, ForwardConfig, LossNorm, Trainable,
};
use sparsecap::gating::GateSampling;
use sparsecap::{Rng, Tensor, Var};

pub const FD_EPS: f64 = 1e-6;
pub const MAX_REL_ERR: f64 = 1e-4;
/// Floor on the denominator of the relative error, so derivatives near zero
/// are compared on an absolute scale of `MAX_REL_ERR * REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_FLOOR)
}

pub struct CaseResult {
    pub name: String,
    pub max_rel_err: f64,
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Build,
}

fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi))
}

fn rt(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rand_tensor(rng, shape, -1.5, 1.5)
}

/// Values bounded away from zero so `abs` is differentiable at every point.
fn off_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_range(0.1, 1.5);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

fn dim(rng: &mut Rng) -> usize {
    1 + rng.below(4)
}

/// One randomly shaped instance of op number `which`.
fn op_case(which: usize, rng: &mut Rng) -> OpCase {
    let (m, n, k) = (dim(rng), dim(rng), dim(rng));
    match which {
        0 => OpCase {
            name: "matmul",
            inputs: vec![rt(rng, &[m, k]), rt(rng, &[k, n])],
            build: Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
        },
        1 => OpCase {
            name: "add",
            inputs: vec![rt(rng, &[m, n]), rt(rng, &[m, n])],
            build: Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
        },
        2 => OpCase {
            name: "sub",
            inputs: vec![rt(rng, &[m, n]), rt(rng, &[m, n])],
            build: Box::new(|g, v| g.sub(v[0], v[1]).unwrap()),
        },
        3 => OpCase {
            name: "mul",
            inputs: vec![rt(rng, &[m, n]), rt(rng, &[m, n])],
            build: Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
        },
        4 => OpCase {
            name: "sigmoid",
            inputs: vec![rt(rng, &[m, n])],
            build: Box::new(|g, v| g.sigmoid(v[0])),
        },
        5 => OpCase {
            name: "tanh",
            inputs: vec![rt(rng, &[m, n])],
            build: Box::new(|g, v| g.tanh(v[0])),
        },
        6 => OpCase {
            name: "abs",
            inputs: vec![off_zero(rng, &[m, n])],
            build: Box::new(|g, v| g.abs(v[0])),
        },
        7 => {
            let c = rng.uniform_range(-2.0, 2.0);
            OpCase {
                name: "scale",
                inputs: vec![rt(rng, &[m, n])],
                build: Box::new(move |g, v| g.scale(v[0], c)),
            }
        }
        8 => {
            let c = rng.uniform_range(-2.0, 2.0);
            OpCase {
                name: "add_scalar",
                inputs: vec![rt(rng, &[m, n])],
                build: Box::new(move |g, v| g.add_scalar(v[0], c)),
            }
        }
        9 => OpCase {
            name: "add_bias",
            inputs: vec![rt(rng, &[m, n]), rt(rng, &[n])],
            build: Box::new(|g, v| g.add_bias(v[0], v[1]).unwrap()),
        },
        10 => {
            let f = rt(rng, &[m, n]).into_data();
            OpCase {
                name: "mul_const",
                inputs: vec![rt(rng, &[m, n])],
                build: Box::new(move |g, v| g.mul_const(v[0], f.clone()).unwrap()),
            }
        }
        11 => OpCase {
            name: "concat",
            inputs: vec![rt(rng, &[m, n]), rt(rng, &[m, k])],
            build: Box::new(|g, v| g.concat(&[v[0], v[1]]).unwrap()),
        },
        12 => {
            let a = rng.below(n);
            let b = a + 1 + rng.below(n - a);
            OpCase {
                name: "slice_cols",
                inputs: vec![rt(rng, &[m, n])],
                build: Box::new(move |g, v| g.slice_cols(v[0], a, b).unwrap()),
            }
        }
        13 => OpCase {
            name: "softmax",
            inputs: vec![rt(rng, &[m, n + 1])],
            build: Box::new(|g, v| g.softmax(v[0])),
        },
        14 => {
            let ids: Vec<usize> = (0..k).map(|_| rng.below(m)).collect();
            OpCase {
                name: "lookup",
                inputs: vec![rt(rng, &[m, n])],
                build: Box::new(move |g, v| g.lookup(v[0], &ids).unwrap()),
            }
        }
        15 => {
            let v_ = n + 1;
            let targets: Vec<usize> = (0..m).map(|_| rng.below(v_)).collect();
            let weights: Vec<f64> = (0..m).map(|_| rng.uniform_range(0.0, 1.0)).collect();
            OpCase {
                name: "cross_entropy",
                inputs: vec![rt(rng, &[m, v_])],
                build: Box::new(move |g, v| g.cross_entropy(v[0], &targets, &weights).unwrap()),
            }
        }
        16 => OpCase {
            name: "sum",
            inputs: vec![rt(rng, &[m, n])],
            build: Box::new(|g, v| g.sum(v[0])),
        },
        17 => OpCase {
            name: "sum_squares",
            inputs: vec![rt(rng, &[m, n])],
            build: Box::new(|g, v| g.sum_squares(v[0])),
        },
        18 => OpCase {
            name: "reshape",
            inputs: vec![rt(rng, &[m, n])],
            build: Box::new(move |g, v| g.reshape(v[0], &[n, m]).unwrap()),
        },
        19 => OpCase {
            name: "add_grouped",
            inputs: vec![rt(rng, &[m * k, n]), rt(rng, &[m, n])],
            build: Box::new(|g, v| g.add_grouped(v[0], v[1]).unwrap()),
        },
        20 => OpCase {
            name: "weighted_sum",
            inputs: vec![rt(rng, &[m, k]), rt(rng, &[m * k, n])],
            build: Box::new(|g, v| g.weighted_sum(v[0], v[1]).unwrap()),
        },
        21 => {
            let seed = rng.below(1 << 30) as u64;
            let rate = rng.uniform_range(0.1, 0.6);
            OpCase {
                name: "dropout",
                inputs: vec![rt(rng, &[m, n])],
                build: Box::new(move |g, v| g.dropout(v[0], rate, true, &mut Rng::new(seed)).unwrap()),
            }
        }
        _ => unreachable!(),
    }
}

pub const N_OPS: usize = 22;

/// Reduces an op output to a scalar through fixed random weights so every
/// output element contributes a distinct upstream gradient.
fn scalar_of(g: &mut Graph, out: Var, proj: &[f64]) -> Var {
    let w = g.mul_const(out, proj.to_vec()).unwrap();
    g.sum(w)
}

fn run_op_case(case: &OpCase, seed: u64) -> f64 {
    let out_len = {
        let mut g = Graph::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (case.build)(&mut g, &vars);
        g.value(out).len()
    };
    let mut prng = Rng::new(seed);
    let proj: Vec<f64> = (0..out_len).map(|_| prng.uniform_range(-1.0, 1.0)).collect();
    let eval = |inputs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (case.build)(&mut g, &vars);
        let s = scalar_of(&mut g, out, &proj);
        g.value(s).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars);
    let s = scalar_of(&mut g, out, &proj);
    g.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad_tensor(v);
        for j in 0..case.inputs[i].len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += FD_EPS;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= FD_EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// `n` randomized op cases cycling through every differentiable op.
pub fn op_cases(seed: u64, n: usize) -> Vec<CaseResult> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let case = op_case(i % N_OPS, &mut rng);
            CaseResult {
                name: case.name.to_string(),
                max_rel_err: run_op_case(&case, seed.wrapping_add(i as u64)),
            }
        })
        .collect()
}

/// Straight-through node: forward is the sample, backward is the identity.
/// Returns the largest deviation of the passed-through gradient.
pub fn straight_through_case(rng: &mut Rng) -> f64 {
    let (m, n) = (dim(rng), dim(rng));
    let x = rand_tensor(rng, &[m, n], -1.0, 1.0);
    let sample = Tensor::from_fn(&[m, n], |_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 });
    let proj: Vec<f64> = (0..m * n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let mut g = Graph::new();
    let xv = g.param(x);
    let st = g.straight_through(xv, sample.clone()).unwrap();
    assert_eq!(g.value(st), &sample);
    let s = scalar_of(&mut g, st, &proj);
    g.backward(s).unwrap();
    g.grad(xv)
        .unwrap()
        .iter()
        .zip(&proj)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Full teacher-forced decoder loss on a tiny random model (with gates held
/// at their maximum-likelihood masks): every weight, bias and encoder
/// parameter is checked.
pub fn decoder_case(seed: u64, cell: CellKind, gated: bool) -> CaseResult {
    let mut rng = Rng::new(seed);
    let dims = Dims {
        rnn: 2 + rng.below(3),
        word: 2 + rng.below(3),
        attn: 2 + rng.below(3),
        vocab: 6,
        feat: 2 + rng.below(2),
        raw: 3,
    };
    let mut model = DecoderModel::new(dims, cell, &mut rng);
    if gated {
        model.add_gates(0.0);
        for layer in model.layers.iter_mut() {
            let gate = layer.gate.as_mut().unwrap();
            *gate = Tensor::from_fn(gate.shape(), |_| rng.uniform_range(-2.0, 2.0));
        }
    }
    let positions = 2 + rng.below(3);
    let images: Vec<Tensor> = (0..2)
        .map(|_| rand_tensor(&mut rng, &[positions, dims.raw], -1.0, 1.0))
        .collect();
    let captions: Vec<Vec<usize>> = (0..2)
        .map(|_| {
            let len = 1 + rng.below(4);
            let mut c: Vec<usize> = (0..len).map(|_| 3 + rng.below(3)).collect();
            c.push(2);
            c
        })
        .collect();
    let decay = if rng.bernoulli(0.5) { 0.01 } else { 0.0 };
    let all = Trainable {
        weights: true,
        gates: false,
        encoder: true,
    };
    let loss_of = |m: &DecoderModel, g: &mut Graph| {
        let mut r = Rng::new(0);
        let b = m.bind(g, all, GateSampling::MaxLikelihood, &mut r).unwrap();
        let refs: Vec<&Tensor> = images.iter().collect();
        let enc = m.encode(g, &b, &refs).unwrap();
        let caps: Vec<&[usize]> = captions.iter().map(|c| c.as_slice()).collect();
        let l = m
            .caption_loss_vars(g, &b, &enc, &caps, LossNorm::PerToken, decay, &ForwardConfig::EVAL, &mut r)
            .unwrap();
        (b, l)
    };
    let mut g = Graph::new();
    let (b, loss) = loss_of(&model, &mut g);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for &(id, var) in &b.params {
        let analytic = g.grad_tensor(var);
        let len = model.param(id).unwrap().len();
        for j in 0..len {
            let value_at = |delta: f64| {
                let mut m = model.clone();
                m.param_mut(id).unwrap().data_mut()[j] += delta;
                let mut g = Graph::new();
                let (_, l) = loss_of(&m, &mut g);
                g.value(l).data()[0]
            };
            let numeric = (value_at(FD_EPS) - value_at(-FD_EPS)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    CaseResult {
        name: format!("decoder_{}{}", cell.as_str(), if gated { "_gated" } else { "" }),
        max_rel_err: worst,
    }
}
