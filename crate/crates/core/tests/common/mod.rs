//! Central finite-difference gradient oracle for the tape engine.
//!
//! Every case is evaluated in `f64`; the loss is rebuilt from scratch on a
//! non-tracking graph for each perturbed coordinate, so the oracle shares no
//! state with the backward pass it checks.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sharpscape_core::tensor::BatchNormMode;
use sharpscape_core::{Graph, NodeId, Result, Tensor};

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
/// Denominator floor: coordinates with |grad| below this are judged on the
/// absolute error `REL_TOL * REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-3;

type Build = fn(&mut Graph<f64>, &[NodeId], &Aux) -> Result<Built>;

/// Loss node plus the nodes whose values decide the piecewise-linear branch
/// taken (ReLU inputs and head-pool inputs).
pub struct Built {
    pub loss: NodeId,
    pub relu_inputs: Vec<NodeId>,
    pub pool_inputs: Vec<NodeId>,
}

impl From<NodeId> for Built {
    fn from(loss: NodeId) -> Self {
        Built {
            loss,
            relu_inputs: Vec::new(),
            pool_inputs: Vec::new(),
        }
    }
}

pub struct Aux {
    pub weights: Vec<Tensor<f64>>,
    pub labels: Vec<usize>,
    pub running: (Vec<f32>, Vec<f32>),
}

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub aux: Aux,
    pub build: Build,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            if v.abs() < 0.05 {
                0.05_f64.copysign(v) + v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Columns (last axis) with well separated means so the time max is stable.
fn separated_columns(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let w = *shape.last().unwrap();
    let planes: usize = shape[..shape.len() - 2].iter().product();
    let h = shape[shape.len() - 2];
    let mut data = Vec::with_capacity(planes * h * w);
    for _ in 0..planes {
        let mut order: Vec<usize> = (0..w).collect();
        for i in (1..w).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for _ in 0..h {
            for &o in &order {
                data.push(o as f64 * 0.2 + rng.gen_range(-0.05..0.05));
            }
        }
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn ws(g: &mut Graph<f64>, y: NodeId, aux: &Aux) -> Result<Built> {
    weighted_sum(g, y, aux).map(Built::from)
}

fn weighted_sum(g: &mut Graph<f64>, y: NodeId, aux: &Aux) -> Result<NodeId> {
    let r = g.constant(aux.weights[0].clone());
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn aux_for(rng: &mut ChaCha8Rng, out_shape: &[usize]) -> Aux {
    Aux {
        weights: vec![normal(rng, out_shape)],
        labels: Vec::new(),
        running: (Vec::new(), Vec::new()),
    }
}

pub const OP_KINDS: &[&str] = &[
    "matmul",
    "matmul_t",
    "conv2d",
    "add_bias",
    "add",
    "mul",
    "sum",
    "relu",
    "batchnorm2d_train",
    "batchnorm2d_eval",
    "mean_pool2",
    "global_pool",
    "softmax_cross_entropy",
    "reshape",
    "network3",
];

pub fn case(name: &str, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    match name {
        "matmul" => Case {
            name: "matmul",
            inputs: vec![normal(r, &[3, 4]), normal(r, &[4, 5])],
            aux: aux_for(r, &[3, 5]),
            build: |g, x, a| {
                let y = g.matmul(x[0], x[1])?;
                ws(g, y, a)
            },
        },
        "matmul_t" => Case {
            name: "matmul_t",
            inputs: vec![normal(r, &[3, 4]), normal(r, &[5, 4])],
            aux: aux_for(r, &[3, 5]),
            build: |g, x, a| {
                let y = g.matmul_t(x[0], x[1])?;
                ws(g, y, a)
            },
        },
        "conv2d" => Case {
            name: "conv2d",
            inputs: vec![normal(r, &[2, 2, 5, 6]), normal(r, &[3, 2, 3, 3])],
            aux: aux_for(r, &[2, 3, 5, 6]),
            build: |g, x, a| {
                let y = g.conv2d(x[0], x[1])?;
                ws(g, y, a)
            },
        },
        "add_bias" => Case {
            name: "add_bias",
            inputs: vec![normal(r, &[2, 3, 4, 5]), normal(r, &[3])],
            aux: aux_for(r, &[2, 3, 4, 5]),
            build: |g, x, a| {
                let y = g.add_bias(x[0], x[1])?;
                ws(g, y, a)
            },
        },
        "add" => Case {
            name: "add",
            inputs: vec![normal(r, &[3, 4]), normal(r, &[3, 4])],
            aux: aux_for(r, &[3, 4]),
            build: |g, x, a| {
                let y = g.add(x[0], x[1])?;
                ws(g, y, a)
            },
        },
        "mul" => Case {
            name: "mul",
            inputs: vec![normal(r, &[3, 4]), normal(r, &[3, 4])],
            aux: aux_for(r, &[3, 4]),
            build: |g, x, a| {
                let y = g.mul(x[0], x[1])?;
                ws(g, y, a)
            },
        },
        "sum" => Case {
            name: "sum",
            inputs: vec![normal(r, &[3, 4])],
            aux: aux_for(r, &[3, 4]),
            build: |g, x, a| {
                // sum(x * r) exercises sum with a non-constant upstream.
                let s = weighted_sum(g, x[0], a)?;
                let sq = g.mul(s, s)?;
                g.sum(sq).map(Built::from)
            },
        },
        "relu" => Case {
            name: "relu",
            inputs: vec![away_from_zero(r, &[4, 5])],
            aux: aux_for(r, &[4, 5]),
            build: |g, x, a| {
                let y = g.relu(x[0])?;
                ws(g, y, a)
            },
        },
        "batchnorm2d_train" => Case {
            name: "batchnorm2d_train",
            inputs: vec![normal(r, &[3, 2, 3, 4]), normal(r, &[2]), normal(r, &[2])],
            aux: aux_for(r, &[3, 2, 3, 4]),
            build: |g, x, a| {
                let y = g.batch_norm(x[0], x[1], x[2], BatchNormMode::Train)?;
                ws(g, y, a)
            },
        },
        "batchnorm2d_eval" => {
            let mut aux = aux_for(r, &[3, 2, 3, 4]);
            aux.running = (vec![0.3, -0.2], vec![1.7, 0.4]);
            Case {
                name: "batchnorm2d_eval",
                inputs: vec![normal(r, &[3, 2, 3, 4]), normal(r, &[2]), normal(r, &[2])],
                aux,
                build: |g, x, a| {
                    let mode = BatchNormMode::Eval {
                        running_mean: a.running.0.clone(),
                        running_var: a.running.1.clone(),
                    };
                    let y = g.batch_norm(x[0], x[1], x[2], mode)?;
                    ws(g, y, a)
                },
            }
        }
        "mean_pool2" => Case {
            name: "mean_pool2",
            inputs: vec![normal(r, &[2, 2, 5, 6])],
            aux: aux_for(r, &[2, 2, 2, 3]),
            build: |g, x, a| {
                let y = g.mean_pool2(x[0])?;
                ws(g, y, a)
            },
        },
        "global_pool" => Case {
            name: "global_pool",
            inputs: vec![separated_columns(r, &[2, 3, 4, 5])],
            aux: aux_for(r, &[2, 3]),
            build: |g, x, a| {
                let y = g.global_pool(x[0])?;
                ws(g, y, a)
            },
        },
        "softmax_cross_entropy" => {
            let inputs = vec![normal(r, &[4, 6])];
            let mut aux = aux_for(r, &[1]);
            aux.labels = (0..4).map(|_| r.gen_range(0..6)).collect();
            Case {
                name: "softmax_cross_entropy",
                inputs,
                aux,
                build: |g, x, a| g.softmax_cross_entropy(x[0], &a.labels).map(Built::from),
            }
        }
        "reshape" => Case {
            name: "reshape",
            inputs: vec![normal(r, &[2, 6])],
            aux: aux_for(r, &[3, 4]),
            build: |g, x, a| {
                let y = g.reshape(x[0], &[3, 4])?;
                ws(g, y, a)
            },
        },
        "network3" => {
            // conv -> bn -> relu -> pool -> conv -> relu -> head pool -> linear -> CE
            let x = normal(r, &[3, 1, 6, 8]);
            let scale = |t: Tensor<f64>, s: f64| {
                let shape = t.shape().to_vec();
                Tensor::new(shape, t.data().iter().map(|v| v * s).collect()).unwrap()
            };
            let inputs = vec![
                scale(normal(r, &[4, 1, 3, 3]), 0.5),
                normal(r, &[4]),
                normal(r, &[4]),
                scale(normal(r, &[3, 4, 3, 3]), 0.3),
                normal(r, &[5, 3]),
                normal(r, &[5]),
            ];
            let mut aux = aux_for(r, &[1]);
            aux.weights = vec![x];
            aux.labels = (0..3).map(|_| r.gen_range(0..5)).collect();
            Case {
                name: "network3",
                inputs,
                aux,
                build: |g, p, a| {
                    let x = g.constant(a.weights[0].clone());
                    let h = g.conv2d(x, p[0])?;
                    let r1 = g.batch_norm(h, p[1], p[2], BatchNormMode::Train)?;
                    let h = g.relu(r1)?;
                    let h = g.mean_pool2(h)?;
                    let r2 = g.conv2d(h, p[3])?;
                    let pooled = g.relu(r2)?;
                    let h = g.global_pool(pooled)?;
                    let h = g.matmul_t(h, p[4])?;
                    let h = g.add_bias(h, p[5])?;
                    Ok(Built {
                        loss: g.softmax_cross_entropy(h, &a.labels)?,
                        relu_inputs: vec![r1, r2],
                        pool_inputs: vec![pooled],
                    })
                },
            }
        }
        other => panic!("unknown gradient case {other}"),
    }
}

/// Branch signature: ReLU input signs and head-pool time argmaxes.
fn pattern(g: &Graph<f64>, built: &Built) -> Vec<usize> {
    let mut out = Vec::new();
    for id in &built.relu_inputs {
        out.extend(g.value(*id).data().iter().map(|&v| usize::from(v > 0.0)));
    }
    for id in &built.pool_inputs {
        let t = g.value(*id);
        let (h, w) = (t.shape()[2], t.shape()[3]);
        for plane in t.data().chunks(h * w) {
            let mut best = (f64::NEG_INFINITY, 0);
            for col in 0..w {
                let m: f64 = (0..h).map(|r| plane[r * w + col]).sum();
                if m > best.0 {
                    best = (m, col);
                }
            }
            out.push(best.1);
        }
    }
    out
}

fn eval_loss(case: &Case, inputs: &[Tensor<f64>]) -> (f64, Vec<usize>) {
    let mut g = Graph::<f64>::without_grad();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let built = (case.build)(&mut g, &ids, &case.aux).unwrap();
    (g.value(built.loss).data()[0], pattern(&g, &built))
}

pub struct GradReport {
    /// Largest per-coordinate relative error over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±h stencil crosses a ReLU or max kink; the function
    /// is not differentiable across the stencil there.
    pub skipped_kinks: usize,
}

/// Compares autodiff gradients with central differences for every input
/// coordinate of the case.
pub fn check(case: &Case) -> GradReport {
    let mut g = Graph::<f64>::new();
    let ids: Vec<NodeId> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let built = (case.build)(&mut g, &ids, &case.aux).unwrap();
    g.backward(built.loss).unwrap();
    let base = pattern(&g, &built);

    let mut report = GradReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for (i, id) in ids.iter().enumerate() {
        let analytic = g.grad(*id).unwrap().data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let (lp, pp) = eval_loss(case, &plus);
            let (lm, pm) = eval_loss(case, &minus);
            if pp != base || pm != base {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_rel_error = report.max_rel_error.max((a - numeric).abs() / denom);
            report.checked += 1;
        }
    }
    report
}
