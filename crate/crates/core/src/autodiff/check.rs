//! Gradient checking against central finite differences.
//!
//! The graph under test is built once with f32 tensors, then replayed in f64
//! for the finite-difference probes, so the oracle's own rounding noise stays
//! far below the 1e-4 tolerance. The analytic side is the production f32
//! backward pass; its rounding shows up in the reported error, which is the
//! point: the check certifies the gradients training actually uses.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_for;

use super::{kernels, Node, Op, Tape, Tensor};

const FD_STEP: f64 = 1e-4;

/// Guarded relative error. The floor keeps entries that are tiny in both
/// views from dividing noise by noise.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-2)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.entries_checked > 0
    }
}

/// Compare `backward()` to central finite differences on every entry of every
/// leaf. `build` receives the registered leaves and must return a scalar loss.
pub fn grad_check<F>(name: &str, seed: u64, shapes: &[Vec<usize>], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    grad_check_opts(name, seed, shapes, None, build)
}

/// As [`grad_check`], with an optional fault injection: the analytic gradient
/// of the first leaf is scaled by `corrupt`, which a working harness must
/// flag. Used by the self-test that proves the checker can fail.
pub fn grad_check_opts<F>(
    name: &str,
    seed: u64,
    shapes: &[Vec<usize>],
    corrupt: Option<f32>,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let mut rng = rng_for(seed, 0x6772_6164, shapes.len() as u64);
    let values: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s.clone(), &mut rng)).collect();
    grad_check_values(name, &values, corrupt, build)
}

/// Core of the checker, taking explicit leaf values. Exposed so the model
/// end-to-end check can feed its own initialized parameters.
pub fn grad_check_values<F>(
    name: &str,
    values: &[Tensor],
    corrupt: Option<f32>,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = values.iter().map(|v| tape.leaf(v)).collect();
    let loss = build(&mut tape, &leaves)?;
    if !loss.is_scalar() {
        return Err(Error::InvalidOp { op: "grad_check", msg: format!("loss must be scalar, got {:?}", loss.shape()) });
    }
    let loss_id = loss
        .node_ref()
        .ok_or_else(|| Error::InvalidOp { op: "grad_check", msg: "loss does not depend on any leaf".into() })?
        .id;
    let leaf_ids: Vec<usize> = leaves.iter().map(|l| l.node_ref().unwrap().id).collect();

    // Replayable copy of the graph; backward would consume the tape, so the
    // analytic pass below runs on a fresh, identical build.
    let nodes = std::mem::take(&mut tape.nodes);
    let replay = nodes.as_slice();

    // Rebuild an identical tape for the analytic pass.
    let mut tape = Tape::new();
    let leaves2: Vec<Tensor> = values.iter().map(|v| tape.leaf(v)).collect();
    let loss2 = build(&mut tape, &leaves2)?;
    let mut grads = tape.backward(&loss2)?;
    let analytic: Vec<Vec<f32>> = leaves2
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut g = grads
                .take(l)
                .ok_or_else(|| Error::MissingGrad(format!("{name} leaf {i}")))?;
            if i == 0 {
                if let Some(scale) = corrupt {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;

    let mut leaf_vals: Vec<Vec<f64>> = values
        .iter()
        .map(|v| v.data().iter().map(|&x| x as f64).collect())
        .collect();

    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for li in 0..leaf_vals.len() {
        for ei in 0..leaf_vals[li].len() {
            let orig = leaf_vals[li][ei];
            leaf_vals[li][ei] = orig + FD_STEP;
            let up = eval_f64(replay, &leaf_ids, &leaf_vals, loss_id)?;
            leaf_vals[li][ei] = orig - FD_STEP;
            let down = eval_f64(replay, &leaf_ids, &leaf_vals, loss_id)?;
            leaf_vals[li][ei] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let an = analytic[li][ei] as f64;
            worst = worst.max(rel_err(an, fd));
            checked += 1;
        }
    }

    Ok(GradCheckReport { name: name.to_string(), max_rel_err: worst, entries_checked: checked })
}

/// Evaluate the recorded graph in f64, with leaf values overridden.
fn eval_f64(nodes: &[Node], leaf_ids: &[usize], leaf_vals: &[Vec<f64>], loss_id: usize) -> Result<f64> {
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(loss_id + 1);
    for (id, node) in nodes.iter().take(loss_id + 1).enumerate() {
        let out = match &node.op {
            Op::Leaf => {
                let li = leaf_ids.iter().position(|&l| l == id).ok_or_else(|| Error::InvalidOp {
                    op: "grad_check",
                    msg: "leaf not registered through grad_check".into(),
                })?;
                leaf_vals[li].clone()
            }
            op => {
                let scratch: Vec<Vec<f64>> = node
                    .inputs
                    .iter()
                    .map(|inp| match inp.node_ref() {
                        Some(_) => Vec::new(),
                        None => inp.data().iter().map(|&x| x as f64).collect(),
                    })
                    .collect();
                let ins: Vec<&[f64]> = node
                    .inputs
                    .iter()
                    .zip(scratch.iter())
                    .map(|(inp, s)| match inp.node_ref() {
                        Some(nref) => values[nref.id].as_slice(),
                        None => s.as_slice(),
                    })
                    .collect();
                eval_op_f64(op, node, &ins)
            }
        };
        values.push(out);
    }
    Ok(values[loss_id][0])
}

fn eval_op_f64(op: &Op, node: &Node, ins: &[&[f64]]) -> Vec<f64> {
    match op {
        Op::Leaf => unreachable!(),
        Op::Add => ins[0].iter().zip(ins[1]).map(|(a, b)| a + b).collect(),
        Op::Sub => ins[0].iter().zip(ins[1]).map(|(a, b)| a - b).collect(),
        Op::Mul => ins[0].iter().zip(ins[1]).map(|(a, b)| a * b).collect(),
        Op::Scale(s) => ins[0].iter().map(|a| a * *s as f64).collect(),
        Op::BiasAdd => {
            let cols = *node.out_shape.last().unwrap();
            let mut out = ins[0].to_vec();
            for row in out.chunks_mut(cols) {
                for (v, b) in row.iter_mut().zip(ins[1]) {
                    *v += b;
                }
            }
            out
        }
        Op::Matmul => {
            let (m, k) = (node.inputs[0].shape()[0], node.inputs[0].shape()[1]);
            let n = node.inputs[1].shape()[1];
            let mut out = vec![0.0f64; m * n];
            for i in 0..m {
                for p in 0..k {
                    let a = ins[0][i * k + p];
                    for j in 0..n {
                        out[i * n + j] += a * ins[1][p * n + j];
                    }
                }
            }
            out
        }
        Op::Reshape => ins[0].to_vec(),
        Op::Transpose => {
            let (r, c) = (node.inputs[0].shape()[0], node.inputs[0].shape()[1]);
            let mut out = vec![0.0f64; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = ins[0][i * c + j];
                }
            }
            out
        }
        Op::Concat { axis } => {
            let shape = &node.out_shape;
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let total = shape[*axis];
            let mut out = vec![0.0f64; shape.iter().product()];
            let mut offset = 0;
            for (idx, inp) in node.inputs.iter().enumerate() {
                let l = inp.shape()[*axis];
                for o in 0..outer {
                    let dst = o * total * inner + offset * inner;
                    out[dst..dst + l * inner].copy_from_slice(&ins[idx][o * l * inner..(o + 1) * l * inner]);
                }
                offset += l;
            }
            out
        }
        Op::Slice { axis, start, len } => {
            let shape = node.inputs[0].shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let l_in = shape[*axis];
            let mut out = vec![0.0f64; outer * len * inner];
            for o in 0..outer {
                let src = (o * l_in + start) * inner;
                out[o * len * inner..(o + 1) * len * inner].copy_from_slice(&ins[0][src..src + len * inner]);
            }
            out
        }
        Op::Softmax => {
            let cols = *node.out_shape.last().unwrap();
            let mut out = ins[0].to_vec();
            for row in out.chunks_mut(cols) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            out
        }
        Op::LayerNorm { .. } => {
            let cols = *node.out_shape.last().unwrap();
            let (x, gain, bias) = (ins[0], ins[1], ins[2]);
            let mut out = vec![0.0f64; x.len()];
            for r in 0..x.len() / cols {
                let row = &x[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + kernels::LAYER_NORM_EPS as f64).sqrt();
                for j in 0..cols {
                    out[r * cols + j] = (row[j] - mean) * inv * gain[j] + bias[j];
                }
            }
            out
        }
        Op::Gelu => ins[0]
            .iter()
            .map(|&x| {
                let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            })
            .collect(),
        Op::Embedding { ids } => {
            let dim = node.inputs[0].shape()[1];
            let mut out = vec![0.0f64; ids.len() * dim];
            for (i, &id) in ids.iter().enumerate() {
                out[i * dim..(i + 1) * dim].copy_from_slice(&ins[0][id as usize * dim..(id as usize + 1) * dim]);
            }
            out
        }
        Op::Mean => vec![ins[0].iter().sum::<f64>() / ins[0].len().max(1) as f64],
        Op::Sum => vec![ins[0].iter().sum::<f64>()],
        Op::Mse => {
            let n = ins[0].len().max(1) as f64;
            vec![ins[0].iter().zip(ins[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n]
        }
    }
}

/// One named gradient-check suite for a single op.
pub struct OpSuite {
    pub name: &'static str,
    runner: Box<dyn Fn(u64, Option<f32>) -> Result<GradCheckReport> + Send + Sync>,
}

impl OpSuite {
    pub fn run(&self, seed: u64, corrupt: Option<f32>) -> Result<GradCheckReport> {
        (self.runner)(seed, corrupt)
    }
}

fn dims(seed: u64, salt: u64, n: usize) -> Vec<usize> {
    let mut rng = rng_for(seed, 0x7368_6170, salt);
    (0..n).map(|_| rng.gen_range(2..=5)).collect()
}

/// Every registered op paired with a randomized-shape check that drives it
/// (composed with just enough plumbing to reach a scalar loss).
pub fn op_suites() -> Vec<OpSuite> {
    fn suite(
        name: &'static str,
        runner: impl Fn(u64, Option<f32>) -> Result<GradCheckReport> + Send + Sync + 'static,
    ) -> OpSuite {
        OpSuite { name, runner: Box::new(runner) }
    }

    vec![
        suite("add", |seed, c| {
            let d = dims(seed, 1, 2);
            let s = vec![d.clone(), d];
            grad_check_opts("add", seed, &s, c, |t, l| {
                let y = t.add(&l[0], &l[1])?;
                let tgt = Tensor::randn(y.shape().to_vec(), &mut rng_for(seed, 1, 1));
                t.mse(&y, &tgt)
            })
        }),
        suite("sub", |seed, c| {
            let d = dims(seed, 2, 2);
            let s = vec![d.clone(), d];
            grad_check_opts("sub", seed, &s, c, |t, l| {
                let y = t.sub(&l[0], &l[1])?;
                let tgt = Tensor::randn(y.shape().to_vec(), &mut rng_for(seed, 2, 1));
                t.mse(&y, &tgt)
            })
        }),
        suite("mul", |seed, c| {
            let d = dims(seed, 3, 2);
            let s = vec![d.clone(), d];
            grad_check_opts("mul", seed, &s, c, |t, l| {
                let y = t.mul(&l[0], &l[1])?;
                let tgt = Tensor::randn(y.shape().to_vec(), &mut rng_for(seed, 3, 1));
                t.mse(&y, &tgt)
            })
        }),
        suite("scale", |seed, c| {
            let d = dims(seed, 4, 2);
            grad_check_opts("scale", seed, &[d], c, |t, l| {
                let y = t.scale(&l[0], -1.7)?;
                let tgt = Tensor::randn(y.shape().to_vec(), &mut rng_for(seed, 4, 1));
                t.mse(&y, &tgt)
            })
        }),
        suite("bias_add", |seed, c| {
            let d = dims(seed, 5, 2);
            let s = vec![d.clone(), vec![d[1]]];
            grad_check_opts("bias_add", seed, &s, c, |t, l| {
                let y = t.bias_add(&l[0], &l[1])?;
                let tgt = Tensor::randn(y.shape().to_vec(), &mut rng_for(seed, 5, 1));
                t.mse(&y, &tgt)
            })
        }),
        suite("matmul", |seed, c| {
            let d = dims(seed, 6, 3);
            let s = vec![vec![d[0], d[1]], vec![d[1], d[2]]];
            grad_check_opts("matmul", seed, &s, c, |t, l| {
                let y = t.matmul(&l[0], &l[1])?;
                let tgt = Tensor::randn(y.shape().to_vec(), &mut rng_for(seed, 6, 1));
                t.mse(&y, &tgt)
            })
        }),
        suite("reshape", |seed, c| {
            let d = dims(seed, 7, 2);
            let flat = d[0] * d[1];
            grad_check_opts("reshape", seed, &[d], c, move |t, l| {
                let y = t.reshape(&l[0], vec![flat])?;
                let g = t.gelu(&y)?;
                let tgt = Tensor::randn(vec![flat], &mut rng_for(seed, 7, 1));
                t.mse(&g, &tgt)
            })
        }),
        suite("transpose", |seed, c| {
            let d = dims(seed, 8, 2);
            let (r0, c0) = (d[0], d[1]);
            grad_check_opts("transpose", seed, &[d], c, move |t, l| {
                let y = t.transpose(&l[0])?;
                let tgt = Tensor::randn(vec![c0, r0], &mut rng_for(seed, 8, 1));
                t.mse(&y, &tgt)
            })
        }),
        suite("concat", |seed, c| {
            let d = dims(seed, 9, 3);
            let s = vec![vec![d[0], d[1]], vec![d[0], d[2]]];
            grad_check_opts("concat", seed, &s, c, |t, l| {
                let y = t.concat(&[&l[0], &l[1]], 1)?;
                let tgt = Tensor::randn(y.shape().to_vec(), &mut rng_for(seed, 9, 1));
                t.mse(&y, &tgt)
            })
        }),
        suite("slice", |seed, c| {
            let d = dims(seed, 10, 2);
            let len = d[1] - 1;
            grad_check_opts("slice", seed, &[d], c, move |t, l| {
                let y = t.slice(&l[0], 1, 1, len)?;
                let tgt = Tensor::randn(y.shape().to_vec(), &mut rng_for(seed, 10, 1));
                t.mse(&y, &tgt)
            })
        }),
        suite("softmax", |seed, c| {
            let d = dims(seed, 11, 2);
            grad_check_opts("softmax", seed, &[d], c, |t, l| {
                let y = t.softmax(&l[0])?;
                let tgt = Tensor::randn(y.shape().to_vec(), &mut rng_for(seed, 11, 1));
                t.mse(&y, &tgt)
            })
        }),
        suite("layer_norm", |seed, c| {
            let d = dims(seed, 12, 2);
            let s = vec![d.clone(), vec![d[1]], vec![d[1]]];
            grad_check_opts("layer_norm", seed, &s, c, |t, l| {
                let y = t.layer_norm(&l[0], &l[1], &l[2])?;
                let tgt = Tensor::randn(y.shape().to_vec(), &mut rng_for(seed, 12, 1));
                t.mse(&y, &tgt)
            })
        }),
        suite("gelu", |seed, c| {
            let d = dims(seed, 13, 2);
            grad_check_opts("gelu", seed, &[d], c, |t, l| {
                let y = t.gelu(&l[0])?;
                let tgt = Tensor::randn(y.shape().to_vec(), &mut rng_for(seed, 13, 1));
                t.mse(&y, &tgt)
            })
        }),
        suite("embedding", |seed, c| {
            let d = dims(seed, 14, 2);
            let (vocab, dim) = (d[0] + 2, d[1]);
            let mut rng = rng_for(seed, 14, 2);
            let ids: Vec<u16> = (0..6).map(|_| rng.gen_range(0..vocab as u16)).collect();
            grad_check_opts("embedding", seed, &[vec![vocab, dim]], c, move |t, l| {
                let y = t.embedding(&l[0], &ids)?;
                let tgt = Tensor::randn(y.shape().to_vec(), &mut rng_for(seed, 14, 1));
                t.mse(&y, &tgt)
            })
        }),
        suite("mean", |seed, c| {
            let d = dims(seed, 15, 2);
            grad_check_opts("mean", seed, &[d], c, |t, l| {
                let m = t.mean(&l[0])?;
                t.mul(&m, &m)
            })
        }),
        suite("sum", |seed, c| {
            let d = dims(seed, 16, 2);
            grad_check_opts("sum", seed, &[d], c, |t, l| {
                let s = t.sum(&l[0])?;
                let sc = t.scale(&s, 0.25)?;
                t.mul(&sc, &s)
            })
        }),
        suite("mse", |seed, c| {
            let d = dims(seed, 17, 2);
            let s = vec![d.clone(), d];
            grad_check_opts("mse", seed, &s, c, |t, l| t.mse(&l[0], &l[1]))
        }),
    ]
}
