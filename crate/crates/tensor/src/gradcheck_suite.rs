//! Randomized gradient verification across the whole op catalog.
//!
//! [`primitive_suite`] draws random shapes and inputs for every differentiable
//! primitive and runs [`GradCheck`] on each configuration. It exists as
//! library code (not just a test) so integration suites can run it at higher
//! intensity than the default unit-test pass.

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorResult;
use crate::gradcheck::{GradCheck, GradCheckReport};
use crate::rng::{fill_normal, fill_uniform};
use crate::tape::{Tape, Tx};
use crate::tensor::Tensor;
use crate::Real;

type Build = Box<dyn Fn(&mut Tape, &[Tx]) -> TensorResult<Tx>>;

struct Case {
    op: &'static str,
    inputs: Vec<Tensor>,
    build: Build,
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Inputs bounded away from zero, for ops with a kink or pole there.
fn fill_offset(rng: &mut ChaCha8Rng, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    let mut t = fill_uniform(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut out: Vec<Case> = Vec::new();
    let n = dims(rng, 2, 5);
    let m = dims(rng, 2, 5);

    // Elementwise binary, same shape / suffix broadcast / scalar rhs.
    let a = fill_normal(rng, &[m, n], 0.0, 1.0);
    let b = fill_normal(rng, &[m, n], 0.0, 1.0);
    out.push(Case {
        op: "add",
        inputs: vec![a.clone(), b.clone()],
        build: Box::new(|t, h| {
            let s = t.add(h[0], h[1])?;
            Ok(t.sum_all(s))
        }),
    });
    out.push(Case {
        op: "sub",
        inputs: vec![a.clone(), b.clone()],
        build: Box::new(|t, h| {
            let s = t.sub(h[0], h[1])?;
            Ok(t.sum_all(s))
        }),
    });
    out.push(Case {
        op: "mul",
        inputs: vec![a.clone(), b],
        build: Box::new(|t, h| {
            let s = t.mul(h[0], h[1])?;
            Ok(t.sum_all(s))
        }),
    });
    let suffix = fill_normal(rng, &[n], 0.0, 1.0);
    out.push(Case {
        op: "mul-broadcast-suffix",
        inputs: vec![a.clone(), suffix],
        build: Box::new(|t, h| {
            let s = t.mul(h[0], h[1])?;
            Ok(t.sum_all(s))
        }),
    });
    let scalar = fill_normal(rng, &[1], 0.0, 1.0);
    out.push(Case {
        op: "add-broadcast-scalar",
        inputs: vec![a.clone(), scalar],
        build: Box::new(|t, h| {
            let s = t.add(h[0], h[1])?;
            let sq = t.mul(s, s)?;
            Ok(t.sum_all(sq))
        }),
    });
    let sc: Real = rng.random_range(-2.0..2.0);
    out.push(Case {
        op: "scalar-affine",
        inputs: vec![a.clone()],
        build: Box::new(move |t, h| {
            let y = t.mul_scalar(h[0], sc);
            let y = t.add_scalar(y, 0.7);
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    });

    // Linear algebra.
    let k = dims(rng, 2, 5);
    let p = dims(rng, 2, 5);
    out.push(Case {
        op: "matmul",
        inputs: vec![fill_normal(rng, &[m, k], 0.0, 1.0), fill_normal(rng, &[k, p], 0.0, 1.0)],
        build: Box::new(|t, h| {
            let y = t.matmul(h[0], h[1])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    });
    let bsz = dims(rng, 1, 3);
    out.push(Case {
        op: "bmm",
        inputs: vec![
            fill_normal(rng, &[bsz, m, k], 0.0, 1.0),
            fill_normal(rng, &[bsz, k, p], 0.0, 1.0),
        ],
        build: Box::new(|t, h| {
            let y = t.bmm(h[0], h[1])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    });
    out.push(Case {
        op: "transpose_last",
        inputs: vec![fill_normal(rng, &[bsz, m, n], 0.0, 1.0)],
        build: Box::new(|t, h| {
            let y = t.transpose_last(h[0])?;
            let z = t.bmm(h[0], y)?;
            Ok(t.sum_all(z))
        }),
    });

    // Shuffling.
    out.push(Case {
        op: "reshape",
        inputs: vec![fill_normal(rng, &[m, n], 0.0, 1.0)],
        build: Box::new(move |t, h| {
            let y = t.reshape(h[0], &[m * n])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    });
    out.push(Case {
        op: "concat-slice",
        inputs: vec![fill_normal(rng, &[m, n], 0.0, 1.0), fill_normal(rng, &[m, n], 0.0, 1.0)],
        build: Box::new(move |t, h| {
            let c = t.concat(&[h[0], h[1]], 1)?;
            let s = t.slice(c, 1, 1, n)?;
            let sq = t.mul(s, s)?;
            Ok(t.sum_all(sq))
        }),
    });
    let idx: Vec<usize> = (0..m + 2).map(|_| rng.random_range(0..m)).collect();
    out.push(Case {
        op: "gather_rows",
        inputs: vec![fill_normal(rng, &[m, n], 0.0, 1.0)],
        build: Box::new(move |t, h| {
            let g = t.gather_rows(h[0], Rc::new(idx.clone()))?;
            let sq = t.mul(g, g)?;
            Ok(t.sum_all(sq))
        }),
    });

    // Reductions.
    out.push(Case {
        op: "sum_axis",
        inputs: vec![fill_normal(rng, &[m, n], 0.0, 1.0)],
        build: Box::new(|t, h| {
            let y = t.sum_axis(h[0], 0)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    });
    out.push(Case {
        op: "mean_axis",
        inputs: vec![fill_normal(rng, &[m, n], 0.0, 1.0)],
        build: Box::new(|t, h| {
            let y = t.mean_axis(h[0], 1)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    });
    out.push(Case {
        op: "mean_all",
        inputs: vec![fill_normal(rng, &[m, n], 0.0, 1.0)],
        build: Box::new(|t, h| {
            let y = t.mean_all(h[0]);
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    });

    // Elementwise nonlinearities.
    out.push(Case {
        op: "sqrt",
        inputs: vec![fill_uniform(rng, &[m, n], 0.2, 2.0)],
        build: Box::new(|t, h| {
            let y = t.sqrt(h[0]);
            Ok(t.sum_all(y))
        }),
    });
    out.push(Case {
        op: "log",
        inputs: vec![fill_uniform(rng, &[m, n], 0.2, 2.0)],
        build: Box::new(|t, h| {
            let y = t.log(h[0]);
            Ok(t.sum_all(y))
        }),
    });
    out.push(Case {
        op: "exp",
        inputs: vec![fill_normal(rng, &[m, n], 0.0, 0.5)],
        build: Box::new(|t, h| {
            let y = t.exp(h[0]);
            Ok(t.sum_all(y))
        }),
    });
    out.push(Case {
        op: "tanh",
        inputs: vec![fill_normal(rng, &[m, n], 0.0, 1.0)],
        build: Box::new(|t, h| {
            let y = t.tanh(h[0]);
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    });
    out.push(Case {
        op: "relu",
        inputs: vec![fill_offset(rng, &[m, n], 0.05, 2.0)],
        build: Box::new(|t, h| {
            let y = t.relu(h[0]);
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    });
    out.push(Case {
        op: "gelu",
        inputs: vec![fill_normal(rng, &[m, n], 0.0, 1.5)],
        build: Box::new(|t, h| {
            let y = t.gelu(h[0]);
            Ok(t.sum_all(y))
        }),
    });
    out.push(Case {
        op: "abs",
        inputs: vec![fill_offset(rng, &[m, n], 0.05, 2.0)],
        build: Box::new(|t, h| {
            let y = t.abs(h[0]);
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    });
    out.push(Case {
        op: "clamp_max",
        inputs: vec![fill_offset(rng, &[m, n], 0.05, 2.0)],
        build: Box::new(|t, h| {
            let y = t.clamp_max(h[0], 1.0);
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    });

    // Normalization and attention.
    out.push(Case {
        op: "layer_norm",
        inputs: vec![
            fill_normal(rng, &[m, n], 0.0, 1.0),
            fill_uniform(rng, &[n], 0.5, 1.5),
            fill_normal(rng, &[n], 0.0, 0.3),
        ],
        build: Box::new(|t, h| {
            let y = t.layer_norm(h[0], h[1], h[2], 1e-5)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    });
    let mut mask = vec![true; m * n];
    for row in 0..m {
        for col in 1..n {
            if rng.random::<f64>() < 0.3 {
                mask[row * n + col] = false;
            }
        }
    }
    let weights = fill_normal(rng, &[m, n], 0.0, 1.0);
    out.push(Case {
        op: "softmax_rows-masked",
        inputs: vec![fill_normal(rng, &[m, n], 0.0, 1.0)],
        build: Box::new(move |t, h| {
            let y = t.softmax_rows(h[0], Some(Rc::new(mask.clone())))?;
            let w = t.constant(weights.clone());
            let wy = t.mul(y, w)?;
            Ok(t.sum_all(wy))
        }),
    });
    let classes = dims(rng, 2, 6);
    let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..classes)).collect();
    let mut row_mask: Vec<bool> = (0..m).map(|_| rng.random::<f64>() < 0.7).collect();
    row_mask[0] = true;
    out.push(Case {
        op: "cross_entropy_logits",
        inputs: vec![fill_normal(rng, &[m, classes], 0.0, 1.0)],
        build: Box::new(move |t, h| {
            t.cross_entropy_logits(h[0], Rc::new(targets.clone()), Some(Rc::new(row_mask.clone())))
        }),
    });

    // Losses.
    out.push(Case {
        op: "mse",
        inputs: vec![fill_normal(rng, &[m, n], 0.0, 1.0), fill_normal(rng, &[m, n], 0.0, 1.0)],
        build: Box::new(|t, h| t.mse(h[0], h[1])),
    });
    // L1 inputs separated so no coordinate pair sits on the |.| kink.
    let la = fill_uniform(rng, &[m, n], 1.0, 2.0);
    let lb = fill_uniform(rng, &[m, n], -2.0, -1.0);
    out.push(Case {
        op: "l1",
        inputs: vec![la, lb],
        build: Box::new(|t, h| t.l1(h[0], h[1])),
    });

    // Convolution stack.
    let cin = dims(rng, 1, 2);
    let cout = dims(rng, 1, 2);
    let hw = dims(rng, 4, 6);
    let stride = if rng.random::<bool>() { 1 } else { 2 };
    let pad = rng.random_range(0..=1);
    out.push(Case {
        op: "conv2d",
        inputs: vec![
            fill_normal(rng, &[1, cin, hw, hw], 0.0, 1.0),
            fill_normal(rng, &[cout, cin, 3, 3], 0.0, 0.5),
            fill_normal(rng, &[cout], 0.0, 0.5),
        ],
        build: Box::new(move |t, h| {
            let y = t.conv2d(h[0], h[1], Some(h[2]), stride, pad)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    });
    out.push(Case {
        op: "upsample2_nearest",
        inputs: vec![fill_normal(rng, &[1, cin, 3, 3], 0.0, 1.0)],
        build: Box::new(|t, h| {
            let y = t.upsample2_nearest(h[0])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    });

    // Dropout with a mask regenerated deterministically per evaluation.
    let dseed: u64 = rng.random();
    out.push(Case {
        op: "dropout",
        inputs: vec![fill_normal(rng, &[m, n], 0.0, 1.0)],
        build: Box::new(move |t, h| {
            let mut drng = ChaCha8Rng::seed_from_u64(dseed);
            let y = t.dropout(h[0], 0.3, &mut drng)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    });

    // Straight-through plumbing: value source mirrors the input exactly, so
    // the numeric derivative of the forward equals the routed gradient.
    out.push(Case {
        op: "detach_value_keep_gradient",
        inputs: vec![fill_normal(rng, &[m, n], 0.0, 1.0)],
        build: Box::new(|t, h| {
            let v = t.value(h[0]).clone();
            let c = t.constant(v);
            let st = t.detach_value_keep_gradient(c, h[0])?;
            let sq = t.mul(st, st)?;
            Ok(t.sum_all(sq))
        }),
    });

    out
}

/// Run every primitive's gradient check `configs_per_op` times with fresh
/// random shapes and inputs. Returns per-op reports; `pass` on each report is
/// the conjunction over its configurations, with rel errors maxed.
pub fn primitive_suite(configs_per_op: usize, seed: u64) -> TensorResult<Vec<(&'static str, GradCheckReport)>> {
    let checker = GradCheck::default();
    let mut merged: Vec<(&'static str, GradCheckReport)> = Vec::new();
    for cfg in 0..configs_per_op {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(cfg as u64));
        for case in cases(&mut rng) {
            let report = checker.run(&case.inputs, &case.build)?;
            match merged.iter_mut().find(|(op, _)| *op == case.op) {
                Some((_, agg)) => {
                    agg.checked += report.checked;
                    agg.skipped_kinks += report.skipped_kinks;
                    if report.max_rel_err > agg.max_rel_err {
                        agg.max_rel_err = report.max_rel_err;
                        agg.worst = report.worst;
                    }
                    agg.pass &= report.pass;
                }
                None => merged.push((case.op, report)),
            }
        }
    }
    Ok(merged)
}
