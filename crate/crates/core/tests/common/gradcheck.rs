//! Central finite differences against the tape's reverse-mode gradients.

use asr_align::data::tokenizer::IGNORE_ID;
use asr_align::pipeline::Freeze;
use asr_align::{Result, Tape, Tensor, Var};
use rand::Rng;

use super::{rng, tiny_model, tiny_utterance};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
pub const INSTANCES: u64 = 100;
/// Gradient norms below this are compared in absolute terms.
pub const NORM_FLOOR: f64 = 1e-3;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)`, worst over inputs.
pub fn relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
            norm(&diff) / norm(a).max(norm(n)).max(NORM_FLOOR)
        })
        .fold(0.0, f64::max)
}

/// Scalar probe: `sum(build(inputs) ⊙ weights)`.
fn probe(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Worst relative error over all inputs for one random instance.
pub fn check(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let weights = Tensor::uniform(tape.value(out).shape(), 1.0, &mut rng(seed ^ 0xabc));
    let loss = probe(&mut tape, out, &weights)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_f64_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs)?;
        let l = probe(&mut t, o, &weights)?;
        Ok(t.value(l).item())
    };
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - STEP;
            let down = eval(&xs)?;
            *gj = (up - down) / (2.0 * STEP);
        }
        numeric.push(g);
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Uniform entries bounded away from zero, so ReLU kinks are never within a
/// finite-difference step.
fn away_from_zero<R: Rng>(shape: &[usize], r: &mut R) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = r.gen_range(0.05..1.0);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn randn<R: Rng>(shape: &[usize], r: &mut R) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

type Instance = (Vec<Tensor<f64>>, Box<Build>);

struct Case {
    name: &'static str,
    make: fn(u64) -> Instance,
}

fn dims<R: Rng>(r: &mut R) -> (usize, usize, usize) {
    (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..6))
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            make: |s| {
                let mut r = rng(s);
                let (m, k, n) = dims(&mut r);
                (
                    vec![randn(&[m, k], &mut r), randn(&[k, n], &mut r)],
                    Box::new(|t, v| t.matmul(v[0], v[1])),
                )
            },
        },
        Case {
            name: "matmul_nt",
            make: |s| {
                let mut r = rng(s);
                let (m, k, n) = dims(&mut r);
                (
                    vec![randn(&[m, k], &mut r), randn(&[n, k], &mut r)],
                    Box::new(|t, v| t.matmul_nt(v[0], v[1])),
                )
            },
        },
        Case {
            name: "add",
            make: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                (
                    vec![randn(&[m, n], &mut r), randn(&[m, n], &mut r)],
                    Box::new(|t, v| t.add(v[0], v[1])),
                )
            },
        },
        Case {
            name: "add_broadcast",
            make: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                (
                    vec![randn(&[m, n], &mut r), randn(&[n], &mut r)],
                    Box::new(|t, v| t.add(v[0], v[1])),
                )
            },
        },
        Case {
            name: "mul",
            make: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                (
                    vec![randn(&[m, n], &mut r), randn(&[m, n], &mut r)],
                    Box::new(|t, v| t.mul(v[0], v[1])),
                )
            },
        },
        Case {
            name: "mul_broadcast",
            make: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                (
                    vec![randn(&[m, n], &mut r), randn(&[n], &mut r)],
                    Box::new(|t, v| t.mul(v[0], v[1])),
                )
            },
        },
        Case {
            name: "scale",
            make: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                let c: f64 = r.gen_range(-2.0..2.0);
                (
                    vec![randn(&[m, n], &mut r)],
                    Box::new(move |t, v| Ok(t.scale(v[0], c))),
                )
            },
        },
        Case {
            name: "affine",
            make: |s| {
                let mut r = rng(s);
                let (m, k, n) = dims(&mut r);
                (
                    vec![
                        randn(&[m, k], &mut r),
                        randn(&[k, n], &mut r),
                        randn(&[n], &mut r),
                    ],
                    Box::new(|t, v| t.affine(v[0], v[1], v[2])),
                )
            },
        },
        Case {
            name: "relu",
            make: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                (
                    vec![away_from_zero(&[m, n], &mut r)],
                    Box::new(|t, v| Ok(t.relu(v[0]))),
                )
            },
        },
        Case {
            name: "layer_norm",
            make: |s| {
                let mut r = rng(s);
                let (m, _, _) = dims(&mut r);
                let n = r.gen_range(2..7);
                (
                    vec![
                        randn(&[m, n], &mut r),
                        randn(&[n], &mut r),
                        randn(&[n], &mut r),
                    ],
                    Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
                )
            },
        },
        Case {
            name: "gather",
            make: |s| {
                let mut r = rng(s);
                let (v, d, len) = dims(&mut r);
                let ids: Vec<usize> = (0..len + 2).map(|_| r.gen_range(0..v)).collect();
                (
                    vec![randn(&[v, d], &mut r)],
                    Box::new(move |t, x| t.gather(x[0], &ids)),
                )
            },
        },
        Case {
            name: "concat_rows",
            make: |s| {
                let mut r = rng(s);
                let (a, b, n) = dims(&mut r);
                (
                    vec![
                        randn(&[a, n], &mut r),
                        randn(&[0, n], &mut r),
                        randn(&[b, n], &mut r),
                    ],
                    Box::new(|t, v| t.concat_rows(v)),
                )
            },
        },
        Case {
            name: "concat_cols",
            make: |s| {
                let mut r = rng(s);
                let (m, a, b) = dims(&mut r);
                (
                    vec![randn(&[m, a], &mut r), randn(&[m, b], &mut r)],
                    Box::new(|t, v| t.concat_cols(v)),
                )
            },
        },
        Case {
            name: "slice_rows",
            make: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                let start = r.gen_range(0..m);
                let len = r.gen_range(1..=m - start);
                (
                    vec![randn(&[m, n], &mut r)],
                    Box::new(move |t, v| t.slice_rows(v[0], start, len)),
                )
            },
        },
        Case {
            name: "slice_cols",
            make: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                let start = r.gen_range(0..n);
                let len = r.gen_range(1..=n - start);
                (
                    vec![randn(&[m, n], &mut r)],
                    Box::new(move |t, v| t.slice_cols(v[0], start, len)),
                )
            },
        },
        Case {
            name: "reshape",
            make: |s| {
                let mut r = rng(s);
                let (m, n, k) = dims(&mut r);
                (
                    vec![randn(&[m * k, n], &mut r)],
                    Box::new(move |t, v| t.reshape(v[0], &[m, k * n])),
                )
            },
        },
        Case {
            name: "softmax_rows",
            make: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                (
                    vec![randn(&[m, n], &mut r)],
                    Box::new(|t, v| t.softmax_rows(v[0], None)),
                )
            },
        },
        Case {
            name: "softmax_rows_causal",
            make: |s| {
                let mut r = rng(s);
                let (n, _, _) = dims(&mut r);
                let mask = asr_align::nn::lm::causal_mask::<f64>(n);
                (
                    vec![randn(&[n, n], &mut r)],
                    Box::new(move |t, v| t.softmax_rows(v[0], Some(&mask))),
                )
            },
        },
        Case {
            name: "cross_entropy",
            make: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                let targets: Vec<usize> = (0..m)
                    .map(|i| {
                        if i > 0 && r.gen_bool(0.3) {
                            IGNORE_ID
                        } else {
                            r.gen_range(0..n)
                        }
                    })
                    .collect();
                (
                    vec![randn(&[m, n], &mut r)],
                    Box::new(move |t, v| {
                        t.cross_entropy(v[0], &targets, IGNORE_ID).map(|c| c.loss)
                    }),
                )
            },
        },
        Case {
            name: "sum",
            make: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                (
                    vec![randn(&[m, n], &mut r)],
                    Box::new(|t, v| Ok(t.sum(v[0]))),
                )
            },
        },
    ]
}

/// Worst error per primitive over [`INSTANCES`] seeded instances.
pub fn primitive_suite() -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .map(|c| {
            let worst = (0..INSTANCES)
                .map(|i| {
                    let seed = 1000 * i + c.name.len() as u64;
                    let (inputs, build) = (c.make)(seed);
                    check(&inputs, &*build, seed).unwrap_or(f64::INFINITY)
                })
                .fold(0.0, f64::max);
            (c.name, worst)
        })
        .collect()
}

/// Projector (and affine encoder) gradients through the frozen LM, as used
/// in training: gradient of the summed transcript NLL.
pub fn projector_path_error(seed: u64) -> Result<f64> {
    let mut model = tiny_model(seed, 3, 2, true);
    let mut r = rng(seed);
    let words = r.gen_range(1..4);
    let frames = r.gen_range(2..12);
    let utt = tiny_utterance(seed, words, frames, 3);
    let freeze = Freeze {
        encoder: false,
        lm: true,
    };
    let out = model.item(&utt, "transcribe", freeze, true)?;
    let analytic: Vec<Vec<f64>> = out
        .grads
        .grads
        .iter()
        .zip(model.trainable(freeze))
        .map(|(g, (_, t))| {
            g.as_ref()
                .map(|g| g.to_f64_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    let n_tensors = analytic.len();
    let mut numeric = Vec::with_capacity(n_tensors);
    for i in 0..n_tensors {
        let len = model.trainable(freeze)[i].1.len();
        let mut g = vec![0.0; len];
        for (j, gj) in g.iter_mut().enumerate() {
            let mut loss_at = |delta: f64| -> Result<f64> {
                let x0 = model.trainable(freeze)[i].1.data()[j];
                model.trainable_mut(freeze)[i].data_mut()[j] = x0 + delta;
                let l = model
                    .item(&utt, "transcribe", freeze, false)?
                    .grads
                    .stats
                    .nll_sum;
                model.trainable_mut(freeze)[i].data_mut()[j] = x0;
                Ok(l)
            };
            *gj = (loss_at(STEP)? - loss_at(-STEP)?) / (2.0 * STEP);
        }
        numeric.push(g);
    }
    Ok(relative_error(&analytic, &numeric))
}

pub fn projector_path_suite() -> f64 {
    (0..INSTANCES)
        .map(|s| projector_path_error(s).unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max)
}
