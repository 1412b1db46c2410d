//! Finite-difference checks over every differentiable graph operation and
//! the two end-to-end training losses.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::QGExample;
use crate::error::Result;
use crate::generator::{prepare_example, GeneratorConfig, GeneratorModel};
use crate::guider::{EncodedTriplet, GuiderConfig, GuiderModel};
use crate::layers::LAYER_NORM_EPS;
use crate::tensor::{grad_check, grad_check_params, Graph, ParamId, ParamStore, Tensor, Unary, Var};

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub ops: Vec<OpReport>,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.ops.iter().map(|o| o.max_rel_error).fold(0.0, f64::max)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Entries with magnitude in `[0.1, 1]` and random sign, away from the
/// ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// `Σ R ⊙ y` with a fixed random `R`, so every output coordinate matters.
fn project(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(Tensor::uniform(g.shape(y), -1.0, 1.0, &mut rng));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

type OpFn = dyn Fn(&mut Graph<'static>, &[Var]) -> Result<Var>;

/// Checks `f` with respect to each input in turn, the others held constant.
fn check_inputs(inputs: &[Tensor], f: &OpFn, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let err = grad_check(
            |g, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == i { x } else { g.constant(t.clone()) })
                    .collect();
                let y = f(g, &vars)?;
                project(g, y, seed)
            },
            &inputs[i],
            SUITE_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

struct OpCase {
    name: &'static str,
    make: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    run: Box<OpFn>,
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

fn op_cases() -> Vec<OpCase> {
    fn unary(kind: Unary) -> Box<OpFn> {
        Box::new(move |g, v| g.unary(kind, v[0]))
    }
    vec![
        OpCase {
            name: "matmul",
            make: |r| {
                let (a, b, c) = dims(r);
                vec![uniform(r, &[a, b], -1.0, 1.0), uniform(r, &[b, c], -1.0, 1.0)]
            },
            run: Box::new(|g, v| g.matmul(v[0], v[1])),
        },
        OpCase {
            name: "add",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a, b], -1.0, 1.0), uniform(r, &[a, b], -1.0, 1.0)]
            },
            run: Box::new(|g, v| g.add(v[0], v[1])),
        },
        OpCase {
            name: "sub",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a, b], -1.0, 1.0), uniform(r, &[a, b], -1.0, 1.0)]
            },
            run: Box::new(|g, v| g.sub(v[0], v[1])),
        },
        OpCase {
            name: "mul",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a, b], -1.0, 1.0), uniform(r, &[a, b], -1.0, 1.0)]
            },
            run: Box::new(|g, v| g.mul(v[0], v[1])),
        },
        OpCase {
            name: "affine",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a, b], -1.0, 1.0)]
            },
            run: Box::new(|g, v| Ok(g.affine(v[0], -1.7, 0.3))),
        },
        OpCase {
            name: "add_row",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a, b], -1.0, 1.0), uniform(r, &[b], -1.0, 1.0)]
            },
            run: Box::new(|g, v| g.add_row(v[0], v[1])),
        },
        OpCase {
            name: "mul_row",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a, b], -1.0, 1.0), uniform(r, &[b], -1.0, 1.0)]
            },
            run: Box::new(|g, v| g.mul_row(v[0], v[1])),
        },
        OpCase {
            name: "sigmoid",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a, b], -3.0, 3.0)]
            },
            run: unary(Unary::Sigmoid),
        },
        OpCase {
            name: "tanh",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a, b], -2.0, 2.0)]
            },
            run: unary(Unary::Tanh),
        },
        OpCase {
            name: "relu",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![away_from_zero(r, &[a, b])]
            },
            run: unary(Unary::Relu),
        },
        OpCase {
            name: "exp",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a, b], -2.0, 2.0)]
            },
            run: unary(Unary::Exp),
        },
        OpCase {
            name: "log",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a, b], 0.2, 3.0)]
            },
            run: unary(Unary::Log),
        },
        OpCase {
            name: "softmax_rows",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a, b + 1], -2.0, 2.0)]
            },
            run: Box::new(|g, v| g.softmax(v[0], 1)),
        },
        OpCase {
            name: "softmax_cols",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a + 1, b], -2.0, 2.0)]
            },
            run: Box::new(|g, v| g.softmax(v[0], 0)),
        },
        OpCase {
            name: "layer_norm",
            make: |r| {
                let (a, b, _) = dims(r);
                let d = b + 1;
                vec![
                    uniform(r, &[a, d], -1.0, 1.0),
                    uniform(r, &[d], 0.5, 1.5),
                    uniform(r, &[d], -0.5, 0.5),
                ]
            },
            run: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)),
        },
        OpCase {
            name: "conv1d",
            make: |r| {
                let (len, d_in, d_out) = dims(r);
                let width = [1, 3, 5][r.random_range(0..3)];
                vec![uniform(r, &[len, d_in], -1.0, 1.0), uniform(r, &[width, d_in, d_out], -1.0, 1.0)]
            },
            run: Box::new(|g, v| g.conv1d(v[0], v[1])),
        },
        OpCase {
            name: "concat_rows",
            make: |r| {
                let (a, b, c) = dims(r);
                vec![uniform(r, &[a, c], -1.0, 1.0), uniform(r, &[b, c], -1.0, 1.0)]
            },
            run: Box::new(|g, v| g.concat(v, 0)),
        },
        OpCase {
            name: "concat_cols",
            make: |r| {
                let (a, b, c) = dims(r);
                vec![uniform(r, &[a, b], -1.0, 1.0), uniform(r, &[a, c], -1.0, 1.0)]
            },
            run: Box::new(|g, v| g.concat(v, 1)),
        },
        OpCase {
            name: "slice",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a + 1, b + 2], -1.0, 1.0)]
            },
            run: Box::new(|g, v| {
                let s = g.slice(v[0], 1, 1, 1)?;
                let t = g.slice(v[0], 0, 1, 1)?;
                let st = g.matmul(s, t)?;
                g.reshape(st, &[g.shape(st)[0] * g.shape(st)[1]])
            }),
        },
        OpCase {
            name: "row",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a + 1, b], -1.0, 1.0)]
            },
            run: Box::new(|g, v| g.row(v[0], 1)),
        },
        OpCase {
            name: "transpose",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a, b], -1.0, 1.0)]
            },
            run: Box::new(|g, v| g.transpose(v[0])),
        },
        OpCase {
            name: "sum",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a, b], -1.0, 1.0)]
            },
            run: Box::new(|g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            }),
        },
        OpCase {
            name: "mean_rows",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a, b], -1.0, 1.0)]
            },
            run: Box::new(|g, v| g.mean_rows(v[0])),
        },
        OpCase {
            name: "gather_rows",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a + 2, b], -1.0, 1.0)]
            },
            run: Box::new(|g, v| {
                let n = g.shape(v[0])[0];
                g.gather_rows(v[0], &[n - 1, 0, n - 1, 1])
            }),
        },
        OpCase {
            name: "reshape",
            make: |r| {
                let (a, b, _) = dims(r);
                vec![uniform(r, &[a, b * 2], -1.0, 1.0)]
            },
            run: Box::new(|g, v| {
                let s = g.shape(v[0]).to_vec();
                let y = g.reshape(v[0], &[s[1], s[0]])?;
                g.mul(y, y)
            }),
        },
    ]
}

/// A few random coordinates of every trainable tensor.
fn sample_coords(store: &ParamStore, per_param: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    store
        .trainable_ids()
        .flat_map(|id| {
            let n = store.get(id).numel();
            (0..per_param.min(n)).map(|_| (id, rng.random_range(0..n))).collect::<Vec<_>>()
        })
        .collect()
}

fn tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(4..vocab)).collect()
}

fn guider_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let vocab = 12;
    let config = GuiderConfig {
        attention_layers: 1,
        conv_layers: 1,
        d_model: 8,
        heads: 2,
        kernel_width: 3,
        seed: rng.random(),
        ..GuiderConfig::default()
    };
    let mut model = GuiderModel::new(config, uniform(rng, &[vocab, 6], -0.5, 0.5))?;
    // Random score weights so the hinge is active and all parameters matter.
    let w = uniform(rng, model.store.get(model.w_pa).shape(), -1.0, 1.0);
    model.store.set(model.w_pa, w)?;
    let triplet = EncodedTriplet {
        answer: tokens(rng, 2, vocab),
        positive: tokens(rng, 4, vocab),
        negative: tokens(rng, 4, vocab),
    };
    let coords = sample_coords(&model.store, 2, rng);
    grad_check_params(&model.store, |g| model.triplet_loss(g, &triplet), &coords, SUITE_EPS)
}

fn generator_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let words: Vec<String> = (0..6).map(|i| format!("w{i}")).collect();
    let vocab = crate::data::Vocab::from_content(words[..4].to_vec())?;
    let pick = |rng: &mut ChaCha8Rng, n: usize| -> Vec<String> {
        (0..n).map(|_| words[rng.random_range(0..words.len())].clone()).collect()
    };
    let example = QGExample {
        id: "t".into(),
        passage: pick(rng, 4),
        answer: pick(rng, 2),
        question: Some(pick(rng, 3)),
    };
    let feature_dim = 6;
    let config = GeneratorConfig {
        k_steps: 1,
        hidden: 2,
        decoder_hidden: 3,
        attention_dim: 3,
        use_pretraining: true,
        use_copy: true,
        seed: rng.random(),
        ..GeneratorConfig::default()
    };
    let model = GeneratorModel::new(config, uniform(rng, &[vocab.len(), 4], -0.5, 0.5), Some(feature_dim))?;
    let mut prepared = prepare_example(&example, &vocab, None, true)?;
    prepared.features = Some(uniform(rng, &[4, feature_dim], -1.0, 1.0));
    let coords = sample_coords(&model.store, 2, rng);
    grad_check_params(&model.store, |g| model.sequence_nll(g, &prepared), &coords, SUITE_EPS)
}

/// Runs `trials` seeded random checks per operation and per loss.
pub fn run_gradient_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut ops = Vec::new();
    for (k, case) in op_cases().into_iter().enumerate() {
        let mut worst = 0.0f64;
        for t in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32) ^ t as u64);
            let inputs = (case.make)(&mut rng);
            worst = worst.max(check_inputs(&inputs, case.run.as_ref(), rng.random())?);
        }
        ops.push(OpReport {
            name: case.name.to_string(),
            trials,
            max_rel_error: worst,
        });
    }
    type Trial = fn(&mut ChaCha8Rng) -> Result<f64>;
    let losses: [(&str, Trial); 2] = [("guider_margin_loss", guider_trial), ("qg_sequence_nll", generator_trial)];
    for (k, (name, trial)) in losses.into_iter().enumerate() {
        let mut worst = 0.0f64;
        for t in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((100 + k as u64) << 32) ^ t as u64);
            worst = worst.max(trial(&mut rng)?);
        }
        ops.push(OpReport {
            name: name.to_string(),
            trials,
            max_rel_error: worst,
        });
    }
    Ok(SuiteReport {
        ops,
        tolerance: SUITE_TOLERANCE,
        elapsed: start.elapsed(),
    })
}
