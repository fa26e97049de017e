//! Central finite-difference checks of the tape's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, TokenPartition};
use crate::error::Result;
use crate::model::{student_losses, teacher_targets, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};
use crate::views::{build_batch, AugConfig, TrainBatch};

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub trials: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance && self.max_rel_error.is_finite()
    }
}

/// Magnitude below which gradients are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-4;

/// `|analytic − fd| / max(|analytic|, |fd|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(GRAD_FLOOR)
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences, on every coordinate of every input (or on `sample` when
/// given, as `(input, flat index)` pairs). Returns the worst relative error.
pub fn check_function<F>(inputs: &[Tensor], sample: Option<&[(usize, usize)]>, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor], grads: bool| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), grads)).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).item()?;
        if !grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| tape.take_grad(v)).collect()))
    };
    let (_, analytic) = eval(inputs, true)?;
    let all: Vec<(usize, usize)>;
    let coords = match sample {
        Some(s) => s,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for &(i, j) in coords {
        let orig = xs[i].data()[j];
        xs[i].data_mut()[j] = orig + FD_STEP;
        let (plus, _) = eval(&xs, false)?;
        xs[i].data_mut()[j] = orig - FD_STEP;
        let (minus, _) = eval(&xs, false)?;
        xs[i].data_mut()[j] = orig;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[i].as_ref().map_or(0.0, |g| g.data()[j]);
        let e = relative_error(a, fd);
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for kinks such as `abs`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces `y` to a scalar through fixed random weights so every output
/// coordinate contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type OpCase = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

fn case<F>(f: F) -> OpCase
where
    F: Fn(&mut ChaCha8Rng) -> Result<f64> + 'static,
{
    Box::new(f)
}

fn unary_case(lo: f64, hi: f64, op: fn(&mut Tape, Var) -> Result<Var>) -> OpCase {
    case(move |rng| {
        let shape = [rng.gen_range(1..4), rng.gen_range(2..6)];
        let x = uniform(rng, &shape, lo, hi);
        let seed = rng.gen();
        check_function(&[x], None, |t, v| {
            let y = op(t, v[0])?;
            weighted_sum(t, y, seed)
        })
    })
}

fn random_partition(rng: &mut ChaCha8Rng, n: usize) -> TokenPartition {
    let mask: Vec<bool> = (0..n).map(|i| i > 0 && rng.gen_bool(0.5)).collect();
    TokenPartition::from_mask(&mask).expect("token 0 is never masked")
}

/// Every differentiable tape operation, each checked on `trials` random
/// small inputs.
pub fn op_suite(seed: u64, trials: usize) -> Result<Vec<GradCheckReport>> {
    let cases: Vec<(&str, OpCase)> = vec![
        (
            "add",
            case(|rng| {
                let (a, b) = (uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0));
                let seed = rng.gen();
                check_function(&[a, b], None, |t, v| {
                    let y = t.add(v[0], v[1])?;
                    weighted_sum(t, y, seed)
                })
            }),
        ),
        (
            "sub",
            case(|rng| {
                let (a, b) = (uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0));
                let seed = rng.gen();
                check_function(&[a, b], None, |t, v| {
                    let y = t.sub(v[0], v[1])?;
                    weighted_sum(t, y, seed)
                })
            }),
        ),
        (
            "mul",
            case(|rng| {
                let (a, b) = (uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0));
                let seed = rng.gen();
                check_function(&[a, b], None, |t, v| {
                    let y = t.mul(v[0], v[1])?;
                    weighted_sum(t, y, seed)
                })
            }),
        ),
        ("scale", unary_case(-2.0, 2.0, |t, v| Ok(t.scale(v, -1.7)))),
        (
            "abs",
            case(|rng| {
                let x = away_from_zero(rng, &[3, 5]);
                let seed = rng.gen();
                check_function(&[x], None, |t, v| {
                    let y = t.abs(v[0]);
                    weighted_sum(t, y, seed)
                })
            }),
        ),
        ("neg", unary_case(-2.0, 2.0, |t, v| Ok(t.neg(v)))),
        ("log", unary_case(0.2, 3.0, |t, v| Ok(t.log(v)))),
        ("exp", unary_case(-2.0, 2.0, |t, v| Ok(t.exp(v)))),
        ("gelu", unary_case(-3.0, 3.0, |t, v| Ok(t.gelu(v)))),
        ("layer_norm", unary_case(-2.0, 2.0, |t, v| t.layer_norm(v, 1e-6))),
        ("l2_normalize", unary_case(-2.0, 2.0, |t, v| t.l2_normalize(v, 1e-12))),
        ("softmax", unary_case(-2.0, 2.0, |t, v| t.softmax(v, 1, 0.7))),
        (
            "softmax_axis0",
            unary_case(-2.0, 2.0, |t, v| t.softmax(v, 0, 1.3)),
        ),
        ("sum", unary_case(-1.0, 1.0, |t, v| {
            let s = t.sum(v);
            let sq = t.mul(s, s)?;
            Ok(sq)
        })),
        ("mean", unary_case(-1.0, 1.0, |t, v| {
            let s = t.mean(v);
            Ok(t.exp(s))
        })),
        ("sum_axis", unary_case(-1.0, 1.0, |t, v| t.sum_axis(v, 0))),
        ("mean_axis", unary_case(-1.0, 1.0, |t, v| t.mean_axis(v, 1))),
        (
            "permute",
            case(|rng| {
                let x = uniform(rng, &[2, 3, 4], -1.0, 1.0);
                let seed = rng.gen();
                check_function(&[x], None, |t, v| {
                    let y = t.permute(v[0], &[1, 2, 0])?;
                    weighted_sum(t, y, seed)
                })
            }),
        ),
        (
            "reshape_transpose",
            case(|rng| {
                let x = uniform(rng, &[2, 3, 4], -1.0, 1.0);
                let seed = rng.gen();
                check_function(&[x], None, |t, v| {
                    let y = t.transpose(v[0], 0, 2)?;
                    let y = t.reshape(y, &[4, 6])?;
                    weighted_sum(t, y, seed)
                })
            }),
        ),
        (
            "concat",
            case(|rng| {
                let (a, b) = (uniform(rng, &[2, 2, 3], -1.0, 1.0), uniform(rng, &[2, 4, 3], -1.0, 1.0));
                let seed = rng.gen();
                check_function(&[a, b], None, |t, v| {
                    let y = t.concat(&[v[0], v[1]], 1)?;
                    weighted_sum(t, y, seed)
                })
            }),
        ),
        (
            "gather_scatter_rows",
            case(|rng| {
                let x = uniform(rng, &[2, 5, 3], -1.0, 1.0);
                let idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
                let seed = rng.gen();
                check_function(&[x], None, move |t, v| {
                    let g = t.gather_rows(v[0], &idx)?;
                    let s = t.scatter_rows(g, &[4, 0, 2, 3], 6)?;
                    weighted_sum(t, s, seed)
                })
            }),
        ),
        (
            "matmul",
            case(|rng| {
                let (a, b) = (uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[2, 4, 5], -1.0, 1.0));
                let seed = rng.gen();
                check_function(&[a, b], None, |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    weighted_sum(t, y, seed)
                })
            }),
        ),
        (
            "matmul_broadcast",
            case(|rng| {
                let (a, b) = (uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[4, 2], -1.0, 1.0));
                let (c, d) = (uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[2, 4, 2], -1.0, 1.0));
                let seed = rng.gen();
                check_function(&[a, b, c, d], None, |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    let z = t.matmul(v[2], v[3])?;
                    let s = t.add(y, z)?;
                    weighted_sum(t, s, seed)
                })
            }),
        ),
        (
            "conv_transpose2d",
            case(|rng| {
                let x = uniform(rng, &[2, 3, 2, 2], -1.0, 1.0);
                let k = rng.gen_range(2..4);
                let w = uniform(rng, &[3, 2, k, k], -1.0, 1.0);
                let b = uniform(rng, &[2], -1.0, 1.0);
                let seed = rng.gen();
                check_function(&[x, w, b], None, |t, v| {
                    let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2)?;
                    weighted_sum(t, y, seed)
                })
            }),
        ),
        (
            "efficient_attention",
            case(|rng| {
                let n = rng.gen_range(3..8);
                let d = 4;
                let x = uniform(rng, &[2, n, d], -1.0, 1.0);
                let ws: Vec<Tensor> = (0..4).map(|_| uniform(rng, &[d, d], -0.6, 0.6)).collect();
                let parts = vec![random_partition(rng, n), random_partition(rng, n)];
                let seed = rng.gen();
                let mut inputs = vec![x];
                inputs.extend(ws);
                check_function(&inputs, None, move |t, v| {
                    let w = attention::AttentionWeights::unbiased(v[1], v[2], v[3], v[4]);
                    let y = attention::attention_layer(t, v[0], &w, 2, Some(&parts))?;
                    weighted_sum(t, y.output, seed)
                })
            }),
        ),
        (
            "standard_attention",
            case(|rng| {
                let n = rng.gen_range(2..7);
                let d = 4;
                let x = uniform(rng, &[2, n, d], -1.0, 1.0);
                let ws: Vec<Tensor> = (0..4).map(|_| uniform(rng, &[d, d], -0.6, 0.6)).collect();
                let seed = rng.gen();
                let mut inputs = vec![x];
                inputs.extend(ws);
                check_function(&inputs, None, move |t, v| {
                    let w = attention::AttentionWeights::unbiased(v[1], v[2], v[3], v[4]);
                    let y = attention::attention_layer(t, v[0], &w, 2, None)?;
                    weighted_sum(t, y.output, seed)
                })
            }),
        ),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(cases.len());
    for (name, run) in cases {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(run(&mut rng)?);
        }
        reports.push(GradCheckReport {
            name: name.to_string(),
            trials,
            coordinates: 0,
            max_rel_error: worst,
            tolerance: OP_TOLERANCE,
        });
    }
    Ok(reports)
}

/// Total training loss of the tiny model on a fixed two-image batch,
/// differentiated with respect to a random `fraction` of the student
/// parameter coordinates.
pub fn end_to_end(seed: u64, fraction: f64) -> Result<GradCheckReport> {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let student = cfg.init_params(&mut rng)?;
    let mut teacher = student.clone();
    for t in teacher.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.01..0.01));
    }
    let size = cfg.encoder.image_size;
    let images: Vec<Tensor> = (0..2).map(|_| uniform(&mut rng, &[3, size, size], 0.0, 1.0)).collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let aug = AugConfig {
        global_size: size,
        ..AugConfig::default()
    };
    let batch = build_batch(&refs, &aug, cfg.encoder.patch_size, &mut rng)?;
    let targets = teacher_targets(&teacher, &cfg, &batch.global_clean)?;

    let total = |params: &ParamStore, batch: &TrainBatch, grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, grads);
        let fwd = student_losses(&mut tape, &p, &cfg, batch, &targets, 0)?;
        let value = tape.value(fwd.total).item()?;
        if !grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(fwd.total)?;
        Ok((value, p.grads(&mut tape)))
    };
    let (_, analytic) = total(&student, &batch, true)?;

    let sizes: Vec<usize> = student.tensors().iter().map(Tensor::numel).collect();
    let numel: usize = sizes.iter().sum();
    let count = ((numel as f64 * fraction).ceil() as usize).clamp(1, numel);
    let mut coords: Vec<usize> = rand::seq::index::sample(&mut rng, numel, count).into_vec();
    coords.sort_unstable();

    let mut worst = 0.0f64;
    let mut params = student.clone();
    for flat in coords {
        let (mut i, mut j) = (0, flat);
        while j >= sizes[i] {
            j -= sizes[i];
            i += 1;
        }
        let orig = params.tensors()[i].data()[j];
        params.tensors_mut()[i].data_mut()[j] = orig + FD_STEP;
        let (plus, _) = total(&params, &batch, false)?;
        params.tensors_mut()[i].data_mut()[j] = orig - FD_STEP;
        let (minus, _) = total(&params, &batch, false)?;
        params.tensors_mut()[i].data_mut()[j] = orig;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        let e = relative_error(analytic[i].data()[j], fd);
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    Ok(GradCheckReport {
        name: "total_loss".into(),
        trials: 1,
        coordinates: count,
        max_rel_error: worst,
        tolerance: END_TO_END_TOLERANCE,
    })
}
