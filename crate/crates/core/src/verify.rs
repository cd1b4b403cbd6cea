//! Independent oracles: central finite differences for every tape op, Monte
//! Carlo estimates for the Gaussian machinery, and quadrature of the log
//! evidence for the linear miniature.
//!
//! None of these routines call `Tape::backward` on the quantity they check;
//! they only evaluate forward values.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::distributions::{self, DiagonalGaussian};
use crate::error::Result;
use crate::model::miniature::LinearMiniature;
use crate::tensor::nn::{conv_gru_step, GruVars};
use crate::tensor::{Padding, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    /// Worst observed value of the checked statistic.
    pub worst: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, instances: usize, worst: f64, threshold: f64) -> Self {
        CheckOutcome {
            name: name.into(),
            instances,
            worst,
            threshold,
            passed: worst.is_finite() && worst < threshold,
        }
    }
}

type Builder = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Relative error `|a - n| / max(|a|, |n|)` between analytic and numeric
/// gradients, measured in the 2-norm per input and maximized over inputs.
pub fn gradient_error(build: &Builder, inputs: &[Tensor<f64>], projection_seed: u64) -> Result<f64> {
    // Project the output onto a fixed random direction so that every output
    // element contributes to the scalar being differentiated.
    let project = |tape: &mut Tape<f64>, out: Var| -> Result<Var> {
        let shape = tape.shape(out).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(projection_seed);
        let r = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let r = tape.constant(r);
        let prod = tape.mul(out, r)?;
        tape.sum(prod)
    };
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let loss = project(&mut tape, out)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let loss = project(&mut tape, out)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(*v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - FD_STEP;
            let dn = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - dn) / (2.0 * FD_STEP);
            diff2 += (analytic[j] - numeric).powi(2);
            a2 += analytic[j].powi(2);
            n2 += numeric.powi(2);
        }
        let scale = a2.sqrt().max(n2.sqrt());
        let err = if scale < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / scale };
        worst = worst.max(err);
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[margin, hi]` and random sign, keeping clear of
/// kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, margin: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(margin..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.random_range(1..=3);
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

fn image_shape(rng: &mut ChaCha8Rng, channels: usize) -> Vec<usize> {
    vec![
        rng.random_range(1..=2),
        rng.random_range(2..=5),
        rng.random_range(2..=5),
        channels,
    ]
}

struct OpCase {
    name: &'static str,
    /// Draws the inputs of one random instance and returns the op to apply.
    make: Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Builder>)>,
}

fn unary_case(
    name: &'static str,
    sample: fn(&mut ChaCha8Rng, Vec<usize>) -> Tensor<f64>,
    op: fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> OpCase {
    OpCase {
        name,
        make: Box::new(move |rng| {
            let shape = small_shape(rng);
            let x = sample(rng, shape);
            (vec![x], Box::new(move |t: &mut Tape<f64>, v: &[Var]| op(t, v[0])))
        }),
    }
}

fn binary_case(
    name: &'static str,
    sample_b: fn(&mut ChaCha8Rng, Vec<usize>) -> Tensor<f64>,
    op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
) -> OpCase {
    OpCase {
        name,
        make: Box::new(move |rng| {
            let shape = small_shape(rng);
            let a = uniform(rng, shape.clone(), -2.0, 2.0);
            let b = sample_b(rng, shape);
            (vec![a, b], Box::new(move |t: &mut Tape<f64>, v: &[Var]| op(t, v[0], v[1])))
        }),
    }
}

fn any_value(rng: &mut ChaCha8Rng, s: Vec<usize>) -> Tensor<f64> {
    uniform(rng, s, -2.0, 2.0)
}

fn op_cases() -> Vec<OpCase> {
    let mut cases = vec![
        unary_case("neg", any_value, |t, x| t.neg(x)),
        unary_case("exp", any_value, |t, x| t.exp(x)),
        unary_case("log", |r, s| uniform(r, s, 0.2, 3.0), |t, x| t.log(x)),
        unary_case("square", any_value, |t, x| t.square(x)),
        unary_case("sigmoid", |r, s| uniform(r, s, -4.0, 4.0), |t, x| t.sigmoid(x)),
        unary_case("tanh", any_value, |t, x| t.tanh(x)),
        unary_case("softplus", |r, s| uniform(r, s, -4.0, 4.0), |t, x| t.softplus(x)),
        unary_case("abs", |r, s| away_from_zero(r, s, 0.05, 2.0), |t, x| t.abs(x)),
        unary_case(
            "leaky_relu",
            |r, s| away_from_zero(r, s, 0.05, 2.0),
            |t, x| t.leaky_relu(x, 0.2),
        ),
        unary_case("scale", any_value, |t, x| t.scale(x, -1.7)),
        unary_case("add_scalar", any_value, |t, x| t.add_scalar(x, 0.3)),
        // Interior points and points clamped on either side, all away from the bounds.
        unary_case(
            "clamp",
            |r, s| {
                Tensor::from_fn(s, |_| match r.random_range(0..3) {
                    0 => r.random_range(-2.0..-1.05),
                    1 => r.random_range(-0.95..0.95),
                    _ => r.random_range(1.05..2.0),
                })
            },
            |t, x| t.clamp(x, -1.0, 1.0),
        ),
        unary_case("sum", any_value, |t, x| t.sum(x)),
        unary_case("mean", any_value, |t, x| t.mean(x)),
        binary_case("add", any_value, |t, a, b| t.add(a, b)),
        binary_case("sub", any_value, |t, a, b| t.sub(a, b)),
        binary_case("mul", any_value, |t, a, b| t.mul(a, b)),
        binary_case(
            "div",
            |r, s| away_from_zero(r, s, 0.5, 2.0),
            |t, a, b| t.div(a, b),
        ),
        binary_case("mse", any_value, |t, a, b| t.mse(a, b)),
    ];

    cases.push(OpCase {
        name: "l1",
        make: Box::new(|rng| {
            let shape = small_shape(rng);
            let a = uniform(rng, shape.clone(), -2.0, 2.0);
            let gap = away_from_zero(rng, shape, 0.05, 1.0);
            let b = Tensor::from_fn(a.shape().to_vec(), |i| a.data()[i] + gap.data()[i]);
            (vec![a, b], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.l1(v[0], v[1])))
        }),
    });
    cases.push(OpCase {
        name: "concat_channels",
        make: Box::new(|rng| {
            let mut shape = image_shape(rng, 1);
            shape[3] = rng.random_range(1..=3);
            let a = uniform(rng, shape.clone(), -1.0, 1.0);
            shape[3] = rng.random_range(1..=3);
            let b = uniform(rng, shape, -1.0, 1.0);
            (
                vec![a, b],
                Box::new(|t: &mut Tape<f64>, v: &[Var]| t.concat_channels(&[v[0], v[1], v[0]])),
            )
        }),
    });
    cases.push(OpCase {
        name: "concat_batch",
        make: Box::new(|rng| {
            let mut shape = small_shape(rng);
            let a = uniform(rng, shape.clone(), -1.0, 1.0);
            shape[0] = rng.random_range(1..=3);
            let b = uniform(rng, shape, -1.0, 1.0);
            (
                vec![a, b],
                Box::new(|t: &mut Tape<f64>, v: &[Var]| t.concat_batch(&[v[1], v[0], v[1]])),
            )
        }),
    });
    cases.push(OpCase {
        name: "slice_batch",
        make: Box::new(|rng| {
            let mut shape = small_shape(rng);
            shape[0] = rng.random_range(2..=5);
            let start = rng.random_range(0..shape[0]);
            let len = rng.random_range(1..=shape[0] - start);
            let x = uniform(rng, shape, -1.0, 1.0);
            (
                vec![x],
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.slice_batch(v[0], start, len)),
            )
        }),
    });
    cases.push(OpCase {
        name: "tile_spatial",
        make: Box::new(|rng| {
            let b = rng.random_range(1..=3);
            let c = rng.random_range(1..=3);
            let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let x = uniform(rng, vec![b, c], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.tile_spatial(v[0], h, w)),
            )
        }),
    });
    cases.push(OpCase {
        name: "group_norm",
        make: Box::new(|rng| {
            let groups = rng.random_range(1..=2);
            let c = groups * rng.random_range(1..=3);
            let shape = image_shape(rng, c);
            let x = uniform(rng, shape, -2.0, 2.0);
            let gamma = uniform(rng, vec![c], 0.5, 1.5);
            let beta = uniform(rng, vec![c], -0.5, 0.5);
            (
                vec![x, gamma, beta],
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                    t.group_norm(v[0], v[1], v[2], groups, 1e-5)
                }),
            )
        }),
    });
    for (name, stride, padding) in [
        ("conv2d_same", 1, Padding::Same),
        ("conv2d_same_stride2", 2, Padding::Same),
        ("conv2d_valid", 1, Padding::Valid),
    ] {
        cases.push(OpCase {
            name,
            make: Box::new(move |rng| {
                let cin = rng.random_range(1..=3);
                let cout = rng.random_range(1..=3);
                let mut shape = image_shape(rng, cin);
                shape[1] = shape[1].max(3);
                shape[2] = shape[2].max(3);
                let k = if padding == Padding::Valid && rng.random_bool(0.5) { 1 } else { 3 };
                let x = uniform(rng, shape, -1.0, 1.0);
                let w = uniform(rng, vec![k, k, cin, cout], -1.0, 1.0);
                let b = uniform(rng, vec![cout], -0.5, 0.5);
                (
                    vec![x, w, b],
                    Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                        t.conv2d(v[0], v[1], v[2], stride, padding)
                    }),
                )
            }),
        });
    }
    cases.push(OpCase {
        name: "conv2d_transpose",
        make: Box::new(|rng| {
            let cin = rng.random_range(1..=3);
            let cout = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let shape = image_shape(rng, cin);
            let x = uniform(rng, shape, -1.0, 1.0);
            let w = uniform(rng, vec![3, 3, cout, cin], -1.0, 1.0);
            let b = uniform(rng, vec![cout], -0.5, 0.5);
            (
                vec![x, w, b],
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                    t.conv2d_transpose(v[0], v[1], v[2], stride)
                }),
            )
        }),
    });
    cases.push(OpCase {
        name: "conv_gru_step",
        make: Box::new(|rng| {
            let cin = rng.random_range(1..=2);
            let c = rng.random_range(1..=2);
            let shape = image_shape(rng, c);
            let state = uniform(rng, shape.clone(), -1.0, 1.0);
            let mut ishape = shape;
            ishape[3] = cin;
            let input = uniform(rng, ishape, -1.0, 1.0);
            let mut inputs = vec![state, input];
            for _ in 0..3 {
                inputs.push(uniform(rng, vec![3, 3, cin + c, c], -0.5, 0.5));
                inputs.push(uniform(rng, vec![c], -0.5, 0.5));
            }
            (
                inputs,
                Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                    let w = GruVars {
                        update_w: v[2],
                        update_b: v[3],
                        reset_w: v[4],
                        reset_b: v[5],
                        cand_w: v[6],
                        cand_b: v[7],
                    };
                    conv_gru_step(t, v[0], v[1], &w)
                }),
            )
        }),
    });
    cases.push(OpCase {
        name: "kl_divergence",
        make: Box::new(|rng| {
            let shape = small_shape(rng);
            let mq = uniform(rng, shape.clone(), -1.0, 1.0);
            let lq = uniform(rng, shape.clone(), -1.0, 1.0);
            let mp = uniform(rng, shape.clone(), -1.0, 1.0);
            let lp = uniform(rng, shape, -1.0, 1.0);
            (
                vec![mq, lq, mp, lp],
                Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                    let q = DiagonalGaussian::from_log_std(t, v[0], v[1])?;
                    let p = DiagonalGaussian::from_log_std(t, v[2], v[3])?;
                    distributions::kl_divergence(t, &q, &p)
                }),
            )
        }),
    });
    cases.push(OpCase {
        name: "kl_divergence_fixed_posterior",
        make: Box::new(|rng| {
            let shape = small_shape(rng);
            let mq = uniform(rng, shape.clone(), -1.0, 1.0);
            let mp = uniform(rng, shape.clone(), -1.0, 1.0);
            let raw = uniform(rng, shape, -1.0, 1.0);
            (
                vec![mq, mp, raw],
                Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                    let q = DiagonalGaussian::fixed(v[0], 0.1)?;
                    let p = DiagonalGaussian::from_softplus(t, v[1], v[2])?;
                    distributions::kl_divergence(t, &q, &p)
                }),
            )
        }),
    });
    cases.push(OpCase {
        name: "sample_reparam",
        make: Box::new(|rng| {
            let shape = small_shape(rng);
            let m = uniform(rng, shape.clone(), -1.0, 1.0);
            let ls = uniform(rng, shape.clone(), -1.0, 1.0);
            let noise: Tensor<f64> = Tensor::from_fn(shape, |_| rng.sample(StandardNormal));
            (
                vec![m, ls],
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                    let d = DiagonalGaussian::from_log_std(t, v[0], v[1])?;
                    distributions::sample_reparam(t, &d, noise.clone())
                }),
            )
        }),
    });
    cases.push(OpCase {
        name: "gaussian_log_prob",
        make: Box::new(|rng| {
            let shape = small_shape(rng);
            let x = uniform(rng, shape.clone(), -1.0, 1.0);
            let m = uniform(rng, shape, -1.0, 1.0);
            (
                vec![x, m],
                Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                    distributions::gaussian_log_prob(t, v[0], v[1], 0.8)
                }),
            )
        }),
    });
    cases
}

/// Names of every op covered by [`gradient_suite`].
pub fn gradient_suite_ops() -> Vec<&'static str> {
    op_cases().iter().map(|c| c.name).collect()
}

/// Finite-difference check of every registered op over `instances` random
/// draws each.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (ci, case) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ci as u64 + 1) << 32));
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let (inputs, build) = (case.make)(&mut rng);
            let err = gradient_error(build.as_ref(), &inputs, seed.wrapping_add(i as u64))?;
            worst = worst.max(err);
        }
        out.push(CheckOutcome::new(case.name, instances, worst, GRAD_TOLERANCE));
    }
    Ok(out)
}

fn normal_log_density(x: f64, mean: f64, std: f64) -> f64 {
    -0.5 * (2.0 * PI * std * std).ln() - (x - mean).powi(2) / (2.0 * std * std)
}

/// Closed-form KL between two diagonal Gaussians against a Monte Carlo
/// estimate of `E_q[log q - log p]`.
#[derive(Clone, Debug, Serialize)]
pub struct KlMonteCarlo {
    pub closed_form: f64,
    pub estimate: f64,
    pub std_error: f64,
}

impl KlMonteCarlo {
    pub fn z_score(&self) -> f64 {
        (self.closed_form - self.estimate).abs() / self.std_error
    }
}

pub fn kl_monte_carlo(dim: usize, samples: usize, seed: u64) -> Result<KlMonteCarlo> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..dim).map(|_| rng.random_range(lo..hi)).collect() };
    let (mq, lq, mp, lp) = (draw(-1.0, 1.0), draw(-1.0, 0.5), draw(-1.0, 1.0), draw(-1.0, 0.5));

    let mut tape = Tape::<f64>::new();
    let leaf = |tape: &mut Tape<f64>, v: &[f64]| tape.constant(Tensor::new(vec![dim], v.to_vec()).unwrap());
    let (a, b, c, d) = (leaf(&mut tape, &mq), leaf(&mut tape, &lq), leaf(&mut tape, &mp), leaf(&mut tape, &lp));
    let q = DiagonalGaussian::from_log_std(&mut tape, a, b)?;
    let p = DiagonalGaussian::from_log_std(&mut tape, c, d)?;
    let kl = distributions::kl_divergence(&mut tape, &q, &p)?;
    let closed_form = tape.value(kl).item();

    let sq: Vec<f64> = lq.iter().map(|l| l.exp()).collect();
    let sp: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..samples {
        let mut term = 0.0;
        for i in 0..dim {
            let eps: f64 = rng.sample(StandardNormal);
            let z = mq[i] + sq[i] * eps;
            term += normal_log_density(z, mq[i], sq[i]) - normal_log_density(z, mp[i], sp[i]);
        }
        sum += term;
        sum2 += term * term;
    }
    let n = samples as f64;
    let estimate = sum / n;
    let var = (sum2 / n - estimate * estimate) * n / (n - 1.0);
    Ok(KlMonteCarlo {
        closed_form,
        estimate,
        std_error: (var / n).sqrt(),
    })
}

/// Smallest closed-form KL over `pairs` random pairs of `dim`-d Gaussians,
/// with means in `[-3, 3]` and log standard deviations in `[-2, 2]`. Identical
/// pairs are mixed in, where the value must come out exactly zero.
pub fn kl_min_over_pairs(pairs: usize, dim: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for i in 0..pairs {
        let mut draw = |lo: f64, hi: f64| Tensor::from_fn(vec![dim], |_| rng.random_range(lo..hi));
        let (mq, lq) = (draw(-3.0, 3.0), draw(-2.0, 2.0));
        let (mp, lp) = if i % 10 == 0 {
            (mq.clone(), lq.clone())
        } else {
            (draw(-3.0, 3.0), draw(-2.0, 2.0))
        };
        let mut tape = Tape::<f64>::new();
        let (a, b, c, d) = (tape.constant(mq), tape.constant(lq), tape.constant(mp), tape.constant(lp));
        let q = DiagonalGaussian::from_log_std(&mut tape, a, b)?;
        let p = DiagonalGaussian::from_log_std(&mut tape, c, d)?;
        let kl = distributions::kl_divergence(&mut tape, &q, &p)?;
        worst = worst.min(tape.value(kl).item());
    }
    Ok(worst)
}

/// Largest `|empirical - parameter| / std_error` over the mean and standard
/// deviation of `samples` reparameterized draws from a random diagonal Gaussian.
pub fn sampling_z_score(dim: usize, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let log_stds: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut sums = vec![0.0; dim];
    let mut sums2 = vec![0.0; dim];
    for _ in 0..samples {
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::new(vec![dim], means.clone())?);
        let l = tape.constant(Tensor::new(vec![dim], log_stds.clone())?);
        let d = DiagonalGaussian::from_log_std(&mut tape, m, l)?;
        let noise = Tensor::from_fn(vec![dim], |_| rng.sample(StandardNormal));
        let z = distributions::sample_reparam(&mut tape, &d, noise)?;
        for (i, &v) in tape.value(z).data().iter().enumerate() {
            sums[i] += v;
            sums2[i] += v * v;
        }
    }
    let n = samples as f64;
    let mut worst: f64 = 0.0;
    for i in 0..dim {
        let std = log_stds[i].exp();
        let mean_hat = sums[i] / n;
        let var_hat = (sums2[i] / n - mean_hat * mean_hat) * n / (n - 1.0);
        // se(mean) = s / sqrt(n); se(std) ~= s / sqrt(2 (n - 1)) for a Gaussian.
        worst = worst.max((mean_hat - means[i]).abs() / (std / n.sqrt()));
        worst = worst.max((var_hat.sqrt() - std).abs() / (std / (2.0 * (n - 1.0)).sqrt()));
    }
    Ok(worst)
}

/// `log p(x)` of the linear miniature by trapezoidal quadrature of
/// `p(z) p(x | z)` on `points` nodes spanning twelve posterior standard
/// deviations either side of the posterior mode.
pub fn quadrature_log_evidence(m: &LinearMiniature, x: f64, points: usize) -> f64 {
    let prior_std = m.prior_log_std.exp();
    let (center, spread) = m.exact_posterior(x);
    let (lo, hi) = (center - 12.0 * spread, center + 12.0 * spread);
    let h = (hi - lo) / (points - 1) as f64;
    let logs: Vec<f64> = (0..points)
        .map(|i| {
            let z = lo + h * i as f64;
            normal_log_density(z, m.prior_mean, prior_std)
                + normal_log_density(x, m.dec_weight * z + m.dec_bias, m.dec_std)
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    for (i, l) in logs.iter().enumerate() {
        let w = if i == 0 || i == points - 1 { 0.5 } else { 1.0 };
        acc += w * (l - max).exp();
    }
    max + (acc * h).ln()
}

/// `elbo - log p(x)` for `count` random miniatures; every value must be `<= 0`
/// up to quadrature error.
pub fn elbo_gaps(count: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaps = Vec::with_capacity(count);
    for _ in 0..count {
        let m = LinearMiniature::random(&mut rng);
        let x = rng.random_range(-3.0..3.0);
        let elbo = m.elbo(x)?;
        gaps.push(elbo - quadrature_log_evidence(&m, x, 2048));
    }
    Ok(gaps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_check_smoke() {
        for outcome in gradient_suite(3, 7).unwrap() {
            assert!(outcome.passed, "{outcome:?}");
        }
    }

    #[test]
    fn quadrature_matches_closed_form_evidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let m = LinearMiniature::random(&mut rng);
            let x = rng.random_range(-3.0..3.0);
            assert!((quadrature_log_evidence(&m, x, 2048) - m.log_evidence(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_differences_catch_a_wrong_gradient() {
        // abs() near a kink is fine, but a deliberately wrong composite is not:
        // d/dx of sum(x * x) evaluated through mul is checked, while a constant
        // copy of x hides half of it.
        let build: Box<Builder> = Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            let c = t.constant(t.value(v[0]).clone());
            t.mul(v[0], c)
        });
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = gradient_error(build.as_ref(), &[x], 1).unwrap();
        assert!(err > 0.1, "{err}");
    }
}
