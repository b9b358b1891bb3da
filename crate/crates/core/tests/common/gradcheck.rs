//! Every differentiable op and every loss against central finite differences.
//!
//! Each check builds fresh leaves, reduces the output to a scalar with a fixed
//! random weighting, and compares the backward gradient of every input with
//! `(L(x + h) - L(x - h)) / 2h`. The error is measured per input as
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-2)` over the whole
//! gradient vector. Inputs are resampled until they sit away from kinks
//! (relu, clamp and max at their thresholds, |x| at 0, ties in batch-hard
//! mining), where a finite difference does not estimate the derivative.

use cadnet::crgan::{
    feature_disc_loss, feature_gen_loss, image_disc_loss, image_gen_loss, reconstruction_loss,
};
use cadnet::reid::{batch_hard_triplet, classification_loss, identity_loss, triplet_loss};
use cadnet::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const SEEDS: u64 = 20;

struct Input {
    data: Vec<f32>,
    shape: Vec<usize>,
}

fn input(data: Vec<f32>, shape: &[usize]) -> Input {
    Input {
        data,
        shape: shape.to_vec(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Input {
    let n = shape.iter().product();
    input((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape)
}

/// Uniform values at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32, kinks: &[f32], gap: f32) -> Input {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    input(data, shape)
}

fn weighted(out: &Tensor, weights: &[f32]) -> f64 {
    out.to_vec()
        .iter()
        .zip(weights)
        .map(|(&y, &w)| y as f64 * w as f64)
        .sum()
}

/// Returns the worst relative error over all inputs.
fn max_error(inputs: &[Input], seed: u64, f: &dyn Fn(&[Tensor]) -> Result<Tensor>) -> f64 {
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|i| Tensor::from_vec(i.data.clone(), &i.shape).unwrap().requires_grad())
        .collect();
    let out = f(&leaves).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights: Vec<f32> = if out.numel() == 1 {
        vec![1.0]
    } else {
        (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let loss = out
        .mul(&Tensor::from_vec(weights.clone(), out.shape()).unwrap())
        .unwrap()
        .sum();
    loss.backward().unwrap();

    let eval = |which: usize, k: usize, delta: f64| -> f64 {
        let xs: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, inp)| {
                let mut d = inp.data.clone();
                if i == which {
                    d[k] = (d[k] as f64 + delta) as f32;
                }
                Tensor::from_vec(d, &inp.shape).unwrap()
            })
            .collect();
        weighted(&f(&xs).unwrap(), &weights)
    };

    let mut worst = 0.0f64;
    for (i, (inp, leaf)) in inputs.iter().zip(&leaves).enumerate() {
        let analytic: Vec<f64> = leaf
            .grad()
            .unwrap_or_else(|| vec![0.0; inp.data.len()])
            .iter()
            .map(|&g| g as f64)
            .collect();
        let mut diff = 0.0;
        let (mut a_norm, mut n_norm) = (0.0, 0.0);
        for (k, &a) in analytic.iter().enumerate() {
            // the perturbation actually applied after rounding to f32
            let x = inp.data[k] as f64;
            let up = ((x + H) as f32) as f64 - x;
            let down = x - ((x - H) as f32) as f64;
            let numeric = (eval(i, k, H) - eval(i, k, -H)) / (up + down);
            diff += (a - numeric).powi(2);
            a_norm += a * a;
            n_norm += numeric * numeric;
        }
        let err = diff.sqrt() / a_norm.sqrt().max(n_norm.sqrt()).max(1e-2);
        worst = worst.max(err);
    }
    worst
}

/// Worst relative error of every named check over all seeds.
#[derive(Default)]
pub struct Suite {
    pub results: Vec<(String, f64)>,
}

impl Suite {
    fn check(&mut self, name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Input>, f: impl Fn(&[Tensor]) -> Result<Tensor>) {
        let worst = (0..SEEDS)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                max_error(&make(&mut rng), seed, &f)
            })
            .fold(0.0, f64::max);
        self.results.push((name.to_string(), worst));
    }

    pub fn failures(&self) -> Vec<String> {
        self.results
            .iter()
            .filter(|(_, e)| !(*e < TOL))
            .map(|(n, e)| format!("{n}: {e:.2e}"))
            .collect()
    }
}

pub type Group = fn(&mut Suite);

pub const GROUPS: [(&str, Group); 10] = [
    ("elementwise_binary", elementwise_binary),
    ("elementwise_unary", elementwise_unary),
    ("reductions_and_reshapes", reductions_and_reshapes),
    ("linear_algebra", linear_algebra),
    ("spatial", spatial),
    ("adversarial_losses", adversarial_losses),
    ("reconstruction", reconstruction),
    ("identity", identity),
    ("triplet", triplet),
    ("combined_objective", combined_objective),
];

pub fn elementwise_binary(s: &mut Suite) {
    let two = |rng: &mut ChaCha8Rng| vec![uniform(rng, &[3, 4], -2.0, 2.0), uniform(rng, &[3, 4], -2.0, 2.0)];
    s.check("add", two, |x| x[0].add(&x[1]));
    s.check("sub", two, |x| x[0].sub(&x[1]));
    s.check("mul", two, |x| x[0].mul(&x[1]));
    s.check("mul (same tensor twice)", |rng| vec![uniform(rng, &[5], -2.0, 2.0)], |x| x[0].mul(&x[0]));
}

pub fn elementwise_unary(s: &mut Suite) {
    let any = |rng: &mut ChaCha8Rng| vec![uniform(rng, &[2, 5], -3.0, 3.0)];
    s.check("scale", any, |x| Ok(x[0].scale(-1.7)));
    s.check("add_scalar", any, |x| Ok(x[0].add_scalar(0.3)));
    s.check("neg", any, |x| Ok(x[0].neg()));
    s.check("sigmoid", any, |x| Ok(x[0].sigmoid()));
    let off_zero = |rng: &mut ChaCha8Rng| vec![away_from(rng, &[2, 5], -3.0, 3.0, &[0.0], 0.01)];
    s.check("relu", off_zero, |x| Ok(x[0].relu()));
    s.check("leaky_relu", off_zero, |x| Ok(x[0].leaky_relu(0.2)));
    s.check(
        "l1_mean",
        |rng| vec![away_from(rng, &[4], -3.0, 3.0, &[0.0], 0.01)],
        |x| Ok(x[0].l1_mean()),
    );
    s.check(
        "max_with_scalar",
        |rng| vec![away_from(rng, &[10], -1.0, 1.0, &[0.25], 0.01)],
        |x| Ok(x[0].max_with_scalar(0.25)),
    );
    s.check(
        "clamp",
        |rng| vec![away_from(rng, &[10], -1.0, 2.0, &[0.0, 1.0], 0.01)],
        |x| Ok(x[0].clamp(0.0, 1.0)),
    );
    s.check("log", |rng| vec![uniform(rng, &[8], 0.5, 3.0)], |x| Ok(x[0].log()));
}

pub fn reductions_and_reshapes(s: &mut Suite) {
    let any = |rng: &mut ChaCha8Rng| vec![uniform(rng, &[2, 3, 2, 2], -2.0, 2.0)];
    s.check("sum", any, |x| Ok(x[0].sum()));
    s.check("mean", any, |x| Ok(x[0].mean()));
    s.check("reshape", any, |x| x[0].reshape(&[6, 4]));
    s.check("global_avg_pool", any, |x| x[0].global_avg_pool());
    s.check("gather", |rng| vec![uniform(rng, &[6], -2.0, 2.0)], |x| x[0].gather(&[4, 0, 4, 2]));
    s.check(
        "concat",
        |rng| vec![uniform(rng, &[2, 2, 2, 3], -1.0, 1.0), uniform(rng, &[2, 3, 2, 3], -1.0, 1.0)],
        |x| Tensor::concat(&[x[0].clone(), x[1].clone()]),
    );
    s.check(
        "softmax",
        |rng| vec![uniform(rng, &[3, 5], -2.0, 2.0)],
        |x| x[0].softmax(),
    );
}

pub fn linear_algebra(s: &mut Suite) {
    s.check(
        "matmul",
        |rng| vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4, 2], -1.0, 1.0)],
        |x| x[0].matmul(&x[1]),
    );
    s.check(
        "add_bias",
        |rng| vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0)],
        |x| x[0].add_bias(&x[1]),
    );
    s.check(
        "pairwise_distances",
        |rng| vec![uniform(rng, &[5, 3], -1.0, 1.0)],
        |x| x[0].pairwise_distances(),
    );
}

pub fn spatial(s: &mut Suite) {
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        s.check(
            &format!("conv2d stride {stride} pad {pad}"),
            |rng| {
                vec![
                    uniform(rng, &[2, 2, 5, 4], -1.0, 1.0),
                    uniform(rng, &[3, 2, 3, 3], -0.5, 0.5),
                    uniform(rng, &[3], -0.5, 0.5),
                ]
            },
            |x| x[0].conv2d(&x[1], &x[2], stride, pad),
        );
    }
    s.check(
        "avg_pool2d",
        |rng| vec![uniform(rng, &[2, 2, 5, 4], -1.0, 1.0)],
        |x| x[0].avg_pool2d(2, 2),
    );
    s.check(
        "bilinear_resize up",
        |rng| vec![uniform(rng, &[1, 2, 3, 2], -1.0, 1.0)],
        |x| x[0].bilinear_resize(7, 5),
    );
    s.check(
        "bilinear_resize down",
        |rng| vec![uniform(rng, &[1, 2, 6, 4], -1.0, 1.0)],
        |x| x[0].bilinear_resize(3, 3),
    );
}

/// Discriminator outputs strictly inside the clamp range.
fn probs(rng: &mut ChaCha8Rng, n: usize) -> Input {
    uniform(rng, &[n, 1], 0.05, 0.95)
}

pub fn adversarial_losses(s: &mut Suite) {
    s.check("feature_disc_loss", |rng| vec![probs(rng, 4), probs(rng, 4)], |x| {
        feature_disc_loss(&x[0], &x[1])
    });
    s.check("feature_gen_loss", |rng| vec![probs(rng, 4)], |x| Ok(feature_gen_loss(&x[0])));
    s.check(
        "image_disc_loss",
        |rng| vec![probs(rng, 4), probs(rng, 4), probs(rng, 4)],
        |x| image_disc_loss(&x[0], &x[1], &x[2], 2.0),
    );
    s.check("image_gen_loss", |rng| vec![probs(rng, 4), probs(rng, 4)], |x| {
        image_gen_loss(&x[0], &x[1])
    });
}

pub fn reconstruction(s: &mut Suite) {
    // differences kept away from 0, where |x| has a kink
    s.check(
        "reconstruction_loss",
        |rng| {
            let target_hr = uniform(rng, &[2, 3, 4, 2], 0.2, 0.8);
            let target_lr = uniform(rng, &[2, 3, 4, 2], 0.2, 0.8);
            let offset = |rng: &mut ChaCha8Rng, t: &Input| {
                let d = away_from(rng, &t.shape, -0.2, 0.2, &[0.0], 0.01);
                input(t.data.iter().zip(&d.data).map(|(a, b)| a + b).collect(), &t.shape)
            };
            let rec_hr = offset(rng, &target_hr);
            let rec_lr = offset(rng, &target_lr);
            vec![rec_hr, target_hr, rec_lr, target_lr]
        },
        |x| reconstruction_loss(&x[0], &x[1], &x[2], &x[3]),
    );
}

fn softmax_inputs(rng: &mut ChaCha8Rng) -> Input {
    uniform(rng, &[4, 3], -1.5, 1.5)
}

pub fn identity(s: &mut Suite) {
    s.check("identity_loss", |rng| vec![softmax_inputs(rng)], |x| {
        identity_loss(&x[0].softmax()?, &[0, 2, 1, 2])
    });
}

const LABELS: [usize; 6] = [0, 0, 1, 1, 2, 2];
const MARGIN: f32 = 0.3;

/// Embeddings whose batch-hard choices and hinges are stable under a
/// perturbation of `H` in any coordinate.
fn triplet_embeddings(rng: &mut ChaCha8Rng) -> Input {
    loop {
        let e = uniform(rng, &[6, 3], -1.0, 1.0);
        if triplet_is_stable(&e.data, &LABELS, MARGIN) {
            break e;
        }
    }
}

fn triplet_is_stable(x: &[f32], labels: &[usize], margin: f32) -> bool {
    let n = labels.len();
    let d = x.len() / n;
    let dist = |i: usize, j: usize| -> f32 {
        (0..d).map(|k| (x[i * d + k] - x[j * d + k]).powi(2)).sum::<f32>().sqrt()
    };
    const GAP: f32 = 0.02;
    (0..n).all(|a| {
        let mut pos: Vec<f32> = (0..n).filter(|&j| j != a && labels[j] == labels[a]).map(|j| dist(a, j)).collect();
        let mut neg: Vec<f32> = (0..n).filter(|&j| labels[j] != labels[a]).map(|j| dist(a, j)).collect();
        pos.sort_by(f32::total_cmp);
        neg.sort_by(f32::total_cmp);
        let pos_ok = pos.len() < 2 || pos[pos.len() - 1] - pos[pos.len() - 2] > GAP;
        let neg_ok = neg.len() < 2 || neg[1] - neg[0] > GAP;
        let hinge = margin + pos[pos.len() - 1] - neg[0];
        pos_ok && neg_ok && hinge.abs() > GAP
    })
}

pub fn triplet(s: &mut Suite) {
    s.check("batch_hard_triplet", |rng| vec![triplet_embeddings(rng)], |x| {
        batch_hard_triplet(&x[0], &LABELS, MARGIN)
    });
    s.check(
        "triplet_loss (two streams)",
        |rng| vec![triplet_embeddings(rng), triplet_embeddings(rng)],
        |x| triplet_loss(&x[0], &LABELS, &x[1], &LABELS, MARGIN),
    );
}

pub fn combined_objective(s: &mut Suite) {
    // Every term of the objective evaluated on one shared graph and stacked,
    // so the random weighting exercises the full Jacobian. The embeddings feed
    // both L_tri and, through a linear classifier, L_id.
    s.check(
        "identity + triplet + adversarial + reconstruction",
        |rng| {
            let hr = uniform(rng, &[1, 3, 2, 1], 0.2, 0.8);
            let d = away_from(rng, &hr.shape, -0.2, 0.2, &[0.0], 0.01);
            let rec = input(hr.data.iter().zip(&d.data).map(|(a, b)| a + b).collect(), &hr.shape);
            vec![
                uniform(rng, &[3, 3], -3.0, 3.0),
                triplet_embeddings(rng),
                probs(rng, 6),
                probs(rng, 6),
                rec,
                hr,
            ]
        },
        |x| {
            let id = identity_loss(&x[1].matmul(&x[0])?.softmax()?, &LABELS)?;
            let tri = batch_hard_triplet(&x[1], &LABELS, MARGIN)?;
            let terms = [
                classification_loss(&id, &tri)?,
                feature_gen_loss(&x[2]),
                image_gen_loss(&x[3], &x[3])?,
                feature_disc_loss(&x[2], &x[3])?,
                reconstruction_loss(&x[4], &x[5], &x[4], &x[5])?,
            ];
            let rows = terms.iter().map(|t| t.reshape(&[1, 1])).collect::<Result<Vec<_>>>()?;
            Tensor::concat(&rows)
        },
    );
}
