//! Central finite-difference checks for every analytic gradient in the crate.
//!
//! The probes here only evaluate loss values; they never call the gradient code
//! they are compared against.
//!
//! The clustering cost is checked against the objective its gradient actually
//! descends: each directional term keeps its first distribution frozen at the
//! unperturbed logits, so a logit perturbation only moves the second argument.

use crate::constraints::{ConstraintTuple, Relationship};
use crate::error::Result;
use crate::network::{backward, forward, NetworkParams};
use crate::numeric::{softmax_rows, Matrix, Rng};
use crate::pairloss::{
    batch_loss_and_logit_grad, cross_entropy_loss_and_grad, hinge_embedding_loss_and_grad,
    LossConfig, Reduction,
};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Floor on the denominator of the relative error, so entries that are zero
/// up to rounding are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn clamp_row(row: &[f64], eps: f64) -> Vec<f64> {
    row.iter().map(|v| v.clamp(eps, 1.0)).collect()
}

fn divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

fn term(div: f64, rel: Relationship, margin: f64) -> f64 {
    match rel {
        Relationship::Similar => div,
        Relationship::Dissimilar => (margin - div).max(0.0),
    }
}

/// Constant-side objective: for each tuple,
/// `loss(frozen_i || live_j) + loss(frozen_j || live_i)`.
pub fn frozen_side_objective(
    frozen: &Matrix,
    live_logits: &Matrix,
    tuples: &[ConstraintTuple],
    cfg: &LossConfig,
) -> f64 {
    let live = softmax_rows(live_logits);
    let total: f64 = tuples
        .iter()
        .map(|t| {
            let fi = clamp_row(frozen.row(t.i), cfg.epsilon);
            let fj = clamp_row(frozen.row(t.j), cfg.epsilon);
            let li = clamp_row(live.row(t.i), cfg.epsilon);
            let lj = clamp_row(live.row(t.j), cfg.epsilon);
            term(divergence(&fi, &lj), t.relationship, cfg.margin)
                + term(divergence(&fj, &li), t.relationship, cfg.margin)
        })
        .sum();
    match cfg.reduction {
        Reduction::Sum => total,
        Reduction::Mean if !tuples.is_empty() => total / tuples.len() as f64,
        Reduction::Mean => 0.0,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOutcome {
    pub max_relative_error: f64,
    pub entries: usize,
}

pub fn check_pair_logits(
    logits: &Matrix,
    tuples: &[ConstraintTuple],
    cfg: &LossConfig,
    step: f64,
) -> Result<CheckOutcome> {
    let (_, analytic) = batch_loss_and_logit_grad(logits, tuples, cfg)?;
    let frozen = softmax_rows(logits);
    let (rows, cols) = logits.shape();
    // Differencing one tuple at a time keeps round-off proportional to a
    // single term rather than to the whole sum.
    let per_tuple = LossConfig {
        reduction: Reduction::Sum,
        ..*cfg
    };
    let mut numeric = vec![0.0; rows * cols];
    for t in tuples {
        let single = std::slice::from_ref(t);
        let g = numeric_gradient(logits.data(), step, |z| {
            let live = Matrix::new(rows, cols, z.to_vec()).expect("same shape");
            frozen_side_objective(&frozen, &live, single, &per_tuple)
        });
        numeric.iter_mut().zip(g).for_each(|(acc, v)| *acc += v);
    }
    if cfg.reduction == Reduction::Mean && !tuples.is_empty() {
        numeric.iter_mut().for_each(|v| *v /= tuples.len() as f64);
    }
    Ok(CheckOutcome {
        max_relative_error: max_relative_error(analytic.data(), &numeric),
        entries: numeric.len(),
    })
}

fn cross_entropy_value(logits: &Matrix, labels: &[usize]) -> f64 {
    let probs = softmax_rows(logits);
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -probs[(r, y)].ln())
        .sum::<f64>()
        / labels.len() as f64
}

pub fn check_cross_entropy(logits: &Matrix, labels: &[usize], step: f64) -> Result<CheckOutcome> {
    let (_, analytic) = cross_entropy_loss_and_grad(logits, labels)?;
    let (rows, cols) = logits.shape();
    let numeric = numeric_gradient(logits.data(), step, |z| {
        cross_entropy_value(&Matrix::new(rows, cols, z.to_vec()).unwrap(), labels)
    });
    Ok(CheckOutcome {
        max_relative_error: max_relative_error(analytic.data(), &numeric),
        entries: numeric.len(),
    })
}

fn hinge_value(e: &Matrix, tuples: &[ConstraintTuple], margin: f64) -> f64 {
    tuples
        .iter()
        .map(|t| {
            let d2: f64 = e
                .row(t.i)
                .iter()
                .zip(e.row(t.j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            match t.relationship {
                Relationship::Similar => d2,
                Relationship::Dissimilar => (margin - d2.sqrt()).max(0.0).powi(2),
            }
        })
        .sum()
}

pub fn check_hinge_embedding(
    embeddings: &Matrix,
    tuples: &[ConstraintTuple],
    margin: f64,
    step: f64,
) -> Result<CheckOutcome> {
    let (_, analytic) = hinge_embedding_loss_and_grad(embeddings, tuples, margin)?;
    let (rows, cols) = embeddings.shape();
    let numeric = numeric_gradient(embeddings.data(), step, |z| {
        hinge_value(&Matrix::new(rows, cols, z.to_vec()).unwrap(), tuples, margin)
    });
    Ok(CheckOutcome {
        max_relative_error: max_relative_error(analytic.data(), &numeric),
        entries: numeric.len(),
    })
}

/// Backprop through `params` against finite differences of
/// `sum(logits * weights)`, a loss whose logit gradient is `weights`.
pub fn check_backward(
    params: &NetworkParams,
    x: &Matrix,
    weights: &Matrix,
    step: f64,
) -> Result<CheckOutcome> {
    let trace = forward(params, x)?;
    let grads = backward(params, &trace, weights)?;
    let objective = |p: &NetworkParams| -> f64 {
        let logits = forward(p, x).expect("validated shapes");
        logits
            .logits()
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for (l, g) in grads.layers.iter().enumerate() {
        let mut probe = params.clone();
        let w = params.layers()[l].weight.data().to_vec();
        let numeric = numeric_gradient(&w, step, |vals| {
            probe.layers_mut()[l].weight.data_mut().copy_from_slice(vals);
            objective(&probe)
        });
        worst = worst.max(max_relative_error(g.weight.data(), &numeric));
        entries += numeric.len();

        let mut probe = params.clone();
        let b = params.layers()[l].bias.clone();
        let numeric = numeric_gradient(&b, step, |vals| {
            probe.layers_mut()[l].bias.copy_from_slice(vals);
            objective(&probe)
        });
        worst = worst.max(max_relative_error(&g.bias, &numeric));
        entries += numeric.len();
    }
    Ok(CheckOutcome {
        max_relative_error: worst,
        entries,
    })
}

/// `n` random tuples over `samples` distinct samples (duplicates allowed).
pub fn random_tuples(rng: &mut Rng, samples: usize, count: usize) -> Vec<ConstraintTuple> {
    (0..count)
        .map(|_| {
            let i = rng.below(samples);
            let mut j = rng.below(samples - 1);
            if j >= i {
                j += 1;
            }
            let rel = if rng.uniform() < 0.5 {
                Relationship::Similar
            } else {
                Relationship::Dissimilar
            };
            ConstraintTuple::new(i, j, rel).expect("distinct")
        })
        .collect()
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(lo, hi)).collect())
        .expect("positive dims")
}

/// Summary line per loss family over `configs` random configurations.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub pair_kl: f64,
    pub cross_entropy: f64,
    pub hinge_embedding: f64,
    pub backward: f64,
    pub configs: usize,
}

/// Random configurations: `n <= 8` samples, `k` in {3, 5, 10}, up to 20
/// tuples, logits uniform in `[-3, 3]`.
pub fn run_suite(seed: u64, configs: usize, step: f64) -> Result<SuiteReport> {
    let mut rng = Rng::new(seed);
    let mut report = SuiteReport {
        pair_kl: 0.0,
        cross_entropy: 0.0,
        hinge_embedding: 0.0,
        backward: 0.0,
        configs,
    };
    let cfg = LossConfig::default();
    for _ in 0..configs {
        let n = 2 + rng.below(7);
        let k = [3, 5, 10][rng.below(3)];
        let t = 1 + rng.below(20);
        let logits = random_matrix(&mut rng, n, k, -3.0, 3.0);
        let tuples = random_tuples(&mut rng, n, t);
        let out = check_pair_logits(&logits, &tuples, &cfg, step)?;
        report.pair_kl = report.pair_kl.max(out.max_relative_error);

        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let out = check_cross_entropy(&logits, &labels, step)?;
        report.cross_entropy = report.cross_entropy.max(out.max_relative_error);

        let emb = random_matrix(&mut rng, n, k, -1.0, 1.0);
        let out = check_hinge_embedding(&emb, &tuples, 2.0, step)?;
        report.hinge_embedding = report.hinge_embedding.max(out.max_relative_error);

        let d = 1 + rng.below(6);
        let h = 1 + rng.below(10);
        let specs = crate::network::mlp_specs(&[d, h, k]);
        let params = crate::network::init_params(&specs, &mut rng)?;
        let x = random_matrix(&mut rng, n, d, -2.0, 2.0);
        let w = random_matrix(&mut rng, n, k, -1.0, 1.0);
        let out = check_backward(&params, &x, &w, step)?;
        report.backward = report.backward.max(out.max_relative_error);
    }
    Ok(report)
}
