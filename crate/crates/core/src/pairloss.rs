//! Cost layer for clustering from pairwise constraints.
//!
//! Each sample's softmax output is read as a distribution over the `k` cluster
//! nodes. For a pair `(P, Q)` the directional cost is
//!
//! ```text
//! loss(P || Q) = KL(P || Q)                   similar pair
//!              = max(0, margin - KL(P || Q))  dissimilar pair
//! ```
//!
//! and the pair cost is `loss(P || Q) + loss(Q || P)`. In each directional term
//! the first distribution is held constant, so `Q` only receives gradient from
//! `loss(P || Q)` and `P` only from `loss(Q || P)`.
//!
//! Batch evaluation feeds every sample forward once and enumerates the tuples
//! here, accumulating each sample's distribution gradient over all tuples that
//! touch it before pushing it through the softmax Jacobian.

use crate::constraints::{ConstraintTuple, Relationship};
use crate::error::{Error, Result};
use crate::numeric::{softmax_into, Matrix};

pub const DEFAULT_EPSILON: f64 = 1e-7;
pub const DEFAULT_MARGIN: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Hinge margin for dissimilar pairs, in nats.
    pub margin: f64,
    /// Probabilities are clamped to `[epsilon, 1]` before logs and divisions.
    pub epsilon: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            epsilon: DEFAULT_EPSILON,
            reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::invalid(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.epsilon > 0.0 && self.epsilon * (k as f64) < 1.0) {
            return Err(Error::invalid(format!(
                "epsilon {} must lie in (0, 1/k) for k = {k}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Softmax outputs of a batch, clamped to `[epsilon, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbBatch {
    probs: Matrix,
}

impl ProbBatch {
    pub fn from_logits(logits: &Matrix, epsilon: f64) -> Self {
        let mut probs = Matrix::zeros(logits.rows(), logits.cols());
        for r in 0..logits.rows() {
            let out = probs.row_mut(r);
            softmax_into(logits.row(r), out);
            clamp(out, epsilon);
        }
        Self { probs }
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.probs.row(r)
    }
}

fn clamp(p: &mut [f64], epsilon: f64) {
    for v in p {
        *v = v.clamp(epsilon, 1.0);
    }
}

fn clamped(p: &[f64], epsilon: f64) -> Vec<f64> {
    let mut v = p.to_vec();
    clamp(&mut v, epsilon);
    v
}

fn check_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::DimensionMismatch {
            op: "kl",
            left: (1, p.len()),
            right: (1, q.len()),
        });
    }
    Ok(())
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 })
        .sum()
}

/// `sum_i p_i ln(p_i / q_i)` in nats. Inputs are expected to be clamped.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len(p, q)?;
    Ok(kl_unchecked(p, q))
}

fn directional(divergence: f64, rel: Relationship, margin: f64) -> f64 {
    match rel {
        Relationship::Similar => divergence,
        Relationship::Dissimilar => (margin - divergence).max(0.0),
    }
}

/// Writes `d loss(fixed || var) / d var` into `out` (accumulating).
fn directional_grad(fixed: &[f64], var: &[f64], rel: Relationship, margin: f64, out: &mut [f64]) {
    let sign = match rel {
        Relationship::Similar => -1.0,
        Relationship::Dissimilar if kl_unchecked(fixed, var) < margin => 1.0,
        Relationship::Dissimilar => return,
    };
    for ((o, &f), &v) in out.iter_mut().zip(fixed).zip(var) {
        *o += sign * f / v;
    }
}

fn pair_loss_clamped(p: &[f64], q: &[f64], rel: Relationship, margin: f64) -> f64 {
    directional(kl_unchecked(p, q), rel, margin) + directional(kl_unchecked(q, p), rel, margin)
}

/// Symmetric contrastive cost of one pair.
pub fn pair_loss(p: &[f64], q: &[f64], rel: Relationship, cfg: &LossConfig) -> Result<f64> {
    check_len(p, q)?;
    let (p, q) = (clamped(p, cfg.epsilon), clamped(q, cfg.epsilon));
    Ok(pair_loss_clamped(&p, &q, rel, cfg.margin))
}

/// `(dL/dp, dL/dq)` with the constant-side convention.
pub fn pair_grad(
    p: &[f64],
    q: &[f64],
    rel: Relationship,
    cfg: &LossConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(p, q)?;
    let (p, q) = (clamped(p, cfg.epsilon), clamped(q, cfg.epsilon));
    let mut dp = vec![0.0; p.len()];
    let mut dq = vec![0.0; q.len()];
    directional_grad(&p, &q, rel, cfg.margin, &mut dq);
    directional_grad(&q, &p, rel, cfg.margin, &mut dp);
    Ok((dp, dq))
}

/// Pushes a distribution-space gradient `g` through the softmax at `p`:
/// `dz_j = p_j (g_j - sum_i g_i p_i)`.
fn softmax_backward(p: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &pj), &gj) in out.iter_mut().zip(p).zip(g) {
        *o = pj * (gj - dot);
    }
}

fn check_tuples(tuples: &[ConstraintTuple], n: usize) -> Result<()> {
    for t in tuples {
        for idx in [t.i, t.j] {
            if idx >= n {
                return Err(Error::IndexOutOfRange {
                    context: "batch tuple",
                    index: idx,
                    bound: n,
                });
            }
        }
        if t.i == t.j {
            return Err(Error::invalid(format!("tuple pairs sample {} with itself", t.i)));
        }
    }
    Ok(())
}

/// Loss over all tuples of a batch and its gradient with respect to the logits.
pub fn batch_loss_and_logit_grad(
    logits: &Matrix,
    tuples: &[ConstraintTuple],
    cfg: &LossConfig,
) -> Result<(f64, Matrix)> {
    let (n, k) = logits.shape();
    check_tuples(tuples, n)?;
    let mut dlogits = Matrix::zeros(n, k);
    if tuples.is_empty() {
        return Ok((0.0, dlogits));
    }
    let probs = ProbBatch::from_logits(logits, cfg.epsilon);
    let mut dprobs = Matrix::zeros(n, k);
    let mut loss = 0.0;
    for t in tuples {
        let (p, q) = (probs.row(t.i), probs.row(t.j));
        loss += pair_loss_clamped(p, q, t.relationship, cfg.margin);
        directional_grad(p, q, t.relationship, cfg.margin, dprobs.row_mut(t.j));
        directional_grad(q, p, t.relationship, cfg.margin, dprobs.row_mut(t.i));
    }
    for r in 0..n {
        softmax_backward(probs.row(r), dprobs.row(r), dlogits.row_mut(r));
    }
    if cfg.reduction == Reduction::Mean {
        let scale = 1.0 / tuples.len() as f64;
        loss *= scale;
        dlogits.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss, dlogits))
}

/// Total pair cost over every unordered pair of `probs`, with the relationship
/// given by `labels`. Works from cached logs so the full `n(n-1)/2` sweep stays cheap.
pub fn all_pairs_loss(probs: &ProbBatch, labels: &[usize], margin: f64) -> Result<f64> {
    let (n, k) = probs.probs().shape();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            op: "all_pairs_loss",
            left: (n, k),
            right: (labels.len(), 1),
        });
    }
    let logs = probs.probs().map(f64::ln);
    // Negative entropy term sum_i p_i ln p_i per row.
    let self_term: Vec<f64> = (0..n)
        .map(|r| probs.row(r).iter().zip(logs.row(r)).map(|(p, l)| p * l).sum())
        .collect();
    let mut total = 0.0;
    for a in 0..n {
        let (pa, la) = (probs.row(a), logs.row(a));
        for b in a + 1..n {
            let (pb, lb) = (probs.row(b), logs.row(b));
            let cross_ab: f64 = pa.iter().zip(lb).map(|(p, l)| p * l).sum();
            let cross_ba: f64 = pb.iter().zip(la).map(|(p, l)| p * l).sum();
            let rel = if labels[a] == labels[b] {
                Relationship::Similar
            } else {
                Relationship::Dissimilar
            };
            total += directional(self_term[a] - cross_ab, rel, margin)
                + directional(self_term[b] - cross_ba, rel, margin);
        }
    }
    Ok(total)
}

/// Mean negative log-likelihood of the true class and its logit gradient.
pub fn cross_entropy_loss_and_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            op: "cross_entropy",
            left: (n, k),
            right: (labels.len(), 1),
        });
    }
    let mut grad = Matrix::zeros(n, k);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::IndexOutOfRange {
                context: "cross_entropy label",
                index: y,
                bound: k,
            });
        }
        let z = logits.row(r);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += log_sum - z[y];
        let g = grad.row_mut(r);
        for (gj, &zj) in g.iter_mut().zip(z) {
            *gj = (zj - log_sum).exp() / n as f64;
        }
        g[y] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

/// Siamese-style hinge embedding criterion on Euclidean distance:
/// `d^2` for similar pairs, `max(0, margin - d)^2` for dissimilar ones, summed.
pub fn hinge_embedding_loss_and_grad(
    embeddings: &Matrix,
    tuples: &[ConstraintTuple],
    margin: f64,
) -> Result<(f64, Matrix)> {
    let (n, d) = embeddings.shape();
    check_tuples(tuples, n)?;
    let mut grad = Matrix::zeros(n, d);
    let mut loss = 0.0;
    let mut diff = vec![0.0; d];
    for t in tuples {
        let (a, b) = (embeddings.row(t.i), embeddings.row(t.j));
        for ((o, x), y) in diff.iter_mut().zip(a).zip(b) {
            *o = x - y;
        }
        let sq: f64 = diff.iter().map(|v| v * v).sum();
        // Coefficient c such that dL/da = c * (a - b) and dL/db = -c * (a - b).
        let coeff = match t.relationship {
            Relationship::Similar => {
                loss += sq;
                2.0
            }
            Relationship::Dissimilar => {
                let dist = sq.sqrt();
                let gap = margin - dist;
                if gap <= 0.0 || dist == 0.0 {
                    if gap > 0.0 {
                        loss += gap * gap;
                    }
                    continue;
                }
                loss += gap * gap;
                -2.0 * gap / dist
            }
        };
        for (c, &v) in diff.iter().enumerate() {
            grad[(t.i, c)] += coeff * v;
            grad[(t.j, c)] -= coeff * v;
        }
    }
    Ok((loss, grad))
}
