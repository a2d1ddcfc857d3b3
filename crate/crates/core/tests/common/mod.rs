//! Independent oracles shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use pairclust::constraints::ConstraintTuple;
use pairclust::metrics::ContingencyTable;
use pairclust::network::{forward, NetworkParams};
use pairclust::numeric::{softmax_rows, Matrix, Rng};
use pairclust::pairloss::{pair_loss, LossConfig};

/// Each tuple's loss from its own two-sample forward pass, as a Siamese pair
/// of shared-weight branches would compute it.
pub fn siamese_total(params: &NetworkParams, x: &Matrix, tuples: &[ConstraintTuple], cfg: &LossConfig) -> f64 {
    tuples
        .iter()
        .map(|t| {
            let left = forward(params, &x.select_rows(&[t.i]).unwrap()).unwrap();
            let right = forward(params, &x.select_rows(&[t.j]).unwrap()).unwrap();
            let p = softmax_rows(left.logits());
            let q = softmax_rows(right.logits());
            pair_loss(p.row(0), q.row(0), t.relationship, cfg).unwrap()
        })
        .sum()
}

pub fn random_table(rng: &mut Rng, clusters: usize, classes: usize, max: usize) -> ContingencyTable {
    let counts = (0..clusters * classes).map(|_| rng.below(max + 1) as u64).collect();
    ContingencyTable::from_counts(clusters, classes, counts).unwrap()
}

/// Mutual information and entropies straight from the joint distribution.
pub fn reference_nmi(t: &ContingencyTable) -> f64 {
    let n = t.total() as f64;
    let rows = t.row_totals();
    let cols = t.col_totals();
    let h = |v: &[u64]| -> f64 {
        v.iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let mut mi = 0.0;
    for r in 0..t.clusters() {
        for c in 0..t.classes() {
            let nij = t.get(r, c) as f64;
            if nij > 0.0 {
                mi += nij / n * (nij * n / (rows[r] as f64 * cols[c] as f64)).ln();
            }
        }
    }
    let (hr, hc) = (h(&rows), h(&cols));
    if hr == 0.0 || hc == 0.0 {
        0.0
    } else {
        mi / (hr * hc).sqrt()
    }
}

pub fn permutations(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == items.len() {
        out.push(items.clone());
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permutations(items, k + 1, out);
        items.swap(k, i);
    }
}

/// Largest matched count over every one-to-one cluster-to-class map of a square table.
pub fn exhaustive_best_match(t: &ContingencyTable) -> u64 {
    let k = t.clusters();
    let mut perms = Vec::new();
    permutations(&mut (0..k).collect(), 0, &mut perms);
    perms
        .iter()
        .map(|p| (0..k).map(|r| t.get(r, p[r])).sum::<u64>())
        .max()
        .unwrap()
}

/// Purity as the share of samples in each cluster's majority class.
pub fn direct_purity(t: &ContingencyTable) -> f64 {
    (0..t.clusters()).map(|r| *t.row(r).iter().max().unwrap()).sum::<u64>() as f64 / t.total() as f64
}
