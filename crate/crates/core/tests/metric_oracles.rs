mod common;

use common::{direct_purity, exhaustive_best_match, random_table, reference_nmi};
use pairclust::metrics::{contingency, hungarian_accuracy, nmi, purity};
use pairclust::numeric::Rng;

#[test]
fn purity_and_nmi_match_direct_computation() {
    let mut rng = Rng::new(77);
    for case in 0..20 {
        let (rows, cols) = (1 + rng.below(8), 1 + rng.below(6));
        let t = random_table(&mut rng, rows, cols, 30);
        if t.total() == 0 {
            continue;
        }
        assert!((purity(&t).unwrap() - direct_purity(&t)).abs() < 1e-12, "case {case}");
        assert!((nmi(&t) - reference_nmi(&t)).abs() < 1e-12, "case {case}");
    }
}

#[test]
fn hungarian_matches_exhaustive_search() {
    let mut rng = Rng::new(404);
    for case in 0..200 {
        let k = 1 + rng.below(6);
        let t = random_table(&mut rng, k, k, 20);
        let best = exhaustive_best_match(&t);
        let a = hungarian_accuracy(&t);
        let matched: u64 = a
            .class_of_cluster
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| t.get(r, c)))
            .sum();
        assert_eq!(matched, best, "case {case}");
        let expected = if t.total() == 0 { 0.0 } else { best as f64 / t.total() as f64 };
        assert!((a.accuracy - expected).abs() < 1e-12, "case {case}");
    }
}

#[test]
fn metrics_ignore_cluster_relabeling_and_empty_clusters() {
    let mut rng = Rng::new(9);
    let labels: Vec<usize> = (0..120).map(|_| rng.below(4)).collect();
    let assign: Vec<usize> = (0..120).map(|_| rng.below(5)).collect();
    let base = contingency(&assign, &labels, 5, 4).unwrap();
    let perm = [3, 0, 4, 1, 2];
    let relabeled: Vec<usize> = assign.iter().map(|&a| perm[a]).collect();
    // Two extra, never-used clusters.
    let wider = contingency(&relabeled, &labels, 7, 4).unwrap();
    assert_eq!(purity(&base).unwrap(), purity(&wider).unwrap());
    assert!((nmi(&base) - nmi(&wider)).abs() < 1e-12);
    assert_eq!(hungarian_accuracy(&base).accuracy, hungarian_accuracy(&wider).accuracy);
}
