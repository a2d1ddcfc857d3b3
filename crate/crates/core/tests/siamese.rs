mod common;

use common::siamese_total;
use pairclust::constraints::{make_batches, sample_from_labels, ConstraintSet};
use pairclust::gradcheck::{random_matrix, random_tuples};
use pairclust::network::{forward, init_params, mlp_specs};
use pairclust::numeric::Rng;
use pairclust::pairloss::{batch_loss_and_logit_grad, LossConfig};

#[test]
fn dense_batch_loss_equals_siamese_sum() {
    let cfg = LossConfig::default();
    let mut rng = Rng::new(2024);
    for case in 0..100 {
        let n = 2 + rng.below(9);
        let d = 1 + rng.below(6);
        let k = [3, 5, 10][rng.below(3)];
        let params = init_params(&mlp_specs(&[d, 1 + rng.below(8), k]), &mut rng).unwrap();
        let x = random_matrix(&mut rng, n, d, -2.0, 2.0);
        let count = 1 + rng.below(20);
        let tuples = random_tuples(&mut rng, n, count);
        let dense = forward(&params, &x).unwrap();
        let (loss, _) = batch_loss_and_logit_grad(dense.logits(), &tuples, &cfg).unwrap();
        let reference = siamese_total(&params, &x, &tuples, &cfg);
        assert!((loss - reference).abs() < 1e-12, "case {case}: {loss} vs {reference}");
    }
}

#[test]
fn batches_feed_each_sample_once_and_cover_the_set() {
    let labels: Vec<usize> = (0..60).map(|i| i % 4).collect();
    let set = sample_from_labels(&labels, 150, &mut Rng::new(3)).unwrap();
    let batches = make_batches(&set, 32, &mut Rng::new(4)).unwrap();
    let mut seen: Vec<_> = batches.iter().flat_map(|b| b.global_tuples()).collect();
    for b in &batches {
        let mut s = b.samples.clone();
        s.dedup();
        assert_eq!(s.len(), b.samples.len());
    }
    seen.sort_by_key(|t| (t.i, t.j));
    assert_eq!(ConstraintSet::new(seen, 60).unwrap(), set.sorted());
}
