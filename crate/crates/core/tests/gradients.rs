use pairclust::constraints::Relationship;
use pairclust::gradcheck::{
    check_backward, check_cross_entropy, check_hinge_embedding, check_pair_logits, max_relative_error,
    numeric_gradient, random_matrix, random_tuples, DEFAULT_STEP,
};
use pairclust::network::{backward, forward, init_params, mlp_specs};
use pairclust::numeric::{softmax_rows, Matrix, Rng};
use pairclust::pairloss::{batch_loss_and_logit_grad, pair_grad, LossConfig, Reduction};
use proptest::prelude::*;

fn random_distribution(rng: &mut Rng, k: usize) -> Vec<f64> {
    let z = random_matrix(rng, 1, k, -3.0, 3.0);
    softmax_rows(&z).row(0).to_vec()
}

/// One directional term `loss(fixed || var)` evaluated from scratch.
fn directional(fixed: &[f64], var: &[f64], rel: Relationship, margin: f64) -> f64 {
    let d: f64 = fixed.iter().zip(var).map(|(a, b)| a * (a / b).ln()).sum();
    match rel {
        Relationship::Similar => d,
        Relationship::Dissimilar => (margin - d).max(0.0),
    }
}

#[test]
fn pair_grad_matches_constant_side_differences() {
    let cfg = LossConfig::default();
    let mut rng = Rng::new(31);
    for case in 0..200 {
        let k = 2 + rng.below(9);
        let p = random_distribution(&mut rng, k);
        let q = random_distribution(&mut rng, k);
        let rel = if case % 2 == 0 { Relationship::Similar } else { Relationship::Dissimilar };
        let (dp, dq) = pair_grad(&p, &q, rel, &cfg).unwrap();
        // dL/dq perturbs q in loss(p || q) with p held fixed, and vice versa.
        // Probabilities can sit near 1e-3, so the step is kept well below that.
        let nq = numeric_gradient(&q, 1e-7, |v| directional(&p, v, rel, cfg.margin));
        let np = numeric_gradient(&p, 1e-7, |v| directional(&q, v, rel, cfg.margin));
        assert!(max_relative_error(&dq, &nq) < 1e-5, "case {case} dq");
        assert!(max_relative_error(&dp, &np) < 1e-5, "case {case} dp");
    }
}

#[test]
fn logit_gradient_random_case() {
    let mut rng = Rng::new(5);
    let logits = random_matrix(&mut rng, 6, 5, -3.0, 3.0);
    let tuples = random_tuples(&mut rng, 6, 12);
    let out = check_pair_logits(&logits, &tuples, &LossConfig::default(), DEFAULT_STEP).unwrap();
    assert!(out.max_relative_error < 1e-5, "{}", out.max_relative_error);
    let mean = LossConfig {
        reduction: Reduction::Mean,
        ..LossConfig::default()
    };
    let out = check_pair_logits(&logits, &tuples, &mean, DEFAULT_STEP).unwrap();
    assert!(out.max_relative_error < 1e-5, "{}", out.max_relative_error);
}

#[test]
fn composed_network_gradient_two_layers() {
    // Pair loss on logits pushed back through a small ReLU network, against
    // differences of the frozen-side objective through the whole network.
    let mut rng = Rng::new(17);
    let specs = mlp_specs(&[4, 6, 3]);
    let params = init_params(&specs, &mut rng).unwrap();
    let x = random_matrix(&mut rng, 5, 4, -1.0, 1.0);
    let tuples = random_tuples(&mut rng, 5, 8);
    let cfg = LossConfig::default();
    let trace = forward(&params, &x).unwrap();
    let (_, dlogits) = batch_loss_and_logit_grad(trace.logits(), &tuples, &cfg).unwrap();
    let grads = backward(&params, &trace, &dlogits).unwrap();
    let frozen = softmax_rows(trace.logits());
    for (l, g) in grads.layers.iter().enumerate() {
        let mut probe = params.clone();
        let w = params.layers()[l].weight.data().to_vec();
        let numeric = numeric_gradient(&w, DEFAULT_STEP, |vals| {
            probe.layers_mut()[l].weight.data_mut().copy_from_slice(vals);
            let live = forward(&probe, &x).unwrap();
            pairclust::gradcheck::frozen_side_objective(&frozen, live.logits(), &tuples, &cfg)
        });
        let err = max_relative_error(g.weight.data(), &numeric);
        assert!(err < 1e-5, "layer {l}: {err}");
    }
}

#[test]
fn cross_entropy_and_hinge_random_cases() {
    let mut rng = Rng::new(8);
    let logits = random_matrix(&mut rng, 7, 4, -3.0, 3.0);
    let labels: Vec<usize> = (0..7).map(|_| rng.below(4)).collect();
    assert!(check_cross_entropy(&logits, &labels, DEFAULT_STEP).unwrap().max_relative_error < 1e-5);
    let emb = random_matrix(&mut rng, 7, 3, -1.0, 1.0);
    let tuples = random_tuples(&mut rng, 7, 10);
    assert!(check_hinge_embedding(&emb, &tuples, 2.0, DEFAULT_STEP).unwrap().max_relative_error < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_matches_differences(
        seed in any::<u64>(),
        d in 1usize..=10,
        h in 1usize..=10,
        k in 1usize..=10,
        n in 1usize..=8,
    ) {
        let mut rng = Rng::new(seed);
        let params = init_params(&mlp_specs(&[d, h, k]), &mut rng).unwrap();
        let x = random_matrix(&mut rng, n, d, -2.0, 2.0);
        let w = random_matrix(&mut rng, n, k, -1.0, 1.0);
        let out = check_backward(&params, &x, &w, DEFAULT_STEP).unwrap();
        prop_assert!(out.max_relative_error < 1e-4, "{}", out.max_relative_error);
    }

    #[test]
    fn zero_tuples_give_zero_gradient(n in 1usize..6, k in 2usize..6, seed in any::<u64>()) {
        let logits = random_matrix(&mut Rng::new(seed), n, k, -3.0, 3.0);
        let (loss, g) = batch_loss_and_logit_grad(&logits, &[], &LossConfig::default()).unwrap();
        prop_assert_eq!(loss, 0.0);
        prop_assert_eq!(g, Matrix::zeros(n, k));
    }
}
