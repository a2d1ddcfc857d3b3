//! Two-stage baseline: Lloyd's k-means (Euclidean or cosine) with random
//! restarts, run on raw features or on a hidden layer of a trained network.

use crate::error::{Error, Result};
use crate::network::{forward, NetworkParams};
use crate::numeric::{Matrix, Rng};

pub const MAX_LLOYD_ITERATIONS: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    /// Squared Euclidean distance.
    Euclidean,
    /// `1 - cos(x, c)` on unit-normalized points and centroids.
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KmeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Sum of point-to-centroid distances of the best restart.
    pub inertia: f64,
    pub restarts_run: usize,
    /// Final inertia of every restart, in order.
    pub restart_inertias: Vec<f64>,
    /// Inertia after each assignment step of the best restart.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distance(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::Euclidean => sq_dist(a, b),
        Metric::Cosine => 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>(),
    }
}

/// Scales `v` to unit length; `false` if it has zero length.
fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

struct Lloyd {
    centroids: Matrix,
    assignments: Vec<usize>,
    dists: Vec<f64>,
    history: Vec<f64>,
}

/// Nearest centroid per point; returns the number of changed assignments.
fn assign(points: &Matrix, metric: Metric, state: &mut Lloyd) -> usize {
    let mut changed = 0;
    for (p, point) in points.row_iter().enumerate() {
        let (best, dist) = state
            .centroids
            .row_iter()
            .map(|c| distance(metric, point, c))
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (c, d)| if d < acc.1 { (c, d) } else { acc });
        if state.assignments[p] != best {
            changed += 1;
            state.assignments[p] = best;
        }
        state.dists[p] = dist;
    }
    changed
}

fn update(points: &Matrix, k: usize, metric: Metric, state: &mut Lloyd) {
    let d = points.cols();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (p, point) in points.row_iter().enumerate() {
        let c = state.assignments[p];
        counts[c] += 1;
        for (s, x) in sums.row_mut(c).iter_mut().zip(point) {
            *s += x;
        }
    }
    let mut taken = vec![false; points.rows()];
    for c in 0..k {
        if counts[c] == 0 {
            // Reseed at the point farthest from its current centroid.
            let far = (0..points.rows())
                .filter(|&p| !taken[p])
                .fold((0, f64::NEG_INFINITY), |acc, p| {
                    if state.dists[p] > acc.1 {
                        (p, state.dists[p])
                    } else {
                        acc
                    }
                })
                .0;
            taken[far] = true;
            state.dists[far] = 0.0;
            state.centroids.row_mut(c).copy_from_slice(points.row(far));
            continue;
        }
        let row = state.centroids.row_mut(c);
        for (x, s) in row.iter_mut().zip(sums.row(c)) {
            *x = s / counts[c] as f64;
        }
        if metric == Metric::Cosine && !normalize(row) {
            // Mean of opposite directions; keep the previous centroid direction
            // by falling back to the first member.
            let first = state.assignments.iter().position(|&a| a == c).expect("non-empty");
            row.copy_from_slice(points.row(first));
        }
    }
}

fn run_once(points: &Matrix, k: usize, metric: Metric, rng: &mut Rng) -> Result<Lloyd> {
    let seeds = rng.sample_indices(points.rows(), k);
    let mut order = seeds;
    rng.shuffle(&mut order);
    let centroids = points.select_rows(&order)?;
    let mut state = Lloyd {
        centroids,
        assignments: vec![usize::MAX; points.rows()],
        dists: vec![0.0; points.rows()],
        history: Vec::new(),
    };
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let changed = assign(points, metric, &mut state);
        state.history.push(state.dists.iter().sum());
        if changed == 0 {
            break;
        }
        update(points, k, metric, &mut state);
    }
    Ok(state)
}

/// Forgy-initialized Lloyd iterations, best of `restarts` by inertia.
pub fn kmeans(
    points: &Matrix,
    k: usize,
    metric: Metric,
    restarts: usize,
    rng: &mut Rng,
) -> Result<KmeansResult> {
    if k == 0 || k > points.rows() {
        return Err(Error::invalid(format!(
            "k = {k} must be in 1..={} (number of points)",
            points.rows()
        )));
    }
    if restarts == 0 {
        return Err(Error::invalid("kmeans needs at least one restart"));
    }
    let mut working = points.clone();
    if metric == Metric::Cosine {
        for r in 0..working.rows() {
            if !normalize(working.row_mut(r)) {
                return Err(Error::invalid(format!("point {r} has zero length under cosine metric")));
            }
        }
    }
    let mut best: Option<Lloyd> = None;
    let mut restart_inertias = Vec::with_capacity(restarts);
    for _ in 0..restarts {
        let state = run_once(&working, k, metric, rng)?;
        let inertia = *state.history.last().expect("at least one assignment");
        restart_inertias.push(inertia);
        let better = best
            .as_ref()
            .is_none_or(|b| inertia < *b.history.last().unwrap());
        if better {
            best = Some(state);
        }
    }
    let best = best.expect("restarts >= 1");
    Ok(KmeansResult {
        inertia: *best.history.last().unwrap(),
        centroids: best.centroids,
        assignments: best.assignments,
        restarts_run: restarts,
        restart_inertias,
        history: best.history,
    })
}

/// Post-activation output of layer `layer` (0-based) for every row of `x`.
pub fn embed(params: &NetworkParams, x: &Matrix, layer: usize) -> Result<Matrix> {
    if layer >= params.layers().len() {
        return Err(Error::IndexOutOfRange {
            context: "embedding layer",
            index: layer,
            bound: params.layers().len(),
        });
    }
    let mut trace = forward(params, x)?;
    Ok(trace.post.swap_remove(layer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::gen_blobs;
    use crate::metrics::{contingency, purity};
    use crate::network::{init_params, mlp_specs, Activation, Layer};

    #[test]
    fn each_point_its_own_centroid() {
        let pts = Matrix::from_rows(&[[0.0, 1.0], [5.0, 5.0], [-3.0, 2.0]]).unwrap();
        let r = kmeans(&pts, 3, Metric::Euclidean, 2, &mut Rng::new(1)).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut a = r.assignments.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn duplicate_pairs() {
        let pts = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0], [9.0, 9.0], [9.0, 9.0]]).unwrap();
        let r = kmeans(&pts, 2, Metric::Euclidean, 5, &mut Rng::new(3)).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let centers = Matrix::from_rows(&[[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]]).unwrap();
        let data = gen_blobs(&centers, 0.1, 50, &mut Rng::new(8)).unwrap();
        for metric in [Metric::Euclidean] {
            let r = kmeans(&data.features, 3, metric, 10, &mut Rng::new(2)).unwrap();
            let labels = data.labels.as_ref().unwrap();
            let t = contingency(&r.assignments, labels, 3, 3).unwrap();
            assert_eq!(purity(&t).unwrap(), 1.0);
        }
    }

    #[test]
    fn cosine_groups_directions() {
        let pts = Matrix::from_rows(&[[1.0, 0.1], [3.0, 0.2], [0.1, 1.0], [0.2, 4.0]]).unwrap();
        let r = kmeans(&pts, 2, Metric::Cosine, 5, &mut Rng::new(0)).unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        for c in r.centroids.row_iter() {
            let norm: f64 = c.iter().map(|v| v * v).sum();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        let zero = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        assert!(kmeans(&zero, 1, Metric::Cosine, 1, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn rejects_bad_arguments() {
        let pts = Matrix::zeros(2, 2);
        assert!(kmeans(&pts, 3, Metric::Euclidean, 1, &mut Rng::new(0)).is_err());
        assert!(kmeans(&pts, 1, Metric::Euclidean, 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn inertia_is_monotone_and_best_restart_wins() {
        let centers = Matrix::from_rows(&[[0.0, 0.0, 0.0], [2.0, 1.0, 0.0], [0.0, 2.0, 1.0], [1.0, 1.0, 2.0]]).unwrap();
        let data = gen_blobs(&centers, 0.8, 40, &mut Rng::new(4)).unwrap();
        for metric in [Metric::Euclidean, Metric::Cosine] {
            let points = data.features.map(|v| v + 3.0);
            let r = kmeans(&points, 7, metric, 6, &mut Rng::new(5)).unwrap();
            for w in r.history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{metric:?}: {:?}", r.history);
            }
            let min = r.restart_inertias.iter().copied().fold(f64::INFINITY, f64::min);
            assert_eq!(r.inertia, min);
            assert_eq!(r.restarts_run, 6);
            let again = kmeans(&points, 7, metric, 6, &mut Rng::new(5)).unwrap();
            assert_eq!(again, r);
        }
    }

    #[test]
    fn embed_examples() {
        let specs = mlp_specs(&[784, 500, 10]);
        let p = init_params(&specs, &mut Rng::new(1)).unwrap();
        let x = Matrix::filled(3, 784, 0.5);
        assert_eq!(embed(&p, &x, 0).unwrap().shape(), (3, 500));
        assert_eq!(&embed(&p, &x, 1).unwrap(), forward(&p, &x).unwrap().logits());
        assert!(embed(&p, &x, 2).is_err());

        let zero = NetworkParams::from_layers(vec![
            Layer::from_parts(Activation::Relu, Matrix::zeros(4, 2), vec![0.0; 4]).unwrap(),
            Layer::from_parts(Activation::Identity, Matrix::zeros(3, 4), vec![0.0; 3]).unwrap(),
        ])
        .unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0]]).unwrap();
        assert_eq!(embed(&zero, &x, 0).unwrap(), Matrix::zeros(1, 4));
    }
}
