//! Pairwise constraint tuples: generation from labels, uniform sampling,
//! noise injection, text serialization and mini-batch construction.
//!
//! A mini-batch is constraint-driven. Tuples are grouped first, then the samples
//! they touch are gathered once each, so a sample shared by several tuples is fed
//! forward a single time and the pairs are enumerated in the cost layer.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::numeric::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relationship {
    Similar,
    Dissimilar,
}

impl Relationship {
    pub fn flipped(self) -> Self {
        match self {
            Relationship::Similar => Relationship::Dissimilar,
            Relationship::Dissimilar => Relationship::Similar,
        }
    }

    pub fn is_similar(self) -> bool {
        self == Relationship::Similar
    }

    /// `+1` similar, `-1` dissimilar.
    pub fn sign(self) -> i8 {
        match self {
            Relationship::Similar => 1,
            Relationship::Dissimilar => -1,
        }
    }
}

/// Unordered pair `(i, j)` stored with `i < j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConstraintTuple {
    pub i: usize,
    pub j: usize,
    pub relationship: Relationship,
}

impl ConstraintTuple {
    pub fn new(a: usize, b: usize, relationship: Relationship) -> Result<Self> {
        if a == b {
            return Err(Error::invalid(format!("constraint pairs a sample with itself ({a})")));
        }
        let (i, j) = if a < b { (a, b) } else { (b, a) };
        Ok(Self { i, j, relationship })
    }

    pub fn similar(a: usize, b: usize) -> Self {
        Self::new(a, b, Relationship::Similar).expect("distinct indices")
    }

    pub fn dissimilar(a: usize, b: usize) -> Self {
        Self::new(a, b, Relationship::Dissimilar).expect("distinct indices")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstraintSet {
    tuples: Vec<ConstraintTuple>,
    n_samples: usize,
}

impl ConstraintSet {
    pub fn new(tuples: Vec<ConstraintTuple>, n_samples: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(tuples.len());
        for t in &tuples {
            if t.j >= n_samples {
                return Err(Error::IndexOutOfRange {
                    context: "constraint set",
                    index: t.j,
                    bound: n_samples,
                });
            }
            if !seen.insert((t.i, t.j)) {
                return Err(Error::invalid(format!("duplicate constraint ({}, {})", t.i, t.j)));
            }
        }
        Ok(Self { tuples, n_samples })
    }

    pub fn tuples(&self) -> &[ConstraintTuple] {
        &self.tuples
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn similar_count(&self) -> usize {
        self.tuples.iter().filter(|t| t.relationship.is_similar()).count()
    }

    /// Canonical ordering by `(i, j)`; useful for order-independent comparison.
    pub fn sorted(&self) -> Self {
        let mut tuples = self.tuples.clone();
        tuples.sort_by_key(|t| (t.i, t.j));
        Self {
            tuples,
            n_samples: self.n_samples,
        }
    }

    /// Samples touched by at least one tuple, ascending.
    pub fn constrained_samples(&self) -> Vec<usize> {
        let mut seen = vec![false; self.n_samples];
        for t in &self.tuples {
            seen[t.i] = true;
            seen[t.j] = true;
        }
        seen.iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# n_samples={}", self.n_samples)?;
        for t in &self.tuples {
            writeln!(w, "{},{},{:+}", t.i, t.j, t.relationship.sign())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# n_samples={}", self.n_samples);
        for t in &self.tuples {
            let _ = writeln!(s, "{},{},{:+}", t.i, t.j, t.relationship.sign());
        }
        s
    }

    /// Parses `i,j,r` lines with `r` in `{+1, -1}`. `#` lines are comments; a
    /// `# n_samples=N` comment fixes the sample count, otherwise it is
    /// `max index + 1`.
    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut tuples = Vec::new();
        let mut declared = None;
        let mut max_index = None;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            let parse_err = |message: String| Error::Parse {
                line: lineno + 1,
                message,
            };
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("n_samples=") {
                    declared = Some(
                        v.trim()
                            .parse::<usize>()
                            .map_err(|e| parse_err(format!("bad n_samples: {e}")))?,
                    );
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<_> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
            }
            let index = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| parse_err(format!("bad index {s:?}: {e}")))
            };
            let (a, b) = (index(fields[0])?, index(fields[1])?);
            let relationship = match fields[2] {
                "+1" | "1" => Relationship::Similar,
                "-1" => Relationship::Dissimilar,
                other => return Err(parse_err(format!("bad relationship {other:?}"))),
            };
            let t = ConstraintTuple::new(a, b, relationship).map_err(|e| parse_err(e.to_string()))?;
            max_index = max_index.max(Some(t.j));
            tuples.push(t);
        }
        let n_samples = declared.unwrap_or_else(|| max_index.map_or(0, |m| m + 1));
        Self::new(tuples, n_samples)
    }
}

fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Lexicographic rank of pair `(i, j)`, `i < j`, among all pairs of `n` samples.
fn pair_offset(n: usize, i: usize) -> usize {
    i * (2 * n - i - 1) / 2
}

fn pair_from_rank(n: usize, rank: usize) -> (usize, usize) {
    // Largest i with pair_offset(n, i) <= rank.
    let (mut lo, mut hi) = (0, n - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if pair_offset(n, mid) <= rank {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let i = if pair_offset(n, hi) <= rank { hi } else { lo };
    (i, i + 1 + rank - pair_offset(n, i))
}

fn tuple_for(labels: &[usize], i: usize, j: usize) -> ConstraintTuple {
    let rel = if labels[i] == labels[j] {
        Relationship::Similar
    } else {
        Relationship::Dissimilar
    };
    ConstraintTuple { i, j, relationship: rel }
}

/// Every unordered pair, similar iff the labels agree, in lexicographic order.
pub fn constraints_from_labels(labels: &[usize]) -> ConstraintSet {
    let n = labels.len();
    let mut tuples = Vec::with_capacity(pair_count(n));
    for i in 0..n {
        for j in i + 1..n {
            tuples.push(tuple_for(labels, i, j));
        }
    }
    ConstraintSet {
        tuples,
        n_samples: n,
    }
}

/// `m` tuples drawn uniformly without replacement; kept in their original order.
pub fn sample_constraints(full: &ConstraintSet, m: usize, rng: &mut Rng) -> Result<ConstraintSet> {
    if m > full.len() {
        return Err(Error::invalid(format!(
            "cannot sample {m} constraints from a set of {}",
            full.len()
        )));
    }
    let tuples = rng
        .sample_indices(full.len(), m)
        .into_iter()
        .map(|k| full.tuples[k])
        .collect();
    Ok(ConstraintSet {
        tuples,
        n_samples: full.n_samples,
    })
}

/// Same draw as `sample_constraints(&constraints_from_labels(labels), m, rng)`
/// without materializing all `n(n-1)/2` pairs.
pub fn sample_from_labels(labels: &[usize], m: usize, rng: &mut Rng) -> Result<ConstraintSet> {
    let n = labels.len();
    let total = pair_count(n);
    if m > total {
        return Err(Error::invalid(format!(
            "cannot sample {m} constraints from a set of {total}"
        )));
    }
    let tuples = rng
        .sample_indices(total, m)
        .into_iter()
        .map(|rank| {
            let (i, j) = pair_from_rank(n, rank);
            tuple_for(labels, i, j)
        })
        .collect();
    Ok(ConstraintSet { tuples, n_samples: n })
}

/// Inverts the relationship of exactly `round(noise_rate * len)` tuples chosen uniformly.
pub fn flip_constraints(set: &ConstraintSet, noise_rate: f64, rng: &mut Rng) -> Result<ConstraintSet> {
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(Error::invalid(format!("noise rate {noise_rate} outside [0, 1]")));
    }
    let count = (noise_rate * set.len() as f64).round() as usize;
    let mut out = set.clone();
    for k in rng.sample_indices(set.len(), count) {
        out.tuples[k].relationship = out.tuples[k].relationship.flipped();
    }
    Ok(out)
}

/// One mini-batch: each touched sample once, tuples re-indexed into `samples`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Dataset-global sample indices, ascending.
    pub samples: Vec<usize>,
    /// Tuples whose indices point into `samples`.
    pub tuples: Vec<ConstraintTuple>,
}

impl Batch {
    fn from_global(tuples: &[ConstraintTuple]) -> Self {
        let mut samples: Vec<usize> = tuples.iter().flat_map(|t| [t.i, t.j]).collect();
        samples.sort_unstable();
        samples.dedup();
        let local = |g: usize| samples.binary_search(&g).expect("gathered sample");
        // Ascending sample order keeps local tuples canonical (i < j).
        let tuples = tuples
            .iter()
            .map(|t| ConstraintTuple {
                i: local(t.i),
                j: local(t.j),
                relationship: t.relationship,
            })
            .collect();
        Self { samples, tuples }
    }

    /// Tuples mapped back to dataset-global indices.
    pub fn global_tuples(&self) -> impl Iterator<Item = ConstraintTuple> + '_ {
        self.tuples.iter().map(|t| ConstraintTuple {
            i: self.samples[t.i],
            j: self.samples[t.j],
            relationship: t.relationship,
        })
    }
}

/// Shuffles the tuples and groups them into batches of at most `batch_tuples`.
pub fn make_batches(set: &ConstraintSet, batch_tuples: usize, rng: &mut Rng) -> Result<Vec<Batch>> {
    if batch_tuples == 0 {
        return Err(Error::invalid("batch_tuples must be at least 1"));
    }
    let mut order = set.tuples.clone();
    rng.shuffle(&mut order);
    Ok(order.chunks(batch_tuples).map(Batch::from_global).collect())
}

/// Full-constraint batching: shuffles the samples, groups them into batches of
/// `batch_size`, and enumerates every pair inside each batch from the labels.
pub fn make_dense_batches(labels: &[usize], batch_size: usize, rng: &mut Rng) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::invalid("dense batches need at least 2 samples"));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    rng.shuffle(&mut order);
    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let mut samples = chunk.to_vec();
        samples.sort_unstable();
        let mut tuples = Vec::with_capacity(pair_count(samples.len()));
        for a in 0..samples.len() {
            for b in a + 1..samples.len() {
                let rel = tuple_for(labels, samples[a], samples[b]).relationship;
                tuples.push(ConstraintTuple { i: a, j: b, relationship: rel });
            }
        }
        batches.push(Batch { samples, tuples });
    }
    Ok(batches)
}
