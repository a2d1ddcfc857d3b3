//! Clustering quality: contingency tables, purity, NMI, dominant-cluster count
//! and best one-to-one cluster/class matching.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `k x c` cluster-by-class counts. Rows may be all zero (empty clusters).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    clusters: usize,
    classes: usize,
    counts: Vec<u64>,
}

impl ContingencyTable {
    pub fn from_counts(clusters: usize, classes: usize, counts: Vec<u64>) -> Result<Self> {
        if clusters == 0 || classes == 0 {
            return Err(Error::EmptyMatrix {
                rows: clusters,
                cols: classes,
            });
        }
        if counts.len() != clusters * classes {
            return Err(Error::DataLength {
                rows: clusters,
                cols: classes,
                len: counts.len(),
            });
        }
        Ok(Self {
            clusters,
            classes,
            counts,
        })
    }

    pub fn from_rows<R: AsRef<[u64]>>(rows: &[R]) -> Result<Self> {
        let classes = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != classes) {
            return Err(Error::invalid("ragged contingency rows"));
        }
        let counts = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::from_counts(rows.len(), classes, counts)
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, cluster: usize, class: usize) -> u64 {
        self.counts[cluster * self.classes + class]
    }

    pub fn row(&self, cluster: usize) -> &[u64] {
        &self.counts[cluster * self.classes..(cluster + 1) * self.classes]
    }

    pub fn row_totals(&self) -> Vec<u64> {
        (0..self.clusters).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn col_totals(&self) -> Vec<u64> {
        let mut totals = vec![0; self.classes];
        for r in 0..self.clusters {
            for (t, v) in totals.iter_mut().zip(self.row(r)) {
                *t += v;
            }
        }
        totals
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Header `cluster,<class ids>`, then one line per cluster.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cluster");
        for c in 0..self.classes {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for r in 0..self.clusters {
            let _ = write!(s, "{r}");
            for v in self.row(r) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn contingency(
    assignments: &[usize],
    labels: &[usize],
    k: usize,
    c: usize,
) -> Result<ContingencyTable> {
    if assignments.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            op: "contingency",
            left: (assignments.len(), 1),
            right: (labels.len(), 1),
        });
    }
    let mut table = ContingencyTable::from_counts(k, c, vec![0; k * c])?;
    for (&a, &y) in assignments.iter().zip(labels) {
        if a >= k {
            return Err(Error::IndexOutOfRange {
                context: "cluster assignment",
                index: a,
                bound: k,
            });
        }
        if y >= c {
            return Err(Error::IndexOutOfRange {
                context: "class label",
                index: y,
                bound: c,
            });
        }
        table.counts[a * c + y] += 1;
    }
    Ok(table)
}

/// Fraction of samples that belong to the majority class of their cluster.
pub fn purity(table: &ContingencyTable) -> Result<f64> {
    let n = table.total();
    if n == 0 {
        return Err(Error::invalid("purity of an empty table"));
    }
    let hits: u64 = (0..table.clusters)
        .map(|r| table.row(r).iter().copied().max().unwrap_or(0))
        .sum();
    Ok(hits as f64 / n as f64)
}

fn entropy(totals: &[u64], n: f64) -> f64 {
    totals
        .iter()
        .filter(|&&t| t > 0)
        .map(|&t| {
            let p = t as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(clusters; classes) / sqrt(H(clusters) H(classes))`, zero when either entropy is zero.
pub fn nmi(table: &ContingencyTable) -> f64 {
    let n = table.total();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let rows = table.row_totals();
    let cols = table.col_totals();
    let (h_rows, h_cols) = (entropy(&rows, n), entropy(&cols, n));
    if h_rows <= 0.0 || h_cols <= 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for (r, &rt) in rows.iter().enumerate() {
        for (c, &ct) in cols.iter().enumerate() {
            let v = table.get(r, c);
            if v > 0 {
                let v = v as f64;
                mi += v / n * (v * n / (rt as f64 * ct as f64)).ln();
            }
        }
    }
    (mi / (h_rows * h_cols).sqrt()).clamp(0.0, 1.0)
}

/// Clusters holding at least `threshold_fraction` of all samples.
pub fn dominant_clusters(table: &ContingencyTable, threshold_fraction: f64) -> usize {
    let cut = threshold_fraction * table.total() as f64;
    table
        .row_totals()
        .into_iter()
        .filter(|&t| t > 0 && t as f64 >= cut)
        .count()
}

/// Minimum-cost perfect matching on a square cost matrix (row-major `n x n`).
/// Returns `col_of_row`.
pub fn min_cost_assignment(cost: &[i64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be square");
    if n == 0 {
        return Vec::new();
    }
    // Shortest augmenting paths with row/column potentials; 1-based with a
    // virtual column 0.
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = row_of_col[col0];
            let mut delta = INF;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let cur = cost[(r0 - 1) * n + (col - 1)] - u[r0] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[row_of_col[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            row_of_col[col0] = row_of_col[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for col in 1..=n {
        col_of_row[row_of_col[col] - 1] = col - 1;
    }
    col_of_row
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Class given to each cluster; `None` for surplus clusters.
    pub class_of_cluster: Vec<Option<usize>>,
    pub accuracy: f64,
}

impl Assignment {
    /// Predicted class per sample; samples in unlabeled clusters get `None`.
    pub fn apply(&self, clusters: &[usize]) -> Vec<Option<usize>> {
        clusters
            .iter()
            .map(|&c| self.class_of_cluster.get(c).copied().flatten())
            .collect()
    }

    /// Fraction of samples whose mapped class equals their label.
    pub fn accuracy_on(&self, clusters: &[usize], labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let hits = self
            .apply(clusters)
            .iter()
            .zip(labels)
            .filter(|(p, &y)| **p == Some(y))
            .count();
        hits as f64 / labels.len() as f64
    }
}

/// Injective cluster-to-class map maximizing the matched count. The table is
/// zero-padded to square, so surplus clusters (or classes) stay unmatched.
pub fn hungarian_accuracy(table: &ContingencyTable) -> Assignment {
    let size = table.clusters.max(table.classes);
    let mut cost = vec![0i64; size * size];
    for r in 0..table.clusters {
        for c in 0..table.classes {
            cost[r * size + c] = -(table.get(r, c) as i64);
        }
    }
    let col_of_row = min_cost_assignment(&cost, size);
    let mut matched = 0u64;
    let class_of_cluster = (0..table.clusters)
        .map(|r| {
            let c = col_of_row[r];
            (c < table.classes).then(|| {
                matched += table.get(r, c);
                c
            })
        })
        .collect();
    let n = table.total();
    Assignment {
        class_of_cluster,
        accuracy: if n == 0 { 0.0 } else { matched as f64 / n as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn contingency_examples() {
        let t = contingency(&[0, 0, 1, 1, 2, 2], &[0, 0, 1, 1, 2, 2], 3, 3).unwrap();
        assert_eq!(t, ContingencyTable::from_rows(&[[2, 0, 0], [0, 2, 0], [0, 0, 2]]).unwrap());
        let t = contingency(&[0, 0, 0], &[0, 1, 1], 3, 2).unwrap();
        assert_eq!(t.row_totals(), vec![3, 0, 0]);
        let t = contingency(&[0, 0, 1, 1, 1], &[0, 1, 1, 1, 0], 2, 2).unwrap();
        assert_eq!((t.get(0, 0), t.get(0, 1), t.get(1, 0), t.get(1, 1)), (1, 1, 1, 2));
        assert!(contingency(&[2], &[0], 2, 2).is_err());
        assert!(contingency(&[0], &[2], 2, 2).is_err());
        assert!(contingency(&[0, 1], &[0], 2, 2).is_err());
    }

    #[test]
    fn purity_examples() {
        let perfect = ContingencyTable::from_rows(&[[3, 0], [0, 4]]).unwrap();
        assert_eq!(purity(&perfect).unwrap(), 1.0);
        let t = ContingencyTable::from_rows(&[[1, 1], [1, 2]]).unwrap();
        assert_abs_diff_eq!(purity(&t).unwrap(), 0.6, epsilon = 1e-15);
        let one = ContingencyTable::from_rows(&[[5, 5]]).unwrap();
        assert_eq!(purity(&one).unwrap(), 0.5);
        let empty = ContingencyTable::from_rows(&[[0, 0]]).unwrap();
        assert!(purity(&empty).is_err());
    }

    #[test]
    fn nmi_examples() {
        let perfect = ContingencyTable::from_rows(&[[0, 3], [4, 0]]).unwrap();
        assert_abs_diff_eq!(nmi(&perfect), 1.0, epsilon = 1e-12);
        let single = ContingencyTable::from_rows(&[[4, 6]]).unwrap();
        assert_eq!(nmi(&single), 0.0);

        // [[2,0],[1,1]], n = 4: rows (2,2), cols (3,1).
        let t = ContingencyTable::from_rows(&[[2, 0], [1, 1]]).unwrap();
        let h_rows = 2f64.ln();
        let h_cols = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        let mi = 0.5 * (0.5f64 / (0.5 * 0.75)).ln()
            + 0.25 * (0.25f64 / (0.5 * 0.75)).ln()
            + 0.25 * (0.25f64 / (0.5 * 0.25)).ln();
        assert_abs_diff_eq!(nmi(&t), mi / (h_rows * h_cols).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(nmi(&t), 0.345_592_03, epsilon = 1e-8);
    }

    #[test]
    fn dominant_examples() {
        let even = ContingencyTable::from_counts(10, 1, vec![10; 10]).unwrap();
        assert_eq!(dominant_clusters(&even, 0.01), 10);
        let one = ContingencyTable::from_rows(&[[0, 0], [7, 3], [0, 0]]).unwrap();
        assert_eq!(dominant_clusters(&one, 0.05), 1);
        let mut counts = vec![0; 30];
        for c in counts.iter_mut().take(10) {
            *c = 99;
        }
        counts[20] = 5;
        let t = ContingencyTable::from_counts(30, 1, counts).unwrap();
        assert_eq!(dominant_clusters(&t, 0.01), 10);
    }

    #[test]
    fn hungarian_examples() {
        let diag = ContingencyTable::from_rows(&[[5, 0, 0], [0, 3, 0], [0, 0, 2]]).unwrap();
        let a = hungarian_accuracy(&diag);
        assert_eq!(a.class_of_cluster, vec![Some(0), Some(1), Some(2)]);
        assert_eq!(a.accuracy, 1.0);

        let anti = ContingencyTable::from_rows(&[[0, 0, 4], [0, 4, 0], [4, 0, 0]]).unwrap();
        let a = hungarian_accuracy(&anti);
        assert_eq!(a.class_of_cluster, vec![Some(2), Some(1), Some(0)]);
        assert_eq!(a.accuracy, 1.0);

        let wide = ContingencyTable::from_rows(&[[3, 1], [0, 0], [1, 5]]).unwrap();
        let a = hungarian_accuracy(&wide);
        assert_eq!(a.class_of_cluster, vec![Some(0), None, Some(1)]);
        assert_abs_diff_eq!(a.accuracy, 0.8, epsilon = 1e-15);
        assert_eq!(a.accuracy_on(&[0, 2, 1], &[0, 1, 1]), 2.0 / 3.0);
    }

    #[test]
    fn csv_layout() {
        let t = ContingencyTable::from_rows(&[[1, 0], [0, 2]]).unwrap();
        assert_eq!(t.to_csv(), "cluster,0,1\n0,1,0\n1,0,2\n");
    }
}
