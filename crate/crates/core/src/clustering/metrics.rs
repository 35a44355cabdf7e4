//! Clustering accuracy (optimal assignment) and normalized mutual
//! information.

use crate::error::{Error, Result};

/// Clustering accuracy: the best fraction of matches over all one-to-one
/// cluster-to-class mappings, found by the Hungarian algorithm on the
/// contingency matrix.
pub fn acc(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(acc_with_assignment(pred, truth)?.0)
}

/// Like [`acc`], also returning the (pred cluster, truth class) mapping
/// that attains the optimum. Unmatched surplus clusters are omitted.
pub fn acc_with_assignment(pred: &[usize], truth: &[usize]) -> Result<(f64, Vec<(usize, usize)>)> {
    let table = contingency(pred, truth)?;
    // maximize matches == minimize negated counts
    let cost: Vec<Vec<f64>> = table
        .iter()
        .map(|row| row.iter().map(|&v| -(v as f64)).collect())
        .collect();
    let assignment = hungarian_min(&cost);
    let mut matched = 0usize;
    let mut mapping = Vec::new();
    for (cluster, &class) in assignment.iter().enumerate() {
        matched += table[cluster][class];
        if table[cluster].iter().any(|&v| v > 0) {
            mapping.push((cluster, class));
        }
    }
    Ok((matched as f64 / pred.len() as f64, mapping))
}

/// NMI = 2 I(p, r) / (H(p) + H(r)) with plug-in entropies in natural log
/// and the convention 0 ln 0 = 0. Two single-cluster partitions score 1.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let n = pred.len() as f64;
    let k = table.len();
    let row_sums: Vec<f64> = table.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let col_sums: Vec<f64> = (0..k)
        .map(|j| table.iter().map(|r| r[j]).sum::<usize>() as f64)
        .collect();

    let entropy = |sums: &[f64]| -> f64 {
        -sums
            .iter()
            .filter(|&&s| s > 0.0)
            .map(|&s| (s / n) * (s / n).ln())
            .sum::<f64>()
    };
    let hp = entropy(&row_sums);
    let hr = entropy(&col_sums);
    if hp + hr == 0.0 {
        return Ok(1.0); // both partitions are a single cluster
    }

    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let pij = nij as f64 / n;
                mi += pij * (pij * n * n / (row_sums[i] * col_sums[j])).ln();
            }
        }
    }
    Ok(2.0 * mi / (hp + hr))
}

/// Square contingency table indexed `[pred cluster][truth class]`, padded
/// with zero rows/columns to `max(k_pred, k_truth)`.
fn contingency(pred: &[usize], truth: &[usize]) -> Result<Vec<Vec<usize>>> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "label lengths differ: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Dimension("empty label arrays".into()));
    }
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let k = kp.max(kt);
    let mut table = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1;
    }
    Ok(table)
}

/// Min-cost perfect assignment on a square cost matrix (Kuhn-Munkres with
/// potentials, O(n^3)). Returns `row -> column`.
fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j]: row matched to column j (1-based)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_labels_score_one() {
        let l = [0, 1, 2, 0, 1, 2];
        assert_eq!(acc(&l, &l).unwrap(), 1.0);
        assert_eq!(nmi(&l, &l).unwrap(), 1.0);
    }

    #[test]
    fn relabeling_is_free_for_acc() {
        assert_eq!(acc(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn three_quarters_case() {
        assert_eq!(acc(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn independent_marginals_have_zero_nmi() {
        let v = nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!(v.abs() < 1e-12, "nmi = {v}");
    }

    #[test]
    fn nmi_matches_direct_contingency_evaluation() {
        // pred = [0,1,1,1], truth = [0,0,1,1]; table: [[1,0],[1,2]]
        let n = 4.0f64;
        let mi = (1.0 / n) * ((1.0 / n) / ((1.0 / n) * (2.0 / n))).ln()
            + (1.0 / n) * ((1.0 / n) / ((3.0 / n) * (2.0 / n))).ln()
            + (2.0 / n) * ((2.0 / n) / ((3.0 / n) * (2.0 / n))).ln();
        let hp = -((1.0 / n) * (1.0f64 / n).ln() + (3.0 / n) * (3.0f64 / n).ln());
        let hr = -((2.0 / n) * (2.0f64 / n).ln() + (2.0 / n) * (2.0f64 / n).ln());
        let expect = 2.0 * mi / (hp + hr);
        let got = nmi(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn single_cluster_conventions() {
        assert_eq!(nmi(&[0, 0, 0], &[0, 0, 0]).unwrap(), 1.0);
        let v = nmi(&[0, 0, 0], &[0, 1, 2]).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_dimension_error() {
        assert!(matches!(acc(&[0], &[0, 1]), Err(Error::Dimension(_))));
        assert!(matches!(nmi(&[0], &[0, 1]), Err(Error::Dimension(_))));
    }

    #[test]
    fn assignment_reports_used_clusters() {
        let (a, map) = acc_with_assignment(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(map, vec![(0, 1), (1, 0)]);
    }
}
