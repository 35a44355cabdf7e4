//! From coefficients to cluster labels and scores: affinity construction,
//! normalized spectral clustering, and the ACC/NMI metrics.

mod metrics;
mod spectral;

pub use metrics::{acc, acc_with_assignment, nmi};
pub use spectral::{normalized_laplacian, spectral_cluster, spectral_embedding};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// How to turn `C` into a symmetric nonnegative affinity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "q")]
pub enum AffinityHeuristic {
    /// `W = |C| + |C^T|`.
    AbsSym,
    /// Keep the `q` largest-magnitude entries per row of `C` first, then
    /// symmetrize. Useful for sparsifying dense coefficient matrices.
    AbsSymThreshold(usize),
}

/// Symmetric, nonnegative, zero-diagonal matrix fed to spectral clustering.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    w: Tensor,
}

impl AffinityMatrix {
    /// Validates symmetry (exact), nonnegativity, and the zero diagonal.
    pub fn new(w: Tensor) -> Result<Self> {
        if w.ndim() != 2 || w.shape()[0] != w.shape()[1] {
            return Err(Error::Dimension(format!(
                "affinity must be square, got {:?}",
                w.shape()
            )));
        }
        let n = w.shape()[0];
        for i in 0..n {
            if w.at(i, i) != 0.0 {
                return Err(Error::Contract(format!("affinity diag[{i}] != 0")));
            }
            for j in 0..n {
                let v = w.at(i, j);
                if v < 0.0 {
                    return Err(Error::Contract(format!("affinity[{i},{j}] = {v} < 0")));
                }
                if v != w.at(j, i) {
                    return Err(Error::Contract(format!(
                        "affinity not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(AffinityMatrix { w })
    }

    pub fn n(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.w
    }

    pub fn into_tensor(self) -> Tensor {
        self.w
    }
}

/// Builds the affinity from a zero-diagonal coefficient matrix.
pub fn build_affinity(c: &Tensor, heuristic: AffinityHeuristic) -> Result<AffinityMatrix> {
    if c.ndim() != 2 || c.shape()[0] != c.shape()[1] {
        return Err(Error::Dimension(format!(
            "C must be square, got {:?}",
            c.shape()
        )));
    }
    let n = c.shape()[0];
    for i in 0..n {
        if c.at(i, i) != 0.0 {
            return Err(Error::Contract(format!(
                "build_affinity requires diag(C) = 0, got C[{i},{i}] = {}",
                c.at(i, i)
            )));
        }
    }
    let base = match heuristic {
        AffinityHeuristic::AbsSym => c.clone(),
        AffinityHeuristic::AbsSymThreshold(q) => {
            if q < 1 {
                return Err(Error::Config("abs_sym_threshold: q must be >= 1".into()));
            }
            let mut kept = Tensor::zeros(vec![n, n]);
            let mut order: Vec<usize> = Vec::with_capacity(n);
            for i in 0..n {
                order.clear();
                order.extend(0..n);
                // largest magnitude first; ties broken by column index
                order.sort_by(|&a, &b| {
                    c.at(i, b)
                        .abs()
                        .partial_cmp(&c.at(i, a).abs())
                        .expect("finite C")
                        .then(a.cmp(&b))
                });
                for &j in order.iter().take(q.min(n)) {
                    kept.set(i, j, c.at(i, j));
                }
            }
            kept
        }
    };
    let mut w = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                w.set(i, j, base.at(i, j).abs() + base.at(j, i).abs());
            }
        }
    }
    AffinityMatrix::new(w)
}

/// Clustering output: labels plus scores against ground truth when known.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    /// Cluster-to-class mapping chosen by the optimal assignment in ACC.
    pub assignment: Option<Vec<(usize, usize)>>,
    pub affinity: AffinityMatrix,
}

impl ClusterResult {
    /// Runs spectral clustering on `affinity` and scores against `truth`
    /// when provided.
    pub fn compute(
        affinity: AffinityMatrix,
        n_clusters: usize,
        seed: u64,
        truth: Option<&[usize]>,
    ) -> Result<Self> {
        let labels = spectral_cluster(&affinity, n_clusters, seed)?;
        let (acc_v, nmi_v, assignment) = match truth {
            Some(t) => {
                let (a, map) = acc_with_assignment(&labels, t)?;
                (Some(a), Some(nmi(&labels, t)?), Some(map))
            }
            None => (None, None, None),
        };
        Ok(ClusterResult {
            labels,
            acc: acc_v,
            nmi: nmi_v,
            assignment,
            affinity,
        })
    }

    /// CSV with header `sample_id,pred,truth` (truth column empty when
    /// unknown).
    pub fn save_csv(&self, path: &std::path::Path, truth: Option<&[usize]>) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "sample_id,pred,truth")?;
        for (i, &p) in self.labels.iter().enumerate() {
            match truth {
                Some(t) => writeln!(w, "{i},{p},{}", t[i])?,
                None => writeln!(w, "{i},{p},")?,
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_c_gives_zero_affinity() {
        let w = build_affinity(&Tensor::zeros(vec![3, 3]), AffinityHeuristic::AbsSym).unwrap();
        assert!(w.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_negative_entry_symmetrizes() {
        let mut c = Tensor::zeros(vec![2, 2]);
        c.set(0, 1, -2.0);
        let w = build_affinity(&c, AffinityHeuristic::AbsSym).unwrap();
        assert_eq!(w.tensor().at(0, 1), 2.0);
        assert_eq!(w.tensor().at(1, 0), 2.0);
    }

    #[test]
    fn abs_sym_matches_elementwise_recomputation() {
        let mut rng = crate::rng::rng_for(3, "affinity", 0, 0);
        let mut c = Tensor::randn(vec![6, 6], 1.0, &mut rng);
        crate::selfexpress::project_zero_diag(&mut c);
        let w = build_affinity(&c, AffinityHeuristic::AbsSym).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i == j {
                    0.0
                } else {
                    c.at(i, j).abs() + c.at(j, i).abs()
                };
                assert_eq!(w.tensor().at(i, j), expect);
            }
        }
    }

    #[test]
    fn threshold_keeps_q_largest_per_row() {
        let mut c = Tensor::zeros(vec![3, 3]);
        c.set(0, 1, 0.1);
        c.set(0, 2, -0.9);
        c.set(1, 0, 0.5);
        c.set(1, 2, 0.4);
        c.set(2, 0, 0.2);
        c.set(2, 1, 0.3);
        let w = build_affinity(&c, AffinityHeuristic::AbsSymThreshold(1)).unwrap();
        // row 0 keeps c[0,2]; row 1 keeps c[1,0]; row 2 keeps c[2,1]
        assert_eq!(w.tensor().at(0, 1), 0.5);
        assert_eq!(w.tensor().at(0, 2), 0.9);
        assert_eq!(w.tensor().at(1, 2), 0.3);
        assert!(matches!(
            build_affinity(&c, AffinityHeuristic::AbsSymThreshold(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn nonzero_diag_rejected() {
        let mut c = Tensor::zeros(vec![2, 2]);
        c.set(1, 1, 0.5);
        assert!(build_affinity(&c, AffinityHeuristic::AbsSym).is_err());
    }
}
