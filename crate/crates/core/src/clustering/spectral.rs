//! Normalized spectral clustering (Ng-Jordan-Weiss style) with a
//! deterministic k-means back end.

use super::AffinityMatrix;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use nalgebra::DMatrix;
use rand::Rng;

const DEGREE_FLOOR: f64 = 1e-12;
const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITERS: usize = 300;

/// Symmetric normalized Laplacian `L = I - D^{-1/2} W D^{-1/2}`. All-zero
/// rows get a self-degree floor so the scaling stays defined.
pub fn normalized_laplacian(w: &AffinityMatrix) -> DMatrix<f64> {
    let n = w.n();
    let t = w.tensor();
    let mut inv_sqrt_deg = vec![0.0; n];
    for i in 0..n {
        let d: f64 = (0..n).map(|j| t.at(i, j)).sum();
        inv_sqrt_deg[i] = 1.0 / d.max(DEGREE_FLOOR).sqrt();
    }
    DMatrix::from_fn(n, n, |i, j| {
        let off = -t.at(i, j) * inv_sqrt_deg[i] * inv_sqrt_deg[j];
        if i == j {
            1.0 + off
        } else {
            off
        }
    })
}

/// Rows of the spectral embedding: eigenvectors of the `n_clusters`
/// smallest Laplacian eigenvalues, sign-canonicalized, then row-normalized
/// to unit length (rows below the norm floor are left as-is).
pub fn spectral_embedding(w: &AffinityMatrix, n_clusters: usize) -> Result<Tensor> {
    let n = w.n();
    let lap = normalized_laplacian(w);
    let eig = nalgebra::SymmetricEigen::try_new(lap, f64::EPSILON, 10_000).ok_or_else(|| {
        Error::Numeric(format!(
            "symmetric eigensolver failed to converge on the {n}x{n} Laplacian"
        ))
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });

    let mut emb = Tensor::zeros(vec![n, n_clusters]);
    for (col, &ei) in order.iter().take(n_clusters).enumerate() {
        let v = eig.eigenvectors.column(ei);
        // canonical sign: the largest-magnitude component is positive
        let mut lead = 0usize;
        for r in 0..n {
            if v[r].abs() > v[lead].abs() {
                lead = r;
            }
        }
        let flip = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            emb.set(r, col, flip * v[r]);
        }
    }
    for r in 0..n {
        let norm = emb.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > DEGREE_FLOOR {
            for v in emb.row_mut(r) {
                *v /= norm;
            }
        }
    }
    Ok(emb)
}

/// Spectral clustering: embedding + k-means (k-means++ seeding, 20
/// restarts with seed-derived sub-seeds, 300 iterations max, ties broken
/// by lowest restart index).
pub fn spectral_cluster(w: &AffinityMatrix, n_clusters: usize, seed: u64) -> Result<Vec<usize>> {
    if n_clusters < 2 {
        return Err(Error::Config(format!(
            "spectral_cluster needs n_clusters >= 2, got {n_clusters}"
        )));
    }
    if n_clusters > w.n() {
        return Err(Error::Config(format!(
            "n_clusters {n_clusters} exceeds {} samples",
            w.n()
        )));
    }
    let emb = spectral_embedding(w, n_clusters)?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let (inertia, labels) = kmeans_once(&emb, n_clusters, seed, restart as u64)?;
        let better = match &best {
            None => true,
            Some((bi, _)) => inertia < *bi,
        };
        if better {
            best = Some((inertia, labels));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn kmeans_once(
    points: &Tensor,
    k: usize,
    seed: u64,
    restart: u64,
) -> Result<(f64, Vec<usize>)> {
    let (n, d) = (points.shape()[0], points.shape()[1]);
    let mut rng = crate::rng::rng_for(seed, "kmeans", restart, 0);

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points.row(rng.gen_range(0..n)).to_vec());
    let mut d2 = vec![0.0f64; n];
    while centers.len() < k {
        let mut total = 0.0;
        for i in 0..n {
            d2[i] = centers
                .iter()
                .map(|c| sq_dist(points.row(i), c))
                .fold(f64::INFINITY, f64::min);
            total += d2[i];
        }
        let next = if total > 0.0 {
            let target = rng.gen_range(0.0..total);
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centers.push(points.row(next).to_vec());
    }

    let mut labels = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITERS {
        // assignment (ties go to the lowest center index)
        let mut changed = false;
        for i in 0..n {
            let mut best_c = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let dist = sq_dist(points.row(i), center);
                if dist < best_d {
                    best_d = dist;
                    best_c = c;
                }
            }
            if labels[i] != best_c {
                labels[i] = best_c;
                changed = true;
            }
        }

        // update
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0f64; d]; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, &v) in sums[labels[i]].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // move the point farthest from its center into the empty cluster
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(points.row(a), &centers[labels[a]])
                            .partial_cmp(&sq_dist(points.row(b), &centers[labels[b]]))
                            .expect("finite")
                            .then(b.cmp(&a)) // prefer lower index on ties
                    })
                    .expect("n > 0");
                labels[far] = c;
                centers[c] = points.row(far).to_vec();
                changed = true;
            } else {
                for (cv, s) in centers[c].iter_mut().zip(&sums[c]) {
                    *cv = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    // final inertia against the final centers
    let mut inertia = 0.0;
    for i in 0..n {
        inertia += sq_dist(points.row(i), &centers[labels[i]]);
    }
    Ok((inertia, labels))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
