//! Synthetic union-of-subspaces data.

use super::{Dataset, SampleShape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Parameters of the union-of-subspaces generator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SynthSpec {
    pub n_subspaces: usize,
    pub subspace_dim: usize,
    pub ambient_dim: usize,
    pub points_per_subspace: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subspaces == 0 {
            return Err(Error::Config("n_subspaces must be positive".into()));
        }
        if self.subspace_dim == 0 || self.subspace_dim >= self.ambient_dim {
            return Err(Error::Config(format!(
                "subspace_dim must satisfy 0 < dim < ambient ({} vs {})",
                self.subspace_dim, self.ambient_dim
            )));
        }
        if self.points_per_subspace <= self.subspace_dim {
            return Err(Error::Config(format!(
                "points_per_subspace ({}) must exceed subspace_dim ({}) for identifiability",
                self.points_per_subspace, self.subspace_dim
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn total_points(&self) -> usize {
        self.n_subspaces * self.points_per_subspace
    }
}

/// Draws one orthonormal basis per subspace (QR of a seeded Gaussian
/// matrix), samples points as `U a` with Gaussian coefficients, adds
/// isotropic noise, and normalizes every point to unit norm. Labels are
/// the subspace indices; sample order is subspace-major.
pub fn gen_union_of_subspaces(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.ambient_dim;
    let mut samples = Vec::with_capacity(spec.total_points());
    let mut labels = Vec::with_capacity(spec.total_points());

    for j in 0..spec.n_subspaces {
        let mut rng = crate::rng::rng_for(spec.seed, "synth-basis", j as u64, 0);
        let gauss = DMatrix::from_fn(d, spec.subspace_dim, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let basis = gauss.qr().q(); // d x subspace_dim, orthonormal columns

        let mut prng = crate::rng::rng_for(spec.seed, "synth-points", j as u64, 0);
        for _ in 0..spec.points_per_subspace {
            let coeffs: Vec<f64> = (0..spec.subspace_dim)
                .map(|_| prng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut x = vec![0.0; d];
            for (c, col) in coeffs.iter().zip(basis.column_iter()) {
                for (xi, bi) in x.iter_mut().zip(col.iter()) {
                    *xi += c * bi;
                }
            }
            if spec.noise_sigma > 0.0 {
                for xi in x.iter_mut() {
                    *xi += spec.noise_sigma * prng.sample::<f64, _>(StandardNormal);
                }
            }
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Numeric("generated point has near-zero norm".into()));
            }
            for xi in x.iter_mut() {
                *xi /= norm;
            }
            samples.push(Tensor::new(vec![d], x)?);
            labels.push(j);
        }
    }

    Dataset::new(
        &format!(
            "synth-{}x{}x{}",
            spec.n_subspaces, spec.subspace_dim, spec.ambient_dim
        ),
        SampleShape::Flat(d),
        samples,
        Some(labels),
    )
}

/// Closed-form ridge self-expression: for every sample `i`, solves
/// `min_c ||z_i - c^T Z_{-i}||^2 + beta ||c||^2` over the other samples
/// (leave-one-out enforces the zero diagonal) and writes the coefficients
/// into row `i` of `C`. The classical two-step baseline and the oracle the
/// trained pipelines are checked against.
pub fn ridge_self_expression(z: &Tensor, beta: f64) -> Result<Tensor> {
    if z.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "ridge_self_expression: expected [N,h], got {:?}",
            z.shape()
        )));
    }
    if beta <= 0.0 {
        return Err(Error::Config("ridge beta must be positive".into()));
    }
    let (n, h) = (z.shape()[0], z.shape()[1]);
    if n < 2 {
        return Err(Error::Config("need at least 2 samples".into()));
    }
    // Gram matrix once; per-sample systems are its leave-one-out minors.
    let zm = DMatrix::from_row_slice(n, h, z.data());
    let gram = &zm * zm.transpose();

    let mut c = Tensor::zeros(vec![n, n]);
    let mut others: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        others.clear();
        others.extend((0..n).filter(|&j| j != i));
        let mut a = DMatrix::zeros(n - 1, n - 1);
        let mut b = nalgebra::DVector::zeros(n - 1);
        for (r, &jr) in others.iter().enumerate() {
            b[r] = gram[(jr, i)];
            for (s, &js) in others.iter().enumerate() {
                a[(r, s)] = gram[(jr, js)];
            }
            a[(r, r)] += beta;
        }
        let sol = a
            .cholesky()
            .ok_or_else(|| Error::Numeric("ridge system not positive definite".into()))?
            .solve(&b);
        for (r, &j) in others.iter().enumerate() {
            c.set(i, j, sol[r]);
        }
    }
    Ok(c)
}
