//! The self-expressive layer: a trainable `N x N` coefficient matrix `C`
//! with zero diagonal that reconstructs each latent code as a linear
//! combination of the others, `Z_hat = C Z`.
//!
//! In mini-batch training the product is taken against the memory bank
//! with the current batch's live rows spliced in, so gradient reaches `C`
//! and the current latents but never the stored historical rows.

use crate::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

/// Conventional parameter id for `C` inside a training session's
/// [`crate::tensor::ParameterSet`].
pub const C_PARAM: &str = "se.c";

/// The coefficient matrix with its `diag(C) = 0` invariant.
#[derive(Debug, Clone)]
pub struct SelfExpressiveCoefficients {
    c: Tensor,
}

impl SelfExpressiveCoefficients {
    /// All-zero init: the first fine-tune step reduces to pure
    /// reconstruction, matching the pretrain-to-finetune handoff.
    pub fn zeros(n: usize) -> Self {
        SelfExpressiveCoefficients {
            c: Tensor::zeros(vec![n, n]),
        }
    }

    /// Scaled Gaussian off-diagonal init (diagonal stays zero).
    pub fn noise<R: Rng>(n: usize, scale: f64, rng: &mut R) -> Self {
        let mut c = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    c.set(i, j, scale * rng.sample::<f64, _>(StandardNormal));
                }
            }
        }
        SelfExpressiveCoefficients { c }
    }

    /// Wraps an existing matrix, validating squareness, finiteness, and the
    /// zero diagonal.
    pub fn from_tensor(c: Tensor) -> Result<Self> {
        if c.ndim() != 2 || c.shape()[0] != c.shape()[1] {
            return Err(Error::Dimension(format!(
                "C must be square, got {:?}",
                c.shape()
            )));
        }
        if !c.all_finite() {
            return Err(Error::Numeric("C contains non-finite entries".into()));
        }
        for i in 0..c.shape()[0] {
            if c.at(i, i) != 0.0 {
                return Err(Error::Contract(format!("diag(C)[{i}] = {} != 0", c.at(i, i))));
            }
        }
        Ok(SelfExpressiveCoefficients { c })
    }

    pub fn n(&self) -> usize {
        self.c.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.c
    }

    pub fn into_tensor(self) -> Tensor {
        self.c
    }
}

/// Zeroes the diagonal in place. Applied after every optimizer update so
/// `diag(C) = 0` holds at every observable point of training.
pub fn project_zero_diag(c: &mut Tensor) {
    debug_assert_eq!(c.ndim(), 2);
    debug_assert_eq!(c.shape()[0], c.shape()[1]);
    let n = c.shape()[0];
    for i in 0..n {
        c.set(i, i, 0.0);
    }
}

/// Rows `batch_indices` of `C Z`, where `Z` is the bank snapshot with the
/// live batch latents spliced over their rows. Gradient flows into `C` and
/// into `current_batch_latents`; historical bank rows stay constant.
///
/// The caller must have written the current batch into the bank first, so
/// the stored rows and the live rows agree in value.
pub fn reconstruct_batch(
    tape: &mut Tape,
    c: Var,
    bank: &MemoryBank,
    batch_indices: &[usize],
    current_batch_latents: Var,
) -> Result<Var> {
    let n = bank.len();
    let cs = tape.value(c).shape();
    if cs.len() != 2 || cs[0] != n || cs[1] != n {
        return Err(Error::Dimension(format!(
            "C has shape {cs:?}, bank holds {n} rows"
        )));
    }
    let live = tape.value(current_batch_latents);
    if live.ndim() != 2 || live.shape()[1] != bank.width() {
        return Err(Error::Dimension(format!(
            "latents {:?} vs bank width {}",
            live.shape(),
            bank.width()
        )));
    }
    let snapshot = bank.read_full()?;
    let z_const = tape.constant_owned(snapshot);
    let z_full = tape.rows_overwrite(z_const, current_batch_latents, batch_indices)?;
    let c_rows = tape.rows_gather(c, batch_indices)?;
    tape.matmul(c_rows, z_full)
}

/// Self-expression loss `||Z_i - Z_hat_i||_F^2` (summed squares).
pub fn se_loss(tape: &mut Tape, z_batch: Var, z_hat_batch: Var) -> Result<Var> {
    tape.frobenius_sq(z_batch, z_hat_batch)
}

/// Regularizer on `C`: squared Frobenius norm. The smooth choice — a
/// spectral norm here would make the total loss non-smooth.
pub fn reg_loss(tape: &mut Tape, c: Var) -> Var {
    tape.sum_sq(c)
}

/// Weighted total `recon + alpha * se + beta * reg`.
pub fn total_loss(
    tape: &mut Tape,
    recon_or_nce: Var,
    se: Var,
    reg: Var,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::Config(format!(
            "loss weights must be nonnegative, got alpha={alpha}, beta={beta}"
        )));
    }
    let se_term = tape.scale(se, alpha);
    let reg_term = tape.scale(reg, beta);
    let partial = tape.add(recon_or_nce, se_term)?;
    tape.add(partial, reg_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParameterSet;

    fn bank_from_rows(rows: &[Vec<f64>]) -> MemoryBank {
        let t = Tensor::from_rows(rows).unwrap();
        MemoryBank::init_from_encoder(rows.len(), rows.len(), |idx| {
            let picked: Vec<Vec<f64>> = idx.iter().map(|&i| t.row(i).to_vec()).collect();
            Tensor::from_rows(&picked)
        })
        .unwrap()
    }

    #[test]
    fn zero_c_reconstructs_zero() {
        let bank = bank_from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let mut tape = Tape::new();
        let c = tape.leaf(&Tensor::zeros(vec![2, 2]), true);
        let live = tape.constant(&bank.read_full().unwrap());
        let out = reconstruct_batch(&mut tape, c, &bank, &[0, 1], live).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_samples_reconstruct_each_other_exactly() {
        let z = vec![0.6, 0.8];
        let bank = bank_from_rows(&[z.clone(), z.clone()]);
        let mut tape = Tape::new();
        let c = tape.leaf(
            &Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
            true,
        );
        let live = tape.constant(&bank.read_full().unwrap());
        let out = reconstruct_batch(&mut tape, c, &bank, &[0, 1], live).unwrap();
        assert_eq!(tape.value(out).row(0), z.as_slice());
        assert_eq!(tape.value(out).row(1), z.as_slice());
    }

    #[test]
    fn matches_triple_loop_product() {
        let mut rng = crate::rng::rng_for(5, "se-test", 0, 0);
        let z = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let mut c = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        project_zero_diag(&mut c);
        let rows: Vec<Vec<f64>> = (0..3).map(|i| z.row(i).to_vec()).collect();
        let bank = bank_from_rows(&rows);

        let mut tape = Tape::new();
        let cv = tape.leaf(&c, true);
        let live = tape.constant(&z);
        let out = reconstruct_batch(&mut tape, cv, &bank, &[0, 1, 2], live).unwrap();

        // independent triple-loop dense product
        for i in 0..3 {
            for p in 0..4 {
                let mut acc = 0.0;
                for j in 0..3 {
                    acc += c.at(i, j) * z.at(j, p);
                }
                let got = tape.value(out).at(i, p);
                assert!((got - acc).abs() < 1e-12, "({i},{p}): {got} vs {acc}");
            }
        }
    }

    #[test]
    fn out_of_range_index_is_an_index_error() {
        let bank = bank_from_rows(&[vec![1.0], vec![2.0]]);
        let mut tape = Tape::new();
        let c = tape.leaf(&Tensor::zeros(vec![2, 2]), true);
        let live = tape.constant(&Tensor::from_rows(&[vec![1.0]]).unwrap());
        assert!(matches!(
            reconstruct_batch(&mut tape, c, &bank, &[7], live),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn width_mismatch_is_a_dimension_error() {
        let bank = bank_from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let mut tape = Tape::new();
        let c = tape.leaf(&Tensor::zeros(vec![2, 2]), true);
        let live = tape.constant(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        assert!(matches!(
            reconstruct_batch(&mut tape, c, &bank, &[0], live),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn se_loss_cases() {
        let bank = bank_from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let z = bank.read_full().unwrap();
        let mut tape = Tape::new();
        let zv = tape.constant(&z);
        let same = se_loss(&mut tape, zv, zv).unwrap();
        assert_eq!(tape.scalar(same), 0.0);

        // C = 0 -> loss = ||Z||_F^2
        let c = tape.leaf(&Tensor::zeros(vec![2, 2]), true);
        let zhat = reconstruct_batch(&mut tape, c, &bank, &[0, 1], zv).unwrap();
        let loss = se_loss(&mut tape, zv, zhat).unwrap();
        assert!((tape.scalar(loss) - z.sum_sq()).abs() < 1e-12);
    }

    #[test]
    fn reg_loss_cases() {
        let mut tape = Tape::new();
        let zero = tape.leaf(&Tensor::zeros(vec![3, 3]), true);
        let r0 = reg_loss(&mut tape, zero);
        assert_eq!(tape.scalar(r0), 0.0);

        let mut single = Tensor::zeros(vec![3, 3]);
        single.set(0, 2, 2.0);
        let c = tape.leaf(&single, true);
        let r1 = reg_loss(&mut tape, c);
        assert_eq!(tape.scalar(r1), 4.0);
    }

    #[test]
    fn total_loss_is_the_weighted_sum() {
        let mut tape = Tape::new();
        let recon = tape.leaf(&Tensor::scalar(1.0), false);
        let se = tape.leaf(&Tensor::scalar(2.0), false);
        let reg = tape.leaf(&Tensor::scalar(3.0), false);
        let total = total_loss(&mut tape, recon, se, reg, 50.0, 1.0).unwrap();
        assert_eq!(tape.scalar(total), 104.0);

        let only = total_loss(&mut tape, recon, se, reg, 0.0, 0.0).unwrap();
        assert_eq!(tape.scalar(only), 1.0);

        assert!(matches!(
            total_loss(&mut tape, recon, se, reg, -1.0, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn projection_zeroes_diagonal_only() {
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        project_zero_diag(&mut eye);
        assert!(eye.data().iter().all(|&v| v == 0.0));

        let mut c = Tensor::zeros(vec![2, 2]);
        c.set(0, 1, 5.0);
        let before = c.clone();
        project_zero_diag(&mut c);
        assert_eq!(c.data(), before.data());
    }

    #[test]
    fn diag_stays_zero_through_adam_steps() {
        let n = 4;
        let mut rng = crate::rng::rng_for(2, "se-adam", 0, 0);
        let z = Tensor::randn(vec![n, 3], 1.0, &mut rng);
        let rows: Vec<Vec<f64>> = (0..n).map(|i| z.row(i).to_vec()).collect();
        let bank = bank_from_rows(&rows);

        let mut params = ParameterSet::new();
        params
            .insert(C_PARAM, SelfExpressiveCoefficients::zeros(n).into_tensor())
            .unwrap();
        let mut adam = crate::optim::AdamState::new(0.05);
        for _ in 0..10 {
            let mut tape = Tape::new();
            let c = tape.param(&params, C_PARAM).unwrap();
            let zv = tape.constant(&z);
            let zhat = reconstruct_batch(&mut tape, c, &bank, &[0, 1, 2, 3], zv).unwrap();
            let se = se_loss(&mut tape, zv, zhat).unwrap();
            let reg = reg_loss(&mut tape, c);
            let total = total_loss(&mut tape, se, se, reg, 1.0, 1.0).unwrap();
            tape.backward(total).unwrap();
            tape.grads_into(&mut params).unwrap();
            adam.step(&mut params).unwrap();
            project_zero_diag(params.get_mut(C_PARAM).unwrap());
            for i in 0..n {
                assert_eq!(params.get(C_PARAM).unwrap().at(i, i), 0.0);
            }
        }
    }

    #[test]
    fn ridge_minimizer_reached_by_gradient_descent() {
        // Two identical unit-norm latents; alpha ||z - c z||^2 + beta c^2
        // with alpha = beta = 1 has off-diagonal minimizer
        // c* = ||z||^2 / (||z||^2 + beta/alpha) = 0.5.
        let z_row = vec![0.6, 0.8];
        let bank = bank_from_rows(&[z_row.clone(), z_row.clone()]);
        let z = bank.read_full().unwrap();

        let mut params = ParameterSet::new();
        params
            .insert(C_PARAM, SelfExpressiveCoefficients::zeros(2).into_tensor())
            .unwrap();
        let mut adam = crate::optim::AdamState::new(0.02);
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let c = tape.param(&params, C_PARAM).unwrap();
            let zv = tape.constant(&z);
            let zhat = reconstruct_batch(&mut tape, c, &bank, &[0, 1], zv).unwrap();
            let se = se_loss(&mut tape, zv, zhat).unwrap();
            let reg = reg_loss(&mut tape, c);
            let zero = tape.constant(&Tensor::scalar(0.0));
            let total = total_loss(&mut tape, zero, se, reg, 1.0, 1.0).unwrap();
            tape.backward(total).unwrap();
            tape.grads_into(&mut params).unwrap();
            adam.step(&mut params).unwrap();
            project_zero_diag(params.get_mut(C_PARAM).unwrap());
        }
        let c = params.get(C_PARAM).unwrap();
        assert!((c.at(0, 1) - 0.5).abs() < 1e-4, "c01 = {}", c.at(0, 1));
        assert!((c.at(1, 0) - 0.5).abs() < 1e-4, "c10 = {}", c.at(1, 0));
    }

    #[test]
    fn historical_rows_change_output_but_get_no_gradient() {
        // Perturbing a non-batch bank row moves the reconstruction, yet the
        // backward pass assigns gradient only to C and the live latents.
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]];
        let bank_a = bank_from_rows(&rows);
        let mut rows_b = rows.clone();
        rows_b[2] = vec![0.9, 0.1]; // historical row perturbed
        let bank_b = bank_from_rows(&rows_b);

        let mut c = Tensor::zeros(vec![3, 3]);
        c.set(0, 2, 1.0);

        let run = |bank: &MemoryBank| {
            let mut tape = Tape::new();
            let cv = tape.leaf(&c, true);
            let live = tape.leaf(&Tensor::from_rows(&[rows[0].clone()]).unwrap(), true);
            let out = reconstruct_batch(&mut tape, cv, bank, &[0], live).unwrap();
            let loss = tape.sum_sq(out);
            tape.backward(loss).unwrap();
            (
                tape.value(out).data().to_vec(),
                tape.grad(live).map(|g| g.to_vec()),
                tape.grad(cv).map(|g| g.to_vec()),
            )
        };
        let (out_a, glive_a, gc_a) = run(&bank_a);
        let (out_b, _, _) = run(&bank_b);
        assert_ne!(out_a, out_b, "historical row must affect the output");
        assert!(glive_a.is_some() && gc_a.is_some());
        // the live row 0 feeds only via C[0,2] * bank row 2 here, so its own
        // gradient is zero-valued but present; C's gradient is nonzero
        assert!(gc_a.unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn from_tensor_enforces_zero_diag() {
        let mut c = Tensor::zeros(vec![2, 2]);
        c.set(0, 0, 1.0);
        assert!(SelfExpressiveCoefficients::from_tensor(c).is_err());
    }
}
