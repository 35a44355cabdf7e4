//! Decoder-free contrastive path: augmentations and the InfoNCE loss over
//! memory-bank negatives.
//!
//! The anchor is the *self-expressed* latent `z_hat` (not `z`), which ties
//! representation learning to the clustering objective, and the bank is
//! always updated with the clean-view encoding `z` so every stored row
//! corresponds to a deterministic input.

use crate::bank::MemoryBank;
use crate::data::{resize_bilinear, Dataset};
use crate::error::{Error, Result};
use crate::model::{Autoencoder, Mode, ParamMode};
use crate::selfexpress;
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stochastic augmentation pipeline: random resized crop, horizontal
/// flip, grayscale, multiplicative brightness jitter. Deterministic given
/// an explicit generator state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// (min, max) fractions of the original area kept by the crop.
    pub crop_scale_range: (f64, f64),
    pub hflip_prob: f64,
    pub grayscale_prob: f64,
    /// Max multiplicative brightness delta; factor is drawn from
    /// `[1 - d, 1 + d]` and the result clamped to `[0, 1]`.
    pub brightness_jitter: f64,
    pub seed: u64,
}

impl AugmentationSpec {
    /// No-op pipeline (used for flat synthetic data).
    pub fn identity(seed: u64) -> Self {
        AugmentationSpec {
            crop_scale_range: (1.0, 1.0),
            hflip_prob: 0.0,
            grayscale_prob: 0.0,
            brightness_jitter: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale_range must satisfy 0 < min <= max <= 1, got ({lo}, {hi})"
            )));
        }
        for (name, p) in [("hflip_prob", self.hflip_prob), ("grayscale_prob", self.grayscale_prob)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if self.brightness_jitter < 0.0 {
            return Err(Error::Config("brightness_jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// Applies one augmentation draw to a `[c,h,w]` image. Real augmentations
/// require values in `[0,1]`; an identity spec (full crop, zero
/// probabilities, zero jitter) passes any values through untouched. All
/// random draws happen unconditionally so the generator stream stays
/// aligned across configurations.
pub fn augment(image: &Tensor, spec: &AugmentationSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    spec.validate()?;
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!(
            "augment: expected [c,h,w], got {s:?}"
        )));
    }
    let is_identity = spec.crop_scale_range == (1.0, 1.0)
        && spec.hflip_prob == 0.0
        && spec.grayscale_prob == 0.0
        && spec.brightness_jitter == 0.0;
    if !is_identity && image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Config(
            "augment: image values must lie in [0,1]".into(),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);

    // crop + resize back (skipped when the crop covers the whole image)
    let (lo, hi) = spec.crop_scale_range;
    let area = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let side = area.sqrt();
    let crop_h = (h as f64 * side).round() as usize;
    let crop_w = (w as f64 * side).round() as usize;
    if crop_h == 0 || crop_w == 0 {
        return Err(Error::Config(format!(
            "crop scale {area} yields a sub-pixel crop on a {h}x{w} image"
        )));
    }
    let top = rng.gen_range(0..=h - crop_h);
    let left = rng.gen_range(0..=w - crop_w);
    let mut out = if crop_h < h || crop_w < w {
        let mut cropped = Tensor::zeros(vec![c, crop_h, crop_w]);
        for ch in 0..c {
            for y in 0..crop_h {
                for x in 0..crop_w {
                    cropped.data_mut()[(ch * crop_h + y) * crop_w + x] =
                        image.data()[(ch * h + (top + y)) * w + (left + x)];
                }
            }
        }
        resize_bilinear(&cropped, h, w)?
    } else {
        image.detached()
    };

    // horizontal flip
    let flip_draw: f64 = rng.gen_range(0.0..1.0);
    if flip_draw < spec.hflip_prob {
        for ch in 0..c {
            for y in 0..h {
                let row = &mut out.data_mut()[(ch * h + y) * w..(ch * h + y + 1) * w];
                row.reverse();
            }
        }
    }

    // grayscale (luma weights for 3-channel images; 1-channel is already gray)
    let gray_draw: f64 = rng.gen_range(0.0..1.0);
    if gray_draw < spec.grayscale_prob && c == 3 {
        let hw = h * w;
        for p in 0..hw {
            let luma = 0.299 * out.data()[p]
                + 0.587 * out.data()[hw + p]
                + 0.114 * out.data()[2 * hw + p];
            for ch in 0..3 {
                out.data_mut()[ch * hw + p] = luma;
            }
        }
    }

    // brightness jitter
    let draw: f64 = rng.gen_range(0.0..1.0);
    if spec.brightness_jitter > 0.0 {
        let factor = 1.0 + (2.0 * draw - 1.0) * spec.brightness_jitter;
        for v in out.data_mut() {
            *v = (*v * factor).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Unit-row views feeding one InfoNCE evaluation. Negatives are the bank
/// rows outside the current batch and carry no gradient.
pub struct ContrastiveBatch {
    pub anchors_hat: Var,
    pub positives: Var,
    pub negatives: Var,
    pub tau: f64,
}

impl ContrastiveBatch {
    /// Validates shapes, `tau > 0`, at least one negative, and unit rows
    /// (within 1e-9).
    pub fn new(tape: &Tape, anchors_hat: Var, positives: Var, negatives: Var, tau: f64) -> Result<Self> {
        if tau <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let (sa, sp, sn) = (
            tape.value(anchors_hat).shape(),
            tape.value(positives).shape(),
            tape.value(negatives).shape(),
        );
        if sa.len() != 2 || sp != sa || sn.len() != 2 || sn[1] != sa[1] {
            return Err(Error::Dimension(format!(
                "contrastive batch shapes: anchors {sa:?}, positives {sp:?}, negatives {sn:?}"
            )));
        }
        if sn[0] == 0 {
            return Err(Error::Config("contrastive batch has zero negatives".into()));
        }
        for (what, v) in [("anchor", anchors_hat), ("positive", positives), ("negative", negatives)] {
            let t = tape.value(v);
            for r in 0..t.shape()[0] {
                let norm: f64 = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(Error::Contract(format!(
                        "{what} row {r} has norm {norm}, expected unit"
                    )));
                }
            }
        }
        Ok(ContrastiveBatch {
            anchors_hat,
            positives,
            negatives,
            tau,
        })
    }
}

/// Mean InfoNCE over the anchors. With `include_positive_in_denominator`
/// the positive joins the denominator (the standard form, nonnegative
/// loss); without it the denominator runs over negatives only, the
/// formula's literal reading.
pub fn info_nce(
    tape: &mut Tape,
    batch: &ContrastiveBatch,
    include_positive_in_denominator: bool,
) -> Result<Var> {
    let inv_tau = 1.0 / batch.tau;
    let sim_pos = tape.row_dot(batch.anchors_hat, batch.positives)?;
    let sim_pos = tape.scale(sim_pos, inv_tau);
    let sim_neg = tape.matmul_tb(batch.anchors_hat, batch.negatives)?;
    let sim_neg = tape.scale(sim_neg, inv_tau);
    let logits = if include_positive_in_denominator {
        let n = tape.value(sim_pos).shape()[0];
        let pos_col = tape.reshape(sim_pos, vec![n, 1])?;
        tape.concat_cols(sim_neg, pos_col)?
    } else {
        sim_neg
    };
    let lse = tape.logsumexp_rows(logits)?;
    let per_anchor = tape.sub(lse, sim_pos)?;
    Ok(tape.mean(per_anchor))
}

/// Per-term loss values reported by [`clbdsc_forward`].
#[derive(Debug, Clone, Copy)]
pub struct ClbdscDiagnostics {
    pub nce: f64,
    pub se: f64,
    pub reg: f64,
    pub total: f64,
}

/// One CLBDSC forward pass over a batch:
/// encode the clean view, encode one augmented view, update the bank with
/// the clean codes, self-express against the bank, then combine
/// `InfoNCE + alpha * L_se + beta * L_reg`. Normalization happens only
/// inside the InfoNCE term; `L_se` sees raw latents.
#[allow(clippy::too_many_arguments)]
pub fn clbdsc_forward(
    tape: &mut Tape,
    model: &mut Autoencoder,
    params: &crate::tensor::ParameterSet,
    encoder_pm: ParamMode,
    c: Var,
    bank: &mut MemoryBank,
    dataset: &Dataset,
    indices: &[usize],
    aug: &AugmentationSpec,
    alpha: f64,
    beta: f64,
    tau: f64,
    include_positive_in_denominator: bool,
    epoch: u64,
    global_step: u64,
) -> Result<(Var, ClbdscDiagnostics)> {
    // clean view
    let x = batch_input(dataset, indices, model)?;
    let xv = tape.constant_owned(x);
    let z = model.encode(tape, params, xv, Mode::Train, encoder_pm)?;

    // augmented view
    let x_plus = augmented_batch(dataset, indices, aug, model, global_step)?;
    let xp = tape.constant_owned(x_plus);
    let z_plus = model.encode(tape, params, xp, Mode::Train, encoder_pm)?;

    // bank update with the clean-view codes
    bank.write_batch(indices, &tape.value(z).detached(), epoch, global_step)?;

    // self-expressed anchor
    let z_hat = selfexpress::reconstruct_batch(tape, c, bank, indices, z)?;
    let anchors = tape.row_normalize(z_hat).map_err(|e| match e {
        Error::DegenerateRow { row, norm } => Error::Numeric(format!(
            "degenerate self-expressed latent for sample {} (norm {norm:e})",
            indices[row]
        )),
        other => other,
    })?;
    let positives = tape.row_normalize(z_plus).map_err(|e| match e {
        Error::DegenerateRow { row, norm } => Error::Numeric(format!(
            "degenerate augmented latent for sample {} (norm {norm:e})",
            indices[row]
        )),
        other => other,
    })?;

    // negatives: every bank row outside the batch, unit-normalized constants
    let mut in_batch = vec![false; bank.len()];
    for &i in indices {
        in_batch[i] = true;
    }
    let neg_indices: Vec<usize> = (0..bank.len()).filter(|&i| !in_batch[i]).collect();
    if neg_indices.is_empty() {
        return Err(Error::Config(
            "no negatives: the batch covers the whole bank".into(),
        ));
    }
    let mut negatives = bank.gather_rows(&neg_indices)?;
    normalize_rows(&mut negatives, &neg_indices)?;
    let negatives = tape.constant_owned(negatives);

    let batch = ContrastiveBatch::new(tape, anchors, positives, negatives, tau)?;
    let nce = info_nce(tape, &batch, include_positive_in_denominator)?;
    let se = selfexpress::se_loss(tape, z, z_hat)?;
    let reg = selfexpress::reg_loss(tape, c);
    let total = selfexpress::total_loss(tape, nce, se, reg, alpha, beta)?;

    let diag = ClbdscDiagnostics {
        nce: tape.scalar(nce),
        se: tape.scalar(se),
        reg: tape.scalar(reg),
        total: tape.scalar(total),
    };
    Ok((total, diag))
}

fn batch_input(dataset: &Dataset, indices: &[usize], model: &Autoencoder) -> Result<Tensor> {
    if model.wants_images() {
        dataset.stack_images(indices)
    } else {
        dataset.stack_flat(indices)
    }
}

/// Builds the augmented batch; flat samples are viewed as `[1,1,d]` images
/// so identity-style specs apply uniformly. Each sample's generator is
/// derived from (spec seed, global step, sample id), so draws are
/// reproducible under checkpoint/resume.
fn augmented_batch(
    dataset: &Dataset,
    indices: &[usize],
    aug: &AugmentationSpec,
    model: &Autoencoder,
    global_step: u64,
) -> Result<Tensor> {
    let dims = dataset.shape.dims();
    let mut rows: Vec<Tensor> = Vec::with_capacity(indices.len());
    for &i in indices {
        let sample = dataset.sample(i);
        let image_view = if dims.len() == 3 {
            sample.clone()
        } else {
            Tensor::new(vec![1, 1, dims[0]], sample.data().to_vec())?
        };
        let mut rng = crate::rng::rng_for(aug.seed, "augment", global_step, i as u64);
        let augmented = augment(&image_view, aug, &mut rng)?;
        rows.push(augmented);
    }
    let per = rows[0].numel();
    let mut data = Vec::with_capacity(indices.len() * per);
    for r in &rows {
        data.extend_from_slice(r.data());
    }
    if model.wants_images() {
        let s = rows[0].shape().to_vec();
        Tensor::new(vec![indices.len(), s[0], s[1], s[2]], data)
    } else {
        Tensor::new(vec![indices.len(), per], data)
    }
}

fn normalize_rows(t: &mut Tensor, sample_ids: &[usize]) -> Result<()> {
    let (n, h) = (t.shape()[0], t.shape()[1]);
    for r in 0..n {
        let norm: f64 = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric(format!(
                "degenerate bank row for sample {} (norm {norm:e})",
                sample_ids[r]
            )));
        }
        for v in &mut t.data_mut()[r * h..(r + 1) * h] {
            *v /= norm;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_row(h: usize, axis: usize) -> Vec<f64> {
        let mut v = vec![0.0; h];
        v[axis] = 1.0;
        v
    }

    #[test]
    fn identity_spec_is_identity() {
        let spec = AugmentationSpec::identity(0);
        let mut rng = crate::rng::rng_for(0, "aug-test", 0, 0);
        let img = Tensor::new(vec![1, 2, 3], vec![0.1, 0.9, 0.4, 0.3, 0.2, 0.8]).unwrap();
        let out = augment(&img, &spec, &mut rng).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn double_hflip_restores_image() {
        let spec = AugmentationSpec {
            hflip_prob: 1.0,
            ..AugmentationSpec::identity(0)
        };
        let mut rng = crate::rng::rng_for(1, "aug-test", 0, 0);
        let img = Tensor::new(vec![1, 2, 2], vec![0.1, 0.9, 0.4, 0.3]).unwrap();
        let once = augment(&img, &spec, &mut rng).unwrap();
        assert_ne!(once.data(), img.data());
        let twice = augment(&once, &spec, &mut rng).unwrap();
        assert_eq!(twice.data(), img.data());
    }

    #[test]
    fn outputs_stay_in_unit_range_over_many_draws() {
        let spec = AugmentationSpec {
            crop_scale_range: (0.4, 1.0),
            hflip_prob: 0.5,
            grayscale_prob: 0.5,
            brightness_jitter: 0.6,
            seed: 0,
        };
        let mut rng = crate::rng::rng_for(2, "aug-range", 0, 0);
        let mut img = Tensor::zeros(vec![3, 6, 6]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 11) as f64 / 10.0;
        }
        for _ in 0..1000 {
            let out = augment(&img, &spec, &mut rng).unwrap();
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn augment_is_deterministic_given_generator_state() {
        let spec = AugmentationSpec {
            crop_scale_range: (0.5, 0.9),
            hflip_prob: 0.5,
            grayscale_prob: 0.5,
            brightness_jitter: 0.4,
            seed: 0,
        };
        let mut img = Tensor::zeros(vec![3, 5, 5]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 7) as f64 / 6.0;
        }
        let mut r1 = crate::rng::rng_for(4, "aug-det", 1, 2);
        let mut r2 = crate::rng::rng_for(4, "aug-det", 1, 2);
        let a = augment(&img, &spec, &mut r1).unwrap();
        let b = augment(&img, &spec, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn sub_pixel_crop_is_a_config_error() {
        let spec = AugmentationSpec {
            crop_scale_range: (0.01, 0.01),
            ..AugmentationSpec::identity(0)
        };
        let mut rng = crate::rng::rng_for(0, "aug-test", 0, 0);
        let img = Tensor::zeros(vec![1, 3, 3]);
        assert!(matches!(
            augment(&img, &spec, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn uniform_similarities_give_log_k_plus_one() {
        // anchors == positives == negatives: every similarity is 1.
        let mut tape = Tape::new();
        let row = unit_row(4, 0);
        let anchors = tape.leaf(&Tensor::from_rows(&[row.clone(), row.clone()]).unwrap(), true);
        let negatives = tape.constant(
            &Tensor::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap(),
        );
        let batch = ContrastiveBatch::new(&tape, anchors, anchors, negatives, 0.7).unwrap();
        let loss = info_nce(&mut tape, &batch, true).unwrap();
        assert!((tape.scalar(loss) - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn literal_mode_zero_similarities_give_zero() {
        let mut tape = Tape::new();
        let anchors = tape.leaf(&Tensor::from_rows(&[unit_row(3, 0)]).unwrap(), true);
        let positives = tape.leaf(&Tensor::from_rows(&[unit_row(3, 1)]).unwrap(), true);
        let negatives = tape.constant(&Tensor::from_rows(&[unit_row(3, 2)]).unwrap());
        let batch = ContrastiveBatch::new(&tape, anchors, positives, negatives, 1.0).unwrap();
        let loss = info_nce(&mut tape, &batch, false).unwrap();
        assert!(tape.scalar(loss).abs() < 1e-12);
    }

    #[test]
    fn direct_formula_evaluation_case() {
        // sim_pos = 1, two orthogonal negatives, tau = 0.5, positive included:
        // loss = -ln(e^2 / (e^2 + 2)) = ln(1 + 2 e^-2)
        let mut tape = Tape::new();
        let anchors = tape.leaf(&Tensor::from_rows(&[unit_row(4, 0)]).unwrap(), true);
        let negatives = tape.constant(
            &Tensor::from_rows(&[unit_row(4, 1), unit_row(4, 2)]).unwrap(),
        );
        let batch = ContrastiveBatch::new(&tape, anchors, anchors, negatives, 0.5).unwrap();
        let loss = info_nce(&mut tape, &batch, true).unwrap();
        let expect = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        assert!((tape.scalar(loss) - expect).abs() < 1e-12);
        assert!((expect - 0.23950).abs() < 1e-4);
    }

    #[test]
    fn negatives_receive_no_gradient_and_loss_is_positive() {
        let mut tape = Tape::new();
        let anchors = tape.leaf(
            &Tensor::from_rows(&[unit_row(3, 0), unit_row(3, 1)]).unwrap(),
            true,
        );
        let positives = tape.leaf(
            &Tensor::from_rows(&[unit_row(3, 1), unit_row(3, 0)]).unwrap(),
            true,
        );
        let negatives = tape.leaf(&Tensor::from_rows(&[unit_row(3, 2)]).unwrap(), false);
        let batch = ContrastiveBatch::new(&tape, anchors, positives, negatives, 0.5).unwrap();
        let loss = info_nce(&mut tape, &batch, true).unwrap();
        assert!(tape.scalar(loss) > 0.0, "positive-inclusive loss is > 0");
        tape.backward(loss).unwrap();
        assert!(tape.grad(anchors).is_some());
        assert!(tape.grad(positives).is_some());
        assert!(tape.grad(negatives).is_none());
    }

    #[test]
    fn loss_decreases_in_positive_similarity() {
        let eval = |sim: f64| {
            let mut tape = Tape::new();
            let anchors = tape.leaf(&Tensor::from_rows(&[unit_row(3, 0)]).unwrap(), true);
            let p = vec![sim, (1.0 - sim * sim).sqrt(), 0.0];
            let positives = tape.leaf(&Tensor::from_rows(&[p]).unwrap(), true);
            let negatives = tape.constant(&Tensor::from_rows(&[unit_row(3, 2)]).unwrap());
            let batch = ContrastiveBatch::new(&tape, anchors, positives, negatives, 0.5).unwrap();
            let loss = info_nce(&mut tape, &batch, true).unwrap();
            tape.scalar(loss)
        };
        assert!(eval(0.95) < eval(0.9));
    }

    #[test]
    fn zero_negatives_and_bad_tau_are_config_errors() {
        let mut tape = Tape::new();
        let anchors = tape.leaf(&Tensor::from_rows(&[unit_row(3, 0)]).unwrap(), true);
        let e = ContrastiveBatch::new(&tape, anchors, anchors, anchors, 0.0);
        assert!(matches!(e, Err(Error::Config(_))));
        let negs = tape.constant(&Tensor::from_rows(&[unit_row(3, 1)]).unwrap());
        assert!(ContrastiveBatch::new(&tape, anchors, anchors, negs, 0.5).is_ok());
    }

    #[test]
    fn non_unit_rows_violate_the_contract() {
        let mut tape = Tape::new();
        let anchors = tape.leaf(&Tensor::from_rows(&[vec![0.5, 0.0]]).unwrap(), true);
        let negs = tape.constant(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        assert!(matches!(
            ContrastiveBatch::new(&tape, anchors, anchors, negs, 0.5),
            Err(Error::Contract(_))
        ));
    }
}
