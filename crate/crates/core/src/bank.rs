//! Memory bank: the persistent `N x h` store of per-sample latent codes.
//!
//! During mini-batch fine-tuning the bank gives every step access to the
//! whole dataset's latest representations. Rows are overwritten batch by
//! batch, so within epoch `t` the rows of already-processed batches carry
//! epoch-`t` codes and the rest still carry epoch-`t-1` codes. The stored
//! rows are always detached: the in-step gradient path uses the live batch
//! tensor spliced over a snapshot, never the stored copy.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Per-row provenance tag: which (epoch, global step) wrote the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RowTag {
    pub epoch: u64,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    z: Tensor,
    tags: Vec<RowTag>,
    initialized: bool,
}

impl MemoryBank {
    /// All-zero, uninitialized bank. Reads fail until initialization is
    /// marked complete (use [`MemoryBank::init_from_encoder`]).
    pub fn zeros(n: usize, width: usize) -> Self {
        MemoryBank {
            z: Tensor::zeros(vec![n, width]),
            tags: vec![RowTag::default(); n],
            initialized: false,
        }
    }

    /// Populates all `n` rows in dataset order by calling `encode` on
    /// consecutive index batches. The caller supplies an eval-mode,
    /// gradient-free encoder closure; rows end up tagged (0, 0).
    pub fn init_from_encoder<F>(n: usize, batch_size: usize, mut encode: F) -> Result<Self>
    where
        F: FnMut(&[usize]) -> Result<Tensor>,
    {
        if n == 0 || batch_size == 0 {
            return Err(Error::Config(
                "bank init: n and batch_size must be positive".into(),
            ));
        }
        let mut bank: Option<MemoryBank> = None;
        let mut at = 0usize;
        while at < n {
            let end = (at + batch_size).min(n);
            let indices: Vec<usize> = (at..end).collect();
            let latents = encode(&indices)?;
            if latents.ndim() != 2 || latents.shape()[0] != indices.len() {
                return Err(Error::Dimension(format!(
                    "encoder returned shape {:?} for a {}-sample batch",
                    latents.shape(),
                    indices.len()
                )));
            }
            let b = bank.get_or_insert_with(|| MemoryBank::zeros(n, latents.shape()[1]));
            b.write_batch(&indices, &latents, 0, 0)?;
            at = end;
        }
        let mut bank = bank.expect("n > 0");
        bank.initialized = true;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.z.shape()[1]
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Marks initialization complete after manual `write_batch` population.
    pub fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    pub fn tag(&self, row: usize) -> RowTag {
        self.tags[row]
    }

    /// Overwrites the given rows with detached copies of `latents` and
    /// tags them with (epoch, step).
    pub fn write_batch(
        &mut self,
        indices: &[usize],
        latents: &Tensor,
        epoch: u64,
        step: u64,
    ) -> Result<()> {
        if latents.ndim() != 2
            || latents.shape()[0] != indices.len()
            || latents.shape()[1] != self.width()
        {
            return Err(Error::Dimension(format!(
                "write_batch: latents {:?} vs {} indices of width {}",
                latents.shape(),
                indices.len(),
                self.width()
            )));
        }
        if !latents.all_finite() {
            return Err(Error::Numeric("write_batch: non-finite latents".into()));
        }
        let n = self.len();
        let mut seen = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::Index(format!(
                    "write_batch: row {i} out of range for bank of {n}"
                )));
            }
            if seen[i] {
                return Err(Error::Index(format!(
                    "write_batch: duplicate index {i} within one batch"
                )));
            }
            seen[i] = true;
        }
        for (r, &i) in indices.iter().enumerate() {
            self.z.row_mut(i).copy_from_slice(latents.row(r));
            self.tags[i] = RowTag { epoch, step };
        }
        Ok(())
    }

    /// Gradient-free snapshot of all rows (copy semantics: later writes do
    /// not affect it).
    pub fn read_full(&self) -> Result<Tensor> {
        if !self.initialized {
            return Err(Error::State(
                "bank read before initialization completed".into(),
            ));
        }
        Ok(self.z.detached())
    }

    /// Detached copy of the selected rows (e.g. contrastive negatives).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if !self.initialized {
            return Err(Error::State(
                "bank read before initialization completed".into(),
            ));
        }
        let n = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("gather_rows: row {bad} out of range")));
        }
        let w = self.width();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.z.row(i));
        }
        Tensor::new(vec![indices.len(), w], data)
    }

    /// Histogram of row ages in optimizer steps: `age = current_step - tag.step`.
    pub fn staleness(&self, current_step: u64) -> BTreeMap<u64, usize> {
        let mut hist = BTreeMap::new();
        for tag in &self.tags {
            let age = current_step.saturating_sub(tag.step);
            *hist.entry(age).or_insert(0) += 1;
        }
        hist
    }

    /// Writes `<prefix>.sctd` (rows) and `<prefix>_tags.sctd` (per-row
    /// epoch/step) into `dir`.
    pub fn save(&self, dir: &std::path::Path, prefix: &str) -> Result<()> {
        crate::data::save_tensor(&dir.join(format!("{prefix}.sctd")), &self.z)?;
        let mut tags = Vec::with_capacity(self.len() * 2);
        for t in &self.tags {
            tags.push(t.epoch as f64);
            tags.push(t.step as f64);
        }
        let tags = Tensor::new(vec![self.len(), 2], tags)?;
        crate::data::save_tensor(&dir.join(format!("{prefix}_tags.sctd")), &tags)?;
        Ok(())
    }

    pub fn load(dir: &std::path::Path, prefix: &str) -> Result<Self> {
        let z = crate::data::load_tensor(&dir.join(format!("{prefix}.sctd")))?;
        if z.ndim() != 2 {
            return Err(Error::Dimension(format!(
                "bank file must be 2-d, got {:?}",
                z.shape()
            )));
        }
        let tags_t = crate::data::load_tensor(&dir.join(format!("{prefix}_tags.sctd")))?;
        if tags_t.shape() != [z.shape()[0], 2] {
            return Err(Error::Dimension("bank tags shape mismatch".into()));
        }
        let tags = (0..z.shape()[0])
            .map(|i| RowTag {
                epoch: tags_t.at(i, 0) as u64,
                step: tags_t.at(i, 1) as u64,
            })
            .collect();
        Ok(MemoryBank {
            z,
            tags,
            initialized: true,
        })
    }
}

/// Learning-rate consistency rule: `lr(k) = base_lr * reference_k / k`.
/// More splits per epoch mean staler bank rows, compensated by slower
/// encoder drift.
pub fn consistency_lr(base_lr: f64, k: usize, reference_k: usize) -> Result<f64> {
    if k == 0 || reference_k == 0 {
        return Err(Error::Config("consistency_lr: k must be positive".into()));
    }
    Ok(base_lr * reference_k as f64 / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_encoder_init_equals_input() {
        let input = Tensor::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
            vec![7.0, 8.0],
        ])
        .unwrap();
        let bank = MemoryBank::init_from_encoder(4, 3, |idx| {
            let rows: Vec<Vec<f64>> = idx.iter().map(|&i| input.row(i).to_vec()).collect();
            Tensor::from_rows(&rows)
        })
        .unwrap();
        assert_eq!(bank.read_full().unwrap().data(), input.data());
        assert!(bank.is_initialized());
    }

    #[test]
    fn two_inits_are_bit_identical() {
        let enc = |idx: &[usize]| {
            let rows: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| vec![(i as f64).sin(), (i as f64).cos()])
                .collect();
            Tensor::from_rows(&rows)
        };
        let a = MemoryBank::init_from_encoder(7, 2, enc).unwrap();
        let b = MemoryBank::init_from_encoder(7, 2, enc).unwrap();
        assert_eq!(a.read_full().unwrap().data(), b.read_full().unwrap().data());
    }

    #[test]
    fn write_then_read_and_copy_semantics() {
        let mut bank = MemoryBank::zeros(3, 2);
        let batch = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        bank.write_batch(&[0, 1], &batch, 0, 0).unwrap();
        bank.write_batch(&[2], &Tensor::from_rows(&[vec![5.0, 6.0]]).unwrap(), 0, 0)
            .unwrap();
        bank.mark_initialized();

        let snap = bank.read_full().unwrap();
        assert_eq!(snap.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        // later writes do not affect the snapshot
        bank.write_batch(&[0], &Tensor::from_rows(&[vec![9.0, 9.0]]).unwrap(), 1, 5)
            .unwrap();
        assert_eq!(snap.data()[0], 1.0);
        assert_eq!(bank.read_full().unwrap().data()[0], 9.0);
        assert_eq!(bank.tag(0), RowTag { epoch: 1, step: 5 });
    }

    #[test]
    fn write_into_zero_bank_leaves_other_rows() {
        let mut bank = MemoryBank::zeros(4, 2);
        let batch = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        bank.write_batch(&[0, 1], &batch, 0, 0).unwrap();
        bank.mark_initialized();
        let z = bank.read_full().unwrap();
        assert_eq!(z.row(1), &[2.0, 2.0]);
        assert_eq!(z.row(2), &[0.0, 0.0]);
        assert_eq!(z.row(3), &[0.0, 0.0]);
    }

    #[test]
    fn duplicate_indices_rejected() {
        let mut bank = MemoryBank::zeros(3, 1);
        let batch = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(
            bank.write_batch(&[1, 1], &batch, 0, 0),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn uninitialized_read_is_a_state_error() {
        let bank = MemoryBank::zeros(2, 2);
        assert!(matches!(bank.read_full(), Err(Error::State(_))));
    }

    #[test]
    fn full_epoch_of_writes_aligns_tags() {
        let mut bank = MemoryBank::init_from_encoder(8, 8, |idx| {
            Tensor::new(vec![idx.len(), 1], vec![0.0; idx.len()])
        })
        .unwrap();
        let sched = crate::data::split_batches(8, 3, false, 0, 0).unwrap();
        let mut step = 10;
        for batch in sched.batches() {
            let latents = Tensor::new(vec![batch.len(), 1], vec![1.0; batch.len()]).unwrap();
            bank.write_batch(batch, &latents, 2, step).unwrap();
            step += 1;
        }
        for i in 0..8 {
            assert_eq!(bank.tag(i).epoch, 2);
        }
    }

    #[test]
    fn staleness_schedule_for_k_four() {
        // k = 4 batches of n = 2; simulate epoch 0 then half of epoch 1.
        let mut bank = MemoryBank::init_from_encoder(8, 8, |idx| {
            Tensor::new(vec![idx.len(), 1], vec![0.0; idx.len()])
        })
        .unwrap();
        assert_eq!(bank.staleness(0), BTreeMap::from([(0, 8)]));

        let write = |bank: &mut MemoryBank, b: usize, epoch: u64, step: u64| {
            let idx = [2 * b, 2 * b + 1];
            let latents = Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
            bank.write_batch(&idx, &latents, epoch, step).unwrap();
        };
        let mut step = 0;
        for b in 0..4 {
            write(&mut bank, b, 0, step);
            step += 1;
        }
        for b in 0..2 {
            write(&mut bank, b, 1, step);
            step += 1;
        }
        // current step 5 = the step that wrote batch 1 of epoch 1
        let hist = bank.staleness(5);
        assert_eq!(hist, BTreeMap::from([(0, 2), (1, 2), (2, 2), (3, 2)]));

        // mid-epoch tag split: processed batches carry the new epoch,
        // unprocessed ones the previous epoch
        for row in 0..8 {
            let expect = if row < 4 { 1 } else { 0 };
            assert_eq!(bank.tag(row).epoch, expect, "row {row}");
        }
    }

    #[test]
    fn full_batch_training_never_ages() {
        let mut bank = MemoryBank::init_from_encoder(4, 4, |idx| {
            Tensor::new(vec![idx.len(), 1], vec![0.0; idx.len()])
        })
        .unwrap();
        for step in 0..5u64 {
            let latents = Tensor::new(vec![4, 1], vec![0.0; 4]).unwrap();
            bank.write_batch(&[0, 1, 2, 3], &latents, step, step).unwrap();
            assert_eq!(bank.staleness(step), BTreeMap::from([(0, 4)]));
        }
    }

    #[test]
    fn lr_rule_is_inverse_in_k() {
        assert_eq!(consistency_lr(1e-3, 1, 1).unwrap(), 1e-3);
        assert!((consistency_lr(1e-3, 10, 1).unwrap() - 1e-4).abs() < 1e-18);
        assert!(consistency_lr(1e-3, 0, 1).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut bank = MemoryBank::zeros(3, 2);
        bank.write_batch(
            &[0, 1, 2],
            &Tensor::from_rows(&[vec![1., 2.], vec![3., 4.], vec![5., 6.]]).unwrap(),
            4,
            17,
        )
        .unwrap();
        bank.mark_initialized();
        bank.save(dir.path(), "bank").unwrap();
        let back = MemoryBank::load(dir.path(), "bank").unwrap();
        assert_eq!(
            back.read_full().unwrap().data(),
            bank.read_full().unwrap().data()
        );
        assert_eq!(back.tag(2), RowTag { epoch: 4, step: 17 });
    }
}
