//! Datasets: synthetic union-of-subspaces generation, PGM ingestion,
//! preprocessing, deterministic batching, and the tensor file format.

mod io;
mod pgm;
mod resize;
mod synth;

pub use io::{load_labels_csv, load_tensor, save_labels_csv, save_tensor};
pub use pgm::{load_pgm_dir, read_pgm, write_pgm};
pub use resize::resize_bilinear;
pub use synth::{gen_union_of_subspaces, ridge_self_expression, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

/// Shape of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleShape {
    /// Flat feature vector of length `d`.
    Flat(usize),
    /// `(channels, height, width)` image.
    Image(usize, usize, usize),
}

impl SampleShape {
    pub fn numel(&self) -> usize {
        match *self {
            SampleShape::Flat(d) => d,
            SampleShape::Image(c, h, w) => c * h * w,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            SampleShape::Flat(d) => vec![d],
            SampleShape::Image(c, h, w) => vec![c, h, w],
        }
    }
}

/// Ordered collection of samples with optional dense ground-truth labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub shape: SampleShape,
    samples: Vec<Tensor>,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        name: &str,
        shape: SampleShape,
        samples: Vec<Tensor>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Dataset("dataset has no samples".into()));
        }
        let dims = shape.dims();
        if let Some(bad) = samples.iter().position(|s| s.shape() != dims.as_slice()) {
            return Err(Error::Dataset(format!(
                "sample {bad} has shape {:?}, expected {dims:?}",
                samples[bad].shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != samples.len() {
                return Err(Error::Dataset(format!(
                    "{} labels for {} samples",
                    l.len(),
                    samples.len()
                )));
            }
            // labels must be dense ids 0..K-1
            let k = l.iter().max().map(|m| m + 1).unwrap_or(0);
            let mut present = vec![false; k];
            for &v in l {
                present[v] = true;
            }
            if present.iter().any(|p| !p) {
                return Err(Error::Dataset(
                    "labels are not dense ids 0..K-1".into(),
                ));
            }
        }
        Ok(Dataset {
            name: name.to_string(),
            shape,
            samples,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &Tensor {
        &self.samples[i]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().max().map(|m| m + 1).unwrap_or(0))
    }

    /// Stacks the selected samples into a `[n, d]` matrix (flattened).
    pub fn stack_flat(&self, indices: &[usize]) -> Result<Tensor> {
        self.check_indices(indices)?;
        let d = self.shape.numel();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.samples[i].data());
        }
        Tensor::new(vec![indices.len(), d], data)
    }

    /// Stacks the selected samples into `[n, c, h, w]`. Flat datasets are
    /// viewed as single-row images `[n, 1, 1, d]`.
    pub fn stack_images(&self, indices: &[usize]) -> Result<Tensor> {
        self.check_indices(indices)?;
        let (c, h, w) = match self.shape {
            SampleShape::Image(c, h, w) => (c, h, w),
            SampleShape::Flat(d) => (1, 1, d),
        };
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.samples[i].data());
        }
        Tensor::new(vec![indices.len(), c, h, w], data)
    }

    fn check_indices(&self, indices: &[usize]) -> Result<()> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Index(format!(
                "sample index {bad} out of range for {} samples",
                self.len()
            )));
        }
        Ok(())
    }

    /// Writes `data.sctd` (stacked `[N, ...]` tensor) and `labels.csv`
    /// into `dir`.
    pub fn save_dir(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let all: Vec<usize> = (0..self.len()).collect();
        let mut stacked_shape = vec![self.len()];
        stacked_shape.extend(self.shape.dims());
        let flat = self.stack_flat(&all)?;
        let stacked = Tensor::new(stacked_shape, flat.data().to_vec())?;
        save_tensor(&dir.join("data.sctd"), &stacked)?;
        if let Some(labels) = &self.labels {
            save_labels_csv(&dir.join("labels.csv"), labels)?;
        }
        Ok(())
    }

    /// Loads a dataset written by [`Dataset::save_dir`].
    pub fn load_dir(dir: &std::path::Path, name: &str) -> Result<Self> {
        let stacked = load_tensor(&dir.join("data.sctd"))?;
        let s = stacked.shape();
        let shape = match s.len() {
            2 => SampleShape::Flat(s[1]),
            4 => SampleShape::Image(s[1], s[2], s[3]),
            _ => {
                return Err(Error::Dataset(format!(
                    "data.sctd must be [N,d] or [N,c,h,w], got {s:?}"
                )))
            }
        };
        let n = s[0];
        let d = shape.numel();
        let samples = (0..n)
            .map(|i| Tensor::new(shape.dims(), stacked.data()[i * d..(i + 1) * d].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let labels_path = dir.join("labels.csv");
        let labels = if labels_path.exists() {
            Some(load_labels_csv(&labels_path)?)
        } else {
            None
        };
        Dataset::new(name, shape, samples, labels)
    }
}

/// Partition of `0..N-1` into contiguous batches of a (possibly shuffled)
/// order. The final batch may be smaller.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    order: Vec<usize>,
    batch_size: usize,
}

impl BatchSchedule {
    /// Number of batches `k = ceil(N / n)`.
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Indices of batch `i` (ascending `i < k`).
    pub fn batch(&self, i: usize) -> &[usize] {
        let start = i * self.batch_size;
        let end = (start + self.batch_size).min(self.order.len());
        &self.order[start..end]
    }

    pub fn batches(&self) -> impl Iterator<Item = &[usize]> {
        (0..self.num_batches()).map(|i| self.batch(i))
    }
}

/// Splits `0..N-1` into `ceil(N/batch_size)` contiguous batches. With
/// `shuffle` on, the order is a seeded permutation derived from
/// `(seed, epoch)`; off, it is the identity (required by the full-batch
/// equivalence check).
pub fn split_batches(
    n: usize,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
) -> Result<BatchSchedule> {
    if n == 0 {
        return Err(Error::Config("split_batches: empty dataset".into()));
    }
    if batch_size == 0 || batch_size > n {
        return Err(Error::Config(format!(
            "batch size must be in 1..={n}, got {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = crate::rng::rng_for(seed, "batch-shuffle", epoch, 0);
        order.shuffle(&mut rng);
    }
    Ok(BatchSchedule { order, batch_size })
}
