//! Run configuration: the single flat record that fully determines a run.
//!
//! Config files are flat JSON objects (string/number/bool values only) so
//! they stay human-writable and diff-friendly; [`RunConfig::from_flat`] /
//! [`RunConfig::to_flat`] convert to and from that representation. A run
//! manifest embeds the flat form, so a manifest alone replays the run.

use crate::clustering::AffinityHeuristic;
use crate::contrastive::AugmentationSpec;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::Arch;
use crate::tensor::Activation;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Full-batch deep subspace clustering (monolithic forward).
    Dsc,
    /// Mini-batch DSC with the memory bank.
    Bdsc,
    /// Decoder-free contrastive variant.
    Clbdsc,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Dsc => "dsc",
            Method::Bdsc => "bdsc",
            Method::Clbdsc => "clbdsc",
        }
    }
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSpec {
    Synth(SynthSpec),
    /// `class_*/img_*.pgm` tree; optional bilinear resize to (h, w).
    PgmDir { path: String, resize: Option<(usize, usize)> },
    /// Directory with `data.sctd` (+ `labels.csv`).
    TensorDir { path: String },
}

/// What the decoder consumes during fine-tuning: the self-expressed code
/// (the training objective) or the raw latent (ablation switch that turns
/// a fine-tune step into a pretrain step).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeSource {
    SelfExpressed,
    Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CInit {
    Zeros,
    /// Gaussian off-diagonal entries of the given scale.
    Noise(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub dataset: DatasetSpec,
    pub arch: Arch,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// CLBDSC only: leading fine-tune epochs with the encoder frozen.
    pub phase1_epochs: usize,
    /// Reference learning rate (at `k = lr_reference_k` splits per epoch).
    pub base_lr: f64,
    /// Consistency rule anchor; 0 disables the rule and `base_lr` is used
    /// verbatim at any batch size.
    pub lr_reference_k: usize,
    /// Optional separate learning rate for `C` (used verbatim). Defaults
    /// to the (scaled) network rate.
    pub c_lr: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub affinity: AffinityHeuristic,
    /// 0 means: infer from the dataset's ground-truth labels.
    pub n_clusters: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub reshuffle_each_epoch: bool,
    pub include_positive_in_denominator: bool,
    /// Divide the reconstruction loss by the batch size.
    pub recon_mean: bool,
    pub decode_source: DecodeSource,
    pub c_init: CInit,
    pub augmentation: AugmentationSpec,
    /// Skip pretraining (encoder arrives pretrained or random by intent).
    pub pretrained: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Bdsc,
            dataset: DatasetSpec::Synth(SynthSpec {
                n_subspaces: 5,
                subspace_dim: 4,
                ambient_dim: 30,
                points_per_subspace: 50,
                noise_sigma: 0.0,
                seed: 7,
            }),
            arch: Arch::Linear { latent: 20 },
            batch_size: 32,
            pretrain_epochs: 40,
            finetune_epochs: 120,
            phase1_epochs: 25,
            base_lr: 1e-2,
            lr_reference_k: 1,
            c_lr: None,
            alpha: 50.0,
            beta: 1.0,
            tau: 0.5,
            affinity: AffinityHeuristic::AbsSym,
            n_clusters: 0,
            seed: 7,
            shuffle: true,
            reshuffle_each_epoch: true,
            include_positive_in_denominator: true,
            recon_mean: false,
            decode_source: DecodeSource::SelfExpressed,
            c_init: CInit::Zeros,
            augmentation: AugmentationSpec::identity(7),
            pretrained: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be nonnegative".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if let Some(lr) = self.c_lr {
            if lr <= 0.0 {
                return Err(Error::Config("c_lr must be positive".into()));
            }
        }
        if let AffinityHeuristic::AbsSymThreshold(q) = self.affinity {
            if q < 1 {
                return Err(Error::Config("affinity_q must be >= 1".into()));
            }
        }
        if let DatasetSpec::Synth(s) = &self.dataset {
            s.validate()?;
        }
        self.augmentation.validate()?;
        if self.method == Method::Clbdsc && self.phase1_epochs > self.finetune_epochs {
            return Err(Error::Config(
                "phase1_epochs cannot exceed finetune_epochs".into(),
            ));
        }
        Ok(())
    }

    /// Flat JSON map (the config-file format).
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        put("method", Value::from(self.method.as_str()));
        match &self.dataset {
            DatasetSpec::Synth(s) => {
                put("dataset", Value::from("synth"));
                put("synth_subspaces", Value::from(s.n_subspaces));
                put("synth_dim", Value::from(s.subspace_dim));
                put("synth_ambient", Value::from(s.ambient_dim));
                put("synth_per", Value::from(s.points_per_subspace));
                put("synth_noise", Value::from(s.noise_sigma));
                put("synth_seed", Value::from(s.seed));
            }
            DatasetSpec::PgmDir { path, resize } => {
                put("dataset", Value::from("pgm"));
                put("dataset_path", Value::from(path.clone()));
                if let Some((h, w)) = resize {
                    put("resize_h", Value::from(*h));
                    put("resize_w", Value::from(*w));
                }
            }
            DatasetSpec::TensorDir { path } => {
                put("dataset", Value::from("tensor"));
                put("dataset_path", Value::from(path.clone()));
            }
        }
        match &self.arch {
            Arch::Linear { latent } => {
                put("arch", Value::from("linear"));
                put("latent", Value::from(*latent));
            }
            Arch::Mlp {
                hidden,
                latent,
                activation,
            } => {
                put("arch", Value::from("mlp"));
                put("hidden", Value::from(*hidden));
                put("latent", Value::from(*latent));
                put("activation", Value::from(act_str(*activation)));
            }
            Arch::Conv {
                channels,
                kernel,
                stride,
                activation,
                batchnorm,
            } => {
                put("arch", Value::from("conv"));
                put(
                    "conv_channels",
                    Value::from(
                        channels
                            .iter()
                            .map(|c| c.to_string())
                            .collect::<Vec<_>>()
                            .join(","),
                    ),
                );
                put("conv_kernel", Value::from(*kernel));
                put("conv_stride", Value::from(*stride));
                put("activation", Value::from(act_str(*activation)));
                put("batchnorm", Value::from(*batchnorm));
            }
        }
        put("batch_size", Value::from(self.batch_size));
        put("pretrain_epochs", Value::from(self.pretrain_epochs));
        put("finetune_epochs", Value::from(self.finetune_epochs));
        put("phase1_epochs", Value::from(self.phase1_epochs));
        put("base_lr", Value::from(self.base_lr));
        put("lr_reference_k", Value::from(self.lr_reference_k));
        if let Some(lr) = self.c_lr {
            put("c_lr", Value::from(lr));
        }
        put("alpha", Value::from(self.alpha));
        put("beta", Value::from(self.beta));
        put("tau", Value::from(self.tau));
        match self.affinity {
            AffinityHeuristic::AbsSym => put("affinity", Value::from("abs_sym")),
            AffinityHeuristic::AbsSymThreshold(q) => {
                put("affinity", Value::from("abs_sym_threshold"));
                put("affinity_q", Value::from(q));
            }
        }
        put("n_clusters", Value::from(self.n_clusters));
        put("seed", Value::from(self.seed));
        put("shuffle", Value::from(self.shuffle));
        put("reshuffle_each_epoch", Value::from(self.reshuffle_each_epoch));
        put(
            "include_positive_in_denominator",
            Value::from(self.include_positive_in_denominator),
        );
        put("recon_mean", Value::from(self.recon_mean));
        put(
            "decode_source",
            Value::from(match self.decode_source {
                DecodeSource::SelfExpressed => "self_expressed",
                DecodeSource::Latent => "latent",
            }),
        );
        match self.c_init {
            CInit::Zeros => put("c_init", Value::from("zeros")),
            CInit::Noise(s) => {
                put("c_init", Value::from("noise"));
                put("c_init_scale", Value::from(s));
            }
        }
        put("aug_crop_min", Value::from(self.augmentation.crop_scale_range.0));
        put("aug_crop_max", Value::from(self.augmentation.crop_scale_range.1));
        put("aug_hflip_prob", Value::from(self.augmentation.hflip_prob));
        put("aug_grayscale_prob", Value::from(self.augmentation.grayscale_prob));
        put("aug_brightness", Value::from(self.augmentation.brightness_jitter));
        put("aug_seed", Value::from(self.augmentation.seed));
        put("pretrained", Value::from(self.pretrained));
        m
    }

    /// Parses a flat map, starting from defaults. Unknown keys are
    /// rejected so typos fail loudly.
    pub fn from_flat(map: &Map<String, Value>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let bad = |k: &str, v: &Value| Error::Config(format!("bad value for {k:?}: {v}"));
        let as_usize = |k: &str, v: &Value| -> Result<usize> {
            v.as_u64().map(|x| x as usize).ok_or_else(|| bad(k, v))
        };
        let as_u64 = |k: &str, v: &Value| -> Result<u64> { v.as_u64().ok_or_else(|| bad(k, v)) };
        let as_f64 = |k: &str, v: &Value| -> Result<f64> { v.as_f64().ok_or_else(|| bad(k, v)) };
        let as_bool = |k: &str, v: &Value| -> Result<bool> { v.as_bool().ok_or_else(|| bad(k, v)) };
        let as_str = |k: &str, v: &Value| -> Result<String> {
            v.as_str().map(String::from).ok_or_else(|| bad(k, v))
        };

        // dataset / arch family selectors first, field values second
        let mut synth = match &cfg.dataset {
            DatasetSpec::Synth(s) => *s,
            _ => unreachable!("default is synth"),
        };
        let mut dataset_kind = "synth".to_string();
        let mut dataset_path = None;
        let mut resize: (Option<usize>, Option<usize>) = (None, None);
        let mut arch_kind = "linear".to_string();
        let mut latent = 20usize;
        let mut hidden = 32usize;
        let mut activation = Activation::Gelu;
        let mut conv_channels = vec![8usize, 16];
        let mut conv_kernel = 3usize;
        let mut conv_stride = 2usize;
        let mut batchnorm = true;
        let mut affinity_kind = "abs_sym".to_string();
        let mut affinity_q = 5usize;
        let mut c_init_kind = "zeros".to_string();
        let mut c_init_scale = 1e-4f64;

        for (k, v) in map {
            match k.as_str() {
                "method" => {
                    cfg.method = match as_str(k, v)?.as_str() {
                        "dsc" => Method::Dsc,
                        "bdsc" => Method::Bdsc,
                        "clbdsc" => Method::Clbdsc,
                        other => {
                            return Err(Error::Config(format!("unknown method {other:?}")))
                        }
                    }
                }
                "dataset" => dataset_kind = as_str(k, v)?,
                "dataset_path" => dataset_path = Some(as_str(k, v)?),
                "resize_h" => resize.0 = Some(as_usize(k, v)?),
                "resize_w" => resize.1 = Some(as_usize(k, v)?),
                "synth_subspaces" => synth.n_subspaces = as_usize(k, v)?,
                "synth_dim" => synth.subspace_dim = as_usize(k, v)?,
                "synth_ambient" => synth.ambient_dim = as_usize(k, v)?,
                "synth_per" => synth.points_per_subspace = as_usize(k, v)?,
                "synth_noise" => synth.noise_sigma = as_f64(k, v)?,
                "synth_seed" => synth.seed = as_u64(k, v)?,
                "arch" => arch_kind = as_str(k, v)?,
                "latent" => latent = as_usize(k, v)?,
                "hidden" => hidden = as_usize(k, v)?,
                "activation" => {
                    activation = match as_str(k, v)?.as_str() {
                        "relu" => Activation::Relu,
                        "gelu" => Activation::Gelu,
                        other => {
                            return Err(Error::Config(format!("unknown activation {other:?}")))
                        }
                    }
                }
                "conv_channels" => {
                    conv_channels = as_str(k, v)?
                        .split(',')
                        .map(|s| {
                            s.trim()
                                .parse::<usize>()
                                .map_err(|_| Error::Config(format!("bad conv_channels entry {s:?}")))
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                "conv_kernel" => conv_kernel = as_usize(k, v)?,
                "conv_stride" => conv_stride = as_usize(k, v)?,
                "batchnorm" => batchnorm = as_bool(k, v)?,
                "batch_size" => cfg.batch_size = as_usize(k, v)?,
                "pretrain_epochs" => cfg.pretrain_epochs = as_usize(k, v)?,
                "finetune_epochs" => cfg.finetune_epochs = as_usize(k, v)?,
                "phase1_epochs" => cfg.phase1_epochs = as_usize(k, v)?,
                "base_lr" => cfg.base_lr = as_f64(k, v)?,
                "lr_reference_k" => cfg.lr_reference_k = as_usize(k, v)?,
                "c_lr" => cfg.c_lr = Some(as_f64(k, v)?),
                "alpha" => cfg.alpha = as_f64(k, v)?,
                "beta" => cfg.beta = as_f64(k, v)?,
                "tau" => cfg.tau = as_f64(k, v)?,
                "affinity" => affinity_kind = as_str(k, v)?,
                "affinity_q" => affinity_q = as_usize(k, v)?,
                "n_clusters" => cfg.n_clusters = as_usize(k, v)?,
                "seed" => cfg.seed = as_u64(k, v)?,
                "shuffle" => cfg.shuffle = as_bool(k, v)?,
                "reshuffle_each_epoch" => cfg.reshuffle_each_epoch = as_bool(k, v)?,
                "include_positive_in_denominator" => {
                    cfg.include_positive_in_denominator = as_bool(k, v)?
                }
                "recon_mean" => cfg.recon_mean = as_bool(k, v)?,
                "decode_source" => {
                    cfg.decode_source = match as_str(k, v)?.as_str() {
                        "self_expressed" => DecodeSource::SelfExpressed,
                        "latent" => DecodeSource::Latent,
                        other => {
                            return Err(Error::Config(format!("unknown decode_source {other:?}")))
                        }
                    }
                }
                "c_init" => c_init_kind = as_str(k, v)?,
                "c_init_scale" => c_init_scale = as_f64(k, v)?,
                "aug_crop_min" => cfg.augmentation.crop_scale_range.0 = as_f64(k, v)?,
                "aug_crop_max" => cfg.augmentation.crop_scale_range.1 = as_f64(k, v)?,
                "aug_hflip_prob" => cfg.augmentation.hflip_prob = as_f64(k, v)?,
                "aug_grayscale_prob" => cfg.augmentation.grayscale_prob = as_f64(k, v)?,
                "aug_brightness" => cfg.augmentation.brightness_jitter = as_f64(k, v)?,
                "aug_seed" => cfg.augmentation.seed = as_u64(k, v)?,
                "pretrained" => cfg.pretrained = as_bool(k, v)?,
                other => return Err(Error::Config(format!("unknown config key {other:?}"))),
            }
        }

        cfg.dataset = match dataset_kind.as_str() {
            "synth" => DatasetSpec::Synth(synth),
            "pgm" => DatasetSpec::PgmDir {
                path: dataset_path
                    .ok_or_else(|| Error::Config("pgm dataset needs dataset_path".into()))?,
                resize: match resize {
                    (Some(h), Some(w)) => Some((h, w)),
                    (None, None) => None,
                    _ => {
                        return Err(Error::Config(
                            "resize_h and resize_w must be given together".into(),
                        ))
                    }
                },
            },
            "tensor" => DatasetSpec::TensorDir {
                path: dataset_path
                    .ok_or_else(|| Error::Config("tensor dataset needs dataset_path".into()))?,
            },
            other => return Err(Error::Config(format!("unknown dataset kind {other:?}"))),
        };
        cfg.arch = match arch_kind.as_str() {
            "linear" => Arch::Linear { latent },
            "mlp" => Arch::Mlp {
                hidden,
                latent,
                activation,
            },
            "conv" => Arch::Conv {
                channels: conv_channels,
                kernel: conv_kernel,
                stride: conv_stride,
                activation,
                batchnorm,
            },
            other => return Err(Error::Config(format!("unknown arch {other:?}"))),
        };
        cfg.affinity = match affinity_kind.as_str() {
            "abs_sym" => AffinityHeuristic::AbsSym,
            "abs_sym_threshold" => AffinityHeuristic::AbsSymThreshold(affinity_q),
            other => return Err(Error::Config(format!("unknown affinity {other:?}"))),
        };
        cfg.c_init = match c_init_kind.as_str() {
            "zeros" => CInit::Zeros,
            "noise" => CInit::Noise(c_init_scale),
            other => return Err(Error::Config(format!("unknown c_init {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a flat JSON config file, or extracts the embedded config from
    /// a run manifest (detected by its `"config"` object).
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            offset: 0,
            msg: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            offset: 0,
            msg: "config must be a JSON object".into(),
        })?;
        match obj.get("config").and_then(|c| c.as_object()) {
            Some(inner) => RunConfig::from_flat(inner),
            None => RunConfig::from_flat(obj),
        }
    }
}

fn act_str(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Gelu => "gelu",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_roundtrip_preserves_config() {
        let mut cfg = RunConfig::default();
        cfg.method = Method::Clbdsc;
        cfg.arch = Arch::Mlp {
            hidden: 24,
            latent: 12,
            activation: Activation::Relu,
        };
        cfg.c_lr = Some(5e-4);
        cfg.affinity = AffinityHeuristic::AbsSymThreshold(7);
        cfg.c_init = CInit::Noise(1e-3);
        let flat = cfg.to_flat();
        let back = RunConfig::from_flat(&flat).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut m = Map::new();
        m.insert("not_a_key".into(), Value::from(1));
        assert!(matches!(RunConfig::from_flat(&m), Err(Error::Config(_))));
    }

    #[test]
    fn negative_weights_rejected() {
        let mut m = Map::new();
        m.insert("alpha".into(), Value::from(-1.0));
        assert!(RunConfig::from_flat(&m).is_err());
    }
}
