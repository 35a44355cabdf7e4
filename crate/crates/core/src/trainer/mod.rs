//! Training orchestration: pretrain and fine-tune loops for DSC, BDSC and
//! CLBDSC, the optimizer groups, the end-to-end pipeline, the full-batch
//! equivalence check, and ablation sweeps.
//!
//! One [`TrainSession`] owns the dataset, the model, a single parameter
//! set (network weights plus the coefficient matrix `C`), two Adam groups
//! (network vs `C`), and the memory bank. All loops are strictly
//! sequential and deterministic given the config seeds.

pub mod checkpoint;
pub mod config;

pub use config::{CInit, DatasetSpec, DecodeSource, Method, RunConfig};

use crate::bank::{consistency_lr, MemoryBank};
use crate::clustering::{build_affinity, ClusterResult};
use crate::contrastive;
use crate::data::{gen_union_of_subspaces, load_pgm_dir, resize_bilinear, Dataset, SampleShape};
use crate::error::{Error, Result};
use crate::model::{Autoencoder, Mode, ParamMode};
use crate::optim::AdamState;
use crate::selfexpress::{self, SelfExpressiveCoefficients, C_PARAM};
use crate::tensor::{ParameterSet, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One optimizer step's logged losses. For CLBDSC phases the `recon`
/// column holds the InfoNCE term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: &'static str,
    pub epoch: u64,
    pub step: u64,
    pub total: f64,
    pub recon: f64,
    pub se: f64,
    pub reg: f64,
}

/// Chronological loss trace across phases.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub steps: Vec<StepRecord>,
}

impl Trace {
    /// Mean total loss per epoch within a phase, in epoch order.
    pub fn epoch_means(&self, phase: &str) -> Vec<f64> {
        let mut sums: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for s in self.steps.iter().filter(|s| s.phase == phase) {
            let e = sums.entry(s.epoch).or_insert((0.0, 0));
            e.0 += s.total;
            e.1 += 1;
        }
        sums.values().map(|(sum, n)| sum / *n as f64).collect()
    }

    pub fn phase_steps(&self, phase: &str) -> Vec<&StepRecord> {
        self.steps.iter().filter(|s| s.phase == phase).collect()
    }

    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "phase,epoch,step,total,recon,se,reg")?;
        for s in &self.steps {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.phase, s.epoch, s.step, s.total, s.recon, s.se, s.reg
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A full training run's state.
pub struct TrainSession {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub model: Autoencoder,
    pub params: ParameterSet,
    pub adam_net: AdamState,
    pub adam_c: AdamState,
    pub bank: Option<MemoryBank>,
    pub trace: Trace,
    /// Completed pretrain epochs.
    pub pretrain_epoch: u64,
    /// Completed fine-tune epochs.
    pub finetune_epoch: u64,
    /// Fine-tune optimizer steps taken (tags bank rows).
    pub global_step: u64,
    /// Position inside the current fine-tune epoch's schedule.
    pub batch_cursor: usize,
}

impl TrainSession {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dataset = load_dataset(&config.dataset)?;
        let n = dataset.len();
        let eff_batch = effective_batch(&config, n);
        if eff_batch > n {
            return Err(Error::Config(format!(
                "batch size {eff_batch} exceeds dataset size {n}"
            )));
        }

        let mut params = ParameterSet::new();
        let model = Autoencoder::init(dataset.shape, config.arch.clone(), config.seed, &mut params)?;
        let c = match config.c_init {
            CInit::Zeros => SelfExpressiveCoefficients::zeros(n),
            CInit::Noise(scale) => {
                let mut rng = crate::rng::rng_for(config.seed, "c-init", 0, 0);
                SelfExpressiveCoefficients::noise(n, scale, &mut rng)
            }
        };
        params.insert(C_PARAM, c.into_tensor())?;

        let k = n.div_ceil(eff_batch);
        let lr_net = if config.lr_reference_k > 0 {
            consistency_lr(config.base_lr, k, config.lr_reference_k)?
        } else {
            config.base_lr
        };
        let lr_c = config.c_lr.unwrap_or(lr_net);

        Ok(TrainSession {
            config,
            dataset,
            model,
            params,
            adam_net: AdamState::new(lr_net),
            adam_c: AdamState::new(lr_c),
            bank: None,
            trace: Trace::default(),
            pretrain_epoch: 0,
            finetune_epoch: 0,
            global_step: 0,
            batch_cursor: 0,
        })
    }

    fn n(&self) -> usize {
        self.dataset.len()
    }

    fn eff_batch(&self) -> usize {
        effective_batch(&self.config, self.n())
    }

    /// The trained coefficient matrix.
    pub fn c_matrix(&self) -> &Tensor {
        self.params.get(C_PARAM).expect("C is always present")
    }

    fn schedule(&self, epoch: u64) -> Result<crate::data::BatchSchedule> {
        let shuffle_epoch = if self.config.reshuffle_each_epoch {
            epoch
        } else {
            0
        };
        crate::data::split_batches(
            self.n(),
            self.eff_batch(),
            self.config.shuffle,
            self.config.seed,
            shuffle_epoch,
        )
    }

    fn stack_batch(&self, indices: &[usize]) -> Result<Tensor> {
        if self.model.wants_images() {
            self.dataset.stack_images(indices)
        } else {
            self.dataset.stack_flat(indices)
        }
    }

    fn recon_loss(&self, tape: &mut Tape, x: Var, x_hat: Var, batch_n: usize) -> Result<Var> {
        let f = tape.frobenius_sq(x, x_hat)?;
        Ok(if self.config.recon_mean {
            tape.scale(f, 1.0 / batch_n as f64)
        } else {
            f
        })
    }

    fn check_finite(&self, value: f64, phase: &str) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss in {phase} at fine-tune step {} (epoch {})",
                self.global_step, self.finetune_epoch
            )));
        }
        Ok(())
    }

    // ---- pretraining -----------------------------------------------------

    /// Mini-batch autoencoder pretraining (reconstruction only; the
    /// self-expressive layer is out of the graph). Zero epochs is a no-op.
    pub fn pretrain(&mut self, epochs: usize) -> Result<()> {
        for _ in 0..epochs {
            let sched = self.schedule(self.pretrain_epoch)?;
            for b in 0..sched.num_batches() {
                let indices = sched.batch(b).to_vec();
                let mut tape = Tape::new();
                let x_t = self.stack_batch(&indices)?;
                let x = tape.constant_owned(x_t);
                let z = self
                    .model
                    .encode(&mut tape, &self.params, x, Mode::Train, ParamMode::Trainable)?;
                let x_hat =
                    self.model
                        .decode(&mut tape, &self.params, z, Mode::Train, ParamMode::Trainable)?;
                let loss = self.recon_loss(&mut tape, x, x_hat, indices.len())?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss in pretrain at epoch {}, batch {b}",
                        self.pretrain_epoch
                    )));
                }
                tape.backward(loss)?;
                tape.grads_into(&mut self.params)?;
                self.adam_net
                    .step_filtered(&mut self.params, |n| n != C_PARAM)?;
                self.trace.steps.push(StepRecord {
                    phase: "pretrain",
                    epoch: self.pretrain_epoch,
                    step: b as u64,
                    total: value,
                    recon: value,
                    se: 0.0,
                    reg: 0.0,
                });
            }
            self.pretrain_epoch += 1;
        }
        Ok(())
    }

    // ---- bank ------------------------------------------------------------

    /// Populates the memory bank by running the encoder in eval mode over
    /// the dataset in order (no gradients retained).
    pub fn init_bank(&mut self) -> Result<()> {
        let n = self.n();
        let batch = self.eff_batch();
        let model = &mut self.model;
        let params = &self.params;
        let dataset = &self.dataset;
        let wants_images = model.wants_images();
        let bank = MemoryBank::init_from_encoder(n, batch, |indices| {
            let mut tape = Tape::new();
            let x_t = if wants_images {
                dataset.stack_images(indices)?
            } else {
                dataset.stack_flat(indices)?
            };
            let x = tape.constant_owned(x_t);
            let z = model.encode(&mut tape, params, x, Mode::Eval, ParamMode::Frozen)?;
            Ok(tape.value(z).detached())
        })?;
        if bank.width() != self.model.latent_width() {
            return Err(Error::Config(format!(
                "bank width {} != model latent width {}",
                bank.width(),
                self.model.latent_width()
            )));
        }
        self.bank = Some(bank);
        Ok(())
    }

    // ---- fine-tuning -----------------------------------------------------

    /// Runs `epochs` fine-tune epochs of the configured method.
    pub fn finetune(&mut self, epochs: usize) -> Result<()> {
        for _ in 0..epochs {
            loop {
                if self.finetune_step()? {
                    break; // epoch boundary crossed
                }
            }
        }
        Ok(())
    }

    /// Runs exactly `steps` fine-tune optimizer steps (possibly spanning
    /// epoch boundaries).
    pub fn finetune_steps(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.finetune_step()?;
        }
        Ok(())
    }

    /// One optimizer step; returns true when it completed an epoch.
    fn finetune_step(&mut self) -> Result<bool> {
        let sched = self.schedule(self.finetune_epoch)?;
        let indices = sched.batch(self.batch_cursor).to_vec();
        match self.config.method {
            Method::Dsc => self.dsc_step()?,
            Method::Bdsc => self.bdsc_step(&indices)?,
            Method::Clbdsc => {
                let phase1 = self.finetune_epoch < self.config.phase1_epochs as u64;
                self.clbdsc_step(&indices, phase1)?;
            }
        }
        self.global_step += 1;
        self.batch_cursor += 1;
        let epoch_done = match self.config.method {
            Method::Dsc => true, // full batch: one step per epoch
            _ => self.batch_cursor >= sched.num_batches(),
        };
        if epoch_done {
            self.batch_cursor = 0;
            self.finetune_epoch += 1;
        }
        Ok(epoch_done)
    }

    /// Monolithic full-batch step: `Z_hat = C Z` with live `Z`, no bank.
    fn dsc_step(&mut self) -> Result<()> {
        let all: Vec<usize> = (0..self.n()).collect();
        let mut tape = Tape::new();
        let x_t = self.stack_batch(&all)?;
        let x = tape.constant_owned(x_t);
        let z = self
            .model
            .encode(&mut tape, &self.params, x, Mode::Train, ParamMode::Trainable)?;
        let c = tape.param(&self.params, C_PARAM)?;
        let z_hat = tape.matmul(c, z)?;
        self.finish_recon_step(tape, x, z, z_hat, c, all.len(), "finetune")
    }

    /// Memory-bank step: write the live batch into the bank, self-express
    /// against the spliced snapshot, decode, update.
    fn bdsc_step(&mut self, indices: &[usize]) -> Result<()> {
        if self.bank.is_none() {
            return Err(Error::State(
                "fine-tuning requires an initialized memory bank".into(),
            ));
        }
        let mut tape = Tape::new();
        let x_t = self.stack_batch(indices)?;
        let x = tape.constant_owned(x_t);
        let z = self
            .model
            .encode(&mut tape, &self.params, x, Mode::Train, ParamMode::Trainable)?;
        let z_detached = tape.value(z).detached();
        let bank = self.bank.as_mut().expect("checked above");
        bank.write_batch(indices, &z_detached, self.finetune_epoch, self.global_step)?;
        let c = tape.param(&self.params, C_PARAM)?;
        let z_hat = selfexpress::reconstruct_batch(&mut tape, c, bank, indices, z)?;
        self.finish_recon_step(tape, x, z, z_hat, c, indices.len(), "finetune")
    }

    /// Shared tail of the reconstruction-based steps: decode, combine the
    /// three loss terms, backprop, step both optimizer groups, re-project
    /// the diagonal of `C`.
    #[allow(clippy::too_many_arguments)]
    fn finish_recon_step(
        &mut self,
        mut tape: Tape,
        x: Var,
        z: Var,
        z_hat: Var,
        c: Var,
        batch_n: usize,
        phase: &'static str,
    ) -> Result<()> {
        let decode_input = match self.config.decode_source {
            DecodeSource::SelfExpressed => z_hat,
            DecodeSource::Latent => z,
        };
        let x_hat = self.model.decode(
            &mut tape,
            &self.params,
            decode_input,
            Mode::Train,
            ParamMode::Trainable,
        )?;
        let recon = self.recon_loss(&mut tape, x, x_hat, batch_n)?;
        let se = selfexpress::se_loss(&mut tape, z, z_hat)?;
        let reg = selfexpress::reg_loss(&mut tape, c);
        let total = selfexpress::total_loss(
            &mut tape,
            recon,
            se,
            reg,
            self.config.alpha,
            self.config.beta,
        )?;
        let record = StepRecord {
            phase,
            epoch: self.finetune_epoch,
            step: self.global_step,
            total: tape.scalar(total),
            recon: tape.scalar(recon),
            se: tape.scalar(se),
            reg: tape.scalar(reg),
        };
        self.check_finite(record.total, phase)?;
        tape.backward(total)?;
        tape.grads_into(&mut self.params)?;
        self.adam_net
            .step_filtered(&mut self.params, |n| n != C_PARAM)?;
        self.adam_c.step_filtered(&mut self.params, |n| n == C_PARAM)?;
        selfexpress::project_zero_diag(self.params.get_mut(C_PARAM)?);
        self.trace.steps.push(record);
        Ok(())
    }

    /// Decoder-free contrastive step. Phase 1 freezes the encoder and
    /// trains `C` only; phase 2 trains encoder and `C` jointly.
    fn clbdsc_step(&mut self, indices: &[usize], phase1: bool) -> Result<()> {
        if self.bank.is_none() {
            return Err(Error::State(
                "fine-tuning requires an initialized memory bank".into(),
            ));
        }
        let phase: &'static str = if phase1 { "clbdsc_p1" } else { "clbdsc_p2" };
        let encoder_pm = if phase1 {
            ParamMode::Frozen
        } else {
            ParamMode::Trainable
        };
        let mut tape = Tape::new();
        let c = tape.param(&self.params, C_PARAM)?;
        let bank = self.bank.as_mut().expect("checked above");
        let (total, diag) = contrastive::clbdsc_forward(
            &mut tape,
            &mut self.model,
            &self.params,
            encoder_pm,
            c,
            bank,
            &self.dataset,
            indices,
            &self.config.augmentation,
            self.config.alpha,
            self.config.beta,
            self.config.tau,
            self.config.include_positive_in_denominator,
            self.finetune_epoch,
            self.global_step,
        )?;
        let record = StepRecord {
            phase,
            epoch: self.finetune_epoch,
            step: self.global_step,
            total: diag.total,
            recon: diag.nce,
            se: diag.se,
            reg: diag.reg,
        };
        self.check_finite(record.total, phase)?;
        tape.backward(total)?;
        tape.grads_into(&mut self.params)?;
        if !phase1 {
            let encoder_names: std::collections::BTreeSet<String> =
                self.model.encoder_param_names().into_iter().collect();
            self.adam_net
                .step_filtered(&mut self.params, |n| encoder_names.contains(n))?;
        }
        self.adam_c.step_filtered(&mut self.params, |n| n == C_PARAM)?;
        selfexpress::project_zero_diag(self.params.get_mut(C_PARAM)?);
        self.trace.steps.push(record);
        Ok(())
    }

    // ---- evaluation --------------------------------------------------------

    fn resolve_n_clusters(&self) -> Result<usize> {
        if self.config.n_clusters > 0 {
            return Ok(self.config.n_clusters);
        }
        self.dataset.n_classes().ok_or_else(|| {
            Error::Config("n_clusters not set and the dataset has no labels".into())
        })
    }

    /// Affinity from the trained `C`, spectral clustering, ACC/NMI.
    pub fn cluster(&self) -> Result<ClusterResult> {
        let affinity = build_affinity(self.c_matrix(), self.config.affinity)?;
        ClusterResult::compute(
            affinity,
            self.resolve_n_clusters()?,
            self.config.seed,
            self.dataset.labels(),
        )
    }

    /// Eval-mode latent codes for the whole dataset (used by the two-step
    /// baseline and diagnostics).
    pub fn encode_all_eval(&mut self) -> Result<Tensor> {
        let all: Vec<usize> = (0..self.n()).collect();
        let mut tape = Tape::new();
        let x_t = self.stack_batch(&all)?;
        let x = tape.constant_owned(x_t);
        let z = self
            .model
            .encode(&mut tape, &self.params, x, Mode::Eval, ParamMode::Frozen)?;
        Ok(tape.value(z).detached())
    }
}

fn effective_batch(config: &RunConfig, n: usize) -> usize {
    match config.method {
        Method::Dsc => n, // full batch by definition
        _ => config.batch_size,
    }
}

/// Loads (or generates) the dataset named by the config.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Synth(s) => gen_union_of_subspaces(s),
        DatasetSpec::TensorDir { path } => {
            Dataset::load_dir(std::path::Path::new(path), "tensor-dir")
        }
        DatasetSpec::PgmDir { path, resize } => {
            let ds = load_pgm_dir(std::path::Path::new(path))?;
            match resize {
                None => Ok(ds),
                Some((h, w)) => {
                    let samples = (0..ds.len())
                        .map(|i| resize_bilinear(ds.sample(i), *h, *w))
                        .collect::<Result<Vec<_>>>()?;
                    let labels = ds.labels().map(|l| l.to_vec());
                    let c = ds.shape.dims()[0];
                    Dataset::new(&ds.name, SampleShape::Image(c, *h, *w), samples, labels)
                }
            }
        }
    }
}

/// Summary of one training phase for the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub name: String,
    pub steps: u64,
    pub final_loss: Option<f64>,
}

/// Everything needed to reproduce and audit a run. The embedded flat
/// config alone suffices to replay it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Map<String, serde_json::Value>,
    pub seed: u64,
    pub n_samples: usize,
    pub n_clusters: usize,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub phases: Vec<PhaseSummary>,
    pub artifacts: BTreeMap<String, String>,
    pub started_unix_ms: u64,
    pub wall_ms: u64,
}

impl RunManifest {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self).expect("manifest serializes"),
        )?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            offset: 0,
            msg: e.to_string(),
        })
    }
}

/// Output of [`full_pipeline`].
pub struct PipelineRun {
    pub result: ClusterResult,
    pub manifest: RunManifest,
}

/// Pretrain (unless skipped) -> bank init -> fine-tune -> affinity ->
/// spectral clustering -> scores. With `out_dir` set, writes the trace,
/// `C`, the affinity, the labels CSV, a checkpoint, and `manifest.json`.
pub fn full_pipeline(config: &RunConfig, out_dir: Option<&std::path::Path>) -> Result<PipelineRun> {
    let started = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    let t0 = std::time::Instant::now();

    let mut session = TrainSession::new(config.clone())?;
    if !config.pretrained && config.pretrain_epochs > 0 {
        session.pretrain(config.pretrain_epochs)?;
    }
    if config.method != Method::Dsc {
        session.init_bank()?;
    }
    session.finetune(config.finetune_epochs)?;
    let result = session.cluster()?;

    let mut phases = Vec::new();
    for phase in ["pretrain", "finetune", "clbdsc_p1", "clbdsc_p2"] {
        let steps = session.trace.phase_steps(phase);
        if !steps.is_empty() {
            phases.push(PhaseSummary {
                name: phase.to_string(),
                steps: steps.len() as u64,
                final_loss: steps.last().map(|s| s.total),
            });
        }
    }

    let mut artifacts = BTreeMap::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        session.trace.save_csv(&dir.join("trace.csv"))?;
        crate::data::save_tensor(&dir.join("c.sctd"), session.c_matrix())?;
        crate::data::save_tensor(&dir.join("affinity.sctd"), result.affinity.tensor())?;
        result.save_csv(&dir.join("labels.csv"), session.dataset.labels())?;
        let ckpt = dir.join("checkpoint");
        checkpoint::save(&ckpt, &session)?;
        for (k, v) in [
            ("trace", "trace.csv"),
            ("c", "c.sctd"),
            ("affinity", "affinity.sctd"),
            ("labels", "labels.csv"),
            ("checkpoint", "checkpoint"),
            ("manifest", "manifest.json"),
        ] {
            artifacts.insert(k.to_string(), dir.join(v).display().to_string());
        }
    }

    let manifest = RunManifest {
        config: config.to_flat(),
        seed: config.seed,
        n_samples: session.n(),
        n_clusters: session.resolve_n_clusters()?,
        acc: result.acc,
        nmi: result.nmi,
        phases,
        artifacts,
        started_unix_ms: started,
        wall_ms: t0.elapsed().as_millis() as u64,
    };
    if let Some(dir) = out_dir {
        manifest.save(&dir.join("manifest.json"))?;
    }
    Ok(PipelineRun { result, manifest })
}

/// Report of [`equivalence_check`].
#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub steps: usize,
    pub max_param_dev: f64,
    pub max_loss_dev: f64,
}

/// Runs the monolithic DSC path and the memory-bank BDSC path in lockstep
/// from identical initialization and reports the worst parameter/loss
/// deviation over `steps` optimizer steps. With the batch size equal to
/// the dataset size and shuffling off, the two paths compute the same
/// function and the deviation stays at the f64 roundoff floor.
pub fn equivalence_check(config: &RunConfig, steps: usize) -> Result<EquivalenceReport> {
    let mut cfg_dsc = config.clone();
    cfg_dsc.method = Method::Dsc;
    let mut cfg_bdsc = config.clone();
    cfg_bdsc.method = Method::Bdsc;

    let mut a = TrainSession::new(cfg_dsc)?;
    let mut b = TrainSession::new(cfg_bdsc)?;
    if !config.pretrained && config.pretrain_epochs > 0 {
        a.pretrain(config.pretrain_epochs)?;
        b.pretrain(config.pretrain_epochs)?;
    }
    b.init_bank()?;

    let mut max_param_dev: f64 = a.params.max_abs_diff(&b.params)?;
    let mut max_loss_dev: f64 = 0.0;
    for _ in 0..steps {
        a.finetune_steps(1)?;
        b.finetune_steps(1)?;
        max_param_dev = max_param_dev.max(a.params.max_abs_diff(&b.params)?);
        let la = a.trace.steps.last().map(|s| s.total).unwrap_or(0.0);
        let lb = b.trace.steps.last().map(|s| s.total).unwrap_or(0.0);
        max_loss_dev = max_loss_dev.max((la - lb).abs());
    }
    Ok(EquivalenceReport {
        steps,
        max_param_dev,
        max_loss_dev,
    })
}

/// Classical two-step baseline: pretrain-only features, closed-form ridge
/// self-expression, spectral clustering. Returns (ACC, NMI).
pub fn two_step_baseline(config: &RunConfig) -> Result<(f64, f64)> {
    let mut session = TrainSession::new(config.clone())?;
    if !config.pretrained && config.pretrain_epochs > 0 {
        session.pretrain(config.pretrain_epochs)?;
    }
    let z = session.encode_all_eval()?;
    let c = crate::data::ridge_self_expression(&z, 0.01)?;
    let affinity = build_affinity(&c, crate::clustering::AffinityHeuristic::AbsSym)?;
    let result = ClusterResult::compute(
        affinity,
        session.resolve_n_clusters()?,
        config.seed,
        session.dataset.labels(),
    )?;
    match (result.acc, result.nmi) {
        (Some(a), Some(n)) => Ok((a, n)),
        _ => Err(Error::Config(
            "two-step baseline needs ground-truth labels".into(),
        )),
    }
}

/// Sweep axes: batch size x learning rate, or alpha x beta.
#[derive(Debug, Clone)]
pub enum SweepGrid {
    BatchLr {
        batch_sizes: Vec<usize>,
        lrs: Vec<f64>,
    },
    AlphaBeta {
        alphas: Vec<f64>,
        betas: Vec<f64>,
    },
}

impl SweepGrid {
    pub fn axis_names(&self) -> (&'static str, &'static str) {
        match self {
            SweepGrid::BatchLr { .. } => ("batch_size", "lr"),
            SweepGrid::AlphaBeta { .. } => ("alpha", "beta"),
        }
    }

    fn cells(&self) -> Vec<(f64, f64)> {
        match self {
            SweepGrid::BatchLr { batch_sizes, lrs } => batch_sizes
                .iter()
                .flat_map(|&b| lrs.iter().map(move |&l| (b as f64, l)))
                .collect(),
            SweepGrid::AlphaBeta { alphas, betas } => alphas
                .iter()
                .flat_map(|&a| betas.iter().map(move |&b| (a, b)))
                .collect(),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            SweepGrid::BatchLr { batch_sizes, lrs } => batch_sizes.is_empty() || lrs.is_empty(),
            SweepGrid::AlphaBeta { alphas, betas } => alphas.is_empty() || betas.is_empty(),
        }
    }
}

/// One sweep cell's outcome.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub values: (f64, f64),
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub error: Option<String>,
}

/// Runs one `full_pipeline` per grid cell (grid order, first axis major).
/// Sweeping learning rates disables the consistency rule so each cell uses
/// its rate verbatim. Cell failures are recorded and the sweep continues.
/// `SUBSPACE_LAB_THREADS` caps cell parallelism (default: sequential).
pub fn ablation_sweep(config: &RunConfig, grid: &SweepGrid) -> Result<Vec<SweepCell>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let cells = grid.cells();
    let configs: Vec<RunConfig> = cells
        .iter()
        .map(|&(v1, v2)| {
            let mut c = config.clone();
            match grid {
                SweepGrid::BatchLr { .. } => {
                    c.batch_size = v1 as usize;
                    c.base_lr = v2;
                    c.lr_reference_k = 0;
                }
                SweepGrid::AlphaBeta { .. } => {
                    c.alpha = v1;
                    c.beta = v2;
                }
            }
            c
        })
        .collect();

    let threads = std::env::var("SUBSPACE_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1);

    let run_cell = |cfg: &RunConfig, values: (f64, f64)| -> SweepCell {
        match full_pipeline(cfg, None) {
            Ok(run) => SweepCell {
                values,
                acc: run.result.acc,
                nmi: run.result.nmi,
                error: None,
            },
            Err(e) => SweepCell {
                values,
                acc: None,
                nmi: None,
                error: Some(e.to_string()),
            },
        }
    };

    let mut out: Vec<Option<SweepCell>> = vec![None; cells.len()];
    if threads == 1 {
        for (i, cfg) in configs.iter().enumerate() {
            out[i] = Some(run_cell(cfg, cells[i]));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results: Vec<std::sync::Mutex<Option<SweepCell>>> =
            (0..cells.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads.min(cells.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= cells.len() {
                        break;
                    }
                    let cell = run_cell(&configs[i], cells[i]);
                    *results[i].lock().expect("no poisoning") = Some(cell);
                });
            }
        });
        for (slot, r) in out.iter_mut().zip(results) {
            *slot = r.into_inner().expect("no poisoning");
        }
    }
    Ok(out.into_iter().map(|c| c.expect("all cells ran")).collect())
}

/// CSV for sweep results: axis columns, then `acc,nmi,error`.
pub fn sweep_csv(grid: &SweepGrid, cells: &[SweepCell]) -> String {
    let (n1, n2) = grid.axis_names();
    let mut out = format!("{n1},{n2},acc,nmi,error\n");
    for c in cells {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.values.0,
            c.values.1,
            fmt(c.acc),
            fmt(c.nmi),
            c.error.clone().unwrap_or_default()
        ));
    }
    out
}
