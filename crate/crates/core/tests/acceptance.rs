//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (run with `--nocapture` to see them). Budgets are asserted
//! alongside the quality bars.

use subspace_lab::clustering::{build_affinity, AffinityHeuristic, ClusterResult};
use subspace_lab::contrastive::{clbdsc_forward, AugmentationSpec};
use subspace_lab::data::{gen_union_of_subspaces, ridge_self_expression, SynthSpec};
use subspace_lab::model::{Arch, Autoencoder, Mode, ParamMode};
use subspace_lab::selfexpress::{self, C_PARAM};
use subspace_lab::tensor::{Activation, ParameterSet, Tape};
use subspace_lab::trainer::{
    ablation_sweep, equivalence_check, full_pipeline, two_step_baseline, CInit, DatasetSpec,
    Method, RunConfig, SweepGrid, TrainSession,
};
use subspace_lab::{bank::MemoryBank, Tensor};

fn synth_spec(noise: f64) -> SynthSpec {
    SynthSpec {
        n_subspaces: 5,
        subspace_dim: 4,
        ambient_dim: 30,
        points_per_subspace: 50,
        noise_sigma: noise,
        seed: 7,
    }
}

/// The tuned BDSC desk-scale configuration: linear autoencoder, alpha=50,
/// beta=1, batch 32, network rate set through the consistency rule from a
/// full-batch reference of 1e-3, and a faster separate rate for `C`.
fn bdsc_config(noise: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.method = Method::Bdsc;
    cfg.dataset = DatasetSpec::Synth(synth_spec(noise));
    cfg.arch = Arch::Linear { latent: 20 };
    cfg.batch_size = 32;
    cfg.alpha = 50.0;
    cfg.beta = 1.0;
    cfg.base_lr = 1e-3;
    cfg.lr_reference_k = 1;
    cfg.c_lr = Some(1e-2);
    cfg.pretrain_epochs = 40;
    cfg.finetune_epochs = 120;
    cfg
}

fn report(name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {name}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{name} failed: {detail}");
}

#[test]
fn criterion_full_batch_equivalence() {
    let t0 = std::time::Instant::now();
    let mut cfg = bdsc_config(0.0);
    cfg.batch_size = 250; // n = N
    cfg.shuffle = false;
    cfg.pretrain_epochs = 2;
    let rep = equivalence_check(&cfg, 10).unwrap();
    let elapsed = t0.elapsed();
    report(
        "full-batch equivalence",
        rep.max_param_dev < 1e-10 && rep.max_loss_dev < 1e-10 && elapsed.as_secs() < 30,
        &format!(
            "10 steps: max param dev {:e}, max loss dev {:e}, {:.2?}",
            rep.max_param_dev, rep.max_loss_dev, elapsed
        ),
    );
}

#[test]
fn criterion_gradient_suite() {
    let t0 = std::time::Instant::now();
    let checks = subspace_lab::verify::grad_suite(11).unwrap();
    let mut worst_name = String::new();
    let mut worst = 0.0f64;
    let mut all_pass = true;
    for c in &checks {
        all_pass &= c.passed() && c.max_rel_err <= 1e-4;
        if c.max_rel_err > worst {
            worst = c.max_rel_err;
            worst_name = c.name.clone();
        }
    }
    let adjoint = subspace_lab::verify::adjointness_check(11).unwrap();
    let elapsed = t0.elapsed();
    report(
        "gradient suite",
        all_pass && adjoint < 1e-10 && elapsed.as_secs() < 60,
        &format!(
            "{} ops x 5 instances, worst rel err {worst:.2e} ({worst_name}), adjoint defect {adjoint:.2e}, {:.2?}",
            checks.len(),
            elapsed
        ),
    );
}

#[test]
fn criterion_self_expressiveness_oracle() {
    let t0 = std::time::Instant::now();

    // classical closed-form oracle on the raw data
    let ds = gen_union_of_subspaces(&synth_spec(0.0)).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    let x = ds.stack_flat(&all).unwrap();
    let c = ridge_self_expression(&x, 0.01).unwrap();
    let aff = build_affinity(&c, AffinityHeuristic::AbsSym).unwrap();
    let oracle = ClusterResult::compute(aff, 5, 7, ds.labels()).unwrap();
    let oracle_acc = oracle.acc.unwrap();

    // trained BDSC pipeline
    let run = full_pipeline(&bdsc_config(0.0), None).unwrap();
    let (acc, nmi) = (run.result.acc.unwrap(), run.result.nmi.unwrap());

    let elapsed = t0.elapsed();
    report(
        "self-expressiveness oracle",
        oracle_acc >= 0.98 && acc >= 0.98 && nmi >= 0.95 && elapsed.as_secs() < 180,
        &format!(
            "ridge oracle acc {oracle_acc:.3}; trained BDSC acc {acc:.3}, nmi {nmi:.3}; {:.2?}",
            elapsed
        ),
    );
}

#[test]
fn criterion_metric_oracles() {
    let checks = subspace_lab::verify::metric_oracle_suite(13, 100).unwrap();
    let all = checks.iter().all(|c| c.passed);
    let detail = checks
        .iter()
        .map(|c| format!("{} ({})", c.name, c.detail))
        .collect::<Vec<_>>()
        .join("; ");
    report("metric oracles", all, &detail);
}

#[test]
fn criterion_memory_bank_consistency_trend() {
    let t0 = std::time::Instant::now();
    let mut cfg = bdsc_config(0.05);
    cfg.c_lr = None; // sweep ties both groups to the swept rate
    cfg.pretrain_epochs = 30;
    cfg.finetune_epochs = 80;
    let grid = SweepGrid::BatchLr {
        batch_sizes: vec![25, 125],
        lrs: vec![1e-4, 1e-3],
    };
    let cells = ablation_sweep(&cfg, &grid).unwrap();
    // argmax lr by ACC per batch size; ties resolved toward the smaller lr
    let argmax = |n: f64| -> f64 {
        let mut best = (f64::NEG_INFINITY, f64::INFINITY);
        for c in cells.iter().filter(|c| c.values.0 == n) {
            let acc = c.acc.unwrap_or(f64::NEG_INFINITY);
            if acc > best.0 || (acc == best.0 && c.values.1 < best.1) {
                best = (acc, c.values.1);
            }
        }
        best.1
    };
    let (lr_small, lr_large) = (argmax(25.0), argmax(125.0));
    let elapsed = t0.elapsed();
    let table = cells
        .iter()
        .map(|c| format!("n={} lr={} acc={:.3}", c.values.0, c.values.1, c.acc.unwrap_or(-1.0)))
        .collect::<Vec<_>>()
        .join("; ");
    report(
        "memory-bank consistency trend",
        lr_small <= lr_large && elapsed.as_secs() < 600,
        &format!("argmax-lr(n=25) = {lr_small} <= argmax-lr(n=125) = {lr_large} [{table}], {elapsed:.2?}"),
    );
}

#[test]
fn criterion_joint_vs_two_step() {
    let cfg = bdsc_config(0.05);
    let (two_step_acc, _) = two_step_baseline(&cfg).unwrap();
    let run = full_pipeline(&cfg, None).unwrap();
    let joint_acc = run.result.acc.unwrap();
    report(
        "joint vs two-step",
        joint_acc >= two_step_acc - 0.02,
        &format!("BDSC acc {joint_acc:.3} vs two-step acc {two_step_acc:.3} (tolerance 0.02)"),
    );
}

/// The tuned CLBDSC configuration: identity augmentation on the flat
/// synthetic set, noise-initialized `C` (a zero `C` would make the anchor
/// degenerate), two batches per epoch, gentle `C` rate so phase 1 descends
/// smoothly.
fn clbdsc_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.method = Method::Clbdsc;
    cfg.dataset = DatasetSpec::Synth(synth_spec(0.0));
    cfg.arch = Arch::Linear { latent: 20 };
    cfg.batch_size = 125;
    cfg.c_init = CInit::Noise(1e-4);
    cfg.pretrain_epochs = 40;
    cfg.phase1_epochs = 100; // 2 steps per epoch -> 200 phase-1 steps
    cfg.finetune_epochs = 220;
    cfg.base_lr = 1e-3;
    cfg.c_lr = Some(3e-3);
    cfg.shuffle = true;
    cfg.reshuffle_each_epoch = false;
    cfg
}

/// Phase-1 objective (InfoNCE + alpha * L_se) on a fixed evaluation batch.
/// The phase-1 encoder is frozen, so the bank rows are exactly the current
/// encodings and this is the training objective for that batch as a
/// function of `C` alone — a consistent quantity across steps, unlike the
/// raw per-step trace which alternates between batches.
fn phase1_fixed_batch_loss(session: &TrainSession, batch: &[usize]) -> f64 {
    use subspace_lab::contrastive::{info_nce, ContrastiveBatch};
    let bank = session.bank.as_ref().unwrap();
    let mut tape = Tape::new();
    let z_t = bank.gather_rows(batch).unwrap();
    let z = tape.constant_owned(z_t);
    let c = tape.constant(session.c_matrix());
    let z_hat = selfexpress::reconstruct_batch(&mut tape, c, bank, batch, z).unwrap();
    let anchors = tape.row_normalize(z_hat).unwrap();
    let positives = tape.row_normalize(z).unwrap();
    let negs: Vec<usize> = (0..session.dataset.len())
        .filter(|i| !batch.contains(i))
        .collect();
    let mut neg_t = bank.gather_rows(&negs).unwrap();
    for r in 0..neg_t.shape()[0] {
        let norm: f64 = neg_t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in neg_t.row_mut(r) {
            *v /= norm;
        }
    }
    let negatives = tape.constant_owned(neg_t);
    let b = ContrastiveBatch::new(&tape, anchors, positives, negatives, session.config.tau).unwrap();
    let nce = info_nce(&mut tape, &b, session.config.include_positive_in_denominator).unwrap();
    let se = selfexpress::se_loss(&mut tape, z, z_hat).unwrap();
    tape.scalar(nce) + session.config.alpha * tape.scalar(se)
}

#[test]
fn criterion_clbdsc_sanity() {
    let cfg = clbdsc_config();

    // (1) phase-1 objective decreases over 200 steps, <= 5% violations
    let mut session = TrainSession::new(cfg.clone()).unwrap();
    session.pretrain(cfg.pretrain_epochs).unwrap();
    session.init_bank().unwrap();
    let eval_batch: Vec<usize> = (0..cfg.batch_size).collect();
    let mut curve = vec![phase1_fixed_batch_loss(&session, &eval_batch)];
    for _ in 0..200 {
        session.finetune_steps(1).unwrap();
        curve.push(phase1_fixed_batch_loss(&session, &eval_batch));
    }
    let violations = curve.windows(2).filter(|w| w[1] > w[0]).count();

    // (2) phase 1 left the encoder parameters bit-identical to their
    //     post-pretrain state (compare against a pretrained twin — same
    //     seed, no fine-tuning)
    let frozen_ok = {
        let mut twin = TrainSession::new(cfg.clone()).unwrap();
        twin.pretrain(cfg.pretrain_epochs).unwrap();
        session.model.encoder_param_names().iter().all(|name| {
            session.params.get(name).unwrap().data() == twin.params.get(name).unwrap().data()
        })
    };

    // (3) finish training; final ACC within 0.05 of BDSC's
    let remaining = cfg.finetune_epochs - session.finetune_epoch as usize;
    session.finetune(remaining).unwrap();
    let clbdsc_acc = session.cluster().unwrap().acc.unwrap();
    let bdsc_acc = full_pipeline(&bdsc_config(0.0), None)
        .unwrap()
        .result
        .acc
        .unwrap();

    report(
        "clbdsc sanity",
        violations * 100 <= 5 * 200 && frozen_ok && (clbdsc_acc - bdsc_acc).abs() <= 0.05,
        &format!(
            "phase-1 violations {violations}/200 ({:.1}%), encoder frozen through phase 1: {frozen_ok}, clbdsc acc {clbdsc_acc:.3} vs bdsc acc {bdsc_acc:.3}",
            violations as f64 / 2.0
        ),
    );
}

#[test]
fn clbdsc_bank_stores_clean_view() {
    // A real (non-identity) augmentation on image-shaped data: after one
    // forward, bank rows must equal encoder(X) at the write instant, not
    // encoder(augment(X)).
    let mut rng = subspace_lab::rng::rng_for(3, "clean-view", 0, 0);
    let n = 6usize;
    let samples: Vec<Tensor> = (0..n)
        .map(|_| {
            let mut t = Tensor::randn(vec![1, 4, 4], 0.2, &mut rng);
            for v in t.data_mut() {
                *v = (*v + 0.5).clamp(0.0, 1.0);
            }
            t
        })
        .collect();
    let ds = subspace_lab::data::Dataset::new(
        "clean-view",
        subspace_lab::data::SampleShape::Image(1, 4, 4),
        samples,
        Some(vec![0, 0, 0, 1, 1, 1]),
    )
    .unwrap();

    let mut params = ParameterSet::new();
    let mut model = Autoencoder::init(
        ds.shape,
        Arch::Mlp {
            hidden: 8,
            latent: 4,
            activation: Activation::Gelu,
        },
        5,
        &mut params,
    )
    .unwrap();
    let mut c0 = Tensor::randn(vec![n, n], 1e-3, &mut rng);
    selfexpress::project_zero_diag(&mut c0);
    params.insert(C_PARAM, c0).unwrap();

    let mut bank = MemoryBank::zeros(n, 4);
    let all: Vec<usize> = (0..n).collect();
    bank.write_batch(&all, &Tensor::full(vec![n, 4], 0.5), 0, 0).unwrap();
    bank.mark_initialized();

    let aug = AugmentationSpec {
        crop_scale_range: (0.6, 0.9),
        hflip_prob: 1.0,
        grayscale_prob: 0.0,
        brightness_jitter: 0.3,
        seed: 9,
    };
    let batch = [1usize, 4];
    let mut tape = Tape::new();
    let c = tape.param(&params, C_PARAM).unwrap();
    clbdsc_forward(
        &mut tape, &mut model, &params, ParamMode::Trainable, c, &mut bank, &ds, &batch, &aug,
        1.0, 1.0, 0.5, true, 0, 0,
    )
    .unwrap();

    // recompute both views with the same parameters
    let mut clean_tape = Tape::new();
    let x = clean_tape.constant_owned(ds.stack_flat(&batch).unwrap());
    let z_clean = model
        .encode(&mut clean_tape, &params, x, Mode::Train, ParamMode::Frozen)
        .unwrap();
    let clean = clean_tape.value(z_clean).detached();

    let stored = bank.gather_rows(&batch).unwrap();
    assert_eq!(
        stored.data(),
        clean.data(),
        "bank must hold the clean-view encodings bit-exactly"
    );

    // and the augmented view differs (so the check is not vacuous)
    let mut aug_rng = subspace_lab::rng::rng_for(9, "augment", 0, batch[0] as u64);
    let x_aug = subspace_lab::contrastive::augment(ds.sample(batch[0]), &aug, &mut aug_rng).unwrap();
    assert_ne!(x_aug.data(), ds.sample(batch[0]).data());
    println!("ACCEPTANCE clbdsc clean-view bank: PASS — stored rows match encoder(X) exactly");
}

#[test]
#[ignore = "needs an ORL-format corpus; set SUBSPACE_LAB_ORL to the class_*/img_*.pgm root"]
fn criterion_orl_optional() {
    let root = match std::env::var("SUBSPACE_LAB_ORL") {
        Ok(v) => v,
        Err(_) => {
            println!("ACCEPTANCE orl (optional): SKIP — SUBSPACE_LAB_ORL not set");
            return;
        }
    };
    let mut cfg = RunConfig::default();
    cfg.method = Method::Bdsc;
    cfg.dataset = DatasetSpec::PgmDir {
        path: root,
        resize: Some((32, 32)),
    };
    cfg.arch = Arch::Conv {
        channels: vec![16, 32, 64],
        kernel: 3,
        stride: 2,
        activation: Activation::Gelu,
        batchnorm: true,
    };
    cfg.batch_size = 32;
    cfg.base_lr = 1e-4;
    cfg.lr_reference_k = 0; // fixed small rate, no rescaling
    cfg.c_lr = Some(1e-3);
    cfg.alpha = 50.0;
    cfg.beta = 1.0;
    cfg.pretrain_epochs = 100;
    cfg.finetune_epochs = 300;
    let run = full_pipeline(&cfg, None).unwrap();
    let acc = run.result.acc.unwrap();
    report(
        "orl (optional)",
        (acc - 0.888).abs() <= 0.07,
        &format!("acc {acc:.3} vs reported 0.888 +/- 0.07"),
    );
}
