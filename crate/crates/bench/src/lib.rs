//! Shared fixtures for the criterion benches.

use subspace_lab::data::{gen_union_of_subspaces, SynthSpec};
use subspace_lab::model::Arch;
use subspace_lab::trainer::{DatasetSpec, Method, RunConfig, TrainSession};

/// The desk-scale synthetic benchmark set (250 points, 5 subspaces).
pub fn bench_spec() -> SynthSpec {
    SynthSpec {
        n_subspaces: 5,
        subspace_dim: 4,
        ambient_dim: 30,
        points_per_subspace: 50,
        noise_sigma: 0.0,
        seed: 7,
    }
}

pub fn bench_dataset() -> subspace_lab::data::Dataset {
    gen_union_of_subspaces(&bench_spec()).expect("valid spec")
}

/// A ready-to-step BDSC session (pretrained 5 epochs, bank initialized).
pub fn bench_session() -> TrainSession {
    let mut cfg = RunConfig::default();
    cfg.method = Method::Bdsc;
    cfg.dataset = DatasetSpec::Synth(bench_spec());
    cfg.arch = Arch::Linear { latent: 20 };
    cfg.batch_size = 32;
    cfg.base_lr = 1e-3;
    cfg.c_lr = Some(1e-2);
    let mut session = TrainSession::new(cfg).expect("valid config");
    session.pretrain(5).expect("pretrain");
    session.init_bank().expect("bank");
    session
}
