//! Checkpointing: a directory of tensor files plus a JSON state record.
//! Save/load/continue reproduces the uninterrupted trajectory bit-exactly
//! because all randomness is derived statelessly from (seed, purpose,
//! epoch/step) and the counters are part of the state.

use super::{RunConfig, TrainSession};
use crate::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct CheckpointState {
    config: serde_json::Map<String, serde_json::Value>,
    param_names: Vec<String>,
    buffer_names: Vec<String>,
    has_bank: bool,
    pretrain_epoch: u64,
    finetune_epoch: u64,
    global_step: u64,
    batch_cursor: usize,
}

fn safe(name: &str) -> String {
    name.replace(['.', '/'], "_")
}

/// Writes parameters, batchnorm buffers, the bank, both optimizer states,
/// and the counters into `dir`.
pub fn save(dir: &Path, session: &TrainSession) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut param_names = Vec::new();
    for (name, t) in session.params.iter() {
        crate::data::save_tensor(&dir.join(format!("param_{}.sctd", safe(name))), t)?;
        param_names.push(name.to_string());
    }
    let mut buffer_names = Vec::new();
    for (name, t) in session.model.buffers() {
        crate::data::save_tensor(&dir.join(format!("buffer_{}.sctd", safe(name))), t)?;
        buffer_names.push(name.clone());
    }
    if let Some(bank) = &session.bank {
        bank.save(dir, "bank")?;
    }
    session.adam_net.save(dir, "adam_net")?;
    session.adam_c.save(dir, "adam_c")?;
    let state = CheckpointState {
        config: session.config.to_flat(),
        param_names,
        buffer_names,
        has_bank: session.bank.is_some(),
        pretrain_epoch: session.pretrain_epoch,
        finetune_epoch: session.finetune_epoch,
        global_step: session.global_step,
        batch_cursor: session.batch_cursor,
    };
    std::fs::write(
        dir.join("state.json"),
        serde_json::to_string_pretty(&state).expect("state serializes"),
    )?;
    Ok(())
}

/// Rebuilds a session from a checkpoint directory. The dataset is
/// regenerated/reloaded from the embedded config.
pub fn load(dir: &Path) -> Result<TrainSession> {
    let state_path = dir.join("state.json");
    let state: CheckpointState = serde_json::from_str(&std::fs::read_to_string(&state_path)?)
        .map_err(|e| Error::Parse {
            path: state_path.display().to_string(),
            offset: 0,
            msg: e.to_string(),
        })?;
    let config = RunConfig::from_flat(&state.config)?;
    let mut session = TrainSession::new(config)?;

    for name in &state.param_names {
        let t = crate::data::load_tensor(&dir.join(format!("param_{}.sctd", safe(name))))?;
        let slot = session.params.get_mut(name)?;
        if slot.shape() != t.shape() {
            return Err(Error::Dimension(format!(
                "checkpoint parameter {name:?} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(t.data());
        slot.grad = None;
    }
    for name in &state.buffer_names {
        let t = crate::data::load_tensor(&dir.join(format!("buffer_{}.sctd", safe(name))))?;
        session.model.set_buffer(name, t)?;
    }
    session.bank = if state.has_bank {
        Some(MemoryBank::load(dir, "bank")?)
    } else {
        None
    };
    session.adam_net = AdamState::load(dir, "adam_net")?;
    session.adam_c = AdamState::load(dir, "adam_c")?;
    session.pretrain_epoch = state.pretrain_epoch;
    session.finetune_epoch = state.finetune_epoch;
    session.global_step = state.global_step;
    session.batch_cursor = state.batch_cursor;
    Ok(session)
}
