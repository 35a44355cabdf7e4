//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Tensor};
use std::collections::BTreeMap;

/// Per-parameter first/second moment estimates plus the shared step count.
/// Default momentum parameters: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One Adam update over every parameter in `params`. Requires every
    /// parameter's gradient to be populated; gradients are cleared after
    /// the update.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        self.step_filtered(params, |_| true)
    }

    /// Adam update restricted to the parameters selected by `select`
    /// (optimizer groups, e.g. network weights vs the coefficient matrix).
    /// Unselected parameters and their gradients are untouched.
    pub fn step_filtered(
        &mut self,
        params: &mut ParameterSet,
        select: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, t) in params.iter() {
            if !select(name) {
                continue;
            }
            if t.grad.is_none() {
                return Err(Error::State(format!(
                    "adam_step: parameter {name:?} has no gradient"
                )));
            }
            if !self.moments.contains_key(name) {
                self.moments
                    .insert(name.to_string(), (vec![0.0; t.numel()], vec![0.0; t.numel()]));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, t) in params.iter_mut() {
            if !select(name) {
                continue;
            }
            let (m, v) = self.moments.get_mut(name).expect("inserted above");
            let grad = t.grad.take().expect("checked above");
            for ((p, g), (mi, vi)) in t
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Serializes the moment buffers into tensor files under `dir` with the
    /// given prefix, plus a tiny JSON sidecar for the scalars.
    pub fn save(&self, dir: &std::path::Path, prefix: &str) -> Result<()> {
        for (name, (m, v)) in &self.moments {
            let safe = name.replace(['.', '/'], "_");
            let mt = Tensor::new(vec![m.len()], m.clone())?;
            let vt = Tensor::new(vec![v.len()], v.clone())?;
            crate::data::save_tensor(&dir.join(format!("{prefix}_m_{safe}.sctd")), &mt)?;
            crate::data::save_tensor(&dir.join(format!("{prefix}_v_{safe}.sctd")), &vt)?;
        }
        let meta = serde_json::json!({
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "params": self.moments.keys().collect::<Vec<_>>(),
        });
        std::fs::write(
            dir.join(format!("{prefix}_meta.json")),
            serde_json::to_string_pretty(&meta).expect("static json"),
        )?;
        Ok(())
    }

    pub fn load(dir: &std::path::Path, prefix: &str) -> Result<Self> {
        let meta_path = dir.join(format!("{prefix}_meta.json"));
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&meta_path)?).map_err(|e| {
                Error::Parse {
                    path: meta_path.display().to_string(),
                    offset: 0,
                    msg: e.to_string(),
                }
            })?;
        let mut state = AdamState::new(meta["lr"].as_f64().unwrap_or(1e-3));
        state.beta1 = meta["beta1"].as_f64().unwrap_or(0.9);
        state.beta2 = meta["beta2"].as_f64().unwrap_or(0.999);
        state.eps = meta["eps"].as_f64().unwrap_or(1e-8);
        state.step = meta["step"].as_u64().unwrap_or(0);
        if let Some(names) = meta["params"].as_array() {
            for n in names {
                let name = n.as_str().unwrap_or_default().to_string();
                let safe = name.replace(['.', '/'], "_");
                let m = crate::data::load_tensor(&dir.join(format!("{prefix}_m_{safe}.sctd")))?;
                let v = crate::data::load_tensor(&dir.join(format!("{prefix}_v_{safe}.sctd")))?;
                state
                    .moments
                    .insert(name, (m.data().to_vec(), v.data().to_vec()));
            }
        }
        Ok(state)
    }
}
