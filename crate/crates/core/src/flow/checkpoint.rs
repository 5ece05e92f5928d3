//! JSON checkpoint container.
//!
//! ```json
//! {
//!   "format": "ldr-flow-checkpoint",
//!   "version": 1,
//!   "config": { "dim": 2, "layers": 15, "hidden": 160, "clamp": 4.0, "init_scale": 0.01 },
//!   "seed": 7,
//!   "n_params": 403230,
//!   "params": [ ... ]
//! }
//! ```
//!
//! `params` is the flat parameter vector in layer order; within a layer the
//! blocks are W1 (n_in×H), b1 (H), W2 (H×H), b2 (H), W3 (H×2·n_out), b3
//! (2·n_out), each row-major. The first `n_out` columns of the last layer are
//! raw scales, the remaining ones shifts. Values are written with shortest
//! round-trip formatting, so reloading is bit-exact for `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FlowConfig, FlowModel};
use crate::{Error, Result, Scalar};

pub const CHECKPOINT_FORMAT: &str = "ldr-flow-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: FlowConfig,
    pub seed: u64,
    pub n_params: usize,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &FlowModel<T>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            seed: model.seed(),
            n_params: model.n_params(),
            params: model.params().as_slice().iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn into_model<T: Scalar>(self) -> Result<FlowModel<T>> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        if self.n_params != self.params.len() {
            return Err(Error::Format(format!(
                "n_params {} does not match {} stored values",
                self.n_params,
                self.params.len()
            )));
        }
        let values = self.params.into_iter().map(T::lit).collect();
        FlowModel::from_parts(self.config, values, self.seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
