//! Encoder checkpoints as JSON. Floats use round-trip formatting, so a
//! checkpoint loads back bit for bit.

use std::path::Path;

use metricpad_core::encoder::{EncoderParameters, OptimizerState};
use metricpad_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{io, Error, Result};

pub const FORMAT: &str = "metricpad-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Epochs actually run; may be fewer than configured after early stopping.
    pub epochs_run: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub params: EncoderParameters,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn new(train: &TrainConfig, params: EncoderParameters, optimizer: OptimizerState, epochs_run: usize) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            input_dim: params.input_dim(),
            output_dim: params.output_dim(),
            epochs_run,
            seed: train.seed,
            train: train.clone(),
            params,
            optimizer,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Data(format!("checkpoint: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line() as u64,
            message: e.to_string(),
        })?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Data(format!(
                "{}: expected {FORMAT} version {VERSION}, found {} version {}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        ck.params.validate()?;
        if ck.params.input_dim() != ck.input_dim || ck.params.output_dim() != ck.output_dim {
            return Err(Error::Data(format!("{}: recorded dimensions disagree with the weights", path.display())));
        }
        Ok(ck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&io::read_to_string(path)?, path)
    }
}
