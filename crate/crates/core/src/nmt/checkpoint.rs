use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::model::Seq2Seq;
use super::{ModelConfig, NmtError};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "drda-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedParam {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Versioned JSON container: config echo, the fingerprint of the BPE model
/// the data was segmented with, and every parameter in double precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub bpe_fingerprint: Option<u64>,
    params: Vec<NamedParam>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Seq2Seq<T>, bpe_fingerprint: Option<u64>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            bpe_fingerprint,
            params: model
                .param_names()
                .iter()
                .zip(model.params())
                .map(|(name, m)| NamedParam {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                    data: m.as_slice().iter().map(|x| x.as_f64()).collect(),
                })
                .collect(),
        }
    }

    pub fn to_model<T: Scalar>(&self) -> Result<Seq2Seq<T>, NmtError> {
        let named = self
            .params
            .iter()
            .map(|p| {
                if p.data.len() != p.rows * p.cols {
                    return Err(NmtError::Checkpoint(format!("{}: wrong data length", p.name)));
                }
                let data = p.data.iter().map(|&x| T::lit(x)).collect();
                Ok((p.name.clone(), Matrix::from_vec(p.rows, p.cols, data)))
            })
            .collect::<Result<_, _>>()?;
        Seq2Seq::from_params(self.config.clone(), named)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, NmtError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| NmtError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(NmtError::Checkpoint(format!(
                "unsupported container {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck)
    }

    /// Fails when the checkpoint was trained on data from another BPE model.
    pub fn check_bpe(&self, fingerprint: u64) -> Result<(), NmtError> {
        match self.bpe_fingerprint {
            Some(f) if f != fingerprint => Err(NmtError::Checkpoint(format!(
                "trained with BPE model {f:016x}, got {fingerprint:016x}"
            ))),
            _ => Ok(()),
        }
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<(), NmtError> {
    let path = path.as_ref();
    fs::write(path, checkpoint.to_json()).map_err(|source| NmtError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, NmtError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| NmtError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_json(&text)
}
