//! Versioned model snapshots.
//!
//! A checkpoint is a single JSON document: format version, training-phase
//! marker, the full [`ModelConfig`], catalog dimensions, the low-rank
//! wrapping state, an optional RNG snapshot (so interrupted training can
//! resume its dropout/shuffle streams), and every named parameter tensor.
//! Restoring rebuilds the parameter store in canonical order and validates
//! each tensor's shape against what the configuration demands, so a file
//! from a mismatched run fails loudly instead of producing a silently
//! wrong model.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{param_plan, ModelConfig, SeqRecModel};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;

/// One named tensor with its training status. The matrix carries its own
/// shape, which `restore` cross-checks against the model plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedTensor {
    pub value: Matrix,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Which training phase produced this snapshot (e.g. "pretrain-id",
    /// "posttrain-content", "end2end").
    pub stage: String,
    pub config: ModelConfig,
    pub num_items: usize,
    pub d_text_in: usize,
    pub d_image_in: usize,
    /// Base matrices wrapped with low-rank adapters, in wrap order.
    pub lora_targets: Vec<String>,
    /// Trainer RNG at save time; `None` for final artifacts.
    pub rng: Option<ChaCha8Rng>,
    pub params: BTreeMap<String, SavedTensor>,
}

impl Checkpoint {
    /// Snapshot a model. Cheap relative to training: one clone of every
    /// parameter value.
    pub fn capture(model: &SeqRecModel, stage: &str, rng: Option<ChaCha8Rng>) -> Self {
        let store = model.store();
        let params = store
            .ids()
            .map(|id| {
                let p = store.get(id);
                (
                    store.name(id).to_string(),
                    SavedTensor { value: p.value.clone(), trainable: p.trainable },
                )
            })
            .collect();
        let (d_text_in, d_image_in) = model.content_input_dims();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            stage: stage.to_string(),
            config: model.config().clone(),
            num_items: model.num_items(),
            d_text_in,
            d_image_in,
            lora_targets: model.lora_targets().to_vec(),
            rng,
            params,
        }
    }

    /// Rebuild the model this checkpoint describes. Every parameter the
    /// configuration implies must be present with the right shape, and no
    /// extras may remain.
    pub fn restore(&self) -> Result<SeqRecModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        self.config.validate()?;
        let mut expected: Vec<(String, usize, usize)> =
            param_plan(&self.config, self.num_items, self.d_text_in, self.d_image_in)
                .into_iter()
                .map(|e| (e.name, e.rows, e.cols))
                .collect();
        let base_count = expected.len();
        for target in &self.lora_targets {
            let Some((_, rows, cols)) = expected[..base_count]
                .iter()
                .find(|(name, _, _)| name == target)
                .cloned()
            else {
                return Err(Error::Config(format!(
                    "checkpoint wraps unknown matrix {target}"
                )));
            };
            // the saved factor shapes carry the actual rank; wrapping may
            // have used a rank other than the configured default
            let r = self
                .params
                .get(&format!("lora.{target}.a"))
                .map(|t| t.value.rows())
                .ok_or_else(|| {
                    Error::Config(format!(
                        "checkpoint wraps {target} but carries no factor lora.{target}.a"
                    ))
                })?;
            if r == 0 || r >= rows.min(cols) {
                return Err(Error::Config(format!(
                    "checkpoint wraps {target} but its rank {r} does not fit a {rows}x{cols} matrix"
                )));
            }
            expected.push((format!("lora.{target}.a"), r, cols));
            expected.push((format!("lora.{target}.b"), rows, r));
        }

        let mut store = ParamStore::new();
        for (name, rows, cols) in &expected {
            let Some(saved) = self.params.get(name) else {
                return Err(Error::Config(format!("checkpoint is missing parameter {name}")));
            };
            let m = &saved.value;
            if m.shape() != (*rows, *cols) || m.data().len() != rows * cols {
                return Err(Error::Config(format!(
                    "parameter {name} is {}x{} with {} entries, configuration needs {rows}x{cols}",
                    m.rows(),
                    m.cols(),
                    m.data().len()
                )));
            }
            store.add(name.clone(), m.clone(), saved.trainable);
        }
        if self.params.len() != expected.len() {
            let known: Vec<&String> = self
                .params
                .keys()
                .filter(|k| !expected.iter().any(|(name, _, _)| name == *k))
                .collect();
            return Err(Error::Config(format!(
                "checkpoint carries parameters the configuration does not define: {known:?}"
            )));
        }
        Ok(SeqRecModel::from_parts(
            self.config.clone(),
            self.num_items,
            self.d_text_in,
            self.d_image_in,
            store,
            self.lora_targets.clone(),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}
