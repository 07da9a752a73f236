use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    Zero,
    ClosedForm,
    Trained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompensationMeta {
    /// Calibration instances (token positions) used for the closed-form solve.
    pub samples: usize,
    /// Number of averaged groups stacked into the least-squares system.
    pub v: usize,
    pub mode: InitMode,
    /// Layers that fell back to zero init, with the reason.
    pub warnings: Vec<String>,
}

/// One `d x d` matrix `W_c` per Softmax-reusing layer (keys are 1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct CompensationSet {
    entries: BTreeMap<usize, Matrix>,
    pub meta: CompensationMeta,
}

impl CompensationSet {
    /// Zero matrices for every compensated layer of `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let entries = config
            .compensated_layers()
            .into_iter()
            .map(|l| (l, Matrix::zeros(d, d)))
            .collect();
        Self {
            entries,
            meta: CompensationMeta { samples: 0, v: 0, mode: InitMode::Zero, warnings: Vec::new() },
        }
    }

    pub fn from_entries(entries: BTreeMap<usize, Matrix>, meta: CompensationMeta) -> Self {
        Self { entries, meta }
    }

    pub fn get(&self, layer: usize) -> Option<&Matrix> {
        self.entries.get(&layer)
    }

    pub fn insert(&mut self, layer: usize, wc: Matrix) {
        self.entries.insert(layer, wc);
    }

    pub fn entries(&self) -> &BTreeMap<usize, Matrix> {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&usize, &mut Matrix)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exactly one `d x d` entry per compensated layer of `config`, and nothing else.
    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        let want = config.compensated_layers();
        let have: Vec<usize> = self.entries.keys().copied().collect();
        if want != have {
            return Err(Error::Config(format!(
                "compensation covers layers {have:?}, variant needs {want:?}"
            )));
        }
        let d = config.d_model;
        if let Some((l, m)) = self.entries.iter().find(|(_, m)| m.shape() != (d, d)) {
            return Err(Error::Config(format!("W_c for layer {l} is {:?}, expected {d}x{d}", m.shape())));
        }
        Ok(())
    }
}
