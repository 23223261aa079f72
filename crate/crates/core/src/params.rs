//! Optimizer groups for named parameter tensors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    /// Attention, MLP, embeddings, norms and head.
    Backbone,
    /// Memory table entries.
    Table,
    /// Key/value projections, their biases and conv kernels.
    Readout,
    /// Discretization projections.
    Codec,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Table => "table",
            ParamGroup::Readout => "readout",
            ParamGroup::Codec => "codec",
        }
    }
}

/// Parameter totals per group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub table: usize,
    pub readout: usize,
    pub codec: usize,
}

impl ParamCounts {
    pub fn add(&mut self, group: ParamGroup, n: usize) {
        match group {
            ParamGroup::Backbone => self.backbone += n,
            ParamGroup::Table => self.table += n,
            ParamGroup::Readout => self.readout += n,
            ParamGroup::Codec => self.codec += n,
        }
    }

    pub fn total(&self) -> usize {
        self.backbone + self.table + self.readout + self.codec
    }

    /// Parameters touched per token: everything except table rows.
    pub fn dense(&self) -> usize {
        self.backbone + self.readout + self.codec
    }
}
