use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::Model;
use crate::error::Result;
use crate::tensor::ParamStore;

/// Scalar counts, in total and grouped by the first name segment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub groups: BTreeMap<String, usize>,
}

impl ParamCounts {
    pub fn group(&self, name: &str) -> usize {
        self.groups.get(name).copied().unwrap_or(0)
    }

    /// Backbone, adapter and fusion parameters: the part that differs
    /// between the shared and per-modality designs.
    pub fn fusion_path(&self) -> usize {
        self.group("backbone") + self.group("adapters") + self.group("fusion")
    }
}

pub fn count_parameters(store: &ParamStore) -> ParamCounts {
    let mut groups = BTreeMap::new();
    for (_, p) in store.iter() {
        let prefix = p.name.split('.').next().unwrap_or("").to_string();
        *groups.entry(prefix).or_insert(0) += p.value.numel();
    }
    ParamCounts {
        total: store.num_scalars(),
        groups,
    }
}

/// Shared-backbone model against the per-modality-backbone reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReduction {
    pub shared: ParamCounts,
    pub reference: ParamCounts,
    /// `shared.fusion_path() / reference.fusion_path()`
    pub ratio: f64,
    pub total_ratio: f64,
}

pub fn parameter_reduction(cfg: &TrainConfig) -> Result<ParamReduction> {
    let shared_cfg = TrainConfig {
        shared_backbone: true,
        ..cfg.clone()
    };
    let reference_cfg = TrainConfig {
        shared_backbone: false,
        ..cfg.clone()
    };
    let shared = count_parameters(&Model::new(&shared_cfg)?.store);
    let reference = count_parameters(&Model::new(&reference_cfg)?.store);
    Ok(ParamReduction {
        ratio: shared.fusion_path() as f64 / reference.fusion_path() as f64,
        total_ratio: shared.total as f64 / reference.total as f64,
        shared,
        reference,
    })
}
