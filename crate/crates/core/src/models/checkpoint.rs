use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelKind, ModelSpec};
use crate::autodiff::{ParamStore, Tensor};
use crate::dataset::{FeatureSchema, NormalizationStats};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    /// Row-major.
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    #[serde(default)]
    pub config: serde_json::Value,
}

/// On-disk JSON form of a trained model together with everything needed
/// to preprocess raw rows the way training did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub spec: ModelSpec,
    pub schema_fingerprint: String,
    /// Abbreviations of the input columns, in input order.
    pub input_features: Vec<String>,
    pub normalization_stats: NormalizationStats,
    pub parameters: BTreeMap<String, NamedArray>,
    pub training: TrainingMeta,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(model: &Model, schema: &FeatureSchema, stats: &NormalizationStats, training: TrainingMeta) -> Self {
        let parameters = model
            .params()
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    NamedArray {
                        shape: p.value.shape().to_vec(),
                        data: p.value.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_kind: model.kind(),
            spec: model.spec().clone(),
            schema_fingerprint: schema.fingerprint(),
            input_features: model
                .spec()
                .features
                .iter()
                .map(|&j| schema.get(j).abbrev.clone())
                .collect(),
            normalization_stats: stats.clone(),
            parameters,
            training,
            extra: BTreeMap::new(),
        }
    }

    /// Rebuilds the model, verifying every array against the shape the spec
    /// implies.
    pub fn model(&self) -> Result<Model> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Compat(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.spec.kind() != self.model_kind {
            return Err(Error::Compat("model_kind disagrees with spec".into()));
        }
        let mut store = ParamStore::new();
        for (name, arr) in &self.parameters {
            let t = Tensor::new(arr.shape.clone(), arr.data.clone())
                .map_err(|e| Error::Compat(format!("parameter {name}: {e}")))?;
            if !t.is_finite() {
                return Err(Error::Compat(format!("parameter {name} has non-finite entries")));
            }
            store.insert(name.clone(), t)?;
        }
        Model::from_parts(self.spec.clone(), store)
    }

    pub fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        if schema.fingerprint() != self.schema_fingerprint {
            return Err(Error::Compat(format!(
                "schema fingerprint {} does not match checkpoint {}",
                schema.fingerprint(),
                self.schema_fingerprint
            )));
        }
        if self.normalization_stats.features.len() != schema.len() {
            return Err(Error::Compat("normalization stats do not cover the schema".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Compat(format!("unreadable checkpoint: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}
