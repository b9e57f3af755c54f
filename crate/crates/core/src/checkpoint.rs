//! Parameter checkpoints as a single JSON document:
//!
//! ```text
//! {
//!   "format": "morse-checkpoint",
//!   "version": 1,
//!   "model": { ModelConfig },
//!   "relation_labels": ["_hypernym", ...],
//!   "tensors": [ { "name": "relation_emb", "shape": [9, 32], "values": [...] }, ... ]
//! }
//! ```
//!
//! Tensors appear in the fixed order of `ModelParams::named_tensors`. Floats
//! are written in shortest round-trip form, so loading is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const FORMAT: &str = "morse-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    version: u32,
    model: ModelConfig,
    relation_labels: Vec<String>,
    tensors: Vec<NamedTensor>,
}

/// Trained parameters together with the relation vocabulary they index.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub relation_labels: Vec<String>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let doc = Document {
            format: FORMAT.into(),
            version: VERSION,
            model: self.params.config.clone(),
            relation_labels: self.relation_labels.clone(),
            tensors: self
                .params
                .named_tensors()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&doc).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if doc.format != FORMAT || doc.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                doc.format, doc.version
            )));
        }
        doc.model.validate()?;
        if doc.relation_labels.len() != doc.model.relation_count {
            return Err(Error::Checkpoint(format!(
                "{} relation labels for {} relations",
                doc.relation_labels.len(),
                doc.model.relation_count
            )));
        }
        let tensors = doc
            .tensors
            .into_iter()
            .map(|t| Ok((t.name, Tensor::new(t.shape, t.values).map_err(|e| Error::Checkpoint(e.to_string()))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            params: ModelParams::from_named(doc.model, tensors)?,
            relation_labels: doc.relation_labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Fail unless `labels` is exactly the vocabulary the parameters were trained on.
    pub fn check_relations(&self, labels: &[String]) -> Result<()> {
        if let Some(unknown) = labels.iter().find(|l| !self.relation_labels.contains(l)) {
            return Err(Error::UnknownRelation(unknown.clone()));
        }
        if labels != self.relation_labels.as_slice() {
            return Err(Error::Validation(
                "relation vocabulary order differs from the checkpoint".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::rng::seeded;
    use crate::scoring::ScoreKind;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig { num_bases: 2, ..ModelConfig::new(3, ScoreKind::RotatE) };
        Checkpoint {
            params: init_params(&cfg, &mut seeded(2)).unwrap(),
            relation_labels: vec!["a".into(), "b".into(), "c".into()],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        for ((_, a), (_, b)) in ck.params.named_tensors().iter().zip(back.params.named_tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupted_documents_are_rejected() {
        let json = sample().to_json().unwrap();
        assert!(Checkpoint::from_json(&json.replace("morse-checkpoint", "other")).is_err());
        assert!(Checkpoint::from_json(&json.replace("\"jk_matrix\"", "\"jk\"")).is_err());
        assert!(Checkpoint::from_json("{").is_err());
    }

    #[test]
    fn relation_vocabulary_is_checked() {
        let ck = sample();
        assert!(ck.check_relations(&ck.relation_labels.clone()).is_ok());
        let err = ck.check_relations(&["a".into(), "zz".into(), "c".into()]).unwrap_err();
        assert!(matches!(err, Error::UnknownRelation(ref l) if l == "zz"));
    }
}
