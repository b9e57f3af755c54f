//! Run configuration: shipped defaults, optionally a budget preset, then a
//! TOML file, then command-line flags, each layer overriding the previous.

use std::path::Path;

use morse_core::eval::EvalProtocol;
use morse_core::model::ModelVariant;
use morse_core::sampler::SamplerConfig;
use morse_core::train::{TrainConfig, TrainRegime};
use morse_core::{LossConfig, ModelConfig, ScoreKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    #[default]
    Full,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub layers: usize,
    pub num_bases: usize,
    pub score_kind: ScoreKind,
    pub add_inverse_edges: bool,
    pub variant: ModelVariant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub task_pool_size: usize,
    pub validation_tasks: usize,
    pub regime: TrainRegime,
    pub whole_graph_queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub n_rw: usize,
    pub l_rw: usize,
    pub t_rw: usize,
    pub query_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub num_negatives: usize,
    pub repeats: usize,
    pub sides: morse_core::eval::Sides,
    pub hits_levels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub negatives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsitySection {
    pub keep_ratios: Vec<f64>,
}

/// Everything that determines a run's outputs. Paths and worker counts are
/// deliberately absent: they do not change results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub budget: Budget,
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossConfig,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
    pub finetune: FinetuneSection,
    pub sparsity: SparsitySection,
}

impl RunConfig {
    pub fn defaults(budget: Budget) -> Self {
        let train = match budget {
            Budget::Full => TrainConfig::default(),
            Budget::Desk => TrainConfig::desk(),
        };
        let ft = TrainConfig::finetune(0);
        let sampler = SamplerConfig::default();
        let protocol = EvalProtocol::default();
        let model = ModelConfig::new(1, ScoreKind::TransE);
        RunConfig {
            seed: 0,
            budget,
            model: ModelSection {
                dim: model.dim,
                layers: model.layers,
                num_bases: model.num_bases,
                score_kind: model.score_kind,
                add_inverse_edges: model.add_inverse_edges,
                variant: model.variant,
            },
            train: TrainSection {
                batch_size: train.batch_size,
                learning_rate: train.learning_rate,
                epochs: train.epochs,
                task_pool_size: train.task_pool_size,
                validation_tasks: train.validation_tasks,
                regime: train.regime,
                whole_graph_queries: train.whole_graph_queries,
            },
            loss: train.loss,
            sampler: SamplerSection {
                n_rw: sampler.n_rw,
                l_rw: sampler.l_rw,
                t_rw: sampler.t_rw,
                query_fraction: sampler.query_fraction,
            },
            eval: EvalSection {
                num_negatives: protocol.num_negatives,
                repeats: protocol.repeats,
                sides: protocol.sides,
                hits_levels: protocol.hits_levels,
            },
            finetune: FinetuneSection {
                epochs: ft.epochs,
                batch_size: ft.batch_size,
                learning_rate: ft.learning_rate,
                negatives: ft.loss.k,
            },
            sparsity: SparsitySection {
                keep_ratios: vec![1.0, 0.8, 0.6, 0.4, 0.2],
            },
        }
    }

    /// Defaults for the effective budget with the file's keys merged over them.
    /// A budget flag wins over the file's `budget` key.
    pub fn resolve(file: Option<&Path>, budget_flag: Option<Budget>) -> Result<Self, CliError> {
        let file_table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                let value: toml::Table =
                    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                Some(value)
            }
            None => None,
        };
        let budget = match (budget_flag, file_table.as_ref().and_then(|t| t.get("budget"))) {
            (Some(b), _) => b,
            (None, Some(v)) => v
                .clone()
                .try_into()
                .map_err(|e| CliError::Config(format!("budget: {e}")))?,
            (None, None) => Budget::Full,
        };
        let mut merged = toml::Table::try_from(Self::defaults(budget)).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(table) = file_table {
            merge(&mut merged, table);
        }
        merged.insert("budget".into(), toml::Value::try_from(budget).map_err(|e| CliError::Config(e.to_string()))?);
        toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_owned()))
    }

    pub fn model_config(&self, relation_count: usize) -> ModelConfig {
        ModelConfig {
            dim: self.model.dim,
            layers: self.model.layers,
            num_bases: self.model.num_bases,
            relation_count,
            score_kind: self.model.score_kind,
            add_inverse_edges: self.model.add_inverse_edges,
            variant: self.model.variant,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            task_pool_size: self.train.task_pool_size,
            validation_tasks: self.train.validation_tasks,
            loss: self.loss.clone(),
            sampler: self.sampler_config(),
            seed: self.seed,
            regime: self.train.regime,
            whole_graph_queries: self.train.whole_graph_queries,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            n_rw: self.sampler.n_rw,
            l_rw: self.sampler.l_rw,
            t_rw: self.sampler.t_rw,
            query_fraction: self.sampler.query_fraction,
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.finetune.batch_size,
            learning_rate: self.finetune.learning_rate,
            epochs: self.finetune.epochs,
            loss: LossConfig {
                k: self.finetune.negatives,
                ..self.loss.clone()
            },
            seed: self.seed,
            ..self.train_config()
        }
    }

    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol {
            num_negatives: self.eval.num_negatives,
            repeats: self.eval.repeats,
            sides: self.eval.sides,
            seed: self.seed,
            hits_levels: self.eval.hits_levels.clone(),
        }
    }

    /// Check every section against its owner's invariants. The basis count is
    /// checked against the relation count once the data is known.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut model = self.model_config(self.model.num_bases.max(1));
        model.relation_count = model.relation_count.max(1);
        model.validate()?;
        self.train_config().validate()?;
        let ft = self.finetune_config();
        if ft.batch_size == 0 || !(ft.learning_rate > 0.0) || ft.loss.k == 0 {
            return Err(CliError::Config(
                "finetune batch_size, learning_rate and negatives must be positive".into(),
            ));
        }
        self.protocol().validate()?;
        if self.sparsity.keep_ratios.is_empty() || self.sparsity.keep_ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(CliError::Config("keep_ratios must be non-empty and within (0, 1]".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_mirror_the_published_setup() {
        let c = RunConfig::defaults(Budget::Full);
        assert_eq!((c.model.dim, c.model.layers, c.model.num_bases), (32, 3, 4));
        assert_eq!((c.train.batch_size, c.train.epochs, c.train.task_pool_size), (64, 10, 10_000));
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!((c.loss.gamma, c.loss.k, c.loss.beta), (10.0, 32, 1.0));
        assert_eq!((c.sampler.n_rw, c.sampler.l_rw, c.sampler.t_rw), (10, 5, 10));
        assert_eq!((c.finetune.batch_size, c.finetune.learning_rate, c.finetune.negatives), (512, 0.001, 64));
        let d = RunConfig::defaults(Budget::Desk);
        assert_eq!((d.train.task_pool_size, d.train.epochs), (2_000, 3));
    }

    #[test]
    fn file_keys_override_defaults_and_budget_applies() {
        let f = file("budget = \"desk\"\nseed = 9\n[model]\nscore_kind = \"rotate\"\n[train]\nepochs = 5\n");
        let c = RunConfig::resolve(Some(f.path()), None).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.score_kind, ScoreKind::RotatE);
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.train.task_pool_size, 2_000);
        assert_eq!(c.model.dim, 32);
        let c = RunConfig::resolve(Some(f.path()), Some(Budget::Full)).unwrap();
        assert_eq!(c.train.task_pool_size, 10_000);
        assert_eq!(c.train.epochs, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = file("[model]\ndimension = 4\n");
        assert!(matches!(RunConfig::resolve(Some(f.path()), None), Err(CliError::Config(_))));
        let f = file("colour = 1\n");
        assert!(RunConfig::resolve(Some(f.path()), None).is_err());
    }

    #[test]
    fn invariants_are_checked_up_front() {
        let mut c = RunConfig::defaults(Budget::Full);
        c.model.score_kind = ScoreKind::RotatE;
        c.model.dim = 33;
        assert!(c.validate().is_err());
        let mut c = RunConfig::defaults(Budget::Full);
        c.train.task_pool_size = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::defaults(Budget::Full);
        c.sparsity.keep_ratios = vec![1.5];
        assert!(c.validate().is_err());
        assert!(RunConfig::defaults(Budget::Desk).validate().is_ok());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::defaults(Budget::Full);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
