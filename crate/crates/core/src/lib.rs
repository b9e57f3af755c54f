//! Inductive knowledge graph embedding through meta-knowledge transfer.
//!
//! An entity-independent embedding producer is meta-trained on tasks sampled
//! from a source knowledge graph and then applied, frozen or fine-tuned, to a
//! target graph whose entities were never seen during training. Entity
//! embeddings come from two pieces:
//!
//! * an entity initializer that averages learned relation-domain and
//!   relation-range vectors over each entity's outgoing and ingoing relations;
//! * a relational message-passing modulator (basis-decomposed R-GCN layers)
//!   whose per-layer states are concatenated and projected (jumping knowledge).
//!
//! Modules map onto the pipeline: [`kg`] loads and indexes graphs, [`tensor`]
//! is a small reverse-mode autodiff engine, [`sampler`] draws meta-training
//! tasks, [`model`] is the embedding producer, [`scoring`] holds the decoders and
//! the self-adversarial loss, [`train`] runs meta-training and fine-tuning, and
//! [`eval`] ranks test triples against sampled negatives.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod kg;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod sampler;
pub mod scoring;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use kg::{InductiveSplit, KnowledgeGraph, TargetData, Triple, Vocab};
pub use model::{EntityEmbeddings, ModelConfig, ModelParams, ModelVariant};
pub use scoring::{LossConfig, ScoreKind};
pub use tensor::{Tape, Tensor, TensorError, Var};
