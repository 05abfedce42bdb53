//! Adversarial word substitution for text classifiers.
//!
//! An additive perturbation on the input embeddings is optimized against a
//! margin objective, and every perturbed embedding is projected back onto a
//! token drawn from a per-position search space. Search spaces come from
//! typo edits, a synonym knowledge base, and a contextual embedding index.

pub mod attack;
pub mod campaign;
pub mod classifier;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod optim;
pub mod perturb;
pub mod synth;
pub mod vocab;

pub use attack::{run_attack, AttackConfig, AttackResult, Goal};
pub use campaign::{audit_spaces, run_campaign, CampaignConfig, CampaignOutput};
pub use classifier::{ClassifierModel, ModelShape, TrainConfig};
pub use corpus::{Corpus, Sentence, SideVectors, Tokenizer};
pub use error::{Error, Result};
pub use evaluation::{evaluate, transfer_eval, AdvDataset, AdvRecord, MetricsReport};
pub use perturb::{PerturbFn, SearchSpace, SpaceBuilder};
pub use vocab::{ContextualIndex, EmbeddingMatrix, Norm, Vocabulary};
