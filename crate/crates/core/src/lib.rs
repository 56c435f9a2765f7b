//! Decoding-time detoxification by contrasting a generator language model
//! with an attribute-tuned detoxifier in probability space.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod lm;
pub mod matrix;
pub mod metrics;
pub mod prob;
pub mod testbed;
pub mod tuning;
pub mod vocab;

pub use config::{Direction, SteeringConfig};
pub use error::{Error, Result};
pub use lm::{LanguageModel, NGramModel, NeuralWindowLM, PromptedModel, SoftPrompt};
pub use matrix::Matrix;
pub use prob::{clip01, normalize, softmax, ProbDist};
pub use vocab::{TokenId, TokenSeq, Vocabulary};
