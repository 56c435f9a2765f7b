//! The synthetic two-style testbed: corpora plus every trained component an
//! experiment needs, built deterministically from one config.

use serde::{Deserialize, Serialize};

use crate::data::{synth_two_style, SynthConfig, SynthData};
use crate::error::Result;
use crate::lm::NGramModel;
use crate::metrics::{train_proxy_scorer, ProxyScorer, ScorerTrainReport};
use crate::vocab::TokenSeq;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestbedConfig {
    pub synth: SynthConfig,
    pub generator_order: usize,
    pub detoxifier_order: usize,
    pub eval_order: usize,
    pub add_k: f64,
    pub scorer_lr: f64,
    pub scorer_epochs: usize,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        TestbedConfig {
            synth: SynthConfig::default(),
            generator_order: 2,
            detoxifier_order: 2,
            eval_order: 2,
            add_k: 0.1,
            scorer_lr: 1.0,
            scorer_epochs: 500,
        }
    }
}

impl TestbedConfig {
    pub fn with_seed(seed: u64) -> Self {
        let mut c = TestbedConfig::default();
        c.synth.seed = seed;
        c
    }
}

pub struct Testbed {
    pub data: SynthData,
    /// Trained on both styles.
    pub generator: NGramModel,
    /// Trained on the toxic style only.
    pub detoxifier: NGramModel,
    /// Trained on the held-out sequences of both styles.
    pub eval_lm: NGramModel,
    pub scorer: ProxyScorer,
    pub scorer_report: ScorerTrainReport,
}

/// Appends EOS to every sequence.
pub fn terminated(corpus: &[TokenSeq], eos: u32) -> Vec<TokenSeq> {
    corpus.iter().map(|s| s.with_eos(eos)).collect()
}

impl Testbed {
    pub fn build(config: &TestbedConfig) -> Result<Self> {
        let data = synth_two_style(&config.synth)?;
        let eos = data.vocab.eos();
        let toxic = terminated(&data.toxic, eos);
        let mixed: Vec<TokenSeq> = toxic.iter().cloned().chain(terminated(&data.clean, eos)).collect();
        let heldout: Vec<TokenSeq> =
            terminated(&data.heldout_toxic, eos).into_iter().chain(terminated(&data.heldout_clean, eos)).collect();
        let generator = NGramModel::train(&mixed, config.generator_order, config.add_k, data.vocab.clone())?;
        let detoxifier = NGramModel::train(&toxic, config.detoxifier_order, config.add_k, data.vocab.clone())?;
        let eval_lm = NGramModel::train(&heldout, config.eval_order, config.add_k, data.vocab.clone())?;
        let (scorer, scorer_report) =
            train_proxy_scorer(&data.labeled, &data.vocab, config.scorer_lr, config.scorer_epochs, config.synth.seed)?;
        Ok(Testbed { data, generator, detoxifier, eval_lm, scorer, scorer_report })
    }
}
