//! Single-document JSON checkpoints for every trainable artifact.
//!
//! All kinds share one envelope:
//! `{format_version, kind, vocab, hyperparameters, parameters}`, plus a
//! `backbone_fingerprint` for soft prompts. Matrices are stored as flat
//! row-major arrays whose shapes follow from the hyperparameters. Output is
//! canonical, so identical artifacts serialize to identical bytes.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{EventSpace, NGramModel, NeuralArch, NeuralWindowLM, SoftPrompt};
use crate::matrix::Matrix;
use crate::metrics::ProxyScorer;
use crate::vocab::{TokenId, Vocabulary};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Ngram,
    Neural,
    SoftPrompt,
    ProxyScorer,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Ngram => "ngram",
            Kind::Neural => "neural",
            Kind::SoftPrompt => "soft_prompt",
            Kind::ProxyScorer => "proxy_scorer",
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    format_version: u32,
    kind: Kind,
    vocab: Vocabulary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    backbone_fingerprint: Option<String>,
    hyperparameters: serde_json::Value,
    parameters: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NGramHyper {
    order: usize,
    add_k: f64,
    event_space: EventSpace,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NGramParams {
    counts: Vec<(Vec<TokenId>, TokenId, u64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NeuralParams {
    embeddings: Vec<f64>,
    null_prompt: Vec<f64>,
    hidden_w: Vec<f64>,
    hidden_b: Vec<f64>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptHyper {
    virtual_slots: usize,
    embed_dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptParams {
    embeddings: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScorerParams {
    weights: Vec<f64>,
    bias: f64,
}

/// A soft prompt together with the backbone it was tuned against.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptCheckpoint {
    pub vocab: Vocabulary,
    pub prompt: SoftPrompt,
    pub backbone_fingerprint: String,
}

impl PromptCheckpoint {
    pub fn new(prompt: SoftPrompt, backbone: &NeuralWindowLM) -> Result<Self> {
        backbone.check_prompt(&prompt)?;
        Ok(PromptCheckpoint {
            vocab: crate::LanguageModel::vocab(backbone).clone(),
            prompt,
            backbone_fingerprint: backbone.fingerprint(),
        })
    }

    /// Returns the prompt if `backbone` is the one it was tuned against.
    pub fn verify(self, backbone: &NeuralWindowLM) -> Result<SoftPrompt> {
        let found = backbone.fingerprint();
        if found != self.backbone_fingerprint {
            return Err(Error::FingerprintMismatch { expected: self.backbone_fingerprint, found });
        }
        backbone.check_prompt(&self.prompt)?;
        Ok(self.prompt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    NGram(NGramModel),
    Neural(NeuralWindowLM),
    SoftPrompt(PromptCheckpoint),
    ProxyScorer(ProxyScorer),
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn from_value<T: DeserializeOwned>(v: serde_json::Value, what: &str) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
}

fn matrix(rows: usize, cols: usize, data: Vec<f64>, name: &str) -> Result<Matrix> {
    Matrix::from_vec(rows, cols, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
}

impl Checkpoint {
    pub fn kind(&self) -> Kind {
        match self {
            Checkpoint::NGram(_) => Kind::Ngram,
            Checkpoint::Neural(_) => Kind::Neural,
            Checkpoint::SoftPrompt(_) => Kind::SoftPrompt,
            Checkpoint::ProxyScorer(_) => Kind::ProxyScorer,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        use crate::LanguageModel;
        match self {
            Checkpoint::NGram(m) => m.vocab(),
            Checkpoint::Neural(m) => m.vocab(),
            Checkpoint::SoftPrompt(p) => &p.vocab,
            Checkpoint::ProxyScorer(s) => s.vocab(),
        }
    }

    fn envelope(&self) -> Result<Envelope> {
        let (backbone_fingerprint, hyperparameters, parameters) = match self {
            Checkpoint::NGram(m) => {
                let hyper = NGramHyper { order: m.order(), add_k: m.add_k(), event_space: m.event_space().clone() };
                let counts = m.triples().map(|(c, t, n)| (c.to_vec(), t, n)).collect();
                (None, to_value(&hyper)?, to_value(&NGramParams { counts })?)
            }
            Checkpoint::Neural(m) => {
                let params = NeuralParams {
                    embeddings: m.embeddings().as_slice().to_vec(),
                    null_prompt: m.null_prompt().as_slice().to_vec(),
                    hidden_w: m.hidden_w().as_slice().to_vec(),
                    hidden_b: m.hidden_b().to_vec(),
                    out_w: m.out_w().as_slice().to_vec(),
                    out_b: m.out_b().to_vec(),
                };
                (None, to_value(&m.arch())?, to_value(&params)?)
            }
            Checkpoint::SoftPrompt(p) => {
                let (virtual_slots, embed_dim) = p.prompt.shape();
                let params = PromptParams { embeddings: p.prompt.embeddings().as_slice().to_vec() };
                (
                    Some(p.backbone_fingerprint.clone()),
                    to_value(&PromptHyper { virtual_slots, embed_dim })?,
                    to_value(&params)?,
                )
            }
            Checkpoint::ProxyScorer(s) => {
                let params = ScorerParams { weights: s.weights().to_vec(), bias: s.bias() };
                (None, serde_json::json!({}), to_value(&params)?)
            }
        };
        Ok(Envelope {
            format_version: FORMAT_VERSION,
            kind: self.kind(),
            vocab: self.vocab().clone(),
            backbone_fingerprint,
            hyperparameters,
            parameters,
        })
    }

    /// Canonical single-line JSON followed by a newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(&self.envelope()?)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if env.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                env.format_version
            )));
        }
        if env.backbone_fingerprint.is_some() != (env.kind == Kind::SoftPrompt) {
            return Err(Error::Checkpoint("backbone_fingerprint is required for, and only for, soft prompts".into()));
        }
        let vocab = env.vocab;
        match env.kind {
            Kind::Ngram => {
                let h: NGramHyper = from_value(env.hyperparameters, "ngram hyperparameters")?;
                let p: NGramParams = from_value(env.parameters, "ngram parameters")?;
                let m = NGramModel::from_triples(h.order, h.add_k, vocab, h.event_space, p.counts)?;
                Ok(Checkpoint::NGram(m))
            }
            Kind::Neural => {
                let a: NeuralArch = from_value(env.hyperparameters, "neural hyperparameters")?;
                let p: NeuralParams = from_value(env.parameters, "neural parameters")?;
                let (v, d, h) = (vocab.len(), a.embed_dim, a.hidden_dim);
                let m = NeuralWindowLM::from_parts(
                    vocab,
                    a,
                    matrix(v, d, p.embeddings, "embeddings")?,
                    matrix(a.virtual_slots, d, p.null_prompt, "null_prompt")?,
                    matrix(a.input_dim(), h, p.hidden_w, "hidden_w")?,
                    p.hidden_b,
                    matrix(h, v, p.out_w, "out_w")?,
                    p.out_b,
                )?;
                Ok(Checkpoint::Neural(m))
            }
            Kind::SoftPrompt => {
                let h: PromptHyper = from_value(env.hyperparameters, "soft prompt hyperparameters")?;
                let p: PromptParams = from_value(env.parameters, "soft prompt parameters")?;
                let prompt = SoftPrompt::new(matrix(h.virtual_slots, h.embed_dim, p.embeddings, "embeddings")?);
                let backbone_fingerprint = env.backbone_fingerprint.expect("checked above");
                Ok(Checkpoint::SoftPrompt(PromptCheckpoint { vocab, prompt, backbone_fingerprint }))
            }
            Kind::ProxyScorer => {
                let p: ScorerParams = from_value(env.parameters, "scorer parameters")?;
                Ok(Checkpoint::ProxyScorer(ProxyScorer::from_parts(vocab, p.weights, p.bias)?))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(format!("loading {}", path.display())))
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> Result<String> {
        Ok(Sha256::digest(self.to_json()?.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }

    fn wrong_kind(self, want: Kind) -> Error {
        Error::Checkpoint(format!("expected a {} checkpoint, found {}", want.name(), self.kind().name()))
    }

    pub fn into_ngram(self) -> Result<NGramModel> {
        match self {
            Checkpoint::NGram(m) => Ok(m),
            other => Err(other.wrong_kind(Kind::Ngram)),
        }
    }

    pub fn into_neural(self) -> Result<NeuralWindowLM> {
        match self {
            Checkpoint::Neural(m) => Ok(m),
            other => Err(other.wrong_kind(Kind::Neural)),
        }
    }

    pub fn into_soft_prompt(self) -> Result<PromptCheckpoint> {
        match self {
            Checkpoint::SoftPrompt(p) => Ok(p),
            other => Err(other.wrong_kind(Kind::SoftPrompt)),
        }
    }

    pub fn into_proxy_scorer(self) -> Result<ProxyScorer> {
        match self {
            Checkpoint::ProxyScorer(s) => Ok(s),
            other => Err(other.wrong_kind(Kind::ProxyScorer)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{NeuralArch, PretrainConfig};
    use crate::tuning::{init_soft_prompt, tune_detoxifier, InitMode, TuneConfig};
    use crate::vocab::TokenSeq;
    use crate::LanguageModel;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["a", "b", "c", "d"]).unwrap()
    }

    fn corpus() -> Vec<TokenSeq> {
        vec![TokenSeq(vec![3, 4, 5, 1]), TokenSeq(vec![4, 4, 6, 3, 1]), TokenSeq(vec![6, 5, 1])]
    }

    fn neural() -> NeuralWindowLM {
        let cfg = PretrainConfig {
            arch: NeuralArch { window: 2, virtual_slots: 3, embed_dim: 4, hidden_dim: 5 },
            epochs: 3,
            ..PretrainConfig::default()
        };
        NeuralWindowLM::pretrain(&corpus(), vocab(), &cfg).unwrap().0
    }

    fn roundtrip(c: &Checkpoint) -> Checkpoint {
        let text = c.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back.to_json().unwrap(), text);
        back
    }

    #[test]
    fn ngram_roundtrip_is_byte_stable() {
        let m = NGramModel::train(&corpus(), 3, 0.5, vocab()).unwrap();
        let c = Checkpoint::NGram(m.clone());
        assert_eq!(roundtrip(&c), c);
        let again = Checkpoint::NGram(NGramModel::train(&corpus(), 3, 0.5, vocab()).unwrap());
        assert_eq!(again.to_json().unwrap(), c.to_json().unwrap());
        let v: serde_json::Value = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        assert_eq!(v["kind"], "ngram");
        assert_eq!(v["parameters"]["counts"][0], serde_json::json!([[0, 0], 3, 1]));
    }

    #[test]
    fn neural_roundtrip_preserves_predictions() {
        let m = neural();
        let back = roundtrip(&Checkpoint::Neural(m.clone())).into_neural().unwrap();
        assert_eq!(back, m);
        assert_eq!(back.fingerprint(), m.fingerprint());
        assert_eq!(back.next_dist(&[3, 4]).probs(), m.next_dist(&[3, 4]).probs());
    }

    #[test]
    fn soft_prompt_fingerprint_is_enforced() {
        let m = neural();
        let prompt = init_soft_prompt(&m, 3, InitMode::Gaussian, 1).unwrap();
        let c = Checkpoint::SoftPrompt(PromptCheckpoint::new(prompt.clone(), &m).unwrap());
        let loaded = roundtrip(&c).into_soft_prompt().unwrap();
        assert_eq!(loaded.clone().verify(&m).unwrap(), prompt);
        let other = NeuralWindowLM::init(vocab(), m.arch(), 99).unwrap();
        assert!(matches!(loaded.verify(&other), Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn tuning_changes_only_the_prompt() {
        let m = neural();
        let before = Checkpoint::Neural(m.clone()).to_json().unwrap();
        let cfg = TuneConfig { steps: 20, batch_size: 4, ..TuneConfig::default() };
        let p0 = init_soft_prompt(&m, 3, InitMode::SampledVocab, cfg.seed).unwrap();
        let (p1, _) = tune_detoxifier(&m, &corpus(), &cfg).unwrap();
        assert_eq!(Checkpoint::Neural(m.clone()).to_json().unwrap(), before);
        let s0 = Checkpoint::SoftPrompt(PromptCheckpoint::new(p0, &m).unwrap()).to_json().unwrap();
        let s1 = Checkpoint::SoftPrompt(PromptCheckpoint::new(p1, &m).unwrap()).to_json().unwrap();
        assert_ne!(s0, s1);
    }

    #[test]
    fn proxy_scorer_roundtrip() {
        let s = ProxyScorer::from_parts(vocab(), vec![0.0, 0.5, -1.25, 2.0, 0.1, 1e-3, -7.0], 0.3).unwrap();
        assert_eq!(roundtrip(&Checkpoint::ProxyScorer(s.clone())).into_proxy_scorer().unwrap(), s);
    }

    #[test]
    fn rejects_bad_documents() {
        let m = NGramModel::train(&corpus(), 2, 0.5, vocab()).unwrap();
        let text = Checkpoint::NGram(m).to_json().unwrap();
        let bumped = text.replace("\"format_version\":1", "\"format_version\":9");
        assert!(matches!(Checkpoint::from_json(&bumped), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_json("{}"), Err(Error::Checkpoint(_))));
        let kind = Checkpoint::from_json(&text).unwrap().into_neural();
        assert!(matches!(kind, Err(Error::Checkpoint(m)) if m.contains("expected a neural")));
        let n = neural();
        let mut v: serde_json::Value = serde_json::from_str(&Checkpoint::Neural(n).to_json().unwrap()).unwrap();
        v["parameters"]["out_b"] = serde_json::json!([0.0]);
        assert!(Checkpoint::from_json(&v.to_string()).is_err());
    }
}
