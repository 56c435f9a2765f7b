//! Next-token language models.
//!
//! Two backbones sit behind [`LanguageModel`]: a smoothed count-based
//! [`NGramModel`] and a fixed-window MLP ([`NeuralWindowLM`]) whose virtual
//! input slots can be filled by a trainable [`SoftPrompt`].

mod neural;
mod ngram;

use std::sync::Arc;

pub use neural::{
    next_token_pairs, NeuralArch, NeuralWindowLM, PretrainConfig, PretrainTrace, PromptedModel, SoftPrompt,
};
pub use ngram::{EventSpace, NGramModel, DEFAULT_ADD_K, DEFAULT_ORDER};

use crate::error::Result;
use crate::prob::ProbDist;
use crate::vocab::{TokenId, TokenSeq, Vocabulary};

/// A model that maps a context to a distribution over the next token.
///
/// `context` holds real tokens only; models supply their own BOS padding.
pub trait LanguageModel: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    fn next_dist(&self, context: &[TokenId]) -> ProbDist;

    /// Stable label used to name rows and columns in pairing experiments.
    fn size_label(&self) -> String;
}

impl<M: LanguageModel + ?Sized> LanguageModel for Arc<M> {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }

    fn next_dist(&self, context: &[TokenId]) -> ProbDist {
        (**self).next_dist(context)
    }

    fn size_label(&self) -> String {
        (**self).size_label()
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }

    fn next_dist(&self, context: &[TokenId]) -> ProbDist {
        (**self).next_dist(context)
    }

    fn size_label(&self) -> String {
        (**self).size_label()
    }
}

/// Σ_t ln P(seq[t] | seq[..t]).
pub fn sequence_logprob(model: &dyn LanguageModel, seq: &TokenSeq) -> Result<f64> {
    conditional_logprob(model, &[], seq)
}

/// Log-probability of `continuation` given `prefix`, scoring only the
/// continuation tokens.
pub fn conditional_logprob(model: &dyn LanguageModel, prefix: &[TokenId], continuation: &[TokenId]) -> Result<f64> {
    let vocab = model.vocab();
    let mut context: Vec<TokenId> = Vec::with_capacity(prefix.len() + continuation.len());
    context.extend_from_slice(prefix);
    let mut total = 0.0;
    for &tok in continuation {
        vocab.check(&TokenSeq(vec![tok]))?;
        total += model.next_dist(&context).get(tok as usize).ln();
        context.push(tok);
    }
    Ok(total)
}

/// Uniform distribution over a fixed support, regardless of context.
#[derive(Debug, Clone)]
pub struct UniformModel {
    vocab: Vocabulary,
    dist: ProbDist,
}

impl UniformModel {
    /// Uniform over every token except BOS.
    pub fn new(vocab: Vocabulary) -> Self {
        let support: Vec<usize> = (0..vocab.len()).filter(|&i| i != vocab.bos() as usize).collect();
        Self::over(vocab, &support)
    }

    pub fn over(vocab: Vocabulary, support: &[usize]) -> Self {
        let dist = ProbDist::uniform_over(vocab.len(), support);
        UniformModel { vocab, dist }
    }

    pub fn support_size(&self) -> usize {
        self.dist.iter().filter(|&&p| p > 0.0).count()
    }
}

impl LanguageModel for UniformModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_dist(&self, _context: &[TokenId]) -> ProbDist {
        self.dist.clone()
    }

    fn size_label(&self) -> String {
        format!("uniform-{}", self.support_size())
    }
}

/// BOS-padded window of the last `n` context tokens.
pub(crate) fn padded_window(context: &[TokenId], n: usize, bos: TokenId) -> Vec<TokenId> {
    let take = context.len().min(n);
    let mut window = vec![bos; n - take];
    window.extend_from_slice(&context[context.len() - take..]);
    window
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_sequence_logprob() {
        let vocab = Vocabulary::new(["a", "b"]).unwrap();
        // 4 effective tokens: eos, unk, a, b
        let m = UniformModel::new(vocab);
        let lp = sequence_logprob(&m, &TokenSeq(vec![3, 4, 3])).unwrap();
        assert!((lp - 3.0 * 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_token_uses_bos_context() {
        let vocab = Vocabulary::new(["a", "b", "c"]).unwrap();
        let corpus = vec![TokenSeq(vec![3, 4]), TokenSeq(vec![3, 5])];
        let m = NGramModel::train(&corpus, 2, 1.0, vocab).unwrap();
        let lp = sequence_logprob(&m, &TokenSeq(vec![3])).unwrap();
        assert!((lp - m.next_dist(&[]).get(3).ln()).abs() < 1e-15);
    }

    #[test]
    fn padded_window_shapes() {
        assert_eq!(padded_window(&[5, 6, 7], 2, 0), vec![6, 7]);
        assert_eq!(padded_window(&[5], 3, 0), vec![0, 0, 5]);
        assert_eq!(padded_window(&[], 0, 0), Vec::<TokenId>::new());
    }
}
