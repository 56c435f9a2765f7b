use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{padded_window, LanguageModel};
use crate::error::{Error, Result};
use crate::prob::ProbDist;
use crate::vocab::{TokenId, TokenSeq, Vocabulary};

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_ADD_K: f64 = 0.5;

/// Which tokens an n-gram model can predict. Tokens outside the event space
/// always get probability zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSpace {
    /// Every token except BOS, which only ever appears as context.
    AllButBos,
    Explicit(Vec<TokenId>),
}

impl EventSpace {
    fn resolve(&self, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
        let ids = match self {
            EventSpace::AllButBos => (0..vocab.len() as TokenId).filter(|&i| i != vocab.bos()).collect(),
            EventSpace::Explicit(ids) => {
                let mut ids = ids.clone();
                ids.sort_unstable();
                ids.dedup();
                ids
            }
        };
        if ids.is_empty() {
            return Err(Error::InvalidConfig("event space is empty".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab.len()) {
            return Err(Error::TokenOutOfRange { id, size: vocab.len() });
        }
        Ok(ids)
    }
}

/// Add-k smoothed n-gram model.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    add_k: f64,
    vocab: Vocabulary,
    event_space: EventSpace,
    events: Vec<TokenId>,
    counts: BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>>,
    totals: HashMap<Vec<TokenId>, u64>,
}

impl NGramModel {
    /// Counts every length-`order` window of each sequence after left-padding
    /// it with `order - 1` BOS tokens.
    pub fn train(corpus: &[TokenSeq], order: usize, add_k: f64, vocab: Vocabulary) -> Result<Self> {
        Self::train_with_events(corpus, order, add_k, vocab, EventSpace::AllButBos)
    }

    pub fn train_with_events(
        corpus: &[TokenSeq],
        order: usize,
        add_k: f64,
        vocab: Vocabulary,
        event_space: EventSpace,
    ) -> Result<Self> {
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>> = BTreeMap::new();
        let ctx_len = order.saturating_sub(1);
        for seq in corpus {
            vocab.check(seq)?;
            let mut padded = vec![vocab.bos(); ctx_len];
            padded.extend_from_slice(seq);
            for window in padded.windows(ctx_len + 1) {
                let (ctx, tok) = window.split_at(ctx_len);
                *counts.entry(ctx.to_vec()).or_default().entry(tok[0]).or_default() += 1;
            }
        }
        Self::from_counts(order, add_k, vocab, event_space, counts)
    }

    /// Rebuilds a model from `(context, token, count)` triples.
    pub fn from_triples(
        order: usize,
        add_k: f64,
        vocab: Vocabulary,
        event_space: EventSpace,
        triples: impl IntoIterator<Item = (Vec<TokenId>, TokenId, u64)>,
    ) -> Result<Self> {
        let mut counts: BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>> = BTreeMap::new();
        for (ctx, tok, n) in triples {
            *counts.entry(ctx).or_default().entry(tok).or_default() += n;
        }
        Self::from_counts(order, add_k, vocab, event_space, counts)
    }

    fn from_counts(
        order: usize,
        add_k: f64,
        vocab: Vocabulary,
        event_space: EventSpace,
        counts: BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>>,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidConfig("n-gram order must be >= 1".into()));
        }
        if !(add_k > 0.0 && add_k.is_finite()) {
            return Err(Error::InvalidConfig(format!("add_k must be > 0, got {add_k}")));
        }
        let events = event_space.resolve(&vocab)?;
        let mut totals = HashMap::with_capacity(counts.len());
        for (ctx, row) in &counts {
            if ctx.len() != order - 1 {
                return Err(Error::InvalidConfig(format!("context of length {} in an order-{order} model", ctx.len())));
            }
            for &tok in row.keys() {
                if events.binary_search(&tok).is_err() {
                    let name = vocab.token(tok).unwrap_or("?");
                    return Err(Error::InvalidConfig(format!("observed token {name:?} outside the event space")));
                }
            }
            totals.insert(ctx.clone(), row.values().sum());
        }
        Ok(NGramModel { order, add_k, vocab, event_space, events, counts, totals })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn add_k(&self) -> f64 {
        self.add_k
    }

    pub fn event_space(&self) -> &EventSpace {
        &self.event_space
    }

    /// Number of predictable tokens (the smoothing denominator's `E`).
    pub fn event_count(&self) -> usize {
        self.events.len()
    }

    pub fn count(&self, context: &[TokenId], token: TokenId) -> u64 {
        self.counts.get(context).and_then(|row| row.get(&token)).copied().unwrap_or(0)
    }

    /// Counts in canonical order: contexts lexicographically, then token id.
    pub fn triples(&self) -> impl Iterator<Item = (&[TokenId], TokenId, u64)> + '_ {
        self.counts.iter().flat_map(|(ctx, row)| row.iter().map(move |(&tok, &n)| (ctx.as_slice(), tok, n)))
    }
}

impl LanguageModel for NGramModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_dist(&self, context: &[TokenId]) -> ProbDist {
        let ctx = padded_window(context, self.order - 1, self.vocab.bos());
        let mut probs = vec![0.0; self.vocab.len()];
        let e = self.events.len() as f64;
        match self.counts.get(&ctx) {
            Some(row) => {
                let denom = self.totals[&ctx] as f64 + self.add_k * e;
                for &tok in &self.events {
                    let c = row.get(&tok).copied().unwrap_or(0) as f64;
                    probs[tok as usize] = (c + self.add_k) / denom;
                }
            }
            None => {
                for &tok in &self.events {
                    probs[tok as usize] = 1.0 / e;
                }
            }
        }
        ProbDist::new(probs).expect("smoothed n-gram distribution is valid")
    }

    fn size_label(&self) -> String {
        format!("ngram-{}", self.order)
    }
}
