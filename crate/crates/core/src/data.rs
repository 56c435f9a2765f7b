//! Corpus and prompt ingestion, plus the seeded synthetic two-style corpus
//! used by every experiment that must run without external datasets.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSeq, Vocabulary};

/// Whitespace tokenization with case folding; unknown words map to UNK.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSeq {
    text.split_whitespace().map(|w| vocab.id(&w.to_lowercase()).unwrap_or(vocab.unk())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedExample {
    pub text: String,
    /// Fraction of annotators who labelled the text toxic.
    pub toxic_fraction: f64,
}

/// Splits a `text,toxic_fraction` CSV into (toxic, nontoxic). A row is toxic
/// iff its fraction is strictly greater than `threshold`.
pub fn split_annotated(path: &Path, threshold: f64) -> Result<(Vec<AnnotatedExample>, Vec<AnnotatedExample>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    split_annotated_reader(file, threshold)
}

pub fn split_annotated_reader<R: std::io::Read>(
    reader: R,
    threshold: f64,
) -> Result<(Vec<AnnotatedExample>, Vec<AnnotatedExample>)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidConfig(format!("threshold must be in [0, 1], got {threshold}")));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::parse(1, e.to_string()))?;
    if headers.len() != 2 || &headers[0] != "text" || &headers[1] != "toxic_fraction" {
        return Err(Error::parse(1, format!("expected header `text,toxic_fraction`, found {headers:?}")));
    }
    let (mut toxic, mut clean) = (Vec::new(), Vec::new());
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != 2 {
            return Err(Error::parse(line, format!("expected 2 fields, found {}", row.len())));
        }
        let toxic_fraction: f64 = row[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(line, format!("toxic_fraction {:?} is not a number", &row[1])))?;
        if !(0.0..=1.0).contains(&toxic_fraction) {
            return Err(Error::parse(line, format!("toxic_fraction {toxic_fraction} outside [0, 1]")));
        }
        let ex = AnnotatedExample { text: row[0].to_owned(), toxic_fraction };
        if toxic_fraction > threshold {
            toxic.push(ex);
        } else {
            clean.push(ex);
        }
    }
    Ok((toxic, clean))
}

pub fn write_annotated(path: &Path, rows: &[AnnotatedExample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io_err = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["text", "toxic_fraction"]).map_err(io_err)?;
    for r in rows {
        w.write_record([r.text.as_str(), &r.toxic_fraction.to_string()]).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    #[serde(rename = "prompt")]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toxicity: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptSet {
    prompts: Vec<Prompt>,
}

impl PromptSet {
    pub fn new(prompts: Vec<Prompt>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, p) in prompts.iter().enumerate() {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::parse(i + 1, format!("duplicate prompt id {:?}", p.id)));
            }
        }
        Ok(PromptSet { prompts })
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Prompts whose annotation is at most `max_toxicity`; unannotated
    /// prompts are kept.
    pub fn filtered(&self, max_toxicity: f64) -> PromptSet {
        PromptSet {
            prompts: self.prompts.iter().filter(|p| p.toxicity.is_none_or(|t| t <= max_toxicity)).cloned().collect(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.prompts {
            out.push_str(&serde_json::to_string(p).expect("prompt serializes"));
            out.push('\n');
        }
        out
    }
}

/// Reads `{"id", "prompt", "toxicity"?}` lines, dropping prompts annotated
/// above `max_toxicity` when given. Blank lines are ignored.
pub fn read_prompts(path: &Path, max_toxicity: Option<f64>) -> Result<PromptSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_prompts(&text, max_toxicity)
}

pub fn parse_prompts(text: &str, max_toxicity: Option<f64>) -> Result<PromptSet> {
    let mut prompts = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prompt = serde_json::from_str(line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        if !seen.insert(p.id.clone()) {
            return Err(Error::parse(i + 1, format!("duplicate prompt id {:?}", p.id)));
        }
        if let Some(t) = p.toxicity {
            if !t.is_finite() {
                return Err(Error::parse(i + 1, "toxicity must be a finite number"));
            }
        }
        prompts.push(p);
    }
    let set = PromptSet { prompts };
    Ok(match max_toxicity {
        Some(t) => set.filtered(t),
        None => set,
    })
}

/// One sequence per non-empty line.
pub fn read_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<TokenSeq>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(|l| tokenize(l, vocab)).collect())
}

pub fn write_corpus(path: &Path, corpus: &[TokenSeq], vocab: &Vocabulary) -> Result<()> {
    let mut out = Vec::new();
    for seq in corpus {
        writeln!(out, "{}", vocab.decode(seq)).expect("writing to a Vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parameters of the synthetic two-style corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Number of ordinary words shared by both styles.
    pub base_vocab_size: usize,
    /// Number of marker words; they carry the attribute.
    pub marker_count: usize,
    /// Successors per word in the base Markov chain.
    pub branching: usize,
    pub toxic_marker_rate: f64,
    pub clean_marker_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub n_toxic: usize,
    pub n_clean: usize,
    /// Labeled examples per class for scorer training.
    pub n_labeled: usize,
    pub n_prompts: usize,
    pub prompt_len: usize,
    /// Held-out sequences per style, drawn after everything else.
    pub n_heldout: usize,
    /// Exponent applied to the base transition weights in the toxic style;
    /// 1 shares the clean chain, larger values concentrate toxic text on
    /// each word's most frequent successors.
    pub toxic_sharpness: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            base_vocab_size: 60,
            marker_count: 12,
            branching: 5,
            toxic_marker_rate: 0.30,
            clean_marker_rate: 0.02,
            min_len: 8,
            max_len: 20,
            n_toxic: 2000,
            n_clean: 2000,
            n_labeled: 500,
            n_prompts: 200,
            prompt_len: 4,
            n_heldout: 2000,
            toxic_sharpness: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if self.base_vocab_size < 2 || self.marker_count < 1 {
            return bad("need at least 2 base words and 1 marker");
        }
        if self.branching == 0 || self.branching > self.base_vocab_size {
            return bad("branching must be in 1..=base_vocab_size");
        }
        let rate_ok = |r: f64| r > 0.0 && r < 1.0;
        if !rate_ok(self.toxic_marker_rate) || !(0.0..1.0).contains(&self.clean_marker_rate) {
            return bad("marker rates must lie in (0, 1)");
        }
        if self.toxic_marker_rate <= self.clean_marker_rate {
            return bad("toxic marker rate must exceed the clean marker rate");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if self.prompt_len == 0 || self.prompt_len > self.min_len {
            return bad("need 1 <= prompt_len <= min_len");
        }
        if !(self.toxic_sharpness.is_finite() && self.toxic_sharpness > 0.0) {
            return bad("toxic_sharpness must be positive");
        }
        Ok(())
    }
}

/// Output of [`synth_two_style`]. Corpus sequences do not carry EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub vocab: Vocabulary,
    pub markers: Vec<TokenId>,
    pub toxic: Vec<TokenSeq>,
    pub clean: Vec<TokenSeq>,
    /// `(sequence, is_toxic)`, alternating classes.
    pub labeled: Vec<(TokenSeq, bool)>,
    pub prompts: PromptSet,
    pub heldout_toxic: Vec<TokenSeq>,
    pub heldout_clean: Vec<TokenSeq>,
}

impl SynthData {
    pub fn is_marker(&self, id: TokenId) -> bool {
        self.markers.binary_search(&id).is_ok()
    }

    /// Fraction of tokens in `corpus` that are markers.
    pub fn marker_frequency(&self, corpus: &[TokenSeq]) -> f64 {
        let total: usize = corpus.iter().map(|s| s.len()).sum();
        let markers: usize = corpus.iter().map(|s| s.iter().filter(|&&t| self.is_marker(t)).count()).sum();
        markers as f64 / total as f64
    }
}

/// Order-1 Markov chain over base words with per-style transition tables.
struct Chain {
    base: Vec<TokenId>,
    markers: Vec<TokenId>,
    /// Per base-word index: successor indices.
    successors: Vec<Vec<usize>>,
    /// Per base-word index: cumulative successor weights, for each style.
    clean_cum: Vec<Vec<f64>>,
    toxic_cum: Vec<Vec<f64>>,
}

#[derive(Clone, Copy)]
enum Style {
    Toxic,
    Clean,
}

fn cumulative(weights: &[f64], power: f64) -> Vec<f64> {
    let w: Vec<f64> = weights.iter().map(|x| x.powf(power)).collect();
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    w.iter()
        .map(|x| {
            acc += x / total;
            acc
        })
        .collect()
}

impl Chain {
    fn build(base: Vec<TokenId>, markers: Vec<TokenId>, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = base.len();
        let all: Vec<usize> = (0..n).collect();
        let (mut successors, mut clean_cum, mut toxic_cum) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            successors.push(all.choose_multiple(rng, config.branching).copied().collect());
            let weights: Vec<f64> = (0..config.branching).map(|_| rng.random_range(0.2..1.0)).collect();
            clean_cum.push(cumulative(&weights, 1.0));
            toxic_cum.push(cumulative(&weights, config.toxic_sharpness));
        }
        Chain { base, markers, successors, clean_cum, toxic_cum }
    }

    fn next_base(&self, prev: Option<usize>, style: Style, rng: &mut ChaCha8Rng) -> usize {
        match prev {
            None => rng.random_range(0..self.base.len()),
            Some(p) => {
                let cum = match style {
                    Style::Toxic => &self.toxic_cum[p],
                    Style::Clean => &self.clean_cum[p],
                };
                let u: f64 = rng.random();
                let slot = cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1);
                self.successors[p][slot]
            }
        }
    }

    fn sample(&self, style: Style, marker_rate: f64, len: usize, rng: &mut ChaCha8Rng) -> TokenSeq {
        let mut prev = None;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            if rng.random_bool(marker_rate) {
                out.push(*self.markers.choose(rng).expect("markers non-empty"));
            } else {
                let next = self.next_base(prev, style, rng);
                out.push(self.base[next]);
                prev = Some(next);
            }
        }
        TokenSeq(out)
    }
}

/// Generates toxic-style and clean-style corpora over a shared base Markov
/// chain. The styles differ in how often marker words replace base words
/// and, when `toxic_sharpness != 1`, in the weighting of each word's
/// successors. Output is fully determined by `config`.
pub fn synth_two_style(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let words = (0..config.base_vocab_size)
        .map(|i| format!("w{i:03}"))
        .chain((0..config.marker_count).map(|i| format!("tox{i:02}")));
    let vocab = Vocabulary::new(words)?;
    let base: Vec<TokenId> = (0..config.base_vocab_size).map(|i| 3 + i as TokenId).collect();
    let markers: Vec<TokenId> = (0..config.marker_count).map(|i| (3 + config.base_vocab_size + i) as TokenId).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let chain = Chain::build(base, markers.clone(), config, &mut rng);
    let draw = |style: Style, n: usize, rng: &mut ChaCha8Rng| -> Vec<TokenSeq> {
        let rate = match style {
            Style::Toxic => config.toxic_marker_rate,
            Style::Clean => config.clean_marker_rate,
        };
        (0..n)
            .map(|_| {
                let len = rng.random_range(config.min_len..=config.max_len);
                chain.sample(style, rate, len, rng)
            })
            .collect()
    };
    let toxic = draw(Style::Toxic, config.n_toxic, &mut rng);
    let clean = draw(Style::Clean, config.n_clean, &mut rng);
    let lab_toxic = draw(Style::Toxic, config.n_labeled, &mut rng);
    let lab_clean = draw(Style::Clean, config.n_labeled, &mut rng);
    let labeled = lab_toxic.into_iter().zip(lab_clean).flat_map(|(t, c)| [(t, true), (c, false)]).collect();
    let prompt_src = draw(Style::Clean, config.n_prompts, &mut rng);
    let prompts = prompt_src
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let ids = &seq[..config.prompt_len];
            let marked = ids.iter().filter(|t| markers.binary_search(t).is_ok()).count();
            Prompt { id: format!("p{i:05}"), text: vocab.decode(ids), toxicity: Some(marked as f64 / ids.len() as f64) }
        })
        .collect();
    let heldout_toxic = draw(Style::Toxic, config.n_heldout, &mut rng);
    let heldout_clean = draw(Style::Clean, config.n_heldout, &mut rng);
    Ok(SynthData {
        vocab,
        markers,
        toxic,
        clean,
        labeled,
        prompts: PromptSet::new(prompts)?,
        heldout_toxic,
        heldout_clean,
    })
}
