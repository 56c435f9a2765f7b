use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{padded_window, LanguageModel};
use crate::error::{Error, Result};
use crate::matrix::{mat_vec, vec_mat, Matrix};
use crate::prob::{log_sum_exp, softmax, ProbDist};
use crate::vocab::{TokenId, TokenSeq, Vocabulary};

/// A loss this many times the first batch's loss counts as divergence.
const DIVERGENCE_FACTOR: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuralArch {
    /// Number of real-token context slots.
    pub window: usize,
    /// Number of virtual-token slots placed before the real tokens.
    pub virtual_slots: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for NeuralArch {
    fn default() -> Self {
        NeuralArch { window: 6, virtual_slots: 8, embed_dim: 16, hidden_dim: 32 }
    }
}

impl NeuralArch {
    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig(format!("window, embed_dim and hidden_dim must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        (self.window + self.virtual_slots) * self.embed_dim
    }
}

/// Virtual-token embeddings: `virtual_slots × embed_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftPrompt {
    embeddings: Matrix,
}

impl SoftPrompt {
    pub fn new(embeddings: Matrix) -> Self {
        SoftPrompt { embeddings }
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Matrix {
        &mut self.embeddings
    }

    pub fn shape(&self) -> (usize, usize) {
        self.embeddings.shape()
    }
}

/// Fixed-window MLP language model.
///
/// Input is `[virtual slots ∥ embeddings of the last W tokens]`, followed by a
/// tanh hidden layer and a linear output layer. Without a soft prompt the
/// virtual slots hold a null embedding learned during pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralWindowLM {
    pub(crate) arch: NeuralArch,
    pub(crate) vocab: Vocabulary,
    pub(crate) embeddings: Matrix,
    pub(crate) null_prompt: Matrix,
    pub(crate) hidden_w: Matrix,
    pub(crate) hidden_b: Vec<f64>,
    pub(crate) out_w: Matrix,
    pub(crate) out_b: Vec<f64>,
}

/// Intermediate values of one forward pass.
pub(crate) struct Activations {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub arch: NeuralArch,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { arch: NeuralArch::default(), epochs: 20, lr: 0.1, batch_size: 16, seed: 0 }
    }
}

/// Mean cross-entropy over the whole corpus before training and after each
/// epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainTrace {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

impl PretrainTrace {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

struct Grads {
    embeddings: Matrix,
    null_prompt: Matrix,
    hidden_w: Matrix,
    hidden_b: Vec<f64>,
    out_w: Matrix,
    out_b: Vec<f64>,
}

impl Grads {
    fn zeros(m: &NeuralWindowLM) -> Self {
        Grads {
            embeddings: Matrix::zeros(m.embeddings.rows(), m.embeddings.cols()),
            null_prompt: Matrix::zeros(m.null_prompt.rows(), m.null_prompt.cols()),
            hidden_w: Matrix::zeros(m.hidden_w.rows(), m.hidden_w.cols()),
            hidden_b: vec![0.0; m.hidden_b.len()],
            out_w: Matrix::zeros(m.out_w.rows(), m.out_w.cols()),
            out_b: vec![0.0; m.out_b.len()],
        }
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// (context, target) pairs for every position of every sequence.
pub fn next_token_pairs(corpus: &[TokenSeq]) -> Vec<(Vec<TokenId>, TokenId)> {
    let mut pairs = Vec::new();
    for seq in corpus {
        for i in 0..seq.len() {
            pairs.push((seq[..i].to_vec(), seq[i]));
        }
    }
    pairs
}

impl NeuralWindowLM {
    /// Deterministic random initialization.
    pub fn init(vocab: Vocabulary, arch: NeuralArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = vocab.len();
        let (d, h) = (arch.embed_dim, arch.hidden_dim);
        let embeddings = gaussian(v, d, 0.5, &mut rng);
        let null_prompt = gaussian(arch.virtual_slots, d, 0.5, &mut rng);
        let hidden_w = gaussian(arch.input_dim(), h, 1.0 / (arch.input_dim() as f64).sqrt(), &mut rng);
        let out_w = gaussian(h, v, 1.0 / (h as f64).sqrt(), &mut rng);
        Ok(NeuralWindowLM {
            arch,
            vocab,
            embeddings,
            null_prompt,
            hidden_w,
            hidden_b: vec![0.0; h],
            out_w,
            out_b: vec![0.0; v],
        })
    }

    /// Assembles a model from explicit parameters, checking every shape.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        vocab: Vocabulary,
        arch: NeuralArch,
        embeddings: Matrix,
        null_prompt: Matrix,
        hidden_w: Matrix,
        hidden_b: Vec<f64>,
        out_w: Matrix,
        out_b: Vec<f64>,
    ) -> Result<Self> {
        arch.validate()?;
        let v = vocab.len();
        let (d, h) = (arch.embed_dim, arch.hidden_dim);
        let expect = |name: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(Error::ShapeMismatch {
                    expected: format!("{name} {}x{}", want.0, want.1),
                    got: format!("{}x{}", got.0, got.1),
                })
            }
        };
        expect("embeddings", embeddings.shape(), (v, d))?;
        expect("null_prompt", null_prompt.shape(), (arch.virtual_slots, d))?;
        expect("hidden_w", hidden_w.shape(), (arch.input_dim(), h))?;
        expect("hidden_b", (1, hidden_b.len()), (1, h))?;
        expect("out_w", out_w.shape(), (h, v))?;
        expect("out_b", (1, out_b.len()), (1, v))?;
        Ok(NeuralWindowLM { arch, vocab, embeddings, null_prompt, hidden_w, hidden_b, out_w, out_b })
    }

    /// Next-token cross-entropy training of every parameter, including the
    /// null virtual-slot embedding. The returned model is treated as frozen.
    pub fn pretrain(corpus: &[TokenSeq], vocab: Vocabulary, config: &PretrainConfig) -> Result<(Self, PretrainTrace)> {
        if !(config.lr >= 0.0 && config.lr.is_finite()) || config.batch_size == 0 {
            return Err(Error::InvalidConfig("pretraining needs lr >= 0 and batch_size >= 1".into()));
        }
        for seq in corpus {
            vocab.check(seq)?;
        }
        let mut pairs = next_token_pairs(corpus);
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut model = Self::init(vocab, config.arch, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_7a41);
        let initial_loss = model.corpus_loss(&pairs);
        let limit = DIVERGENCE_FACTOR * initial_loss.max(1.0);
        let mut epoch_losses = Vec::with_capacity(config.epochs);
        let mut grads = Grads::zeros(&model);
        let mut step = 0;
        for _ in 0..config.epochs {
            pairs.shuffle(&mut rng);
            for batch in pairs.chunks(config.batch_size) {
                let loss = model.accumulate_grads(batch, &mut grads);
                if !loss.is_finite() || loss > limit {
                    return Err(Error::DivergedLoss { step, loss });
                }
                model.apply(&grads, config.lr / batch.len() as f64);
                step += 1;
            }
            let loss = model.corpus_loss(&pairs);
            if !loss.is_finite() || loss > limit {
                return Err(Error::DivergedLoss { step, loss });
            }
            epoch_losses.push(loss);
        }
        Ok((model, PretrainTrace { initial_loss, epoch_losses }))
    }

    pub fn arch(&self) -> NeuralArch {
        self.arch
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn null_prompt(&self) -> &Matrix {
        &self.null_prompt
    }

    pub fn hidden_w(&self) -> &Matrix {
        &self.hidden_w
    }

    pub fn hidden_b(&self) -> &[f64] {
        &self.hidden_b
    }

    pub fn out_w(&self) -> &Matrix {
        &self.out_w
    }

    pub fn out_b(&self) -> &[f64] {
        &self.out_b
    }

    pub fn check_prompt(&self, prompt: &SoftPrompt) -> Result<()> {
        let want = (self.arch.virtual_slots, self.arch.embed_dim);
        if prompt.shape() == want {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: format!("soft prompt {}x{}", want.0, want.1),
                got: format!("{}x{}", prompt.shape().0, prompt.shape().1),
            })
        }
    }

    /// Next-token distribution with the virtual slots filled by `prompt`, or
    /// by the null embedding when absent.
    pub fn next_dist_with(&self, context: &[TokenId], prompt: Option<&SoftPrompt>) -> Result<ProbDist> {
        let slots = match prompt {
            Some(p) => {
                self.check_prompt(p)?;
                p.embeddings()
            }
            None => &self.null_prompt,
        };
        let acts = self.forward(context, slots);
        Ok(softmax(&acts.logits))
    }

    pub(crate) fn input_vector(&self, context: &[TokenId], slots: &Matrix) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.arch.input_dim());
        input.extend_from_slice(slots.as_slice());
        for tok in padded_window(context, self.arch.window, self.vocab.bos()) {
            input.extend_from_slice(self.embeddings.row(tok as usize));
        }
        input
    }

    pub(crate) fn forward(&self, context: &[TokenId], slots: &Matrix) -> Activations {
        let input = self.input_vector(context, slots);
        let mut hidden = vec![0.0; self.arch.hidden_dim];
        vec_mat(&input, &self.hidden_w, &self.hidden_b, &mut hidden);
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        let mut logits = vec![0.0; self.vocab.len()];
        vec_mat(&hidden, &self.out_w, &self.out_b, &mut logits);
        Activations { input, hidden, logits }
    }

    /// Cross-entropy of one target plus the gradient of that loss with
    /// respect to the full input vector, and the intermediate deltas.
    pub(crate) fn backward_to_input(&self, acts: &Activations, target: TokenId) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
        let loss = log_sum_exp(&acts.logits) - acts.logits[target as usize];
        let mut d_logits = softmax(&acts.logits).into_vec();
        d_logits[target as usize] -= 1.0;
        let mut d_pre = vec![0.0; self.arch.hidden_dim];
        mat_vec(&self.out_w, &d_logits, &mut d_pre);
        for (dp, h) in d_pre.iter_mut().zip(&acts.hidden) {
            *dp *= 1.0 - h * h;
        }
        let mut d_input = vec![0.0; self.arch.input_dim()];
        mat_vec(&self.hidden_w, &d_pre, &mut d_input);
        (loss, d_input, d_pre, d_logits)
    }

    fn accumulate_grads(&self, batch: &[(Vec<TokenId>, TokenId)], g: &mut Grads) -> f64 {
        *g = Grads::zeros(self);
        let d = self.arch.embed_dim;
        let m = self.arch.virtual_slots;
        let mut total = 0.0;
        for (ctx, target) in batch {
            let acts = self.forward(ctx, &self.null_prompt);
            let (loss, d_input, d_pre, d_logits) = self.backward_to_input(&acts, *target);
            total += loss;
            for (r, &h) in acts.hidden.iter().enumerate() {
                for (gw, dz) in g.out_w.row_mut(r).iter_mut().zip(&d_logits) {
                    *gw += h * dz;
                }
            }
            for (gb, dz) in g.out_b.iter_mut().zip(&d_logits) {
                *gb += dz;
            }
            for (r, &x) in acts.input.iter().enumerate() {
                for (gw, dp) in g.hidden_w.row_mut(r).iter_mut().zip(&d_pre) {
                    *gw += x * dp;
                }
            }
            for (gb, dp) in g.hidden_b.iter_mut().zip(&d_pre) {
                *gb += dp;
            }
            for s in 0..m {
                for (gv, dv) in g.null_prompt.row_mut(s).iter_mut().zip(&d_input[s * d..(s + 1) * d]) {
                    *gv += dv;
                }
            }
            let window = padded_window(ctx, self.arch.window, self.vocab.bos());
            for (j, tok) in window.into_iter().enumerate() {
                let off = (m + j) * d;
                for (gv, dv) in g.embeddings.row_mut(tok as usize).iter_mut().zip(&d_input[off..off + d]) {
                    *gv += dv;
                }
            }
        }
        total / batch.len() as f64
    }

    fn apply(&mut self, g: &Grads, step: f64) {
        self.embeddings.add_scaled(&g.embeddings, -step);
        self.null_prompt.add_scaled(&g.null_prompt, -step);
        self.hidden_w.add_scaled(&g.hidden_w, -step);
        self.out_w.add_scaled(&g.out_w, -step);
        for (b, gb) in self.hidden_b.iter_mut().zip(&g.hidden_b) {
            *b -= step * gb;
        }
        for (b, gb) in self.out_b.iter_mut().zip(&g.out_b) {
            *b -= step * gb;
        }
    }

    fn corpus_loss(&self, pairs: &[(Vec<TokenId>, TokenId)]) -> f64 {
        let total: f64 = pairs
            .iter()
            .map(|(ctx, t)| {
                let acts = self.forward(ctx, &self.null_prompt);
                log_sum_exp(&acts.logits) - acts.logits[*t as usize]
            })
            .sum();
        total / pairs.len() as f64
    }

    /// SHA-256 over the architecture, vocabulary and every frozen parameter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for n in [self.arch.window, self.arch.virtual_slots, self.arch.embed_dim, self.arch.hidden_dim] {
            h.update((n as u64).to_le_bytes());
        }
        for tok in self.vocab.tokens() {
            h.update(tok.as_bytes());
            h.update([0u8]);
        }
        for id in [self.vocab.bos(), self.vocab.eos(), self.vocab.unk()] {
            h.update(id.to_le_bytes());
        }
        let params: [&[f64]; 6] = [
            self.embeddings.as_slice(),
            self.null_prompt.as_slice(),
            self.hidden_w.as_slice(),
            &self.hidden_b,
            self.out_w.as_slice(),
            &self.out_b,
        ];
        for block in params {
            for v in block {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl LanguageModel for NeuralWindowLM {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_dist(&self, context: &[TokenId]) -> ProbDist {
        softmax(&self.forward(context, &self.null_prompt).logits)
    }

    fn size_label(&self) -> String {
        let a = self.arch;
        format!("neural-w{}-m{}-d{}-h{}", a.window, a.virtual_slots, a.embed_dim, a.hidden_dim)
    }
}

/// A frozen backbone conditioned on a soft prompt.
#[derive(Debug, Clone)]
pub struct PromptedModel {
    backbone: Arc<NeuralWindowLM>,
    prompt: SoftPrompt,
}

impl PromptedModel {
    pub fn new(backbone: Arc<NeuralWindowLM>, prompt: SoftPrompt) -> Result<Self> {
        backbone.check_prompt(&prompt)?;
        Ok(PromptedModel { backbone, prompt })
    }

    pub fn backbone(&self) -> &Arc<NeuralWindowLM> {
        &self.backbone
    }

    pub fn prompt(&self) -> &SoftPrompt {
        &self.prompt
    }
}

impl LanguageModel for PromptedModel {
    fn vocab(&self) -> &Vocabulary {
        &self.backbone.vocab
    }

    fn next_dist(&self, context: &[TokenId]) -> ProbDist {
        softmax(&self.backbone.forward(context, self.prompt.embeddings()).logits)
    }

    fn size_label(&self) -> String {
        format!("{}+prompt", self.backbone.size_label())
    }
}
