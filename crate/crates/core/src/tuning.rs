//! Prompt tuning: train only the virtual-token embeddings of a frozen
//! [`NeuralWindowLM`] on attribute data.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{NeuralWindowLM, SoftPrompt};
use crate::matrix::Matrix;
use crate::prob::log_sum_exp;
use crate::vocab::{TokenId, TokenSeq};

/// One training example: the context so far and the token that follows.
pub type Example = (Vec<TokenId>, TokenId);

pub const GAUSSIAN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Copy rows from randomly chosen non-special token embeddings.
    #[default]
    SampledVocab,
    /// i.i.d. normal(0, 0.02).
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub init_mode: InitMode,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig { lr: 0.1, steps: 300, batch_size: 32, seed: 0, init_mode: InitMode::SampledVocab }
    }
}

impl TuneConfig {
    fn validate(&self) -> Result<()> {
        // lr = 0 is accepted so the trainer can be run as a pure evaluator.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("steps and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean batch cross-entropy recorded before each update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

impl LossTrace {
    fn window_mean(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    /// Mean of the first `n` recorded losses.
    pub fn head_mean(&self, n: usize) -> f64 {
        Self::window_mean(&self.losses[..n.min(self.losses.len())])
    }

    /// Mean of the last `n` recorded losses.
    pub fn tail_mean(&self, n: usize) -> f64 {
        Self::window_mean(&self.losses[self.losses.len().saturating_sub(n)..])
    }
}

pub fn init_soft_prompt(model: &NeuralWindowLM, virtual_slots: usize, mode: InitMode, seed: u64) -> Result<SoftPrompt> {
    let arch = model.arch();
    if virtual_slots != arch.virtual_slots {
        return Err(Error::ShapeMismatch {
            expected: format!("{} virtual slots", arch.virtual_slots),
            got: format!("{virtual_slots}"),
        });
    }
    let d = arch.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embeddings = match mode {
        InitMode::SampledVocab => {
            let ids = model.vocab.regular_ids();
            let mut data = Vec::with_capacity(virtual_slots * d);
            for _ in 0..virtual_slots {
                let id = *ids.choose(&mut rng).expect("vocabulary has regular tokens");
                data.extend_from_slice(model.embeddings().row(id as usize));
            }
            Matrix::from_vec(virtual_slots, d, data)?
        }
        InitMode::Gaussian => {
            let normal = Normal::new(0.0, GAUSSIAN_INIT_STD).expect("positive std");
            Matrix::from_fn(virtual_slots, d, |_, _| normal.sample(&mut rng))
        }
    };
    Ok(SoftPrompt::new(embeddings))
}

/// Mean next-token cross-entropy of `batch` with the prompt in the virtual
/// slots.
pub fn prompt_loss(model: &NeuralWindowLM, prompt: &SoftPrompt, batch: &[Example]) -> Result<f64> {
    model.check_prompt(prompt)?;
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let total: f64 = batch
        .iter()
        .map(|(ctx, t)| {
            let acts = model.forward(ctx, prompt.embeddings());
            log_sum_exp(&acts.logits) - acts.logits[*t as usize]
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Loss and analytic gradient of [`prompt_loss`] with respect to the prompt.
///
/// Backpropagates through softmax, the output layer and the tanh layer into
/// the virtual-slot part of the input. Frozen parameters are only read.
pub fn prompt_loss_and_grad(model: &NeuralWindowLM, prompt: &SoftPrompt, batch: &[Example]) -> Result<(f64, Matrix)> {
    model.check_prompt(prompt)?;
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let (m, d) = prompt.shape();
    let mut grad = Matrix::zeros(m, d);
    let mut total = 0.0;
    for (ctx, target) in batch {
        let acts = model.forward(ctx, prompt.embeddings());
        let (loss, d_input, _, _) = model.backward_to_input(&acts, *target);
        total += loss;
        for (g, v) in grad.as_mut_slice().iter_mut().zip(&d_input[..m * d]) {
            *g += v;
        }
    }
    let n = batch.len() as f64;
    grad.scale(1.0 / n);
    Ok((total / n, grad))
}

pub fn soft_prompt_grad(model: &NeuralWindowLM, prompt: &SoftPrompt, batch: &[Example]) -> Result<Matrix> {
    prompt_loss_and_grad(model, prompt, batch).map(|(_, g)| g)
}

/// Central finite differences of [`prompt_loss`], one coordinate at a time.
pub fn finite_diff_grad(model: &NeuralWindowLM, prompt: &SoftPrompt, batch: &[Example], eps: f64) -> Result<Matrix> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidConfig(format!("eps must be > 0, got {eps}")));
    }
    let (m, d) = prompt.shape();
    let mut grad = Matrix::zeros(m, d);
    let mut probe = prompt.clone();
    for i in 0..m * d {
        let orig = probe.embeddings().as_slice()[i];
        probe.embeddings_mut().as_mut_slice()[i] = orig + eps;
        let up = prompt_loss(model, &probe, batch)?;
        probe.embeddings_mut().as_mut_slice()[i] = orig - eps;
        let down = prompt_loss(model, &probe, batch)?;
        probe.embeddings_mut().as_mut_slice()[i] = orig;
        grad.as_mut_slice()[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// Plain SGD on the soft prompt over shuffled next-token examples from
/// `corpus`. The backbone is borrowed immutably and never changes.
pub fn tune_detoxifier(
    model: &NeuralWindowLM,
    corpus: &[TokenSeq],
    config: &TuneConfig,
) -> Result<(SoftPrompt, LossTrace)> {
    let init = init_soft_prompt(model, model.arch().virtual_slots, config.init_mode, config.seed)?;
    tune_from(model, init, corpus, config)
}

/// As [`tune_detoxifier`], starting from a given prompt.
pub fn tune_from(
    model: &NeuralWindowLM,
    mut prompt: SoftPrompt,
    corpus: &[TokenSeq],
    config: &TuneConfig,
) -> Result<(SoftPrompt, LossTrace)> {
    config.validate()?;
    for seq in corpus {
        model.vocab.check(seq)?;
    }
    let mut examples = crate::lm::next_token_pairs(corpus);
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    examples.shuffle(&mut rng);
    let mut cursor = 0;
    let mut trace = LossTrace::default();
    for step in 0..config.steps {
        if cursor >= examples.len() {
            examples.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(examples.len());
        let batch = &examples[cursor..end];
        cursor = end;
        let (loss, grad) = prompt_loss_and_grad(model, &prompt, batch)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::DivergedLoss { step, loss });
        }
        trace.losses.push(loss);
        prompt.embeddings_mut().add_scaled(&grad, -config.lr);
    }
    Ok((prompt, trace))
}
