//! Experiment protocols: the main evaluation loop, the control-strength grid
//! search and generator × detoxifier pairing matrices, plus their reports.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SteeringConfig;
use crate::data::{tokenize, PromptSet};
use crate::decode::{generate_k, RecordLine};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::metrics::{score_toxicity, EvalReport, ToxicityScorer};
use crate::vocab::TokenSeq;

/// Default tolerance of the α-selection rule.
pub const DEFAULT_DELTA: f64 = 0.005;

/// 1.0, 2.0, …, 9.0.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=9).map(f64::from).collect()
}

/// Everything one evaluation run reads.
#[derive(Clone, Copy)]
pub struct EvalInputs<'a> {
    pub generator: &'a dyn LanguageModel,
    pub detoxifier: Option<&'a dyn LanguageModel>,
    pub eval_lm: &'a dyn LanguageModel,
    pub scorer: &'a dyn ToxicityScorer,
    pub prompts: &'a PromptSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// Ordered by prompt, then sample index.
    pub records: Vec<RecordLine>,
    /// Per-prompt toxicity scores, in prompt order.
    pub scores: Vec<Vec<f64>>,
}

impl EvalOutcome {
    pub fn records_jsonl(&self) -> String {
        self.records.iter().map(RecordLine::to_json_line).collect()
    }
}

fn check_pair(a: &dyn LanguageModel, b: &dyn LanguageModel, what: &str) -> Result<()> {
    if a.vocab() == b.vocab() {
        Ok(())
    } else {
        Err(Error::VocabMismatch(format!(
            "{what}: {} ({} tokens) vs {} ({} tokens)",
            a.size_label(),
            a.vocab().len(),
            b.size_label(),
            b.vocab().len()
        )))
    }
}

struct PromptResult {
    prompt: TokenSeq,
    continuations: Vec<TokenSeq>,
    texts: Vec<TokenSeq>,
    scores: Vec<f64>,
    records: Vec<RecordLine>,
}

/// Generates `k` continuations per prompt (prompts in parallel), scores them
/// and aggregates every metric. Results do not depend on scheduling.
pub fn run_eval(inputs: EvalInputs<'_>, steering: &SteeringConfig) -> Result<EvalOutcome> {
    let EvalInputs { generator, detoxifier, eval_lm, scorer, prompts } = inputs;
    if let Some(det) = detoxifier {
        check_pair(generator, det, "generator and detoxifier")?;
    }
    check_pair(generator, eval_lm, "generator and evaluation model")?;
    if prompts.is_empty() {
        return Err(Error::EmptyInput("prompt set is empty"));
    }
    let vocab = generator.vocab();
    let eos = vocab.eos();
    let per_prompt: Vec<PromptResult> = prompts
        .prompts()
        .par_iter()
        .map(|p| {
            let prompt = tokenize(&p.text, vocab);
            let gens = generate_k(generator, detoxifier, &p.id, &prompt, steering)
                .map_err(|e| e.context(format!("prompt {}", p.id)))?;
            let mut out = PromptResult {
                prompt: prompt.clone(),
                continuations: Vec::with_capacity(gens.len()),
                texts: Vec::with_capacity(gens.len()),
                scores: Vec::with_capacity(gens.len()),
                records: Vec::with_capacity(gens.len()),
            };
            for (i, g) in gens.iter().enumerate() {
                let text = g.text_tokens(eos);
                out.scores
                    .push(score_toxicity(scorer, text).map_err(|e| e.context(format!("scoring prompt {}", p.id)))?);
                out.texts.push(TokenSeq(text.to_vec()));
                out.records.push(RecordLine::new(&p.id, i, g, vocab));
                out.continuations.push(g.continuation.clone());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut scores = Vec::with_capacity(per_prompt.len());
    let mut records = Vec::new();
    let (mut cond, mut conts, mut texts) = (Vec::new(), Vec::new(), Vec::new());
    for r in per_prompt {
        for c in r.continuations {
            cond.push(r.prompt.clone());
            conts.push(c);
        }
        texts.extend(r.texts);
        records.extend(r.records);
        scores.push(r.scores);
    }
    let report = crate::metrics::evaluate(eval_lm, &scores, &cond, &conts, &texts)?;
    Ok(EvalOutcome { report, records, scores })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub alpha: f64,
    pub avg_max_toxicity: f64,
    pub toxicity_probability: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// Sorted by α.
    pub rows: Vec<GridRow>,
    pub recommended_alpha: f64,
    pub delta: f64,
    pub seed: u64,
}

/// Smallest α whose toxicity is strictly within `delta` of the minimum over
/// the grid. The answer does not depend on the order of `points`.
pub fn select_alpha(points: &[(f64, f64)], delta: f64) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyInput("alpha grid is empty"));
    }
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::InvalidConfig(format!("delta must be positive, got {delta}")));
    }
    let min = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    Ok(points.iter().filter(|(_, tox)| tox - min < delta).map(|p| p.0).fold(f64::INFINITY, f64::min))
}

fn check_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return Err(Error::InvalidConfig("alpha list is empty".into()));
    }
    if alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(Error::InvalidConfig("alpha values must be finite and >= 0".into()));
    }
    if alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("alpha list must be strictly increasing".into()));
    }
    Ok(())
}

/// Runs one evaluation per α on the same prompts and seed.
pub fn alpha_grid(inputs: EvalInputs<'_>, steering: &SteeringConfig, alphas: &[f64], delta: f64) -> Result<GridResult> {
    check_alphas(alphas)?;
    let rows = alphas
        .iter()
        .map(|&alpha| {
            let cfg = steering.clone().set_alpha(alpha)?;
            let r = run_eval(inputs, &cfg).map_err(|e| e.context(format!("alpha = {alpha}")))?.report;
            Ok(GridRow {
                alpha,
                avg_max_toxicity: r.avg_max_toxicity,
                toxicity_probability: r.toxicity_probability,
                perplexity: r.perplexity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.alpha, r.avg_max_toxicity)).collect();
    let recommended_alpha = select_alpha(&points, delta)?;
    Ok(GridResult { rows, recommended_alpha, delta, seed: steering.seed() })
}

/// A labelled model for pairing experiments.
#[derive(Clone, Copy)]
pub struct Named<'a> {
    pub label: &'a str,
    pub model: &'a dyn LanguageModel,
}

/// Name of the no-detoxifier column.
pub const NONE_COLUMN: &str = "None";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingMatrix {
    pub generators: Vec<String>,
    /// Column labels; the first is always [`NONE_COLUMN`].
    pub columns: Vec<String>,
    /// `cells[g][c]`, aligned with `generators` and `columns`.
    pub cells: Vec<Vec<EvalReport>>,
    pub alpha: f64,
    pub seed: u64,
}

impl PairingMatrix {
    pub fn cell(&self, generator: &str, column: &str) -> Option<&EvalReport> {
        let g = self.generators.iter().position(|l| l == generator)?;
        let c = self.columns.iter().position(|l| l == column)?;
        Some(&self.cells[g][c])
    }
}

/// Every generator against every detoxifier plus the `None` column. Cells
/// run in parallel and are stored by index.
pub fn pairing_matrix(
    generators: &[Named<'_>],
    detoxifiers: &[Named<'_>],
    eval_lm: &dyn LanguageModel,
    scorer: &dyn ToxicityScorer,
    prompts: &PromptSet,
    steering: &SteeringConfig,
) -> Result<PairingMatrix> {
    if generators.is_empty() {
        return Err(Error::InvalidConfig("pairing needs at least one generator".into()));
    }
    // Rows and columns are separate axes, so a label may name both a
    // generator and a detoxifier.
    for (axis, models) in [("generator", generators), ("detoxifier", detoxifiers)] {
        let mut labels: Vec<&str> = models.iter().map(|n| n.label).collect();
        labels.sort_unstable();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig(format!("duplicate {axis} label {:?}", w[0])));
        }
    }
    if detoxifiers.iter().any(|d| d.label == NONE_COLUMN) {
        return Err(Error::InvalidConfig(format!("detoxifier label {NONE_COLUMN:?} is reserved")));
    }
    for g in generators {
        for d in detoxifiers {
            check_pair(g.model, d.model, &format!("pair ({}, {})", g.label, d.label))?;
        }
        check_pair(g.model, eval_lm, &format!("generator {} and evaluation model", g.label))?;
    }
    let width = detoxifiers.len() + 1;
    let flat: Vec<EvalReport> = (0..generators.len() * width)
        .into_par_iter()
        .map(|i| {
            let g = generators[i / width];
            let d = (i % width).checked_sub(1).map(|j| detoxifiers[j]);
            let inputs = EvalInputs { generator: g.model, detoxifier: d.map(|d| d.model), eval_lm, scorer, prompts };
            let cell = format!("cell ({}, {})", g.label, d.map_or(NONE_COLUMN, |d| d.label));
            run_eval(inputs, steering).map(|o| o.report).map_err(|e| e.context(cell))
        })
        .collect::<Result<_>>()?;
    let cells = flat.chunks(width).map(<[EvalReport]>::to_vec).collect();
    Ok(PairingMatrix {
        generators: generators.iter().map(|g| g.label.to_owned()).collect(),
        columns: std::iter::once(NONE_COLUMN.to_owned())
            .chain(detoxifiers.iter().map(|d| d.label.to_owned()))
            .collect(),
        cells,
        alpha: steering.alpha(),
        seed: steering.seed(),
    })
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

pub const GRID_TSV_HEADER: &str = "alpha\tavg_max_toxicity\ttoxicity_prob\tppl";

pub fn grid_tsv(result: &GridResult) -> String {
    let mut out = format!("{GRID_TSV_HEADER}\n");
    for r in &result.rows {
        let cols = [num(r.alpha), num(r.avg_max_toxicity), num(r.toxicity_probability), num(r.perplexity)];
        out.push_str(&cols.join("\t"));
        out.push('\n');
    }
    out
}

pub const REPORT_TSV_HEADER: &str = "avg_max_toxicity\ttoxicity_prob\tppl\tdistinct_2\tdistinct_3\tprompts\tk";

pub fn report_tsv(report: &EvalReport) -> String {
    let r = report;
    format!(
        "{REPORT_TSV_HEADER}\n{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        num(r.avg_max_toxicity),
        num(r.toxicity_probability),
        num(r.perplexity),
        num(r.distinct_2),
        num(r.distinct_3),
        r.prompt_count,
        r.k
    )
}

/// One table per metric: `(file stem, tsv)` with generators as rows and
/// detoxifiers (led by `None`) as columns.
pub fn pairing_tsvs(matrix: &PairingMatrix) -> Vec<(&'static str, String)> {
    type Metric = (&'static str, fn(&EvalReport) -> f64);
    let metrics: [Metric; 3] = [
        ("avg_max_toxicity", |r| r.avg_max_toxicity),
        ("toxicity_prob", |r| r.toxicity_probability),
        ("ppl", |r| r.perplexity),
    ];
    metrics
        .into_iter()
        .map(|(name, get)| {
            let mut out = String::from("generator");
            for c in &matrix.columns {
                write!(out, "\t{c}").expect("write to String");
            }
            out.push('\n');
            for (g, row) in matrix.generators.iter().zip(&matrix.cells) {
                out.push_str(g);
                for cell in row {
                    write!(out, "\t{}", num(get(cell))).expect("write to String");
                }
                out.push('\n');
            }
            (name, out)
        })
        .collect()
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}
