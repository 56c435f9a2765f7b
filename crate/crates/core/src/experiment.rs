//! File-based experiment runner: loads checkpoints named in an
//! [`ExperimentConfig`], runs a protocol from [`crate::harness`] and writes
//! every artifact under `<output_dir>/<name>/` next to a `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{
    Direction, SteeringConfig, DEFAULT_ALPHA, DEFAULT_K_SAMPLES, DEFAULT_MAX_NEW_TOKENS, DEFAULT_TOP_P,
};
use crate::data::{read_prompts, PromptSet};
use crate::error::{Error, Result};
use crate::harness::{
    alpha_grid, default_alpha_grid, grid_tsv, pairing_matrix, pairing_tsvs, report_tsv, run_eval, to_json, EvalInputs,
    Named, DEFAULT_DELTA,
};
use crate::lm::{LanguageModel, NGramModel, NeuralWindowLM, PromptedModel};
use crate::metrics::{ExternalScorer, ExternalScorerConfig, ProxyScorer, ToxicityScorer};
use crate::prob::ProbDist;
use crate::vocab::{TokenId, Vocabulary};

/// Environment variable that replaces the scorer with an external endpoint.
pub const SCORER_URL_ENV: &str = "STEERDEC_SCORER_URL";

/// A checkpoint on disk. Soft-prompt checkpoints also name their backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    pub checkpoint: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<PathBuf>,
    /// Row or column name in pairing tables; defaults to the model's size label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl ModelRef {
    pub fn new(checkpoint: impl Into<PathBuf>) -> Self {
        ModelRef { checkpoint: checkpoint.into(), backbone: None, label: None }
    }

    fn paths(&self) -> impl Iterator<Item = &PathBuf> {
        std::iter::once(&self.checkpoint).chain(&self.backbone)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerRef {
    Proxy { checkpoint: PathBuf },
    External(ExternalScorerConfig),
}

/// Decode settings other than the seed, which lives at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringSection {
    pub alpha: f64,
    pub top_p: f64,
    pub direction: Direction,
    pub k_samples: usize,
    pub max_new_tokens: usize,
}

impl Default for SteeringSection {
    fn default() -> Self {
        SteeringSection {
            alpha: DEFAULT_ALPHA,
            top_p: DEFAULT_TOP_P,
            direction: Direction::Suppress,
            k_samples: DEFAULT_K_SAMPLES,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairingSection {
    pub generators: Vec<ModelRef>,
    pub detoxifiers: Vec<ModelRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Tsv,
    Json,
}

fn default_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Tsv, ReportFormat::Json]
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

/// Relative paths are resolved against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub generator: ModelRef,
    #[serde(default)]
    pub detoxifier: Option<ModelRef>,
    pub eval_lm: ModelRef,
    pub prompts: PathBuf,
    /// Prompts annotated above this toxicity are dropped.
    #[serde(default)]
    pub max_prompt_toxicity: Option<f64>,
    pub scorer: ScorerRef,
    #[serde(default)]
    pub steering: SteeringSection,
    #[serde(default)]
    pub alphas: Option<Vec<f64>>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub pairing: Option<PairingSection>,
    #[serde(default = "default_formats")]
    pub formats: Vec<ReportFormat>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(format!("reading {}", path.display())))
    }

    pub fn steering(&self) -> Result<SteeringConfig> {
        let s = &self.steering;
        SteeringConfig::new(s.alpha, s.top_p, s.direction, s.k_samples, s.max_new_tokens, self.seed)
    }

    /// Points the scorer at `url` if one is given, keeping any other
    /// external-scorer settings.
    pub fn apply_scorer_url(&mut self, url: Option<String>) {
        let Some(url) = url else { return };
        match &mut self.scorer {
            ScorerRef::External(c) => c.endpoint = url,
            other => *other = ScorerRef::External(ExternalScorerConfig::new(url)),
        }
    }

    fn referenced_files(&self) -> Vec<&PathBuf> {
        let mut files: Vec<&PathBuf> = self.generator.paths().chain(self.eval_lm.paths()).collect();
        if let Some(d) = &self.detoxifier {
            files.extend(d.paths());
        }
        files.push(&self.prompts);
        if let ScorerRef::Proxy { checkpoint } = &self.scorer {
            files.push(checkpoint);
        }
        if let Some(p) = &self.pairing {
            files.extend(p.generators.iter().chain(&p.detoxifiers).flat_map(ModelRef::paths));
        }
        files
    }

    /// Checks everything that can be checked without loading components.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return bad(format!("experiment name {:?} must be a plain directory name", self.name));
        }
        self.steering()?;
        if let Some(missing) = self.referenced_files().into_iter().find(|p| !p.is_file()) {
            return bad(format!("referenced file {} does not exist", missing.display()));
        }
        if let Some(a) = &self.alphas {
            if a.is_empty() || a.windows(2).any(|w| w[0] >= w[1]) {
                return bad("alphas must be non-empty and strictly increasing".into());
            }
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if self.formats.is_empty() {
            return bad("at least one report format is required".into());
        }
        Ok(())
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }
}

/// A language model loaded from a checkpoint.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    NGram(NGramModel),
    Neural(Arc<NeuralWindowLM>),
    Prompted(PromptedModel),
}

impl LanguageModel for LoadedModel {
    fn vocab(&self) -> &Vocabulary {
        match self {
            LoadedModel::NGram(m) => m.vocab(),
            LoadedModel::Neural(m) => m.vocab(),
            LoadedModel::Prompted(m) => m.vocab(),
        }
    }

    fn next_dist(&self, context: &[TokenId]) -> ProbDist {
        match self {
            LoadedModel::NGram(m) => m.next_dist(context),
            LoadedModel::Neural(m) => m.next_dist(context),
            LoadedModel::Prompted(m) => m.next_dist(context),
        }
    }

    fn size_label(&self) -> String {
        match self {
            LoadedModel::NGram(m) => m.size_label(),
            LoadedModel::Neural(m) => m.size_label(),
            LoadedModel::Prompted(m) => m.size_label(),
        }
    }
}

/// Fingerprints of every loaded component, keyed by role.
pub type Fingerprints = BTreeMap<String, String>;

/// Loads a model, recording checkpoint digests under `role`.
pub fn load_model(r: &ModelRef, role: &str, fingerprints: &mut Fingerprints) -> Result<LoadedModel> {
    let ckpt = Checkpoint::load(&r.checkpoint)?;
    fingerprints.insert(role.to_owned(), ckpt.digest()?);
    let model = match ckpt {
        Checkpoint::NGram(m) => LoadedModel::NGram(m),
        Checkpoint::Neural(m) => LoadedModel::Neural(Arc::new(m)),
        Checkpoint::SoftPrompt(p) => {
            let path = r.backbone.as_ref().ok_or_else(|| {
                Error::InvalidConfig(format!("{role}: soft prompt {} needs a backbone", r.checkpoint.display()))
            })?;
            let backbone = Checkpoint::load(path)?.into_neural()?;
            fingerprints.insert(format!("{role}.backbone"), backbone.fingerprint());
            let prompt = p.verify(&backbone).map_err(|e| e.context(format!("{role} soft prompt")))?;
            LoadedModel::Prompted(PromptedModel::new(Arc::new(backbone), prompt)?)
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "{role}: {} is a {:?} checkpoint, not a language model",
                r.checkpoint.display(),
                other.kind()
            )))
        }
    };
    Ok(model)
}

pub fn load_scorer(
    r: &ScorerRef,
    vocab: &Vocabulary,
    fingerprints: &mut Fingerprints,
) -> Result<Box<dyn ToxicityScorer>> {
    match r {
        ScorerRef::Proxy { checkpoint } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            fingerprints.insert("scorer".into(), ckpt.digest()?);
            let scorer: ProxyScorer = ckpt.into_proxy_scorer()?;
            if scorer.vocab() != vocab {
                return Err(Error::VocabMismatch("scorer vocabulary differs from the generator's".into()));
            }
            Ok(Box::new(scorer))
        }
        ScorerRef::External(c) => {
            fingerprints.insert("scorer".into(), format!("external:{}", c.endpoint));
            Ok(Box::new(ExternalScorer::new(c.clone(), vocab.clone())?))
        }
    }
}

/// The components of an experiment, loaded and cross-checked.
pub struct Loaded {
    pub generator: LoadedModel,
    pub detoxifier: Option<LoadedModel>,
    pub eval_lm: LoadedModel,
    pub scorer: Box<dyn ToxicityScorer>,
    pub prompts: PromptSet,
    pub fingerprints: Fingerprints,
}

impl Loaded {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let mut fingerprints = Fingerprints::new();
        let generator = load_model(&config.generator, "generator", &mut fingerprints)?;
        let detoxifier =
            config.detoxifier.as_ref().map(|d| load_model(d, "detoxifier", &mut fingerprints)).transpose()?;
        let eval_lm = load_model(&config.eval_lm, "eval_lm", &mut fingerprints)?;
        let scorer = load_scorer(&config.scorer, generator.vocab(), &mut fingerprints)?;
        let prompts = read_prompts(&config.prompts, config.max_prompt_toxicity)?;
        Ok(Loaded { generator, detoxifier, eval_lm, scorer, prompts, fingerprints })
    }

    pub fn inputs(&self) -> EvalInputs<'_> {
        EvalInputs {
            generator: &self.generator,
            detoxifier: self.detoxifier.as_ref().map(|d| d as &dyn LanguageModel),
            eval_lm: &self.eval_lm,
            scorer: self.scorer.as_ref(),
            prompts: &self.prompts,
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    command: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
    fingerprints: &'a Fingerprints,
}

#[derive(Serialize)]
struct ReportDoc<'a, T: Serialize> {
    experiment: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
    result: &'a T,
}

/// Writes files into the experiment directory and remembers their names.
struct Writer<'a> {
    dir: PathBuf,
    config: &'a ExperimentConfig,
    written: Vec<PathBuf>,
}

impl<'a> Writer<'a> {
    fn new(config: &'a ExperimentConfig) -> Result<Self> {
        let dir = config.experiment_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Writer { dir, config, written: Vec::new() })
    }

    fn file(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    fn wants(&self, f: ReportFormat) -> bool {
        self.config.formats.contains(&f)
    }

    fn json<T: Serialize>(&mut self, name: &str, result: &T) -> Result<()> {
        if self.wants(ReportFormat::Json) {
            let c = self.config;
            let doc = ReportDoc { experiment: &c.name, seed: c.seed, config: c, result };
            self.file(name, &to_json(&doc)?)?;
        }
        Ok(())
    }

    fn finish(mut self, command: &str, fingerprints: &Fingerprints) -> Result<Vec<PathBuf>> {
        let c = self.config;
        let manifest = Manifest { experiment: &c.name, command, seed: c.seed, config: c, fingerprints };
        self.file("manifest.json", &to_json(&manifest)?)?;
        Ok(self.written)
    }
}

/// Generation only: `records.jsonl`.
pub fn run_generate(config: &ExperimentConfig, loaded: &Loaded) -> Result<Vec<PathBuf>> {
    let steering = config.steering()?;
    let outcome = run_eval(loaded.inputs(), &steering)?;
    let mut w = Writer::new(config)?;
    w.file("records.jsonl", &outcome.records_jsonl())?;
    w.finish("generate", &loaded.fingerprints)
}

/// `records.jsonl` plus the report as `report.tsv` / `report.json`.
pub fn run_eval_experiment(config: &ExperimentConfig, loaded: &Loaded) -> Result<Vec<PathBuf>> {
    let steering = config.steering()?;
    let outcome = run_eval(loaded.inputs(), &steering)?;
    let mut w = Writer::new(config)?;
    w.file("records.jsonl", &outcome.records_jsonl())?;
    if w.wants(ReportFormat::Tsv) {
        w.file("report.tsv", &report_tsv(&outcome.report))?;
    }
    w.json("report.json", &outcome.report)?;
    w.finish("eval", &loaded.fingerprints)
}

pub fn run_alpha_grid(config: &ExperimentConfig, loaded: &Loaded) -> Result<Vec<PathBuf>> {
    if loaded.detoxifier.is_none() {
        return Err(Error::InvalidConfig("alpha-grid needs a detoxifier".into()));
    }
    let steering = config.steering()?;
    let alphas = config.alphas.clone().unwrap_or_else(default_alpha_grid);
    let result = alpha_grid(loaded.inputs(), &steering, &alphas, config.delta)?;
    let mut w = Writer::new(config)?;
    if w.wants(ReportFormat::Tsv) {
        w.file("grid.tsv", &grid_tsv(&result))?;
    }
    w.json("grid.json", &result)?;
    w.finish("alpha-grid", &loaded.fingerprints)
}

fn label(r: &ModelRef, m: &LoadedModel) -> String {
    r.label.clone().unwrap_or_else(|| m.size_label())
}

/// Uses `pairing.generators` / `pairing.detoxifiers`; the top-level
/// generator and detoxifier are ignored.
pub fn run_pairing(config: &ExperimentConfig, loaded: &Loaded) -> Result<Vec<PathBuf>> {
    let section = config
        .pairing
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("pairing-matrix needs a `pairing` section".into()))?;
    let mut fingerprints = loaded.fingerprints.clone();
    let load_all = |refs: &[ModelRef], role: &str, fp: &mut Fingerprints| -> Result<Vec<(String, LoadedModel)>> {
        refs.iter()
            .enumerate()
            .map(|(i, r)| {
                let m = load_model(r, &format!("{role}[{i}]"), fp)?;
                Ok((label(r, &m), m))
            })
            .collect()
    };
    let gens = load_all(&section.generators, "pairing.generator", &mut fingerprints)?;
    let dets = load_all(&section.detoxifiers, "pairing.detoxifier", &mut fingerprints)?;
    let gen_named: Vec<Named<'_>> = gens.iter().map(|(l, m)| Named { label: l, model: m }).collect();
    let det_named: Vec<Named<'_>> = dets.iter().map(|(l, m)| Named { label: l, model: m }).collect();
    let steering = config.steering()?;
    let matrix =
        pairing_matrix(&gen_named, &det_named, &loaded.eval_lm, loaded.scorer.as_ref(), &loaded.prompts, &steering)?;
    let mut w = Writer::new(config)?;
    if w.wants(ReportFormat::Tsv) {
        for (metric, body) in pairing_tsvs(&matrix) {
            w.file(&format!("pairing_{metric}.tsv"), &body)?;
        }
    }
    w.json("pairing.json", &matrix)?;
    w.finish("pairing-matrix", &fingerprints)
}
