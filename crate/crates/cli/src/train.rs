//! Data and training subcommands. Each reads an optional JSON config whose
//! fields can be overridden by flags, and writes checkpoints.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use steerdec::checkpoint::{Checkpoint, PromptCheckpoint};
use steerdec::data::{read_corpus, split_annotated, synth_two_style, tokenize, write_annotated, write_corpus};
use steerdec::data::{AnnotatedExample, SynthConfig};
use steerdec::lm::{NeuralArch, PretrainConfig, DEFAULT_ADD_K, DEFAULT_ORDER};
use steerdec::metrics::train_proxy_scorer;
use steerdec::testbed::terminated;
use steerdec::tuning::{tune_detoxifier as tune, InitMode, TuneConfig};
use steerdec::{Error, NGramModel, NeuralWindowLM, TokenSeq, Vocabulary};

use crate::{classify, Failure};

fn config_error(msg: String) -> Failure {
    Failure::Config(Error::InvalidConfig(msg))
}

fn load_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else { return Ok(T::default()) };
    let text =
        std::fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn require_files<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<(), Failure> {
    match paths.into_iter().find(|p| !p.is_file()) {
        Some(p) => Err(config_error(format!("input file {} does not exist", p.display()))),
        None => Ok(()),
    }
}

fn load_corpus(paths: &[PathBuf], vocab: &Vocabulary) -> Result<Vec<TokenSeq>, Failure> {
    let mut corpus = Vec::new();
    for p in paths {
        corpus.extend(read_corpus(p, vocab).map_err(classify)?);
    }
    Ok(terminated(&corpus, vocab.eos()))
}

fn save(ckpt: &Checkpoint, out: &Path) -> Result<(), Failure> {
    ckpt.save(out).map_err(classify)
}

fn summary(value: serde_json::Value) {
    println!("{value}");
}

#[derive(Args)]
pub struct SynthArgs {
    /// Synthetic corpus config (JSON); missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_toxic: Option<usize>,
    #[arg(long)]
    n_clean: Option<usize>,
    #[arg(long)]
    n_labeled: Option<usize>,
    #[arg(long)]
    n_prompts: Option<usize>,
    #[arg(long)]
    n_heldout: Option<usize>,
    #[arg(long)]
    toxic_marker_rate: Option<f64>,
    #[arg(long)]
    clean_marker_rate: Option<f64>,
    #[arg(long)]
    toxic_sharpness: Option<f64>,
}

pub fn synth_data(a: &SynthArgs) -> Result<(), Failure> {
    let mut c: SynthConfig = load_json(a.config.as_deref())?;
    c.seed = a.seed;
    c.n_toxic = a.n_toxic.unwrap_or(c.n_toxic);
    c.n_clean = a.n_clean.unwrap_or(c.n_clean);
    c.n_labeled = a.n_labeled.unwrap_or(c.n_labeled);
    c.n_prompts = a.n_prompts.unwrap_or(c.n_prompts);
    c.n_heldout = a.n_heldout.unwrap_or(c.n_heldout);
    c.toxic_marker_rate = a.toxic_marker_rate.unwrap_or(c.toxic_marker_rate);
    c.clean_marker_rate = a.clean_marker_rate.unwrap_or(c.clean_marker_rate);
    c.toxic_sharpness = a.toxic_sharpness.unwrap_or(c.toxic_sharpness);
    c.validate().map_err(Failure::Config)?;
    let data = synth_two_style(&c).map_err(classify)?;
    let out = &a.out;
    std::fs::create_dir_all(out).map_err(|e| Failure::Component(Error::Io { path: out.clone(), source: e }))?;
    let v = &data.vocab;
    let write = |name: &str, corpus: &[TokenSeq]| write_corpus(&out.join(name), corpus, v).map_err(classify);
    v.save(&out.join("vocab.txt")).map_err(classify)?;
    write("toxic.txt", &data.toxic)?;
    write("clean.txt", &data.clean)?;
    write("heldout_toxic.txt", &data.heldout_toxic)?;
    write("heldout_clean.txt", &data.heldout_clean)?;
    let labeled: Vec<AnnotatedExample> = data
        .labeled
        .iter()
        .map(|(s, toxic)| AnnotatedExample { text: v.decode(s), toxic_fraction: if *toxic { 1.0 } else { 0.0 } })
        .collect();
    write_annotated(&out.join("labeled.csv"), &labeled).map_err(classify)?;
    let files: [(&str, String); 2] = [
        ("prompts.jsonl", data.prompts.to_jsonl()),
        ("synth_config.json", serde_json::to_string_pretty(&c).expect("config serializes") + "\n"),
    ];
    for (name, body) in files {
        let path = out.join(name);
        std::fs::write(&path, body).map_err(|e| Failure::Component(Error::Io { path, source: e }))?;
    }
    summary(serde_json::json!({
        "vocab_size": v.len(),
        "toxic_marker_frequency": data.marker_frequency(&data.toxic),
        "clean_marker_frequency": data.marker_frequency(&data.clean),
        "prompts": data.prompts.len(),
    }));
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Ngram,
    Neural,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BackboneFile {
    kind: Option<BackboneKind>,
    order: Option<usize>,
    add_k: Option<f64>,
    window: Option<usize>,
    virtual_slots: Option<usize>,
    embed_dim: Option<usize>,
    hidden_dim: Option<usize>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
}

#[derive(Args)]
pub struct BackboneArgs {
    /// Backbone config (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    vocab: PathBuf,
    /// Training text, one sequence per line; repeatable.
    #[arg(long, required = true)]
    corpus: Vec<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    kind: Option<BackboneKind>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    add_k: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    virtual_slots: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

pub fn train_backbone(a: &BackboneArgs) -> Result<(), Failure> {
    let f: BackboneFile = load_json(a.config.as_deref())?;
    require_files(std::iter::once(&a.vocab).chain(&a.corpus))?;
    let vocab = Vocabulary::load(&a.vocab).map_err(Failure::Config)?;
    let corpus = load_corpus(&a.corpus, &vocab)?;
    match a.kind.or(f.kind).unwrap_or(BackboneKind::Ngram) {
        BackboneKind::Ngram => {
            let order = a.order.or(f.order).unwrap_or(DEFAULT_ORDER);
            let add_k = a.add_k.or(f.add_k).unwrap_or(DEFAULT_ADD_K);
            let m = NGramModel::train(&corpus, order, add_k, vocab).map_err(classify)?;
            let ckpt = Checkpoint::NGram(m);
            save(&ckpt, &a.out)?;
            summary(serde_json::json!({"kind": "ngram", "order": order, "digest": ckpt.digest().map_err(classify)?}));
        }
        BackboneKind::Neural => {
            let d = PretrainConfig::default();
            let arch = NeuralArch {
                window: a.window.or(f.window).unwrap_or(d.arch.window),
                virtual_slots: a.virtual_slots.or(f.virtual_slots).unwrap_or(d.arch.virtual_slots),
                embed_dim: a.embed_dim.or(f.embed_dim).unwrap_or(d.arch.embed_dim),
                hidden_dim: a.hidden_dim.or(f.hidden_dim).unwrap_or(d.arch.hidden_dim),
            };
            let cfg = PretrainConfig {
                arch,
                epochs: a.epochs.or(f.epochs).unwrap_or(d.epochs),
                lr: a.lr.or(f.lr).unwrap_or(d.lr),
                batch_size: a.batch_size.or(f.batch_size).unwrap_or(d.batch_size),
                seed: a.seed,
            };
            let (m, trace) = NeuralWindowLM::pretrain(&corpus, vocab, &cfg).map_err(classify)?;
            let fingerprint = m.fingerprint();
            save(&Checkpoint::Neural(m), &a.out)?;
            summary(serde_json::json!({
                "kind": "neural",
                "initial_loss": trace.initial_loss,
                "final_loss": trace.final_loss(),
                "fingerprint": fingerprint,
            }));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitArg {
    SampledVocab,
    Gaussian,
}

impl From<InitArg> for InitMode {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::SampledVocab => InitMode::SampledVocab,
            InitArg::Gaussian => InitMode::Gaussian,
        }
    }
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TuneFile {
    steps: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    init: Option<InitArg>,
}

#[derive(Args)]
pub struct TuneArgs {
    /// Tuning config (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Frozen neural backbone checkpoint.
    #[arg(long)]
    backbone: PathBuf,
    /// Attribute (toxic) training text; repeatable.
    #[arg(long, required = true)]
    corpus: Vec<PathBuf>,
    /// Soft-prompt checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
}

pub fn tune_detoxifier(a: &TuneArgs) -> Result<(), Failure> {
    let f: TuneFile = load_json(a.config.as_deref())?;
    require_files(std::iter::once(&a.backbone).chain(&a.corpus))?;
    let backbone = Checkpoint::load(&a.backbone).and_then(Checkpoint::into_neural).map_err(classify)?;
    let corpus = load_corpus(&a.corpus, steerdec::LanguageModel::vocab(&backbone))?;
    let d = TuneConfig::default();
    let cfg = TuneConfig {
        lr: a.lr.or(f.lr).unwrap_or(d.lr),
        steps: a.steps.or(f.steps).unwrap_or(d.steps),
        batch_size: a.batch_size.or(f.batch_size).unwrap_or(d.batch_size),
        seed: a.seed,
        init_mode: a.init.or(f.init).map_or(d.init_mode, InitMode::from),
    };
    let (prompt, trace) = tune(&backbone, &corpus, &cfg).map_err(classify)?;
    let ckpt = PromptCheckpoint::new(prompt, &backbone).map_err(classify)?;
    let fingerprint = ckpt.backbone_fingerprint.clone();
    save(&Checkpoint::SoftPrompt(ckpt), &a.out)?;
    let window = (trace.losses.len() / 10).max(1);
    summary(serde_json::json!({
        "steps": trace.losses.len(),
        "initial_loss": trace.head_mean(window),
        "final_loss": trace.tail_mean(window),
        "backbone_fingerprint": fingerprint,
    }));
    Ok(())
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ScorerFile {
    threshold: Option<f64>,
    lr: Option<f64>,
    epochs: Option<usize>,
}

#[derive(Args)]
pub struct ScorerArgs {
    /// Scorer config (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    vocab: PathBuf,
    /// CSV with header `text,toxic_fraction`.
    #[arg(long)]
    labeled: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Rows with toxic_fraction strictly above this are toxic.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

pub fn train_scorer(a: &ScorerArgs) -> Result<(), Failure> {
    let f: ScorerFile = load_json(a.config.as_deref())?;
    require_files([&a.vocab, &a.labeled])?;
    let vocab = Vocabulary::load(&a.vocab).map_err(Failure::Config)?;
    let threshold = a.threshold.or(f.threshold).unwrap_or(0.5);
    let (toxic, clean) = split_annotated(&a.labeled, threshold).map_err(classify)?;
    let labeled: Vec<(TokenSeq, bool)> = toxic
        .iter()
        .map(|e| (tokenize(&e.text, &vocab), true))
        .chain(clean.iter().map(|e| (tokenize(&e.text, &vocab), false)))
        .collect();
    let lr = a.lr.or(f.lr).unwrap_or(1.0);
    let epochs = a.epochs.or(f.epochs).unwrap_or(500);
    let (scorer, report) = train_proxy_scorer(&labeled, &vocab, lr, epochs, a.seed).map_err(classify)?;
    save(&Checkpoint::ProxyScorer(scorer), &a.out)?;
    summary(serde_json::json!({
        "examples": labeled.len(),
        "heldout_accuracy": report.heldout_accuracy,
        "initial_loss": report.losses.first(),
        "final_loss": report.losses.last(),
    }));
    Ok(())
}
