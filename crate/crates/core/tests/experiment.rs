use std::path::{Path, PathBuf};

use steerdec::checkpoint::Checkpoint;
use steerdec::experiment::{
    run_alpha_grid, run_eval_experiment, run_generate, run_pairing, ExperimentConfig, Loaded, ModelRef, PairingSection,
    ScorerRef,
};
use steerdec::lm::NGramModel;
use steerdec::testbed::{terminated, Testbed, TestbedConfig};
use steerdec::{Error, NeuralWindowLM};

fn small_testbed() -> Testbed {
    let mut cfg = TestbedConfig::with_seed(11);
    cfg.synth.n_toxic = 300;
    cfg.synth.n_clean = 300;
    cfg.synth.n_labeled = 100;
    cfg.synth.n_prompts = 6;
    cfg.synth.n_heldout = 200;
    Testbed::build(&cfg).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: ExperimentConfig,
}

fn save(root: &Path, name: &str, c: Checkpoint) -> PathBuf {
    let p = root.join(name);
    c.save(&p).unwrap();
    p
}

fn fixture() -> Fixture {
    let tb = small_testbed();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let gen = save(&root, "gen.json", Checkpoint::NGram(tb.generator.clone()));
    let det = save(&root, "det.json", Checkpoint::NGram(tb.detoxifier.clone()));
    let eval = save(&root, "eval.json", Checkpoint::NGram(tb.eval_lm.clone()));
    let scorer = save(&root, "scorer.json", Checkpoint::ProxyScorer(tb.scorer.clone()));
    let toxic = terminated(&tb.data.toxic, tb.data.vocab.eos());
    let det3 = NGramModel::train(&toxic, 3, 0.1, tb.data.vocab.clone()).unwrap();
    let det3 = save(&root, "det3.json", Checkpoint::NGram(det3));
    let prompts = root.join("prompts.jsonl");
    std::fs::write(&prompts, tb.data.prompts.to_jsonl()).unwrap();
    let mut config = ExperimentConfig::from_json(&format!(
        r#"{{"name": "run", "output_dir": {out:?}, "seed": 5,
            "generator": {{"checkpoint": {gen:?}}},
            "detoxifier": {{"checkpoint": {det:?}}},
            "eval_lm": {{"checkpoint": {eval:?}}},
            "prompts": {prompts:?},
            "scorer": {{"kind": "proxy", "checkpoint": {scorer:?}}},
            "steering": {{"k_samples": 2, "max_new_tokens": 8}}}}"#,
        out = root.join("out"),
    ))
    .unwrap();
    config.pairing = Some(PairingSection {
        generators: vec![ModelRef { label: Some("g".into()), ..ModelRef::new(&gen) }],
        detoxifiers: vec![
            ModelRef { label: Some("d2".into()), ..ModelRef::new(&det) },
            ModelRef { label: Some("d3".into()), ..ModelRef::new(&det3) },
        ],
    });
    config.alphas = Some(vec![0.0, 2.0, 4.0]);
    config.validate().unwrap();
    Fixture { _dir: dir, root, config }
}

fn snapshot(files: &[PathBuf]) -> Vec<(PathBuf, Vec<u8>)> {
    files.iter().map(|f| (f.clone(), std::fs::read(f).unwrap())).collect()
}

#[test]
fn eval_rerun_is_byte_identical() {
    let f = fixture();
    let loaded = Loaded::load(&f.config).unwrap();
    let first = snapshot(&run_eval_experiment(&f.config, &loaded).unwrap());
    let names: Vec<_> = first.iter().map(|(p, _)| p.file_name().unwrap().to_str().unwrap().to_owned()).collect();
    assert_eq!(names, ["records.jsonl", "report.tsv", "report.json", "manifest.json"]);
    let again = Loaded::load(&f.config).unwrap();
    assert_eq!(snapshot(&run_eval_experiment(&f.config, &again).unwrap()), first);

    let records = String::from_utf8(first[0].1.clone()).unwrap();
    assert_eq!(records.lines().count(), 6 * 2);
    let manifest: serde_json::Value = serde_json::from_slice(&first[3].1).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config"]["name"], "run");
    for role in ["generator", "detoxifier", "eval_lm", "scorer"] {
        assert_eq!(manifest["fingerprints"][role].as_str().unwrap().len(), 64, "{role}");
    }
}

#[test]
fn generate_grid_and_pairing_outputs() {
    let f = fixture();
    let loaded = Loaded::load(&f.config).unwrap();
    let gen = run_generate(&f.config, &loaded).unwrap();
    assert!(gen[0].ends_with("records.jsonl"));

    let grid = run_alpha_grid(&f.config, &loaded).unwrap();
    let tsv = std::fs::read_to_string(&grid[0]).unwrap();
    assert_eq!(tsv.lines().next().unwrap(), "alpha\tavg_max_toxicity\ttoxicity_prob\tppl");
    assert_eq!(tsv.lines().count(), 4);
    let again = run_alpha_grid(&f.config, &loaded).unwrap();
    assert_eq!(snapshot(&again), snapshot(&grid));

    let pairing = run_pairing(&f.config, &loaded).unwrap();
    let toxicity = std::fs::read_to_string(f.config.experiment_dir().join("pairing_avg_max_toxicity.tsv")).unwrap();
    let lines: Vec<&str> = toxicity.lines().collect();
    assert_eq!(lines[0], "generator\tNone\td2\td3");
    assert_eq!(lines[1].split('\t').count(), 4);
    assert_eq!(snapshot(&run_pairing(&f.config, &loaded).unwrap()), snapshot(&pairing));
}

#[test]
fn validation_rejects_missing_files() {
    let f = fixture();
    let mut c = f.config.clone();
    c.prompts = f.root.join("nope.jsonl");
    assert!(matches!(c.validate(), Err(Error::InvalidConfig(m)) if m.contains("nope.jsonl")));
    let mut c = f.config.clone();
    c.name = "../escape".into();
    assert!(c.validate().is_err());
    assert!(ExperimentConfig::from_json(r#"{"name": "x"}"#).is_err());
}

#[test]
fn scorer_url_override() {
    let f = fixture();
    let mut c = f.config.clone();
    c.apply_scorer_url(None);
    assert_eq!(c.scorer, f.config.scorer);
    c.apply_scorer_url(Some("http://127.0.0.1:9/score".into()));
    assert!(matches!(&c.scorer, ScorerRef::External(e) if e.endpoint == "http://127.0.0.1:9/score"));
}

#[test]
fn soft_prompt_needs_matching_backbone() {
    use steerdec::checkpoint::PromptCheckpoint;
    use steerdec::lm::{NeuralArch, PretrainConfig};
    use steerdec::tuning::{init_soft_prompt, InitMode};
    let f = fixture();
    let tb = small_testbed();
    let arch = NeuralArch { window: 2, virtual_slots: 2, embed_dim: 4, hidden_dim: 8 };
    let corpus = terminated(&tb.data.toxic[..50], tb.data.vocab.eos());
    let cfg = PretrainConfig { arch, epochs: 1, ..PretrainConfig::default() };
    let (backbone, _) = NeuralWindowLM::pretrain(&corpus, tb.data.vocab.clone(), &cfg).unwrap();
    let other = NeuralWindowLM::init(tb.data.vocab.clone(), arch, 77).unwrap();
    let prompt = init_soft_prompt(&backbone, 2, InitMode::SampledVocab, 1).unwrap();
    let p = save(&f.root, "prompt.json", Checkpoint::SoftPrompt(PromptCheckpoint::new(prompt, &backbone).unwrap()));
    let good = save(&f.root, "backbone.json", Checkpoint::Neural(backbone));
    let bad = save(&f.root, "other.json", Checkpoint::Neural(other));

    let mut c = f.config.clone();
    c.detoxifier = Some(ModelRef { backbone: Some(good), ..ModelRef::new(&p) });
    let loaded = Loaded::load(&c).unwrap();
    assert!(loaded.fingerprints.contains_key("detoxifier.backbone"));
    c.detoxifier = Some(ModelRef { backbone: Some(bad), ..ModelRef::new(&p) });
    let err = Loaded::load(&c).err().unwrap();
    assert!(matches!(err.root(), Error::FingerprintMismatch { .. }), "{err}");
    c.detoxifier = Some(ModelRef::new(&p));
    assert!(Loaded::load(&c).is_err());
}
