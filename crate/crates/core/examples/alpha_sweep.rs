//! Sweeps the control strength on the synthetic testbed and prints one row
//! per α. Usage: `alpha_sweep [seed] [testbed-config.json]`; the config may
//! set any subset of `TestbedConfig` fields.

use steerdec::harness::{run_eval, EvalInputs};
use steerdec::testbed::{Testbed, TestbedConfig};
use steerdec::SteeringConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg: TestbedConfig = match args.get(2) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => TestbedConfig::default(),
    };
    if let Some(s) = args.get(1) {
        cfg.synth.seed = s.parse()?;
    }
    let tb = Testbed::build(&cfg)?;
    println!("seed {}: scorer held-out accuracy {:.3}", cfg.synth.seed, tb.scorer_report.heldout_accuracy);
    println!("alpha\tavg_max_toxicity\ttoxicity_prob\tppl\tdistinct_2");
    let inputs = EvalInputs {
        generator: &tb.generator,
        detoxifier: Some(&tb.detoxifier),
        eval_lm: &tb.eval_lm,
        scorer: &tb.scorer,
        prompts: &tb.data.prompts,
    };
    for alpha in [0.0, 1.0, 3.0, 5.0, 7.0, 9.0] {
        let steering = SteeringConfig::with_seed(cfg.synth.seed).set_k_samples(5)?.set_alpha(alpha)?;
        let r = run_eval(inputs, &steering)?.report;
        println!(
            "{alpha}\t{:.4}\t{:.4}\t{:.3}\t{:.3}",
            r.avg_max_toxicity, r.toxicity_probability, r.perplexity, r.distinct_2
        );
    }
    Ok(())
}
