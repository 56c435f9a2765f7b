//! Fixtures shared by the benchmarks.

use steerdec::testbed::{Testbed, TestbedConfig};

/// A testbed small enough to build in well under a second.
pub fn small_testbed() -> Testbed {
    let mut cfg = TestbedConfig::with_seed(0);
    cfg.synth.n_toxic = 500;
    cfg.synth.n_clean = 500;
    cfg.synth.n_labeled = 100;
    cfg.synth.n_prompts = 20;
    cfg.synth.n_heldout = 200;
    Testbed::build(&cfg).expect("default testbed config is valid")
}
