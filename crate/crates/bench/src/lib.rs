//! Shared fixtures for the benchmarks.

use gptf_core::{generate, init_state, EntryBatch, Mode, ModelState, SynthConfig};

pub struct Fixture {
    pub batch: EntryBatch,
    pub state: ModelState,
}

/// `n` synthetic training entries on a 40×40×40 tensor with rank-2 factors
/// and a fresh model with `p` inducing points.
pub fn fixture(mode: Mode, n: usize, p: usize) -> Fixture {
    let dims = [40, 40, 40];
    let data = generate(&SynthConfig {
        dims: dims.to_vec(),
        ranks: vec![2; 3],
        mode,
        density: n as f64 / 64_000.0,
        test_fraction: 0.0,
        seed: 1,
        ..SynthConfig::default()
    })
    .expect("synthetic data");
    let state = init_state(&dims, &[2; 3], p, mode, 1).expect("initial state");
    Fixture { batch: data.train.to_batch(), state }
}
