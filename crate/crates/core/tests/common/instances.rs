//! Random problem instances and finite-difference helpers shared by tests.

#![allow(dead_code)]

use std::collections::HashSet;

use gptf_core::model::{init_state, Likelihood, ModelState, Mode};
use gptf_core::sptensor::EntryBatch;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct Instance {
    pub state: ModelState,
    pub batch: EntryBatch,
}

pub struct Spec<'a> {
    pub dims: &'a [usize],
    pub ranks: &'a [usize],
    pub p: usize,
    pub n: usize,
    pub mode: Mode,
    /// Place the inducing points exactly at the first `p` entry inputs.
    pub inducing_at_data: bool,
    pub jitter: f64,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Distinct random cells with random targets; factors ~ N(0, 0.7²),
/// amplitude and lengthscales drawn around one, λ ~ N(0, 0.3²).
pub fn random_instance(seed: u64, spec: &Spec<'_>) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = init_state(spec.dims, spec.ranks, spec.p, spec.mode, seed).unwrap();
    state.jitter = spec.jitter;
    for k in 0..spec.dims.len() {
        let m = state.factors.matrix_mut(k);
        for v in m.iter_mut() {
            *v = 0.7 * gauss(&mut rng);
        }
    }
    state.kernel.log_amplitude = rng.random_range(-0.4..0.4);
    for l in state.kernel.log_lengthscales.iter_mut() {
        *l = rng.random_range(-0.2..0.5);
    }
    match &mut state.likelihood {
        Likelihood::Gaussian { log_precision } => *log_precision = rng.random_range(-0.5..1.5),
        Likelihood::Probit { lambda } => {
            for l in lambda.iter_mut() {
                *l = 0.3 * gauss(&mut rng);
            }
        }
    }

    let mut batch = EntryBatch::new(spec.dims.len());
    let mut seen = HashSet::new();
    while batch.len() < spec.n {
        let idx: Vec<usize> = spec.dims.iter().map(|&d| rng.random_range(0..d)).collect();
        if seen.insert(idx.clone()) {
            let y = match spec.mode {
                Mode::Continuous => gauss(&mut rng),
                Mode::Binary => f64::from(rng.random_bool(0.5)),
            };
            batch.push(&idx, y);
        }
    }

    let d = state.input_dim();
    let mut points = DMatrix::zeros(spec.p, d);
    let mut buf = vec![0.0; d];
    for b in 0..spec.p {
        if spec.inducing_at_data {
            state.factors.assemble_into(batch.index(b), &mut buf);
        } else {
            buf.iter_mut().for_each(|v| *v = gauss(&mut rng));
        }
        for c in 0..d {
            points[(b, c)] = buf[c];
        }
    }
    state.inducing.points = points;
    Instance { state, batch }
}

/// Central differences of `f` at `x` with step `h` on every coordinate.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            buf[i] = x[i] + h;
            let up = f(&buf);
            buf[i] = x[i] - h;
            let down = f(&buf);
            buf[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over components.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> (f64, usize) {
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (x, y))| ((x - y).abs() / x.abs().max(y.abs()).max(floor), i))
        .fold((0.0, 0), |m, v| if v.0 > m.0 { v } else { m })
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| gauss(rng));
    &a * a.transpose() + DMatrix::identity(n, n) * 1e-3
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| gauss(rng))
}
