//! Synthetic tensors drawn from the model itself.
//!
//! Factor rows come from the standard-normal prior, the latent function is a
//! random-Fourier-feature draw from the ARD GP, and observed cells are picked
//! uniformly without replacement. Continuous targets add Gaussian noise;
//! binary labels threshold `f + N(0, 1)` at zero.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::model::{LatentFactors, Mode};
use crate::sptensor::{Entry, SparseTensor};

const LABEL_BALANCE: (f64, f64) = (0.2, 0.8);
const MAX_RESAMPLES: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub dims: Vec<usize>,
    pub ranks: Vec<usize>,
    pub mode: Mode,
    /// Fraction of cells observed in the training tensor.
    pub density: f64,
    /// Held-out cells as a fraction of the training count.
    pub test_fraction: f64,
    pub amplitude: f64,
    pub lengthscale: f64,
    /// Noise precision of continuous targets.
    pub noise_precision: f64,
    pub num_features: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dims: vec![30, 30, 30],
            ranks: vec![2, 2, 2],
            mode: Mode::Continuous,
            density: 0.05,
            test_fraction: 0.25,
            amplitude: 1.0,
            lengthscale: 2.0,
            noise_precision: 10.0,
            num_features: 2048,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn train_count(&self) -> usize {
        let cells: f64 = self.dims.iter().map(|&d| d as f64).product();
        (self.density * cells).round() as usize
    }

    pub fn test_count(&self) -> usize {
        (self.test_fraction * self.train_count() as f64).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.len() != self.ranks.len() {
            return Err(Error::InvalidArgument("need matching dims and ranks for at least 2 modes".into()));
        }
        if self.dims.iter().chain(&self.ranks).any(|&v| v == 0) {
            return Err(Error::InvalidArgument("dims and ranks must be positive".into()));
        }
        if !(self.density > 0.0 && self.density <= 1.0) || !(self.test_fraction >= 0.0) {
            return Err(Error::InvalidArgument("density must be in (0, 1] and test_fraction non-negative".into()));
        }
        if !(self.amplitude > 0.0 && self.lengthscale > 0.0 && self.noise_precision > 0.0) || self.num_features == 0 {
            return Err(Error::InvalidArgument("amplitude, lengthscale, noise precision and features must be positive".into()));
        }
        let cells: f64 = self.dims.iter().map(|&d| d as f64).product();
        if (self.train_count() + self.test_count()) as f64 > cells {
            return Err(Error::InvalidArgument(format!(
                "{} training and {} test cells do not fit in {cells} cells",
                self.train_count(),
                self.test_count()
            )));
        }
        Ok(())
    }
}

/// Generating parameters, recorded next to the data.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub config: SynthConfig,
    pub factors: LatentFactors,
    pub kernel: KernelParams,
    /// Seed actually used after label-balance resampling.
    pub effective_seed: u64,
    pub resamples: usize,
    /// Fraction of label-1 training cells (binary mode).
    pub positive_fraction: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: SparseTensor,
    pub test: SparseTensor,
    /// Latent function values at the test cells, in test order.
    pub test_latent: Vec<f64>,
    pub truth: SynthTruth,
}

/// Random Fourier features for the ARD RBF kernel.
struct FourierFunction {
    omega: DMatrix<f64>,
    phase: Vec<f64>,
    weight: Vec<f64>,
    scale: f64,
}

impl FourierFunction {
    fn draw(rng: &mut ChaCha8Rng, dim: usize, features: usize, amplitude: f64, lengthscale: f64) -> Self {
        let omega = DMatrix::from_fn(features, dim, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z / lengthscale
        });
        let phase = (0..features).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let weight = (0..features).map(|_| StandardNormal.sample(rng)).collect();
        Self { omega, phase, weight, scale: (2.0 * amplitude / features as f64).sqrt() }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for f in 0..self.omega.nrows() {
            let mut arg = self.phase[f];
            for (c, xv) in x.iter().enumerate() {
                arg += self.omega[(f, c)] * xv;
            }
            s += self.weight[f] * arg.cos();
        }
        self.scale * s
    }
}

fn draw_once(cfg: &SynthConfig, seed: u64) -> Result<(SynthData, Option<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mats = cfg
        .dims
        .iter()
        .zip(&cfg.ranks)
        .map(|(&d, &r)| {
            let z: Vec<f64> = (0..d * r).map(|_| StandardNormal.sample(&mut rng)).collect();
            DMatrix::from_row_slice(d, r, &z)
        })
        .collect();
    let factors = LatentFactors::new(mats)?;
    let dim = factors.input_dim();
    let f = FourierFunction::draw(&mut rng, dim, cfg.num_features, cfg.amplitude, cfg.lengthscale);

    let (n_train, n_test) = (cfg.train_count(), cfg.test_count());
    let mut seen = HashSet::with_capacity(n_train + n_test);
    let mut cells = Vec::with_capacity(n_train + n_test);
    while cells.len() < n_train + n_test {
        let idx: Vec<usize> = cfg.dims.iter().map(|&d| rng.random_range(0..d)).collect();
        if seen.insert(idx.clone()) {
            cells.push(idx);
        }
    }

    let noise_sd = cfg.noise_precision.recip().sqrt();
    let mut x = vec![0.0; dim];
    let mut entries = Vec::with_capacity(cells.len());
    let mut latent = Vec::with_capacity(cells.len());
    for idx in cells {
        factors.assemble_into(&idx, &mut x);
        let fx = f.eval(&x);
        let e: f64 = StandardNormal.sample(&mut rng);
        let value = match cfg.mode {
            Mode::Continuous => fx + noise_sd * e,
            Mode::Binary => f64::from(fx + e > 0.0),
        };
        latent.push(fx);
        entries.push(Entry { index: idx, value });
    }
    let test_entries = entries.split_off(n_train);
    let test_latent = latent.split_off(n_train);
    let positive_fraction = (cfg.mode == Mode::Binary)
        .then(|| entries.iter().filter(|e| e.value == 1.0).count() as f64 / n_train.max(1) as f64);

    let kernel = KernelParams {
        log_amplitude: cfg.amplitude.ln(),
        log_lengthscales: vec![cfg.lengthscale.ln(); dim],
    };
    let data = SynthData {
        train: SparseTensor::new(cfg.dims.clone(), entries)?,
        test: SparseTensor::new(cfg.dims.clone(), test_entries)?,
        test_latent,
        truth: SynthTruth {
            config: cfg.clone(),
            factors,
            kernel,
            effective_seed: seed,
            resamples: 0,
            positive_fraction,
        },
    };
    Ok((data, positive_fraction))
}

/// Draws a synthetic train/test pair. Binary draws whose positive fraction
/// falls outside (20%, 80%) are redrawn with the next seed.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    for attempt in 0..=MAX_RESAMPLES {
        let seed = cfg.seed.wrapping_add(attempt as u64);
        let (mut data, frac) = draw_once(cfg, seed)?;
        let balanced = frac.is_none_or(|p| p > LABEL_BALANCE.0 && p < LABEL_BALANCE.1);
        if balanced {
            data.truth.resamples = attempt;
            return Ok(data);
        }
    }
    Err(Error::InvalidArgument(format!(
        "no label-balanced draw within {MAX_RESAMPLES} resamples; adjust amplitude or seed"
    )))
}

/// `key=value` lines describing how the data were generated.
pub fn write_truth_manifest<W: Write>(truth: &SynthTruth, mut out: W) -> Result<()> {
    let c = &truth.config;
    let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    writeln!(out, "mode={}", c.mode)?;
    writeln!(out, "dims={}", join(&c.dims))?;
    writeln!(out, "ranks={}", join(&c.ranks))?;
    writeln!(out, "seed={}", c.seed)?;
    writeln!(out, "effective_seed={}", truth.effective_seed)?;
    writeln!(out, "resamples={}", truth.resamples)?;
    writeln!(out, "density={:?}", c.density)?;
    writeln!(out, "test_fraction={:?}", c.test_fraction)?;
    writeln!(out, "amplitude={:?}", c.amplitude)?;
    writeln!(out, "lengthscale={:?}", c.lengthscale)?;
    if c.mode == Mode::Continuous {
        writeln!(out, "noise_precision={:?}", c.noise_precision)?;
    }
    writeln!(out, "num_features={}", c.num_features)?;
    if let Some(p) = truth.positive_fraction {
        writeln!(out, "positive_fraction={p:?}")?;
    }
    Ok(())
}

/// One line per factor row: `mode row v_1 ... v_r`.
pub fn write_factors<W: Write>(factors: &LatentFactors, mut out: W) -> Result<()> {
    for (k, m) in factors.matrices().iter().enumerate() {
        for i in 0..m.nrows() {
            write!(out, "{k} {i}")?;
            for v in m.row(i).iter() {
                write!(out, " {v:?}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
