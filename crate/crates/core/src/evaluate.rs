//! Predictions at arbitrary cells and the held-out metrics.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use nalgebra::{Cholesky, DVector, Dyn};

use crate::elbo::SufficientStats;
use crate::error::{Error, Result};
use crate::kernel::{cholesky, factorize_gram, ArdKernel, GramFactor};
use crate::model::{ModelState, Mode};
use crate::probit;
use crate::sptensor::check_index;

/// Above this many positive/negative pairs AUC switches to the rank-sum form.
const EXACT_AUC_PAIRS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub indices: Vec<Vec<usize>>,
    pub scores: Vec<f64>,
    pub targets: Vec<f64>,
}

impl PredictionSet {
    pub fn new(indices: Vec<Vec<usize>>, scores: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if indices.len() != scores.len() || scores.len() != targets.len() {
            return Err(Error::DimensionMismatch { expected: indices.len(), got: scores.len().min(targets.len()) });
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite score at position {i}")));
        }
        Ok(Self { indices, scores, targets })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Predictive mean and variance of the latent function at one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Predictive {
    pub mean: f64,
    pub variance: f64,
}

/// Shared solves for repeated prediction from one state.
struct Predictor<'a> {
    state: &'a ModelState,
    kern: ArdKernel,
    gram: GramFactor,
    /// `K_BB + β A1` (continuous) or `K_BB + A1` (binary), factorized.
    system: Option<Cholesky<f64, Dyn>>,
    /// Weights `w` with mean `k*ᵀw`.
    weights: DVector<f64>,
    b_rows: Vec<f64>,
}

impl<'a> Predictor<'a> {
    fn new(state: &'a ModelState, stats: Option<&SufficientStats>) -> Result<Self> {
        state.validate()?;
        let gram = factorize_gram(&state.inducing.points, &state.kernel, state.jitter)?;
        let p = state.num_inducing();
        if let Some(s) = stats {
            if s.num_inducing() != p {
                return Err(Error::DimensionMismatch { expected: p, got: s.num_inducing() });
            }
        }
        let (system, weights) = match state.mode() {
            Mode::Continuous => {
                let stats = stats.ok_or_else(|| Error::InvalidArgument("continuous prediction needs training statistics".into()))?;
                let beta = state.beta()?;
                let sys = cholesky(&(&gram.matrix + &stats.a1 * beta))
                    .ok_or(Error::NotPositiveDefinite { jitter: gram.jitter })?;
                let w = sys.solve(&stats.a4) * beta;
                (Some(sys), w)
            }
            Mode::Binary => {
                let sys = match stats {
                    Some(s) => Some(
                        cholesky(&(&gram.matrix + &s.a1)).ok_or(Error::NotPositiveDefinite { jitter: gram.jitter })?,
                    ),
                    None => None,
                };
                (sys, state.lambda()?.clone())
            }
        };
        Ok(Self { state, kern: ArdKernel::new(&state.kernel), gram, system, weights, b_rows: state.inducing.rows() })
    }

    fn cross(&self, index: &[usize]) -> Result<DVector<f64>> {
        check_index(&self.state.factors.dims(), index)?;
        let d = self.state.input_dim();
        let mut x = vec![0.0; d];
        self.state.factors.assemble_into(index, &mut x);
        Ok(DVector::from_iterator(self.b_rows.len() / d, self.b_rows.chunks_exact(d).map(|b| self.kern.eval(&x, b))))
    }

    fn mean(&self, index: &[usize]) -> Result<f64> {
        Ok(self.cross(index)?.dot(&self.weights))
    }

    fn predictive(&self, index: &[usize]) -> Result<Predictive> {
        let k = self.cross(index)?;
        let sys = self
            .system
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("predictive variance needs training statistics".into()))?;
        let var = self.kern.amplitude() - k.dot(&self.gram.chol.solve(&k)) + k.dot(&sys.solve(&k));
        Ok(Predictive { mean: k.dot(&self.weights), variance: var.max(0.0) })
    }
}

fn require(state: &ModelState, mode: Mode) -> Result<()> {
    if state.mode() != mode {
        return Err(Error::WrongMode(match mode {
            Mode::Continuous => "this prediction needs a continuous state",
            Mode::Binary => "this prediction needs a binary state",
        }));
    }
    Ok(())
}

/// Predictive means `β k*ᵀ (K_BB + β A1)⁻¹ a4` from the training statistics.
pub fn predict_continuous(state: &ModelState, stats: &SufficientStats, indices: &[Vec<usize>]) -> Result<Vec<f64>> {
    require(state, Mode::Continuous)?;
    let pr = Predictor::new(state, Some(stats))?;
    indices.iter().map(|i| pr.mean(i)).collect()
}

/// Predictive means and latent variances
/// `k** − k*ᵀK_BB⁻¹k* + k*ᵀ(K_BB + βA1)⁻¹k*`.
pub fn predict_continuous_full(
    state: &ModelState,
    stats: &SufficientStats,
    indices: &[Vec<usize>],
) -> Result<Vec<Predictive>> {
    require(state, Mode::Continuous)?;
    let pr = Predictor::new(state, Some(stats))?;
    indices.iter().map(|i| pr.predictive(i)).collect()
}

/// `Φ(λᵀk(B, x*))` per cell.
pub fn predict_binary_score(state: &ModelState, indices: &[Vec<usize>]) -> Result<Vec<f64>> {
    require(state, Mode::Binary)?;
    let pr = Predictor::new(state, None)?;
    indices.iter().map(|i| pr.mean(i).map(probit::cdf)).collect()
}

/// `Φ(m*/√(1 + s*²))`, integrating the latent predictive variance.
pub fn predict_binary_score_corrected(
    state: &ModelState,
    stats: &SufficientStats,
    indices: &[Vec<usize>],
) -> Result<Vec<f64>> {
    require(state, Mode::Binary)?;
    let pr = Predictor::new(state, Some(stats))?;
    indices
        .iter()
        .map(|i| pr.predictive(i).map(|p| probit::cdf(p.mean / (1.0 + p.variance).sqrt())))
        .collect()
}

pub fn mse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::DimensionMismatch { expected: targets.len(), got: predictions.len() });
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("mse of an empty set".into()));
    }
    Ok(predictions.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / predictions.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), got: scores.len() });
    }
    if let Some(i) = labels.iter().position(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::InvalidArgument(format!("label at position {i} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1.0).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0.0).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument("auc needs both positive and negative labels".into()));
    }
    let pairs = pos.len() as f64 * neg.len() as f64;
    if pos.len().saturating_mul(neg.len()) <= EXACT_AUC_PAIRS {
        let mut wins = 0.0;
        for &p in &pos {
            for &n in &neg {
                wins += match p.partial_cmp(&n).expect("no NaN") {
                    Ordering::Greater => 1.0,
                    Ordering::Equal => 0.5,
                    Ordering::Less => 0.0,
                };
            }
        }
        return Ok(wins / pairs);
    }
    // Mann-Whitney U from mid-ranks.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count() as f64 * mid;
        i = j + 1;
    }
    let np = pos.len() as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / pairs)
}

/// Writes `i_1 ... i_K score` lines.
pub fn write_predictions<W: Write>(indices: &[Vec<usize>], scores: &[f64], mut out: W) -> Result<()> {
    for (idx, s) in indices.iter().zip(scores) {
        for i in idx {
            write!(out, "{i} ")?;
        }
        writeln!(out, "{s:?}")?;
    }
    Ok(())
}

/// Reads `i_1 ... i_K score` lines, skipping blanks and `#` comments.
pub fn read_predictions<R: BufRead>(reader: R) -> Result<(Vec<Vec<usize>>, Vec<f64>)> {
    let mut indices = Vec::new();
    let mut scores = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        let bad = |msg: String| Error::Parse { line: n + 1, msg };
        if fields.len() < 3 {
            return Err(bad(format!("expected at least 2 indices and a score, got {} fields", fields.len())));
        }
        let (idx, score) = fields.split_at(fields.len() - 1);
        let idx = idx
            .iter()
            .map(|f| f.parse::<usize>().map_err(|e| bad(format!("bad index {f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let s: f64 = score[0].parse().map_err(|e| bad(format!("bad score {:?}: {e}", score[0])))?;
        if let Some(first) = indices.first() {
            let first: &Vec<usize> = first;
            if first.len() != idx.len() {
                return Err(bad(format!("expected {} indices, got {}", first.len(), idx.len())));
            }
        }
        indices.push(idx);
        scores.push(s);
    }
    Ok((indices, scores))
}
