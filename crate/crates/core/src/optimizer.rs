//! Outer training loop over the packed parameters.
//!
//! Internally the optimizers minimize the negated bound; every public value
//! (objective, gradient, directions) is in the maximization convention.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::elbo::SufficientStats;
use crate::error::{Error, Result};
use crate::model::{ModelState, Mode};
use crate::parallel::{Engine, FixedPointConfig, Objective};
use crate::sptensor::EntryBatch;

const MAX_BISECTIONS: usize = 30;
const CURVATURE_EPS: f64 = 1e-10;
const REL_TOL_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "gd")]
    GradientDescent,
    #[serde(rename = "lbfgs")]
    Lbfgs,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::GradientDescent => "gd",
            Method::Lbfgs => "lbfgs",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" | "gradient_descent" => Ok(Method::GradientDescent),
            "lbfgs" => Ok(Method::Lbfgs),
            other => Err(Error::InvalidArgument(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub method: Method,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Stop when the bound changes by less than this, relative, over five iterations.
    pub elbo_rel_tol: f64,
    /// Initial gradient-descent step before backtracking.
    pub step_size: f64,
    pub lbfgs_memory: usize,
    pub c1: f64,
    pub c2: f64,
    pub fixed_point: FixedPointConfig,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            method: Method::Lbfgs,
            max_iters: 500,
            grad_tol: 1e-5,
            elbo_rel_tol: 1e-9,
            step_size: 1e-3,
            lbfgs_memory: 10,
            c1: 1e-4,
            c2: 0.9,
            fixed_point: FixedPointConfig::default(),
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "line-search constants need 0 < c1 < c2 < 1, got c1={} c2={}",
                self.c1, self.c2
            )));
        }
        if self.lbfgs_memory == 0 {
            return Err(Error::InvalidArgument("lbfgs_memory must be at least 1".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidArgument(format!("step_size must be positive, got {}", self.step_size)));
        }
        if self.grad_tol < 0.0 || self.elbo_rel_tol < 0.0 {
            return Err(Error::InvalidArgument("tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

/// One line of the training log. Iteration 0 describes the starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub elbo: f64,
    pub grad_norm: f64,
    /// Fixed-point sweeps spent on λ in this iteration (binary mode).
    pub inner_iters: usize,
    pub seconds: f64,
    /// Objective evaluations in this iteration's line search.
    pub evaluations: usize,
    /// `‖∂L/∂λ‖∞` at the accepted point (binary mode).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_grad_norm: Option<f64>,
}

pub fn write_log_line<W: Write>(record: &IterRecord, mut out: W) -> Result<()> {
    serde_json::to_writer(&mut out, record).map_err(|e| Error::Io(e.into()))?;
    out.write_all(b"\n")?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    GradTol,
    ElboRelTol,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<IterRecord>,
    /// Best accepted state, with its solved λ in binary mode.
    pub state: ModelState,
    /// Training statistics at `state`.
    pub stats: SufficientStats,
    pub stop: StopReason,
    /// Curvature pairs rejected for `sᵀy ≤ 1e-10`.
    pub skipped_pairs: usize,
    /// Smallest `dᵀ∇L / (‖d‖‖∇L‖)` over the search directions taken.
    pub min_direction_cosine: f64,
}

impl TrainReport {
    pub fn initial_elbo(&self) -> f64 {
        self.records[0].elbo
    }

    pub fn final_elbo(&self) -> f64 {
        self.records.last().expect("at least the initial record").elbo
    }

    pub fn converged(&self) -> bool {
        matches!(self.stop, StopReason::GradTol | StopReason::ElboRelTol)
    }
}

/// Stored `(s, y)` pairs for the minimization problem, oldest first.
#[derive(Debug, Clone, Default)]
pub struct LbfgsHistory {
    pairs: VecDeque<(Vec<f64>, Vec<f64>)>,
    memory: usize,
}

impl LbfgsHistory {
    pub fn new(memory: usize) -> Self {
        Self { pairs: VecDeque::with_capacity(memory), memory: memory.max(1) }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Adds a pair; returns false (and keeps the history) when `sᵀy ≤ 1e-10`.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        if dot(&s, &y) <= CURVATURE_EPS {
            return false;
        }
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y));
        true
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.pairs.iter().map(|(s, y)| (s.as_slice(), y.as_slice()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Two-loop recursion: the inverse-Hessian approximation applied to `gradient`.
/// With an ascent gradient this is an ascent direction; with no history it
/// is the gradient itself.
pub fn lbfgs_direction(history: &LbfgsHistory, gradient: &[f64]) -> Vec<f64> {
    let mut q = gradient.to_vec();
    let pairs: Vec<_> = history.pairs().collect();
    let mut alphas = vec![0.0; pairs.len()];
    for (i, (s, y)) in pairs.iter().enumerate().rev() {
        let rho = 1.0 / dot(y, s);
        let a = rho * dot(s, &q);
        alphas[i] = a;
        for (qv, yv) in q.iter_mut().zip(y.iter()) {
            *qv -= a * yv;
        }
    }
    if let Some((s, y)) = pairs.last() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (i, (s, y)) in pairs.iter().enumerate() {
        let rho = 1.0 / dot(y, s);
        let b = rho * dot(y, &q);
        for (qv, sv) in q.iter_mut().zip(s.iter()) {
            *qv += (alphas[i] - b) * sv;
        }
    }
    q
}

struct Point {
    x: Vec<f64>,
    state: ModelState,
    obj: Objective,
}

impl Point {
    fn grad_norm(&self) -> f64 {
        inf_norm(&self.obj.gradient)
    }
}

struct Evaluator<'a> {
    batch: &'a EntryBatch,
    engine: Engine,
    evaluations: usize,
    inner_iters: usize,
}

impl Evaluator<'_> {
    /// Evaluates at `x`, warm-starting λ from `from`. Numerical failures
    /// (non-positive-definite systems, non-finite values) come back as `None`.
    fn at(&mut self, from: &ModelState, x: &[f64]) -> Result<Option<Point>> {
        let mut state = from.clone();
        state.set_flat(x)?;
        self.evaluations += 1;
        match self.engine.objective(self.batch, &state) {
            Ok(obj) => {
                self.inner_iters += obj.fixed_point.as_ref().map_or(0, |f| f.iterations);
                if !obj.elbo.is_finite() || obj.gradient.iter().any(|g| !g.is_finite()) {
                    return Ok(None);
                }
                if let Some(fp) = &obj.fixed_point {
                    state = state.with_lambda(fp.lambda.clone())?;
                }
                Ok(Some(Point { x: x.to_vec(), state, obj }))
            }
            Err(Error::NotPositiveDefinite { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

fn step(x: &[f64], d: &[f64], t: f64) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + t * b).collect()
}

/// Weak-Wolfe bisection along ascent direction `d` from `cur`.
fn wolfe_search(
    ev: &mut Evaluator<'_>,
    cur: &Point,
    d: &[f64],
    t0: f64,
    c1: f64,
    c2: f64,
) -> Result<Option<Point>> {
    let f0 = -cur.obj.elbo;
    let slope0 = -dot(&cur.obj.gradient, d);
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut t = t0;
    let mut best: Option<Point> = None;
    for _ in 0..=MAX_BISECTIONS {
        let trial = ev.at(&cur.state, &step(&cur.x, d, t))?;
        match trial {
            Some(p) if -p.obj.elbo <= f0 + c1 * t * slope0 => {
                let slope = -dot(&p.obj.gradient, d);
                if slope >= c2 * slope0 {
                    return Ok(Some(p));
                }
                lo = t;
                if best.as_ref().is_none_or(|b| p.obj.elbo > b.obj.elbo) {
                    best = Some(p);
                }
                t = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * t };
            }
            _ => {
                hi = t;
                t = 0.5 * (lo + hi);
            }
        }
    }
    Ok(best)
}

/// Backtracking from `t0` until the Armijo condition holds.
fn armijo_backtrack(ev: &mut Evaluator<'_>, cur: &Point, d: &[f64], t0: f64, c1: f64) -> Result<Option<Point>> {
    let f0 = -cur.obj.elbo;
    let slope0 = -dot(&cur.obj.gradient, d);
    let mut t = t0;
    for _ in 0..=MAX_BISECTIONS {
        if let Some(p) = ev.at(&cur.state, &step(&cur.x, d, t))? {
            if -p.obj.elbo <= f0 + c1 * t * slope0 {
                return Ok(Some(p));
            }
        }
        t *= 0.5;
    }
    Ok(None)
}

/// Maximizes the tight bound from `state` with `tasks` map tasks.
pub fn train(batch: &EntryBatch, state: &ModelState, cfg: &OptimConfig, tasks: usize) -> Result<TrainReport> {
    train_with_observer(batch, state, cfg, tasks, |_| {})
}

/// As [`train`], calling `observer` with each log record as it is produced.
pub fn train_with_observer<F>(
    batch: &EntryBatch,
    state: &ModelState,
    cfg: &OptimConfig,
    tasks: usize,
    mut observer: F,
) -> Result<TrainReport>
where
    F: FnMut(&IterRecord),
{
    cfg.validate()?;
    batch.check_dims(&state.factors.dims())?;
    if state.mode() == Mode::Binary {
        batch.check_binary()?;
    }
    let engine = Engine::new(tasks)?.with_fixed_point(cfg.fixed_point);
    let mut ev = Evaluator { batch, engine, evaluations: 0, inner_iters: 0 };

    let started = Instant::now();
    let mut cur = ev
        .at(state, &state.pack().values)?
        .ok_or(Error::NotPositiveDefinite { jitter: state.jitter })?;
    let record = |it: usize, p: &Point, ev: &Evaluator<'_>, secs: f64| IterRecord {
        iteration: it,
        elbo: p.obj.elbo,
        grad_norm: p.grad_norm(),
        inner_iters: ev.inner_iters,
        seconds: secs,
        evaluations: ev.evaluations,
        lambda_grad_norm: p.obj.fixed_point.as_ref().map(|f| f.lambda_grad_norm),
    };
    let mut records = vec![record(0, &cur, &ev, started.elapsed().as_secs_f64())];
    observer(&records[0]);

    let mut history = LbfgsHistory::new(cfg.lbfgs_memory);
    let mut skipped_pairs = 0;
    let mut min_cos = f64::INFINITY;
    let mut stop = StopReason::MaxIters;

    for it in 1..=cfg.max_iters {
        if cur.grad_norm() < cfg.grad_tol {
            stop = StopReason::GradTol;
            break;
        }
        let t_start = Instant::now();
        ev.evaluations = 0;
        ev.inner_iters = 0;
        let g = &cur.obj.gradient;
        let next = match cfg.method {
            Method::GradientDescent => armijo_backtrack(&mut ev, &cur, g, cfg.step_size, cfg.c1)?,
            Method::Lbfgs => {
                let mut d = lbfgs_direction(&history, g);
                if dot(&d, g) <= 0.0 {
                    history.clear();
                    d = g.clone();
                }
                let t0 = if history.is_empty() { (1.0 / inf_norm(g)).min(1.0) } else { 1.0 };
                min_cos = min_cos.min(dot(&d, g) / (dot(&d, &d).sqrt() * dot(g, g).sqrt()));
                wolfe_search(&mut ev, &cur, &d, t0, cfg.c1, cfg.c2)?
            }
        };
        if cfg.method == Method::GradientDescent {
            min_cos = min_cos.min(1.0);
        }
        let Some(next) = next else {
            stop = StopReason::LineSearchFailed;
            break;
        };
        debug_assert!(next.obj.elbo >= cur.obj.elbo - 1e-9 * cur.obj.elbo.abs().max(1.0));
        if cfg.method == Method::Lbfgs {
            let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = next.obj.gradient.iter().zip(&cur.obj.gradient).map(|(a, b)| b - a).collect();
            if !history.push(s, y) {
                skipped_pairs += 1;
            }
        }
        cur = next;
        let rec = record(it, &cur, &ev, t_start.elapsed().as_secs_f64());
        observer(&rec);
        records.push(rec);

        if records.len() > REL_TOL_WINDOW {
            let old = records[records.len() - 1 - REL_TOL_WINDOW].elbo;
            if (cur.obj.elbo - old).abs() <= cfg.elbo_rel_tol * cur.obj.elbo.abs().max(1.0) {
                stop = StopReason::ElboRelTol;
                break;
            }
        }
    }
    if stop == StopReason::MaxIters && cur.grad_norm() < cfg.grad_tol {
        stop = StopReason::GradTol;
    }

    Ok(TrainReport {
        records,
        stats: cur.obj.stats,
        state: cur.state,
        stop,
        skipped_pairs,
        min_direction_cosine: if min_cos.is_finite() { min_cos } else { 1.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_state;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_problem(mode: Mode, seed: u64) -> (EntryBatch, ModelState) {
        let dims = [12, 10];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = EntryBatch::new(2);
        for i in 0..12 {
            for j in 0..10 {
                if rng.random_bool(0.5) {
                    let f = ((i as f64) * 0.5).sin() + ((j as f64) * 0.7).cos();
                    let y = match mode {
                        Mode::Continuous => f + 0.1 * rng.random_range(-1.0..1.0),
                        Mode::Binary => f64::from(f > 0.3),
                    };
                    b.push(&[i, j], y);
                }
            }
        }
        (b, init_state(&dims, &[2, 2], 8, mode, seed).unwrap())
    }

    #[test]
    fn empty_history_is_gradient() {
        let g = vec![1.0, -2.0, 0.5];
        assert_eq!(lbfgs_direction(&LbfgsHistory::new(5), &g), g);
    }

    #[test]
    fn history_rejects_bad_curvature_and_caps_memory() {
        let mut h = LbfgsHistory::new(2);
        assert!(!h.push(vec![1.0, 0.0], vec![-1.0, 0.0]));
        assert!(h.push(vec![1.0, 0.0], vec![1.0, 0.0]));
        assert!(h.push(vec![0.0, 1.0], vec![0.0, 2.0]));
        assert!(h.push(vec![1.0, 1.0], vec![1.0, 1.0]));
        assert_eq!(h.len(), 2);
    }

    #[test]
    fn quadratic_terminates() {
        // maximize -½ xᵀA x + bᵀx with exact line searches
        let n = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let a = &m * m.transpose() + nalgebra::DMatrix::identity(n, n);
        let b = nalgebra::DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let grad = |x: &nalgebra::DVector<f64>| &b - &a * x;
        let mut x = nalgebra::DVector::zeros(n);
        let mut h = LbfgsHistory::new(n);
        let mut iters = 0;
        while grad(&x).amax() >= 1e-8 {
            let g = grad(&x);
            let d = nalgebra::DVector::from_vec(lbfgs_direction(&h, g.as_slice()));
            assert!(d.dot(&g) > 0.0);
            let t = d.dot(&g) / (&a * &d).dot(&d);
            let xn = &x + &d * t;
            let gn = grad(&xn);
            h.push((&xn - &x).iter().copied().collect(), (&g - &gn).iter().copied().collect());
            x = xn;
            iters += 1;
            assert!(iters <= n + 2, "no termination after {iters}");
        }
    }

    #[test]
    fn zero_iterations_leave_parameters() {
        let (b, s) = small_problem(Mode::Continuous, 1);
        let cfg = OptimConfig { max_iters: 0, ..Default::default() };
        let r = train(&b, &s, &cfg, 1).unwrap();
        assert_eq!(r.state, s);
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.stop, StopReason::MaxIters);
    }

    #[test]
    fn bad_config_rejected() {
        let (b, s) = small_problem(Mode::Continuous, 1);
        for cfg in [
            OptimConfig { c1: 0.9, c2: 0.5, ..Default::default() },
            OptimConfig { lbfgs_memory: 0, ..Default::default() },
            OptimConfig { step_size: 0.0, ..Default::default() },
        ] {
            assert!(train(&b, &s, &cfg, 1).is_err());
        }
    }

    #[test]
    fn both_methods_ascend_monotonically() {
        for mode in [Mode::Continuous, Mode::Binary] {
            for method in [Method::GradientDescent, Method::Lbfgs] {
                let (b, s) = small_problem(mode, 7);
                let cfg = OptimConfig { method, max_iters: 15, ..Default::default() };
                let r = train(&b, &s, &cfg, 2).unwrap();
                assert!(r.final_elbo() > r.initial_elbo(), "{mode} {method}");
                for w in r.records.windows(2) {
                    assert!(w[1].elbo >= w[0].elbo, "{mode} {method}: {} -> {}", w[0].elbo, w[1].elbo);
                }
                assert!(r.min_direction_cosine > 0.0);
            }
        }
    }

    #[test]
    fn log_lines_are_json() {
        let rec = IterRecord {
            iteration: 3,
            elbo: -12.5,
            grad_norm: 0.25,
            inner_iters: 4,
            seconds: 0.001,
            evaluations: 2,
            lambda_grad_norm: None,
        };
        let mut buf = Vec::new();
        write_log_line(&rec, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.ends_with('\n') && !text.contains("lambda_grad_norm"));
        let back: IterRecord = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(back, rec);
    }
}
