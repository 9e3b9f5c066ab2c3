//! In-process map/reduce over contiguous partitions of an entry batch.
//!
//! Every map task emits dense, full-length results (sufficient statistics or
//! a gradient over all flat parameters) and the coordinator sums them in
//! partition order. An objective evaluation makes two passes: statistics,
//! then the per-entry gradient chain with the coordinator's solves broadcast
//! read-only. Binary mode solves for λ in between (Newton by default, or
//! the plain fixed point), with one probit sweep per trial λ.

use std::ops::Range;
use std::thread;

use nalgebra::DVector;

use crate::elbo::{
    fixed_point_solve, newton_solve, Closed, EvalContext, FixedPointOutcome, LambdaSolver, ProbitSweep,
    SufficientStats, DEFAULT_FP_MAX_ITER, DEFAULT_FP_TOL,
};
use crate::error::{Error, Result};
use crate::model::{ModelState, Mode};
use crate::sptensor::EntryBatch;

/// Contiguous ranges covering `0..n` whose sizes differ by at most one,
/// larger ones first. `tasks > n` yields empty trailing ranges.
pub fn partition_ranges(n: usize, tasks: usize) -> Vec<Range<usize>> {
    let tasks = tasks.max(1);
    let (base, extra) = (n / tasks, n % tasks);
    let mut start = 0;
    (0..tasks)
        .map(|t| {
            let len = base + usize::from(t < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub id: usize,
    pub range: Range<usize>,
}

pub fn partition(batch: &EntryBatch, tasks: usize) -> Result<Vec<Partition>> {
    if tasks == 0 {
        return Err(Error::InvalidArgument("task count must be at least 1".into()));
    }
    Ok(partition_ranges(batch.len(), tasks)
        .into_iter()
        .enumerate()
        .map(|(id, range)| Partition { id, range })
        .collect())
}

/// One map task's output.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult<T> {
    pub partition_id: usize,
    pub value: T,
}

/// Values that reduce by componentwise summation.
pub trait Summable: Sized {
    fn len_key(&self) -> usize;
    fn add_from(&mut self, other: &Self);
}

impl Summable for Vec<f64> {
    fn len_key(&self) -> usize {
        self.len()
    }

    fn add_from(&mut self, other: &Self) {
        for (a, b) in self.iter_mut().zip(other) {
            *a += b;
        }
    }
}

impl Summable for SufficientStats {
    fn len_key(&self) -> usize {
        self.num_inducing()
    }

    fn add_from(&mut self, other: &Self) {
        *self += other;
    }
}

impl Summable for ProbitSweep {
    fn len_key(&self) -> usize {
        self.a5.len()
    }

    fn add_from(&mut self, other: &Self) {
        self.a5 += &other.a5;
        self.log_phi_sum += other.log_phi_sum;
        if let (Some(c), Some(o)) = (self.curvature.as_mut(), other.curvature.as_ref()) {
            *c += o;
        }
    }
}

/// Sums results in ascending `partition_id`, whatever order they arrive in.
pub fn reduce<T: Summable>(mut results: Vec<LocalResult<T>>) -> Result<T> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("reduce needs at least one result".into()));
    }
    results.sort_by_key(|r| r.partition_id);
    let mut it = results.into_iter();
    let mut acc = it.next().map(|r| r.value).expect("non-empty");
    for r in it {
        if r.value.len_key() != acc.len_key() {
            return Err(Error::DimensionMismatch { expected: acc.len_key(), got: r.value.len_key() });
        }
        acc.add_from(&r.value);
    }
    Ok(acc)
}

/// Runs `f` once per partition, concurrently when there is more than one.
pub fn map_tasks<T, F>(parts: &[Partition], f: F) -> Result<Vec<LocalResult<T>>>
where
    T: Send,
    F: Fn(&Partition) -> Result<T> + Sync,
{
    if parts.len() <= 1 {
        return parts
            .iter()
            .map(|p| Ok(LocalResult { partition_id: p.id, value: f(p)? }))
            .collect();
    }
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = parts
            .iter()
            .map(|p| s.spawn(move || f(p).map(|value| LocalResult { partition_id: p.id, value })))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
            .collect()
    })
}

/// Entry statistics of one partition. `base` and `lambda` select the parts
/// as in [`EvalContext::accumulate_stats`].
pub fn map_task(
    ctx: &EvalContext<'_>,
    batch: &EntryBatch,
    part: &Partition,
    base: bool,
    lambda: Option<&DVector<f64>>,
) -> SufficientStats {
    let mut stats = SufficientStats::zeros(ctx.num_inducing());
    ctx.accumulate_stats(batch, part.range.clone(), base, lambda, &mut stats);
    stats
}

/// Solver and stopping rule for the binary λ loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointConfig {
    pub solver: LambdaSolver,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self { solver: LambdaSolver::Newton, tol: DEFAULT_FP_TOL, max_iter: DEFAULT_FP_MAX_ITER }
    }
}

/// One objective evaluation.
#[derive(Debug, Clone)]
pub struct Objective {
    pub elbo: f64,
    pub gradient: Vec<f64>,
    pub stats: SufficientStats,
    /// Binary mode only; the gradient is taken at `fixed_point.lambda`.
    pub fixed_point: Option<FixedPointOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Engine {
    tasks: usize,
    fixed_point: FixedPointConfig,
}

impl Engine {
    pub fn new(tasks: usize) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::InvalidArgument("task count must be at least 1".into()));
        }
        Ok(Self { tasks, fixed_point: FixedPointConfig::default() })
    }

    pub fn with_fixed_point(mut self, cfg: FixedPointConfig) -> Self {
        self.fixed_point = cfg;
        self
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn stats(
        &self,
        ctx: &EvalContext<'_>,
        batch: &EntryBatch,
        base: bool,
        lambda: Option<&DVector<f64>>,
    ) -> Result<SufficientStats> {
        let parts = partition(batch, self.tasks)?;
        reduce(map_tasks(&parts, |p| Ok(map_task(ctx, batch, p, base, lambda)))?)
    }

    /// One map/reduce pass for the λ-dependent sums.
    pub fn probit_sweep(
        &self,
        ctx: &EvalContext<'_>,
        batch: &EntryBatch,
        lambda: &DVector<f64>,
        curvature: bool,
    ) -> Result<ProbitSweep> {
        let parts = partition(batch, self.tasks)?;
        reduce(map_tasks(&parts, |p| {
            let mut sw = ProbitSweep::zeros(ctx.num_inducing(), curvature);
            ctx.probit_sweep(batch, p.range.clone(), lambda, &mut sw);
            Ok(sw)
        })?)
    }

    /// Solves for λ from the state's value, given the reduced `A1`.
    pub fn solve_lambda(
        &self,
        ctx: &EvalContext<'_>,
        batch: &EntryBatch,
        stats: &SufficientStats,
    ) -> Result<FixedPointOutcome> {
        let cfg = &self.fixed_point;
        let lambda0 = ctx.state.lambda()?.clone();
        match cfg.solver {
            LambdaSolver::FixedPoint => fixed_point_solve(
                &ctx.gram,
                &stats.a1,
                lambda0,
                |lam| self.probit_sweep(ctx, batch, lam, false),
                cfg.tol,
                cfg.max_iter,
            ),
            LambdaSolver::Newton => newton_solve(
                &ctx.gram,
                &stats.a1,
                lambda0,
                |lam| self.probit_sweep(ctx, batch, lam, true),
                cfg.tol,
                cfg.max_iter,
            ),
        }
    }

    fn gradient(
        &self,
        ctx: &EvalContext<'_>,
        batch: &EntryBatch,
        closed: &Closed,
        stats: &SufficientStats,
    ) -> Result<Vec<f64>> {
        let n = ctx.state.layout().len();
        let adj = closed.adjoint.as_ref().expect("closed with gradient");
        let parts = partition(batch, self.tasks)?;
        let mut grad = reduce(map_tasks(&parts, |p| {
            let mut g = vec![0.0; n];
            ctx.accumulate_entry_gradient(adj, batch, p.range.clone(), &mut g);
            Ok(g)
        })?)?;
        ctx.accumulate_global_gradient(closed, stats, &mut grad);
        Ok(grad)
    }

    /// Bound and gradient. Binary mode first converges λ starting from the
    /// state's value.
    pub fn objective(&self, batch: &EntryBatch, state: &ModelState) -> Result<Objective> {
        batch.check_dims(&state.factors.dims())?;
        match state.mode() {
            Mode::Continuous => {
                let ctx = EvalContext::new(state)?;
                let stats = self.stats(&ctx, batch, true, None)?;
                let closed = ctx.close(&stats, true)?;
                let gradient = self.gradient(&ctx, batch, &closed, &stats)?;
                Ok(Objective { elbo: closed.elbo, gradient, stats, fixed_point: None })
            }
            Mode::Binary => {
                batch.check_binary()?;
                let ctx = EvalContext::new(state)?;
                let mut stats = self.stats(&ctx, batch, true, None)?;
                let outcome = self.solve_lambda(&ctx, batch, &stats)?;
                stats.set_probit(&outcome.sweep);
                let solved = state.with_lambda(outcome.lambda.clone())?;
                let ctx = EvalContext::new(&solved)?;
                let closed = ctx.close(&stats, true)?;
                let gradient = self.gradient(&ctx, batch, &closed, &stats)?;
                Ok(Objective { elbo: closed.elbo, gradient, stats, fixed_point: Some(outcome) })
            }
        }
    }

    /// Bound only, without the gradient pass. Binary mode still solves for λ.
    pub fn value(&self, batch: &EntryBatch, state: &ModelState) -> Result<(f64, Option<FixedPointOutcome>)> {
        batch.check_dims(&state.factors.dims())?;
        let ctx = EvalContext::new(state)?;
        match state.mode() {
            Mode::Continuous => {
                let stats = self.stats(&ctx, batch, true, None)?;
                Ok((ctx.close(&stats, false)?.elbo, None))
            }
            Mode::Binary => {
                batch.check_binary()?;
                let mut stats = self.stats(&ctx, batch, true, None)?;
                let outcome = self.solve_lambda(&ctx, batch, &stats)?;
                stats.set_probit(&outcome.sweep);
                let solved = state.with_lambda(outcome.lambda.clone())?;
                let elbo = EvalContext::new(&solved)?.close(&stats, false)?.elbo;
                Ok((elbo, Some(outcome)))
            }
        }
    }
}

/// Bound and flat gradient with `tasks` map tasks.
pub fn parallel_objective(batch: &EntryBatch, state: &ModelState, tasks: usize) -> Result<(f64, Vec<f64>)> {
    let obj = Engine::new(tasks)?.objective(batch, state)?;
    Ok((obj.elbo, obj.gradient))
}

/// Host parallelism, falling back to one task.
pub fn default_tasks() -> usize {
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}
