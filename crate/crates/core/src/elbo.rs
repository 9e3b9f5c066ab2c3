//! Tight variational bounds for continuous and binary tensors, their
//! gradients, the fixed-point update of the binary decoupling vector, and
//! the optimal variational posteriors.
//!
//! Everything that touches individual entries is written against a slice of
//! an [`EntryBatch`] and accumulates into additive statistics or a full-length
//! gradient buffer, so the parallel engine can run the same code per
//! partition and sum the results.

use std::f64::consts::PI;
use std::ops::{AddAssign, Range};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernel::{cholesky, factorize_gram, ArdKernel, GramFactor};
use crate::model::{log_prior, Likelihood, ModelState, Mode, ParamLayout};
use crate::probit;
use crate::sptensor::EntryBatch;

/// Entries per kernel block; bounds the per-task scratch memory.
const CHUNK: usize = 64;

pub const DEFAULT_FP_TOL: f64 = 1e-8;
pub const DEFAULT_FP_MAX_ITER: usize = 100;

/// Entry sums that make the bounds additive over tensor entries.
///
/// `a2`/`a4` are filled in continuous mode only; `a5` and `log_phi_sum`
/// (`Σ_j log Φ((2y_j − 1) λᵀk_j)`) in binary mode only, at a given `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub a1: DMatrix<f64>,
    pub a2: f64,
    pub a3: f64,
    pub a4: DVector<f64>,
    pub a5: DVector<f64>,
    pub log_phi_sum: f64,
    pub n: usize,
}

impl SufficientStats {
    pub fn zeros(p: usize) -> Self {
        Self {
            a1: DMatrix::zeros(p, p),
            a2: 0.0,
            a3: 0.0,
            a4: DVector::zeros(p),
            a5: DVector::zeros(p),
            log_phi_sum: 0.0,
            n: 0,
        }
    }

    pub fn num_inducing(&self) -> usize {
        self.a4.len()
    }

    /// Replaces the λ-dependent parts with those of `sweep`.
    pub fn set_probit(&mut self, sweep: &ProbitSweep) {
        self.a5.copy_from(&sweep.a5);
        self.log_phi_sum = sweep.log_phi_sum;
    }
}

impl AddAssign<&SufficientStats> for SufficientStats {
    fn add_assign(&mut self, o: &SufficientStats) {
        self.a1 += &o.a1;
        self.a2 += o.a2;
        self.a3 += o.a3;
        self.a4 += &o.a4;
        self.a5 += &o.a5;
        self.log_phi_sum += o.log_phi_sum;
        self.n += o.n;
    }
}

/// The λ-dependent sums of one pass over the entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbitSweep {
    pub a5: DVector<f64>,
    pub log_phi_sum: f64,
    /// `Σ_j c_j k_j k_jᵀ` with `c_j = w_j (η_j + w_j)`, when requested.
    pub curvature: Option<DMatrix<f64>>,
}

impl ProbitSweep {
    pub fn zeros(p: usize, curvature: bool) -> Self {
        Self { a5: DVector::zeros(p), log_phi_sum: 0.0, curvature: curvature.then(|| DMatrix::zeros(p, p)) }
    }
}

/// How the binary decoupling vector is solved for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaSolver {
    /// The monotone update `λ ← (K_BB + A1)⁻¹(A1 λ + a5)`.
    FixedPoint,
    /// Newton steps on the concave λ objective with the exact probit
    /// curvature, halved until the objective does not decrease and falling
    /// back to the fixed-point update.
    Newton,
}

/// Gaussian `q(v) = N(mean, cov)` over the inducing targets.
#[derive(Debug, Clone, PartialEq)]
pub struct QvPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Moments of the optimal truncated-Gaussian `q(z_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncGaussMoments {
    pub eta: Vec<f64>,
    pub mean: Vec<f64>,
    pub weight: Vec<f64>,
}

/// Read-only per-evaluation data shared by all map tasks: the kernel, the
/// inducing points in row-major order and the factorized `K_BB`.
pub struct EvalContext<'a> {
    pub state: &'a ModelState,
    pub kern: ArdKernel,
    pub gram: GramFactor,
    b_rows: Vec<f64>,
    p: usize,
    d: usize,
}

impl<'a> EvalContext<'a> {
    pub fn new(state: &'a ModelState) -> Result<Self> {
        state.validate()?;
        let gram = factorize_gram(&state.inducing.points, &state.kernel, state.jitter)?;
        Ok(Self {
            state,
            kern: ArdKernel::new(&state.kernel),
            gram,
            b_rows: state.inducing.rows(),
            p: state.num_inducing(),
            d: state.input_dim(),
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.p
    }

    fn inducing_row(&self, b: usize) -> &[f64] {
        &self.b_rows[b * self.d..(b + 1) * self.d]
    }

    /// Fills `xs` (row-major inputs) and `kc[(j, b)] = k(x_j, b_b)` for entries `range`.
    fn fill_chunk(&self, batch: &EntryBatch, range: Range<usize>, xs: &mut [f64], kc: &mut DMatrix<f64>) {
        let d = self.d;
        for (row, j) in range.enumerate() {
            let x = &mut xs[row * d..(row + 1) * d];
            self.state.factors.assemble_into(batch.index(j), x);
            for b in 0..self.p {
                kc[(row, b)] = self.kern.eval(x, self.inducing_row(b));
            }
        }
    }

    fn chunks(range: Range<usize>) -> impl Iterator<Item = Range<usize>> {
        let end = range.end;
        range.step_by(CHUNK).map(move |s| s..(s + CHUNK).min(end))
    }

    /// Accumulates entry sums over `range`. `base` adds `A1`, `a3`, `n` (and
    /// `a2`, `a4` in continuous mode); `lambda` adds `a5` and the probit sum.
    pub fn accumulate_stats(
        &self,
        batch: &EntryBatch,
        range: Range<usize>,
        base: bool,
        lambda: Option<&DVector<f64>>,
        out: &mut SufficientStats,
    ) {
        let continuous = self.state.mode() == Mode::Continuous;
        let mut xs = vec![0.0; CHUNK * self.d];
        let mut kc = DMatrix::zeros(CHUNK, self.p);
        let mut eta = DVector::zeros(CHUNK);
        let mut col = DVector::zeros(CHUNK);
        for chunk in Self::chunks(range) {
            let len = chunk.len();
            if len != kc.nrows() {
                kc = DMatrix::zeros(len, self.p);
                eta = DVector::zeros(len);
                col = DVector::zeros(len);
            }
            self.fill_chunk(batch, chunk.clone(), &mut xs, &mut kc);
            if base {
                out.a1.gemm_tr(1.0, &kc, &kc, 1.0);
                out.a3 += len as f64 * self.kern.amplitude();
                out.n += len;
                if continuous {
                    for (row, j) in chunk.clone().enumerate() {
                        let y = batch.target(j);
                        col[row] = y;
                        out.a2 += y * y;
                    }
                    out.a4.gemv_tr(1.0, &kc, &col, 1.0);
                }
            }
            if let Some(lam) = lambda {
                eta.gemv(1.0, &kc, lam, 0.0);
                for (row, j) in chunk.clone().enumerate() {
                    let y = batch.target(j);
                    let s = 2.0 * y - 1.0;
                    out.log_phi_sum += probit::log_cdf(s * eta[row]);
                    col[row] = probit::probit_weight(eta[row], y);
                }
                out.a5.gemv_tr(1.0, &kc, &col, 1.0);
            }
        }
    }

    /// λ-dependent sums over `range`, optionally with the probit curvature.
    pub fn probit_sweep(&self, batch: &EntryBatch, range: Range<usize>, lambda: &DVector<f64>, out: &mut ProbitSweep) {
        let mut xs = vec![0.0; CHUNK * self.d];
        let mut kc = DMatrix::zeros(CHUNK, self.p);
        let mut scaled = DMatrix::zeros(CHUNK, self.p);
        let mut eta = DVector::zeros(CHUNK);
        let mut w = DVector::zeros(CHUNK);
        for chunk in Self::chunks(range) {
            let len = chunk.len();
            if len != kc.nrows() {
                kc = DMatrix::zeros(len, self.p);
                scaled = DMatrix::zeros(len, self.p);
                eta = DVector::zeros(len);
                w = DVector::zeros(len);
            }
            self.fill_chunk(batch, chunk.clone(), &mut xs, &mut kc);
            eta.gemv(1.0, &kc, lambda, 0.0);
            for (row, j) in chunk.enumerate() {
                let y = batch.target(j);
                out.log_phi_sum += probit::log_cdf((2.0 * y - 1.0) * eta[row]);
                w[row] = probit::probit_weight(eta[row], y);
            }
            out.a5.gemv_tr(1.0, &kc, &w, 1.0);
            if let Some(c) = out.curvature.as_mut() {
                for row in 0..len {
                    let cj = (w[row] * (eta[row] + w[row])).clamp(0.0, 1.0).sqrt();
                    for b in 0..self.p {
                        scaled[(row, b)] = cj * kc[(row, b)];
                    }
                }
                c.gemm_tr(1.0, &scaled, &scaled, 1.0);
            }
        }
    }

    /// Pushes the per-entry adjoints through `k(B, x_j)` into factor rows,
    /// inducing points and kernel hyperparameters, accumulating into `grad`.
    pub fn accumulate_entry_gradient(
        &self,
        adj: &EntryAdjoint,
        batch: &EntryBatch,
        range: Range<usize>,
        grad: &mut [f64],
    ) {
        let layout = self.state.layout();
        let (p, d) = (self.p, self.d);
        let ranks = layout.ranks().to_vec();
        let mut xs = vec![0.0; CHUNK * d];
        let mut kc = DMatrix::zeros(CHUNK, p);
        let mut h = DMatrix::zeros(CHUNK, p);
        let mut g_b = vec![0.0; p * d];
        let mut g_amp = 0.0;
        let mut g_ls = vec![0.0; d];
        let mut gx = vec![0.0; d];

        for chunk in Self::chunks(range) {
            let len = chunk.len();
            if len != kc.nrows() {
                kc = DMatrix::zeros(len, p);
                h = DMatrix::zeros(len, p);
            }
            self.fill_chunk(batch, chunk.clone(), &mut xs, &mut kc);
            // H = K_c (2 G_A) + s vᵀ
            h.gemm(1.0, &kc, &adj.two_g_a1, 0.0);
            for (row, j) in chunk.clone().enumerate() {
                let y = batch.target(j);
                let s = match &adj.row_weight {
                    RowWeight::Target => y,
                    RowWeight::Probit => {
                        let eta = kc.row(row).dot(&adj.v.transpose());
                        probit::probit_weight(eta, y)
                    }
                };
                if s != 0.0 {
                    for b in 0..p {
                        h[(row, b)] += s * adj.v[b];
                    }
                }
            }

            for (row, j) in chunk.enumerate() {
                let x = &xs[row * d..(row + 1) * d];
                gx.iter_mut().for_each(|v| *v = 0.0);
                for b in 0..p {
                    let scale = h[(row, b)];
                    if scale == 0.0 {
                        continue;
                    }
                    self.kern.accumulate_grads(
                        x,
                        self.inducing_row(b),
                        kc[(row, b)],
                        scale,
                        Some(&mut gx),
                        Some(&mut g_b[b * d..(b + 1) * d]),
                        &mut g_amp,
                        &mut g_ls,
                    );
                }
                let mut off = 0;
                for (k, &i) in batch.index(j).iter().enumerate() {
                    let dst = layout.factor_row_offset(k, i);
                    for c in 0..ranks[k] {
                        grad[dst + c] += gx[off + c];
                    }
                    off += ranks[k];
                }
            }
        }

        let off = layout.inducing_offset();
        for (g, v) in grad[off..off + p * d].iter_mut().zip(&g_b) {
            *g += v;
        }
        let off = layout.kernel_offset();
        grad[off] += g_amp;
        for (g, v) in grad[off + 1..off + 1 + d].iter_mut().zip(&g_ls) {
            *g += v;
        }
    }

    /// Closes the bound from reduced statistics. With `with_grad`, also
    /// returns the adjoints the entry pass and the global pass need.
    pub fn close(&self, stats: &SufficientStats, with_grad: bool) -> Result<Closed> {
        if stats.num_inducing() != self.p {
            return Err(Error::DimensionMismatch { expected: self.p, got: stats.num_inducing() });
        }
        let k = &self.gram.matrix;
        let log_det_k = self.gram.log_det();
        let k_inv = self.gram.chol.inverse();
        let trace_kinv_a1 = k_inv.component_mul(&stats.a1).sum();
        let prior = log_prior(&self.state.factors);
        let n = stats.n as f64;

        match &self.state.likelihood {
            Likelihood::Gaussian { log_precision } => {
                let beta = log_precision.exp();
                let m = k + &stats.a1 * beta;
                let m_chol = cholesky(&m).ok_or(Error::NotPositiveDefinite { jitter: self.gram.jitter })?;
                let log_det_m = chol_log_det(&m_chol);
                let c = m_chol.solve(&stats.a4);
                let a4_c = stats.a4.dot(&c);
                let elbo = 0.5 * log_det_k - 0.5 * log_det_m - 0.5 * beta * stats.a2 - 0.5 * beta * stats.a3
                    + 0.5 * beta * trace_kinv_a1
                    + prior
                    + 0.5 * beta * beta * a4_c
                    + 0.5 * n * (beta / (2.0 * PI)).ln();
                if !with_grad {
                    return Ok(Closed::value_only(elbo));
                }
                let m_inv = m_chol.inverse();
                let cct = &c * c.transpose();
                let kak = &k_inv * &stats.a1 * &k_inv;
                let g_k = (&k_inv - &m_inv - &kak * beta - &cct * (beta * beta)) * 0.5;
                let two_g_a1 = (&k_inv - &m_inv) * beta - &cct * beta.powi(3);
                let trace_minv_a1 = m_inv.component_mul(&stats.a1).sum();
                let c_a1_c = (&stats.a1 * &c).dot(&c);
                let d_beta = -0.5 * trace_minv_a1 - 0.5 * stats.a2 - 0.5 * stats.a3 + 0.5 * trace_kinv_a1
                    + beta * a4_c
                    - 0.5 * beta * beta * c_a1_c
                    + 0.5 * n / beta;
                Ok(Closed {
                    elbo,
                    adjoint: Some(EntryAdjoint { two_g_a1, v: c * (beta * beta), row_weight: RowWeight::Target }),
                    g_k: Some(g_k),
                    g_a3: -0.5 * beta,
                    d_log_beta: Some(beta * d_beta),
                })
            }
            Likelihood::Probit { lambda } => {
                let m = k + &stats.a1;
                let m_chol = cholesky(&m).ok_or(Error::NotPositiveDefinite { jitter: self.gram.jitter })?;
                let log_det_m = chol_log_det(&m_chol);
                let lkl = (k * lambda).dot(lambda);
                let elbo = 0.5 * log_det_k - 0.5 * log_det_m - 0.5 * stats.a3 + stats.log_phi_sum - 0.5 * lkl
                    + 0.5 * trace_kinv_a1
                    + prior;
                if !with_grad {
                    return Ok(Closed::value_only(elbo));
                }
                let m_inv = m_chol.inverse();
                let kak = &k_inv * &stats.a1 * &k_inv;
                let llt = lambda * lambda.transpose();
                let g_k = (&k_inv - &m_inv - &kak - &llt) * 0.5;
                let two_g_a1 = &k_inv - &m_inv;
                Ok(Closed {
                    elbo,
                    adjoint: Some(EntryAdjoint { two_g_a1, v: lambda.clone(), row_weight: RowWeight::Probit }),
                    g_k: Some(g_k),
                    g_a3: -0.5,
                    d_log_beta: None,
                })
            }
        }
    }

    /// Adds the terms that do not decompose over entries: the factor prior,
    /// the `K_BB` chain, the `a3` chain and `∂/∂log β`.
    pub fn accumulate_global_gradient(&self, closed: &Closed, stats: &SufficientStats, grad: &mut [f64]) {
        let layout: ParamLayout = self.state.layout();
        let (p, d) = (self.p, self.d);
        for (k, m) in self.state.factors.matrices().iter().enumerate() {
            for i in 0..m.nrows() {
                let off = layout.factor_row_offset(k, i);
                for c in 0..m.ncols() {
                    grad[off + c] -= m[(i, c)];
                }
            }
        }

        let g_k = closed.g_k.as_ref().expect("closed with gradient");
        let kmat = &self.gram.matrix;
        let mut g_b = vec![0.0; p * d];
        let mut g_amp = 0.0;
        let mut g_ls = vec![0.0; d];
        for a in 0..p {
            g_amp += g_k[(a, a)] * kmat[(a, a)];
            for b in 0..a {
                let scale = 2.0 * g_k[(a, b)];
                let (lo, hi) = g_b.split_at_mut(a * d);
                self.kern.accumulate_grads(
                    self.inducing_row(a),
                    self.inducing_row(b),
                    kmat[(a, b)],
                    scale,
                    Some(&mut hi[..d]),
                    Some(&mut lo[b * d..(b + 1) * d]),
                    &mut g_amp,
                    &mut g_ls,
                );
            }
        }
        // a3 = n σ²
        g_amp += closed.g_a3 * stats.a3;

        let off = layout.inducing_offset();
        for (g, v) in grad[off..off + p * d].iter_mut().zip(&g_b) {
            *g += v;
        }
        let off = layout.kernel_offset();
        grad[off] += g_amp;
        for (g, v) in grad[off + 1..off + 1 + d].iter_mut().zip(&g_ls) {
            *g += v;
        }
        if let (Some(noise), Some(db)) = (layout.noise_offset(), closed.d_log_beta) {
            grad[noise] += db;
        }
    }

    /// `(K_BB + A1)` factorized, for the binary fixed-point update.
    pub fn factor_fixed_point_system(&self, a1: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
        cholesky(&(&self.gram.matrix + a1)).ok_or(Error::NotPositiveDefinite { jitter: self.gram.jitter })
    }
}

fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// How each entry's row of the adjoint picks up the rank-one term `s_j v`.
#[derive(Debug, Clone, PartialEq)]
pub enum RowWeight {
    /// `s_j = y_j` (continuous, `v = β² (K_BB + β A1)⁻¹ a4`).
    Target,
    /// `s_j = w_j(λᵀk_j)` (binary, `v = λ`).
    Probit,
}

/// Broadcast data for the per-entry gradient pass: the adjoint of `k(B, x_j)`
/// is `2 G_A k_j + s_j v`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryAdjoint {
    pub two_g_a1: DMatrix<f64>,
    pub v: DVector<f64>,
    pub row_weight: RowWeight,
}

/// Result of closing a bound on the coordinator.
#[derive(Debug, Clone, PartialEq)]
pub struct Closed {
    pub elbo: f64,
    pub adjoint: Option<EntryAdjoint>,
    pub g_k: Option<DMatrix<f64>>,
    pub g_a3: f64,
    pub d_log_beta: Option<f64>,
}

impl Closed {
    fn value_only(elbo: f64) -> Self {
        Self { elbo, adjoint: None, g_k: None, g_a3: 0.0, d_log_beta: None }
    }
}

fn check_batch(batch: &EntryBatch, state: &ModelState) -> Result<()> {
    batch.check_dims(&state.factors.dims())?;
    if state.mode() == Mode::Binary {
        batch.check_binary()?;
    }
    Ok(())
}

/// Entry sums over the whole batch; binary mode evaluates the probit parts
/// at the state's `λ`.
pub fn compute_stats(batch: &EntryBatch, state: &ModelState) -> Result<SufficientStats> {
    check_batch(batch, state)?;
    let ctx = EvalContext::new(state)?;
    let mut stats = SufficientStats::zeros(state.num_inducing());
    let lambda = state.lambda().ok();
    ctx.accumulate_stats(batch, 0..batch.len(), true, lambda, &mut stats);
    Ok(stats)
}

pub fn tight_elbo_continuous(stats: &SufficientStats, state: &ModelState) -> Result<f64> {
    if state.mode() != Mode::Continuous {
        return Err(Error::WrongMode("tight_elbo_continuous needs a continuous state"));
    }
    Ok(EvalContext::new(state)?.close(stats, false)?.elbo)
}

/// Binary bound at the state's `λ`; `stats` must have been computed at that `λ`.
pub fn tight_elbo_binary(stats: &SufficientStats, state: &ModelState) -> Result<f64> {
    if state.mode() != Mode::Binary {
        return Err(Error::WrongMode("tight_elbo_binary needs a binary state"));
    }
    Ok(EvalContext::new(state)?.close(stats, false)?.elbo)
}

fn serial_gradient(batch: &EntryBatch, state: &ModelState) -> Result<(f64, Vec<f64>)> {
    check_batch(batch, state)?;
    let ctx = EvalContext::new(state)?;
    let mut stats = SufficientStats::zeros(state.num_inducing());
    ctx.accumulate_stats(batch, 0..batch.len(), true, state.lambda().ok(), &mut stats);
    let closed = ctx.close(&stats, true)?;
    let mut grad = vec![0.0; state.layout().len()];
    ctx.accumulate_entry_gradient(closed.adjoint.as_ref().expect("gradient"), batch, 0..batch.len(), &mut grad);
    ctx.accumulate_global_gradient(&closed, &stats, &mut grad);
    Ok((closed.elbo, grad))
}

/// Gradient of the continuous bound with respect to every packed parameter.
pub fn grad_continuous(batch: &EntryBatch, state: &ModelState) -> Result<Vec<f64>> {
    if state.mode() != Mode::Continuous {
        return Err(Error::WrongMode("grad_continuous needs a continuous state"));
    }
    Ok(serial_gradient(batch, state)?.1)
}

/// Gradient of the binary bound at fixed `λ`.
pub fn grad_binary(batch: &EntryBatch, state: &ModelState) -> Result<Vec<f64>> {
    if state.mode() != Mode::Binary {
        return Err(Error::WrongMode("grad_binary needs a binary state"));
    }
    Ok(serial_gradient(batch, state)?.1)
}

/// `∂L2*/∂λ = a5 − K_BB λ`, with `a5` taken from `stats` (computed at `λ`).
pub fn lambda_gradient(stats: &SufficientStats, gram: &GramFactor, lambda: &DVector<f64>) -> DVector<f64> {
    &stats.a5 - &gram.matrix * lambda
}

/// One update `λ ← (K_BB + A1)⁻¹ (A1 λ + a5)`.
pub fn fixed_point_step(lambda: &DVector<f64>, stats: &SufficientStats, gram: &GramFactor) -> Result<DVector<f64>> {
    let system = cholesky(&(&gram.matrix + &stats.a1)).ok_or(Error::NotPositiveDefinite { jitter: gram.jitter })?;
    Ok(system.solve(&(&stats.a1 * lambda + &stats.a5)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointOutcome {
    pub lambda: DVector<f64>,
    /// Probit sums evaluated at the returned `λ`.
    pub sweep: ProbitSweep,
    pub iterations: usize,
    pub converged: bool,
    /// `Σ log Φ − ½ λᵀK_BB λ` at every iterate, starting with the initial `λ`.
    /// The remaining terms of the binary bound do not depend on `λ`.
    pub lambda_objective: Vec<f64>,
    /// `‖a5 − K_BB λ‖∞` at the returned `λ`.
    pub lambda_grad_norm: f64,
}

fn lambda_objective(gram: &GramFactor, sw: &ProbitSweep, lam: &DVector<f64>) -> f64 {
    sw.log_phi_sum - 0.5 * (&gram.matrix * lam).dot(lam)
}

/// Iterates the fixed-point update until `‖Δλ‖∞ < tol` or `max_iter` steps.
/// `sweep` returns `a5` and the probit sum at a given `λ`; it is the only
/// pass over the entries per step. Hitting `max_iter` is reported through
/// `converged`, not as an error.
pub fn fixed_point_solve<F>(
    gram: &GramFactor,
    a1: &DMatrix<f64>,
    lambda0: DVector<f64>,
    mut sweep: F,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<ProbitSweep>,
{
    let system = cholesky(&(&gram.matrix + a1)).ok_or(Error::NotPositiveDefinite { jitter: gram.jitter })?;
    let objective = |sw: &ProbitSweep, lam: &DVector<f64>| lambda_objective(gram, sw, lam);

    let mut lambda = lambda0;
    let mut sw = sweep(&lambda)?;
    let mut trace = vec![objective(&sw, &lambda)];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let next = system.solve(&(a1 * &lambda + &sw.a5));
        let delta = (&next - &lambda).amax();
        lambda = next;
        sw = sweep(&lambda)?;
        trace.push(objective(&sw, &lambda));
        iterations += 1;
        if delta < tol {
            converged = true;
            break;
        }
    }
    let lambda_grad_norm = (&sw.a5 - &gram.matrix * &lambda).amax();
    Ok(FixedPointOutcome { lambda, sweep: sw, iterations, converged, lambda_objective: trace, lambda_grad_norm })
}

/// Newton iteration on the λ objective `Σ log Φ − ½ λᵀK_BB λ`, which is
/// strictly concave. `sweep` must fill the curvature. Each step is halved
/// until the objective does not decrease; after ten halvings the plain
/// fixed-point step is taken instead. Stops when `‖Δλ‖∞ < tol`.
pub fn newton_solve<F>(
    gram: &GramFactor,
    a1: &DMatrix<f64>,
    lambda0: DVector<f64>,
    mut sweep: F,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<ProbitSweep>,
{
    let npd = || Error::NotPositiveDefinite { jitter: gram.jitter };
    let mut lambda = lambda0;
    let mut sw = sweep(&lambda)?;
    let mut obj = lambda_objective(gram, &sw, &lambda);
    let mut trace = vec![obj];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let g = &sw.a5 - &gram.matrix * &lambda;
        let curv = sw.curvature.as_ref().ok_or_else(|| Error::InvalidArgument("sweep lacks curvature".into()))?;
        let dir = cholesky(&(&gram.matrix + curv)).ok_or_else(npd)?.solve(&g);
        let slack = 1e-13 * obj.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..10 {
            let cand = &lambda + &dir * t;
            let csw = sweep(&cand)?;
            let cobj = lambda_objective(gram, &csw, &cand);
            if cobj >= obj - slack {
                accepted = Some((cand, csw, cobj));
                break;
            }
            t *= 0.5;
        }
        let (next, nsw, nobj) = match accepted {
            Some(a) => a,
            None => {
                let cand = cholesky(&(&gram.matrix + a1)).ok_or_else(npd)?.solve(&(a1 * &lambda + &sw.a5));
                let csw = sweep(&cand)?;
                let cobj = lambda_objective(gram, &csw, &cand);
                (cand, csw, cobj)
            }
        };
        let delta = (&next - &lambda).amax();
        lambda = next;
        sw = nsw;
        obj = nobj;
        trace.push(obj);
        iterations += 1;
        if delta < tol {
            converged = true;
            break;
        }
    }
    let lambda_grad_norm = (&sw.a5 - &gram.matrix * &lambda).amax();
    Ok(FixedPointOutcome { lambda, sweep: sw, iterations, converged, lambda_objective: trace, lambda_grad_norm })
}

/// Serial fixed-point solve over a whole batch, warm-started at the state's `λ`.
pub fn solve_lambda(batch: &EntryBatch, state: &ModelState, tol: f64, max_iter: usize) -> Result<FixedPointOutcome> {
    check_batch(batch, state)?;
    let lambda0 = state.lambda()?.clone();
    let ctx = EvalContext::new(state)?;
    let mut stats = SufficientStats::zeros(state.num_inducing());
    ctx.accumulate_stats(batch, 0..batch.len(), true, None, &mut stats);
    fixed_point_solve(
        &ctx.gram,
        &stats.a1,
        lambda0,
        |lam| {
            let mut s = SufficientStats::zeros(ctx.num_inducing());
            ctx.accumulate_stats(batch, 0..batch.len(), false, Some(lam), &mut s);
            Ok(ProbitSweep { a5: s.a5, log_phi_sum: s.log_phi_sum, curvature: None })
        },
        tol,
        max_iter,
    )
}

/// Optimal `q(v)`: `μ = β K (K + βA1)⁻¹ a4`, `Λ = K (K + βA1)⁻¹ K`.
pub fn optimal_qv(stats: &SufficientStats, state: &ModelState) -> Result<QvPosterior> {
    let beta = state.beta()?;
    let gram = factorize_gram(&state.inducing.points, &state.kernel, state.jitter)?;
    let k = &gram.matrix;
    let m = k + &stats.a1 * beta;
    let m_chol = cholesky(&m).ok_or(Error::NotPositiveDefinite { jitter: gram.jitter })?;
    let mean = k * m_chol.solve(&stats.a4) * beta;
    let cov = k * m_chol.solve(k);
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(QvPosterior { mean, cov })
}

/// Per-entry moments of the optimal `q(z_j)` at the state's `λ`:
/// `η_j = λᵀk(B, x_j)`, `w_j = s φ(η_j)/Φ(s η_j)`, `⟨z_j⟩ = η_j + w_j`.
pub fn trunc_gauss_moments(batch: &EntryBatch, state: &ModelState) -> Result<TruncGaussMoments> {
    check_batch(batch, state)?;
    let lambda = state.lambda()?;
    let kern = ArdKernel::new(&state.kernel);
    let b_rows = state.inducing.rows();
    let d = state.input_dim();
    let mut x = vec![0.0; d];
    let mut out = TruncGaussMoments { eta: vec![], mean: vec![], weight: vec![] };
    for (idx, y) in batch.iter() {
        state.factors.assemble_into(idx, &mut x);
        let eta: f64 = b_rows
            .chunks_exact(d)
            .zip(lambda.iter())
            .map(|(b, l)| l * kern.eval(&x, b))
            .sum();
        let w = probit::probit_weight(eta, y);
        out.eta.push(eta);
        out.weight.push(w);
        out.mean.push(eta + w);
    }
    Ok(out)
}

/// Both sides of `ηᵀE⁻¹η ≥ 2λᵀη − λᵀEλ` for symmetric positive definite `E`.
pub fn conjugate_bound_check(e: &DMatrix<f64>, eta: &DVector<f64>, lam: &DVector<f64>) -> Result<(f64, f64)> {
    if !e.is_square() || e.nrows() != eta.len() || eta.len() != lam.len() {
        return Err(Error::DimensionMismatch { expected: e.nrows(), got: eta.len() });
    }
    if (e - e.transpose()).amax() > 1e-12 * e.amax().max(1.0) {
        return Err(Error::InvalidArgument("matrix is not symmetric".into()));
    }
    let chol = cholesky(e).ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    let lhs = eta.dot(&chol.solve(eta));
    let rhs = 2.0 * lam.dot(eta) - (e * lam).dot(lam);
    Ok((lhs, rhs))
}
