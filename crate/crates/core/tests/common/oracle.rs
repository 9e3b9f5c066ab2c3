//! Dense reference computations used only by tests.
//!
//! Nothing here calls into the library's kernel or bound code: inputs are
//! assembled from the factor matrices directly, the RBF kernel is evaluated
//! from its definition, and every bound is written out term by term over
//! explicit N×p matrices.

#![allow(dead_code)]

use std::f64::consts::PI;

use gptf_core::model::{Likelihood, ModelState};
use gptf_core::probit;
use gptf_core::sptensor::EntryBatch;
use nalgebra::{DMatrix, DVector};

pub fn rbf(x: &[f64], y: &[f64], log_amp: f64, log_ls: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        let l = log_ls[i].exp();
        s += ((x[i] - y[i]) / l).powi(2);
    }
    (log_amp - 0.5 * s).exp()
}

/// Entry inputs as rows of an N×D matrix.
pub fn inputs(state: &ModelState, batch: &EntryBatch) -> DMatrix<f64> {
    let cells: Vec<&[usize]> = (0..batch.len()).map(|j| batch.index(j)).collect();
    factor_inputs(state.factors.matrices(), &cells)
}

/// Concatenated factor rows for each cell.
pub fn factor_inputs(mats: &[DMatrix<f64>], cells: &[&[usize]]) -> DMatrix<f64> {
    let d: usize = mats.iter().map(|m| m.ncols()).sum();
    let mut x = DMatrix::zeros(cells.len(), d);
    for (j, cell) in cells.iter().enumerate() {
        let mut c = 0;
        for (k, &i) in cell.iter().enumerate() {
            for r in 0..mats[k].ncols() {
                x[(j, c)] = mats[k][(i, r)];
                c += 1;
            }
        }
    }
    x
}

/// Posterior mean of exact GP regression with an RBF kernel.
pub fn gp_regression_mean(
    x_train: &DMatrix<f64>,
    y: &[f64],
    x_test: &DMatrix<f64>,
    log_amp: f64,
    log_ls: &[f64],
    noise_var: f64,
) -> Vec<f64> {
    let n = x_train.nrows();
    let k = |a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize| rbf(&row(a, i), &row(b, j), log_amp, log_ls);
    let mut c = DMatrix::from_fn(n, n, |i, j| k(x_train, i, x_train, j));
    for i in 0..n {
        c[(i, i)] += noise_var;
    }
    let alpha = c.cholesky().expect("noisy covariance is positive definite").solve(&DVector::from_column_slice(y));
    (0..x_test.nrows()).map(|t| (0..n).map(|j| k(x_test, t, x_train, j) * alpha[j]).sum()).collect()
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

pub fn cov(a: &DMatrix<f64>, b: &DMatrix<f64>, state: &ModelState) -> DMatrix<f64> {
    let (la, ls) = (state.kernel.log_amplitude, &state.kernel.log_lengthscales);
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| rbf(&row(a, i), &row(b, j), la, ls))
}

/// `K_BB` with the model's relative diagonal jitter.
pub fn k_bb(state: &ModelState) -> DMatrix<f64> {
    let b = &state.inducing.points;
    let mut k = cov(b, b, state);
    let amp = state.kernel.log_amplitude.exp();
    for i in 0..k.nrows() {
        k[(i, i)] += amp * state.jitter;
    }
    k
}

pub fn log_prior(state: &ModelState) -> f64 {
    -0.5 * state.factors.matrices().iter().map(|m| m.norm_squared()).sum::<f64>()
}

fn logdet_spd(m: &DMatrix<f64>) -> f64 {
    let c = m.clone().cholesky().expect("spd");
    2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

fn inv_spd(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().cholesky().expect("spd").inverse()
}

fn beta(state: &ModelState) -> f64 {
    match state.likelihood {
        Likelihood::Gaussian { log_precision } => log_precision.exp(),
        Likelihood::Probit { .. } => panic!("continuous state expected"),
    }
}

/// `log N(y | 0, K_NN + β⁻¹ I)` for the entry inputs of `batch`.
pub fn dense_log_marginal(state: &ModelState, batch: &EntryBatch) -> f64 {
    let x = inputs(state, batch);
    let n = batch.len();
    let mut c = cov(&x, &x, state);
    let b = beta(state);
    for i in 0..n {
        c[(i, i)] += 1.0 / b;
    }
    let y = DVector::from_column_slice(batch.targets());
    let alpha = c.clone().cholesky().expect("spd").solve(&y);
    -0.5 * y.dot(&alpha) - 0.5 * logdet_spd(&c) - 0.5 * n as f64 * (2.0 * PI).ln()
}

/// `KL(N(mean, cov) ‖ N(0, k))`.
pub fn kl_gauss(mean: &DVector<f64>, cv: &DMatrix<f64>, k: &DMatrix<f64>) -> f64 {
    let ki = inv_spd(k);
    0.5 * ((&ki * cv).trace() + mean.dot(&(&ki * mean)) - mean.len() as f64 + logdet_spd(k) - logdet_spd(cv))
}

/// Continuous bound for an arbitrary Gaussian `q(v)`, plus the factor prior.
pub fn naive_elbo(state: &ModelState, batch: &EntryBatch, mean: &DVector<f64>, cv: &DMatrix<f64>) -> f64 {
    let x = inputs(state, batch);
    let k = k_bb(state);
    let ki = inv_spd(&k);
    let knb = cov(&x, &state.inducing.points, state);
    let b = beta(state);
    let amp = state.kernel.log_amplitude.exp();
    let mut total = 0.0;
    for j in 0..batch.len() {
        let kj = knb.row(j).transpose();
        let a = &ki * &kj;
        let sigma2 = amp - kj.dot(&a);
        let m = a.dot(mean);
        let v = a.dot(&(cv * &a));
        let y = batch.target(j);
        total += -0.5 * (2.0 * PI / b).ln() - 0.5 * b * ((y - m).powi(2) + v) - 0.5 * b * sigma2;
    }
    total - kl_gauss(mean, cv, &k) + log_prior(state)
}

/// Optimal `q(v)` for the continuous model, computed from explicit sums.
pub fn optimal_q_continuous(state: &ModelState, batch: &EntryBatch) -> (DVector<f64>, DMatrix<f64>) {
    let x = inputs(state, batch);
    let k = k_bb(state);
    let knb = cov(&x, &state.inducing.points, state);
    let b = beta(state);
    let y = DVector::from_column_slice(batch.targets());
    let sig = &k + knb.transpose() * &knb * b;
    let si = inv_spd(&sig);
    let mean = &k * &si * knb.transpose() * y * b;
    let cv = &k * &si * &k;
    (mean, (&cv + cv.transpose()) * 0.5)
}

/// Truncated-Gaussian moments of `N(η, 1)` restricted to the half-line
/// selected by `y`: mean, second moment, entropy.
pub fn trunc_moments(eta: f64, y: f64) -> (f64, f64, f64) {
    let s = 2.0 * y - 1.0;
    let w = s * probit::pdf(eta) / probit::cdf(s * eta);
    let m1 = eta + w;
    let m2 = 1.0 + eta * eta + eta * w;
    let h = 0.5 * (2.0 * PI * std::f64::consts::E).ln() + probit::cdf(s * eta).ln() - 0.5 * eta * w;
    (m1, m2, h)
}

/// Binary bound with explicit `q(z_j)` (truncated `N(η_j, 1)`) and Gaussian
/// `q(v)`, plus the factor prior.
pub fn binary_intermediate(
    state: &ModelState,
    batch: &EntryBatch,
    eta: &[f64],
    mean: &DVector<f64>,
    cv: &DMatrix<f64>,
) -> f64 {
    let x = inputs(state, batch);
    let k = k_bb(state);
    let ki = inv_spd(&k);
    let knb = cov(&x, &state.inducing.points, state);
    let amp = state.kernel.log_amplitude.exp();
    let mut total = 0.0;
    for j in 0..batch.len() {
        let kj = knb.row(j).transpose();
        let a = &ki * &kj;
        let sigma2 = amp - kj.dot(&a);
        let m = a.dot(mean);
        let v = a.dot(&(cv * &a));
        let (z1, z2, h) = trunc_moments(eta[j], batch.target(j));
        total += -0.5 * (2.0 * PI).ln() - 0.5 * (z2 - 2.0 * z1 * m + m * m + v) - 0.5 * sigma2 + h;
    }
    total - kl_gauss(mean, cv, &k) + log_prior(state)
}

/// Optimal Gaussian `q(v)` given the first moments of `q(z)`.
pub fn optimal_q_binary(state: &ModelState, batch: &EntryBatch, z_mean: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let x = inputs(state, batch);
    let k = k_bb(state);
    let knb = cov(&x, &state.inducing.points, state);
    let sig = &k + knb.transpose() * &knb;
    let si = inv_spd(&sig);
    let mean = &k * &si * knb.transpose() * DVector::from_column_slice(z_mean);
    let cv = &k * &si * &k;
    (mean, (&cv + cv.transpose()) * 0.5)
}

/// `η_j = λᵀk(B, x_j)`.
pub fn etas(state: &ModelState, batch: &EntryBatch, lambda: &DVector<f64>) -> Vec<f64> {
    let x = inputs(state, batch);
    let knb = cov(&x, &state.inducing.points, state);
    (&knb * lambda).iter().copied().collect()
}
