//! ARD squared-exponential covariance over concatenated latent factors.
//!
//! `k(x, x') = σ² exp(-½ Σ_d (x_d - x'_d)² / ℓ_d²)`, parameterized by
//! `log σ²` and `log ℓ_d` so every hyperparameter is unconstrained.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Jitter escalation stops once the relative jitter would exceed this.
pub const MAX_JITTER: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_amplitude: f64,
    pub log_lengthscales: Vec<f64>,
}

impl KernelParams {
    /// Unit amplitude and unit lengthscales.
    pub fn unit(dim: usize) -> Self {
        Self { log_amplitude: 0.0, log_lengthscales: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn amplitude(&self) -> f64 {
        self.log_amplitude.exp()
    }

    /// Number of scalar hyperparameters (amplitude plus one lengthscale per input).
    pub fn num_params(&self) -> usize {
        self.dim() + 1
    }
}

/// Evaluation form of [`KernelParams`] with `σ²` and `1/ℓ_d²` precomputed.
#[derive(Debug, Clone)]
pub struct ArdKernel {
    amplitude: f64,
    inv_sq_ls: Vec<f64>,
}

impl ArdKernel {
    pub fn new(params: &KernelParams) -> Self {
        Self {
            amplitude: params.amplitude(),
            inv_sq_ls: params.log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.inv_sq_ls.len()
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn inv_sq_lengthscales(&self) -> &[f64] {
        &self.inv_sq_ls
    }

    #[inline]
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.inv_sq_ls.len());
        let mut r2 = 0.0;
        for ((a, b), w) in x.iter().zip(x2).zip(&self.inv_sq_ls) {
            let d = a - b;
            r2 += d * d * w;
        }
        self.amplitude * (-0.5 * r2).exp()
    }

    /// Accumulates `scale * ∂k(x, x2)/∂x` into `out_x` and the log-hyperparameter
    /// partials into `out_log_amp` / `out_log_ls`, given the precomputed value `k`.
    #[inline]
    pub(crate) fn accumulate_grads(
        &self,
        x: &[f64],
        x2: &[f64],
        k: f64,
        scale: f64,
        out_x: Option<&mut [f64]>,
        out_x2: Option<&mut [f64]>,
        out_log_amp: &mut f64,
        out_log_ls: &mut [f64],
    ) {
        let sk = scale * k;
        *out_log_amp += sk;
        let mut out_x = out_x;
        let mut out_x2 = out_x2;
        for d in 0..x.len() {
            let diff = x[d] - x2[d];
            let w = self.inv_sq_ls[d];
            let gx = -sk * diff * w;
            if let Some(o) = out_x.as_deref_mut() {
                o[d] += gx;
            }
            if let Some(o) = out_x2.as_deref_mut() {
                o[d] -= gx;
            }
            out_log_ls[d] += sk * diff * diff * w;
        }
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

pub fn kernel_eval(x: &[f64], x2: &[f64], params: &KernelParams) -> Result<f64> {
    check_dim(params.dim(), x.len())?;
    check_dim(params.dim(), x2.len())?;
    Ok(ArdKernel::new(params).eval(x, x2))
}

/// Partial derivatives of [`kernel_eval`] with respect to both inputs and the
/// log-hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrads {
    pub d_x: Vec<f64>,
    pub d_x2: Vec<f64>,
    pub d_log_amplitude: f64,
    pub d_log_lengthscales: Vec<f64>,
}

pub fn kernel_grads(x: &[f64], x2: &[f64], params: &KernelParams) -> Result<KernelGrads> {
    check_dim(params.dim(), x.len())?;
    check_dim(params.dim(), x2.len())?;
    let kern = ArdKernel::new(params);
    let k = kern.eval(x, x2);
    let d = x.len();
    let mut g = KernelGrads {
        d_x: vec![0.0; d],
        d_x2: vec![0.0; d],
        d_log_amplitude: 0.0,
        d_log_lengthscales: vec![0.0; d],
    };
    kern.accumulate_grads(
        x,
        x2,
        k,
        1.0,
        Some(&mut g.d_x),
        Some(&mut g.d_x2),
        &mut g.d_log_amplitude,
        &mut g.d_log_lengthscales,
    );
    Ok(g)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Pairwise covariance of the rows of `points`, plus `jitter · σ²` on the diagonal.
pub fn gram(points: &DMatrix<f64>, params: &KernelParams, jitter: f64) -> Result<DMatrix<f64>> {
    check_dim(params.dim(), points.ncols())?;
    if points.nrows() == 0 {
        return Err(Error::InvalidArgument("gram needs at least one point".into()));
    }
    if !(jitter >= 0.0) {
        return Err(Error::InvalidArgument(format!("jitter must be >= 0, got {jitter}")));
    }
    let kern = ArdKernel::new(params);
    let pts = rows(points);
    let n = pts.len();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        out[(i, i)] = kern.amplitude() * (1.0 + jitter);
        for j in 0..i {
            let v = kern.eval(&pts[i], &pts[j]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// `out[i, j] = k(a_i, b_j)`.
pub fn cross_cov(a: &DMatrix<f64>, b: &DMatrix<f64>, params: &KernelParams) -> Result<DMatrix<f64>> {
    check_dim(params.dim(), a.ncols())?;
    check_dim(params.dim(), b.ncols())?;
    let kern = ArdKernel::new(params);
    let (ra, rb) = (rows(a), rows(b));
    Ok(DMatrix::from_fn(ra.len(), rb.len(), |i, j| kern.eval(&ra[i], &rb[j])))
}

/// A Gram matrix together with its Cholesky factor and the relative jitter
/// that made it factorizable.
#[derive(Debug, Clone)]
pub struct GramFactor {
    pub matrix: DMatrix<f64>,
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl GramFactor {
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().take(self.matrix.nrows()).map(|v| v.ln()).sum::<f64>()
    }
}

/// Builds the Gram matrix and factorizes it, multiplying the jitter by 10 on
/// each failure until it would exceed [`MAX_JITTER`].
pub fn factorize_gram(points: &DMatrix<f64>, params: &KernelParams, jitter: f64) -> Result<GramFactor> {
    let base = gram(points, params, 0.0)?;
    let amp = params.amplitude();
    let mut j = jitter;
    loop {
        let mut m = base.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += j * amp;
        }
        if let Some(chol) = cholesky(&m) {
            return Ok(GramFactor { matrix: m, chol, jitter: j });
        }
        if j <= 0.0 || j * 10.0 > MAX_JITTER * (1.0 + 1e-12) {
            return Err(Error::NotPositiveDefinite { jitter: j });
        }
        j *= 10.0;
    }
}

/// Cholesky that also rejects non-finite input and zero pivots.
pub(crate) fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let chol = Cholesky::new(m.clone())?;
    if chol.l_dirty().diagonal().iter().all(|&d| d > 0.0 && d.is_finite()) {
        Some(chol)
    } else {
        None
    }
}
