//! Trainable parameters: latent factors, inducing points, kernel
//! hyperparameters and the likelihood parameter, plus the flat packing used
//! by the optimizers.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::sptensor::check_index;

pub const DEFAULT_JITTER: f64 = 1e-6;
pub const FACTOR_INIT_SD: f64 = 0.1;
pub const INDUCING_INIT_SD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Continuous,
    Binary,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Continuous => "continuous",
            Mode::Binary => "binary",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(Mode::Continuous),
            "binary" => Ok(Mode::Binary),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

/// One factor matrix per mode; row `i` of matrix `k` is the latent vector of
/// entity `i` in mode `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFactors {
    mats: Vec<DMatrix<f64>>,
}

impl LatentFactors {
    pub fn new(mats: Vec<DMatrix<f64>>) -> Result<Self> {
        if mats.len() < 2 {
            return Err(Error::InvalidArgument("need at least 2 factor matrices".into()));
        }
        Ok(Self { mats })
    }

    pub fn zeros(dims: &[usize], ranks: &[usize]) -> Self {
        Self {
            mats: dims.iter().zip(ranks).map(|(&d, &r)| DMatrix::zeros(d, r)).collect(),
        }
    }

    pub fn num_modes(&self) -> usize {
        self.mats.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.mats.iter().map(|m| m.nrows()).collect()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.mats.iter().map(|m| m.ncols()).collect()
    }

    /// Concatenated latent dimension `D = Σ_k r_k`.
    pub fn input_dim(&self) -> usize {
        self.mats.iter().map(|m| m.ncols()).sum()
    }

    pub fn matrix(&self, k: usize) -> &DMatrix<f64> {
        &self.mats[k]
    }

    pub fn matrix_mut(&mut self, k: usize) -> &mut DMatrix<f64> {
        &mut self.mats[k]
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.mats
    }

    /// Writes `[u^(1)_{i_1}, ..., u^(K)_{i_K}]` into `out`. The index must be in range.
    #[inline]
    pub fn assemble_into(&self, index: &[usize], out: &mut [f64]) {
        let mut off = 0;
        for (m, &i) in self.mats.iter().zip(index) {
            let r = m.ncols();
            for c in 0..r {
                out[off + c] = m[(i, c)];
            }
            off += r;
        }
    }

    pub fn sq_frobenius(&self) -> f64 {
        self.mats.iter().map(|m| m.norm_squared()).sum()
    }
}

/// Concatenated GP input of one tensor cell.
pub fn assemble_input(factors: &LatentFactors, index: &[usize]) -> Result<Vec<f64>> {
    check_index(&factors.dims(), index)?;
    let mut out = vec![0.0; factors.input_dim()];
    factors.assemble_into(index, &mut out);
    Ok(out)
}

/// Standard-normal prior on the factors, without its normalizing constant.
pub fn log_prior(factors: &LatentFactors) -> f64 {
    -0.5 * factors.sq_frobenius()
}

/// `p × D` pseudo-inputs; row `b` is inducing point `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingSet {
    pub points: DMatrix<f64>,
}

impl InducingSet {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    /// Row-major copy, handy for slice-based kernel evaluation.
    pub fn rows(&self) -> Vec<f64> {
        let (p, d) = self.points.shape();
        let mut out = Vec::with_capacity(p * d);
        for b in 0..p {
            out.extend(self.points.row(b).iter());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Likelihood {
    /// Gaussian noise with precision `β = exp(log_precision)`.
    Gaussian { log_precision: f64 },
    /// Probit link; `lambda` is the decoupling variational vector (length p).
    Probit { lambda: DVector<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub factors: LatentFactors,
    pub inducing: InducingSet,
    pub kernel: KernelParams,
    pub likelihood: Likelihood,
    /// Relative diagonal jitter applied to `K_BB` before factorization.
    pub jitter: f64,
}

impl ModelState {
    pub fn mode(&self) -> Mode {
        match self.likelihood {
            Likelihood::Gaussian { .. } => Mode::Continuous,
            Likelihood::Probit { .. } => Mode::Binary,
        }
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.len()
    }

    pub fn input_dim(&self) -> usize {
        self.factors.input_dim()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.factors.dims(), self.factors.ranks(), self.num_inducing(), self.mode())
    }

    /// Noise precision `β`; errors in binary mode.
    pub fn beta(&self) -> Result<f64> {
        match self.likelihood {
            Likelihood::Gaussian { log_precision } => Ok(log_precision.exp()),
            Likelihood::Probit { .. } => Err(Error::WrongMode("noise precision requires continuous mode")),
        }
    }

    pub fn lambda(&self) -> Result<&DVector<f64>> {
        match &self.likelihood {
            Likelihood::Probit { lambda } => Ok(lambda),
            Likelihood::Gaussian { .. } => Err(Error::WrongMode("lambda requires binary mode")),
        }
    }

    pub fn with_lambda(&self, lambda: DVector<f64>) -> Result<ModelState> {
        self.lambda()?;
        let mut s = self.clone();
        s.likelihood = Likelihood::Probit { lambda };
        Ok(s)
    }

    /// Checks the internal shapes agree.
    pub fn validate(&self) -> Result<()> {
        let d = self.input_dim();
        if self.inducing.points.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: self.inducing.points.ncols() });
        }
        if self.kernel.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: self.kernel.dim() });
        }
        if self.inducing.is_empty() {
            return Err(Error::InvalidArgument("need at least one inducing point".into()));
        }
        if let Likelihood::Probit { lambda } = &self.likelihood {
            if lambda.len() != self.num_inducing() {
                return Err(Error::DimensionMismatch { expected: self.num_inducing(), got: lambda.len() });
            }
        }
        Ok(())
    }

    pub fn pack(&self) -> FlatParams {
        let layout = self.layout();
        let mut values = Vec::with_capacity(layout.len());
        for m in self.factors.matrices() {
            for i in 0..m.nrows() {
                values.extend(m.row(i).iter());
            }
        }
        values.extend(self.inducing.rows());
        values.push(self.kernel.log_amplitude);
        values.extend(&self.kernel.log_lengthscales);
        if let Likelihood::Gaussian { log_precision } = self.likelihood {
            values.push(log_precision);
        }
        debug_assert_eq!(values.len(), layout.len());
        FlatParams { values, layout }
    }

    /// Overwrites every packed parameter from `values`; `λ` and the jitter are kept.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let layout = self.layout();
        if values.len() != layout.len() {
            return Err(Error::DimensionMismatch { expected: layout.len(), got: values.len() });
        }
        for k in 0..self.factors.num_modes() {
            let off = layout.factor_offset(k);
            let m = self.factors.matrix_mut(k);
            let r = m.ncols();
            for i in 0..m.nrows() {
                for c in 0..r {
                    m[(i, c)] = values[off + i * r + c];
                }
            }
        }
        let d = layout.input_dim();
        let off = layout.inducing_offset();
        for b in 0..layout.num_inducing() {
            for c in 0..d {
                self.inducing.points[(b, c)] = values[off + b * d + c];
            }
        }
        let off = layout.kernel_offset();
        self.kernel.log_amplitude = values[off];
        self.kernel.log_lengthscales.copy_from_slice(&values[off + 1..off + 1 + d]);
        if let Likelihood::Gaussian { log_precision } = &mut self.likelihood {
            *log_precision = values[layout.noise_offset().expect("continuous layout")];
        }
        Ok(())
    }
}

/// Rebuilds a state from packed parameters. In binary mode `λ` starts at zero.
pub fn unpack(flat: &FlatParams) -> Result<ModelState> {
    let l = &flat.layout;
    let likelihood = match l.mode {
        Mode::Continuous => Likelihood::Gaussian { log_precision: 0.0 },
        Mode::Binary => Likelihood::Probit { lambda: DVector::zeros(l.num_inducing()) },
    };
    let mut state = ModelState {
        factors: LatentFactors::zeros(&l.dims, &l.ranks),
        inducing: InducingSet { points: DMatrix::zeros(l.num_inducing(), l.input_dim()) },
        kernel: KernelParams::unit(l.input_dim()),
        likelihood,
        jitter: DEFAULT_JITTER,
    };
    state.set_flat(&flat.values)?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Factors { mode: usize },
    Inducing,
    Kernel,
    NoisePrecision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
}

/// Ordering of the packed parameter vector: factor matrices (row-major, mode
/// order), inducing points (row-major), `log σ²`, `log ℓ_1..ℓ_D`, and `log β`
/// in continuous mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    dims: Vec<usize>,
    ranks: Vec<usize>,
    p: usize,
    mode: Mode,
    factor_offsets: Vec<usize>,
}

impl ParamLayout {
    pub fn new(dims: Vec<usize>, ranks: Vec<usize>, p: usize, mode: Mode) -> Self {
        let mut factor_offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for (d, r) in dims.iter().zip(&ranks) {
            factor_offsets.push(off);
            off += d * r;
        }
        Self { dims, ranks, p, mode, factor_offsets }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn num_inducing(&self) -> usize {
        self.p
    }

    pub fn input_dim(&self) -> usize {
        self.ranks.iter().sum()
    }

    pub fn factor_offset(&self, mode: usize) -> usize {
        self.factor_offsets[mode]
    }

    /// Offset of row `row` of factor matrix `mode`.
    #[inline]
    pub fn factor_row_offset(&self, mode: usize, row: usize) -> usize {
        self.factor_offsets[mode] + row * self.ranks[mode]
    }

    pub fn inducing_offset(&self) -> usize {
        self.dims.iter().zip(&self.ranks).map(|(d, r)| d * r).sum()
    }

    pub fn kernel_offset(&self) -> usize {
        self.inducing_offset() + self.p * self.input_dim()
    }

    pub fn noise_offset(&self) -> Option<usize> {
        match self.mode {
            Mode::Continuous => Some(self.kernel_offset() + self.input_dim() + 1),
            Mode::Binary => None,
        }
    }

    pub fn len(&self) -> usize {
        self.kernel_offset() + self.input_dim() + 1 + usize::from(self.mode == Mode::Continuous)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segments(&self) -> Vec<Segment> {
        let mut segs: Vec<Segment> = (0..self.dims.len())
            .map(|k| Segment {
                kind: SegmentKind::Factors { mode: k },
                offset: self.factor_offsets[k],
                len: self.dims[k] * self.ranks[k],
            })
            .collect();
        segs.push(Segment {
            kind: SegmentKind::Inducing,
            offset: self.inducing_offset(),
            len: self.p * self.input_dim(),
        });
        segs.push(Segment { kind: SegmentKind::Kernel, offset: self.kernel_offset(), len: self.input_dim() + 1 });
        if let Some(off) = self.noise_offset() {
            segs.push(Segment { kind: SegmentKind::NoisePrecision, offset: off, len: 1 });
        }
        segs
    }

    /// Which segment a flat position belongs to.
    pub fn locate(&self, pos: usize) -> Option<Segment> {
        self.segments().into_iter().find(|s| pos >= s.offset && pos < s.offset + s.len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

/// Fresh parameters: factors ~ N(0, 0.1²); inducing points at the inputs of
/// `p` distinct random cells plus N(0, 0.01²) noise; unit kernel; `β = 1`;
/// `λ = 0`.
pub fn init_state(dims: &[usize], ranks: &[usize], p: usize, mode: Mode, seed: u64) -> Result<ModelState> {
    if p == 0 {
        return Err(Error::InvalidArgument("p must be at least 1".into()));
    }
    if dims.len() != ranks.len() || dims.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need matching dims and ranks for at least 2 modes, got {} and {}",
            dims.len(),
            ranks.len()
        )));
    }
    if ranks.iter().chain(dims).any(|&v| v == 0) {
        return Err(Error::InvalidArgument("dims and ranks must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factor_dist = Normal::new(0.0, FACTOR_INIT_SD).expect("valid sd");
    let mats = dims
        .iter()
        .zip(ranks)
        .map(|(&d, &r)| DMatrix::from_fn(r, d, |_, _| factor_dist.sample(&mut rng)).transpose())
        .collect();
    let factors = LatentFactors::new(mats)?;

    let d = factors.input_dim();
    let cells: u128 = dims.iter().map(|&x| x as u128).product();
    let picks: Vec<Vec<usize>> = if (p as u128) <= cells && cells <= usize::MAX as u128 {
        index::sample(&mut rng, cells as usize, p)
            .iter()
            .map(|id| {
                let mut rem = id;
                let mut idx = vec![0; dims.len()];
                for (slot, &dk) in idx.iter_mut().zip(dims).rev() {
                    *slot = rem % dk;
                    rem /= dk;
                }
                idx
            })
            .collect()
    } else {
        (0..p).map(|_| dims.iter().map(|&dk| rng.random_range(0..dk)).collect()).collect()
    };
    let noise = Normal::new(0.0, INDUCING_INIT_SD).expect("valid sd");
    let mut points = DMatrix::zeros(p, d);
    let mut buf = vec![0.0; d];
    for (b, idx) in picks.iter().enumerate() {
        factors.assemble_into(idx, &mut buf);
        for c in 0..d {
            points[(b, c)] = buf[c] + noise.sample(&mut rng);
        }
    }

    let likelihood = match mode {
        Mode::Continuous => Likelihood::Gaussian { log_precision: 0.0 },
        Mode::Binary => Likelihood::Probit { lambda: DVector::zeros(p) },
    };
    Ok(ModelState {
        factors,
        inducing: InducingSet { points },
        kernel: KernelParams::unit(d),
        likelihood,
        jitter: DEFAULT_JITTER,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn concatenates_rows_in_mode_order() {
        let f = LatentFactors::new(vec![
            DMatrix::from_row_slice(1, 1, &[2.0]),
            DMatrix::from_row_slice(1, 1, &[3.0]),
        ])
        .unwrap();
        assert_eq!(assemble_input(&f, &[0, 0]).unwrap(), vec![2.0, 3.0]);
        assert!(matches!(assemble_input(&f, &[1, 0]), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn input_dim_is_rank_sum() {
        let s = init_state(&[4, 5, 6], &[2, 2, 2], 3, Mode::Continuous, 1).unwrap();
        assert_eq!(assemble_input(&s.factors, &[3, 4, 5]).unwrap().len(), 6);
    }

    #[test]
    fn shared_rows_share_coordinates() {
        let s = init_state(&[8, 8], &[3, 2], 2, Mode::Continuous, 7).unwrap();
        let a = assemble_input(&s.factors, &[5, 1]).unwrap();
        let b = assemble_input(&s.factors, &[5, 6]).unwrap();
        assert_eq!(a[..3], b[..3]);
        assert_ne!(a[3..], b[3..]);
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_state(&[10, 12, 9], &[2, 3, 2], 5, Mode::Binary, 99).unwrap();
        let b = init_state(&[10, 12, 9], &[2, 3, 2], 5, Mode::Binary, 99).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_state(&[10, 12, 9], &[2, 3, 2], 5, Mode::Binary, 100).unwrap());
    }

    #[test]
    fn default_inducing_shape() {
        let s = init_state(&[200, 100, 200], &[3, 3, 3], 100, Mode::Continuous, 0).unwrap();
        assert_eq!(s.inducing.points.shape(), (100, 9));
        s.validate().unwrap();
    }

    #[test]
    fn binary_lambda_starts_at_zero() {
        let s = init_state(&[5, 5], &[1, 1], 4, Mode::Binary, 0).unwrap();
        let l = s.lambda().unwrap();
        assert_eq!(l.len(), 4);
        assert!(l.iter().all(|&v| v == 0.0));
        assert!(s.beta().is_err());
    }

    #[test]
    fn init_rejects_zero_inducing() {
        assert!(init_state(&[5, 5], &[1, 1], 0, Mode::Binary, 0).is_err());
    }

    #[test]
    fn more_inducing_points_than_cells() {
        let s = init_state(&[2, 2], &[1, 1], 6, Mode::Continuous, 0).unwrap();
        assert_eq!(s.num_inducing(), 6);
    }

    #[test]
    fn flat_length_arithmetic() {
        let s = init_state(&[4, 5], &[2, 2], 3, Mode::Continuous, 0).unwrap();
        // factors 4*2 + 5*2, inducing 3*4, kernel 4+1, noise 1
        let expected = 8 + 10 + 12 + 5 + 1;
        assert_eq!(s.pack().values.len(), expected);
        assert_eq!(s.layout().len(), 36);
        let b = init_state(&[4, 5], &[2, 2], 3, Mode::Binary, 0).unwrap();
        assert_eq!(b.pack().values.len(), 35);
    }

    #[test]
    fn each_flat_position_changes_one_parameter() {
        let s = init_state(&[3, 4], &[2, 1], 2, Mode::Continuous, 5).unwrap();
        let flat = s.pack();
        for j in 0..flat.values.len() {
            let mut v = flat.values.clone();
            v[j] += 1.0;
            let mut t = s.clone();
            t.set_flat(&v).unwrap();
            let repacked = t.pack().values;
            let changed: Vec<usize> = (0..v.len()).filter(|&i| repacked[i] != flat.values[i]).collect();
            assert_eq!(changed, vec![j]);
        }
    }

    #[test]
    fn locate_segments() {
        let l = ParamLayout::new(vec![4, 5], vec![2, 2], 3, Mode::Continuous);
        assert_eq!(l.locate(0).unwrap().kind, SegmentKind::Factors { mode: 0 });
        assert_eq!(l.locate(8).unwrap().kind, SegmentKind::Factors { mode: 1 });
        assert_eq!(l.locate(18).unwrap().kind, SegmentKind::Inducing);
        assert_eq!(l.locate(30).unwrap().kind, SegmentKind::Kernel);
        assert_eq!(l.locate(35).unwrap().kind, SegmentKind::NoisePrecision);
        assert!(l.locate(36).is_none());
    }

    #[test]
    fn set_flat_rejects_wrong_length() {
        let mut s = init_state(&[3, 3], &[1, 1], 2, Mode::Continuous, 0).unwrap();
        assert!(matches!(s.set_flat(&[0.0; 3]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn prior_decreases_with_magnitude() {
        let mut s = init_state(&[3, 3], &[2, 2], 2, Mode::Continuous, 0).unwrap();
        let before = log_prior(&s.factors);
        s.factors.matrix_mut(1)[(2, 0)] *= 3.0;
        s.factors.matrix_mut(1)[(2, 0)] += 0.5;
        assert!(log_prior(&s.factors) < before);
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(seed in any::<u64>(), binary in any::<bool>(), log_beta in -3.0f64..3.0) {
            let mode = if binary { Mode::Binary } else { Mode::Continuous };
            let mut s = init_state(&[3, 4, 2], &[2, 1, 2], 3, mode, seed).unwrap();
            s.kernel.log_amplitude = log_beta * 0.5;
            if let Likelihood::Gaussian { log_precision } = &mut s.likelihood {
                *log_precision = log_beta;
            }
            let flat = s.pack();
            let back = unpack(&flat).unwrap();
            prop_assert_eq!(back.pack(), flat.clone());
            if !binary {
                prop_assert_eq!(&back, &s);
            }
            let mut t = s.clone();
            t.set_flat(&flat.values).unwrap();
            prop_assert_eq!(t, s);
        }

        #[test]
        fn distinct_rows_give_distinct_inputs(seed in any::<u64>(), i in 0usize..6, j in 0usize..6) {
            let s = init_state(&[6, 6], &[2, 2], 1, Mode::Continuous, seed).unwrap();
            let a = assemble_input(&s.factors, &[i, j]).unwrap();
            let b = assemble_input(&s.factors, &[(i + 1) % 6, (j + 1) % 6]).unwrap();
            prop_assert_ne!(a, b);
        }
    }
}
