//! Random-effect precision structures: exchangeable, random-walk (linear and
//! cyclic), and the Matérn Gaussian field at area centroids.
//!
//! Each block stores the *unit-precision structure* of one replicate: for the
//! scalar-precision effects the full precision is `tau * structure` repeated
//! block-diagonally over replicates; the Matérn block bakes its two
//! hyperparameters into the structure directly. Rank bookkeeping (random
//! walks are improper with a one-dimensional constant kernel per replicate)
//! feeds the generalized log-determinants used by the marginal likelihood,
//! and `sum_to_zero` marks blocks whose replicates the inference engine must
//! constrain.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::math::bessel_k;
use crate::model::spec::RandomEffect;

#[derive(Debug, Error, PartialEq)]
pub enum EffectsError {
    #[error("random walk needs at least 2 knots, got {0}")]
    WalkTooShort(usize),
    #[error("cyclic random walk needs at least 3 knots, got {0}")]
    CycleTooShort(usize),
    #[error("replicate count must be at least 1")]
    NoReplicates,
    #[error("effect dimension must be at least 1")]
    EmptyBlock,
    #[error("Matérn parameters out of domain: {0}")]
    InvalidMaternParams(String),
    #[error("centroids {0} and {1} coincide; the Matérn field needs distinct locations")]
    DuplicateCentroids(usize, usize),
    #[error("Matérn covariance not positive definite even after jitter escalation")]
    NotPositiveDefinite,
}

/// Matérn field parameters: marginal standard deviation, range (the distance
/// at which correlation has fallen to ≈ 0.1), and smoothness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternParams {
    pub sigma: f64,
    pub range_km: f64,
    pub smoothness: f64,
}

impl MaternParams {
    pub fn new(sigma: f64, range_km: f64, smoothness: f64) -> Result<Self, EffectsError> {
        let p = MaternParams {
            sigma,
            range_km,
            smoothness,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), EffectsError> {
        for (name, v) in [
            ("sigma", self.sigma),
            ("range_km", self.range_km),
            ("smoothness", self.smoothness),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EffectsError::InvalidMaternParams(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    /// Scale parameter kappa = sqrt(8 nu) / range.
    pub fn kappa(&self) -> f64 {
        (8.0 * self.smoothness).sqrt() / self.range_km
    }
}

/// One structured random-effect block.
#[derive(Debug, Clone)]
pub struct PrecisionBlock {
    pub kind: RandomEffect,
    /// Unit-precision structure of a single replicate (dense; dimensions are
    /// small: areas or years or months).
    pub structure: DMatrix<f64>,
    pub replicates: usize,
    /// Rank deficiency of `structure` (0 for proper blocks, 1 for walks).
    pub rank_deficiency: usize,
    /// Log generalized determinant of `structure` (product of its non-zero
    /// eigenvalues), per replicate.
    pub log_gdet_structure: f64,
    /// Whether each replicate carries a sum-to-zero constraint.
    pub sum_to_zero: bool,
}

impl PrecisionBlock {
    pub fn per_replicate_dim(&self) -> usize {
        self.structure.nrows()
    }

    pub fn dim(&self) -> usize {
        self.per_replicate_dim() * self.replicates
    }

    /// Rank of one replicate's structure.
    pub fn per_replicate_rank(&self) -> usize {
        self.per_replicate_dim() - self.rank_deficiency
    }

    /// Total rank over all replicates.
    pub fn rank(&self) -> usize {
        self.per_replicate_rank() * self.replicates
    }

    /// Quadratic form v' (block-diagonal structure) v over the full
    /// replicated block.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let m = self.per_replicate_dim();
        assert_eq!(v.len(), self.dim());
        let mut total = 0.0;
        for r in 0..self.replicates {
            let seg = &v[r * m..(r + 1) * m];
            for i in 0..m {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += self.structure[(i, j)] * seg[j];
                }
                total += seg[i] * acc;
            }
        }
        total
    }
}

/// Log pseudo-determinant (product of eigenvalues above tolerance) and the
/// observed rank deficiency of a small symmetric PSD matrix.
fn log_generalized_det(m: &DMatrix<f64>) -> (f64, usize) {
    let eig = m.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let tol = max_ev * m.nrows() as f64 * f64::EPSILON * 16.0;
    let mut log_det = 0.0;
    let mut deficiency = 0;
    for &ev in eig.eigenvalues.iter() {
        if ev > tol {
            log_det += ev.ln();
        } else {
            deficiency += 1;
        }
    }
    (log_det, deficiency)
}

/// Exchangeable (IID) effect: identity structure, proper, no constraint.
pub fn iid_precision(n: usize) -> Result<PrecisionBlock, EffectsError> {
    if n == 0 {
        return Err(EffectsError::EmptyBlock);
    }
    Ok(PrecisionBlock {
        kind: RandomEffect::AreaIid,
        structure: DMatrix::identity(n, n),
        replicates: 1,
        rank_deficiency: 0,
        log_gdet_structure: 0.0,
        sum_to_zero: false,
    })
}

/// First-order random-walk structure over `n` ordered knots, replicated with
/// a shared precision. Quadratic form: sum of squared successive differences.
pub fn rw1_precision(n: usize, replicates: usize) -> Result<PrecisionBlock, EffectsError> {
    if n < 2 {
        return Err(EffectsError::WalkTooShort(n));
    }
    if replicates == 0 {
        return Err(EffectsError::NoReplicates);
    }
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n - 1 {
        s[(i, i)] += 1.0;
        s[(i + 1, i + 1)] += 1.0;
        s[(i, i + 1)] -= 1.0;
        s[(i + 1, i)] -= 1.0;
    }
    let (log_gdet, deficiency) = log_generalized_det(&s);
    debug_assert_eq!(deficiency, 1);
    Ok(PrecisionBlock {
        kind: RandomEffect::YearRw1,
        structure: s,
        replicates,
        rank_deficiency: 1,
        log_gdet_structure: log_gdet,
        sum_to_zero: true,
    })
}

/// Cyclic first-order random-walk structure over `n` circular knots
/// (months): the last knot is adjacent to the first.
pub fn cyclic_rw1_precision(n: usize, replicates: usize) -> Result<PrecisionBlock, EffectsError> {
    if n < 3 {
        return Err(EffectsError::CycleTooShort(n));
    }
    if replicates == 0 {
        return Err(EffectsError::NoReplicates);
    }
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        let j = (i + 1) % n;
        s[(i, i)] += 1.0;
        s[(j, j)] += 1.0;
        s[(i, j)] -= 1.0;
        s[(j, i)] -= 1.0;
    }
    let (log_gdet, deficiency) = log_generalized_det(&s);
    debug_assert_eq!(deficiency, 1);
    Ok(PrecisionBlock {
        kind: RandomEffect::MonthCyclicRw1,
        structure: s,
        replicates,
        rank_deficiency: 1,
        log_gdet_structure: log_gdet,
        sum_to_zero: true,
    })
}

/// Matérn covariance between two points `d_km` apart:
/// `sigma^2 (2^(1-nu) / Gamma(nu)) (kappa d)^nu K_nu(kappa d)`, with
/// `sigma^2` at `d = 0`.
pub fn matern_cov(d_km: f64, params: &MaternParams) -> f64 {
    debug_assert!(d_km >= 0.0);
    let s2 = params.sigma * params.sigma;
    if d_km == 0.0 {
        return s2;
    }
    let nu = params.smoothness;
    let x = params.kappa() * d_km;
    let log_scale = (1.0 - nu) * std::f64::consts::LN_2
        - statrs::function::gamma::ln_gamma(nu)
        + nu * x.ln();
    let k = bessel_k(nu, x);
    if k <= 0.0 {
        // Far tail: K underflowed; the covariance is numerically zero.
        return 0.0;
    }
    s2 * (log_scale + k.ln()).exp()
}

/// Dense Matérn covariance matrix over a point set.
pub fn matern_covariance_matrix(points: &[(f64, f64)], params: &MaternParams) -> DMatrix<f64> {
    let n = points.len();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        c[(i, i)] = params.sigma * params.sigma;
        for j in 0..i {
            let d = distance(points[i], points[j]);
            let v = matern_cov(d, params);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

pub(crate) fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Invert a symmetric positive-definite covariance with escalating diagonal
/// jitter; returns the precision and its log determinant.
pub(crate) fn invert_covariance(
    cov: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64), EffectsError> {
    let n = cov.nrows();
    let mean_diag = cov.diagonal().sum() / n as f64;
    let mut jitter = 0.0;
    loop {
        let mut attempt = cov.clone();
        if jitter > 0.0 {
            for i in 0..n {
                attempt[(i, i)] += jitter;
            }
        }
        if let Some(chol) = attempt.cholesky() {
            let log_det_cov: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let precision = chol.inverse();
            return Ok((precision, -log_det_cov));
        }
        jitter = if jitter == 0.0 {
            mean_diag * 1e-10
        } else {
            jitter * 10.0
        };
        if jitter > mean_diag * 1e-2 {
            return Err(EffectsError::NotPositiveDefinite);
        }
    }
}

/// Precision block of a Matérn field realized at `centroids`: dense
/// covariance inverted by symmetric factorization. Full rank, no constraint;
/// the hyperparameters live inside the structure (multiplier 1).
pub fn matern_field_precision(
    centroids: &[(f64, f64)],
    params: &MaternParams,
) -> Result<PrecisionBlock, EffectsError> {
    params.validate()?;
    if centroids.is_empty() {
        return Err(EffectsError::EmptyBlock);
    }
    for i in 0..centroids.len() {
        for j in 0..i {
            if distance(centroids[i], centroids[j]) < 1e-9 {
                return Err(EffectsError::DuplicateCentroids(j, i));
            }
        }
    }
    let cov = matern_covariance_matrix(centroids, params);
    let (precision, log_det_precision) = invert_covariance(&cov)?;
    Ok(PrecisionBlock {
        kind: RandomEffect::AreaMatern,
        structure: precision,
        replicates: 1,
        rank_deficiency: 0,
        log_gdet_structure: log_det_precision,
        sum_to_zero: false,
    })
}
