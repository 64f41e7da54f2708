//! Adaptive Gauss–Hermite quadrature over 1- and 2-dimensional log
//! densities: an honest, slow normalizer/moment computation to hold the
//! Laplace path against.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::math::optim::{bfgs_minimize, fd_hessian, BfgsOptions};

use super::SimulateError;

/// Moments of an unnormalized density, plus its log normalizing constant.
#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub log_normalizer: f64,
}

/// Gauss–Hermite rule for `∫ f(x) e^{-x²} dx`: Golub–Welsch on the Hermite
/// recurrence (symmetric tridiagonal with off-diagonals `sqrt(k/2)`), nodes
/// the eigenvalues, weights `sqrt(pi)` times the squared first eigenvector
/// components.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature needs at least one node");
    let mut jac = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Tensor quadrature around center `m` with scale `l` (a matrix square root
/// of the current covariance guess). Returns (mass, mean, covariance,
/// log normalizer), with `mass` the integral of `exp(log_density - shift)`.
#[allow(clippy::type_complexity)]
fn weighted_grid<F: Fn(&[f64]) -> f64>(
    log_density: &F,
    m: &DVector<f64>,
    l: &DMatrix<f64>,
    nodes: &[f64],
    weights: &[f64],
    shift: f64,
) -> (f64, DVector<f64>, DMatrix<f64>, f64) {
    let d = m.len();
    let n = nodes.len();
    let count = n.pow(d as u32);
    let mut mass = 0.0;
    let mut mean = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    let mut x = vec![0.0f64; d];
    for idx in 0..count {
        let mut rem = idx;
        let mut log_w = 0.0;
        let mut z2 = 0.0;
        let mut z = DVector::zeros(d);
        for k in 0..d {
            let i = rem % n;
            rem /= n;
            z[k] = nodes[i];
            z2 += nodes[i] * nodes[i];
            log_w += weights[i].ln();
        }
        let offset = l * &z * std::f64::consts::SQRT_2;
        for k in 0..d {
            x[k] = m[k] + offset[k];
        }
        let ld = log_density(&x);
        if !ld.is_finite() {
            continue;
        }
        let term = (log_w + z2 + ld - shift).exp();
        mass += term;
        for k in 0..d {
            mean[k] += term * x[k];
            for k2 in 0..d {
                second[(k, k2)] += term * x[k] * x[k2];
            }
        }
    }
    let mean = mean / mass;
    let cov = second / mass - &mean * mean.transpose();
    let log_det_l = l.determinant().abs().ln();
    let log_norm = shift + mass.ln() + (d as f64 / 2.0) * std::f64::consts::LN_2 + log_det_l;
    (mass, mean, cov, log_norm)
}

fn spd_sqrt(h: &DMatrix<f64>) -> Result<DMatrix<f64>, SimulateError> {
    let eig = SymmetricEigen::new(h.clone());
    let max_l = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if !(max_l > 0.0 && max_l.is_finite()) {
        return Err(SimulateError::Oracle(
            "quadrature curvature is not positive definite".into(),
        ));
    }
    let floor = 1e-10 * max_l;
    let mut scaled = eig.eigenvectors.clone();
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        let inv_sqrt = 1.0 / l.max(floor).sqrt();
        for j in 0..h.nrows() {
            scaled[(j, i)] *= inv_sqrt;
        }
    }
    Ok(&scaled * eig.eigenvectors.transpose())
}

/// Adaptive Gauss–Hermite moments of `exp(log_density)` over 1 or 2
/// dimensions: find the mode, scale by the inverse curvature, then recenter
/// the grid on the quadrature mean/covariance until it stops moving.
pub fn quadrature_oracle<F: Fn(&[f64]) -> f64>(
    log_density: F,
    init: &[f64],
    n_nodes: usize,
) -> Result<PosteriorMoments, SimulateError> {
    let d = init.len();
    if !(1..=2).contains(&d) {
        return Err(SimulateError::Oracle(format!(
            "quadrature supports 1 or 2 dimensions, got {d}"
        )));
    }
    if n_nodes < 5 {
        return Err(SimulateError::Oracle(format!(
            "quadrature needs at least 5 nodes, got {n_nodes}"
        )));
    }
    let (nodes, weights) = gauss_hermite(n_nodes);

    let opts = BfgsOptions {
        max_iterations: 400,
        gradient_tolerance: 1e-7,
        fd_step: 1e-5,
        ..BfgsOptions::default()
    };
    let mut objective =
        |x: &DVector<f64>| -> f64 { -log_density(x.iter().copied().collect::<Vec<_>>().as_slice()) };
    let outcome = bfgs_minimize(
        &mut objective,
        DVector::from_column_slice(init),
        &opts,
    );
    if !outcome.value.is_finite() {
        return Err(SimulateError::Oracle(
            "could not locate a finite mode for quadrature".into(),
        ));
    }
    let mode = outcome.x;
    let shift = -outcome.value;
    let mut hess_objective =
        |x: &DVector<f64>| -> f64 { -log_density(x.iter().copied().collect::<Vec<_>>().as_slice()) };
    let hessian = fd_hessian(&mut hess_objective, &mode, 1e-4);
    let mut l = spd_sqrt(&hessian)?;
    let mut center = mode;

    let mut result = None;
    for _ in 0..20 {
        let (mass, mean, cov, log_norm) =
            weighted_grid(&log_density, &center, &l, &nodes, &weights, shift);
        if !(mass.is_finite() && mass > 0.0) {
            return Err(SimulateError::Oracle(
                "quadrature mass is not finite and positive".into(),
            ));
        }
        let sd: Vec<f64> = (0..d).map(|k| cov[(k, k)].max(0.0).sqrt()).collect();
        let moved = (0..d)
            .map(|k| (mean[k] - center[k]).abs() / sd[k].max(1e-300))
            .fold(0.0f64, f64::max);
        result = Some(PosteriorMoments {
            mean: mean.iter().copied().collect(),
            sd,
            log_normalizer: log_norm,
        });
        if moved < 1e-9 {
            break;
        }
        center = mean;
        let chol = cov.clone().cholesky().ok_or_else(|| {
            SimulateError::Oracle("quadrature covariance lost positive definiteness".into())
        })?;
        l = chol.l().into();
    }
    Ok(result.expect("at least one quadrature pass ran"))
}
