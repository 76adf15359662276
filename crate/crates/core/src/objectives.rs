//! Loss functions with analytic gradients, plus finite-difference estimators
//! for the curvature constants consumed by [`crate::bounds`].
//!
//! Points are plain `&[f64]` slices so agent rows of an ensemble matrix can be
//! evaluated without copying.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{E, PI};
use thiserror::Error;

/// Frequency of the cosine corruption term, `10e/3`.
const COS_FREQ: f64 = 10.0 * E / 3.0;
/// Frequency of the fast sine corruption term.
const FAST_FREQ: f64 = 20.0;
/// Frequency of the slow sine corruption term.
const SLOW_FREQ: f64 = 2.0 * PI;
/// Weight applied to the whole sinusoidal corruption.
const CORRUPTION_WEIGHT: f64 = 0.4;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("scale factor must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("Hessian is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("Hessian is not symmetric (entry ({row},{col}) differs from its transpose)")]
    NotSymmetric { row: usize, col: usize },
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("curvature estimation needs at least one sample")]
    NoSamples,
    #[error("domain box has {got} intervals, objective has dimension {want}")]
    BoxDimension { got: usize, want: usize },
    #[error("domain box interval {0} is empty or non-finite")]
    BadInterval(usize),
    #[error("non-finite derivative at sample point {point:?}")]
    NonFinite { point: Vec<f64> },
}

/// Curvature constants of an objective over a domain.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureInfo {
    /// Supremum of the largest eigenvalue of `-∇²f`.
    pub lambda_bar: f64,
    /// Strong-convexity modulus, when positive.
    pub lambda_strong: Option<f64>,
    /// Smoothness constant (largest Hessian eigenvalue).
    pub lambda_smooth: Option<f64>,
    /// Bound on the largest eigenvalue of the Hessian of any `-(∇f)_j`.
    pub q_bound: Option<f64>,
    /// Box the constants hold over; `None` means globally.
    pub domain_box: Option<Vec<(f64, f64)>>,
}

/// A differentiable loss. Implementations must be pure functions of `x`.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Writes `∇f(x)` into `out` (length `dim()`).
    fn gradient(&self, x: &[f64], out: &mut [f64]);

    /// Exact curvature constants, when known in closed form.
    fn curvature(&self) -> Option<CurvatureInfo> {
        None
    }

    /// Global minimizer, when known in closed form.
    fn minimizer(&self) -> Option<Vec<f64>> {
        None
    }

    fn gradient_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.gradient(x, &mut g);
        g
    }
}

/// Corrupted 1-D double well.
pub fn double_well_value(x: f64, scale: f64) -> f64 {
    let poly = x.powi(4) - 4.0 * x * x + x / 5.0;
    let corruption = 3.0 * (FAST_FREQ * x).sin() - 3.5 * (SLOW_FREQ * x).sin()
        + (COS_FREQ * x).cos();
    (poly + CORRUPTION_WEIGHT * corruption) / scale
}

pub fn double_well_grad(x: f64, scale: f64) -> f64 {
    let poly = 4.0 * x.powi(3) - 8.0 * x + 0.2;
    let corruption = 3.0 * FAST_FREQ * (FAST_FREQ * x).cos()
        - 3.5 * SLOW_FREQ * (SLOW_FREQ * x).cos()
        - COS_FREQ * (COS_FREQ * x).sin();
    (poly + CORRUPTION_WEIGHT * corruption) / scale
}

/// Column sums of the three corruption bases.
fn corruption_sums(x: &[f64]) -> (f64, f64, f64) {
    x.iter().fold((0.0, 0.0, 0.0), |(s_fast, s_cos, s_slow), &xi| {
        (
            s_fast + (FAST_FREQ * xi).sin(),
            s_cos + (COS_FREQ * xi).cos(),
            s_slow + (SLOW_FREQ * xi).sin(),
        )
    })
}

/// d-dimensional loss: separable quartic plus sinusoidal products over all
/// ordered coordinate pairs (self-pairs included).
pub fn nd_loss_value(x: &[f64], scale: f64) -> f64 {
    let poly: f64 = x.iter().map(|&xi| xi.powi(4) - 4.0 * xi * xi + xi / 5.0).sum();
    let (s_fast, s_cos, s_slow) = corruption_sums(x);
    // Σ_{i,j} a_i a_j = (Σ a_i)²
    let pairs = 3.0 * s_fast * s_fast + s_cos * s_cos - 3.5 * s_slow * s_slow;
    (poly + CORRUPTION_WEIGHT * pairs) / scale
}

pub fn nd_loss_grad(x: &[f64], scale: f64, out: &mut [f64]) {
    let (s_fast, s_cos, s_slow) = corruption_sums(x);
    for (g, &xk) in out.iter_mut().zip(x) {
        let poly = 4.0 * xk.powi(3) - 8.0 * xk + 0.2;
        // Each coordinate appears in both slots of the ordered pair, hence the 2.
        let pairs = 2.0
            * (3.0 * s_fast * FAST_FREQ * (FAST_FREQ * xk).cos()
                - s_cos * COS_FREQ * (COS_FREQ * xk).sin()
                - 3.5 * s_slow * SLOW_FREQ * (SLOW_FREQ * xk).cos());
        *g = (poly + CORRUPTION_WEIGHT * pairs) / scale;
    }
}

fn check_scale(scale: f64) -> Result<(), ObjectiveError> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(ObjectiveError::BadScale(scale))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoubleWell {
    scale: f64,
}

impl DoubleWell {
    pub fn new(scale: f64) -> Result<Self, ObjectiveError> {
        check_scale(scale)?;
        Ok(Self { scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl Objective for DoubleWell {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, x: &[f64]) -> f64 {
        double_well_value(x[0], self.scale)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out[0] = double_well_grad(x[0], self.scale);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdLoss {
    dim: usize,
    scale: f64,
}

impl NdLoss {
    pub fn new(dim: usize, scale: f64) -> Result<Self, ObjectiveError> {
        if dim == 0 {
            return Err(ObjectiveError::ZeroDimension);
        }
        check_scale(scale)?;
        Ok(Self { dim, scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl Objective for NdLoss {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        nd_loss_value(x, self.scale)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        nd_loss_grad(x, self.scale, out)
    }
}

/// `f(x) = ½ xᵀHx` with `H` symmetric positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    hessian: DMatrix<f64>,
    min_eig: f64,
    max_eig: f64,
}

impl Quadratic {
    pub fn new(hessian: DMatrix<f64>) -> Result<Self, ObjectiveError> {
        let (rows, cols) = hessian.shape();
        if rows != cols {
            return Err(ObjectiveError::NotSquare { rows, cols });
        }
        if rows == 0 {
            return Err(ObjectiveError::ZeroDimension);
        }
        for r in 0..rows {
            for c in (r + 1)..cols {
                if hessian[(r, c)] != hessian[(c, r)] {
                    return Err(ObjectiveError::NotSymmetric { row: r, col: c });
                }
            }
        }
        let eig = SymmetricEigen::new(hessian.clone()).eigenvalues;
        let min_eig = eig.min();
        let max_eig = eig.max();
        if !(min_eig > 0.0) {
            return Err(ObjectiveError::NotPositiveDefinite);
        }
        Ok(Self { hessian, min_eig, max_eig })
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self, ObjectiveError> {
        Self::new(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag)))
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }
}

pub fn quadratic_value(x: &[f64], hessian: &DMatrix<f64>) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for r in 0..n {
        let mut row = 0.0;
        for c in 0..n {
            row += hessian[(r, c)] * x[c];
        }
        acc += x[r] * row;
    }
    0.5 * acc
}

pub fn quadratic_grad(x: &[f64], hessian: &DMatrix<f64>, out: &mut [f64]) {
    let n = x.len();
    for (r, g) in out.iter_mut().enumerate().take(n) {
        let mut row = 0.0;
        for c in 0..n {
            row += hessian[(r, c)] * x[c];
        }
        *g = row;
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.hessian.nrows()
    }

    fn value(&self, x: &[f64]) -> f64 {
        quadratic_value(x, &self.hessian)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        quadratic_grad(x, &self.hessian, out)
    }

    fn curvature(&self) -> Option<CurvatureInfo> {
        Some(CurvatureInfo {
            lambda_bar: -self.min_eig,
            lambda_strong: Some(self.min_eig),
            lambda_smooth: Some(self.max_eig),
            q_bound: Some(0.0),
            domain_box: None,
        })
    }

    fn minimizer(&self) -> Option<Vec<f64>> {
        Some(vec![0.0; self.dim()])
    }
}

/// Central-difference gradient with step `max(1e-6, 1e-6·|x_i|)`.
pub fn finite_difference_gradient(obj: &dyn Objective, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = (1e-6 * x[i].abs()).max(1e-6);
            probe[i] = x[i] + h;
            let up = obj.value(&probe);
            probe[i] = x[i] - h;
            let down = obj.value(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn second_step(xi: f64) -> f64 {
    1e-4 * xi.abs().max(1.0)
}

/// Symmetrized central-difference Hessian built from the analytic gradient.
fn fd_hessian(obj: &dyn Objective, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let mut probe = x.to_vec();
    let mut up = vec![0.0; n];
    let mut down = vec![0.0; n];
    let mut hess = DMatrix::zeros(n, n);
    for a in 0..n {
        let h = second_step(x[a]);
        probe[a] = x[a] + h;
        obj.gradient(&probe, &mut up);
        probe[a] = x[a] - h;
        obj.gradient(&probe, &mut down);
        probe[a] = x[a];
        for b in 0..n {
            hess[(a, b)] = (up[b] - down[b]) / (2.0 * h);
        }
    }
    (&hess + hess.transpose()) * 0.5
}

/// Hessians of each gradient component, `T_j[a][b] = ∂²g_j / ∂x_a ∂x_b`.
fn fd_gradient_hessians(obj: &dyn Objective, x: &[f64]) -> Vec<DMatrix<f64>> {
    let n = x.len();
    let steps: Vec<f64> = x.iter().map(|&xi| second_step(xi)).collect();
    let mut out = vec![DMatrix::zeros(n, n); n];
    let mut probe = x.to_vec();
    let mut centre = vec![0.0; n];
    obj.gradient(x, &mut centre);
    let mut g = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for a in 0..n {
        let ha = steps[a];
        probe[a] = x[a] + ha;
        obj.gradient(&probe, &mut g[0]);
        probe[a] = x[a] - ha;
        obj.gradient(&probe, &mut g[1]);
        probe[a] = x[a];
        for (j, t) in out.iter_mut().enumerate() {
            t[(a, a)] = (g[0][j] - 2.0 * centre[j] + g[1][j]) / (ha * ha);
        }
        for b in (a + 1)..n {
            let hb = steps[b];
            for (slot, (sa, sb)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
                .into_iter()
                .enumerate()
            {
                probe[a] = x[a] + sa * ha;
                probe[b] = x[b] + sb * hb;
                obj.gradient(&probe, &mut g[slot]);
            }
            probe[a] = x[a];
            probe[b] = x[b];
            for (j, t) in out.iter_mut().enumerate() {
                let v = (g[0][j] - g[1][j] - g[2][j] + g[3][j]) / (4.0 * ha * hb);
                t[(a, b)] = v;
                t[(b, a)] = v;
            }
        }
    }
    out
}

/// Sample points: a product grid with as many points per axis as the budget
/// allows, then uniform random fill for the remainder.
fn curvature_samples(bbox: &[(f64, f64)], samples: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = bbox.len();
    let per_axis = (samples as f64).powf(1.0 / n as f64).floor() as usize;
    // Guard against floating error in the root, e.g. 1000^(1/3) = 9.999…
    let per_axis = if (per_axis + 1).checked_pow(n as u32).is_some_and(|v| v <= samples) {
        per_axis + 1
    } else {
        per_axis
    };
    let mut points = Vec::with_capacity(samples);
    if per_axis >= 2 {
        let total = per_axis.pow(n as u32);
        for flat in 0..total {
            let mut rem = flat;
            let point = bbox
                .iter()
                .map(|&(lo, hi)| {
                    let idx = rem % per_axis;
                    rem /= per_axis;
                    lo + (hi - lo) * idx as f64 / (per_axis - 1) as f64
                })
                .collect();
            points.push(point);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while points.len() < samples {
        points.push(bbox.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect());
    }
    points
}

/// Estimates `λ̄`, `Q`, and the Hessian eigenvalue range over a box.
pub fn estimate_curvature(
    obj: &dyn Objective,
    bbox: &[(f64, f64)],
    samples: usize,
    seed: u64,
) -> Result<CurvatureInfo, ObjectiveError> {
    if samples == 0 {
        return Err(ObjectiveError::NoSamples);
    }
    if bbox.len() != obj.dim() {
        return Err(ObjectiveError::BoxDimension { got: bbox.len(), want: obj.dim() });
    }
    for (i, &(lo, hi)) in bbox.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(ObjectiveError::BadInterval(i));
        }
    }
    let mut lambda_bar = f64::NEG_INFINITY;
    let mut min_eig = f64::INFINITY;
    let mut max_eig = f64::NEG_INFINITY;
    let mut q_bound = f64::NEG_INFINITY;
    for point in curvature_samples(bbox, samples, seed) {
        let hess = fd_hessian(obj, &point);
        let t = fd_gradient_hessians(obj, &point);
        let finite = hess.iter().all(|v| v.is_finite())
            && t.iter().all(|m| m.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(ObjectiveError::NonFinite { point });
        }
        let eig = SymmetricEigen::new(hess).eigenvalues;
        min_eig = min_eig.min(eig.min());
        max_eig = max_eig.max(eig.max());
        lambda_bar = lambda_bar.max(-eig.min());
        for tj in t {
            // Largest eigenvalue of -T_j.
            let e = SymmetricEigen::new(-tj).eigenvalues;
            q_bound = q_bound.max(e.max());
        }
    }
    Ok(CurvatureInfo {
        lambda_bar,
        lambda_strong: (min_eig > 0.0).then_some(min_eig),
        lambda_smooth: Some(max_eig),
        q_bound: Some(q_bound),
        domain_box: Some(bbox.to_vec()),
    })
}
