//! Near-optimal (D-optimal style) designs over finite parameter samples.

use crate::linalg::{eigen_projector, span_basis, spd_inverse, sym_eigen, Matrix, Vector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FW_MAX_ITERS: usize = 10_000;
pub const FW_MARGIN: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("empty point set")]
    Empty,
    #[error("Frank-Wolfe stalled: max leverage {leverage} after {iterations} iterations (target {target})")]
    Stalled { leverage: f64, iterations: usize, target: f64 },
    #[error("support of size {size} exceeds d0 = {d0}")]
    SupportTooLarge { size: usize, d0: usize },
}

/// A weighted design over points θ^Q, with the design matrix and projectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSet {
    pub stage: usize,
    /// Indices into the point set the design was computed from.
    pub support: Vec<usize>,
    pub weights: Vec<f64>,
    /// Preconditioned support points θ^Q.
    pub points_q: Vec<Vector>,
    /// Unpreconditioned parameters θ of the support.
    pub params: Vec<Vector>,
    pub v: Matrix,
    pub v_pinv: Matrix,
    pub eigenvalues: Vector,
    pub eigenvectors: Matrix,
    /// Orthonormal basis of the span of the points.
    pub span: Matrix,
    pub iterations: usize,
}

impl DesignSet {
    pub fn dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    /// ‖θ‖²_{V†}
    pub fn leverage(&self, theta: &Vector) -> f64 {
        theta.dot(&(&self.v_pinv * theta))
    }

    /// Distance of θ from the span of V (the kernel component).
    pub fn kernel_component(&self, theta: &Vector) -> f64 {
        let proj = &self.span * (self.span.transpose() * theta);
        (theta - proj).norm()
    }

    /// Correct guess entries, padded with zero vectors to `d0`.
    pub fn guess_vectors(&self, d0: usize) -> Vec<Vector> {
        let mut out: Vec<Vector> = self.points_q.clone();
        while out.len() < d0 {
            out.push(Vector::zeros(self.dim()));
        }
        out
    }

    fn empty(stage: usize, dim: usize) -> Self {
        Self {
            stage,
            support: Vec::new(),
            weights: Vec::new(),
            points_q: Vec::new(),
            params: Vec::new(),
            v: Matrix::zeros(dim, dim),
            v_pinv: Matrix::zeros(dim, dim),
            eigenvalues: Vector::zeros(dim),
            eigenvectors: Matrix::identity(dim, dim),
            span: Matrix::zeros(dim, 0),
            iterations: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub max_leverage: f64,
    pub max_kernel_component: f64,
    pub weight_sum: f64,
}

pub fn check_design(design: &DesignSet, points: &[Vector]) -> DesignReport {
    DesignReport {
        max_leverage: points.iter().map(|p| design.leverage(p)).fold(0.0, f64::max),
        max_kernel_component: points
            .iter()
            .map(|p| design.kernel_component(p))
            .fold(0.0, f64::max),
        weight_sum: design.weights.iter().sum(),
    }
}

fn vech(y: &Vector) -> Vec<f64> {
    let r = y.len();
    let mut out = Vec::with_capacity(r * (r + 1) / 2);
    for i in 0..r {
        for j in i..r {
            out.push(y[i] * y[j]);
        }
    }
    out
}

/// Greedy selection of `r` linearly independent points (max residual norm).
fn greedy_basis(ys: &[Vector], r: usize) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(r);
    let mut ortho: Vec<Vector> = Vec::with_capacity(r);
    for _ in 0..r {
        let mut best = None;
        let mut best_norm = 0.0;
        for (i, y) in ys.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let mut res = y.clone();
            for q in &ortho {
                res -= q * q.dot(&res);
            }
            let n = res.norm();
            if n > best_norm {
                best_norm = n;
                best = Some((i, res));
            }
        }
        match best {
            Some((i, res)) if best_norm > 0.0 => {
                chosen.push(i);
                ortho.push(res / best_norm);
            }
            _ => break,
        }
    }
    chosen
}

fn leverages(ys: &[Vector], weights: &[f64]) -> Option<Vec<f64>> {
    let r = ys[0].len();
    let mut m = Matrix::zeros(r, r);
    for (y, &w) in ys.iter().zip(weights) {
        if w > 0.0 {
            m += y * y.transpose() * w;
        }
    }
    let inv = spd_inverse(&m)?;
    Some(ys.iter().map(|y| y.dot(&(&inv * y))).collect())
}

/// Drop support points while keeping Σρ y yᵀ fixed (Carathéodory).
fn reduce_support(ys: &[Vector], weights: &mut [f64]) {
    let r = ys[0].len();
    let dd = r * (r + 1) / 2;
    loop {
        let support: Vec<usize> = (0..ys.len()).filter(|&i| weights[i] > 0.0).collect();
        if support.len() <= dd + 1 {
            return;
        }
        let cols: Vec<usize> = support[..dd + 2].to_vec();
        let z = Matrix::from_fn(dd + 1, cols.len(), |row, c| {
            if row < dd {
                vech(&ys[cols[c]])[row]
            } else {
                1.0
            }
        });
        let (_, vecs) = sym_eigen(&(z.transpose() * &z));
        let c = vecs.column(cols.len() - 1).into_owned();
        let mut step = f64::INFINITY;
        for (k, &i) in cols.iter().enumerate() {
            if c[k] > 1e-14 {
                step = step.min(weights[i] / c[k]);
            }
        }
        if !step.is_finite() {
            return;
        }
        let mut dropped = false;
        for (k, &i) in cols.iter().enumerate() {
            weights[i] -= step * c[k];
            if weights[i] <= 1e-15 {
                weights[i] = 0.0;
                dropped = true;
            }
        }
        if !dropped {
            return;
        }
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
    }
}

/// Frank-Wolfe D-optimal design on the span of `points`, stopped once every
/// point has ‖θ‖²_{V†} ≤ 2d − margin, followed by support reduction.
pub fn compute_near_optimal_design(points: &[Vector], d0: usize) -> Result<DesignSet, DesignError> {
    let dim = points.first().ok_or(DesignError::Empty)?.len();
    let span = span_basis(points, dim, 1e-10);
    let r = span.ncols();
    if r == 0 {
        return Ok(DesignSet::empty(0, dim));
    }
    let ys: Vec<Vector> = points.iter().map(|p| span.transpose() * p).collect();
    let target = 2.0 * dim as f64 - FW_MARGIN;

    let mut weights = vec![0.0; ys.len()];
    let basis = greedy_basis(&ys, r);
    for &i in &basis {
        weights[i] = 1.0 / basis.len() as f64;
    }
    let rf = r as f64;
    let mut iterations = 0;
    let mut lev = leverages(&ys, &weights).unwrap_or_else(|| vec![f64::INFINITY; ys.len()]);
    loop {
        let (imax, gmax) = lev
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &g)| if g > acc.1 { (i, g) } else { acc });
        if gmax <= target {
            break;
        }
        if iterations >= FW_MAX_ITERS {
            return Err(DesignError::Stalled {
                leverage: gmax,
                iterations,
                target,
            });
        }
        let step = ((gmax / rf - 1.0) / (gmax - 1.0)).clamp(0.0, 1.0);
        for w in weights.iter_mut() {
            *w *= 1.0 - step;
        }
        weights[imax] += step;
        iterations += 1;
        lev = leverages(&ys, &weights).unwrap_or_else(|| vec![f64::INFINITY; ys.len()]);
    }
    reduce_support(&ys, &mut weights);

    let support: Vec<usize> = (0..ys.len()).filter(|&i| weights[i] > 0.0).collect();
    if support.len() > d0 {
        return Err(DesignError::SupportTooLarge {
            size: support.len(),
            d0,
        });
    }
    let w: Vec<f64> = support.iter().map(|&i| weights[i]).collect();
    let mut m = Matrix::zeros(r, r);
    let mut v = Matrix::zeros(dim, dim);
    for (&i, &wi) in support.iter().zip(&w) {
        m += &ys[i] * ys[i].transpose() * wi;
        v += &points[i] * points[i].transpose() * wi;
    }
    let m_inv = spd_inverse(&m).expect("support spans the point set");
    let v_pinv = &span * m_inv * span.transpose();
    let (eigenvalues, eigenvectors) = sym_eigen(&v);
    let points_q: Vec<Vector> = support.iter().map(|&i| points[i].clone()).collect();
    Ok(DesignSet {
        stage: 0,
        support,
        weights: w,
        params: points_q.clone(),
        points_q,
        v,
        v_pinv,
        eigenvalues,
        eigenvectors,
        span,
        iterations,
    })
}

/// Design for one stage: points are θ^Q = Q_h^{-1} θ; the original θ of the
/// support are kept for range_Q.
pub fn design_for_stage(
    stage: usize,
    thetas: &[Vector],
    q_inv: &Matrix,
    d0: usize,
) -> Result<DesignSet, DesignError> {
    if thetas.is_empty() {
        return Ok(DesignSet::empty(stage, q_inv.nrows()));
    }
    let points: Vec<Vector> = thetas.iter().map(|t| q_inv * t).collect();
    let mut design = compute_near_optimal_design(&points, d0)?;
    design.stage = stage;
    design.params = design.support.iter().map(|&i| thetas[i].clone()).collect();
    Ok(design)
}

/// (P_∥, P_⊥): eigen-split of V at threshold γ.
pub fn parallel_perp_projectors(design: &DesignSet, gamma: f64) -> (Matrix, Matrix) {
    let par = eigen_projector(&design.eigenvalues, &design.eigenvectors, gamma);
    let n = par.nrows();
    let perp = Matrix::identity(n, n) - &par;
    (par, perp)
}

/// Split of an arbitrary PSD matrix, for callers that hold V directly.
pub fn split_psd(v: &Matrix, gamma: f64) -> (Matrix, Matrix) {
    let (vals, vecs) = sym_eigen(v);
    let par = eigen_projector(&vals, &vecs, gamma);
    let n = par.nrows();
    (par.clone(), Matrix::identity(n, n) - par)
}

/// max over designed parameters and action pairs of ⟨φ(s,i) − φ(s,j), θ⟩.
pub fn range_q(actions: &[Vector], design: &DesignSet) -> f64 {
    crate::features::range_over(actions, &design.params)
}
