//! Per-stage preconditioning matrices Q_h = (L2^{-2} I + Σ vvᵀ)^{-1/2}.

use crate::linalg::{eigen_projector, pd_inv_sqrt, psd_sqrt, sym_eigen, Matrix, Vector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used by [`validate_preconditioning`].
pub const PRECOND_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreconditioningError {
    #[error("cannot append a zero direction")]
    ZeroDirection,
    #[error("stage {0} out of range")]
    Stage(usize),
    #[error("base matrix is not positive definite")]
    NotPositiveDefinite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preconditioning {
    pub dim: usize,
    pub l2: f64,
    pub l3: f64,
    /// C_h per stage.
    pub directions: Vec<Vec<Vector>>,
    /// Q_h^{-2} per stage.
    base: Vec<Matrix>,
    q: Vec<Matrix>,
    q_inv: Vec<Matrix>,
    /// Bumped on every append; used to key caches.
    pub version: u64,
}

/// Q_h from a direction sequence.
pub fn q_from_sequence(directions: &[Vector], l2: f64, dim: usize) -> Matrix {
    pd_inv_sqrt(&base_matrix(directions, l2, dim)).expect("base matrix has eigenvalues >= L2^-2")
}

fn base_matrix(directions: &[Vector], l2: f64, dim: usize) -> Matrix {
    let mut base = Matrix::identity(dim, dim) / (l2 * l2);
    for v in directions {
        base += v * v.transpose();
    }
    base
}

impl Preconditioning {
    /// Empty sequences: Q_h = L2·I at every stage.
    pub fn new(horizon: usize, dim: usize, l2: f64, l3: f64) -> Self {
        let base = Matrix::identity(dim, dim) / (l2 * l2);
        Self {
            dim,
            l2,
            l3,
            directions: vec![Vec::new(); horizon],
            base: vec![base; horizon],
            q: vec![Matrix::identity(dim, dim) * l2; horizon],
            q_inv: vec![Matrix::identity(dim, dim) / l2; horizon],
            version: 0,
        }
    }

    pub fn horizon(&self) -> usize {
        self.q.len()
    }

    pub fn q(&self, h: usize) -> &Matrix {
        &self.q[h]
    }

    pub fn q_inv(&self, h: usize) -> &Matrix {
        &self.q_inv[h]
    }

    /// Q_h^{-2}.
    pub fn base(&self, h: usize) -> &Matrix {
        &self.base[h]
    }

    /// Append Q_h^{-1} w to C_h and update Q_h in place.
    pub fn append_direction(&mut self, h: usize, w: &Vector) -> Result<(), PreconditioningError> {
        if h >= self.horizon() {
            return Err(PreconditioningError::Stage(h));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(PreconditioningError::ZeroDirection);
        }
        let v = &self.q_inv[h] * w;
        let base = &self.base[h] + &v * v.transpose();
        let q = pd_inv_sqrt(&base).ok_or(PreconditioningError::NotPositiveDefinite)?;
        self.q_inv[h] = psd_sqrt(&base);
        self.q[h] = q;
        self.base[h] = base;
        self.directions[h].push(v);
        self.version += 1;
        Ok(())
    }

    /// Functional form of [`Self::append_direction`].
    pub fn appended(&self, h: usize, w: &Vector) -> Result<Self, PreconditioningError> {
        let mut next = self.clone();
        next.append_direction(h, w)?;
        Ok(next)
    }

    /// Projector onto eigenvectors of Q_h with eigenvalue ≥ L3^{-2}.
    pub fn z_projector(&self, h: usize) -> Matrix {
        let (vals, vecs) = sym_eigen(&self.q[h]);
        eigen_projector(&vals, &vecs, self.l3.powi(-2))
    }

    /// ‖θ‖_{Q_h^{-2}}.
    pub fn ellipsoid_norm(&self, h: usize, theta: &Vector) -> f64 {
        theta.dot(&(&self.base[h] * theta)).max(0.0).sqrt()
    }

    pub fn update_counts(&self) -> Vec<usize> {
        self.directions.iter().map(|c| c.len()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PrecondViolation {
    /// sup_θ |⟨θ, v_i⟩| > 1
    Bounded { stage: usize, index: usize, sup: f64 },
    /// ‖(prefix base)^{-1/2} v_i‖² < 1/2
    Informative { stage: usize, index: usize, value: f64 },
    /// ‖v_i‖ > L3
    NormBound { stage: usize, index: usize, norm: f64 },
    /// |C_h| > d1
    Length { stage: usize, length: usize },
    /// sup ‖θ‖_{Q_h^{-2}} > √(d1+1)
    Ellipsoid { stage: usize, value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreconditioningReport {
    pub violations: Vec<PrecondViolation>,
    /// max over the sample of ‖θ‖_{Q_h^{-2}} per stage.
    pub ellipsoid_max: Vec<f64>,
    pub ellipsoid_bound: f64,
}

impl PreconditioningReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check the prefix conditions of every direction sequence and the enclosing
/// ellipsoid bound against finite parameter samples (one per stage).
pub fn validate_preconditioning(
    q: &Preconditioning,
    samples: &[Vec<Vector>],
    d1: usize,
) -> PreconditioningReport {
    let mut violations = Vec::new();
    let mut ellipsoid_max = Vec::with_capacity(q.horizon());
    let bound = ((d1 + 1) as f64).sqrt();
    for h in 0..q.horizon() {
        let empty = Vec::new();
        let thetas = samples.get(h).unwrap_or(&empty);
        let seq = &q.directions[h];
        if seq.len() > d1 {
            violations.push(PrecondViolation::Length {
                stage: h,
                length: seq.len(),
            });
        }
        for (i, v) in seq.iter().enumerate() {
            let sup = thetas.iter().map(|t| t.dot(v).abs()).fold(0.0, f64::max);
            if sup > 1.0 + PRECOND_TOL {
                violations.push(PrecondViolation::Bounded { stage: h, index: i, sup });
            }
            let prefix = q_from_sequence(&seq[..i], q.l2, q.dim);
            let value = (&prefix * v).norm_squared();
            if value < 0.5 - PRECOND_TOL {
                violations.push(PrecondViolation::Informative { stage: h, index: i, value });
            }
            let norm = v.norm();
            if norm > q.l3 + PRECOND_TOL {
                violations.push(PrecondViolation::NormBound { stage: h, index: i, norm });
            }
        }
        let emax = thetas
            .iter()
            .map(|t| q.ellipsoid_norm(h, t))
            .fold(0.0, f64::max);
        if emax > bound + PRECOND_TOL {
            violations.push(PrecondViolation::Ellipsoid { stage: h, value: emax });
        }
        ellipsoid_max.push(emax);
    }
    PreconditioningReport {
        violations,
        ellipsoid_max,
        ellipsoid_bound: bound,
    }
}
