//! Feature maps, per-policy parameter fits and range quantities.

use crate::linalg::{Matrix, Vector};
use crate::mdp::{evaluate_policy_exact, MdpError, MemorylessPolicy, Mdp, StateId, ValueTables};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("feature table shape does not match the MDP: {0}")]
    Shape(String),
    #[error("feature norm {norm} at {state} action {action} exceeds L1 = {l1}")]
    NormBound { state: StateId, action: usize, norm: f64, l1: f64 },
    #[error("parameter radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("empty policy sample")]
    EmptySample,
    #[error("action index out of range")]
    InvalidAction,
    #[error("stage {stage} out of range for a parameter sample with {available} stages")]
    StageMismatch { stage: usize, available: usize },
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// φ(s, a) for every state-action pair, indexed `[stage][state][action]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub dim: usize,
    pub l1: f64,
    pub l2: f64,
    pub phi: Vec<Vec<Vec<Vector>>>,
}

impl FeatureTable {
    pub fn new(
        mdp: &Mdp,
        dim: usize,
        l1: f64,
        l2: f64,
        phi: Vec<Vec<Vec<Vector>>>,
    ) -> Result<Self, FeatureError> {
        let table = Self { dim, l1, l2, phi };
        table.check(mdp)?;
        Ok(table)
    }

    pub fn from_fn(
        mdp: &Mdp,
        dim: usize,
        l1: f64,
        l2: f64,
        mut f: impl FnMut(StateId, usize) -> Vector,
    ) -> Result<Self, FeatureError> {
        let phi = (0..mdp.horizon())
            .map(|t| {
                mdp.stage_states(t)
                    .map(|s| (0..mdp.num_actions()).map(|a| f(s, a)).collect())
                    .collect()
            })
            .collect();
        Self::new(mdp, dim, l1, l2, phi)
    }

    pub fn check(&self, mdp: &Mdp) -> Result<(), FeatureError> {
        if self.phi.len() != mdp.horizon() {
            return Err(FeatureError::Shape("stage count".into()));
        }
        for s in mdp.states() {
            let row = self
                .phi
                .get(s.stage)
                .and_then(|st| st.get(s.index))
                .ok_or_else(|| FeatureError::Shape(format!("missing state {s}")))?;
            if row.len() != mdp.num_actions() {
                return Err(FeatureError::Shape(format!("action count at {s}")));
            }
            for (a, v) in row.iter().enumerate() {
                if v.len() != self.dim {
                    return Err(FeatureError::Shape(format!("dimension at {s} action {a}")));
                }
                let norm = v.norm();
                if norm > self.l1 + 1e-12 {
                    return Err(FeatureError::NormBound {
                        state: s,
                        action: a,
                        norm,
                        l1: self.l1,
                    });
                }
            }
        }
        for (t, st) in self.phi.iter().enumerate() {
            if st.len() != mdp.stage_size(t) {
                return Err(FeatureError::Shape(format!("state count at stage {t}")));
            }
        }
        Ok(())
    }

    pub fn phi(&self, s: StateId, a: usize) -> &Vector {
        &self.phi[s.stage][s.index][a]
    }

    pub fn actions(&self, s: StateId) -> &[Vector] {
        &self.phi[s.stage][s.index]
    }

    /// Rows of one stage in (state, action) order.
    pub fn stage_rows(&self, stage: usize) -> Vec<Vector> {
        self.phi[stage].iter().flatten().cloned().collect()
    }

    pub fn num_actions(&self) -> usize {
        self.phi[0][0].len()
    }
}

/// φ(s, i) − φ(s, j).
pub fn feature_diff(
    phi: &FeatureTable,
    s: StateId,
    i: usize,
    j: usize,
) -> Result<Vector, FeatureError> {
    let row = phi.actions(s);
    if i >= row.len() || j >= row.len() {
        return Err(FeatureError::InvalidAction);
    }
    Ok(&row[i] - &row[j])
}

/// Result of a Chebyshev (uniform-norm) fit.
#[derive(Clone, Debug, PartialEq)]
pub struct ChebyshevFit {
    pub theta: Vector,
    /// max_r |b_r − ⟨a_r, θ⟩|
    pub error: f64,
    /// Verified upper bound on error − optimum, from a dual certificate.
    pub gap: f64,
}

/// Target gap of the barrier method.
pub const FIT_GAP_TOL: f64 = 1e-9;

/// min_θ max_r |b_r − ⟨a_r, θ⟩| subject to ‖θ‖₂ ≤ radius.
///
/// A minimum-norm least-squares solution is accepted when it interpolates
/// (residual ≤ 1e-12) inside the ball; otherwise a log-barrier interior point
/// method on (θ, t) is run. The returned gap is certified by the dual bound
/// g(w) = wᵀb − radius·‖Aᵀw‖ for ‖w‖₁ ≤ 1.
pub fn chebyshev_fit(rows: &[Vector], targets: &[f64], dim: usize, radius: f64) -> Result<ChebyshevFit, FeatureError> {
    if !(radius > 0.0) {
        return Err(FeatureError::NonPositiveRadius(radius));
    }
    if rows.is_empty() {
        return Ok(ChebyshevFit {
            theta: Vector::zeros(dim),
            error: 0.0,
            gap: 0.0,
        });
    }
    let n = rows.len();
    let a = Matrix::from_fn(n, dim, |r, c| rows[r][c]);
    let b = Vector::from_column_slice(targets);
    let max_err = |theta: &Vector| (&b - &a * theta).amax();

    if let Some(theta) = min_norm_lstsq(&a, &b) {
        let err = max_err(&theta);
        if err <= 1e-12 && theta.norm() <= radius {
            return Ok(ChebyshevFit {
                theta,
                error: err,
                gap: err,
            });
        }
    }
    let (theta, w) = barrier_fit(&a, &b, radius);
    let error = max_err(&theta);
    let dual_of = |w: &Vector| w.dot(&b) - radius * (a.transpose() * w).norm();
    let dual = dual_of(&w).max(dual_of(&project_dual(&a, &w)));
    Ok(ChebyshevFit {
        theta,
        error,
        gap: (error - dual).max(0.0),
    })
}

fn min_norm_lstsq(a: &Matrix, b: &Vector) -> Option<Vector> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return Some(Vector::zeros(a.ncols()));
    }
    svd.solve(b, 1e-12 * smax).ok()
}

/// Remove the row-space component of a dual vector on its support, so that
/// Aᵀw = 0 exactly when the optimum is interior to the ball; renormalized to
/// ‖w‖₁ = 1.
fn project_dual(a: &Matrix, w: &Vector) -> Vector {
    let top = w.amax();
    if top == 0.0 {
        return w.clone();
    }
    let support: Vec<usize> = (0..w.len()).filter(|&r| w[r].abs() > 1e-8 * top).collect();
    let a_s = Matrix::from_fn(support.len(), a.ncols(), |i, c| a[(support[i], c)]);
    let w_s = Vector::from_iterator(support.len(), support.iter().map(|&r| w[r]));
    let gram = a_s.transpose() * &a_s;
    let pinv = crate::linalg::psd_pinv(&gram, 1e-12);
    let proj = &w_s - &a_s * (pinv * (a_s.transpose() * &w_s));
    let l1: f64 = proj.iter().map(|x| x.abs()).sum();
    let mut out = Vector::zeros(w.len());
    if l1 > 0.0 {
        for (i, &r) in support.iter().enumerate() {
            out[r] = proj[i] / l1;
        }
    }
    out
}

/// Log-barrier method. Returns θ and a normalized dual vector w.
fn barrier_fit(a: &Matrix, b: &Vector, radius: f64) -> (Vector, Vector) {
    let n = a.nrows();
    let d = a.ncols();
    let r2 = radius * radius;
    let m_constraints = (2 * n + 1) as f64;
    let mut theta = Vector::zeros(d);
    let mut t = b.amax() + 1.0;
    let mut mu = 1.0;

    // slacks: s⁺_r = t − b_r + a_rθ, s⁻_r = t + b_r − a_rθ, s_ball = R² − ‖θ‖²
    let slacks = |theta: &Vector, t: f64| -> (Vector, f64) {
        let res = b - a * theta;
        let mut s = Vector::zeros(2 * n);
        for r in 0..n {
            s[r] = t - res[r];
            s[n + r] = t + res[r];
        }
        (s, r2 - theta.norm_squared())
    };
    let objective = |theta: &Vector, t: f64, mu: f64| -> f64 {
        let (s, sb) = slacks(theta, t);
        if s.iter().any(|&x| x <= 0.0) || sb <= 0.0 {
            return f64::INFINITY;
        }
        t - (s.iter().map(|x| x.ln()).sum::<f64>() + sb.ln()) / mu
    };

    for _outer in 0..200 {
        for _newton in 0..200 {
            let (s, sb) = slacks(&theta, t);
            let mut grad = Vector::zeros(d + 1);
            let mut hess = Matrix::zeros(d + 1, d + 1);
            for r in 0..n {
                let row = a.row(r).transpose();
                for (sign, sl) in [(1.0, s[r]), (-1.0, s[n + r])] {
                    // constraint direction c = (sign·a_r, 1)
                    let mut c = Vector::zeros(d + 1);
                    c.rows_mut(0, d).copy_from(&(&row * sign));
                    c[d] = 1.0;
                    grad -= &c / sl;
                    hess += (&c * c.transpose()) / (sl * sl);
                }
            }
            {
                let th = &theta;
                let mut gb = Vector::zeros(d + 1);
                gb.rows_mut(0, d).copy_from(&(th * (2.0 / sb)));
                grad += gb;
                let mut hb = Matrix::zeros(d + 1, d + 1);
                let block = Matrix::identity(d, d) * (2.0 / sb) + (th * th.transpose()) * (4.0 / (sb * sb));
                hb.view_mut((0, 0), (d, d)).copy_from(&block);
                hess += hb;
            }
            // scaled objective t + barrier/μ
            grad /= mu;
            grad[d] += 1.0;
            hess /= mu;
            let step = match hess.clone().cholesky() {
                Some(c) => -c.solve(&grad),
                None => -&grad,
            };
            let decrement = -grad.dot(&step);
            if decrement / 2.0 <= 1e-14 && grad.amax() <= 1e-11 {
                break;
            }
            let f0 = objective(&theta, t, mu);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let th_new = &theta + step.rows(0, d) * alpha;
                let t_new = t + step[d] * alpha;
                let f1 = objective(&th_new, t_new, mu);
                if f1.is_finite() && f1 <= f0 - 0.25 * alpha * decrement {
                    theta = th_new;
                    t = t_new;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if m_constraints / mu < FIT_GAP_TOL {
            break;
        }
        mu *= 8.0;
    }

    let (s, _) = slacks(&theta, t);
    let mut w = Vector::zeros(n);
    let mut total = 0.0;
    for r in 0..n {
        let lp = 1.0 / (mu * s[r]);
        let lm = 1.0 / (mu * s[n + r]);
        w[r] = lp - lm;
        total += lp + lm;
    }
    if total > 0.0 {
        w /= total;
    }
    (theta, w)
}

/// Per-stage parameters of one policy with the achieved errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParameter {
    pub theta: Vec<Vector>,
    pub error: Vec<f64>,
}

/// Fit θ_h to a q-table at one stage.
pub fn fit_stage(
    phi: &FeatureTable,
    q_stage: &[Vec<f64>],
    stage: usize,
    radius: f64,
) -> Result<ChebyshevFit, FeatureError> {
    let rows = phi.stage_rows(stage);
    let targets: Vec<f64> = q_stage.iter().flatten().cloned().collect();
    chebyshev_fit(&rows, &targets, phi.dim, radius)
}

pub fn fit_q_tables(phi: &FeatureTable, values: &ValueTables) -> Result<PolicyParameter, FeatureError> {
    let mut theta = Vec::with_capacity(values.q.len());
    let mut error = Vec::with_capacity(values.q.len());
    for (h, q) in values.q.iter().enumerate() {
        let fit = fit_stage(phi, q, h, phi.l2)?;
        theta.push(fit.theta);
        error.push(fit.error);
    }
    Ok(PolicyParameter { theta, error })
}

pub fn fit_policy_parameters(
    mdp: &Mdp,
    phi: &FeatureTable,
    policy: &MemorylessPolicy,
) -> Result<PolicyParameter, FeatureError> {
    let values = evaluate_policy_exact(mdp, policy)?;
    fit_q_tables(phi, &values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisspecReport {
    /// Lower bound on the true misspecification.
    pub eta_hat: f64,
    /// `per_policy[i][h]`
    pub per_policy: Vec<Vec<f64>>,
    pub sample_description: String,
}

pub fn measure_misspecification(
    mdp: &Mdp,
    phi: &FeatureTable,
    sample: &[MemorylessPolicy],
    description: &str,
) -> Result<MisspecReport, FeatureError> {
    if sample.is_empty() {
        return Err(FeatureError::EmptySample);
    }
    let per_policy: Vec<Vec<f64>> = sample
        .par_iter()
        .map(|pi| fit_policy_parameters(mdp, phi, pi).map(|p| p.error))
        .collect::<Result<_, _>>()?;
    let eta_hat = per_policy
        .iter()
        .flatten()
        .cloned()
        .fold(0.0, f64::max);
    Ok(MisspecReport {
        eta_hat,
        per_policy,
        sample_description: description.to_string(),
    })
}

/// max over θ ∈ thetas and action pairs of ⟨φ(s,i) − φ(s,j), θ⟩.
pub fn range_over(actions: &[Vector], thetas: &[Vector]) -> f64 {
    let mut best: f64 = 0.0;
    for theta in thetas {
        let vals: Vec<f64> = actions.iter().map(|p| p.dot(theta)).collect();
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        best = best.max(hi - lo);
    }
    best
}

/// range(s) over a finite per-stage parameter sample.
pub fn range_exact(
    phi: &FeatureTable,
    s: StateId,
    samples: &[Vec<Vector>],
) -> Result<f64, FeatureError> {
    let thetas = samples.get(s.stage).ok_or(FeatureError::StageMismatch {
        stage: s.stage,
        available: samples.len(),
    })?;
    Ok(range_over(phi.actions(s), thetas))
}

/// φ_Q(s, a) = Q_h φ(s, a).
pub fn precondition_features(phi: &Vector, q_h: &Matrix) -> Vector {
    q_h * phi
}

/// θ^Q = Q_h^{-1} θ.
pub fn precondition_parameter(theta: &Vector, q_h_inv: &Matrix) -> Vector {
    q_h_inv * theta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{ActionData, RewardDist};
    use rand::{Rng, SeedableRng};

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn feature_diff_direct() {
        let mdp = Mdp::new(
            1,
            2,
            vec![vec![vec![
                ActionData { next: vec![], reward: RewardDist::point(0.0) },
                ActionData { next: vec![], reward: RewardDist::point(0.0) },
            ]]],
        )
        .unwrap();
        let phi = FeatureTable::from_fn(&mdp, 2, 1.0, 1.0, |_, a| if a == 0 { v(&[1.0, 0.0]) } else { v(&[0.0, 1.0]) }).unwrap();
        let s = StateId::initial();
        assert_eq!(feature_diff(&phi, s, 0, 1).unwrap(), v(&[1.0, -1.0]));
        assert_eq!(feature_diff(&phi, s, 1, 1).unwrap(), v(&[0.0, 0.0]));
        assert!(feature_diff(&phi, s, 0, 2).is_err());
    }

    #[test]
    fn range_single_parameter() {
        let acts = vec![v(&[1.0, 0.0]), v(&[0.0, 0.0])];
        assert!((range_over(&acts, &[v(&[0.7, 0.0])]) - 0.7).abs() < 1e-15);
        assert_eq!(range_over(&[v(&[0.3]), v(&[0.3])], &[v(&[5.0])]), 0.0);
    }

    #[test]
    fn preconditioning_diagonal_example() {
        let q = Matrix::from_diagonal(&v(&[2.0, 0.5]));
        let q_inv = Matrix::from_diagonal(&v(&[0.5, 2.0]));
        let phi_q = precondition_features(&v(&[1.0, 1.0]), &q);
        let theta_q = precondition_parameter(&v(&[3.0, 4.0]), &q_inv);
        assert_eq!(phi_q, v(&[2.0, 0.5]));
        assert_eq!(theta_q, v(&[1.5, 8.0]));
        assert!((phi_q.dot(&theta_q) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn chebyshev_nonrealizable_matches_hand_solution() {
        // one coordinate, targets {0, 1} at feature 1: best constant fit 0.5
        let rows = vec![v(&[1.0]), v(&[1.0])];
        let fit = chebyshev_fit(&rows, &[0.0, 1.0], 1, 10.0).unwrap();
        assert!((fit.theta[0] - 0.5).abs() < 1e-6);
        assert!((fit.error - 0.5).abs() < 1e-7);
        assert!(fit.gap <= 1e-7);
    }

    #[test]
    fn chebyshev_ball_constraint_binds() {
        // target 3 at feature 1 with radius 1: θ = 1, error 2
        let fit = chebyshev_fit(&[v(&[1.0])], &[3.0], 1, 1.0).unwrap();
        assert!((fit.theta[0] - 1.0).abs() < 1e-6);
        assert!((fit.error - 2.0).abs() < 1e-6);
        assert!(fit.gap <= 1e-7);
    }

    #[test]
    fn chebyshev_random_gap_certified() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let d = rng.gen_range(1..5);
            let n = rng.gen_range(d + 1..20);
            let rows: Vec<Vector> = (0..n).map(|_| Vector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0))).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
            let fit = chebyshev_fit(&rows, &b, d, rng.gen_range(0.5..3.0)).unwrap();
            assert!(fit.gap <= 1e-7, "gap {}", fit.gap);
        }
    }

    #[test]
    fn chebyshev_rejects_nonpositive_radius() {
        assert!(chebyshev_fit(&[v(&[1.0])], &[1.0], 1, 0.0).is_err());
    }
}
