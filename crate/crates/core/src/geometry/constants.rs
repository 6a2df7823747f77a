//! Algorithm constants: theory values from the closed-form definitions, and a
//! practical variant with explicit overrides.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

pub const FIXED_POINT_BUDGET: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstantsError {
    #[error("inputs must be positive and finite (d, H, eps, zeta, L1, L2)")]
    BadInput,
    #[error("fixed point did not converge after {iterations} rounds; trace of d1: {trace:?}")]
    NoConvergence { iterations: usize, trace: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Theory,
    Practical,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "theory" => Ok(Mode::Theory),
            "practical" => Ok(Mode::Practical),
            other => Err(format!("unknown mode {other:?} (expected theory or practical)")),
        }
    }
}

/// Replacements applied on top of the theory constants in practical mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PracticalOverrides {
    pub n: usize,
    pub beta: f64,
    pub m_max: usize,
    /// Replaces ω when set.
    pub omega: Option<f64>,
    /// Multiplies the uncertainty threshold.
    pub uncertainty_scale: f64,
    /// Multiplies the constant term 3ε/(dH²) of the discrepancy threshold.
    pub discrepancy_scale: f64,
    /// Replaces the ridge parameter λ when set.
    pub lambda: Option<f64>,
}

impl Default for PracticalOverrides {
    fn default() -> Self {
        Self {
            n: 200,
            beta: 2.0,
            m_max: 200,
            omega: Some(1.0),
            uncertainty_scale: 100.0,
            discrepancy_scale: 100.0,
            lambda: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantSet {
    pub mode: Mode,
    pub d: usize,
    pub horizon: usize,
    pub epsilon: f64,
    pub zeta: f64,
    pub l1: f64,
    pub l2: f64,
    pub d0: usize,
    pub d1: usize,
    pub omega: f64,
    pub gamma: f64,
    pub beta: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub n: usize,
    pub m_max: usize,
    pub m_prime_max: usize,
    pub l3: f64,
    /// Largest misspecification the analysis tolerates.
    pub eta_bound: f64,
    /// 5 d0 η / α evaluated at `eta_bound`.
    pub eta0: f64,
    pub xi: f64,
    pub fixed_point_rounds: usize,
    pub practical: Option<PracticalOverrides>,
}

/// d0 = max(16, ⌈4d·ln ln max(d,3)⌉ + 16).
pub fn d0_for(d: usize) -> usize {
    let x = (d.max(3) as f64).ln().ln();
    16usize.max((4.0 * d as f64 * x).ceil() as usize + 16)
}

/// d1 = ⌈4d ln(1 + 16 L3⁴ L2⁴)⌉.
pub fn d1_for(d: usize, l3: f64, l2: f64) -> usize {
    (4.0 * d as f64 * (1.0 + 16.0 * l3.powi(4) * l2.powi(4)).ln()).ceil() as usize
}

pub fn omega_for(d1: usize) -> f64 {
    7.0 * (d1 as f64 + 1.0) + 7.0 / 3.0
}

struct Round {
    d1: usize,
    omega: f64,
    alpha: f64,
    lambda: f64,
    beta: f64,
    n: usize,
    m_max: usize,
    m_prime_max: usize,
    l3: f64,
    eta_bound: f64,
    eta0: f64,
    xi: f64,
}

impl ConstantSet {
    pub fn uncertainty_cap(&self) -> f64 {
        2.0 / (self.beta * self.omega * self.d as f64 * self.horizon as f64)
    }

    pub fn uncertainty_threshold(&self) -> f64 {
        let h = self.horizon as f64;
        let base = self.epsilon / (self.d as f64 * h * h * self.beta * self.omega);
        base * self.practical.as_ref().map_or(1.0, |p| p.uncertainty_scale)
    }

    pub fn discrepancy_threshold(&self, sigma_bar: f64) -> f64 {
        let h = self.horizon as f64;
        let c = 3.0 * self.epsilon / (self.d as f64 * h * h);
        sigma_bar * self.beta * self.omega + c * self.practical.as_ref().map_or(1.0, |p| p.discrepancy_scale)
    }

    /// ε/(dH²ω): tolerance of the consistency projection.
    pub fn projection_tolerance(&self) -> f64 {
        let h = self.horizon as f64;
        self.epsilon / (self.d as f64 * h * h * self.omega)
    }

    /// Radius of the Opt-1 parameter domain, 4 d0 H L2 / α.
    pub fn theta_bar_radius(&self) -> f64 {
        4.0 * self.d0 as f64 * self.horizon as f64 * self.l2 / self.alpha
    }

    /// √(d1 + 1), the guess norm bound.
    pub fn guess_radius(&self) -> f64 {
        ((self.d1 + 1) as f64).sqrt()
    }

    /// Key-value listing.
    pub fn report(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("mode".to_string(), format!("{:?}", self.mode).to_lowercase()),
            ("d".into(), self.d.to_string()),
            ("H".into(), self.horizon.to_string()),
            ("epsilon".into(), self.epsilon.to_string()),
            ("zeta".into(), self.zeta.to_string()),
            ("L1".into(), self.l1.to_string()),
            ("L2".into(), self.l2.to_string()),
            ("d0".into(), self.d0.to_string()),
            ("d1".into(), self.d1.to_string()),
            ("omega".into(), format!("{:.6e}", self.omega)),
            ("gamma".into(), format!("{:.6e}", self.gamma)),
            ("beta".into(), format!("{:.6e}", self.beta)),
            ("alpha".into(), format!("{:.6e}", self.alpha)),
            ("lambda".into(), format!("{:.6e}", self.lambda)),
            ("n".into(), self.n.to_string()),
            ("m_max".into(), self.m_max.to_string()),
            ("m_prime_max".into(), self.m_prime_max.to_string()),
            ("L3".into(), format!("{:.6e}", self.l3)),
            ("eta_bound".into(), format!("{:.6e}", self.eta_bound)),
            ("eta0".into(), format!("{:.6e}", self.eta0)),
            ("xi".into(), format!("{:.6e}", self.xi)),
            ("uncertainty_cap".into(), format!("{:.6e}", self.uncertainty_cap())),
            ("uncertainty_threshold".into(), format!("{:.6e}", self.uncertainty_threshold())),
            ("fixed_point_rounds".into(), self.fixed_point_rounds.to_string()),
        ];
        if let Some(p) = &self.practical {
            out.push(("practical.n".into(), p.n.to_string()));
            out.push(("practical.beta".into(), p.beta.to_string()));
            out.push(("practical.m_max".into(), p.m_max.to_string()));
            out.push((
                "practical.omega".into(),
                p.omega.map_or("theory".to_string(), |w| w.to_string()),
            ));
            out.push(("practical.uncertainty_scale".into(), p.uncertainty_scale.to_string()));
            out.push(("practical.discrepancy_scale".into(), p.discrepancy_scale.to_string()));
            out.push((
                "practical.lambda".into(),
                p.lambda.map_or("theory".to_string(), |l| l.to_string()),
            ));
        }
        out
    }
}

impl fmt::Display for ConstantSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.report() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Theory constants by fixed-point iteration, optionally followed by the
/// practical overrides.
pub fn compute_constants(
    d: usize,
    horizon: usize,
    epsilon: f64,
    zeta: f64,
    l1: f64,
    l2: f64,
    mode: Mode,
    overrides: Option<&PracticalOverrides>,
) -> Result<ConstantSet, ConstantsError> {
    let positive = |x: f64| x > 0.0 && x.is_finite();
    if d == 0 || horizon == 0 || !positive(epsilon) || !positive(zeta) || !positive(l1) || !positive(l2) {
        return Err(ConstantsError::BadInput);
    }
    let df = d as f64;
    let h = horizon as f64;
    let d0 = d0_for(d);
    let d0f = d0 as f64;
    let gamma = 1.0 / (8.0 * df);

    let mut l3: f64 = 1.0;
    let mut beta: f64 = 2.0;
    let mut n: usize = 1;
    let mut m_max: usize = 1;
    let mut trace = Vec::new();
    let mut last: Option<Round> = None;
    let mut rounds = 0;

    for round in 0..FIXED_POINT_BUDGET {
        rounds = round + 1;
        let d1 = d1_for(d, l3, l2);
        let d1f = d1 as f64;
        let omega = omega_for(d1);
        let alpha = gamma.sqrt() * epsilon / ((2.0 * df).sqrt() * (d1f + 1.0).sqrt() * h * h);
        let lambda = (alpha / (4.0 * d0f * l2)).powi(2);

        // m_max = β² ln(1 + H m n L1²/(dλ)) + 1, solved for m
        let mut m = m_max as f64;
        for _ in 0..200 {
            let next = beta * beta * (1.0 + h * m * n as f64 * l1 * l1 / (df * lambda)).ln() + 1.0;
            if (next - m).abs() < 1e-9 * next {
                m = next;
                break;
            }
            m = next;
        }
        let new_m_max = m.ceil() as usize;
        let m_prime_max = new_m_max + horizon * d1;
        let mp = m_prime_max as f64;

        let new_n = (64.0 * (df * h * h * omega).powi(2) / (epsilon * epsilon)
            * h
            * h
            * (2.0 * df * (18.0 * df * h.powi(3) / epsilon).ln() + (2.0 * mp * h * h / zeta).ln()))
            .ceil() as usize;
        let nf = new_n as f64;

        let small = (epsilon / (df * h * h * omega)).min(1.0 / (mp * nf * h).sqrt());
        let eta_bound = alpha / (10.0 * d0f) * (epsilon / (df * h.powi(3) * omega)).min(1.0 / (mp * nf * h).sqrt());
        let eta0 = 5.0 * d0f * eta_bound / alpha;
        let xi = epsilon / (5.0 * (2.0 * df).sqrt() * (h + 1.0).powi(3) * l1) * (small - eta0);

        let new_beta = 2.0
            + 2.0
                * h
                * (2.0 * df * h * (d0f + 1.0) * (12.0 * d0f * h * l2 / (alpha * xi)).ln()
                    + 2.0 * (mp * h * h / zeta).ln()
                    + df * (lambda + mp * nf * h * l1 * l1 / df).ln())
                .sqrt();

        // smallest L3 with 8 L3⁻² L1 √(d1+1) √(2d) H²/ε (1 + L1 λ^{-1/2} √(m_max n H d)) ≤ ε/(dH²ω)
        let lhs = 8.0 * l1 * (d1f + 1.0).sqrt() * (2.0 * df).sqrt() * h * h / epsilon
            * (1.0 + l1 / lambda.sqrt() * (new_m_max as f64 * nf * h * df).sqrt());
        let new_l3 = (lhs * df * h * h * omega / epsilon).sqrt();

        trace.push(d1);
        let stable = last.as_ref().is_some_and(|p| {
            p.d1 == d1
                && p.n == new_n
                && p.m_max == new_m_max
                && (p.beta - new_beta).abs() <= 1e-9 * new_beta
                && (p.l3 - new_l3).abs() <= 1e-9 * new_l3
        });
        l3 = new_l3;
        beta = new_beta;
        n = new_n;
        m_max = new_m_max;
        last = Some(Round {
            d1,
            omega,
            alpha,
            lambda,
            beta: new_beta,
            n: new_n,
            m_max: new_m_max,
            m_prime_max,
            l3: new_l3,
            eta_bound,
            eta0,
            xi,
        });
        if stable && d1_for(d, l3, l2) == d1 {
            break;
        }
        if round + 1 == FIXED_POINT_BUDGET {
            return Err(ConstantsError::NoConvergence {
                iterations: FIXED_POINT_BUDGET,
                trace,
            });
        }
    }
    let r = last.expect("at least one round");
    let mut set = ConstantSet {
        mode: Mode::Theory,
        d,
        horizon,
        epsilon,
        zeta,
        l1,
        l2,
        d0,
        d1: r.d1,
        omega: r.omega,
        gamma,
        beta: r.beta,
        alpha: r.alpha,
        lambda: r.lambda,
        n: r.n,
        m_max: r.m_max,
        m_prime_max: r.m_prime_max,
        l3: r.l3,
        eta_bound: r.eta_bound,
        eta0: r.eta0,
        xi: r.xi,
        fixed_point_rounds: rounds,
        practical: None,
    };
    if mode == Mode::Practical {
        let p = overrides.cloned().unwrap_or_default();
        set.mode = Mode::Practical;
        set.n = p.n;
        set.beta = p.beta;
        set.m_max = p.m_max;
        set.m_prime_max = p.m_max + horizon * set.d1;
        if let Some(w) = p.omega {
            set.omega = w;
        }
        if let Some(l) = p.lambda {
            set.lambda = l;
        }
        set.practical = Some(p);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_is_one_over_8d() {
        let c = compute_constants(2, 3, 0.1, 0.1, 1.0, 1.0, Mode::Theory, None).unwrap();
        assert_eq!(c.gamma, 1.0 / 16.0);
    }

    #[test]
    fn d0_clamp() {
        // ln ln 3 > 0, so the ceiling adds at least one
        assert_eq!(d0_for(1), 17);
        assert_eq!(d0_for(2), 17);
        let expected = (16.0 * (4f64).ln().ln()).ceil() as usize + 16;
        assert_eq!(d0_for(4), expected);
        assert_eq!(d0_for(4), 22);
    }

    #[test]
    fn omega_arithmetic() {
        assert!((omega_for(10) - 79.333_333_333_333_33).abs() < 1e-12);
    }

    #[test]
    fn theory_fixed_point_is_consistent() {
        let c = compute_constants(2, 3, 0.1, 0.1, 1.0, 1.0, Mode::Theory, None).unwrap();
        assert_eq!(c.d1, d1_for(2, c.l3, 1.0));
        assert!((c.omega - omega_for(c.d1)).abs() < 1e-12);
        assert_eq!(c.m_prime_max, c.m_max + 3 * c.d1);
        assert!(c.xi > 0.0);
        assert!(c.eta0 <= 0.5 * (c.epsilon / (2.0 * 9.0 * c.omega)));
        // L3 is the smallest value meeting its inequality
        let lhs = |l3: f64| {
            8.0 * l3.powi(-2) * (c.d1 as f64 + 1.0).sqrt() * 2.0 * 9.0 / 0.1
                * (1.0 + (c.lambda).powf(-0.5) * (c.m_max as f64 * c.n as f64 * 6.0).sqrt())
        };
        let rhs = 0.1 / (2.0 * 9.0 * c.omega);
        assert!(lhs(c.l3) <= rhs * (1.0 + 1e-9));
        assert!(lhs(c.l3 * 0.999) > rhs);
    }

    #[test]
    fn practical_overrides_apply() {
        let p = PracticalOverrides {
            omega: None,
            ..Default::default()
        };
        let c = compute_constants(2, 5, 0.1, 0.1, 1.0, 1.0, Mode::Practical, Some(&p)).unwrap();
        assert_eq!(c.n, 200);
        assert_eq!(c.beta, 2.0);
        assert_eq!(c.omega, omega_for(c.d1));
        assert_eq!(c.practical.as_ref().unwrap().m_max, 200);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(compute_constants(0, 3, 0.1, 0.1, 1.0, 1.0, Mode::Theory, None).is_err());
        assert!(compute_constants(2, 3, -0.1, 0.1, 1.0, 1.0, Mode::Theory, None).is_err());
    }
}
