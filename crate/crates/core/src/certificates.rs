//! Closed-form error envelopes for deterministic, i.i.d. and Markovian runs.
//!
//! All constants take `√C` from the certificate's sandwich constant, so the
//! envelopes inherit its `estimate` flag.

use serde::Serialize;

use crate::bellman::td_vector;
use crate::lyapunov::{lyap_value, LyapunovCert};
use crate::mdp::{expected_reward, feature_radius, Problem};
use crate::simulate::{coordinate_bias, sample_direction, xi_for};
use crate::{linalg, Vect};

#[derive(Debug, Clone, Serialize)]
pub struct BoundInputs {
    pub beta_eps: f64,
    pub sqrt_c: f64,
    pub phi_max: f64,
    pub r_max: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub theta_star: Vec<f64>,
    /// `‖Φθ*‖_∞`.
    pub q_star_inf: f64,
    /// `‖R + γPV_{θ*} − Φθ*‖_∞`.
    pub delta_star_inf: f64,
    /// `‖Φ‖₂`.
    pub phi_2: f64,
    /// `√C` includes a tail term, or fell back to the truncated sum.
    pub estimate: bool,
}

impl BoundInputs {
    pub fn from_problem(p: &Problem, cert: &LyapunovCert, theta_star: &Vect) -> Self {
        let (phi_max, phi_2) = feature_radius(p);
        let (_, r_max) = expected_reward(p);
        BoundInputs {
            beta_eps: cert.beta_eps,
            sqrt_c: cert.sandwich_constant().sqrt(),
            phi_max,
            r_max,
            gamma: p.gamma(),
            alpha: p.alpha(),
            theta_star: theta_star.iter().copied().collect(),
            q_star_inf: linalg::vec_inf_norm(&(p.features() * theta_star)),
            delta_star_inf: linalg::vec_inf_norm(&td_vector(p, theta_star)),
            phi_2,
            estimate: cert.estimate || !cert.c_eps_upper.is_finite(),
        }
    }

    /// `2α√C(1+γ)φ_max²`, the noise-growth coefficient of the i.i.d. rate.
    pub fn growth_coefficient(&self) -> f64 {
        2.0 * self.alpha * self.sqrt_c * (1.0 + self.gamma) * self.phi_max * self.phi_max
    }

    /// `2α√Cφ_max(R_max + (1+γ)‖Φθ*‖_∞)`.
    pub fn iid_residual(&self) -> f64 {
        2.0 * self.alpha
            * self.sqrt_c
            * self.phi_max
            * (self.r_max + (1.0 + self.gamma) * self.q_star_inf)
    }

    /// `λ = β + 2α√C(1+γ)φ_max²`.
    pub fn iid_lambda(&self) -> f64 {
        self.beta_eps + self.growth_coefficient()
    }

    /// `λ = β + 4α√C(1+γ)φ_max²`.
    pub fn markov_lambda(&self) -> f64 {
        self.beta_eps + 2.0 * self.growth_coefficient()
    }

    /// Residual with `‖δ*‖_∞` added inside the parenthesis.
    pub fn markov_residual(&self) -> f64 {
        2.0 * self.alpha
            * self.sqrt_c
            * self.phi_max
            * (self.r_max + (1.0 + self.gamma) * self.q_star_inf + self.delta_star_inf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeKind {
    Deterministic,
    Iid,
    Markov,
}

#[derive(Debug, Clone, Serialize)]
pub struct Envelope {
    pub kind: EnvelopeKind,
    pub lambda: f64,
    pub residual: f64,
    /// Bound on `E[p(x_k)]`: `λ^k p(x₀) + residual(1 − λ^k)/(1 − λ)`.
    pub p_bound: Vec<f64>,
    /// Bound on `E‖θ_k − θ*‖₂`.
    pub euclid_bound: Vec<f64>,
    /// Bound on `E‖Φθ_k − Φθ*‖₂`.
    pub q_bound: Vec<f64>,
    /// `residual/(1 − λ)` when `λ < 1`.
    pub limit: Option<f64>,
    /// `λ < 1`.
    pub applicable: bool,
    pub estimate: bool,
}

fn envelope(
    kind: EnvelopeKind,
    inputs: &BoundInputs,
    lambda: f64,
    residual: f64,
    x0_p: f64,
    x0_norm: f64,
    k_max: usize,
) -> Envelope {
    let applicable = lambda < 1.0;
    let mut p_bound = Vec::with_capacity(k_max + 1);
    let mut euclid_bound = Vec::with_capacity(k_max + 1);
    let mut cur = x0_p;
    let mut pow = 1.0;
    let mut geom = 0.0;
    for _ in 0..=k_max {
        p_bound.push(cur);
        // With λ < 1 the stated Euclidean bound uses the full limit term.
        let res_term = if applicable {
            residual / (1.0 - lambda)
        } else {
            residual * geom
        };
        euclid_bound.push(inputs.sqrt_c * pow * x0_norm + if residual == 0.0 { 0.0 } else { res_term });
        cur = lambda * cur + residual;
        geom = lambda * geom + 1.0;
        pow *= lambda;
    }
    let q_bound = euclid_bound.iter().map(|v| v * inputs.phi_2).collect();
    Envelope {
        kind,
        lambda,
        residual,
        p_bound,
        euclid_bound,
        q_bound,
        limit: applicable.then(|| residual / (1.0 - lambda)),
        applicable,
        estimate: inputs.estimate,
    }
}

/// `β^k p(x₀)`, with Euclidean and Q-function variants.
pub fn det_envelope(inputs: &BoundInputs, x0_p: f64, x0_norm: f64, k_max: usize) -> Envelope {
    envelope(
        EnvelopeKind::Deterministic,
        inputs,
        inputs.beta_eps,
        0.0,
        x0_p,
        x0_norm,
        k_max,
    )
}

pub fn iid_envelope(inputs: &BoundInputs, x0_p: f64, x0_norm: f64, k_max: usize) -> Envelope {
    envelope(
        EnvelopeKind::Iid,
        inputs,
        inputs.iid_lambda(),
        inputs.iid_residual(),
        x0_p,
        x0_norm,
        k_max,
    )
}

pub fn markov_envelope(inputs: &BoundInputs, x0_p: f64, x0_norm: f64, k_max: usize) -> Envelope {
    envelope(
        EnvelopeKind::Markov,
        inputs,
        inputs.markov_lambda(),
        inputs.markov_residual(),
        x0_p,
        x0_norm,
        k_max,
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct GrowthSide {
    /// Exact conditional expectation.
    pub lhs: f64,
    /// Right-hand side of the growth inequality.
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct NoiseGrowthReport {
    /// `E[p(w) | θ]` against the i.i.d. linear-growth bound.
    pub iid: GrowthSide,
    /// `E[p(b + ξ) | X, θ]` for every state-action `X`.
    pub markov: Vec<GrowthSide>,
    pub holds: bool,
}

/// Absolute slack for the exhaustive growth checks.
const GROWTH_TOL: f64 = 1e-10;

/// Exhaustive check of the linear-growth noise bounds at `θ`, with
/// `x = θ − θ*` and the certificate's truncated norm.
pub fn noise_growth_check(
    p: &Problem,
    cert: &LyapunovCert,
    theta: &Vect,
    theta_star: &Vect,
) -> NoiseGrowthReport {
    let inputs = BoundInputs::from_problem(p, cert, theta_star);
    let pn = |v: &Vect| lyap_value(cert, v.as_slice()).1;
    let x = theta - theta_star;
    let px = pn(&x);
    let g = crate::bellman::residual_g(p, theta);
    let (sc, phi, gam) = (inputs.sqrt_c, inputs.phi_max, inputs.gamma);
    let base = 2.0 * sc * phi * (inputs.r_max + (1.0 + gam) * inputs.q_star_inf);

    let mut lhs = 0.0;
    for sa in 0..p.n_sa() {
        for s_next in 0..p.n_states() {
            let w = p.sampling()[sa] * p.transition()[(sa, s_next)];
            if w != 0.0 {
                lhs += w * pn(&(sample_direction(p, theta, sa, s_next) - &g));
            }
        }
    }
    let rhs = base + 2.0 * sc * (1.0 + gam) * phi * phi * px;
    let iid = GrowthSide {
        lhs,
        rhs,
        holds: lhs <= rhs + GROWTH_TOL * (1.0 + rhs),
    };

    let markov: Vec<GrowthSide> = (0..p.n_sa())
        .map(|x_idx| {
            let b = coordinate_bias(p, theta, x_idx);
            let mut lhs = 0.0;
            for s_next in 0..p.n_states() {
                let w = p.transition()[(x_idx, s_next)];
                if w != 0.0 {
                    lhs += w * pn(&(&b + xi_for(p, theta, x_idx, s_next)));
                }
            }
            let rhs = base
                + 2.0 * sc * phi * inputs.delta_star_inf
                + 4.0 * sc * (1.0 + gam) * phi * phi * px;
            GrowthSide {
                lhs,
                rhs,
                holds: lhs <= rhs + GROWTH_TOL * (1.0 + rhs),
            }
        })
        .collect();
    let holds = iid.holds && markov.iter().all(|s| s.holds);
    NoiseGrowthReport { iid, markov, holds }
}
