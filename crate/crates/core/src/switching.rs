//! Switched-linear structure of the Q-learning map.
//!
//! The difference of two greedy values is a policy-weighted linear image of
//! the parameter difference, so `T(θ) − T(θ̄) = A_μ (θ − θ̄)` for a stochastic
//! policy μ built from the two parameters. Every such `A_μ` is a convex
//! combination of the finitely many deterministic-policy modes.

use serde::Serialize;

use crate::bellman::{learning_map, value_max};
use crate::error::Result;
use crate::mdp::{
    enumerate_policies_capped, DeterministicPolicy, Policy, Problem, StochasticPolicy,
    DEFAULT_POLICY_CAP,
};
use crate::{Mat, Vect};

/// Relative width below which `e_max − e_min` counts as zero.
pub const EQUAL_CASE_TOL: f64 = 1e-14;

/// Two-point lexicographic linearization of `V_θ − V_θ̄`.
///
/// Per state the returned policy mixes the first minimizer and first
/// maximizer of `e = Φ(θ − θ̄)` over actions so that the mixture reproduces
/// `V_θ(s) − V_θ̄(s)`.
pub fn linearize_max(p: &Problem, theta: &Vect, theta_bar: &Vect) -> StochasticPolicy {
    let ns = p.n_states();
    let na = p.n_actions();
    let e = p.features() * (theta - theta_bar);
    let (v, _) = value_max(p, theta);
    let (vb, _) = value_max(p, theta_bar);
    let scale = 1.0 + e.amax();
    let mut probs = Mat::zeros(ns, na);
    for s in 0..ns {
        let (mut a_min, mut a_max) = (0, 0);
        for a in 1..na {
            let val = e[p.sa_index(s, a)];
            if val < e[p.sa_index(s, a_min)] {
                a_min = a;
            }
            if val > e[p.sa_index(s, a_max)] {
                a_max = a;
            }
        }
        let e_min = e[p.sa_index(s, a_min)];
        let e_max = e[p.sa_index(s, a_max)];
        let width = e_max - e_min;
        if width <= EQUAL_CASE_TOL * scale {
            probs[(s, a_min)] = 1.0;
            continue;
        }
        let y = v[s] - vb[s];
        let lambda = ((y - e_min) / width).clamp(0.0, 1.0);
        probs[(s, a_max)] += lambda;
        probs[(s, a_min)] += 1.0 - lambda;
    }
    StochasticPolicy::from_rows_unchecked(probs)
}

/// `‖(V_θ − V_θ̄) − Π^μ Φ (θ − θ̄)‖_∞`.
pub fn linearization_defect(
    p: &Problem,
    theta: &Vect,
    theta_bar: &Vect,
    mu: &impl Policy,
) -> f64 {
    let (v, _) = value_max(p, theta);
    let (vb, _) = value_max(p, theta_bar);
    let lin = policy_features(p, mu) * (theta - theta_bar);
    (v - vb - lin).amax()
}

/// `Π^μ Φ`: row `s` is `Σ_a μ(a|s) φ(s,a)ᵀ`.
pub fn policy_features(p: &Problem, pol: &impl Policy) -> Mat {
    let phi = p.features();
    let mut out = Mat::zeros(p.n_states(), p.dim());
    for s in 0..p.n_states() {
        for a in 0..p.n_actions() {
            let w = pol.prob(s, a);
            if w != 0.0 {
                let row = phi.row(p.sa_index(s, a));
                let mut dst = out.row_mut(s);
                dst += row * w;
            }
        }
    }
    out
}

/// Drift matrix `ΦᵀDΦ − γ ΦᵀDPΠ^μΦ`, so that `A_μ = I − α(drift + ηI)`.
pub fn drift_matrix(p: &Problem, pol: &impl Policy) -> Mat {
    let c = p.cache();
    &c.m - &c.n * policy_features(p, pol) * p.gamma()
}

/// `A_μ = I − αΦᵀDΦ + αγΦᵀDPΠ^μΦ − αηI`.
pub fn mode_matrix(p: &Problem, pol: &impl Policy, alpha: f64, eta: f64) -> Mat {
    let m = p.dim();
    Mat::identity(m, m) * (1.0 - alpha * eta) - drift_matrix(p, pol) * alpha
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Direct,
    Regularized,
    /// Matrices supplied directly rather than derived from a problem.
    Custom,
}

/// The modes of every deterministic policy, in enumeration order.
#[derive(Debug, Clone)]
pub struct ModeFamily {
    pub modes: Vec<Mat>,
    /// Empty for [`FamilyKind::Custom`].
    pub policies: Vec<DeterministicPolicy>,
    pub alpha: f64,
    pub eta: f64,
    pub gamma: f64,
    pub kind: FamilyKind,
}

impl ModeFamily {
    /// Wraps an arbitrary list of equally sized square matrices.
    pub fn custom(modes: Vec<Mat>) -> Self {
        assert!(!modes.is_empty(), "mode family must not be empty");
        let n = modes[0].nrows();
        assert!(
            modes.iter().all(|a| a.nrows() == n && a.ncols() == n),
            "modes must be square and equally sized"
        );
        ModeFamily {
            modes,
            policies: Vec::new(),
            alpha: f64::NAN,
            eta: 0.0,
            gamma: f64::NAN,
            kind: FamilyKind::Custom,
        }
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.modes[0].nrows()
    }

    /// Same family with every mode multiplied by `t`.
    pub fn scaled(&self, t: f64) -> Self {
        let mut f = self.clone();
        f.modes.iter_mut().for_each(|a| *a *= t);
        f
    }
}

pub fn build_family(p: &Problem, alpha: f64, eta: f64) -> Result<ModeFamily> {
    build_family_capped(p, alpha, eta, DEFAULT_POLICY_CAP)
}

pub fn build_family_capped(p: &Problem, alpha: f64, eta: f64, cap: u128) -> Result<ModeFamily> {
    let policies = enumerate_policies_capped(p.n_states(), p.n_actions(), cap)?;
    let modes = policies
        .iter()
        .map(|pol| mode_matrix(p, pol, alpha, eta))
        .collect();
    Ok(ModeFamily {
        modes,
        policies,
        alpha,
        eta,
        gamma: p.gamma(),
        kind: if eta > 0.0 {
            FamilyKind::Regularized
        } else {
            FamilyKind::Direct
        },
    })
}

/// `c_π(μ) = Π_s μ(π(s)|s)` for every deterministic π in enumeration order.
pub fn hull_weights(mu: &StochasticPolicy) -> Result<Vec<f64>> {
    hull_weights_capped(mu, DEFAULT_POLICY_CAP)
}

pub fn hull_weights_capped(mu: &StochasticPolicy, cap: u128) -> Result<Vec<f64>> {
    let (ns, na) = mu.probs.shape();
    let policies = enumerate_policies_capped(ns, na, cap)?;
    Ok(policies
        .iter()
        .map(|pol| {
            pol.actions
                .iter()
                .enumerate()
                .map(|(s, &a)| mu.probs[(s, a)])
                .product()
        })
        .collect())
}

/// `Σ_π w_π A_π`.
pub fn hull_combination(family: &ModeFamily, weights: &[f64]) -> Mat {
    let n = family.dim();
    family
        .modes
        .iter()
        .zip(weights)
        .fold(Mat::zeros(n, n), |acc, (a, &w)| acc + a * w)
}

/// Exact pairwise representation `T(θ) − T(θ̄) = A_μ(θ − θ̄)`.
#[derive(Debug, Clone)]
pub struct PairwiseWitness {
    pub mu: StochasticPolicy,
    pub mode: Mat,
    /// `‖(T(θ) − T(θ̄)) − A_μ(θ − θ̄)‖₂`.
    pub residual: f64,
}

pub fn pairwise_mode(
    p: &Problem,
    theta: &Vect,
    theta_bar: &Vect,
    alpha: f64,
    eta: f64,
) -> PairwiseWitness {
    let mu = linearize_max(p, theta, theta_bar);
    let mode = mode_matrix(p, &mu, alpha, eta);
    let lhs = learning_map(p, theta, alpha, eta) - learning_map(p, theta_bar, alpha, eta);
    let residual = (lhs - &mode * (theta - theta_bar)).norm();
    PairwiseWitness { mu, mode, residual }
}
