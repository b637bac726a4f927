//! Bellman-side maps in parameter space.
//!
//! With `δ(θ) = R + γ P V_θ − Φθ` the projected Bellman residual is
//! `g(θ) = Φᵀ D δ(θ)`. Deterministic linear Q-learning iterates
//! `T_α(θ) = θ + α g(θ)`; projected Q-value iteration instead solves the
//! weighted least-squares problem at every step. Regularized variants add
//! `−ηθ` to the residual and `ηI` to the normal matrix.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lyapunov::LyapunovCert;
use crate::mdp::Problem;
use crate::{linalg, Mat, Vect};

/// Matrices that depend only on (Φ, d, P, η). Built once per [`Problem`].
#[derive(Debug, Clone)]
pub struct ProjectionCache {
    /// `ΦᵀDΦ`.
    pub m: Mat,
    /// `ΦᵀDΦ + ηI`.
    pub m_eta: Mat,
    /// `ΦᵀD`.
    pub k: Mat,
    /// `ΦᵀDP`.
    pub n: Mat,
    /// `Φ(ΦᵀDΦ)⁻¹ΦᵀD`.
    pub pi_d: Mat,
    /// `Φ(ΦᵀDΦ + ηI)⁻¹ΦᵀD`.
    pub gamma_eta: Mat,
    m_inv: Mat,
    m_eta_inv: Mat,
}

impl ProjectionCache {
    pub fn build(features: &Mat, sampling: &Vect, transition: &Mat, eta: f64) -> Result<Self> {
        let dim = features.ncols();
        let mut k = features.transpose();
        for (j, mut col) in k.column_iter_mut().enumerate() {
            col *= sampling[j];
        }
        let m = &k * features;
        let m_eta = &m + Mat::identity(dim, dim) * eta;
        let n = &k * transition;
        let m_inv = m
            .clone()
            .cholesky()
            .ok_or(Error::Singular("ΦᵀDΦ is not positive definite"))?
            .inverse();
        let m_eta_inv = m_eta
            .clone()
            .cholesky()
            .ok_or(Error::Singular("ΦᵀDΦ + ηI is not positive definite"))?
            .inverse();
        let pi_d = features * &m_inv * &k;
        let gamma_eta = features * &m_eta_inv * &k;

        let idem = (&pi_d * &pi_d - &pi_d).amax();
        let scale = 1.0_f64.max(pi_d.amax());
        if idem > 1e-10 * scale {
            return Err(Error::IdentityViolated {
                what: "D-orthogonal projection idempotence",
                defect: idem,
                bound: 1e-10 * scale,
            });
        }
        Ok(ProjectionCache {
            m,
            m_eta,
            k,
            n,
            pi_d,
            gamma_eta,
            m_inv,
            m_eta_inv,
        })
    }

    pub fn m_inv(&self) -> &Mat {
        &self.m_inv
    }

    pub fn m_eta_inv(&self) -> &Mat {
        &self.m_eta_inv
    }
}

/// Greedy value `V_θ(s) = max_a φ(s,a)ᵀθ` and the lexicographically first
/// maximizing action per state.
pub fn value_max(p: &Problem, theta: &Vect) -> (Vect, Vec<usize>) {
    let q = p.features() * theta;
    greedy_from_q(p, &q)
}

pub(crate) fn greedy_from_q(p: &Problem, q: &Vect) -> (Vect, Vec<usize>) {
    let ns = p.n_states();
    let mut v = Vect::zeros(ns);
    let mut arg = vec![0; ns];
    for s in 0..ns {
        let mut best = q[s];
        let mut best_a = 0;
        for a in 1..p.n_actions() {
            let val = q[p.sa_index(s, a)];
            if val > best {
                best = val;
                best_a = a;
            }
        }
        v[s] = best;
        arg[s] = best_a;
    }
    (v, arg)
}

/// Bellman backup of the represented Q-function, `R + γ P V_θ`.
pub fn bellman_target(p: &Problem, theta: &Vect) -> Vect {
    let (v, _) = value_max(p, theta);
    p.mean_reward() + p.transition() * v * p.gamma()
}

/// Temporal-difference vector `δ(θ) = R + γ P V_θ − Φθ`.
pub fn td_vector(p: &Problem, theta: &Vect) -> Vect {
    bellman_target(p, theta) - p.features() * theta
}

/// Projected Bellman residual `g(θ) = ΦᵀD(R + γPV_θ − Φθ)`.
pub fn residual_g(p: &Problem, theta: &Vect) -> Vect {
    &p.cache().k * td_vector(p, theta)
}

/// `g(θ) − ηθ`, whose zeros are the regularized fixed points.
pub fn regularized_residual(p: &Problem, theta: &Vect) -> Vect {
    residual_g(p, theta) - theta * p.eta()
}

/// `θ + α(g(θ) − ηθ)` for explicit α and η.
pub fn learning_map(p: &Problem, theta: &Vect, alpha: f64, eta: f64) -> Vect {
    theta + (residual_g(p, theta) - theta * eta) * alpha
}

/// Deterministic linear Q-learning map `T_α(θ) = θ + α g(θ)`.
pub fn step_dlq(p: &Problem, theta: &Vect) -> Vect {
    learning_map(p, theta, p.alpha(), 0.0)
}

/// Regularized map `T_{α,η}(θ) = T_α(θ) − αηθ`.
pub fn step_reg_dlq(p: &Problem, theta: &Vect) -> Vect {
    learning_map(p, theta, p.alpha(), p.eta())
}

/// Projected Q-VI in parameter space, `(ΦᵀDΦ)⁻¹ΦᵀD(R + γPV_θ)`.
pub fn step_pqvi(p: &Problem, theta: &Vect) -> Vect {
    let c = p.cache();
    c.m_inv() * (&c.k * bellman_target(p, theta))
}

/// Regularized projected Q-VI, `(ΦᵀDΦ + ηI)⁻¹ΦᵀD(R + γPV_θ)`.
pub fn step_rpvi(p: &Problem, theta: &Vect) -> Vect {
    let c = p.cache();
    c.m_eta_inv() * (&c.k * bellman_target(p, theta))
}

/// `‖Φθ − Π_D(R + γPV_θ)‖₂`, the residual of the projected equation itself.
pub fn projected_equation_residual(p: &Problem, theta: &Vect) -> f64 {
    (p.features() * theta - &p.cache().pi_d * bellman_target(p, theta)).norm()
}

/// Sup-norm contraction factor of the regularized projected Bellman operator.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SupContraction {
    /// `γ ‖Γ_η P‖_∞`.
    pub factor: f64,
    pub contraction: bool,
}

pub fn rpvi_sup_contraction(p: &Problem) -> SupContraction {
    let factor = p.gamma() * linalg::inf_norm(&(&p.cache().gamma_eta * p.transition()));
    SupContraction {
        factor,
        contraction: factor < 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    /// `T_α`.
    Dlq,
    /// `T_{α,η}`.
    RegDlq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// `max_iter` reached without meeting the tolerance.
    NotConverged,
    /// Non-finite entries or runaway norm detected at iterate `iterate`.
    Diverged { iterate: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct FixedPointReport {
    pub theta_star: Vec<f64>,
    /// Index k of the iterate at which the step test passed.
    pub iterations: usize,
    /// `‖g(θ)‖₂` (or `‖g(θ) − ηθ‖₂` for the regularized map) at the output.
    pub final_residual: f64,
    /// True only when a certificate with `β_ε < 1` backs the iteration.
    pub certified: bool,
    #[serde(flatten)]
    pub status: SolveStatus,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub theta0: Option<Vect>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-12,
            max_iter: 10_000,
            theta0: None,
        }
    }
}

/// Divergence threshold factor on `‖θ_k‖₂` relative to `1 + ‖θ₀‖₂`.
pub const DIVERGENCE_FACTOR: f64 = 1e12;

/// Plain Banach iteration of the chosen map.
///
/// Stops when `‖θ_{k+1} − θ_k‖₂ ≤ tol·(1 + ‖θ_k‖₂)`. The residual is only
/// reported; `g` is nonsmooth and a contraction already forces geometric
/// step decay.
pub fn solve_fixed_point(
    p: &Problem,
    map: MapKind,
    opts: &SolveOptions,
    certificate: Option<&LyapunovCert>,
) -> Result<FixedPointReport> {
    if !(opts.tol > 0.0) {
        return Err(Error::Invalid(format!("solver tolerance {} must be > 0", opts.tol)));
    }
    let dim = p.dim();
    let mut theta = match &opts.theta0 {
        Some(t) if t.len() != dim => {
            return Err(Error::Dimension(format!("theta0 has length {}, expected {dim}", t.len())))
        }
        Some(t) => t.clone(),
        None => Vect::zeros(dim),
    };
    let limit = DIVERGENCE_FACTOR * (1.0 + theta.norm());
    let apply = |t: &Vect| match map {
        MapKind::Dlq => step_dlq(p, t),
        MapKind::RegDlq => step_reg_dlq(p, t),
    };
    let residual = |t: &Vect| match map {
        MapKind::Dlq => residual_g(p, t).norm(),
        MapKind::RegDlq => regularized_residual(p, t).norm(),
    };
    let certified = certificate.is_some_and(|c| c.beta_eps < 1.0 && c.valid);

    let mut status = SolveStatus::NotConverged;
    let mut iterations = opts.max_iter;
    for k in 0..opts.max_iter {
        let next = apply(&theta);
        if next.iter().any(|v| !v.is_finite()) || next.norm() > limit {
            status = SolveStatus::Diverged { iterate: k + 1 };
            iterations = k + 1;
            theta = next;
            break;
        }
        let step = (&next - &theta).norm();
        let threshold = opts.tol * (1.0 + theta.norm());
        theta = next;
        if step <= threshold {
            status = SolveStatus::Converged;
            iterations = k;
            break;
        }
    }
    let final_residual = if theta.iter().all(|v| v.is_finite()) {
        residual(&theta)
    } else {
        f64::INFINITY
    };
    Ok(FixedPointReport {
        theta_star: theta.iter().copied().collect(),
        iterations,
        final_residual,
        certified,
        status,
    })
}
