//! Deterministic, i.i.d. and Markovian linear Q-learning runs.
//!
//! Every stochastic step records its noise decomposition and checks it
//! algebraically: i.i.d. `θ⁺ = T(θ) + αw`, Markov `θ⁺ = T(θ) + αb + αξ`.
//! With a known fixed point θ* the error `x = θ − θ*` additionally obeys the
//! switched recursion `x⁺ = A_μ x + (noise)` with `μ = linearize_max(θ, θ*)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bellman::{
    learning_map, residual_g, solve_fixed_point, td_vector, value_max, MapKind, SolveOptions,
    SolveStatus, DIVERGENCE_FACTOR,
};
use crate::certificates::{iid_envelope, markov_envelope, BoundInputs, Envelope};
use crate::error::{Error, Result};
use crate::lyapunov::{lyap_value, LyapunovCert};
use crate::mdp::{BehaviorModel, Problem, StochasticPolicy};
use crate::switching::{mode_matrix, pairwise_mode};
use crate::{Mat, Vect};

/// Relative tolerance for the per-step algebraic identities.
pub const STEP_IDENTITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Deterministic,
    Iid,
    Markov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    /// Uses the problem's η.
    Regularized,
}

impl Variant {
    pub fn eta(self, p: &Problem) -> f64 {
        match self {
            Variant::Plain => 0.0,
            Variant::Regularized => p.eta(),
        }
    }

    pub fn map_kind(self) -> MapKind {
        match self {
            Variant::Plain => MapKind::Dlq,
            Variant::Regularized => MapKind::RegDlq,
        }
    }
}

/// ChaCha20 keyed by `seed`, with the run index as the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RngSpec {
    pub algorithm: &'static str,
    pub seed: u64,
    pub stream: u64,
}

impl RngSpec {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngSpec {
            algorithm: "chacha20",
            seed,
            stream,
        }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Inverse-CDF draw over `weights` in index order; `u` is scaled by the
/// total mass so rows with rounding error still sample consistently.
pub fn sample_index(weights: impl IntoIterator<Item = f64> + Clone, rng: &mut impl Rng) -> usize {
    let total: f64 = weights.clone().into_iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.into_iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
        }
        acc += w;
        if u < acc {
            return i;
        }
    }
    last_positive
}

#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub kind: Kind,
    pub variant: Variant,
    pub rng: Option<RngSpec>,
    /// `K + 1` iterates.
    pub thetas: Vec<Vec<f64>>,
    /// Realized linearizing policies against θ*, one per step; empty when θ*
    /// was not supplied.
    #[serde(skip)]
    pub modes: Vec<StochasticPolicy>,
    /// Enumeration index of each mode when it is deterministic.
    pub mode_words: Vec<Option<usize>>,
    /// i.i.d. martingale noise `w_k`.
    pub noise_w: Vec<Vec<f64>>,
    /// Markov transition-reward noise `ξ_{k+1}`.
    pub xi: Vec<Vec<f64>>,
    /// Markov coordinate-sampling bias `b_k`.
    pub bias_b: Vec<Vec<f64>>,
    /// Sampled state-action indices: `(s,a)` for i.i.d., `X_k` for Markov.
    pub samples: Vec<usize>,
    /// Iteration at which divergence was detected, if any.
    pub diverged_at: Option<usize>,
}

impl Trajectory {
    fn new(kind: Kind, variant: Variant, rng: Option<RngSpec>, theta0: &Vect) -> Self {
        Trajectory {
            kind,
            variant,
            rng,
            thetas: vec![theta0.iter().copied().collect()],
            modes: Vec::new(),
            mode_words: Vec::new(),
            noise_w: Vec::new(),
            xi: Vec::new(),
            bias_b: Vec::new(),
            samples: Vec::new(),
            diverged_at: None,
        }
    }

    pub fn steps(&self) -> usize {
        self.thetas.len() - 1
    }
}

fn vec_of(v: &Vect) -> Vec<f64> {
    v.iter().copied().collect()
}

fn check_identity(what: &'static str, lhs: &Vect, rhs: &Vect, scale: f64) -> Result<()> {
    let defect = (lhs - rhs).norm();
    let bound = STEP_IDENTITY_TOL * scale;
    if defect > bound {
        return Err(Error::IdentityViolated {
            what,
            defect,
            bound,
        });
    }
    Ok(())
}

/// Records μ against θ* and checks `x⁺ = A_μ x + noise`.
fn record_mode(
    p: &Problem,
    traj: &mut Trajectory,
    theta: &Vect,
    next: &Vect,
    theta_star: &Vect,
    eta: f64,
    noise: &Vect,
) -> Result<()> {
    let pw = pairwise_mode(p, theta, theta_star, p.alpha(), eta);
    let x = theta - theta_star;
    let x_next = next - theta_star;
    let predicted = &pw.mode * &x + noise * p.alpha();
    let scale = 1.0 + x.norm() + x_next.norm() + p.alpha() * noise.norm() + theta_star.norm();
    check_identity("switched error recursion", &x_next, &predicted, scale)?;
    traj.mode_words
        .push(pw.mu.as_deterministic().map(|d| d.index(p.n_actions())));
    traj.modes.push(pw.mu);
    Ok(())
}

fn diverging(theta: &Vect, limit: f64) -> bool {
    theta.iter().any(|v| !v.is_finite()) || theta.norm() > limit
}

/// Iterates `T_α` (or `T_{α,η}`) for `steps` steps.
pub fn run_deterministic(
    p: &Problem,
    theta0: &Vect,
    steps: usize,
    theta_star: Option<&Vect>,
    variant: Variant,
) -> Result<Trajectory> {
    check_dims(p, theta0, theta_star)?;
    let eta = variant.eta(p);
    let mut traj = Trajectory::new(Kind::Deterministic, variant, None, theta0);
    let limit = DIVERGENCE_FACTOR * (1.0 + theta0.norm());
    let zero = Vect::zeros(p.dim());
    let mut theta = theta0.clone();
    for k in 0..steps {
        let next = learning_map(p, &theta, p.alpha(), eta);
        if diverging(&next, limit) {
            traj.diverged_at = Some(k + 1);
            traj.thetas.push(vec_of(&next));
            break;
        }
        if let Some(ts) = theta_star {
            record_mode(p, &mut traj, &theta, &next, ts, eta, &zero)?;
        }
        traj.thetas.push(vec_of(&next));
        theta = next;
    }
    Ok(traj)
}

/// Sampled TD direction `φ(s,a)(r + γV_θ(s') − φ(s,a)ᵀθ)` for one outcome.
pub fn sample_direction(p: &Problem, theta: &Vect, sa: usize, s_next: usize) -> Vect {
    let (v, _) = value_max(p, theta);
    let phi = p.phi(sa);
    let r = p.reward()[(sa, s_next)];
    let td = r + p.gamma() * v[s_next] - phi.dot(theta);
    phi * td
}

#[derive(Debug, Clone)]
pub struct IidStep {
    pub theta_next: Vect,
    pub sa: usize,
    pub s_next: usize,
    pub reward: f64,
    /// `ĝ(θ) − g(θ)`.
    pub w: Vect,
}

/// One i.i.d. update: `(s,a) ~ d`, `s' ~ P(·|s,a)`.
pub fn step_iid(p: &Problem, theta: &Vect, eta: f64, rng: &mut impl Rng) -> Result<IidStep> {
    let sa = sample_index(p.sampling().iter().copied(), rng);
    let s_next = sample_index(p.transition().row(sa).iter().copied(), rng);
    let g_hat = sample_direction(p, theta, sa, s_next);
    let w = &g_hat - residual_g(p, theta);
    let theta_next = theta + (&g_hat - theta * eta) * p.alpha();
    let mean_step = learning_map(p, theta, p.alpha(), eta);
    let scale = 1.0 + theta.norm() + p.alpha() * (g_hat.norm() + w.norm());
    check_identity("i.i.d. noise decomposition", &theta_next, &(mean_step + &w * p.alpha()), scale)?;
    Ok(IidStep {
        theta_next,
        sa,
        s_next,
        reward: p.reward()[(sa, s_next)],
        w,
    })
}

#[derive(Debug, Clone)]
pub struct MarkovStep {
    pub theta_next: Vect,
    pub x_next: usize,
    pub s_next: usize,
    /// `φ(X)(r + γV_θ(s') − R(X) − γ(PV_θ)(X))`.
    pub xi: Vect,
    /// `Φᵀ(e_X e_Xᵀ − D)δ(θ)`.
    pub bias: Vect,
}

/// One Markovian update from the current state-action `x`.
pub fn step_markov(
    p: &Problem,
    behavior: &BehaviorModel,
    x: usize,
    theta: &Vect,
    eta: f64,
    rng: &mut impl Rng,
) -> Result<MarkovStep> {
    let s_next = sample_index(p.transition().row(x).iter().copied(), rng);
    let a_next = sample_index(behavior.behavior.row(s_next).iter().copied(), rng);
    let x_next = p.sa_index(s_next, a_next);
    let xi = xi_for(p, theta, x, s_next);
    let bias = coordinate_bias(p, theta, x);
    let g_hat = sample_direction(p, theta, x, s_next);
    let theta_next = theta + (&g_hat - theta * eta) * p.alpha();
    let predicted = learning_map(p, theta, p.alpha(), eta) + (&bias + &xi) * p.alpha();
    let scale = 1.0 + theta.norm() + p.alpha() * (g_hat.norm() + bias.norm() + xi.norm());
    check_identity("Markov noise decomposition", &theta_next, &predicted, scale)?;
    Ok(MarkovStep {
        theta_next,
        x_next,
        s_next,
        xi,
        bias,
    })
}

/// `ξ` for the outcome `s'` drawn from state-action `x`.
pub fn xi_for(p: &Problem, theta: &Vect, x: usize, s_next: usize) -> Vect {
    let (v, _) = value_max(p, theta);
    let phi = p.phi(x);
    let pv: f64 = p.transition().row(x).iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    let sampled = p.reward()[(x, s_next)] + p.gamma() * v[s_next];
    let mean = p.mean_reward()[x] + p.gamma() * pv;
    phi * (sampled - mean)
}

/// `b = Φᵀ(e_X e_Xᵀ − D)δ(θ) = φ(X)δ_X(θ) − g(θ)`.
pub fn coordinate_bias(p: &Problem, theta: &Vect, x: usize) -> Vect {
    let delta = td_vector(p, theta);
    p.phi(x) * delta[x] - &p.cache().k * delta
}

/// `Φᵀ(e_X e_Xᵀ − D)(δ(θ*) + (γPΠ^μ − I)Φx)` with `μ = linearize_max(θ, θ*)`.
pub fn bias_decomposition(p: &Problem, theta: &Vect, theta_star: &Vect, x: usize) -> Vect {
    let mu = crate::switching::linearize_max(p, theta, theta_star);
    let err = theta - theta_star;
    let phi_x = p.features() * &err;
    let pol_phi = crate::switching::policy_features(p, &mu);
    let inner = td_vector(p, theta_star) + p.transition() * (pol_phi * &err) * p.gamma() - phi_x;
    let mut e = Vect::zeros(p.n_sa());
    e[x] = 1.0;
    let weighted = Mat::from_diagonal(&(e - p.sampling())) * inner;
    p.features().transpose() * weighted
}

/// `Σ_{(s,a),s'} d(s,a)P(s'|s,a) ĝ`, which equals `g(θ)`.
pub fn expected_sample_update(p: &Problem, theta: &Vect) -> Vect {
    let mut total = Vect::zeros(p.dim());
    for sa in 0..p.n_sa() {
        for s_next in 0..p.n_states() {
            let w = p.sampling()[sa] * p.transition()[(sa, s_next)];
            if w != 0.0 {
                total += sample_direction(p, theta, sa, s_next) * w;
            }
        }
    }
    total
}

/// `E[ξ | X = x, θ]` by finite summation over next states.
pub fn conditional_xi_mean(p: &Problem, theta: &Vect, x: usize) -> Vect {
    let mut total = Vect::zeros(p.dim());
    for s_next in 0..p.n_states() {
        let w = p.transition()[(x, s_next)];
        if w != 0.0 {
            total += xi_for(p, theta, x, s_next) * w;
        }
    }
    total
}

fn check_dims(p: &Problem, theta0: &Vect, theta_star: Option<&Vect>) -> Result<()> {
    if theta0.len() != p.dim() || theta_star.is_some_and(|t| t.len() != p.dim()) {
        return Err(Error::Dimension(format!("parameters must have length {}", p.dim())));
    }
    Ok(())
}

pub fn run_iid(
    p: &Problem,
    theta0: &Vect,
    steps: usize,
    theta_star: Option<&Vect>,
    variant: Variant,
    spec: RngSpec,
) -> Result<Trajectory> {
    check_dims(p, theta0, theta_star)?;
    let eta = variant.eta(p);
    let mut rng = spec.rng();
    let mut traj = Trajectory::new(Kind::Iid, variant, Some(spec), theta0);
    let limit = DIVERGENCE_FACTOR * (1.0 + theta0.norm());
    let mut theta = theta0.clone();
    for k in 0..steps {
        let st = step_iid(p, &theta, eta, &mut rng)?;
        if diverging(&st.theta_next, limit) {
            traj.diverged_at = Some(k + 1);
            traj.thetas.push(vec_of(&st.theta_next));
            break;
        }
        if let Some(ts) = theta_star {
            record_mode(p, &mut traj, &theta, &st.theta_next, ts, eta, &st.w)?;
        }
        traj.samples.push(st.sa);
        traj.noise_w.push(vec_of(&st.w));
        traj.thetas.push(vec_of(&st.theta_next));
        theta = st.theta_next;
    }
    Ok(traj)
}

/// Markov run from state-action `x0`, or from a draw of the stationary
/// distribution when `x0` is `None`.
#[allow(clippy::too_many_arguments)]
pub fn run_markov(
    p: &Problem,
    behavior: &BehaviorModel,
    x0: Option<usize>,
    theta0: &Vect,
    steps: usize,
    theta_star: Option<&Vect>,
    variant: Variant,
    spec: RngSpec,
) -> Result<Trajectory> {
    check_dims(p, theta0, theta_star)?;
    let eta = variant.eta(p);
    let mut rng = spec.rng();
    let mut x = match x0 {
        Some(x) if x >= p.n_sa() => {
            return Err(Error::Dimension(format!("initial state-action {x} out of range")))
        }
        Some(x) => x,
        None => sample_index(behavior.stationary.iter().copied(), &mut rng),
    };
    let mut traj = Trajectory::new(Kind::Markov, variant, Some(spec), theta0);
    let limit = DIVERGENCE_FACTOR * (1.0 + theta0.norm());
    let mut theta = theta0.clone();
    for k in 0..steps {
        let st = step_markov(p, behavior, x, &theta, eta, &mut rng)?;
        if diverging(&st.theta_next, limit) {
            traj.diverged_at = Some(k + 1);
            traj.thetas.push(vec_of(&st.theta_next));
            break;
        }
        if let Some(ts) = theta_star {
            let noise = &st.bias + &st.xi;
            record_mode(p, &mut traj, &theta, &st.theta_next, ts, eta, &noise)?;
        }
        traj.samples.push(x);
        traj.xi.push(vec_of(&st.xi));
        traj.bias_b.push(vec_of(&st.bias));
        traj.thetas.push(vec_of(&st.theta_next));
        theta = st.theta_next;
        x = st.x_next;
    }
    Ok(traj)
}

/// Fixed point used for error recording: solved to 1e-12 only when a
/// certificate with `β < 1` backs the map.
pub fn certified_fixed_point(
    p: &Problem,
    variant: Variant,
    cert: Option<&LyapunovCert>,
) -> Result<Option<Vect>> {
    let Some(cert) = cert.filter(|c| c.valid && c.beta_eps < 1.0) else {
        return Ok(None);
    };
    let opts = SolveOptions {
        tol: 1e-12,
        max_iter: 100_000,
        theta0: None,
    };
    let r = solve_fixed_point(p, variant.map_kind(), &opts, Some(cert))?;
    Ok(match r.status {
        SolveStatus::Converged => Some(Vect::from_vec(r.theta_star)),
        _ => None,
    })
}

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub kind: Kind,
    pub variant: Variant,
    pub n_runs: usize,
    pub steps: usize,
    pub seed: u64,
    pub theta0: Vect,
    /// Markov initial state-action; `None` draws it per run.
    pub x0: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    pub n_runs: usize,
    /// Per-step mean of `‖θ_k − θ*‖₂`; empty without θ*.
    pub mean_err: Vec<f64>,
    /// Per-step sample standard deviation of `‖θ_k − θ*‖₂`.
    pub sd_err: Vec<f64>,
    /// Per-step mean of `p(θ_k − θ*)`, when a certificate is given.
    pub mean_p: Vec<f64>,
    /// Per-step mean of `θ_k`.
    pub mean_theta: Vec<Vec<f64>>,
    /// Envelope matching the run kind, when θ* and the certificate are known.
    pub envelope: Option<Envelope>,
    pub diverged_runs: usize,
}

fn mean_and_sd(rows: &[Vec<f64>], k: usize) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
    if rows.len() < 2 {
        return (mean, 0.0);
    }
    let var = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Independent runs on streams `0..n_runs` of `seed`, executed in parallel.
///
/// Runs are collected in stream order and reduced sequentially, so the
/// summary does not depend on thread scheduling.
pub fn run_ensemble(
    p: &Problem,
    cfg: &EnsembleConfig,
    behavior: Option<&BehaviorModel>,
    cert: Option<&LyapunovCert>,
    theta_star: Option<&Vect>,
) -> Result<EnsembleSummary> {
    if cfg.n_runs == 0 {
        return Err(Error::Invalid("ensemble needs at least one run".into()));
    }
    if cfg.kind == Kind::Markov && behavior.is_none() {
        return Err(Error::Invalid("Markov runs need a behavior model".into()));
    }
    let runs: Vec<Result<Trajectory>> = (0..cfg.n_runs as u64)
        .into_par_iter()
        .map(|i| {
            let spec = RngSpec::new(cfg.seed, i);
            match cfg.kind {
                Kind::Deterministic => {
                    run_deterministic(p, &cfg.theta0, cfg.steps, None, cfg.variant)
                }
                Kind::Iid => run_iid(p, &cfg.theta0, cfg.steps, None, cfg.variant, spec),
                Kind::Markov => run_markov(
                    p,
                    behavior.expect("checked above"),
                    cfg.x0,
                    &cfg.theta0,
                    cfg.steps,
                    None,
                    cfg.variant,
                    spec,
                ),
            }
        })
        .collect();
    let runs: Vec<Trajectory> = runs.into_iter().collect::<Result<_>>()?;
    let diverged_runs = runs.iter().filter(|t| t.diverged_at.is_some()).count();
    let complete: Vec<&Trajectory> = runs.iter().filter(|t| t.diverged_at.is_none()).collect();
    let len = cfg.steps + 1;
    let m = p.dim();

    let mut mean_theta = vec![vec![0.0; m]; len];
    for t in &complete {
        for (acc, th) in mean_theta.iter_mut().zip(&t.thetas) {
            for (a, v) in acc.iter_mut().zip(th) {
                *a += v;
            }
        }
    }
    let nc = complete.len().max(1) as f64;
    mean_theta.iter_mut().flatten().for_each(|v| *v /= nc);

    let (mut mean_err, mut sd_err, mut mean_p) = (Vec::new(), Vec::new(), Vec::new());
    if let (Some(ts), false) = (theta_star, complete.is_empty()) {
        let errs: Vec<Vec<f64>> = complete
            .iter()
            .map(|t| {
                t.thetas
                    .iter()
                    .map(|th| (Vect::from_column_slice(th) - ts).norm())
                    .collect()
            })
            .collect();
        for k in 0..len {
            let (mu, sd) = mean_and_sd(&errs, k);
            mean_err.push(mu);
            sd_err.push(sd);
        }
        if let Some(c) = cert {
            for k in 0..len {
                let total: f64 = complete
                    .iter()
                    .map(|t| {
                        let x = Vect::from_column_slice(&t.thetas[k]) - ts;
                        lyap_value(c, x.as_slice()).1
                    })
                    .sum();
                mean_p.push(total / nc);
            }
        }
    }
    let envelope = match (cert, theta_star) {
        (Some(c), Some(ts)) if cfg.kind != Kind::Deterministic => {
            let inputs = BoundInputs::from_problem(p, c, ts);
            let x0 = &cfg.theta0 - ts;
            let x0_p = lyap_value(c, x0.as_slice()).1;
            Some(match cfg.kind {
                Kind::Markov => markov_envelope(&inputs, x0_p, x0.norm(), cfg.steps),
                _ => iid_envelope(&inputs, x0_p, x0.norm(), cfg.steps),
            })
        }
        _ => None,
    };
    Ok(EnsembleSummary {
        n_runs: cfg.n_runs,
        mean_err,
        sd_err,
        mean_p,
        mean_theta,
        envelope,
        diverged_runs,
    })
}

/// Checks the mode recorded along a deterministic run reproduces it:
/// `x_{k+1} = A_{μ_k} x_k` for every step, returning the largest defect.
pub fn replay_defect(p: &Problem, traj: &Trajectory, theta_star: &Vect) -> f64 {
    let eta = traj.variant.eta(p);
    let mut worst: f64 = 0.0;
    for (k, mu) in traj.modes.iter().enumerate() {
        let a = mode_matrix(p, mu, p.alpha(), eta);
        let x = Vect::from_column_slice(&traj.thetas[k]) - theta_star;
        let x1 = Vect::from_column_slice(&traj.thetas[k + 1]) - theta_star;
        let mut pred = a * &x;
        if let Some(w) = traj.noise_w.get(k) {
            pred += Vect::from_column_slice(w) * p.alpha();
        }
        if let (Some(b), Some(xi)) = (traj.bias_b.get(k), traj.xi.get(k)) {
            pred += (Vect::from_column_slice(b) + Vect::from_column_slice(xi)) * p.alpha();
        }
        let scale = 1.0 + x.norm() + x1.norm();
        worst = worst.max((x1 - pred).norm() / scale);
    }
    worst
}
