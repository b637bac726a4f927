//! Finite discounted MDP with linear features and a state-action sampling
//! distribution.
//!
//! State-action pairs are flattened in action-block order: the state index
//! varies fastest inside each action block, so `(s, a)` lives at
//! `a * |S| + s`. Every vector and matrix indexed by state-action pairs in
//! this crate uses that rule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bellman::ProjectionCache;
use crate::error::{Error, Result};
use crate::linalg;
use crate::{Mat, Vect};

/// Default cap on `|A|^|S|` for policy enumeration.
pub const DEFAULT_POLICY_CAP: u128 = 1_000_000;

/// Default tolerance on probability-vector sums.
pub const DEFAULT_STOCHASTIC_TOL: f64 = 1e-12;

/// Relative tolerance for the full-column-rank check on Φ.
pub const RANK_TOL: f64 = 1e-10;

/// Reward given either as a full `[s][a][s']` tensor or a constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RewardSpec {
    Constant(f64),
    Tensor(Vec<Vec<Vec<f64>>>),
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec::Constant(0.0)
    }
}

/// On-disk problem document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a][s'] = P(s'|s,a)`.
    pub transition: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub reward: RewardSpec,
    pub gamma: f64,
    pub alpha: f64,
    #[serde(default)]
    pub eta: f64,
    /// One row per state-action pair in action-block order.
    pub features: Vec<Vec<f64>>,
    /// Sampling distribution in action-block order.
    pub sampling: Vec<f64>,
    /// Optional behavior policy `behavior[s][a] = b(a|s)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<Vec<Vec<f64>>>,
    /// Tolerance for probability sums. Only published data rounded to a few
    /// decimals needs anything looser than the default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stochastic_tol: Option<f64>,
}

/// A validated problem instance. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Problem {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    alpha: f64,
    eta: f64,
    /// `(|S||A|) × |S|`, row `(s,a)` is `P(·|s,a)`.
    transition: Mat,
    /// `(|S||A|) × |S|`, entry `((s,a), s') = r(s,a,s')`.
    reward: Mat,
    /// `R(s,a) = Σ_{s'} P(s'|s,a) r(s,a,s')`.
    mean_reward: Vect,
    features: Mat,
    sampling: Vect,
    behavior: Option<Mat>,
    stochastic_tol: f64,
    cache: ProjectionCache,
    source: ProblemFile,
}

impl Problem {
    pub fn from_file_data(file: ProblemFile) -> Result<Self> {
        let ns = file.n_states;
        let na = file.n_actions;
        if ns == 0 || na == 0 {
            return Err(Error::Invalid("n_states and n_actions must be positive".into()));
        }
        let tol = file.stochastic_tol.unwrap_or(DEFAULT_STOCHASTIC_TOL);
        if !(tol > 0.0 && tol < 0.01) {
            return Err(Error::Invalid(format!("stochastic_tol {tol} outside (0, 0.01)")));
        }
        if !(0.0..1.0).contains(&file.gamma) {
            return Err(Error::Invalid(format!("gamma {} outside [0,1)", file.gamma)));
        }
        if !(file.alpha > 0.0 && file.alpha < 1.0) {
            return Err(Error::Invalid(format!("alpha {} outside (0,1)", file.alpha)));
        }
        if !(file.eta >= 0.0) || !file.eta.is_finite() {
            return Err(Error::Invalid(format!("eta {} must be a finite value >= 0", file.eta)));
        }
        let nsa = ns * na;

        if file.transition.len() != ns {
            return Err(Error::Dimension(format!(
                "transition has {} state blocks, expected {ns}",
                file.transition.len()
            )));
        }
        let mut transition = Mat::zeros(nsa, ns);
        for (s, per_state) in file.transition.iter().enumerate() {
            if per_state.len() != na {
                return Err(Error::Dimension(format!(
                    "transition[{}] has {} actions, expected {na}",
                    s + 1,
                    per_state.len()
                )));
            }
            for (a, row) in per_state.iter().enumerate() {
                if row.len() != ns {
                    return Err(Error::Dimension(format!(
                        "transition[{}][{}] has length {}, expected {ns}",
                        s + 1,
                        a + 1,
                        row.len()
                    )));
                }
                let mut sum = 0.0;
                for (t, &v) in row.iter().enumerate() {
                    if !(v >= 0.0) || !v.is_finite() {
                        return Err(Error::Invalid(format!(
                            "transition probability P({}|{},{}) = {v} is negative or non-finite",
                            t + 1,
                            s + 1,
                            a + 1
                        )));
                    }
                    transition[(a * ns + s, t)] = v;
                    sum += v;
                }
                if (sum - 1.0).abs() > tol {
                    return Err(Error::Invalid(format!(
                        "transition row (s={}, a={}) sums to {sum}, not 1 within {tol:e}",
                        s + 1,
                        a + 1
                    )));
                }
            }
        }

        let mut reward = Mat::zeros(nsa, ns);
        match &file.reward {
            RewardSpec::Constant(c) => {
                if !c.is_finite() {
                    return Err(Error::Invalid("reward constant is non-finite".into()));
                }
                reward.fill(*c);
            }
            RewardSpec::Tensor(t) => {
                if t.len() != ns || t.iter().any(|b| b.len() != na || b.iter().any(|r| r.len() != ns)) {
                    return Err(Error::Dimension(format!(
                        "reward tensor must have shape [{ns}][{na}][{ns}]"
                    )));
                }
                for s in 0..ns {
                    for a in 0..na {
                        for sp in 0..ns {
                            let v = t[s][a][sp];
                            if !v.is_finite() {
                                return Err(Error::Invalid(format!(
                                    "reward r({},{},{}) is non-finite",
                                    s + 1,
                                    a + 1,
                                    sp + 1
                                )));
                            }
                            reward[(a * ns + s, sp)] = v;
                        }
                    }
                }
            }
        }

        if file.features.len() != nsa {
            return Err(Error::Dimension(format!(
                "features has {} rows, expected |S||A| = {nsa}",
                file.features.len()
            )));
        }
        let m = file.features.first().map(|r| r.len()).unwrap_or(0);
        if m == 0 || file.features.iter().any(|r| r.len() != m) {
            return Err(Error::Dimension("feature rows must share a positive length".into()));
        }
        if m > nsa {
            return Err(Error::RankDeficient {
                smallest: 0.0,
                largest: f64::NAN,
            });
        }
        let features = Mat::from_fn(nsa, m, |i, j| file.features[i][j]);
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("feature matrix has non-finite entries".into()));
        }
        let (smin, smax) = linalg::singular_extremes(&features);
        if !(smin > RANK_TOL * smax) {
            return Err(Error::RankDeficient {
                smallest: smin,
                largest: smax,
            });
        }

        if file.sampling.len() != nsa {
            return Err(Error::Dimension(format!(
                "sampling has length {}, expected {nsa}",
                file.sampling.len()
            )));
        }
        let sampling = Vect::from_column_slice(&file.sampling);
        validate_distribution(&sampling, tol)?;

        let behavior = match &file.behavior {
            None => None,
            Some(rows) => {
                if rows.len() != ns || rows.iter().any(|r| r.len() != na) {
                    return Err(Error::Dimension(format!("behavior must have shape [{ns}][{na}]")));
                }
                let b = Mat::from_fn(ns, na, |s, a| rows[s][a]);
                validate_rows_in_simplex(&b, tol, "behavior")?;
                Some(b)
            }
        };

        let cache = ProjectionCache::build(&features, &sampling, &transition, file.eta)?;
        let mean_reward = transition.component_mul(&reward).column_sum();
        Ok(Problem {
            mean_reward,
            n_states: ns,
            n_actions: na,
            gamma: file.gamma,
            alpha: file.alpha,
            eta: file.eta,
            transition,
            reward,
            features,
            sampling,
            behavior,
            stochastic_tol: tol,
            cache,
            source: file,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn n_sa(&self) -> usize {
        self.n_states * self.n_actions
    }
    /// Feature dimension m.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn eta(&self) -> f64 {
        self.eta
    }
    pub fn transition(&self) -> &Mat {
        &self.transition
    }
    pub fn reward(&self) -> &Mat {
        &self.reward
    }
    pub fn mean_reward(&self) -> &Vect {
        &self.mean_reward
    }
    pub fn features(&self) -> &Mat {
        &self.features
    }
    pub fn sampling(&self) -> &Vect {
        &self.sampling
    }
    pub fn behavior(&self) -> Option<&Mat> {
        self.behavior.as_ref()
    }
    pub fn cache(&self) -> &ProjectionCache {
        &self.cache
    }
    pub fn stochastic_tol(&self) -> f64 {
        self.stochastic_tol
    }
    /// The document this problem was built from.
    pub fn source(&self) -> &ProblemFile {
        &self.source
    }

    #[inline]
    pub fn sa_index(&self, s: usize, a: usize) -> usize {
        a * self.n_states + s
    }

    /// Inverse of [`Problem::sa_index`].
    #[inline]
    pub fn sa_pair(&self, idx: usize) -> (usize, usize) {
        (idx % self.n_states, idx / self.n_states)
    }

    /// Feature row φ(s,a) as a slice-like iterator target.
    pub fn phi(&self, sa: usize) -> Vect {
        self.features.row(sa).transpose()
    }

    /// Rebuilds the problem with a different step size.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        let mut f = self.source.clone();
        f.alpha = alpha;
        Problem::from_file_data(f)
    }

    /// Rebuilds the problem with a different regularization weight.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        let mut f = self.source.clone();
        f.eta = eta;
        Problem::from_file_data(f)
    }

    /// Rebuilds the problem with a different sampling distribution.
    pub fn with_sampling(&self, sampling: &Vect) -> Result<Self> {
        let mut f = self.source.clone();
        f.sampling = sampling.iter().copied().collect();
        Problem::from_file_data(f)
    }

    /// Rescales every transition row and the sampling vector to sum to one
    /// exactly and tightens the tolerance to the default. A no-op (up to
    /// rounding) for problems that already satisfy the strict tolerance.
    pub fn normalized(&self) -> Result<Self> {
        let mut f = self.source.clone();
        for per_state in f.transition.iter_mut() {
            for row in per_state.iter_mut() {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        let s: f64 = f.sampling.iter().sum();
        f.sampling.iter_mut().for_each(|v| *v /= s);
        if let Some(b) = f.behavior.as_mut() {
            for row in b.iter_mut() {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        f.stochastic_tol = None;
        Problem::from_file_data(f)
    }
}

fn validate_distribution(d: &Vect, tol: f64) -> Result<()> {
    for (i, &v) in d.iter().enumerate() {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Invalid(format!(
                "sampling distribution not strictly positive (index {}: {v})",
                i + 1
            )));
        }
    }
    let sum: f64 = d.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::Invalid(format!(
            "sampling distribution sums to {sum}, not 1 within {tol:e}"
        )));
    }
    Ok(())
}

fn validate_rows_in_simplex(m: &Mat, tol: f64, what: &str) -> Result<()> {
    for (s, row) in m.row_iter().enumerate() {
        let mut sum = 0.0;
        for (a, &v) in row.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!(
                    "{what} probability ({}, {}) = {v} is negative or non-finite",
                    s + 1,
                    a + 1
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > tol {
            return Err(Error::Invalid(format!(
                "{what} row {} sums to {sum}, not 1 within {tol:e}",
                s + 1
            )));
        }
    }
    Ok(())
}

/// Parses and validates a problem document.
pub fn parse_problem(text: &str) -> Result<Problem> {
    let file: ProblemFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    Problem::from_file_data(file)
}

/// Reads, parses and validates a problem file.
pub fn load_problem(path: impl AsRef<Path>) -> Result<Problem> {
    let text = std::fs::read_to_string(path)?;
    parse_problem(&text)
}

/// Expected reward vector `R(s,a) = Σ_{s'} P(s'|s,a) r(s,a,s')` and
/// `R_max = max |r(s,a,s')|`.
pub fn expected_reward(p: &Problem) -> (Vect, f64) {
    let r = p.mean_reward.clone();
    let r_max = p.reward.iter().map(|v| v.abs()).fold(0.0, f64::max);
    (r, r_max)
}

/// `φ_max` (largest Euclidean feature-row norm) and `‖Φ‖₂`.
pub fn feature_radius(p: &Problem) -> (f64, f64) {
    let phi_max = p
        .features
        .row_iter()
        .map(|r| r.norm())
        .fold(0.0, f64::max);
    (phi_max, linalg::spectral_norm(&p.features))
}

/// A deterministic stationary policy; `actions[s]` is a 0-based action.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeterministicPolicy {
    pub actions: Vec<usize>,
}

impl DeterministicPolicy {
    /// Position in the lexicographic enumeration (state 1 most significant).
    pub fn index(&self, n_actions: usize) -> usize {
        self.actions.iter().fold(0, |acc, &a| acc * n_actions + a)
    }

    pub fn from_index(mut index: usize, n_states: usize, n_actions: usize) -> Self {
        let mut actions = vec![0; n_states];
        for s in (0..n_states).rev() {
            actions[s] = index % n_actions;
            index /= n_actions;
        }
        DeterministicPolicy { actions }
    }
}

/// A stochastic policy stored as an `|S| × |A|` row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    pub probs: Mat,
}

impl StochasticPolicy {
    pub fn new(probs: Mat) -> Result<Self> {
        validate_rows_in_simplex(&probs, DEFAULT_STOCHASTIC_TOL, "stochastic policy")?;
        Ok(StochasticPolicy { probs })
    }

    /// For rows already in the simplex by construction.
    pub(crate) fn from_rows_unchecked(probs: Mat) -> Self {
        StochasticPolicy { probs }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        StochasticPolicy {
            probs: Mat::from_element(n_states, n_actions, 1.0 / n_actions as f64),
        }
    }

    /// The one-hot stochastic policy equal to `pol`.
    pub fn from_deterministic(pol: &DeterministicPolicy, n_actions: usize) -> Self {
        let ns = pol.actions.len();
        StochasticPolicy {
            probs: Mat::from_fn(ns, n_actions, |s, a| if pol.actions[s] == a { 1.0 } else { 0.0 }),
        }
    }

    /// `Some(π)` when every row is one-hot.
    pub fn as_deterministic(&self) -> Option<DeterministicPolicy> {
        let mut actions = Vec::with_capacity(self.probs.nrows());
        for row in self.probs.row_iter() {
            let hot: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(a, _)| a)
                .collect();
            if hot.len() != 1 || row[hot[0]] != 1.0 {
                return None;
            }
            actions.push(hot[0]);
        }
        Some(DeterministicPolicy { actions })
    }
}

/// Anything that assigns action probabilities per state.
pub trait Policy {
    fn prob(&self, s: usize, a: usize) -> f64;
}

impl Policy for DeterministicPolicy {
    fn prob(&self, s: usize, a: usize) -> f64 {
        if self.actions[s] == a {
            1.0
        } else {
            0.0
        }
    }
}

impl Policy for StochasticPolicy {
    fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }
}

/// Number of deterministic policies, `|A|^|S|`, or an error past `cap`.
pub fn policy_count(n_states: usize, n_actions: usize, cap: u128) -> Result<usize> {
    let mut count: u128 = 1;
    for _ in 0..n_states {
        count = count.saturating_mul(n_actions as u128);
        if count > cap {
            return Err(Error::CapExceeded { count, cap });
        }
    }
    Ok(count as usize)
}

/// All deterministic policies in lexicographic order, state 1 most significant.
pub fn enumerate_policies(p: &Problem) -> Result<Vec<DeterministicPolicy>> {
    enumerate_policies_capped(p.n_states, p.n_actions, DEFAULT_POLICY_CAP)
}

pub fn enumerate_policies_capped(
    n_states: usize,
    n_actions: usize,
    cap: u128,
) -> Result<Vec<DeterministicPolicy>> {
    let count = policy_count(n_states, n_actions, cap)?;
    Ok((0..count)
        .map(|i| DeterministicPolicy::from_index(i, n_states, n_actions))
        .collect())
}

/// Selector matrix `Π` of shape `|S| × |S||A|` with row `s` equal to
/// `μ(s)ᵀ ⊗ e_sᵀ`.
pub fn policy_selector_matrix(n_states: usize, n_actions: usize, pol: &impl Policy) -> Mat {
    let mut pi = Mat::zeros(n_states, n_states * n_actions);
    for s in 0..n_states {
        for a in 0..n_actions {
            pi[(s, a * n_states + s)] = pol.prob(s, a);
        }
    }
    pi
}

/// Behavior-induced state-action chain and its stationary distribution.
#[derive(Debug, Clone)]
pub struct BehaviorModel {
    /// `|S| × |A|`, `b(a|s)`.
    pub behavior: Mat,
    /// `(|S||A|) × (|S||A|)`, `P^b((s',a')|(s,a)) = P(s'|s,a) b(a'|s')`.
    pub kernel: Mat,
    pub stationary: Vect,
}

/// Builds `P^b` and solves `dᵀ P^b = dᵀ`, `Σ d = 1`.
pub fn stationary_distribution(p: &Problem, behavior: &Mat) -> Result<BehaviorModel> {
    let (ns, na) = (p.n_states, p.n_actions);
    if behavior.shape() != (ns, na) {
        return Err(Error::Dimension(format!("behavior must be {ns}×{na}")));
    }
    validate_rows_in_simplex(behavior, p.stochastic_tol.max(DEFAULT_STOCHASTIC_TOL), "behavior")?;
    let nsa = ns * na;
    let mut kernel = Mat::zeros(nsa, nsa);
    for i in 0..nsa {
        for sp in 0..ns {
            let pt = p.transition[(i, sp)];
            for ap in 0..na {
                kernel[(i, ap * ns + sp)] = pt * behavior[(sp, ap)];
            }
        }
    }

    // Uniqueness: the unit eigenvalue must be simple. Periodic chains keep a
    // unique stationary law, so only eigenvalues near 1 itself are rejected.
    if nsa > 1 {
        let mut eig = linalg::eigenvalues(&kernel);
        eig.sort_by(|a, b| {
            let da = (a.0 - 1.0).hypot(a.1);
            let db = (b.0 - 1.0).hypot(b.1);
            da.total_cmp(&db)
        });
        let second = eig[1];
        if (second.0 - 1.0).hypot(second.1) <= 1e-8 {
            return Err(Error::NonUniqueStationary {
                modulus: second.0.hypot(second.1),
            });
        }
    }

    // (P^bᵀ − I) d = 0 with the last equation replaced by Σ d = 1.
    let mut a = kernel.transpose() - Mat::identity(nsa, nsa);
    let mut rhs = Vect::zeros(nsa);
    for j in 0..nsa {
        a[(nsa - 1, j)] = 1.0;
    }
    rhs[nsa - 1] = 1.0;
    let d = a
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("stationary system"))?;
    for (i, &v) in d.iter().enumerate() {
        if !(v > 1e-14) {
            return Err(Error::ZeroMass { index: i + 1 });
        }
    }
    let residual = (kernel.transpose() * &d - &d).amax();
    if residual > 1e-10 {
        return Err(Error::IdentityViolated {
            what: "stationary fixed-point residual",
            defect: residual,
            bound: 1e-10,
        });
    }
    Ok(BehaviorModel {
        behavior: behavior.clone(),
        kernel,
        stationary: d,
    })
}
