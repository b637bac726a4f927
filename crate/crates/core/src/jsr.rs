//! Bounded-depth joint spectral radius brackets.
//!
//! For a word `σ = (σ₁,…,σ_k)` the product is `A_σ = A_{σ_k}⋯A_{σ₁}`. At each
//! depth `k` the bracket records `max ‖A_σ‖₂^{1/k}` (an upper bound on the
//! JSR) and `max ρ(A_σ)^{1/k}` (a lower bound).

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::{min_sym_eigenvalue, spectral_norm, spectral_radius};
use crate::mdp::{enumerate_policies, Problem};
use crate::switching::{build_family_capped, drift_matrix, ModeFamily};
use crate::{Mat, Vect};

/// Default cap on the number of enumerated products.
pub const PRODUCT_CAP: u128 = 10_000_000;

/// Relative margin a deeper depth must beat to replace the overall witness.
const WITNESS_MARGIN: f64 = 1e-12;

fn one_based<S: Serializer>(word: &[usize], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(word.iter().map(|i| i + 1))
}

#[derive(Debug, Clone, Serialize)]
pub struct DepthRow {
    pub k: usize,
    pub upper: f64,
    pub lower: f64,
    #[serde(serialize_with = "one_based")]
    pub upper_word: Vec<usize>,
    #[serde(serialize_with = "one_based")]
    pub lower_word: Vec<usize>,
    /// Some words of this length were skipped; `upper` covers only the rest
    /// and the depth does not enter the overall upper bound.
    pub pruned: bool,
}

/// Words are 0-based in memory and 1-based when serialized.
#[derive(Debug, Clone, Serialize)]
pub struct JsrBracket {
    pub per_depth: Vec<DepthRow>,
    pub upper: f64,
    pub lower: f64,
    #[serde(serialize_with = "one_based")]
    pub witness_upper: Vec<usize>,
    #[serde(serialize_with = "one_based")]
    pub witness_lower: Vec<usize>,
}

/// Number of words of length 1..=depth over `n` letters.
pub fn word_count(n: usize, depth: usize) -> u128 {
    let mut total: u128 = 0;
    let mut level: u128 = 1;
    for _ in 0..depth {
        level = level.saturating_mul(n as u128);
        total = total.saturating_add(level);
    }
    total
}

#[derive(Debug, Clone)]
struct Best {
    upper: f64,
    lower: f64,
    upper_word: Vec<usize>,
    lower_word: Vec<usize>,
}

impl Best {
    fn empty() -> Self {
        Best {
            upper: f64::NEG_INFINITY,
            lower: f64::NEG_INFINITY,
            upper_word: Vec::new(),
            lower_word: Vec::new(),
        }
    }

    fn offer(&mut self, word: &[usize], norm_root: f64, rho_root: f64) {
        if norm_root > self.upper {
            self.upper = norm_root;
            self.upper_word = word.to_vec();
        }
        if rho_root > self.lower {
            self.lower = rho_root;
            self.lower_word = word.to_vec();
        }
    }

    /// Merge a branch visited later in lexicographic order.
    fn absorb(&mut self, other: &Best) {
        if other.upper > self.upper {
            self.upper = other.upper;
            self.upper_word = other.upper_word.clone();
        }
        if other.lower > self.lower {
            self.lower = other.lower;
            self.lower_word = other.lower_word.clone();
        }
    }
}

fn root(v: f64, k: usize) -> f64 {
    if k == 1 {
        v
    } else {
        v.powf(1.0 / k as f64)
    }
}

struct Search<'a> {
    modes: &'a [Mat],
    depth: usize,
    best: Vec<Best>,
    /// Pruning state; `None` disables pruning.
    prune: Option<PruneState>,
}

struct PruneState {
    max_norm: f64,
    lower: f64,
    pruned: Vec<bool>,
}

impl Search<'_> {
    fn visit(&mut self, word: &mut Vec<usize>, product: &Mat) {
        let k = word.len();
        let norm = spectral_norm(product);
        let rho = spectral_radius(product);
        let (nr, rr) = (root(norm, k), root(rho, k));
        self.best[k - 1].offer(word, nr, rr);
        if k == self.depth {
            if let Some(ps) = self.prune.as_mut() {
                ps.lower = ps.lower.max(rr);
            }
            return;
        }
        if let Some(ps) = self.prune.as_mut() {
            ps.lower = ps.lower.max(rr);
            let hopeless = (k + 1..=self.depth)
                .all(|j| root(ps.max_norm.powi((j - k) as i32) * norm, j) <= ps.lower);
            if hopeless {
                for j in k + 1..=self.depth {
                    ps.pruned[j - 1] = true;
                }
                return;
            }
        }
        for i in 0..self.modes.len() {
            let next = &self.modes[i] * product;
            word.push(i);
            self.visit(word, &next);
            word.pop();
        }
    }
}

fn assemble(best: Vec<Best>, pruned: Vec<bool>) -> JsrBracket {
    let per_depth: Vec<DepthRow> = best
        .into_iter()
        .zip(pruned)
        .enumerate()
        .map(|(i, (b, pruned))| DepthRow {
            k: i + 1,
            upper: b.upper,
            lower: b.lower,
            upper_word: b.upper_word,
            lower_word: b.lower_word,
            pruned,
        })
        .collect();
    let mut upper = f64::INFINITY;
    let mut witness_upper = Vec::new();
    let mut lower = f64::NEG_INFINITY;
    let mut witness_lower = Vec::new();
    for row in &per_depth {
        if !row.pruned && (witness_upper.is_empty() || row.upper < upper * (1.0 - WITNESS_MARGIN)) {
            upper = row.upper;
            witness_upper = row.upper_word.clone();
        }
        if witness_lower.is_empty() || row.lower > lower * (1.0 + WITNESS_MARGIN) + f64::MIN_POSITIVE {
            lower = row.lower;
            witness_lower = row.lower_word.clone();
        }
    }
    JsrBracket {
        per_depth,
        upper,
        lower,
        witness_upper,
        witness_lower,
    }
}

/// Exhaustive (or prune-sound) bracket over all words up to `max_depth`.
///
/// Without pruning the search fans out over the first letter in parallel;
/// the result does not depend on scheduling since branches are merged in
/// letter order and ties keep the lexicographically smallest word.
pub fn jsr_bracket(family: &ModeFamily, max_depth: usize, prune: bool) -> Result<JsrBracket> {
    jsr_bracket_capped(family, max_depth, prune, PRODUCT_CAP)
}

pub fn jsr_bracket_capped(
    family: &ModeFamily,
    max_depth: usize,
    prune: bool,
    cap: u128,
) -> Result<JsrBracket> {
    if max_depth == 0 {
        return Err(Error::Invalid("jsr depth must be at least 1".into()));
    }
    let n = family.len();
    let count = word_count(n, max_depth);
    if !prune && count > cap {
        return Err(Error::CapExceeded { count, cap });
    }
    if prune {
        let max_norm = family.modes.iter().map(spectral_norm).fold(0.0, f64::max);
        let mut search = Search {
            modes: &family.modes,
            depth: max_depth,
            best: vec![Best::empty(); max_depth],
            prune: Some(PruneState {
                max_norm,
                lower: f64::NEG_INFINITY,
                pruned: vec![false; max_depth],
            }),
        };
        for i in 0..n {
            search.visit(&mut vec![i], &family.modes[i]);
        }
        let pruned = search.prune.take().map(|p| p.pruned).unwrap_or_default();
        return Ok(assemble(search.best, pruned));
    }
    let branches: Vec<Vec<Best>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut search = Search {
                modes: &family.modes,
                depth: max_depth,
                best: vec![Best::empty(); max_depth],
                prune: None,
            };
            search.visit(&mut vec![i], &family.modes[i]);
            search.best
        })
        .collect();
    let mut best = vec![Best::empty(); max_depth];
    for branch in &branches {
        for (b, o) in best.iter_mut().zip(branch) {
            b.absorb(o);
        }
    }
    Ok(assemble(best, vec![false; max_depth]))
}

/// `A_{σ_k}⋯A_{σ₁}` for a 0-based word.
pub fn word_product(family: &ModeFamily, word: &[usize]) -> Mat {
    let n = family.dim();
    word.iter()
        .fold(Mat::identity(n, n), |acc, &i| &family.modes[i] * acc)
}

#[derive(Debug, Clone, Serialize)]
pub struct DivergenceWitness {
    #[serde(serialize_with = "one_based")]
    pub word: Vec<usize>,
    /// `ρ(A_σ)^{1/|σ|}`.
    pub rate: f64,
    /// `ρ(A_σ)`.
    pub spectral_radius: f64,
    /// Unit vector in the dominant invariant subspace of `A_σ`.
    pub initial: Vec<f64>,
    /// `‖A_σ^j x₀‖₂` for `j = 0..=periods`.
    pub period_norms: Vec<f64>,
}

/// Periodic switching sequence whose trajectory grows, when the bracket's
/// lower bound exceeds one.
pub fn divergence_witness(family: &ModeFamily, bracket: &JsrBracket) -> Option<DivergenceWitness> {
    if !(bracket.lower > 1.0) {
        return None;
    }
    let word = bracket.witness_lower.clone();
    let a = word_product(family, &word);
    let rho = spectral_radius(&a);
    let n = a.nrows();
    // Power iteration from a fixed generic start lands in the dominant
    // invariant subspace (a plane for a complex pair).
    let mut x = Vect::from_fn(n, |i, _| 1.0 + 0.1 * i as f64);
    for _ in 0..200 {
        let y = &a * &x;
        let nrm = y.norm();
        if nrm == 0.0 || !nrm.is_finite() {
            break;
        }
        x = y / nrm;
    }
    x /= x.norm();
    let periods = 20;
    let mut norms = Vec::with_capacity(periods + 1);
    let mut y = x.clone();
    for _ in 0..=periods {
        norms.push(y.norm());
        y = &a * y;
    }
    Some(DivergenceWitness {
        word,
        rate: root(rho, bracket.witness_lower.len()),
        spectral_radius: rho,
        initial: x.iter().copied().collect(),
        period_norms: norms,
    })
}

/// Per-word check of the regularized rescaling identity.
#[derive(Debug, Clone, Serialize)]
pub struct RescalingReport {
    pub alpha: f64,
    pub eta: f64,
    /// `αη = 1`: the regularized modes are `−α` times the drift matrices.
    pub critical: bool,
    /// `1 − αη`.
    pub factor: f64,
    /// `α/(1 − αη)`; NaN in the critical case.
    pub effective_alpha: f64,
    pub words_checked: usize,
    /// Largest `‖A^η_σ − c^{|σ|}B_σ‖_max / max(1, ‖A^η_σ‖_max)`.
    pub max_defect: f64,
    /// Per-depth `upper_k` of the regularized family.
    pub upper_regularized: Vec<f64>,
    /// Per-depth `|1 − αη|·upper_k` of the rescaled family (or `α·upper_k`
    /// of the drift family in the critical case).
    pub upper_rescaled: Vec<f64>,
}

fn all_words(n: usize, depth: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..depth {
        let mut next = Vec::with_capacity(frontier.len() * n);
        for w in &frontier {
            for i in 0..n {
                let mut v = w.clone();
                v.push(i);
                next.push(v);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

pub fn reg_rescaling_check(
    p: &Problem,
    alpha: f64,
    eta: f64,
    depth: usize,
) -> Result<RescalingReport> {
    let reg = build_family_capped(p, alpha, eta, crate::mdp::DEFAULT_POLICY_CAP)?;
    let count = word_count(reg.len(), depth);
    if count > PRODUCT_CAP {
        return Err(Error::CapExceeded {
            count,
            cap: PRODUCT_CAP,
        });
    }
    let factor = 1.0 - alpha * eta;
    let critical = (alpha * eta - 1.0).abs() <= 1e-15;
    let (other, scale, effective_alpha) = if critical {
        let drift = ModeFamily {
            modes: reg
                .policies
                .iter()
                .map(|pol| drift_matrix(p, pol))
                .collect(),
            ..reg.clone()
        };
        (drift, -alpha, f64::NAN)
    } else {
        let ea = alpha / factor;
        (build_family_capped(p, ea, 0.0, crate::mdp::DEFAULT_POLICY_CAP)?, factor, ea)
    };
    let mut max_defect: f64 = 0.0;
    let words = all_words(reg.len(), depth);
    for w in &words {
        let a = word_product(&reg, w);
        let b = word_product(&other, w) * scale.powi(w.len() as i32);
        let defect = (&a - &b).amax() / a.amax().max(1.0);
        max_defect = max_defect.max(defect);
    }
    let br = jsr_bracket(&reg, depth.max(1), false)?;
    let bo = jsr_bracket(&other, depth.max(1), false)?;
    Ok(RescalingReport {
        alpha,
        eta,
        critical,
        factor,
        effective_alpha,
        words_checked: words.len(),
        max_defect,
        upper_regularized: br.per_depth.iter().map(|r| r.upper).collect(),
        upper_rescaled: bo.per_depth.iter().map(|r| scale.abs() * r.upper).collect(),
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DriftConstants {
    pub c_phi: f64,
    pub l_phi: f64,
    pub l_phi_eta: f64,
    pub eta: f64,
}

/// `c_Φ = min_π λ_min(sym(drift_π))`, `L_Φ = max_π ‖drift_π‖₂` and
/// `L_{Φ,η} = max_π ‖drift_π + ηI‖₂`.
pub fn drift_constants(p: &Problem, eta: f64) -> Result<DriftConstants> {
    let policies = enumerate_policies(p)?;
    let m = p.dim();
    let mut c_phi = f64::INFINITY;
    let mut l_phi: f64 = 0.0;
    let mut l_phi_eta: f64 = 0.0;
    for pol in &policies {
        let d = drift_matrix(p, pol);
        let sym = (&d + d.transpose()) * 0.5;
        c_phi = c_phi.min(min_sym_eigenvalue(&sym));
        l_phi = l_phi.max(spectral_norm(&d));
        l_phi_eta = l_phi_eta.max(spectral_norm(&(d + Mat::identity(m, m) * eta)));
    }
    Ok(DriftConstants {
        c_phi,
        l_phi,
        l_phi_eta,
        eta,
    })
}

/// A square-root bound whose radicand may have been clipped at zero.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RootBound {
    pub value: f64,
    pub radicand: f64,
    pub clipped: bool,
}

impl RootBound {
    fn new(radicand: f64) -> Self {
        RootBound {
            value: radicand.max(0.0).sqrt(),
            radicand,
            clipped: radicand < 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RegBounds {
    pub alpha: f64,
    pub eta: f64,
    pub constants: DriftConstants,
    /// `√((1−αη)² − 2α(1−αη)c_Φ + α²L_Φ²)`; `None` unless `0 ≤ αη ≤ 1`.
    pub restricted: Option<RootBound>,
    /// `√(1 − 2α(c_Φ+η) + α²L_{Φ,η}²)`.
    pub all_eta_sharp: RootBound,
    /// `√(1 − 2α(c_Φ+η) + α²(L_Φ+η)²)`.
    pub all_eta_conservative: RootBound,
    /// `0 ≤ αη ≤ 1`, `c_Φ+η > 0`, `α < 2(c_Φ+η)/(L_Φ² + 2c_Φη + η²)`.
    pub restricted_step_condition: bool,
    /// `c_Φ+η > 0`, `α < 2(c_Φ+η)/L_{Φ,η}²`.
    pub all_eta_step_condition: bool,
    /// As above with `(L_Φ+η)²`.
    pub conservative_step_condition: bool,
}

pub fn reg_euclidean_bounds(p: &Problem, alpha: f64, eta: f64) -> Result<RegBounds> {
    let k = drift_constants(p, eta)?;
    let (c, l, le) = (k.c_phi, k.l_phi, k.l_phi_eta);
    let ae = alpha * eta;
    let applicable = (0.0..=1.0).contains(&ae);
    let restricted = applicable.then(|| {
        RootBound::new((1.0 - ae).powi(2) - 2.0 * alpha * (1.0 - ae) * c + alpha * alpha * l * l)
    });
    let all_eta_sharp = RootBound::new(1.0 - 2.0 * alpha * (c + eta) + alpha * alpha * le * le);
    let all_eta_conservative =
        RootBound::new(1.0 - 2.0 * alpha * (c + eta) + alpha * alpha * (l + eta).powi(2));
    let accretive = c + eta > 0.0;
    let positive = alpha > 0.0;
    Ok(RegBounds {
        alpha,
        eta,
        constants: k,
        restricted,
        all_eta_sharp,
        all_eta_conservative,
        restricted_step_condition: applicable
            && accretive
            && positive
            && alpha < 2.0 * (c + eta) / (l * l + 2.0 * c * eta + eta * eta),
        all_eta_step_condition: accretive && positive && alpha < 2.0 * (c + eta) / (le * le),
        conservative_step_condition: accretive
            && positive
            && alpha < 2.0 * (c + eta) / (l + eta).powi(2),
    })
}
