//! Random problem generation and hand-written reference formulas shared by
//! the property and acceptance tests. The reference formulas work directly
//! on the raw problem document, not on the library's cached matrices.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qlswitch::mdp::{ProblemFile, RewardSpec};
use qlswitch::Problem;

pub type Mat = DMatrix<f64>;
pub type Vect = DVector<f64>;

#[derive(Debug, Clone, Copy)]
pub struct GenOpts {
    pub max_states: usize,
    pub max_actions: usize,
    pub max_dim: usize,
    pub max_gamma: f64,
    pub max_alpha: f64,
    /// Allow η > 0 (including the critical αη = 1).
    pub regularize: bool,
}

impl Default for GenOpts {
    fn default() -> Self {
        GenOpts {
            max_states: 3,
            max_actions: 3,
            max_dim: 4,
            max_gamma: 0.95,
            max_alpha: 0.99,
            regularize: true,
        }
    }
}

fn simplex(rng: &mut impl Rng, n: usize, floor: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| floor + rng.random::<f64>()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// A random problem document. Features are sometimes drawn from a small
/// integer grid so that argmax ties occur.
pub fn random_file(rng: &mut impl Rng, o: GenOpts) -> ProblemFile {
    let ns = rng.random_range(1..=o.max_states);
    let na = rng.random_range(1..=o.max_actions);
    let nsa = ns * na;
    let m = rng.random_range(1..=o.max_dim.min(nsa));
    let sparse = rng.random_bool(0.3);
    let transition = (0..ns)
        .map(|_| {
            (0..na)
                .map(|_| {
                    let mut row = simplex(rng, ns, 0.0);
                    if sparse {
                        // one-hot rows exercise zero-probability branches
                        let j = rng.random_range(0..ns);
                        row = (0..ns).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
                    }
                    row
                })
                .collect()
        })
        .collect();
    let reward = if rng.random_bool(0.2) {
        RewardSpec::Constant(rng.random_range(-1.0..1.0))
    } else {
        RewardSpec::Tensor(
            (0..ns)
                .map(|_| (0..na).map(|_| (0..ns).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
                .collect(),
        )
    };
    let grid = rng.random_bool(0.3);
    let features = (0..nsa)
        .map(|_| {
            (0..m)
                .map(|_| {
                    if grid {
                        rng.random_range(-1i32..=1) as f64
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect()
        })
        .collect();
    let alpha = rng.random_range(0.01..o.max_alpha);
    let eta = if !o.regularize || rng.random_bool(0.4) {
        0.0
    } else if rng.random_bool(0.1) {
        1.0 / alpha
    } else {
        rng.random_range(0.0..2.0)
    };
    ProblemFile {
        n_states: ns,
        n_actions: na,
        transition,
        reward,
        gamma: rng.random_range(0.0..o.max_gamma),
        alpha,
        eta,
        features,
        sampling: simplex(rng, nsa, 0.05),
        behavior: None,
        stochastic_tol: None,
    }
}

/// Valid random problem; rank-deficient draws are redrawn.
pub fn random_problem_with(rng: &mut impl Rng, o: GenOpts) -> Problem {
    loop {
        if let Ok(p) = Problem::from_file_data(random_file(rng, o)) {
            return p;
        }
    }
}

pub fn problem_from_seed(seed: u64) -> Problem {
    random_problem_with(&mut ChaCha8Rng::seed_from_u64(seed), GenOpts::default())
}

pub fn random_vec(rng: &mut impl Rng, m: usize, scale: f64) -> Vect {
    Vect::from_fn(m, |_, _| scale * rng.random_range(-1.0..1.0))
}

/// Random stochastic policy, with some one-hot rows and some exact ties.
pub fn random_policy(rng: &mut impl Rng, ns: usize, na: usize) -> Mat {
    let mut probs = Mat::zeros(ns, na);
    for s in 0..ns {
        let row = if rng.random_bool(0.3) {
            let a = rng.random_range(0..na);
            (0..na).map(|i| if i == a { 1.0 } else { 0.0 }).collect()
        } else {
            simplex(rng, na, 0.0)
        };
        for (a, v) in row.into_iter().enumerate() {
            probs[(s, a)] = v;
        }
    }
    probs
}

// Reference formulas on the raw document. Index `sa = a*|S| + s`.

fn reward(f: &ProblemFile, s: usize, a: usize, sp: usize) -> f64 {
    match &f.reward {
        RewardSpec::Constant(c) => *c,
        RewardSpec::Tensor(t) => t[s][a][sp],
    }
}

fn phi_row(f: &ProblemFile, s: usize, a: usize) -> Vect {
    Vect::from_vec(f.features[a * f.n_states + s].clone())
}

pub fn value(f: &ProblemFile, theta: &Vect) -> Vec<f64> {
    (0..f.n_states)
        .map(|s| {
            (0..f.n_actions)
                .map(|a| phi_row(f, s, a).dot(theta))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// `g(θ) = Σ d(s,a) φ(s,a) (Σ_{s'} P (r + γV(s')) − φᵀθ)`.
pub fn reference_g(f: &ProblemFile, theta: &Vect) -> Vect {
    let v = value(f, theta);
    let mut g = Vect::zeros(theta.len());
    for a in 0..f.n_actions {
        for s in 0..f.n_states {
            let phi = phi_row(f, s, a);
            let d = f.sampling[a * f.n_states + s];
            let mut target = 0.0;
            for (sp, vs) in v.iter().enumerate() {
                target += f.transition[s][a][sp] * (reward(f, s, a, sp) + f.gamma * vs);
            }
            g += &phi * (d * (target - phi.dot(theta)));
        }
    }
    g
}

pub fn reference_gram(f: &ProblemFile) -> Mat {
    let m = f.features[0].len();
    let mut gram = Mat::zeros(m, m);
    for a in 0..f.n_actions {
        for s in 0..f.n_states {
            let phi = phi_row(f, s, a);
            gram += &phi * phi.transpose() * f.sampling[a * f.n_states + s];
        }
    }
    gram
}

/// `(1 − αη)I − α(M − γ Σ d φ Σ P Σ μ φ'ᵀ)` for a policy given as `|S|×|A|`
/// probabilities.
pub fn reference_mode(f: &ProblemFile, mu: &Mat, alpha: f64, eta: f64) -> Mat {
    let m = f.features[0].len();
    let mut next = Mat::zeros(m, m);
    for a in 0..f.n_actions {
        for s in 0..f.n_states {
            let phi = phi_row(f, s, a);
            let d = f.sampling[a * f.n_states + s];
            let mut expected_next = Vect::zeros(m);
            for sp in 0..f.n_states {
                for ap in 0..f.n_actions {
                    expected_next += phi_row(f, sp, ap) * (f.transition[s][a][sp] * mu[(sp, ap)]);
                }
            }
            next += &phi * expected_next.transpose() * d;
        }
    }
    let drift = reference_gram(f) - next * f.gamma;
    Mat::identity(m, m) * (1.0 - alpha * eta) - drift * alpha
}

pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Checks behind the randomized identity suite. Each returns the largest
/// defect divided by its natural scale.
pub mod checks {
    use super::*;
    use qlswitch::bellman::{learning_map, projected_equation_residual, step_pqvi};
    use qlswitch::jsr::reg_rescaling_check;
    use qlswitch::mdp::StochasticPolicy;
    use qlswitch::switching::{
        build_family, hull_combination, hull_weights, linearize_max, pairwise_mode,
    };

    /// Mixture reproduces `V_θ − V_θ̄` and rows are two-point simplex rows.
    pub fn linearization(p: &Problem, theta: &Vect, theta_bar: &Vect) -> f64 {
        let f = p.source();
        let mu = linearize_max(p, theta, theta_bar);
        let v = value(f, theta);
        let vb = value(f, theta_bar);
        let x = theta - theta_bar;
        let mut worst: f64 = 0.0;
        for s in 0..f.n_states {
            let row: Vec<f64> = (0..f.n_actions).map(|a| mu.probs[(s, a)]).collect();
            let support = row.iter().filter(|&&w| w > 0.0).count();
            if support > 2 || row.iter().any(|&w| w < 0.0) {
                return f64::INFINITY;
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            let lin: f64 = (0..f.n_actions).map(|a| row[a] * phi_row(f, s, a).dot(&x)).sum();
            let scale = 1.0 + v[s].abs() + vb[s].abs();
            worst = worst.max((v[s] - vb[s] - lin).abs() / scale);
        }
        worst
    }

    /// `T(θ) − T(θ̄) = A_μ (θ − θ̄)` with the returned witness.
    pub fn pairwise(p: &Problem, theta: &Vect, theta_bar: &Vect) -> f64 {
        let f = p.source();
        let (alpha, eta) = (p.alpha(), p.eta());
        let w = pairwise_mode(p, theta, theta_bar, alpha, eta);
        let t = |th: &Vect| th * (1.0 - alpha * eta) + reference_g(f, th) * alpha;
        let lhs = t(theta) - t(theta_bar);
        let mode = reference_mode(f, &w.mu.probs, alpha, eta);
        let rhs = &mode * (theta - theta_bar);
        let scale = 1.0 + theta.norm() + theta_bar.norm() + lhs.norm();
        let lib = (learning_map(p, theta, alpha, eta) - t(theta)).norm();
        ((lhs - rhs).norm() / scale)
            .max((&w.mode - mode).amax() / (1.0 + w.mode.amax()))
            .max(lib / scale)
    }

    /// `A_μ = Σ_π c_π A_π` with product weights.
    pub fn hull(p: &Problem, probs: &Mat) -> f64 {
        let f = p.source();
        let family = build_family(p, p.alpha(), p.eta()).unwrap();
        let mu = StochasticPolicy::new(probs.clone()).unwrap();
        let w = hull_weights(&mu).unwrap();
        if w.iter().any(|&c| c < 0.0) {
            return f64::INFINITY;
        }
        let mass = (w.iter().sum::<f64>() - 1.0).abs();
        let combo = hull_combination(&family, &w);
        let direct = reference_mode(f, probs, p.alpha(), p.eta());
        mass.max(max_abs(&(combo - &direct)) / (1.0 + max_abs(&direct)))
    }

    /// `A^η_π(α) = (1 − αη) A_π(α/(1 − αη))`, or `−α` times the drift
    /// matrix when `αη = 1`, for single modes and depth-2 products.
    pub fn rescaling(p: &Problem) -> f64 {
        let f = p.source();
        let (alpha, eta) = (p.alpha(), p.eta());
        let reg = build_family(p, alpha, eta).unwrap();
        let factor = 1.0 - alpha * eta;
        let critical = (alpha * eta - 1.0).abs() <= 1e-15;
        let mut worst: f64 = 0.0;
        for (a, pol) in reg.modes.iter().zip(&reg.policies) {
            let onehot = Mat::from_fn(f.n_states, f.n_actions, |s, b| {
                if pol.actions[s] == b {
                    1.0
                } else {
                    0.0
                }
            });
            let other = if critical {
                let m = a.nrows();
                // I − A_π(1, 0) is the drift matrix
                (Mat::identity(m, m) - reference_mode(f, &onehot, 1.0, 0.0)) * -alpha
            } else {
                reference_mode(f, &onehot, alpha / factor, 0.0) * factor
            };
            worst = worst.max(max_abs(&(a - other)) / max_abs(a).max(1.0));
        }
        let report = reg_rescaling_check(p, alpha, eta, 2).unwrap();
        worst.max(report.max_defect)
    }

    /// Fixed points of `T_α`, of projected Q-VI and solutions of the
    /// projected equation coincide: the three residuals are images of
    /// `g(θ)` under fixed invertible maps.
    pub fn fixed_point_equivalence(p: &Problem, theta: &Vect) -> f64 {
        let f = p.source();
        let g = reference_g(f, theta);
        let m_inv = reference_gram(f).try_inverse().unwrap();
        let phi = Mat::from_row_slice(
            f.features.len(),
            theta.len(),
            &f.features.concat(),
        );
        let proj = (&phi * (&m_inv * &g)).norm();
        let scale = 1.0 + theta.norm() + g.norm() + proj;
        let d1 = (proj - projected_equation_residual(p, theta)).abs();
        let d2 = (learning_map(p, theta, p.alpha(), 0.0) - theta - &g * p.alpha()).norm();
        let d3 = (step_pqvi(p, theta) - theta - &m_inv * &g).norm();
        // Both sides of d1 and d3 go through M⁻¹; rounding grows with its size.
        let cond = 1.0 + max_abs(&m_inv);
        (d1 / (scale * cond)).max(d2 / scale).max(d3 / (scale * cond))
    }
}

/// Options under which most draws have a contractive mode family.
pub fn contractive_opts() -> GenOpts {
    GenOpts {
        max_gamma: 0.5,
        max_alpha: 0.5,
        regularize: false,
        ..GenOpts::default()
    }
}

/// A random problem with a valid certificate and its certified fixed
/// point, or `None` when this draw's family is not certifiable.
pub fn certified_instance(
    seed: u64,
) -> Option<(Problem, qlswitch::lyapunov::LyapunovCert, Vect)> {
    use qlswitch::jsr::jsr_bracket;
    use qlswitch::lyapunov::build_cert;
    use qlswitch::simulate::{certified_fixed_point, Variant};
    use qlswitch::switching::build_family;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_problem_with(&mut rng, contractive_opts());
    let family = build_family(&p, p.alpha(), 0.0).ok()?;
    let bracket = jsr_bracket(&family, 3, false).ok()?;
    // Brackets near one make the fixed-point solve slow; skip them.
    if bracket.upper >= 0.98 {
        return None;
    }
    let beta = 0.5 * (bracket.upper + 1.0);
    let cert = build_cert(&family, beta, 3).ok().filter(|c| c.valid)?;
    let ts = certified_fixed_point(&p, Variant::Plain, Some(&cert)).ok()??;
    Some((p, cert, ts))
}
