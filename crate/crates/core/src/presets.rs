//! The worked examples as named, ready-to-run problems.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::{Problem, ProblemFile, RewardSpec};

#[derive(Debug, Clone, Serialize)]
pub struct PresetInfo {
    pub name: &'static str,
    pub description: &'static str,
    /// Suggested Lyapunov contraction factor.
    pub beta_eps: Option<f64>,
    /// Suggested truncation depth.
    pub depth: Option<usize>,
    /// Suggested initial parameter.
    pub theta0: Option<Vec<f64>>,
}

pub const NAMES: [&str; 8] = [
    "elq-converges",
    "pqvi-converges",
    "example-3d",
    "example-jsr-gt1",
    "reg-rpvi-converges",
    "reg-dlq-converges",
    "example-eta20",
    "example-trajectory",
];

pub fn info(name: &str) -> Result<PresetInfo> {
    let (description, beta_eps, depth, theta0) = match name {
        "elq-converges" => (
            "two states, one action: linear Q-learning hits the fixed point in one step while projected Q-VI diverges",
            None,
            None,
            Some(vec![1.0]),
        ),
        "pqvi-converges" => (
            "one state, one action: projected Q-VI contracts by 0.9 while linear Q-learning multiplies by -4",
            None,
            None,
            Some(vec![1.0]),
        ),
        "example-3d" => (
            "three states, two actions, three features: eight contractive modes and a truncated Lyapunov norm ball",
            Some(0.975),
            Some(4),
            Some(vec![1.0, -1.0, 0.5]),
        ),
        "example-jsr-gt1" => (
            "one state, two actions: modes 0.397 and -1.304, JSR above one yet the greedy recursion converges",
            None,
            None,
            Some(vec![-2.0]),
        ),
        "reg-rpvi-converges" => (
            "regularized (eta = 1) one-state example: RPVI contracts by 90/101, regularized DLQ multiplies by -4.5",
            None,
            None,
            Some(vec![1.0]),
        ),
        "reg-dlq-converges" => (
            "regularized (eta = 1) two-state example: regularized DLQ contracts by -0.1, RPVI multiplies by -8.01/2.99",
            None,
            None,
            Some(vec![1.0]),
        ),
        "example-eta20" => (
            "eta = 20 stabilizes the single mode 1.62 to -0.38; the all-eta bound gives 0.38",
            None,
            None,
            Some(vec![1.0]),
        ),
        "example-trajectory" => (
            "one state, two actions, gamma = 0.5: trajectory -2, 1.6, 0.232, 0.03364 with modes 2, 1, 1",
            None,
            None,
            Some(vec![-2.0]),
        ),
        other => return Err(Error::Invalid(format!("unknown preset '{other}'"))),
    };
    let name = NAMES.iter().copied().find(|n| *n == name).expect("matched above");
    Ok(PresetInfo {
        name,
        description,
        beta_eps,
        depth,
        theta0,
    })
}

fn two_state_absorbing(d1: f64, phi2: f64, alpha: f64, eta: f64) -> ProblemFile {
    ProblemFile {
        n_states: 2,
        n_actions: 1,
        transition: vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]],
        reward: RewardSpec::Constant(0.0),
        gamma: 0.9,
        alpha,
        eta,
        features: vec![vec![1.0], vec![phi2]],
        sampling: vec![d1, 1.0 - d1],
        behavior: None,
        stochastic_tol: None,
    }
}

fn one_state_one_action(eta: f64) -> ProblemFile {
    ProblemFile {
        n_states: 1,
        n_actions: 1,
        transition: vec![vec![vec![1.0]]],
        reward: RewardSpec::Constant(0.0),
        gamma: 0.9,
        alpha: 0.5,
        eta,
        features: vec![vec![10.0]],
        sampling: vec![1.0],
        behavior: None,
        stochastic_tol: None,
    }
}

fn one_state_two_actions(gamma: f64) -> ProblemFile {
    ProblemFile {
        n_states: 1,
        n_actions: 2,
        transition: vec![vec![vec![1.0], vec![1.0]]],
        reward: RewardSpec::Constant(0.0),
        gamma,
        alpha: 0.9,
        eta: 0.0,
        features: vec![vec![1.0], vec![-2.0]],
        sampling: vec![0.9, 0.1],
        behavior: None,
        stochastic_tol: None,
    }
}

fn example_3d() -> ProblemFile {
    // Rows in action-block order (1,1),(2,1),(3,1),(1,2),(2,2),(3,2).
    let rows = [
        [0.7325, 0.0122, 0.2552],
        [0.6359, 0.2104, 0.1537],
        [0.5133, 0.1950, 0.2917],
        [0.4722, 0.0379, 0.4899],
        [0.0023, 0.8670, 0.1307],
        [0.7437, 0.0553, 0.2010],
    ];
    let transition = (0..3)
        .map(|s| (0..2).map(|a| rows[a * 3 + s].to_vec()).collect())
        .collect();
    ProblemFile {
        n_states: 3,
        n_actions: 2,
        transition,
        reward: RewardSpec::Constant(0.0),
        gamma: 0.7965,
        alpha: 0.9,
        eta: 0.0,
        features: vec![
            vec![-0.0957, -0.3996, -0.5050],
            vec![0.0242, 0.1328, 0.1858],
            vec![0.7378, 0.4582, 0.0919],
            vec![-0.4882, 0.5305, 0.2531],
            vec![-0.2158, -0.1461, -0.2595],
            vec![0.4013, 0.5568, -0.7554],
        ],
        sampling: vec![0.1595, 0.0198, 0.1480, 0.2228, 0.2155, 0.2343],
        behavior: None,
        // The published four-decimal data sums to 0.9999 in places.
        stochastic_tol: Some(1e-4),
    }
}

/// The raw problem document for a preset.
pub fn preset_file(name: &str) -> Result<ProblemFile> {
    Ok(match name {
        "elq-converges" => two_state_absorbing(0.99, -10.0, 0.1, 0.0),
        "pqvi-converges" => one_state_one_action(0.0),
        "example-3d" => example_3d(),
        "example-jsr-gt1" => one_state_two_actions(0.9),
        "reg-rpvi-converges" => one_state_one_action(1.0),
        "reg-dlq-converges" => two_state_absorbing(0.99, -10.0, 0.1, 1.0),
        "example-eta20" => two_state_absorbing(0.9, 10.0, 0.1, 20.0),
        "example-trajectory" => one_state_two_actions(0.5),
        other => return Err(Error::Invalid(format!("unknown preset '{other}'"))),
    })
}

pub fn problem(name: &str) -> Result<Problem> {
    Problem::from_file_data(preset_file(name)?)
}
