//! Randomized identities on small problems (|S|, |A| ≤ 3, m ≤ 4).

mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{checks, problem_from_seed, random_policy, random_vec, Vect};
use qlswitch::bellman::{solve_fixed_point, SolveOptions, SolveStatus};
use qlswitch::simulate::{replay_defect, run_deterministic, Variant};

const TOL: f64 = 1e-10;

/// Problem plus a pair of parameters; a third of the pairs are nearly equal.
fn instance(seed: u64) -> (qlswitch::Problem, Vect, Vect) {
    let p = problem_from_seed(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let scale = 10f64.powf(rng.random_range(-2.0..1.0));
    let theta = random_vec(&mut rng, p.dim(), scale);
    let theta_bar = if rng.random_bool(0.3) {
        &theta + random_vec(&mut rng, p.dim(), 1e-9)
    } else {
        random_vec(&mut rng, p.dim(), scale)
    };
    (p, theta, theta_bar)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn linearization_reproduces_value_difference(seed in any::<u64>()) {
        let (p, t, tb) = instance(seed);
        let d = checks::linearization(&p, &t, &tb);
        prop_assert!(d <= TOL, "defect {d}");
    }

    #[test]
    fn pairwise_mode_represents_map_difference(seed in any::<u64>()) {
        let (p, t, tb) = instance(seed);
        let d = checks::pairwise(&p, &t, &tb);
        prop_assert!(d <= TOL, "defect {d}");
    }

    #[test]
    fn stochastic_mode_is_hull_combination(seed in any::<u64>()) {
        let p = problem_from_seed(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mu = random_policy(&mut rng, p.n_states(), p.n_actions());
        let d = checks::hull(&p, &mu);
        prop_assert!(d <= TOL, "defect {d}");
    }

    #[test]
    fn regularized_modes_are_rescaled_direct_modes(seed in any::<u64>()) {
        let p = problem_from_seed(seed);
        let d = checks::rescaling(&p);
        prop_assert!(d <= TOL, "defect {d}");
    }

    #[test]
    fn fixed_points_match_projected_equation(seed in any::<u64>()) {
        let (p, t, _) = instance(seed);
        let d = checks::fixed_point_equivalence(&p, &t);
        prop_assert!(d <= TOL, "defect {d}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn deterministic_run_replays_through_recorded_modes(seed in any::<u64>()) {
        let (p, t, _) = instance(seed);
        let variant = if p.eta() > 0.0 { Variant::Regularized } else { Variant::Plain };
        let opts = SolveOptions { tol: 1e-14, max_iter: 20_000, theta0: None };
        let r = solve_fixed_point(&p, variant.map_kind(), &opts, None).unwrap();
        prop_assume!(r.status == SolveStatus::Converged);
        let ts = Vect::from_vec(r.theta_star);
        let traj = run_deterministic(&p, &t, 15, Some(&ts), variant).unwrap();
        let scale = 1.0 + traj.thetas.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        prop_assert!(replay_defect(&p, &traj, &ts) <= TOL * scale);
    }
}
