mod common;

use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safe_maddpg::qp::{
    build_hard_projection, build_soft_projection, extract_action, kkt_residuals, solve_qp,
    ProjectionSpec, QpStatus,
};

use common::{feasible_instance, projected_gradient_oracle};

const TOL: f64 = 1e-10;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn feasible_instances_match_oracle(seed in any::<u64>(), n in 1usize..=12, r in 0usize..=24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qp = feasible_instance(&mut rng, n, r);
        let sol = solve_qp(&qp, TOL).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        let kkt = kkt_residuals(&qp, &sol.primal, &sol.dual).unwrap();
        prop_assert!(kkt.passes(&qp), "{:?}", kkt);
        let oracle = projected_gradient_oracle(&qp, 200_000);
        let obj = qp.objective(&sol.primal);
        prop_assert!(
            (obj - oracle.dual_objective).abs() <= 1e-6,
            "solver {} oracle {} after {} iterations", obj, oracle.dual_objective, oracle.iterations
        );
    }

    #[test]
    fn solution_is_invariant_to_row_order(seed in any::<u64>(), n in 1usize..=6, r in 1usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qp = feasible_instance(&mut rng, n, r);
        let mut flipped = qp.clone();
        for i in 0..r {
            flipped.ineq_matrix.set_row(i, &qp.ineq_matrix.row(r - 1 - i));
            flipped.ineq_rhs[i] = qp.ineq_rhs[r - 1 - i];
        }
        let a = solve_qp(&qp, TOL).unwrap();
        let b = solve_qp(&flipped, TOL).unwrap();
        for (x, y) in a.primal.iter().zip(&b.primal) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn soft_projection_is_always_feasible(
        proposal in prop::collection::vec(-1.0f64..1.0, 6),
        rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 6), 6),
        margins in prop::collection::vec(-3.0f64..1.0, 6),
    ) {
        let spec = ProjectionSpec {
            proposed_action: proposal,
            constraint_sensitivities: rows,
            constraint_margins: margins,
            action_bound: 1.0,
            rho: 1000.0,
            slack_reg: 1e-6,
        };
        let qp = build_soft_projection(&spec).unwrap();
        let sol = solve_qp(&qp, TOL).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        let kkt = kkt_residuals(&qp, &sol.primal, &sol.dual).unwrap();
        prop_assert!(kkt.passes(&qp), "{:?}", kkt);
        let (action, slack) = extract_action(&sol, 6).unwrap();
        prop_assert!(action.iter().all(|a| a.abs() <= 1.0 + 1e-8));
        prop_assert!(slack.iter().all(|e| *e >= -1e-8));
    }

    #[test]
    fn hard_projection_never_increases_distance_to_feasible_points(
        seed in any::<u64>(),
    ) {
        // projecting onto a convex set is non-expansive: the result is at least
        // as close to any feasible point as the proposal was
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let inside: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let margins: Vec<f64> = rows
            .iter()
            .map(|g| g.iter().zip(&inside).map(|(a, b)| a * b).sum::<f64>() + rng.gen_range(0.0..0.3))
            .collect();
        let proposal: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = ProjectionSpec {
            proposed_action: proposal.clone(),
            constraint_sensitivities: rows,
            constraint_margins: margins,
            action_bound: 1.0,
            rho: 1000.0,
            slack_reg: 1e-6,
        };
        let sol = solve_qp(&build_hard_projection(&spec).unwrap(), TOL).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        let (action, _) = extract_action(&sol, 6).unwrap();
        let z = DVector::from_vec(inside);
        let before = (DVector::from_vec(proposal) - &z).norm();
        let after = (DVector::from_vec(action) - &z).norm();
        prop_assert!(after <= before + 1e-9);
    }

    #[test]
    fn satisfied_proposal_is_returned_unchanged(
        proposal in prop::collection::vec(-1.0f64..=1.0, 6),
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 0..7),
        extra in prop::collection::vec(0.0f64..1.0, 6),
    ) {
        let margins: Vec<f64> = rows
            .iter()
            .zip(&extra)
            .map(|(g, e)| g.iter().zip(&proposal).map(|(a, b)| a * b).sum::<f64>() + e)
            .collect();
        let spec = ProjectionSpec {
            proposed_action: proposal.clone(),
            constraint_sensitivities: rows,
            constraint_margins: margins,
            action_bound: 1.0,
            rho: 1000.0,
            slack_reg: 1e-6,
        };
        let sol = solve_qp(&build_hard_projection(&spec).unwrap(), TOL).unwrap();
        let (action, _) = extract_action(&sol, 6).unwrap();
        prop_assert_eq!(action, proposal);
    }

    #[test]
    fn large_penalty_reproduces_the_hard_projection(seed in any::<u64>(), k in 1usize..=8) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inside: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let rows: Vec<Vec<f64>> = (0..k).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let margins: Vec<f64> = rows
            .iter()
            .map(|g| g.iter().zip(&inside).map(|(a, b)| a * b).sum::<f64>() + rng.gen_range(0.0..0.3))
            .collect();
        let mut spec = ProjectionSpec {
            proposed_action: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            constraint_sensitivities: rows,
            constraint_margins: margins,
            action_bound: 1.0,
            rho: 1.0,
            slack_reg: 1e-6,
        };
        let hard = solve_qp(&build_hard_projection(&spec).unwrap(), TOL).unwrap();
        prop_assert_eq!(hard.status, QpStatus::Optimal);
        let lambda = hard.dual.iter().take(k).fold(0.0f64, |m, v| m.max(*v));
        spec.rho = 10.0 * lambda + 1.0;
        let soft = solve_qp(&build_soft_projection(&spec).unwrap(), TOL).unwrap();
        let (a_hard, _) = extract_action(&hard, 6).unwrap();
        let (a_soft, slack) = extract_action(&soft, 6).unwrap();
        for (x, y) in a_hard.iter().zip(&a_soft) {
            prop_assert!((x - y).abs() <= 1e-4, "{} vs {}", x, y);
        }
        prop_assert!(slack.iter().all(|e| *e <= 1e-6), "{:?}", slack);
    }

    #[test]
    fn kkt_checker_thresholds_hold_on_optimal_solutions(seed in any::<u64>(), n in 1usize..=8, r in 1usize..=16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qp = feasible_instance(&mut rng, n, r);
        let sol = solve_qp(&qp, TOL).unwrap();
        let kkt = kkt_residuals(&qp, &sol.primal, &sol.dual).unwrap();
        let f_inf = qp.linear_cost.amax();
        prop_assert!(kkt.stationarity <= 1e-6 * (1.0 + f_inf));
        prop_assert!(kkt.primal_violation <= 1e-8);
        prop_assert!(kkt.complementarity <= 1e-8);
        prop_assert!(sol.dual.iter().all(|l| *l >= 0.0));
    }
}
