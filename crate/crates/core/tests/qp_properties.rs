use nalgebra::DVector;
use proptest::prelude::*;

use stochastic_cbf::barrier::AffineInputConstraint;
use stochastic_cbf::qp::{kkt_residuals, solve_qp, solve_with_fallback, Fallback, QpProblem, QpStatus, KKT_TOL};

fn problem() -> impl Strategy<Value = QpProblem> {
    (1usize..=4).prop_flat_map(|m| {
        let row = (prop::collection::vec(-3.0..3.0f64, m), -3.0..3.0f64);
        (prop::collection::vec(-3.0..3.0f64, m), prop::collection::vec(row, 0..=6)).prop_map(
            |(u_nom, rows)| {
                let constraints = rows
                    .into_iter()
                    .map(|(a, b)| AffineInputConstraint::ge(DVector::from_vec(a), b).unwrap())
                    .collect();
                QpProblem::new(DVector::from_vec(u_nom), constraints)
            },
        )
    })
}

fn scale(p: &QpProblem, u: &DVector<f64>) -> f64 {
    1.0 + u.amax() + p.u_nom.amax()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn optimal_points_satisfy_kkt(p in problem()) {
        let r = solve_qp(&p).unwrap();
        if r.status == QpStatus::Optimal {
            let (primal, stationarity) = kkt_residuals(&p, &r);
            let s = scale(&p, &r.u);
            prop_assert!(primal <= KKT_TOL * s, "primal {primal}");
            prop_assert!(stationarity <= KKT_TOL * s, "stationarity {stationarity}");
            prop_assert!(r.multipliers.iter().all(|&l| l >= 0.0));
        }
    }

    #[test]
    fn filtering_a_filtered_input_changes_nothing(p in problem()) {
        let r = solve_qp(&p).unwrap();
        if r.status == QpStatus::Optimal {
            let again = solve_qp(&QpProblem::new(r.u.clone(), p.constraints.clone())).unwrap();
            prop_assert_eq!(again.status, QpStatus::Optimal);
            prop_assert!((&again.u - &r.u).amax() <= 1e-9 * scale(&p, &r.u));
        }
    }

    #[test]
    fn satisfied_nominal_passes_through(p in problem()) {
        let inside = p.constraints.iter().all(|c| c.to_ge().violation(&p.u_nom) == 0.0);
        if inside {
            let r = solve_qp(&p).unwrap();
            prop_assert_eq!(r.u, p.u_nom.clone());
            prop_assert!(r.active_set.is_empty());
        }
    }

    #[test]
    fn fallback_always_returns_a_finite_input(p in problem()) {
        let last = DVector::from_element(p.dim(), 0.25);
        let relax = solve_with_fallback(&p, Fallback::Relax, &last).unwrap();
        prop_assert!(relax.u.iter().all(|v| v.is_finite()));
        let hold = solve_with_fallback(&p, Fallback::Hold, &last).unwrap();
        match hold.status {
            QpStatus::Infeasible => {
                prop_assert_eq!(hold.u, last);
                prop_assert_eq!(relax.status, QpStatus::Relaxed);
            }
            _ => prop_assert_eq!(hold.u, relax.u),
        }
    }
}

#[test]
fn contradictory_pair_is_infeasible() {
    let a = DVector::from_vec(vec![1.0]);
    let p = QpProblem::new(
        DVector::from_vec(vec![0.0]),
        vec![
            AffineInputConstraint::ge(a.clone(), 1.0).unwrap(),
            AffineInputConstraint::le(a, 0.0).unwrap(),
        ],
    );
    assert_eq!(solve_qp(&p).unwrap().status, QpStatus::Infeasible);
    let relaxed = solve_with_fallback(&p, Fallback::Relax, &DVector::zeros(1)).unwrap();
    assert_eq!(relaxed.status, QpStatus::Relaxed);
    assert!((relaxed.u[0] - 0.5).abs() < 1e-6);
}
