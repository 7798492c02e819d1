//! The finite-volume oracle against the exact solution.

use piann_core::physics::{solve_upwind_fv, total_variation, trapezoid, AnalyticSolution};
use piann_core::GridSpec;

fn l1_error(m: f64, dx: f64, t: f64) -> f64 {
    let grid = GridSpec::uniform(1.0, dx, t, t).unwrap();
    let fv = solve_upwind_fv(m, &grid, 0.9).unwrap();
    let exact = AnalyticSolution::new(m).unwrap();
    grid.x
        .iter()
        .zip(fv.field.row(1))
        .map(|(&x, &u)| (u - exact.evaluate(x, t).unwrap()).abs() * dx)
        .sum()
}

#[test]
fn upwind_error_decreases_under_refinement() {
    for m in [2.0, 4.5] {
        let errors: Vec<f64> = [1e-2, 5e-3, 2.5e-3].iter().map(|&dx| l1_error(m, dx, 0.4)).collect();
        assert!(errors.windows(2).all(|w| w[1] < w[0]), "M={m}: {errors:?}");
        // First-order scheme with a shock: roughly halving per refinement.
        assert!(errors[2] < 0.5 * errors[0], "M={m}: {errors:?}");
    }
}

#[test]
fn upwind_is_total_variation_diminishing_and_bounded() {
    let grid = GridSpec::uniform(1.0, 0.01, 0.5, 0.01).unwrap();
    for m in [0.5, 2.0, 50.0] {
        let fv = solve_upwind_fv(m, &grid, 0.9).unwrap();
        let tv: Vec<f64> = (0..grid.n_t()).map(|j| total_variation(fv.field.row(j))).collect();
        assert!(tv.windows(2).all(|w| w[1] <= w[0] + 1e-12), "M={m}");
        assert!(fv.field.values().iter().all(|&u| (0.0..=1.0 + 1e-12).contains(&u)));
    }
}

#[test]
fn upwind_conserves_mass_before_outflow() {
    // Inflow flux f(1) = 1 at x = 0 and no outflow while the front is inside,
    // so the cell-averaged volume grows at unit rate.
    let m = 2.0;
    let dx = 2.5e-3;
    let t = 0.3;
    let grid = GridSpec::uniform(1.0, dx, t, t).unwrap();
    let fv = solve_upwind_fv(m, &grid, 0.9).unwrap();
    let u = fv.field.row(1);
    let volume: f64 = u[1..].iter().sum::<f64>() * dx;
    assert!((volume - t).abs() < 1e-10, "{volume}");
}

#[test]
fn exact_solution_conserves_mass() {
    let dx = 1e-3;
    for m in [0.5, 2.0, 48.0] {
        let exact = AnalyticSolution::new(m).unwrap();
        for t in [0.04, 0.2, 0.4] {
            let cells = ((exact.shock_position(t) + 0.05) / dx).ceil() as usize;
            let u: Vec<f64> = (0..=cells).map(|i| exact.evaluate(i as f64 * dx, t).unwrap()).collect();
            assert!((trapezoid(&u, dx) - t).abs() < 2e-3, "M={m} t={t}");
        }
    }
}
