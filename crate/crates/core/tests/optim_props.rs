//! The box-constrained minimizer on problems with known solutions.

use knnue::optim::{finite_diff_grad, grid_refine, minimize_bounded, BoundedProblem};
use proptest::prelude::*;

/// Center, curvature, lower bound, upper bound and start point.
type Quadratic = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

fn boxed_quadratic() -> impl Strategy<Value = Quadratic> {
    (1usize..6).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(0.1f64..10.0, n),
            prop::collection::vec(-3.0f64..0.0, n),
            prop::collection::vec(0.0f64..3.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// A separable quadratic is minimized by clipping its center to the box.
    #[test]
    fn separable_quadratic_solution_is_the_clipped_center((c, w, lo, hi, x0) in boxed_quadratic()) {
        let f = |x: &[f64]| x.iter().zip(&c).zip(&w).map(|((x, c), w)| w * (x - c).powi(2)).sum::<f64>();
        let problem = BoundedProblem::new(f, lo.clone(), hi.clone()).unwrap();
        let m = minimize_bounded(&problem, &x0).unwrap();
        for i in 0..c.len() {
            let want = c[i].clamp(lo[i], hi[i]);
            prop_assert!((m.x[i] - want).abs() < 1e-6, "coord {}: {} vs {}", i, m.x[i], want);
            prop_assert!(m.x[i] >= lo[i] && m.x[i] <= hi[i]);
        }
        prop_assert!(m.trace.windows(2).all(|t| t[1] <= t[0]));
    }

    #[test]
    fn grid_start_is_the_best_grid_point(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let f = |x: &[f64]| (x[0] - a).abs() + (x[1] - b).abs();
        let best = grid_refine(f, &[-2.0, -2.0], &[2.0, 2.0], 9).unwrap();
        let fb = f(&best);
        for i in 0..9 {
            for j in 0..9 {
                let p = [-2.0 + 0.5 * f64::from(i), -2.0 + 0.5 * f64::from(j)];
                prop_assert!(fb <= f(&p));
            }
        }
    }

    #[test]
    fn central_differences_match_polynomial_gradients(x in prop::collection::vec(-3.0f64..3.0, 3)) {
        let f = |v: &[f64]| v[0].powi(3) + v[0] * v[1] + (v[2] * 2.0).sin();
        let g = finite_diff_grad(f, &x, 1e-5).unwrap();
        let want = [3.0 * x[0] * x[0] + x[1], x[0], 2.0 * (2.0 * x[2]).cos()];
        for i in 0..3 {
            prop_assert!((g[i] - want[i]).abs() < 1e-6 * (1.0 + want[i].abs()));
        }
    }
}

#[test]
fn bounds_are_validated() {
    assert!(BoundedProblem::new(|_: &[f64]| 0.0, vec![1.0], vec![0.0]).is_err());
    assert!(BoundedProblem::new(|_: &[f64]| 0.0, vec![], vec![]).is_err());
    assert!(BoundedProblem::new(|_: &[f64]| 0.0, vec![f64::NAN], vec![1.0]).is_err());
    let p = BoundedProblem::new(|x: &[f64]| x[0], vec![0.0], vec![1.0]).unwrap();
    assert!(minimize_bounded(&p, &[0.0, 1.0]).is_err());
}
