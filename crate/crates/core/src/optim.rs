//! Box-constrained quasi-Newton minimization.
//!
//! [`minimize_bounded`] is a limited-memory BFGS with gradient projection: at
//! every iterate the variables pinned at a bound whose gradient points outward
//! form the active set, the two-loop recursion runs on the free variables only,
//! and a projected backtracking line search enforces sufficient decrease.

use serde::Serialize;

use crate::error::OptimError;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest dimension accepted by [`grid_refine`].
pub const GRID_MAX_DIM: usize = 4;

type Objective<'a> = Box<dyn Fn(&[f64]) -> f64 + 'a>;
type GradientFn<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + 'a>;

/// An objective over a box `lower <= x <= upper`.
pub struct BoundedProblem<'a> {
    lower: Vec<f64>,
    upper: Vec<f64>,
    objective: Objective<'a>,
    gradient: Option<GradientFn<'a>>,
    fd_step: f64,
    pub max_iter: usize,
    /// Stop when the infinity norm of the projected gradient drops below this.
    pub pgtol: f64,
    /// Stop when the relative decrease of one step drops below this.
    pub ftol: f64,
    /// Number of correction pairs kept.
    pub history: usize,
}

impl<'a> BoundedProblem<'a> {
    pub fn new(
        objective: impl Fn(&[f64]) -> f64 + 'a,
        lower: Vec<f64>,
        upper: Vec<f64>,
    ) -> Result<Self, OptimError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(OptimError::InvalidBounds(lower.len()));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !l.is_finite() || !u.is_finite() || l > u {
                return Err(OptimError::InvalidBounds(i));
            }
        }
        Ok(Self {
            lower,
            upper,
            objective: Box::new(objective),
            gradient: None,
            fd_step: FD_STEP,
            max_iter: 500,
            pgtol: 1e-8,
            ftol: 1e-14,
            history: 10,
        })
    }

    /// Supplies an analytic gradient; otherwise central differences are used.
    pub fn with_gradient(mut self, gradient: impl Fn(&[f64]) -> Vec<f64> + 'a) -> Self {
        self.gradient = Some(Box::new(gradient));
        self
    }

    pub fn with_fd_step(mut self, h: f64) -> Result<Self, OptimError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(OptimError::InvalidOption(format!("fd step {h}")));
        }
        self.fd_step = h;
        Ok(self)
    }

    pub fn with_max_iter(mut self, n: usize) -> Self {
        self.max_iter = n;
        self
    }

    pub fn with_pgtol(mut self, tol: f64) -> Self {
        self.pgtol = tol;
        self
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.objective)(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match &self.gradient {
            Some(g) => g(x),
            None => bounded_fd_grad(&*self.objective, x, self.fd_step, &self.lower, &self.upper),
        }
    }

    fn clip(&self, x: &mut [f64]) -> bool {
        let mut clipped = false;
        for ((v, &l), &u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            let c = v.clamp(l, u);
            if c != *v {
                clipped = true;
                *v = c;
            }
        }
        clipped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ProjectedGradient,
    RelativeReduction,
    LineSearchFailed,
    MaxIterations,
    NonFiniteObjective,
}

#[derive(Debug, Clone, Serialize)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// The start point was outside the box and has been clipped.
    pub start_clipped: bool,
    /// Objective value of every accepted iterate, starting point first.
    pub trace: Vec<f64>,
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn dot_masked(a: &[f64], b: &[f64], free: &[bool]) -> f64 {
    a.iter()
        .zip(b)
        .zip(free)
        .filter(|(_, &f)| f)
        .map(|((x, y), _)| x * y)
        .sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `problem` from `x0`. Every iterate lies inside the box and the
/// objective never increases between accepted iterates.
pub fn minimize_bounded(problem: &BoundedProblem<'_>, x0: &[f64]) -> Result<Minimum, OptimError> {
    let n = problem.dim();
    if x0.len() != n {
        return Err(OptimError::DimensionMismatch {
            expected: n,
            actual: x0.len(),
        });
    }
    let mut x = x0.to_vec();
    let start_clipped = problem.clip(&mut x);
    let mut f = problem.value(&x);
    if !f.is_finite() {
        return Err(OptimError::NonFiniteStart);
    }
    let mut g = problem.gradient(&x);
    let mut trace = vec![f];
    let mut pairs: Vec<Pair> = Vec::with_capacity(problem.history);
    let mut iterations = 0;

    let done = |x: Vec<f64>, f, iterations, termination, trace| Minimum {
        x,
        f,
        iterations,
        converged: matches!(
            termination,
            Termination::ProjectedGradient | Termination::RelativeReduction
        ),
        termination,
        start_clipped,
        trace,
    };

    loop {
        if g.iter().any(|v| !v.is_finite()) {
            return Ok(done(x, f, iterations, Termination::NonFiniteObjective, trace));
        }
        let pg_norm = x
            .iter()
            .zip(&g)
            .enumerate()
            .map(|(i, (xi, gi))| {
                ((xi - gi).clamp(problem.lower[i], problem.upper[i]) - xi).abs()
            })
            .fold(0.0, f64::max);
        if pg_norm <= problem.pgtol {
            return Ok(done(x, f, iterations, Termination::ProjectedGradient, trace));
        }
        if iterations >= problem.max_iter {
            return Ok(done(x, f, iterations, Termination::MaxIterations, trace));
        }

        // Active set: pinned at a bound with the gradient pushing outward.
        let free: Vec<bool> = (0..n)
            .map(|i| {
                let at_lower = x[i] <= problem.lower[i] && g[i] > 0.0;
                let at_upper = x[i] >= problem.upper[i] && g[i] < 0.0;
                !(at_lower || at_upper || problem.lower[i] == problem.upper[i])
            })
            .collect();

        let mut step = None;
        for attempt in 0..2 {
            if attempt == 1 {
                if pairs.is_empty() {
                    break;
                }
                pairs.clear();
            }
            let d = search_direction(&g, &free, &pairs);
            let slope = dot(&g, &d);
            let d = if slope < 0.0 {
                d
            } else {
                pairs.clear();
                steepest(&g, &free)
            };
            let t0 = if pairs.is_empty() {
                let gmax = d.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                (1.0 / gmax).min(1.0)
            } else {
                1.0
            };
            if let Some(found) = line_search(problem, &x, f, &g, &d, t0) {
                step = Some(found);
                break;
            }
        }
        let Some((x_new, f_new)) = step else {
            return Ok(done(x, f, iterations, Termination::LineSearchFailed, trace));
        };

        let g_new = problem.gradient(&x_new);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&y, &y).max(f64::MIN_POSITIVE) && sy.is_finite() {
            if pairs.len() == problem.history {
                pairs.remove(0);
            }
            pairs.push(Pair { s, y, rho: 1.0 / sy });
        }

        let reduction = f - f_new;
        iterations += 1;
        x = x_new;
        g = g_new;
        let scale = f.abs().max(f_new.abs()).max(1.0);
        f = f_new;
        trace.push(f);
        if reduction <= problem.ftol * scale {
            return Ok(done(x, f, iterations, Termination::RelativeReduction, trace));
        }
    }
}

fn steepest(g: &[f64], free: &[bool]) -> Vec<f64> {
    g.iter()
        .zip(free)
        .map(|(gi, &f)| if f { -gi } else { 0.0 })
        .collect()
}

/// Two-loop recursion restricted to the free variables.
fn search_direction(g: &[f64], free: &[bool], pairs: &[Pair]) -> Vec<f64> {
    let mut q: Vec<f64> = g
        .iter()
        .zip(free)
        .map(|(gi, &f)| if f { *gi } else { 0.0 })
        .collect();
    if pairs.is_empty() {
        return q.into_iter().map(|v| -v).collect();
    }
    let mut alphas = vec![0.0; pairs.len()];
    for (i, p) in pairs.iter().enumerate().rev() {
        let rho = 1.0 / dot_masked(&p.s, &p.y, free);
        let rho = if rho.is_finite() && rho > 0.0 { rho } else { p.rho };
        let a = rho * dot_masked(&p.s, &q, free);
        alphas[i] = a;
        for ((qj, yj), &fj) in q.iter_mut().zip(&p.y).zip(free) {
            if fj {
                *qj -= a * yj;
            }
        }
    }
    let last = pairs.last().unwrap();
    let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
    let gamma = if gamma.is_finite() && gamma > 0.0 { gamma } else { 1.0 };
    for v in q.iter_mut() {
        *v *= gamma;
    }
    for (i, p) in pairs.iter().enumerate() {
        let rho = 1.0 / dot_masked(&p.s, &p.y, free);
        let rho = if rho.is_finite() && rho > 0.0 { rho } else { p.rho };
        let b = rho * dot_masked(&p.y, &q, free);
        for ((qj, sj), &fj) in q.iter_mut().zip(&p.s).zip(free) {
            if fj {
                *qj += (alphas[i] - b) * sj;
            }
        }
    }
    q.iter()
        .zip(free)
        .map(|(v, &f)| if f { -v } else { 0.0 })
        .collect()
}

/// Projected backtracking with the Armijo condition along the projection arc.
fn line_search(
    problem: &BoundedProblem<'_>,
    x: &[f64],
    f: f64,
    g: &[f64],
    d: &[f64],
    t0: f64,
) -> Option<(Vec<f64>, f64)> {
    const C1: f64 = 1e-4;
    let mut t = t0;
    for _ in 0..60 {
        let mut trial: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + t * di).collect();
        problem.clip(&mut trial);
        if trial.as_slice() == x {
            return None;
        }
        let ft = problem.value(&trial);
        let decrease: f64 = g
            .iter()
            .zip(trial.iter().zip(x))
            .map(|(gi, (a, b))| gi * (a - b))
            .sum();
        if ft.is_finite() && ft <= f + C1 * decrease && ft <= f {
            return Some((trial, ft));
        }
        t *= 0.5;
    }
    None
}

/// Central-difference gradient, component-wise.
pub fn finite_diff_grad(
    objective: impl Fn(&[f64]) -> f64,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>, OptimError> {
    if h.is_nan() || h <= 0.0 || x.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::InvalidOption("finite difference needs finite x and h > 0".into()));
    }
    let mut xp = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = objective(&xp);
        xp[i] = x[i] - h;
        let fm = objective(&xp);
        xp[i] = x[i];
        let gi = (fp - fm) / (2.0 * h);
        if !gi.is_finite() {
            return Err(OptimError::NonFiniteStart);
        }
        out.push(gi);
    }
    Ok(out)
}

/// Central differences that fall back to one-sided steps at the box edges so
/// the objective is never evaluated outside the bounds.
fn bounded_fd_grad(
    objective: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    h: f64,
    lower: &[f64],
    upper: &[f64],
) -> Vec<f64> {
    let mut xp = x.to_vec();
    let f0 = objective(x);
    (0..x.len())
        .map(|i| {
            let hi = h * x[i].abs().max(1.0);
            let up = x[i] + hi <= upper[i];
            let down = x[i] - hi >= lower[i];
            let g = match (up, down) {
                (true, true) => {
                    xp[i] = x[i] + hi;
                    let fp = objective(&xp);
                    xp[i] = x[i] - hi;
                    let fm = objective(&xp);
                    (fp - fm) / (2.0 * hi)
                }
                (true, false) => {
                    xp[i] = x[i] + hi;
                    (objective(&xp) - f0) / hi
                }
                (false, true) => {
                    xp[i] = x[i] - hi;
                    (f0 - objective(&xp)) / hi
                }
                (false, false) => 0.0,
            };
            xp[i] = x[i];
            g
        })
        .collect()
}

/// Exhaustive grid search used as a deterministic warm start. Grid points run
/// in lexicographic order with the first coordinate slowest; the first of
/// several equal minima wins.
pub fn grid_refine(
    objective: impl Fn(&[f64]) -> f64,
    lower: &[f64],
    upper: &[f64],
    points_per_dim: usize,
) -> Result<Vec<f64>, OptimError> {
    let dim = lower.len();
    if dim == 0 || upper.len() != dim {
        return Err(OptimError::InvalidBounds(dim));
    }
    if dim > GRID_MAX_DIM {
        return Err(OptimError::GridTooLarge {
            dim,
            max: GRID_MAX_DIM,
        });
    }
    if points_per_dim < 2 {
        return Err(OptimError::GridTooCoarse);
    }
    for i in 0..dim {
        if !(lower[i].is_finite() && upper[i].is_finite() && lower[i] <= upper[i]) {
            return Err(OptimError::InvalidBounds(i));
        }
    }
    let coord = |i: usize, j: usize| {
        lower[i] + (upper[i] - lower[i]) * j as f64 / (points_per_dim - 1) as f64
    };
    let total = points_per_dim.pow(dim as u32);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut point = vec![0.0; dim];
    for idx in 0..total {
        let mut rem = idx;
        for i in (0..dim).rev() {
            point[i] = coord(i, rem % points_per_dim);
            rem /= points_per_dim;
        }
        let v = objective(&point);
        if !v.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, point.clone()));
        }
    }
    best.map(|(_, p)| p).ok_or(OptimError::NonFiniteStart)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    fn rosenbrock_grad(x: &[f64]) -> Vec<f64> {
        vec![
            -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
            200.0 * (x[1] - x[0] * x[0]),
        ]
    }

    #[test]
    fn bound_active_optimum() {
        let p = BoundedProblem::new(|x: &[f64]| (x[0] - 3.0).powi(2), vec![0.0], vec![2.0])
            .unwrap()
            .with_gradient(|x: &[f64]| vec![2.0 * (x[0] - 3.0)]);
        let m = minimize_bounded(&p, &[0.5]).unwrap();
        assert_eq!(m.x, vec![2.0]);
        assert!(m.converged);
    }

    #[test]
    fn rosenbrock_reaches_one_one() {
        let p = BoundedProblem::new(rosenbrock, vec![-5.0; 2], vec![5.0; 2])
            .unwrap()
            .with_gradient(rosenbrock_grad);
        let m = minimize_bounded(&p, &[-1.2, 1.0]).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6, "{:?}", m);
    }

    #[test]
    fn trace_is_monotone_and_iterates_feasible() {
        let p = BoundedProblem::new(rosenbrock, vec![-0.5, -0.5], vec![0.8, 2.0]).unwrap();
        let m = minimize_bounded(&p, &[-0.4, 1.5]).unwrap();
        assert!(m.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(m.x[0] <= 0.8 && m.x[0] >= -0.5);
        // optimum on the face x0 = 0.8
        assert!((m.x[0] - 0.8).abs() < 1e-9);
        assert!((m.x[1] - 0.64).abs() < 1e-4);
    }

    #[test]
    fn start_outside_box_is_clipped_and_flagged() {
        let p = BoundedProblem::new(|x: &[f64]| x[0] * x[0], vec![1.0], vec![2.0]).unwrap();
        let m = minimize_bounded(&p, &[10.0]).unwrap();
        assert!(m.start_clipped);
        assert!((m.x[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_start_and_bounds_are_errors() {
        let p = BoundedProblem::new(|_: &[f64]| f64::NAN, vec![0.0], vec![1.0]).unwrap();
        assert!(matches!(minimize_bounded(&p, &[0.5]), Err(OptimError::NonFiniteStart)));
        assert!(BoundedProblem::new(|_: &[f64]| 0.0, vec![0.0], vec![f64::INFINITY]).is_err());
        assert!(BoundedProblem::new(|_: &[f64]| 0.0, vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn nan_region_returns_last_feasible_iterate() {
        // objective undefined beyond x = 1; optimum of the defined part at 1
        let p = BoundedProblem::new(
            |x: &[f64]| if x[0] > 1.0 { f64::NAN } else { (x[0] - 2.0).powi(2) },
            vec![0.0],
            vec![3.0],
        )
        .unwrap()
        .with_gradient(|x: &[f64]| vec![2.0 * (x[0] - 2.0)]);
        let m = minimize_bounded(&p, &[0.0]).unwrap();
        assert!(m.x[0] <= 1.0);
        assert!(m.f.is_finite());
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_diff_grad(|x: &[f64]| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|x: &[f64]| 2.0 * x[0] - 0.5 * x[1] + 4.0, &[1.0, -7.0], 1e-5)
            .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] + 0.5).abs() < 1e-9);
        assert!(finite_diff_grad(|_: &[f64]| f64::NAN, &[0.0], 1e-5).is_err());
    }

    #[test]
    fn grid_examples() {
        let x = grid_refine(|x: &[f64]| (x[0] - 0.37).powi(2), &[0.0], &[1.0], 11).unwrap();
        assert!((x[0] - 0.37).abs() <= 0.1);
        let x = grid_refine(|_: &[f64]| 1.0, &[0.0, -1.0], &[1.0, 1.0], 3).unwrap();
        assert_eq!(x, vec![0.0, -1.0]);
        assert!(matches!(
            grid_refine(|_: &[f64]| 1.0, &[0.0; 5], &[1.0; 5], 2),
            Err(OptimError::GridTooLarge { .. })
        ));
        assert!(matches!(
            grid_refine(|_: &[f64]| 1.0, &[0.0], &[1.0], 1),
            Err(OptimError::GridTooCoarse)
        ));
    }
}
