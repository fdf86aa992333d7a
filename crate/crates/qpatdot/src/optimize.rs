//! BFGS quasi-Newton minimizer with a strong-Wolfe line search.
//!
//! The driver works on a flat coefficient vector and calls back for value
//! and gradient together (the line search needs directional derivatives at
//! every trial point). A dense inverse-Hessian is kept for desk-scale
//! problems and a limited-memory two-loop recursion takes over above a size
//! threshold. Positivity of physical coefficients is enforced by flooring
//! the trial point before each callback evaluation, so the objective is
//! never probed at inadmissible points.

use crate::error::{Error, Result};

/// Stopping rules, line-search constants, and positivity floors.
#[derive(Debug, Clone)]
pub struct OptimizerSettings {
    /// First-order optimality tolerance on `‖g‖∞` (default 1e-9).
    pub grad_tol: f64,
    /// Iteration cap (default 200).
    pub max_iter: usize,
    /// Sufficient-decrease constant `c₁` (default 1e-4).
    pub sufficient_decrease: f64,
    /// Curvature constant `c₂` (default 0.9).
    pub curvature: f64,
    /// Componentwise lower bounds applied to trial points; empty disables.
    pub floors: Vec<f64>,
    /// Dense inverse-Hessian below this dimension, limited-memory above.
    pub dense_limit: usize,
    /// History pairs kept in limited-memory mode.
    pub memory: usize,
    /// Initial inverse-Hessian diagonal (empty means identity).
    pub initial_scaling: Vec<f64>,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            grad_tol: 1e-9,
            max_iter: 200,
            sufficient_decrease: 1e-4,
            curvature: 0.9,
            floors: Vec::new(),
            dense_limit: 4000,
            memory: 20,
            initial_scaling: Vec::new(),
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidArgument("grad_tol must be positive".into()));
        }
        if !(0.0 < self.sufficient_decrease
            && self.sufficient_decrease < self.curvature
            && self.curvature < 1.0)
        {
            return Err(Error::InvalidArgument(
                "need 0 < sufficient_decrease < curvature < 1".into(),
            ));
        }
        Ok(())
    }
}

/// Why the optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    LineSearchFailed,
    StepStalled,
}

impl StopReason {
    pub fn label(&self) -> &'static str {
        match self {
            StopReason::GradientTolerance => "grad-tol",
            StopReason::MaxIterations => "max-iter",
            StopReason::LineSearchFailed => "line-search-failed",
            StopReason::StepStalled => "step-stalled",
        }
    }
}

/// One accepted iterate.
#[derive(Debug, Clone)]
pub struct HistoryRow {
    pub iter: usize,
    pub value: f64,
    pub grad_inf_norm: f64,
    pub step_length: f64,
}

/// Minimization outcome: best iterate, its value/gradient, and the history.
#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub stop: StopReason,
    pub history: Vec<HistoryRow>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project(x: &mut [f64], floors: &[f64]) {
    if floors.is_empty() {
        return;
    }
    for (v, f) in x.iter_mut().zip(floors) {
        if *v < *f {
            *v = *f;
        }
    }
}

/// Componentwise max with per-coefficient floors (identity when empty).
pub fn project_positive(x: &[f64], floors: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    project(&mut out, floors);
    out
}

enum InverseHessian {
    Dense(Vec<f64>),
    Limited {
        s: std::collections::VecDeque<Vec<f64>>,
        y: std::collections::VecDeque<Vec<f64>>,
        rho: std::collections::VecDeque<f64>,
        gamma: f64,
        memory: usize,
    },
}

impl InverseHessian {
    fn new(n: usize, settings: &OptimizerSettings) -> Self {
        if n <= settings.dense_limit {
            let mut h = vec![0.0; n * n];
            for i in 0..n {
                h[i * n + i] = if settings.initial_scaling.is_empty() {
                    1.0
                } else {
                    settings.initial_scaling[i]
                };
            }
            InverseHessian::Dense(h)
        } else {
            InverseHessian::Limited {
                s: Default::default(),
                y: Default::default(),
                rho: Default::default(),
                gamma: 1.0,
                memory: settings.memory,
            }
        }
    }

    fn direction(&self, g: &[f64], scaling: &[f64]) -> Vec<f64> {
        let n = g.len();
        match self {
            InverseHessian::Dense(h) => {
                let mut d = vec![0.0; n];
                for i in 0..n {
                    let row = &h[i * n..(i + 1) * n];
                    d[i] = -dot(row, g);
                }
                d
            }
            InverseHessian::Limited { s, y, rho, gamma, .. } => {
                // Two-loop recursion.
                let mut q = g.to_vec();
                let m = s.len();
                let mut alpha = vec![0.0; m];
                for k in (0..m).rev() {
                    alpha[k] = rho[k] * dot(&s[k], &q);
                    for i in 0..n {
                        q[i] -= alpha[k] * y[k][i];
                    }
                }
                for i in 0..n {
                    let scale = if scaling.is_empty() { 1.0 } else { scaling[i] };
                    q[i] *= gamma * scale;
                }
                for k in 0..m {
                    let beta = rho[k] * dot(&y[k], &q);
                    for i in 0..n {
                        q[i] += (alpha[k] - beta) * s[k][i];
                    }
                }
                q.iter_mut().for_each(|v| *v = -*v);
                q
            }
        }
    }

    /// Apply the BFGS update with the accepted pair; skipped when the
    /// curvature condition `sᵀy > 0` fails.
    fn update(&mut self, s_vec: &[f64], y_vec: &[f64]) -> bool {
        let sy = dot(s_vec, y_vec);
        let sn = inf_norm(s_vec);
        let yn = inf_norm(y_vec);
        if sy <= 1e-14 * sn * yn || sy == 0.0 {
            return false;
        }
        match self {
            InverseHessian::Dense(h) => {
                let n = s_vec.len();
                let rho = 1.0 / sy;
                // u = H·y (H symmetric).
                let mut u = vec![0.0; n];
                for i in 0..n {
                    u[i] = dot(&h[i * n..(i + 1) * n], y_vec);
                }
                let yhy = dot(y_vec, &u);
                let c = rho * rho * yhy + rho;
                for i in 0..n {
                    let si = s_vec[i];
                    let ui = u[i];
                    let row = &mut h[i * n..(i + 1) * n];
                    for j in 0..n {
                        row[j] += -rho * (si * u[j] + ui * s_vec[j]) + c * si * s_vec[j];
                    }
                }
                true
            }
            InverseHessian::Limited {
                s, y, rho, gamma, memory,
            } => {
                if s.len() == *memory {
                    s.pop_front();
                    y.pop_front();
                    rho.pop_front();
                }
                *gamma = sy / dot(y_vec, y_vec);
                s.push_back(s_vec.to_vec());
                y.push_back(y_vec.to_vec());
                rho.push_back(1.0 / sy);
                true
            }
        }
    }
}

struct LinePoint {
    alpha: f64,
    x: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
    slope: f64,
}

/// Minimize `f` from `x0` with BFGS and a strong-Wolfe line search.
///
/// The callback returns value and gradient together. Trial points are
/// floored before evaluation, so `f` only sees admissible iterates. The
/// returned history covers accepted iterates only and is non-increasing in
/// the objective.
pub fn bfgs_minimize<F>(f: F, x0: &[f64], settings: &OptimizerSettings) -> Result<OptimOutcome>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    settings.validate()?;
    let n = x0.len();
    let mut x = project_positive(x0, &settings.floors);
    let (mut value, mut grad) = f(&x)?;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidArgument(
            "objective or gradient not finite at the initial point".into(),
        ));
    }

    let mut hessian = InverseHessian::new(n, settings);
    let mut history = vec![HistoryRow {
        iter: 0,
        value,
        grad_inf_norm: inf_norm(&grad),
        step_length: 0.0,
    }];

    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;

    for iter in 1..=settings.max_iter {
        if inf_norm(&grad) <= settings.grad_tol {
            stop = StopReason::GradientTolerance;
            break;
        }
        let mut direction = hessian.direction(&grad, &settings.initial_scaling);
        let mut slope0 = dot(&grad, &direction);
        if !(slope0 < 0.0) {
            // Fall back to steepest descent if the model direction fails.
            direction = grad.iter().map(|g| -g).collect();
            slope0 = dot(&grad, &direction);
            if !(slope0 < 0.0) {
                stop = StopReason::GradientTolerance;
                break;
            }
        }

        let probe = |alpha: f64| -> Result<LinePoint> {
            let mut xt: Vec<f64> = x
                .iter()
                .zip(&direction)
                .map(|(xi, di)| xi + alpha * di)
                .collect();
            project(&mut xt, &settings.floors);
            let (v, g) = f(&xt)?;
            let slope = dot(&g, &direction);
            Ok(LinePoint {
                alpha,
                x: xt,
                value: v,
                grad: g,
                slope,
            })
        };

        let accepted = strong_wolfe(&probe, value, slope0, settings)?;
        let Some(point) = accepted else {
            stop = StopReason::LineSearchFailed;
            break;
        };

        let s_vec: Vec<f64> = point.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        if inf_norm(&s_vec) == 0.0 {
            stop = StopReason::StepStalled;
            break;
        }
        let y_vec: Vec<f64> = point.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        hessian.update(&s_vec, &y_vec);

        x = point.x;
        value = point.value;
        grad = point.grad;
        iterations = iter;
        history.push(HistoryRow {
            iter,
            value,
            grad_inf_norm: inf_norm(&grad),
            step_length: point.alpha,
        });
        if iter == settings.max_iter {
            stop = StopReason::MaxIterations;
        }
    }
    if iterations < settings.max_iter && stop == StopReason::MaxIterations {
        // Left the loop through the gradient check before the first step.
        stop = StopReason::GradientTolerance;
    }

    Ok(OptimOutcome {
        x,
        value,
        grad_inf_norm: inf_norm(&grad),
        iterations,
        stop,
        history,
    })
}

/// Strong-Wolfe search (bracket then zoom with cubic interpolation).
/// Returns `None` when no acceptable step exists within the attempt budget.
fn strong_wolfe<P>(
    probe: &P,
    f0: f64,
    slope0: f64,
    settings: &OptimizerSettings,
) -> Result<Option<LinePoint>>
where
    P: Fn(f64) -> Result<LinePoint>,
{
    let c1 = settings.sufficient_decrease;
    let c2 = settings.curvature;
    let alpha_max = 1e4;
    let mut alpha_prev = 0.0;
    let mut value_prev = f0;
    let mut slope_prev = slope0;
    let mut point_prev: Option<LinePoint> = None;
    let mut alpha = 1.0;

    for i in 0..20 {
        let point = probe(alpha)?;
        if !point.value.is_finite() {
            // Back off from non-finite territory.
            alpha *= 0.1;
            continue;
        }
        if point.value > f0 + c1 * point.alpha * slope0 || (i > 0 && point.value >= value_prev) {
            return zoom(
                probe,
                f0,
                slope0,
                (alpha_prev, value_prev, slope_prev),
                (point.alpha, point.value, point.slope),
                point_prev,
                Some(point),
                settings,
            );
        }
        if point.slope.abs() <= -c2 * slope0 {
            return Ok(Some(point));
        }
        if point.slope >= 0.0 {
            return zoom(
                probe,
                f0,
                slope0,
                (point.alpha, point.value, point.slope),
                (alpha_prev, value_prev, slope_prev),
                Some(point),
                point_prev,
                settings,
            );
        }
        alpha_prev = point.alpha;
        value_prev = point.value;
        slope_prev = point.slope;
        point_prev = Some(point);
        alpha = (2.0 * alpha).min(alpha_max);
        if alpha_prev >= alpha_max {
            break;
        }
    }
    Ok(point_prev.filter(|p| p.value < f0))
}

/// Cubic-Hermite minimizer of the interpolant on `[a, b]`; exact for
/// quadratic objectives, with a bisection safeguard.
fn cubic_minimizer(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc >= 0.0 {
        let d2 = disc.sqrt() * (b - a).signum();
        let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
        let lo = a.min(b);
        let hi = a.max(b);
        let margin = 0.05 * (hi - lo);
        if t.is_finite() && t > lo + margin && t < hi - margin {
            return t;
        }
    }
    0.5 * (a + b)
}

#[allow(clippy::too_many_arguments)]
fn zoom<P>(
    probe: &P,
    f0: f64,
    slope0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    mut lo_point: Option<LinePoint>,
    mut hi_point: Option<LinePoint>,
    settings: &OptimizerSettings,
) -> Result<Option<LinePoint>>
where
    P: Fn(f64) -> Result<LinePoint>,
{
    let c1 = settings.sufficient_decrease;
    let c2 = settings.curvature;
    for _ in 0..30 {
        if (hi.0 - lo.0).abs() < 1e-16 * (1.0 + lo.0.abs()) {
            break;
        }
        let alpha = cubic_minimizer(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2);
        let point = probe(alpha)?;
        if point.value > f0 + c1 * point.alpha * slope0 || point.value >= lo.1 {
            hi = (point.alpha, point.value, point.slope);
            hi_point = Some(point);
        } else {
            if point.slope.abs() <= -c2 * slope0 {
                return Ok(Some(point));
            }
            if point.slope * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
                hi_point = lo_point.take();
            }
            lo = (point.alpha, point.value, point.slope);
            lo_point = Some(point);
        }
    }
    let _ = hi_point;
    // Accept the best sufficient-decrease point even if the curvature
    // condition never latched; refuse only if no decrease was found.
    Ok(lo_point.filter(|p| p.value < f0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings() -> OptimizerSettings {
        OptimizerSettings::default()
    }

    #[test]
    fn quadratic_bowl_converges_in_two_iterations() {
        let a = [1.0, -2.0, 3.0, 0.5];
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v = x
                .iter()
                .zip(&a)
                .map(|(xi, ai)| 0.5 * (xi - ai) * (xi - ai))
                .sum();
            let g = x.iter().zip(&a).map(|(xi, ai)| xi - ai).collect();
            Ok((v, g))
        };
        let out = bfgs_minimize(f, &[0.0; 4], &settings()).unwrap();
        assert!(out.iterations <= 2, "{} iterations", out.iterations);
        assert!(out.grad_inf_norm <= 1e-12);
        for (xi, ai) in out.x.iter().zip(&a) {
            assert!((xi - ai).abs() < 1e-12);
        }
    }

    #[test]
    fn already_optimal_returns_immediately() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((0.5 * x[0] * x[0], vec![x[0]]))
        };
        let out = bfgs_minimize(f, &[0.0], &settings()).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.stop, StopReason::GradientTolerance);
    }

    #[test]
    fn rosenbrock_reaches_the_global_minimum() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (1.0, 100.0);
            let v = (a - x[0]).powi(2) + b * (x[1] - x[0] * x[0]).powi(2);
            let g = vec![
                -2.0 * (a - x[0]) - 4.0 * b * (x[1] - x[0] * x[0]) * x[0],
                2.0 * b * (x[1] - x[0] * x[0]),
            ];
            Ok((v, g))
        };
        let mut s = settings();
        s.grad_tol = 1e-10;
        let out = bfgs_minimize(f, &[-1.2, 1.0], &s).unwrap();
        assert!(out.iterations <= 200);
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn spd_quadratic_terminates_within_dimension_plus_one() {
        // Strictly convex quadratic with near-exact line searches: BFGS builds
        // conjugate directions and finishes in at most d+1 iterations.
        let d = 6;
        // SPD matrix A = L·Lᵀ from a fixed lower-triangular seed.
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                l[i * d + j] = if i == j { 1.0 + i as f64 * 0.3 } else { 0.1 * (i + j) as f64 };
            }
        }
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += l[i * d + k] * l[j * d + k];
                }
                a[i * d + j] = acc;
            }
        }
        let f = move |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut g = vec![0.0; d];
            for i in 0..d {
                g[i] = (0..d).map(|j| a[i * d + j] * x[j]).sum::<f64>() - 1.0;
            }
            // f = ½xᵀAx − 1ᵀx, consistent with g = Ax − 1.
            let v = 0.5 * x.iter().enumerate().map(|(i, xi)| xi * (g[i] + 1.0)).sum::<f64>()
                - x.iter().sum::<f64>();
            Ok((v, g))
        };
        let mut s = settings();
        s.sufficient_decrease = 1e-6;
        s.curvature = 1e-3;
        s.grad_tol = 1e-8;
        let out = bfgs_minimize(f, &[2.0; 6], &s).unwrap();
        assert!(
            out.iterations <= d + 1,
            "took {} iterations on a {d}-dimensional quadratic",
            out.iterations
        );
        assert!(out.grad_inf_norm <= 1e-8);
    }

    #[test]
    fn history_is_monotone_and_deterministic() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v = x[0].powi(4) + (x[1] - 2.0).powi(2) + (x[0] * x[1]).powi(2) * 0.1;
            let g = vec![
                4.0 * x[0].powi(3) + 0.2 * x[0] * x[1] * x[1],
                2.0 * (x[1] - 2.0) + 0.2 * x[0] * x[0] * x[1],
            ];
            Ok((v, g))
        };
        let out1 = bfgs_minimize(f, &[1.5, -1.0], &settings()).unwrap();
        let out2 = bfgs_minimize(f, &[1.5, -1.0], &settings()).unwrap();
        for (a, b) in out1.history.iter().zip(&out2.history) {
            assert_eq!(a.value.to_bits(), b.value.to_bits());
        }
        for w in out1.history.windows(2) {
            assert!(w[1].value <= w[0].value);
        }
    }

    #[test]
    fn floors_project_trial_points() {
        let floors = vec![0.5, 0.5];
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            // Unconstrained minimum at (-1, -1), below the floor.
            let v = 0.5 * ((x[0] + 1.0).powi(2) + (x[1] + 1.0).powi(2));
            Ok((v, vec![x[0] + 1.0, x[1] + 1.0]))
        };
        let mut s = settings();
        s.floors = floors.clone();
        let out = bfgs_minimize(f, &[2.0, 3.0], &s).unwrap();
        assert!(out.x.iter().zip(&floors).all(|(x, f)| x >= f));
        assert_eq!(project_positive(&[1.0, -1.0], &floors), vec![1.0, 0.5]);
        assert_eq!(project_positive(&[0.7, 0.9], &[]), vec![0.7, 0.9]);
        // Zero floors leave nonnegative input untouched.
        assert_eq!(project_positive(&[0.3, 0.0], &[0.0, 0.0]), vec![0.3, 0.0]);
    }

    #[test]
    fn rejects_bad_inputs_and_settings() {
        let f = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((f64::NAN, vec![0.0])) };
        assert!(bfgs_minimize(f, &[1.0], &settings()).is_err());
        let mut s = settings();
        s.curvature = 1e-5; // below sufficient_decrease
        let f2 = |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((x[0] * x[0], vec![2.0 * x[0]])) };
        assert!(bfgs_minimize(f2, &[1.0], &s).is_err());
    }

    #[test]
    fn limited_memory_mode_matches_dense_on_easy_problems() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v: f64 = x
                .iter()
                .enumerate()
                .map(|(i, xi)| 0.5 * (1.0 + i as f64) * xi * xi)
                .sum();
            let g = x
                .iter()
                .enumerate()
                .map(|(i, xi)| (1.0 + i as f64) * xi)
                .collect();
            Ok((v, g))
        };
        let mut s = settings();
        s.dense_limit = 0; // force limited-memory
        s.grad_tol = 1e-10;
        let out = bfgs_minimize(f, &[1.0; 8], &s).unwrap();
        assert!(out.value < 1e-18);
        let s2 = settings();
        let out2 = bfgs_minimize(f, &[1.0; 8], &s2).unwrap();
        assert!(out2.value < 1e-18);
    }
}
