//! Quasi-Newton minimization with an inverse-Hessian BFGS update and a
//! backtracking sufficient-decrease line search.

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the max-norm of the gradient falls below this.
    pub grad_tol: f64,
    /// Armijo constant.
    pub c1: f64,
    pub max_backtracks: usize,
    /// Consecutive iterations with relative decrease below `1e-15` that
    /// count as a stall.
    pub stall_iters: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 500,
            grad_tol: 1e-10,
            c1: 1e-4,
            max_backtracks: 60,
            stall_iters: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    Stalled,
    LineSearchFailed,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

impl BfgsResult {
    pub fn converged(&self) -> bool {
        matches!(self.termination, Termination::GradientTolerance | Termination::Stalled)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Minimizes `f`, which returns the value and gradient at a point.
/// Non-finite values are treated as `+inf` by the line search.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> BfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    // row-major inverse Hessian approximation
    let mut hinv = vec![0.0; n * n];
    for i in 0..n {
        hinv[i * n + i] = 1.0;
    }
    let mut scaled = false;
    let mut stall = 0;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    for it in 0..opts.max_iter {
        iterations = it;
        if max_norm(&g) < opts.grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        let mut dir: Vec<f64> = (0..n).map(|i| -dot(&hinv[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            // lost descent: reset to steepest descent
            for v in hinv.iter_mut() {
                *v = 0.0;
            }
            for i in 0..n {
                hinv[i * n + i] = 1.0;
            }
            scaled = false;
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (fn_, gn) = f(&xn);
            if fn_.is_finite() && fn_ <= fx + opts.c1 * step * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            termination = Termination::LineSearchFailed;
            break;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let decrease = fx - fn_;
        x = xn;
        g = gn;
        let prev = fx;
        fx = fn_;

        if decrease <= 1e-15 * prev.abs().max(1e-300) {
            stall += 1;
            if stall >= opts.stall_iters {
                termination = Termination::Stalled;
                iterations = it + 1;
                break;
            }
        } else {
            stall = 0;
        }

        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if !scaled {
                let gamma = sy / dot(&y, &y);
                for i in 0..n {
                    for j in 0..n {
                        hinv[i * n + j] = if i == j { gamma } else { 0.0 };
                    }
                }
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| dot(&hinv[i * n..(i + 1) * n], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    hinv[i * n + j] +=
                        -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        iterations = it + 1;
    }
    BfgsResult {
        x,
        f: fx,
        grad: g,
        iterations,
        termination,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        (f, g)
    }

    #[test]
    fn solves_rosenbrock() {
        let r = minimize(rosenbrock, &[-1.2, 1.0], &BfgsOptions::default());
        assert!(r.converged(), "{:?}", r.termination);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r.x);
    }

    #[test]
    fn quadratic_in_few_iterations() {
        let diag = [1.0, 10.0, 100.0, 1000.0];
        let f = |x: &[f64]| {
            let v = x.iter().zip(&diag).map(|(a, d)| 0.5 * d * a * a).sum();
            (v, x.iter().zip(&diag).map(|(a, d)| d * a).collect())
        };
        let r = minimize(f, &[1.0; 4], &BfgsOptions::default());
        assert!(r.f < 1e-18);
        assert!(r.iterations < 60, "{}", r.iterations);
    }

    #[test]
    fn iteration_cap_reported() {
        let opts = BfgsOptions {
            max_iter: 3,
            ..Default::default()
        };
        let r = minimize(rosenbrock, &[-1.2, 1.0], &opts);
        assert_eq!(r.termination, Termination::MaxIterations);
        assert_eq!(r.iterations, 3);
        assert!(!r.converged());
    }
}
