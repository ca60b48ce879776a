//! BFGS with a backtracking Armijo line search.

/// Outcome of a minimization.
#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl Minimum {
    pub fn grad_norm(&self) -> f64 {
        max_abs(&self.gradient)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Converged when the gradient max-norm falls below this.
    pub grad_tol: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            armijo: 1e-4,
            max_backtracks: 60,
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f`, where `f(x)` returns the value and gradient.
///
/// The inverse-Hessian approximation starts as the identity and is rescaled by
/// `s.y / y.y` after the first accepted step. Updates with non-positive
/// curvature are skipped.
pub fn bfgs<F>(f: F, x0: Vec<f64>, opts: BfgsOptions) -> Minimum
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    bfgs_preconditioned(f, x0, None, opts)
}

/// [`bfgs`] starting from a given row-major inverse-Hessian approximation
/// instead of the identity. The first step is then taken at full length.
pub fn bfgs_preconditioned<F>(mut f: F, x0: Vec<f64>, h0: Option<Vec<f64>>, opts: BfgsOptions) -> Minimum
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut first = h0.is_none();
    let mut h = h0.unwrap_or_else(|| {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
        h
    });
    assert_eq!(h.len(), n * n, "preconditioner shape");
    let mut iterations = 0;

    while iterations < opts.max_iter {
        if max_abs(&g) < opts.grad_tol {
            return Minimum {
                x,
                value: fx,
                gradient: g,
                iterations,
                converged: true,
            };
        }
        iterations += 1;

        let mut d: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            // Lost descent; restart from steepest descent.
            h.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                h[i * n + i] = 1.0;
            }
            first = true;
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        if first {
            // Keep the first trial step modest.
            let norm = max_abs(&d);
            if norm > 1.0 {
                step = 1.0 / norm;
            }
        }
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let (fn_, gn) = f(&xn);
            let sufficient = fn_ <= fx + opts.armijo * step * slope;
            // Near the optimum the decrease drowns in rounding; accept steps that
            // keep the value flat while shrinking the gradient.
            let flat = fn_ <= fx + 1e-12 * fx.abs().max(1.0) && max_abs(&gn) < max_abs(&g);
            if fn_.is_finite() && (sufficient || flat) {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            break;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if first {
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= scale);
                first = false;
            }
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], &y)).collect();
            let yhy = dot(&y, &hy);
            let coef = (1.0 + rho * yhy) * rho;
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
        x = xn;
        fx = fn_;
        g = gn;
    }

    let converged = max_abs(&g) < opts.grad_tol;
    Minimum {
        x,
        value: fx,
        gradient: g,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            (v, g)
        };
        let m = bfgs(f, vec![-1.2, 1.0], BfgsOptions::default());
        assert!(m.converged, "{m:?}");
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ill_conditioned_quadratic() {
        let scales: Vec<f64> = (0..40).map(|i| 10f64.powf(i as f64 / 13.0)).collect();
        let f = |x: &[f64]| {
            let v = x.iter().zip(&scales).map(|(xi, s)| 0.5 * s * (xi - 1.0).powi(2)).sum();
            let g = x.iter().zip(&scales).map(|(xi, s)| s * (xi - 1.0)).collect();
            (v, g)
        };
        let m = bfgs(f, vec![0.0; 40], BfgsOptions::default());
        assert!(m.converged);
        assert!(m.x.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn exact_preconditioner_converges_in_one_step() {
        let scales = [1.0, 1e4, 1e-3];
        let f = |x: &[f64]| {
            let v = x.iter().zip(&scales).map(|(xi, s)| 0.5 * s * (xi - 2.0).powi(2)).sum();
            let g = x.iter().zip(&scales).map(|(xi, s)| s * (xi - 2.0)).collect();
            (v, g)
        };
        let mut h0 = vec![0.0; 9];
        for i in 0..3 {
            h0[i * 3 + i] = 1.0 / scales[i];
        }
        let m = bfgs_preconditioned(f, vec![0.0; 3], Some(h0), BfgsOptions::default());
        assert!(m.converged);
        assert!(m.iterations <= 2, "{}", m.iterations);
    }

    #[test]
    fn reports_non_convergence() {
        // Unbounded below along x.
        let f = |x: &[f64]| (-x[0], vec![-1.0]);
        let m = bfgs(f, vec![0.0], BfgsOptions { max_iter: 20, ..Default::default() });
        assert!(!m.converged);
        assert_eq!(m.iterations, 20);
    }
}
