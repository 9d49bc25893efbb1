//! Small dense optimizers: box-constrained BFGS and Levenberg-Marquardt.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the accepted step is below this in every coordinate.
    pub x_tol: f64,
    pub armijo: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 100,
            x_tol: 1e-10,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn clamp(x: &DVector<f64>, lo: &[f64], hi: &[f64]) -> DVector<f64> {
    DVector::from_iterator(x.len(), x.iter().enumerate().map(|(i, v)| v.clamp(lo[i], hi[i])))
}

/// Minimizes `f` over the box `[lo, hi]` with a projected BFGS iteration.
/// `f` returns the value and its gradient.
pub fn bfgs_box<F>(x0: &DVector<f64>, lo: &[f64], hi: &[f64], opts: BfgsOptions, mut f: F) -> OptimResult
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = clamp(x0, lo, hi);
    let (mut fx, mut g) = f(&x);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        // free variables: not pinned at a bound with the gradient pushing outward
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)))
            .collect();
        let gf = DVector::from_iterator(n, (0..n).map(|i| if free[i] { g[i] } else { 0.0 }));
        if gf.amax() == 0.0 {
            converged = true;
            break;
        }
        let mut p = -(&h * &gf);
        for i in 0..n {
            if !free[i] {
                p[i] = 0.0;
            }
        }
        if p.dot(&gf) >= 0.0 {
            h = DMatrix::identity(n, n);
            p = -gf.clone();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xt = clamp(&(&x + &p * step), lo, hi);
            let (ft, gt) = f(&xt);
            if ft.is_finite() && ft <= fx + opts.armijo * g.dot(&(&xt - &x)) {
                accepted = Some((xt, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xt, ft, gt)) = accepted else {
            converged = true;
            break;
        };
        let s = &xt - &x;
        let y = &gt - &g;
        let small = s.amax() < opts.x_tol;
        x = xt;
        fx = ft;
        g = gt;
        let sy = s.dot(&y);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        if small {
            converged = true;
            break;
        }
    }
    OptimResult {
        x,
        value: fx,
        iterations,
        converged,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Relative step tolerance.
    pub x_tol: f64,
    /// Relative cost-decrease tolerance.
    pub f_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iter: 200,
            x_tol: 1e-12,
            f_tol: 1e-15,
        }
    }
}

/// Levenberg-Marquardt on `0.5 |r(x)|^2`; `f` returns residuals and Jacobian.
/// Only cost-decreasing steps are accepted, so the returned iterate is the best seen.
pub fn levenberg_marquardt<F>(x0: &DVector<f64>, opts: LmOptions, mut f: F) -> OptimResult
where
    F: FnMut(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    let n = x0.len();
    let mut x = x0.clone();
    let (mut r, mut jac) = f(&x);
    let mut cost = 0.5 * r.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = cost == 0.0;
    let mut iterations = 0;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &r;
        if grad.amax() == 0.0 {
            converged = true;
            break;
        }
        let mut improved = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-300);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = -chol.solve(&grad);
            let xt = &x + &delta;
            let (rt, jt) = f(&xt);
            let ct = 0.5 * rt.norm_squared();
            if ct.is_finite() && ct < cost {
                let rel_step = delta.norm() / (x.norm() + 1e-12);
                let rel_cost = (cost - ct) / cost.max(1e-300);
                x = xt;
                r = rt;
                jac = jt;
                cost = ct;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                if rel_step < opts.x_tol || rel_cost < opts.f_tol || cost == 0.0 {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !improved {
            // no decreasing step exists at machine precision: a stationary point
            converged = true;
        }
    }
    OptimResult {
        x,
        value: cost,
        iterations,
        converged,
    }
}
