//! Truncated Newton: inexact Newton directions from conjugate gradients on
//! Hessian-vector products, globalized by Armijo backtracking.

use super::oracle::Smooth;
use super::EngineError;

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { grad_tol: 1e-9, max_iter: 200 }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

fn norm_on(v: &[f64], coords: &[usize]) -> f64 {
    coords.iter().map(|&k| v[k] * v[k]).sum::<f64>().sqrt()
}

fn dot_on(a: &[f64], b: &[f64], coords: &[usize]) -> f64 {
    coords.iter().map(|&k| a[k] * b[k]).sum()
}

/// Approximately solves `H d = -g` on `coords`. Stops at relative residual
/// `forcing`, on nonpositive curvature, or after `2 |coords| + 10` steps.
fn cg_direction<F: Smooth>(f: &F, curv: &F::Curvature, g: &[f64], coords: &[usize], forcing: f64) -> Vec<f64> {
    let n = g.len();
    let mut d = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut p = vec![0.0; n];
    for &k in coords {
        r[k] = -g[k];
        p[k] = -g[k];
    }
    let g_norm = norm_on(g, coords);
    let mut rr = dot_on(&r, &r, coords);
    let max_steps = 2 * coords.len() + 10;
    for step in 0..max_steps {
        let hp = f.hess_vec_on(curv, &p, coords);
        let curvature = dot_on(&p, &hp, coords);
        if curvature <= 1e-14 * dot_on(&p, &p, coords) {
            if step == 0 {
                return p;
            }
            break;
        }
        let alpha = rr / curvature;
        for &k in coords {
            d[k] += alpha * p[k];
            r[k] -= alpha * hp[k];
        }
        let rr_next = dot_on(&r, &r, coords);
        if rr_next.sqrt() <= forcing * g_norm {
            break;
        }
        let beta = rr_next / rr;
        for &k in coords {
            p[k] = r[k] + beta * p[k];
        }
        rr = rr_next;
    }
    d
}

/// Minimizes `f` over vectors supported on `coords`, starting from `x0`
/// (entries outside `coords` are forced to zero).
pub fn minimize_on_support<F: Smooth>(
    f: &F,
    x0: &[f64],
    coords: &[usize],
    opts: NewtonOptions,
) -> Result<NewtonResult, EngineError> {
    let n = f.dim();
    let mut x = vec![0.0; n];
    for &k in coords {
        x[k] = x0[k];
    }
    let (mut value, mut g) = f.value_grad_on(&x, coords);
    for iter in 0..=opts.max_iter {
        let grad_norm = norm_on(&g, coords);
        if !value.is_finite() || !grad_norm.is_finite() {
            return Err(EngineError::NlpFailure(format!("non-finite iterate at Newton step {iter}")));
        }
        if grad_norm <= opts.grad_tol {
            return Ok(NewtonResult { x, value, grad_norm, iterations: iter });
        }
        if iter == opts.max_iter {
            break;
        }
        let curv = f.curvature(&x);
        let forcing = grad_norm.min(0.5);
        let mut d = cg_direction(f, &curv, &g, coords, forcing);
        let mut slope = dot_on(&g, &d, coords);
        if slope >= 0.0 {
            for &k in coords {
                d[k] = -g[k];
            }
            slope = -grad_norm * grad_norm;
        }

        // Roundoff allowance so that steps near the optimum, where the true
        // decrease is below the resolution of `value`, are still taken.
        let noise = 1e-12 * (1.0 + value.abs());
        let mut t = 1.0;
        let mut trial = x.clone();
        loop {
            for &k in coords {
                trial[k] = x[k] + t * d[k];
            }
            let v = f.value(&trial);
            if v.is_finite() && v <= value + 1e-4 * t * slope + noise {
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                return Err(EngineError::NlpFailure(format!(
                    "line search failed at Newton step {iter} (gradient norm {grad_norm:e})"
                )));
            }
        }
        x = trial;
        let (v, gn) = f.value_grad_on(&x, coords);
        value = v;
        g = gn;
    }
    Err(EngineError::NlpFailure(format!(
        "no convergence in {} Newton iterations (gradient norm {:e})",
        opts.max_iter,
        norm_on(&g, coords)
    )))
}
