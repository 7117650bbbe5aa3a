//! Small dense optimizers for the per-texel fitting stage: a bound-
//! constrained limited-memory quasi-Newton minimizer and a non-negative
//! least squares solver.

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Box-constrained L-BFGS.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::invalid_argument("bound lengths differ"));
        }
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(Error::invalid_argument("lower bound above upper bound"));
        }
        Ok(Bounds { lo, hi })
    }

    fn project(&self, x: &mut [f64]) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lo[i], self.hi[i]);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MinimizeOptions {
    pub max_iters: usize,
    pub history: usize,
    /// Stop when the projected-gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Stop on relative objective decrease below this.
    pub f_tol: f64,
    /// Central-difference step for the internal gradient.
    pub fd_step: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions { max_iters: 200, history: 8, grad_tol: 1e-10, f_tol: 1e-14, fd_step: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn fd_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], bounds: &Bounds, h: f64) -> Vec<f64> {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut xp = x.to_vec();
    for i in 0..n {
        let hi = h * x[i].abs().max(1.0);
        // Shift the stencil inside the box when a bound is close.
        let up = (x[i] + hi).min(bounds.hi[i]);
        let dn = (x[i] - hi).max(bounds.lo[i]);
        if up - dn < 1e-300 {
            g[i] = 0.0;
            continue;
        }
        xp[i] = up;
        let fp = f(&xp);
        xp[i] = dn;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (up - dn);
    }
    g
}

/// Minimize a black-box objective over a box using projected L-BFGS with a
/// backtracking Armijo line search on the projected path. Gradients come
/// from central finite differences.
pub fn minimize_box(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    bounds: &Bounds,
    opts: &MinimizeOptions,
) -> Result<MinimizeResult> {
    let n = x0.len();
    if bounds.lo.len() != n {
        return Err(Error::invalid_argument("bounds do not match variable count"));
    }
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(Error::numeric("objective is non-finite at the initial point"));
    }
    let mut g = fd_gradient(f, &x, bounds, opts.fd_step);

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iters = 0;
    let mut stalled = 0usize;

    for it in 0..opts.max_iters {
        iters = it + 1;
        // Projected-gradient convergence measure.
        let pg_norm = (0..n)
            .map(|i| {
                let step = (x[i] - g[i]).clamp(bounds.lo[i], bounds.hi[i]) - x[i];
                step.abs()
            })
            .fold(0.0f64, f64::max);
        if pg_norm <= opts.grad_tol {
            converged = true;
            break;
        }

        // Two-loop recursion for the search direction.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            let a = rho[i] * dot(&s_hist[i], &d);
            alpha[i] = a;
            axpy(&mut d, -a, &y_hist[i]);
        }
        if m > 0 {
            let last = m - 1;
            let gamma = dot(&s_hist[last], &y_hist[last]) / dot(&y_hist[last], &y_hist[last]);
            for v in d.iter_mut() {
                *v *= gamma;
            }
        }
        for i in 0..m {
            let b = rho[i] * dot(&y_hist[i], &d);
            axpy(&mut d, alpha[i] - b, &s_hist[i]);
        }
        // Fall back to steepest descent when the direction is not a descent
        // direction (can happen right after projections).
        if dot(&d, &g) >= 0.0 {
            for i in 0..n {
                d[i] = -g[i];
            }
        }

        // Backtracking line search on the projected path; if the
        // quasi-Newton direction fails, retry along steepest descent with
        // the history dropped.
        let c1 = 1e-4;
        let line_search = |d: &[f64], f: &mut dyn FnMut(&[f64]) -> f64| -> Option<(Vec<f64>, f64)> {
            let trial = |t: f64, f: &mut dyn FnMut(&[f64]) -> f64| -> Option<(Vec<f64>, f64)> {
                let mut x_new = vec![0.0; n];
                for i in 0..n {
                    x_new[i] = (x[i] + t * d[i]).clamp(bounds.lo[i], bounds.hi[i]);
                }
                if (0..n).all(|i| (x_new[i] - x[i]).abs() < 1e-300) {
                    return None;
                }
                let f_new = f(&x_new);
                let directional: f64 = (0..n).map(|i| g[i] * (x_new[i] - x[i])).sum();
                if f_new.is_finite() && f_new <= fx + c1 * directional.min(0.0) && f_new < fx {
                    Some((x_new, f_new))
                } else {
                    None
                }
            };
            let mut t = 1.0;
            let mut found = None;
            for _ in 0..60 {
                found = trial(t, f);
                if found.is_some() {
                    break;
                }
                t *= 0.5;
            }
            let (mut best_x, mut best_f) = found?;
            // Greedy expansion: a too-short quasi-Newton direction otherwise
            // crawls along curved valleys.
            if t == 1.0 {
                for _ in 0..24 {
                    t *= 2.0;
                    match trial(t, f) {
                        Some((xx, ff)) if ff < best_f => {
                            best_x = xx;
                            best_f = ff;
                        }
                        _ => break,
                    }
                }
            }
            Some((best_x, best_f))
        };
        let mut found = line_search(&d, f);
        if found.is_none() {
            let sd: Vec<f64> = g.iter().map(|v| -v).collect();
            found = line_search(&sd, f);
            s_hist.clear();
            y_hist.clear();
            rho.clear();
        }
        let Some((x_new, f_new)) = found else {
            converged = pg_norm <= opts.grad_tol * 10.0;
            break;
        };

        let g_new = fd_gradient(f, &x_new, bounds, opts.fd_step);
        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            s_hist.push(s);
            y_hist.push(y);
            rho.push(1.0 / sy);
            if s_hist.len() > opts.history {
                s_hist.remove(0);
                y_hist.remove(0);
                rho.remove(0);
            }
        }

        let rel_drop = (fx - f_new) / fx.abs().max(1e-300);
        x = x_new.clone();
        fx = f_new;
        g = g_new;
        // Stop only after several consecutive negligible decreases; a single
        // heavily backtracked step is not convergence.
        if rel_drop.abs() < opts.f_tol {
            stalled += 1;
            if stalled >= 3 {
                converged = true;
                break;
            }
        } else {
            stalled = 0;
        }
    }

    Ok(MinimizeResult { x, fx, iterations: iters, converged })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for i in 0..y.len() {
        y[i] += a * x[i];
    }
}

// ---------------------------------------------------------------------------
// Non-negative least squares.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct NnlsResult {
    pub x: Vec<f64>,
    /// Residual two-norm at the solution.
    pub residual: f64,
}

/// Lawson-Hanson active-set NNLS for a dense column-major problem:
/// minimize ||A x - b||^2 subject to x >= 0. `a` has `m` rows stored as
/// `cols` concatenated length-`m` columns. Intended for small column
/// counts; the passive-set solve uses normal equations with Cholesky.
pub fn nnls(a_cols: &[Vec<f64>], b: &[f64]) -> Result<NnlsResult> {
    let n = a_cols.len();
    if n == 0 {
        return Err(Error::invalid_argument("no columns"));
    }
    let m = b.len();
    for (j, c) in a_cols.iter().enumerate() {
        if c.len() != m {
            return Err(Error::invalid_argument(format!("column {j} length mismatch")));
        }
    }

    let tol = {
        let amax = a_cols
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        let bmax = b.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        1e-12 * amax.max(bmax).max(1.0) * m as f64
    };

    let mut x = vec![0.0f64; n];
    let mut passive = vec![false; n];
    let max_outer = 3 * n + 10;

    for _ in 0..max_outer {
        // Gradient of 0.5||Ax-b||^2 is A^T(Ax - b); dual w = A^T(b - Ax).
        let r = residual_vec(a_cols, &x, b);
        let w: Vec<f64> = a_cols.iter().map(|c| dot(c, &r)).collect();
        // Pick the most positive dual among the active (zero) set.
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if !passive[j] && w[j] > tol {
                if best.map_or(true, |(_, bw)| w[j] > bw) {
                    best = Some((j, w[j]));
                }
            }
        }
        let Some((enter, _)) = best else {
            break;
        };
        passive[enter] = true;

        // Inner loop: solve on the passive set, stepping back when entries
        // go negative.
        for _ in 0..max_outer {
            let z = solve_passive(a_cols, b, &passive)?;
            let mut all_positive = true;
            let mut alpha = 1.0f64;
            let mut drop_idx = None;
            for j in 0..n {
                if passive[j] && z[j] <= 0.0 {
                    all_positive = false;
                    let denom = x[j] - z[j];
                    if denom > 0.0 {
                        let t = x[j] / denom;
                        if t < alpha {
                            alpha = t;
                            drop_idx = Some(j);
                        }
                    }
                }
            }
            if all_positive {
                x = z;
                break;
            }
            for j in 0..n {
                if passive[j] {
                    x[j] += alpha * (z[j] - x[j]);
                }
            }
            if let Some(dj) = drop_idx {
                passive[dj] = false;
                x[dj] = 0.0;
            }
            for j in 0..n {
                if passive[j] && x[j] <= 0.0 {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
        }
    }

    let r = residual_vec(a_cols, &x, b);
    Ok(NnlsResult { x, residual: norm(&r) })
}

fn residual_vec(a_cols: &[Vec<f64>], x: &[f64], b: &[f64]) -> Vec<f64> {
    let m = b.len();
    let mut r = b.to_vec();
    for (j, c) in a_cols.iter().enumerate() {
        if x[j] != 0.0 {
            for i in 0..m {
                r[i] -= x[j] * c[i];
            }
        }
    }
    r
}

/// Unconstrained least squares on the passive columns via normal equations.
fn solve_passive(a_cols: &[Vec<f64>], b: &[f64], passive: &[bool]) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..a_cols.len()).filter(|&j| passive[j]).collect();
    let k = idx.len();
    let mut ata = vec![0.0f64; k * k];
    let mut atb = vec![0.0f64; k];
    for (p, &jp) in idx.iter().enumerate() {
        for (q, &jq) in idx.iter().enumerate().take(p + 1) {
            let v = dot(&a_cols[jp], &a_cols[jq]);
            ata[p * k + q] = v;
            ata[q * k + p] = v;
        }
        atb[p] = dot(&a_cols[jp], b);
    }
    let sol = cholesky_solve(&mut ata, &mut atb, k)?;
    let mut z = vec![0.0f64; a_cols.len()];
    for (p, &j) in idx.iter().enumerate() {
        z[j] = sol[p];
    }
    Ok(z)
}

fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Result<Vec<f64>> {
    // In-place LL^T with a diagonal floor for near-singular systems.
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0f64, f64::max).max(1e-300);
    for j in 0..n {
        for kk in 0..j {
            let v = a[j * n + kk];
            a[j * n + j] -= v * v;
        }
        if a[j * n + j] <= 1e-14 * scale {
            return Err(Error::degenerate("normal equations are rank deficient"));
        }
        a[j * n + j] = a[j * n + j].sqrt();
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for kk in 0..j {
                v -= a[i * n + kk] * a[j * n + kk];
            }
            a[i * n + j] = v / a[j * n + j];
        }
    }
    // Forward then backward substitution.
    for i in 0..n {
        let mut v = b[i];
        for kk in 0..i {
            v -= a[i * n + kk] * b[kk];
        }
        b[i] = v / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for kk in i + 1..n {
            v -= a[kk * n + i] * b[kk];
        }
        b[i] = v / a[i * n + i];
    }
    Ok(b.to_vec())
}
