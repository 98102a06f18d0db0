//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use ndarray::Array1;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when `‖∇f‖_∞` falls below this.
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 200,
            grad_tol: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

/// One accepted step, kept for diagnostics and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub alpha: f64,
    pub f0: f64,
    pub f1: f64,
    /// Directional derivative at the start and the accepted point.
    pub dg0: f64,
    pub dg1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsReport {
    pub x: Array1<f64>,
    pub f: f64,
    pub grad_inf: f64,
    pub iterations: usize,
    pub converged: bool,
    pub steps: Vec<StepRecord>,
}

fn inf_norm(g: &Array1<f64>) -> f64 {
    g.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn checked<F>(f: &mut F, x: &Array1<f64>) -> Result<(f64, Array1<f64>)>
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    let (v, g) = f(x);
    if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "objective {v} at |x|_inf = {:.3e}, |g|_inf = {:.3e}",
            inf_norm(x),
            inf_norm(&g)
        )));
    }
    Ok((v, g))
}

/// Minimize `f`, which returns value and gradient.
pub fn minimize<F>(mut f: F, x0: Array1<f64>, cfg: &LbfgsConfig) -> Result<LbfgsReport>
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    let mut x = x0;
    let (mut fx, mut g) = checked(&mut f, &x)?;
    let mut history: VecDeque<(Array1<f64>, Array1<f64>, f64)> =
        VecDeque::with_capacity(cfg.memory);
    let mut steps = Vec::new();
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        if inf_norm(&g) < cfg.grad_tol {
            break;
        }
        let mut d = -two_loop(&g, &history);
        let mut dg0 = g.dot(&d);
        if !(dg0 < 0.0) {
            // curvature information went stale; restart from steepest descent
            history.clear();
            d = -&g;
            dg0 = g.dot(&d);
        }
        let alpha0 = if history.is_empty() {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };
        let Some((alpha, f1, g1)) = line_search(&mut f, &x, fx, dg0, &d, alpha0, cfg)? else {
            log::debug!("line search failed at iteration {iterations}");
            break;
        };
        let dg1 = g1.dot(&d);
        steps.push(StepRecord {
            alpha,
            f0: fx,
            f1,
            dg0,
            dg1,
        });
        let s = &d * alpha;
        let y = &g1 - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.dot(&s).sqrt() * y.dot(&y).sqrt() {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s.clone(), y, 1.0 / sy));
        }
        x += &s;
        fx = f1;
        g = g1;
        iterations += 1;
    }
    let grad_inf = inf_norm(&g);
    Ok(LbfgsReport {
        x,
        f: fx,
        grad_inf,
        iterations,
        converged: grad_inf < cfg.grad_tol,
        steps,
    })
}

/// `H·g` from the stored pairs, with the usual `sᵀy / yᵀy` initial scaling.
fn two_loop(g: &Array1<f64>, history: &VecDeque<(Array1<f64>, Array1<f64>, f64)>) -> Array1<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q.scaled_add(-a, y);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.scaled_add(a - b, s);
    }
    q
}

/// Minimizer of the cubic interpolating `(a, fa, da)` and `(b, fb, db)`,
/// falling back to bisection when it is not strictly inside the interval.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let mid = 0.5 * (a + b);
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (hi - lo);
    if t.is_finite() && t > lo + margin && t < hi - margin {
        t
    } else {
        mid
    }
}

type Trial = (f64, f64, Array1<f64>);

/// Strong-Wolfe search along `d`: bracketing phase followed by zoom.
fn line_search<F>(
    f: &mut F,
    x: &Array1<f64>,
    f0: f64,
    dg0: f64,
    d: &Array1<f64>,
    alpha0: f64,
    cfg: &LbfgsConfig,
) -> Result<Option<Trial>>
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    let mut eval = |alpha: f64| -> Result<(f64, f64, Array1<f64>)> {
        let (v, g) = checked(f, &(x + &(d * alpha)))?;
        let dg = g.dot(d);
        Ok((v, dg, g))
    };
    let sufficient = |alpha: f64, v: f64| v <= f0 + cfg.c1 * alpha * dg0;
    let curvature = |dg: f64| dg.abs() <= -cfg.c2 * dg0;

    let (mut a_prev, mut f_prev, mut dg_prev) = (0.0, f0, dg0);
    let mut alpha = alpha0;
    for i in 0..cfg.max_line_search {
        let (v, dg, g) = eval(alpha)?;
        if !sufficient(alpha, v) || (i > 0 && v >= f_prev) {
            return zoom(
                &mut eval,
                (a_prev, f_prev, dg_prev),
                (alpha, v, dg),
                f0,
                dg0,
                cfg,
            );
        }
        if curvature(dg) {
            return Ok(Some((alpha, v, g)));
        }
        if dg >= 0.0 {
            return zoom(
                &mut eval,
                (alpha, v, dg),
                (a_prev, f_prev, dg_prev),
                f0,
                dg0,
                cfg,
            );
        }
        a_prev = alpha;
        f_prev = v;
        dg_prev = dg;
        alpha *= 2.0;
    }
    Ok(None)
}

fn zoom<E>(
    eval: &mut E,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    f0: f64,
    dg0: f64,
    cfg: &LbfgsConfig,
) -> Result<Option<Trial>>
where
    E: FnMut(f64) -> Result<(f64, f64, Array1<f64>)>,
{
    for _ in 0..cfg.max_line_search {
        let alpha = cubic_min(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2);
        let (v, dg, g) = eval(alpha)?;
        if v > f0 + cfg.c1 * alpha * dg0 || v >= lo.1 {
            hi = (alpha, v, dg);
        } else {
            if dg.abs() <= -cfg.c2 * dg0 {
                return Ok(Some((alpha, v, g)));
            }
            if dg * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (alpha, v, dg);
        }
        if (hi.0 - lo.0).abs() <= f64::EPSILON * lo.0.abs().max(1e-300) {
            break;
        }
    }
    Ok(None)
}

/// Central-difference gradient, for tests and diagnostics.
pub fn numeric_gradient<F: FnMut(&Array1<f64>) -> f64>(
    mut f: F,
    x: &Array1<f64>,
    h: f64,
) -> Array1<f64> {
    let mut g = Array1::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}
