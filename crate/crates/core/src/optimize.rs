//! Polak-Ribiere nonlinear conjugate gradient with a feasibility-aware
//! Armijo backtracking line search.

use crate::error::{Error, Result};

/// Line search and convergence settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    /// Convergence threshold on the max-norm of the gradient.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Steepest-descent restart period; 0 means "every n iterations"
    /// where n is the problem dimension.
    pub restart_period: usize,
    pub initial_step: f64,
    pub backtrack: f64,
    pub sufficient_decrease: f64,
    /// Outer alternating passes for the two-block Gaussian scheme.
    pub outer_block_iters: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            grad_tol: 1e-6,
            max_iters: 2000,
            restart_period: 0,
            initial_step: 1.0,
            backtrack: 0.5,
            sufficient_decrease: 1e-4,
            outer_block_iters: 25,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grad_tol <= 0.0 {
            return Err(Error::Config("grad_tol must be positive".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::Config("backtrack factor must be in (0, 1)".into()));
        }
        if self.initial_step <= 0.0 {
            return Err(Error::Config("initial step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgStatus {
    Converged,
    MaxIters,
    /// No feasible decreasing step found at machine precision; the result
    /// carries the last accepted iterate.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub status: CgStatus,
    /// Objective at each accepted iterate, starting point included.
    pub trace: Vec<f64>,
}

impl CgResult {
    pub fn converged(&self) -> bool {
        self.status == CgStatus::Converged
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` from `x0` using Polak-Ribiere CG with `beta_pr` clamped at
/// zero, periodic steepest-descent restarts, and Armijo backtracking that
/// also rejects infeasible trial points (e.g. non-PD precisions).
pub fn cg_minimize<F, G, P>(
    f: F,
    g: G,
    x0: &[f64],
    cfg: &OptimizerConfig,
    feasible: P,
) -> Result<CgResult>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
    P: Fn(&[f64]) -> bool,
{
    cfg.validate()?;
    if !feasible(x0) {
        return Err(Error::Optimizer("infeasible starting point".into()));
    }
    let n = x0.len();
    let restart = if cfg.restart_period == 0 { n.max(1) } else { cfg.restart_period };
    let mut x = x0.to_vec();
    let mut fx = f(&x)?;
    let mut grad = g(&x)?;
    let mut trace = vec![fx];
    if inf_norm(&grad) <= cfg.grad_tol {
        return Ok(CgResult {
            x,
            value: fx,
            iterations: 0,
            status: CgStatus::Converged,
            trace,
        });
    }
    let mut dir: Vec<f64> = grad.iter().map(|v| -v).collect();
    let mut step_hint = cfg.initial_step;
    for it in 1..=cfg.max_iters {
        let mut slope = dot(&grad, &dir);
        if slope >= 0.0 {
            // not a descent direction: restart on steepest descent
            dir = grad.iter().map(|v| -v).collect();
            slope = dot(&grad, &dir);
        }
        // backtracking with optional forward extension on first acceptance
        let mut t = step_hint;
        let mut accepted: Option<(Vec<f64>, f64)> = None;
        let mut first_trial = true;
        loop {
            let xt: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            if feasible(&xt) {
                let ft = f(&xt)?;
                if ft.is_finite() && ft <= fx + cfg.sufficient_decrease * t * slope {
                    accepted = Some((xt, ft));
                    if first_trial {
                        // greedy extension while the value keeps improving
                        let mut best_t = t;
                        let (mut best_x, mut best_f) = accepted.clone().unwrap();
                        for _ in 0..40 {
                            let t2 = best_t * 2.0;
                            let x2: Vec<f64> =
                                x.iter().zip(&dir).map(|(a, d)| a + t2 * d).collect();
                            if !feasible(&x2) {
                                break;
                            }
                            let f2 = f(&x2)?;
                            if f2.is_finite() && f2 < best_f {
                                best_t = t2;
                                best_x = x2;
                                best_f = f2;
                            } else {
                                break;
                            }
                        }
                        t = best_t;
                        accepted = Some((best_x, best_f));
                    }
                    // parabola fit through f(0), f'(0), f(t): refine the step
                    let (_, ft) = accepted.as_ref().unwrap();
                    let denom = ft - fx - slope * t;
                    if denom > 0.0 {
                        let tq = -slope * t * t / (2.0 * denom);
                        if tq.is_finite() && tq > 0.0 {
                            let xq: Vec<f64> =
                                x.iter().zip(&dir).map(|(a, d)| a + tq * d).collect();
                            if feasible(&xq) {
                                let fq = f(&xq)?;
                                if fq.is_finite() && fq < *ft {
                                    t = tq;
                                    accepted = Some((xq, fq));
                                }
                            }
                        }
                    }
                    break;
                }
            }
            first_trial = false;
            t *= cfg.backtrack;
            if t < 1e-20 {
                break;
            }
        }
        let Some((x_new, f_new)) = accepted else {
            return Ok(CgResult {
                x,
                value: fx,
                iterations: it - 1,
                status: CgStatus::LineSearchFailed,
                trace,
            });
        };
        let g_new = g(&x_new)?;
        let gg = dot(&grad, &grad);
        let beta_pr = if gg > 0.0 {
            (dot(&g_new, &g_new) - dot(&g_new, &grad)) / gg
        } else {
            0.0
        };
        let beta = if it % restart == 0 { 0.0 } else { beta_pr.max(0.0) };
        dir = g_new.iter().zip(&dir).map(|(gn, d)| -gn + beta * d).collect();
        x = x_new;
        fx = f_new;
        grad = g_new;
        trace.push(fx);
        step_hint = (t * 2.0).clamp(1e-12, 1e12);
        if inf_norm(&grad) <= cfg.grad_tol {
            return Ok(CgResult {
                x,
                value: fx,
                iterations: it,
                status: CgStatus::Converged,
                trace,
            });
        }
    }
    Ok(CgResult {
        x,
        value: fx,
        iterations: cfg.max_iters,
        status: CgStatus::MaxIters,
        trace,
    })
}

/// Minimizes over a coordinate subset, holding the rest of `x0` fixed.
pub fn cg_minimize_subset<F, G, P>(
    f: F,
    g: G,
    x0: &[f64],
    coords: &[usize],
    cfg: &OptimizerConfig,
    feasible: P,
) -> Result<CgResult>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
    P: Fn(&[f64]) -> bool,
{
    let embed = |sub: &[f64]| {
        let mut full = x0.to_vec();
        for (k, &c) in coords.iter().enumerate() {
            full[c] = sub[k];
        }
        full
    };
    let sub0: Vec<f64> = coords.iter().map(|&c| x0[c]).collect();
    let result = cg_minimize(
        |s| f(&embed(s)),
        |s| {
            let full = g(&embed(s))?;
            Ok(coords.iter().map(|&c| full[c]).collect())
        },
        &sub0,
        cfg,
        |s| feasible(&embed(s)),
    )?;
    Ok(CgResult {
        x: embed(&result.x),
        ..result
    })
}
