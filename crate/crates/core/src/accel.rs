//! Nesterov accelerated gradient descent for smooth convex objectives.
//!
//! Momentum follows `t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2`. The step comes
//! from a halving backtracking search (or a fixed `1/L`), and with
//! function-value restart enabled an iterate that would increase the objective
//! is rejected and momentum is reset, so accepted objective values never rise
//! (beyond rounding noise, where a gradient test decides instead).

use serde::{Deserialize, Serialize};

/// A differentiable objective over a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Writes the gradient at `x` into `grad` and returns the value.
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Halving line search from a step grown by `grow` each iteration (when
    /// restarts are enabled).
    Backtracking { initial: f64, armijo: f64, grow: f64 },
    /// Constant step `1/L`; halved whenever a step fails the sufficient
    /// decrease `f(y) - step/2 |g|^2` that holds for `step <= 1/L`.
    Fixed { step: f64 },
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::Backtracking {
            initial: 1.0,
            armijo: 0.5,
            grow: 1.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccelConfig {
    pub max_iter: usize,
    pub step: StepRule,
    pub restart: bool,
}

impl Default for AccelConfig {
    fn default() -> Self {
        AccelConfig {
            max_iter: 10_000,
            step: StepRule::default(),
            restart: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AccelOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub restarts: usize,
    pub converged: bool,
    /// Objective at every accepted iterate, starting with `x0`.
    pub history: Vec<f64>,
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Minimizes `f` from `x0`. `stop(x, grad)` is consulted at every accepted
/// iterate (including `x0`); returning `true` ends the run as converged.
pub fn minimize<F, S>(f: &F, x0: Vec<f64>, cfg: &AccelConfig, mut stop: S) -> AccelOutcome
where
    F: Objective + ?Sized,
    S: FnMut(&[f64], &[f64]) -> bool,
{
    let n = f.dim();
    assert_eq!(x0.len(), n, "starting point has wrong dimension");

    let mut x = x0;
    let mut gx = vec![0.0; n];
    let mut fx = f.eval(&x, &mut gx);
    let mut evaluations = 1;
    let mut history = vec![fx];

    if stop(&x, &gx) {
        return AccelOutcome {
            x,
            value: fx,
            grad: gx,
            iterations: 0,
            evaluations,
            restarts: 0,
            converged: true,
            history,
        };
    }

    let (mut step, armijo, grow) = match cfg.step {
        StepRule::Backtracking { initial, armijo, grow } => (initial, armijo, grow),
        StepRule::Fixed { step } => (step, 0.0, 1.0),
    };
    let backtrack = matches!(cfg.step, StepRule::Backtracking { .. });

    let mut momentum = 1.0_f64;
    // extrapolated point; `None` means it coincides with `x`
    let mut y: Option<Vec<f64>> = None;
    let mut gy = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut gtrial = vec![0.0; n];
    let mut restarts = 0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        iterations += 1;

        let fy = match &y {
            Some(yv) => {
                evaluations += 1;
                f.eval(yv, &mut gy)
            }
            None => {
                gy.copy_from_slice(&gx);
                fx
            }
        };
        let from_x = y.is_none();
        let base: &[f64] = y.as_deref().unwrap_or(&x);
        let gnorm2 = sq_norm(&gy);
        // objective differences below this are rounding noise
        let noise = 8.0 * f64::EPSILON * fy.abs().max(fx.abs()).max(f64::MIN_POSITIVE);

        // plain momentum is only guaranteed with a nonincreasing step
        if backtrack && cfg.restart {
            step *= grow;
        }
        let mut ft;
        let mut tries = 0;
        loop {
            for k in 0..n {
                trial[k] = base[k] - step * gy[k];
            }
            ft = f.eval(&trial, &mut gtrial);
            evaluations += 1;
            tries += 1;
            if !backtrack || gnorm2 == 0.0 {
                break;
            }
            if ft.is_finite() {
                let predicted = armijo * step * gnorm2;
                if ft <= fy - predicted {
                    break;
                }
                if predicted <= noise && ft <= fy + noise {
                    // decrease is invisible in f: accept if the local
                    // curvature along the step is at most 1/step
                    let dg2: f64 = gtrial.iter().zip(&gy).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dg2 <= gnorm2 {
                        break;
                    }
                }
            }
            step *= 0.5;
            if step < 1e-300 || tries > 200 {
                break;
            }
        }

        // a fixed step longer than 1/L shows up as insufficient decrease
        let shortened = !backtrack && ft.is_finite() && ft > fy - 0.5 * step * gnorm2 + noise;
        if shortened {
            step *= 0.5;
        }

        let uphill = if !ft.is_finite() || ft > fx + noise {
            true
        } else if ft > fx {
            // within noise: gradient restart test on the realized move
            let dot: f64 = (0..n).map(|k| gy[k] * (trial[k] - x[k])).sum();
            dot > 0.0
        } else {
            false
        };
        if cfg.restart && uphill {
            restarts += 1;
            momentum = 1.0;
            y = None;
            if from_x {
                if backtrack {
                    // line search exhausted at x itself: no descent possible
                    break;
                }
                if !shortened {
                    step *= 0.5;
                }
            }
            continue;
        }

        let next_momentum = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        let beta = (momentum - 1.0) / next_momentum;
        momentum = next_momentum;
        let mut yv = y.take().unwrap_or_else(|| vec![0.0; n]);
        for k in 0..n {
            yv[k] = trial[k] + beta * (trial[k] - x[k]);
        }
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut gx, &mut gtrial);
        fx = ft;
        history.push(fx);
        y = if beta == 0.0 { None } else { Some(yv) };

        if stop(&x, &gx) {
            converged = true;
            break;
        }
    }

    AccelOutcome {
        x,
        value: fx,
        grad: gx,
        iterations,
        evaluations,
        restarts,
        converged,
        history,
    }
}

/// Largest Hessian eigenvalue at `x`, by power iteration on central-difference
/// Hessian-vector products.
pub fn estimate_lipschitz<F: Objective + ?Sized>(f: &F, x: &[f64], iters: usize) -> f64 {
    let n = f.dim();
    if n == 0 {
        return 0.0;
    }
    let mut v: Vec<f64> = (0..n).map(|k| 1.0 + 0.1 * ((k * 7919) % 13) as f64).collect();
    let mut norm = sq_norm(&v).sqrt();
    v.iter_mut().for_each(|c| *c /= norm);
    let h = 1e-5 * (1.0 + inf_norm(x));
    let mut gp = vec![0.0; n];
    let mut gm = vec![0.0; n];
    let mut xp = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..iters {
        for k in 0..n {
            xp[k] = x[k] + h * v[k];
        }
        f.eval(&xp, &mut gp);
        for k in 0..n {
            xp[k] = x[k] - h * v[k];
        }
        f.eval(&xp, &mut gm);
        let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        norm = sq_norm(&hv).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = hv.into_iter().map(|c| c / norm).collect();
    }
    lambda
}
