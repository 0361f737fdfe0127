//! Multi-restart quasi-Newton fitting of raw hyperparameters.

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{param_layout, HyperParams};
use crate::model::{Dataset, GPModel, PriorSpec};

/// Objective being maximized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    /// `log p(y | X, θ)`
    Mll,
    /// `log p(y | X, θ) + log p(θ)`
    Map,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Random restarts, in addition to the start at the prior means.
    pub restarts: usize,
    pub max_iters: usize,
    /// Convergence threshold on the gradient ∞-norm.
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { restarts: 5, max_iters: 1000, grad_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: HyperParams,
    pub value: f64,
    pub objective: Objective,
    /// Index of the winning start; 0 is the prior mean.
    pub restart: usize,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    /// Final objective of every start, `None` for discarded ones.
    pub restart_values: Vec<Option<f64>>,
}

/// A local maximum returned by [`maximize`].
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOptimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_STEP: f64 = 10.0;
const MIN_STEP: f64 = 1e-14;

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, g| m.max(g.abs()))
}

/// Maximizes `f` with BFGS and backtracking line search.
///
/// `f` returns the value and gradient, or `None` where the objective is not
/// finite; such trial points halve the step. Returns `None` when the start
/// itself is not finite.
pub fn maximize<F>(f: F, x0: &[f64], max_iters: usize, grad_tol: f64) -> Option<LocalOptimum>
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let eval = |x: &DVector<f64>| -> Option<(f64, DVector<f64>)> {
        let (v, g) = f(x.as_slice())?;
        (v.is_finite() && g.iter().all(|g| g.is_finite())).then(|| (-v, -DVector::from_vec(g)))
    };
    let dim = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, mut gx) = eval(&x)?;
    let mut h_inv = DMatrix::<f64>::identity(dim, dim);
    let mut fresh = true;
    let mut iterations = 0;
    let mut stalls = 0;

    while iterations < max_iters {
        if inf_norm(gx.as_slice()) < grad_tol {
            break;
        }
        let mut d = -(&h_inv * &gx);
        let mut slope = gx.dot(&d);
        if !(slope < 0.0) {
            h_inv.fill_with_identity();
            fresh = true;
            d = -gx.clone();
            slope = gx.dot(&d);
        }
        let mut t = (MAX_STEP / d.amax()).min(1.0);
        let accepted = loop {
            let trial = &x + &d * t;
            if let Some((ft, gt)) = eval(&trial) {
                if ft <= fx + ARMIJO_C1 * t * slope {
                    break Some((trial, ft, gt));
                }
            }
            t *= 0.5;
            if t * d.amax() < MIN_STEP {
                break None;
            }
        };
        iterations += 1;
        let Some((x_new, f_new, g_new)) = accepted else {
            if fresh {
                break;
            }
            h_inv.fill_with_identity();
            fresh = true;
            continue;
        };
        let s = &x_new - &x;
        let y = &g_new - &gx;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                // initial scaling of the inverse Hessian
                h_inv *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // H ← H - ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            h_inv.ger(-rho, &hy, &s, 1.0);
            h_inv.ger(-rho, &s, &hy, 1.0);
            h_inv.ger(rho * rho * yhy + rho, &s, &s, 1.0);
            fresh = false;
        }
        let improvement = fx - f_new;
        x = x_new;
        fx = f_new;
        gx = g_new;
        if improvement <= 1e-15 * (1.0 + fx.abs()) {
            stalls += 1;
            if stalls >= 5 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    let grad_norm = inf_norm(gx.as_slice());
    Some(LocalOptimum {
        x: x.as_slice().to_vec(),
        value: -fx,
        grad_norm,
        iterations,
        converged: grad_norm < grad_tol.max(1e-4),
    })
}

/// One draw of raw hyperparameters from the prior.
pub fn init_random(prior: &PriorSpec, seed: u64) -> Vec<f64> {
    init_stream(prior, seed, 1).remove(0)
}

/// `count` successive prior draws from one seeded stream.
pub fn init_stream(prior: &PriorSpec, seed: u64, count: usize) -> Vec<Vec<f64>> {
    let mut rng = StdRng::seed_from_u64(seed);
    let dists: Vec<Normal<f64>> =
        prior.entries.iter().map(|e| Normal::new(e.mean, e.std).expect("prior std is positive")).collect();
    (0..count).map(|_| dists.iter().map(|d| d.sample(&mut rng)).collect()).collect()
}

/// Value and raw-space gradient of the chosen objective.
pub fn objective_value_grad(
    model: &GPModel,
    prior: &PriorSpec,
    data: &Dataset,
    objective: Objective,
    raw: &[f64],
) -> Option<(f64, Vec<f64>)> {
    let eval = model.log_mll_eval(raw, data, true).ok()?;
    let mut value = eval.value;
    let mut grad = eval.grad?;
    if objective == Objective::Map {
        value += prior.log_density(raw).ok()?;
        for (g, p) in grad.iter_mut().zip(prior.grad_log_density(raw)) {
            *g += p;
        }
    }
    value.is_finite().then_some((value, grad))
}

/// Best of `restarts` random starts plus one start at the prior means.
pub fn optimize(
    model: &GPModel,
    prior: &PriorSpec,
    data: &Dataset,
    objective: Objective,
    options: &FitOptions,
    seed: u64,
) -> Result<FitResult> {
    let layout = param_layout(&model.expr);
    if prior.len() != layout.len() {
        return Err(Error::Dimension { expected: layout.len(), got: prior.len() });
    }
    if options.restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be at least 1".into()));
    }
    let mut starts = vec![prior.means()];
    starts.extend(init_stream(prior, seed, options.restarts));

    let outcomes: Vec<Option<LocalOptimum>> = starts
        .par_iter()
        .map(|x0| {
            maximize(
                |raw| objective_value_grad(model, prior, data, objective, raw),
                x0,
                options.max_iters,
                options.grad_tol,
            )
        })
        .collect();

    let restart_values: Vec<Option<f64>> = outcomes.iter().map(|o| o.as_ref().map(|o| o.value)).collect();
    let (restart, best) = outcomes
        .into_iter()
        .enumerate()
        .filter_map(|(i, o)| o.map(|o| (i, o)))
        .fold(None, |acc: Option<(usize, LocalOptimum)>, (i, o)| match acc {
            Some((bi, b)) if b.value >= o.value => Some((bi, b)),
            _ => Some((i, o)),
        })
        .ok_or_else(|| {
            Error::Optimization(format!(
                "all {} starts failed to reach a finite {:?} objective for `{}`",
                restart_values.len(),
                objective,
                model.expr
            ))
        })?;

    Ok(FitResult {
        theta_hat: HyperParams::new(layout, best.x)?,
        value: best.value,
        objective,
        restart,
        iterations: best.iterations,
        converged: best.converged,
        grad_norm: best.grad_norm,
        restart_values,
    })
}
