//! Reference estimates of `log Z = log ∫ p(y|X,θ) p(θ) dθ`.
//!
//! Two independent routes: a trapezoidal tensor grid accumulated in log
//! space (exact up to discretization for `u ≤ 3`), and nested sampling with
//! random-walk constrained prior draws.

use std::io::Write;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::EllipseSpec;
use crate::model::{LogLikelihood, PriorSpec};

/// Largest dimension the tensor-grid quadrature accepts.
pub const MAX_QUADRATURE_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceMethod {
    Quadrature,
    Nested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub raw: Vec<f64>,
    pub log_likelihood: f64,
    /// Normalized importance weight.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceEstimate {
    pub log_z: f64,
    /// One-sigma uncertainty; zero for quadrature.
    pub error: f64,
    /// Likelihood evaluations spent.
    pub evaluations: usize,
    pub method: EvidenceMethod,
    /// Kullback-Leibler information of posterior relative to prior, in nats.
    pub information: Option<f64>,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub posterior: Vec<PosteriorSample>,
}

/// `log Σ exp(vᵢ)`, ignoring `-∞` terms.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a < b {
        log_add(b, a)
    } else if b == f64::NEG_INFINITY {
        a
    } else {
        a + (b - a).exp().ln_1p()
    }
}

/// Trapezoidal tensor-grid evidence over `mean ± half_width_sigmas·std` per coordinate.
pub fn quadrature_evidence<L: LogLikelihood>(
    likelihood: &L,
    prior: &PriorSpec,
    points_per_dim: usize,
    half_width_sigmas: f64,
) -> Result<EvidenceEstimate> {
    let u = prior.len();
    if likelihood.dim() != u {
        return Err(Error::Dimension { expected: u, got: likelihood.dim() });
    }
    if u > MAX_QUADRATURE_DIM {
        return Err(Error::InvalidArgument(format!(
            "quadrature supports at most {MAX_QUADRATURE_DIM} hyperparameters, model has {u}"
        )));
    }
    if points_per_dim < 51 {
        return Err(Error::InvalidArgument(format!("points_per_dim must be >= 51, got {points_per_dim}")));
    }
    if !(half_width_sigmas > 0.0) {
        return Err(Error::InvalidArgument("half width must be positive".into()));
    }

    let m = points_per_dim;
    let axes: Vec<(f64, f64)> = prior
        .entries
        .iter()
        .map(|e| (e.mean - half_width_sigmas * e.std, 2.0 * half_width_sigmas * e.std / (m - 1) as f64))
        .collect();
    let total = m.pow(u as u32);
    // fixed-order reduction: evaluate in parallel, sum sequentially
    let terms: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let mut raw = vec![0.0; u];
            let mut log_w = 0.0;
            let mut rest = flat;
            for (d, &(lo, step)) in axes.iter().enumerate() {
                let i = rest % m;
                rest /= m;
                raw[d] = lo + step * i as f64;
                let edge = if i == 0 || i == m - 1 { 0.5 } else { 1.0 };
                log_w += (edge * step).ln();
            }
            let ll = likelihood.log_likelihood(&raw);
            if ll == f64::NEG_INFINITY {
                return ll;
            }
            ll + prior.log_density(&raw).expect("dimension checked") + log_w
        })
        .collect();
    let log_z = log_sum_exp(&terms);
    if !log_z.is_finite() {
        return Err(Error::InvalidArgument("integrand vanishes on the whole grid".into()));
    }
    Ok(EvidenceEstimate {
        log_z,
        error: 0.0,
        evaluations: total,
        method: EvidenceMethod::Quadrature,
        information: None,
        iterations: 1,
        posterior: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NestedOptions {
    pub live_points: usize,
    /// Stop once the live points could add less than this to `log Z`.
    pub dlogz: f64,
    /// Random-walk steps per replacement.
    pub walk_steps: usize,
    pub max_iterations: usize,
}

impl Default for NestedOptions {
    fn default() -> Self {
        NestedOptions { live_points: 500, dlogz: 0.01, walk_steps: 25, max_iterations: 2_000_000 }
    }
}

/// Consecutive zero-acceptance walks tolerated before giving up.
const STAGNATION_LIMIT: usize = 200;
const TARGET_ACCEPTANCE: f64 = 0.4;

struct LivePoint {
    raw: Vec<f64>,
    log_l: f64,
}

/// Classic nested sampling with fixed live-point count.
pub fn nested_sampling_evidence<L: LogLikelihood>(
    likelihood: &L,
    prior: &PriorSpec,
    options: &NestedOptions,
    seed: u64,
) -> Result<EvidenceEstimate> {
    let u = prior.len();
    if likelihood.dim() != u {
        return Err(Error::Dimension { expected: u, got: likelihood.dim() });
    }
    let n_live = options.live_points;
    if n_live < 50 {
        return Err(Error::InvalidArgument(format!("need at least 50 live points, got {n_live}")));
    }
    if options.walk_steps < 20 {
        return Err(Error::InvalidArgument("need at least 20 random-walk steps".into()));
    }

    let mut rng = StdRng::seed_from_u64(seed);
    let dists: Vec<Normal<f64>> =
        prior.entries.iter().map(|e| Normal::new(e.mean, e.std).expect("prior std is positive")).collect();
    let mut evaluations = 0usize;
    let mut live: Vec<LivePoint> = (0..n_live)
        .map(|_| {
            let raw: Vec<f64> = dists.iter().map(|d| d.sample(&mut rng)).collect();
            evaluations += 1;
            let log_l = likelihood.log_likelihood(&raw);
            LivePoint { raw, log_l }
        })
        .collect();

    let log_shrink = -1.0 / n_live as f64;
    let log_width_factor = (-(log_shrink).exp_m1()).ln(); // log(1 - e^{-1/N})
    let mut log_x = 0.0f64;
    let mut log_z = f64::NEG_INFINITY;
    let mut info = 0.0f64;
    let mut dead: Vec<(Vec<f64>, f64, f64)> = Vec::new();
    let mut scale = 1.0f64;
    let mut idle_walks = 0usize;
    let mut iterations = 0usize;

    loop {
        let worst = (0..n_live).min_by(|&a, &b| live[a].log_l.total_cmp(&live[b].log_l)).expect("live set non-empty");
        let threshold = live[worst].log_l;

        let log_wt = threshold + log_x + log_width_factor;
        let new_log_z = log_add(log_z, log_wt);
        if threshold.is_finite() {
            info = (log_wt - new_log_z).exp() * threshold
                + if log_z.is_finite() { (log_z - new_log_z).exp() * (info + log_z) } else { 0.0 }
                - new_log_z;
        }
        log_z = new_log_z;
        dead.push((live[worst].raw.clone(), threshold, log_wt));
        log_x += log_shrink;
        iterations += 1;

        let max_live = live.iter().map(|p| p.log_l).fold(f64::NEG_INFINITY, f64::max);
        let remaining = log_add(log_z, max_live + log_x) - log_z;
        if remaining < options.dlogz || iterations >= options.max_iterations {
            break;
        }

        // per-coordinate spread of the live set sets the proposal shape
        let spread: Vec<f64> = (0..u)
            .map(|d| {
                let mean = live.iter().map(|p| p.raw[d]).sum::<f64>() / n_live as f64;
                let var = live.iter().map(|p| (p.raw[d] - mean).powi(2)).sum::<f64>() / n_live as f64;
                var.sqrt().max(1e-12)
            })
            .collect();
        let mut start = rng.random_range(0..n_live - 1);
        if start >= worst {
            start += 1;
        }
        let mut current = live[start].raw.clone();
        let mut current_log_l = live[start].log_l;
        let mut current_log_prior = prior.log_density(&current).expect("dimension checked");
        let mut accepted = 0usize;
        let mut proposal = vec![0.0; u];
        for _ in 0..options.walk_steps {
            for d in 0..u {
                let z: f64 = StandardNormal.sample(&mut rng);
                proposal[d] = current[d] + scale * spread[d] * z;
            }
            let proposal_log_prior = prior.log_density(&proposal).expect("dimension checked");
            let log_ratio = proposal_log_prior - current_log_prior;
            if log_ratio < 0.0 && rng.random::<f64>().ln() >= log_ratio {
                continue;
            }
            evaluations += 1;
            let ll = likelihood.log_likelihood(&proposal);
            if ll > threshold {
                current.copy_from_slice(&proposal);
                current_log_l = ll;
                current_log_prior = proposal_log_prior;
                accepted += 1;
            }
        }
        let rate = accepted as f64 / options.walk_steps as f64;
        scale = (scale * (2.0 * (rate - TARGET_ACCEPTANCE)).exp()).clamp(1e-4, 10.0);
        if accepted == 0 {
            idle_walks += 1;
            if idle_walks >= STAGNATION_LIMIT {
                return Err(Error::Stagnation { iterations, log_z });
            }
        } else {
            idle_walks = 0;
        }
        live[worst] = LivePoint { raw: current, log_l: current_log_l };
    }

    // remaining prior volume is shared evenly by the surviving live points
    let log_live_wt = log_x - (n_live as f64).ln();
    for p in live.iter().filter(|p| p.log_l.is_finite()) {
        let log_wt = p.log_l + log_live_wt;
        let new_log_z = log_add(log_z, log_wt);
        info = (log_wt - new_log_z).exp() * p.log_l + (log_z - new_log_z).exp() * (info + log_z) - new_log_z;
        log_z = new_log_z;
        dead.push((p.raw.clone(), p.log_l, log_wt));
    }

    let posterior = dead
        .into_iter()
        .filter(|(_, ll, _)| ll.is_finite())
        .map(|(raw, log_likelihood, log_wt)| PosteriorSample { raw, log_likelihood, weight: (log_wt - log_z).exp() })
        .collect();
    let info = info.max(0.0);
    Ok(EvidenceEstimate {
        log_z,
        error: (info / n_live as f64).sqrt(),
        evaluations,
        method: EvidenceMethod::Nested,
        information: Some(info),
        iterations,
        posterior,
    })
}

/// Posterior mass (by importance weight) inside `ellipse`.
pub fn weighted_fraction_inside(ellipse: &EllipseSpec, samples: &[PosteriorSample]) -> f64 {
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    let inside: f64 = samples.iter().filter(|s| ellipse.contains(&s.raw)).map(|s| s.weight).sum();
    inside / total
}

/// Share of raw samples inside `ellipse`, each sample counted once
/// regardless of weight.
pub fn sample_fraction_inside(ellipse: &EllipseSpec, samples: &[PosteriorSample]) -> f64 {
    samples.iter().filter(|s| ellipse.contains(&s.raw)).count() as f64 / samples.len() as f64
}

/// Writes posterior samples as CSV: one column per raw parameter, then
/// `log_likelihood` and `weight`.
pub fn write_posterior_csv<W: Write>(samples: &[PosteriorSample], names: &[String], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = names.to_vec();
    header.push("log_likelihood".into());
    header.push("weight".into());
    w.write_record(&header)?;
    for s in samples {
        if s.raw.len() != names.len() {
            return Err(Error::Dimension { expected: names.len(), got: s.raw.len() });
        }
        let mut row: Vec<String> = s.raw.iter().map(f64::to_string).collect();
        row.push(s.log_likelihood.to_string());
        row.push(s.weight.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NormalPrior;

    /// `log L(θ) = log N(c; θ, τ²)`; with a normal prior the evidence is `N(c; μ, σ² + τ²)`.
    struct Conjugate {
        c: f64,
        tau: f64,
    }

    impl LogLikelihood for Conjugate {
        fn dim(&self) -> usize {
            1
        }
        fn log_likelihood(&self, raw: &[f64]) -> f64 {
            let z = (raw[0] - self.c) / self.tau;
            -0.5 * z * z - self.tau.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
        }
    }

    struct Flat(usize);

    impl LogLikelihood for Flat {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_likelihood(&self, _: &[f64]) -> f64 {
            0.0
        }
    }

    fn conjugate_case() -> (Conjugate, PriorSpec, f64) {
        let (mu, sigma, c, tau) = (0.5, 1.3, 1.7, 0.4);
        let prior = PriorSpec::new(vec![NormalPrior::new(mu, sigma)]).unwrap();
        let s2 = sigma * sigma + tau * tau;
        let closed = -0.5 * (c - mu) * (c - mu) / s2 - 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
        (Conjugate { c, tau }, prior, closed)
    }

    #[test]
    fn flat_likelihood_gives_prior_mass() {
        let prior = PriorSpec::new(vec![NormalPrior::new(0.0, 2.0), NormalPrior::new(1.0, 0.5)]).unwrap();
        let est = quadrature_evidence(&Flat(2), &prior, 201, 6.0).unwrap();
        assert!(est.log_z.abs() < 1e-6, "{}", est.log_z);
        assert_eq!(est.error, 0.0);
    }

    #[test]
    fn conjugate_quadrature() {
        let (lik, prior, closed) = conjugate_case();
        let est = quadrature_evidence(&lik, &prior, 401, 6.0).unwrap();
        assert!((est.log_z - closed).abs() < 1e-4, "{} vs {closed}", est.log_z);
    }

    #[test]
    fn conjugate_nested() {
        let (lik, prior, closed) = conjugate_case();
        let est = nested_sampling_evidence(&lik, &prior, &NestedOptions::default(), 3).unwrap();
        assert!((est.log_z - closed).abs() < 3.0 * est.error, "{} ± {} vs {closed}", est.log_z, est.error);
        let total: f64 = est.posterior.iter().map(|s| s.weight).sum();
        assert!((total - 1.0).abs() < 1e-9);
        // posterior mean of a conjugate normal pair
        let mean: f64 = est.posterior.iter().map(|s| s.weight * s.raw[0]).sum();
        let (mu, s2, c, t2) = (0.5, 1.69, 1.7, 0.16);
        let want = (mu / s2 + c / t2) / (1.0 / s2 + 1.0 / t2);
        assert!((mean - want).abs() < 0.05, "{mean} vs {want}");
    }

    #[test]
    fn nested_is_reproducible() {
        let (lik, prior, _) = conjugate_case();
        let opts = NestedOptions { live_points: 100, ..Default::default() };
        let a = nested_sampling_evidence(&lik, &prior, &opts, 11).unwrap();
        let b = nested_sampling_evidence(&lik, &prior, &opts, 11).unwrap();
        assert_eq!(a.log_z, b.log_z);
        assert_eq!(a.posterior, b.posterior);
    }

    #[test]
    fn argument_checks() {
        let prior4 = PriorSpec::new(vec![NormalPrior::new(0.0, 1.0); 4]).unwrap();
        assert!(quadrature_evidence(&Flat(4), &prior4, 51, 6.0).is_err());
        let prior1 = PriorSpec::new(vec![NormalPrior::new(0.0, 1.0)]).unwrap();
        assert!(quadrature_evidence(&Flat(1), &prior1, 50, 6.0).is_err());
        assert!(quadrature_evidence(&Flat(2), &prior1, 51, 6.0).is_err());
        let few = NestedOptions { live_points: 49, ..Default::default() };
        assert!(nested_sampling_evidence(&Flat(1), &prior1, &few, 0).is_err());
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp(&[-1000.0, f64::NEG_INFINITY]) + 1000.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_csv_layout() {
        let samples = vec![PosteriorSample { raw: vec![0.5, -1.0], log_likelihood: -3.0, weight: 0.25 }];
        let mut buf = Vec::new();
        write_posterior_csv(&samples, &["a".into(), "b".into()], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "a,b,log_likelihood,weight\n0.5,-1,-3,0.25\n");
    }
}
