//! Zero-mean GP marginal likelihood, hyperparameter priors and the MAP objective.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{param_layout, sigmoid, softplus, HyperParams, KernelExpr, ParamRole};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// One-dimensional regression data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Dimension { expected: x.len(), got: y.len() });
        }
        if x.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("dataset contains non-finite values".into()));
        }
        Ok(Dataset { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }
}

/// A GP with zero mean and the given covariance expression.
#[derive(Debug, Clone, PartialEq)]
pub struct GPModel {
    pub expr: KernelExpr,
    /// Initial jitter relative to the mean Gram diagonal.
    pub jitter: f64,
}

/// Number of ×10 jitter escalations attempted after the first factorization.
pub const JITTER_ESCALATIONS: u32 = 4;

#[derive(Debug, Clone)]
pub struct MllEval {
    pub value: f64,
    /// `∂/∂raw`, present when requested.
    pub grad: Option<Vec<f64>>,
    /// Absolute jitter added to the diagonal.
    pub jitter: f64,
}

impl GPModel {
    pub fn new(expr: KernelExpr) -> Self {
        GPModel { expr, jitter: 1e-8 }
    }

    /// Number of hyperparameters `u`.
    pub fn n_params(&self) -> usize {
        param_layout(&self.expr).len()
    }

    /// `K(X, X) + σ_n² I`, without jitter.
    pub fn covariance(&self, raw: &[f64], x: &[f64]) -> DMatrix<f64> {
        let nk = self.expr.n_kernel_params();
        let noise = if raw.len() > nk { softplus(raw[nk]) } else { 0.0 };
        let n = x.len();
        let mut k = DMatrix::zeros(n, n);
        let mut scratch = vec![0.0; nk];
        for i in 0..n {
            for j in 0..=i {
                let v = self.expr.eval_grad_raw(&raw[..nk], x[i], x[j], &mut scratch);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] += noise;
        }
        k
    }

    /// Covariance plus one derivative matrix per raw parameter.
    fn covariance_with_grad(&self, raw: &[f64], x: &[f64]) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let nk = self.expr.n_kernel_params();
        let u = raw.len();
        let n = x.len();
        let mut k = DMatrix::zeros(n, n);
        let mut dk = vec![DMatrix::zeros(n, n); u];
        let mut g = vec![0.0; nk];
        for i in 0..n {
            for j in 0..=i {
                let v = self.expr.eval_grad_raw(&raw[..nk], x[i], x[j], &mut g);
                k[(i, j)] = v;
                k[(j, i)] = v;
                for (p, gp) in g.iter().enumerate() {
                    dk[p][(i, j)] = *gp;
                    dk[p][(j, i)] = *gp;
                }
            }
        }
        if u > nk {
            let noise = softplus(raw[nk]);
            let dnoise = sigmoid(raw[nk]);
            for i in 0..n {
                k[(i, i)] += noise;
                dk[nk][(i, i)] = dnoise;
            }
        }
        (k, dk)
    }

    /// Cholesky of `k + jitter·I`, escalating the jitter on failure.
    pub fn factorize(&self, k: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
        let n = k.nrows();
        let mean_diag = (0..n).map(|i| k[(i, i)]).sum::<f64>() / n as f64;
        let mut jitter = self.jitter * mean_diag.abs().max(f64::MIN_POSITIVE);
        if !mean_diag.is_finite() {
            return Err(Error::NotPositiveDefinite { jitter });
        }
        for attempt in 0..=JITTER_ESCALATIONS {
            let mut m = k.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(m) {
                return Ok((chol, jitter));
            }
            if attempt < JITTER_ESCALATIONS {
                jitter *= 10.0;
            }
        }
        Err(Error::NotPositiveDefinite { jitter })
    }

    /// Log marginal likelihood, optionally with its raw-space gradient.
    pub fn log_mll_eval(&self, raw: &[f64], data: &Dataset, with_grad: bool) -> Result<MllEval> {
        let u = self.n_params();
        if raw.len() != u {
            return Err(Error::Dimension { expected: u, got: raw.len() });
        }
        let n = data.n();
        let (k, dk) = if with_grad {
            let (k, dk) = self.covariance_with_grad(raw, &data.x);
            (k, Some(dk))
        } else {
            (self.covariance(raw, &data.x), None)
        };
        let (chol, jitter) = self.factorize(k)?;
        let y = DVector::from_column_slice(&data.y);
        let alpha = chol.solve(&y);
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let value = -0.5 * y.dot(&alpha) - 0.5 * log_det - n as f64 * HALF_LN_2PI;
        if !value.is_finite() {
            return Err(Error::NotPositiveDefinite { jitter });
        }
        let grad = dk.map(|dk| {
            let mut w = chol.inverse();
            w.ger(-1.0, &alpha, &alpha, 1.0);
            // w = K⁻¹ - ααᵀ, gradient is -½ tr(w dK)
            dk.iter().map(|d| -0.5 * w.component_mul(d).sum()).collect()
        });
        Ok(MllEval { value, grad, jitter })
    }

    pub fn log_mll_raw(&self, raw: &[f64], data: &Dataset) -> Result<f64> {
        self.log_mll_eval(raw, data, false).map(|e| e.value)
    }
}

/// `log p(y | X, θ)` for a zero-mean GP.
pub fn log_mll(model: &GPModel, params: &HyperParams, data: &Dataset) -> Result<f64> {
    params.check_layout(&model.expr)?;
    model.log_mll_raw(&params.raw, data)
}

/// Likelihood of a different dataset under already-fitted hyperparameters.
///
/// This substitutes `(X*, y*)` into the marginal likelihood; it is not the
/// posterior predictive density.
pub fn test_log_likelihood(model: &GPModel, params_hat: &HyperParams, test_data: &Dataset) -> Result<f64> {
    log_mll(model, params_hat, test_data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub std: f64,
}

impl NormalPrior {
    pub const fn new(mean: f64, std: f64) -> Self {
        NormalPrior { mean, std }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        -0.5 * z * z - self.std.ln() - HALF_LN_2PI
    }
}

/// Prior on the raw value of a hyperparameter with the given role.
pub fn role_prior(role: ParamRole) -> NormalPrior {
    match role {
        ParamRole::SeLengthscale => NormalPrior::new(-0.212, 1.89),
        ParamRole::Mat32Lengthscale => NormalPrior::new(0.8, 2.15),
        ParamRole::PerLengthscale => NormalPrior::new(0.78, 2.29),
        ParamRole::PeriodLength => NormalPrior::new(0.65, 1.0),
        ParamRole::RqLengthscale => NormalPrior::new(-0.05, 1.94),
        ParamRole::RqAlpha => NormalPrior::new(1.88, 3.1),
        ParamRole::LinVariance => NormalPrior::new(-0.8, 1.0),
        ParamRole::Scale => NormalPrior::new(-1.63, 2.26),
        ParamRole::Noise => NormalPrior::new(-3.52, 3.58),
    }
}

/// Independent normal priors on raw hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub entries: Vec<NormalPrior>,
}

impl PriorSpec {
    pub fn new(entries: Vec<NormalPrior>) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| !(e.std > 0.0) || !e.mean.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid prior entry {e:?}")));
        }
        Ok(PriorSpec { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn means(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.mean).collect()
    }

    pub fn stds(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.std).collect()
    }

    pub fn log_density(&self, raw: &[f64]) -> Result<f64> {
        if raw.len() != self.entries.len() {
            return Err(Error::Dimension { expected: self.entries.len(), got: raw.len() });
        }
        Ok(self.entries.iter().zip(raw).map(|(e, &x)| e.log_density(x)).sum())
    }

    pub fn grad_log_density(&self, raw: &[f64]) -> Vec<f64> {
        self.entries.iter().zip(raw).map(|(e, &x)| -(x - e.mean) / (e.std * e.std)).collect()
    }
}

pub fn build_prior(expr: &KernelExpr) -> PriorSpec {
    PriorSpec { entries: param_layout(expr).slots.iter().map(|s| role_prior(s.role)).collect() }
}

pub fn log_prior(prior: &PriorSpec, params: &HyperParams) -> Result<f64> {
    prior.log_density(&params.raw)
}

/// `log p(y | X, θ) + log p(θ)`.
pub fn log_map(model: &GPModel, prior: &PriorSpec, params: &HyperParams, data: &Dataset) -> Result<f64> {
    Ok(log_mll(model, params, data)? + log_prior(prior, params)?)
}

/// Log-likelihood of raw hyperparameters, the integrand factor an evidence
/// estimator needs alongside the prior. Unfactorizable points map to `-∞`.
pub trait LogLikelihood: Sync {
    fn dim(&self) -> usize;
    fn log_likelihood(&self, raw: &[f64]) -> f64;
}

/// A GP model bound to a dataset.
#[derive(Debug, Clone, Copy)]
pub struct GpLikelihood<'a> {
    pub model: &'a GPModel,
    pub data: &'a Dataset,
}

impl LogLikelihood for GpLikelihood<'_> {
    fn dim(&self) -> usize {
        self.model.n_params()
    }

    fn log_likelihood(&self, raw: &[f64]) -> f64 {
        self.model.log_mll_raw(raw, self.data).unwrap_or(f64::NEG_INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{parse_kernel, BaseKernel};
    use proptest::prelude::*;
    use std::f64::consts::PI;
    use rand::{rngs::StdRng, Rng, SeedableRng};

    fn se_model() -> GPModel {
        GPModel::new(KernelExpr::Leaf(BaseKernel::Se))
    }

    /// Log marginal likelihood via an explicit Gauss-Jordan inverse and LU-free determinant.
    fn dense_log_mll(k: &[Vec<f64>], y: &[f64]) -> f64 {
        let n = y.len();
        let mut a: Vec<Vec<f64>> = k.to_vec();
        let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let mut log_det = 0.0;
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            inv.swap(c, p);
            let piv = a[c][c];
            log_det += piv.abs().ln();
            for j in 0..n {
                a[c][j] /= piv;
                inv[c][j] /= piv;
            }
            for r in 0..n {
                if r != c {
                    let f = a[r][c];
                    for j in 0..n {
                        a[r][j] -= f * a[c][j];
                        inv[r][j] -= f * inv[c][j];
                    }
                }
            }
        }
        let quad: f64 = (0..n).map(|i| (0..n).map(|j| y[i] * inv[i][j] * y[j]).sum::<f64>()).sum();
        -0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * (2.0 * PI).ln()
    }

    fn jittered_dense(model: &GPModel, raw: &[f64], x: &[f64], jitter: f64) -> Vec<Vec<f64>> {
        let k = model.covariance(raw, x);
        (0..x.len())
            .map(|i| (0..x.len()).map(|j| k[(i, j)] + if i == j { jitter } else { 0.0 }).collect())
            .collect()
    }

    fn linear_ten() -> Dataset {
        crate::data::linear_benchmark_dataset()
    }

    #[test]
    fn single_point_zero_target() {
        let m = se_model();
        let p = HyperParams::from_constrained(&m.expr, &[0.7, 1.0]).unwrap();
        let d = Dataset::new(vec![0.3], vec![0.0]).unwrap();
        let v = log_mll(&m, &p, &d).unwrap();
        assert!((v - (-0.5 * 2f64.ln() - HALF_LN_2PI)).abs() < 1e-7, "{v}");
        assert!((v + 1.26551).abs() < 1e-5);
    }

    #[test]
    fn single_point_vanishing_noise() {
        let m = se_model();
        let p = HyperParams::new(param_layout(&m.expr), vec![0.0, -40.0]).unwrap();
        let d = Dataset::new(vec![0.3], vec![2.0]).unwrap();
        let v = log_mll(&m, &p, &d).unwrap();
        assert!((v + 2.918_94).abs() < 1e-5, "{v}");
    }

    #[test]
    fn linear_benchmark_matches_dense_oracle() {
        let m = se_model();
        let p = HyperParams::from_constrained(&m.expr, &[1.0, 0.1]).unwrap();
        let d = linear_ten();
        let eval = m.log_mll_eval(&p.raw, &d, false).unwrap();
        let oracle = dense_log_mll(&jittered_dense(&m, &p.raw, &d.x, eval.jitter), &d.y);
        assert!((eval.value - oracle).abs() < 1e-8, "{} vs {oracle}", eval.value);
    }

    #[test]
    fn test_likelihood_substitution() {
        let m = se_model();
        let p = HyperParams::from_constrained(&m.expr, &[0.8, 0.2]).unwrap();
        let d = linear_ten();
        assert_eq!(test_log_likelihood(&m, &p, &d).unwrap(), log_mll(&m, &p, &d).unwrap());

        let one = Dataset::new(vec![5.0], vec![0.0]).unwrap();
        let p1 = HyperParams::from_constrained(&m.expr, &[0.8, 1.0]).unwrap();
        assert!((test_log_likelihood(&m, &p1, &one).unwrap() + 1.26551).abs() < 1e-5);

        let mut rng = StdRng::seed_from_u64(7);
        let xs: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let test = Dataset::new(xs, ys).unwrap();
        let eval = m.log_mll_eval(&p.raw, &test, false).unwrap();
        let oracle = dense_log_mll(&jittered_dense(&m, &p.raw, &test.x, eval.jitter), &test.y);
        assert!((test_log_likelihood(&m, &p, &test).unwrap() - oracle).abs() < 1e-8);
    }

    #[test]
    fn priors_from_table() {
        let se = build_prior(&KernelExpr::Leaf(BaseKernel::Se));
        assert_eq!(se.entries, vec![NormalPrior::new(-0.212, 1.89), NormalPrior::new(-3.52, 3.58)]);
        let sl = build_prior(&parse_kernel("SE+LIN").unwrap());
        assert_eq!(
            sl.entries,
            vec![NormalPrior::new(-0.212, 1.89), NormalPrior::new(-0.8, 1.0), NormalPrior::new(-3.52, 3.58)]
        );
        let k1 = build_prior(&crate::kernels::mauna_kernel(1).unwrap());
        assert_eq!(
            k1.entries,
            vec![NormalPrior::new(-1.63, 2.26), NormalPrior::new(-0.212, 1.89), NormalPrior::new(-3.52, 3.58)]
        );
        let k4 = build_prior(&crate::kernels::mauna_kernel(4).unwrap());
        assert_eq!(k4.len(), 11);
        assert_eq!(k4.entries[4], NormalPrior::new(0.65, 1.0));
        assert_eq!(k4.entries[7], NormalPrior::new(1.88, 3.1));
        assert_eq!(k4.entries[10], NormalPrior::new(-3.52, 3.58));
    }

    #[test]
    fn log_prior_values() {
        let unit = PriorSpec::new(vec![NormalPrior::new(0.4, 1.0)]).unwrap();
        assert!((unit.log_density(&[0.4]).unwrap() + 0.918_94).abs() < 1e-5);
        assert!((unit.log_density(&[1.4]).unwrap() - (-0.5 - HALF_LN_2PI)).abs() < 1e-14);
        assert!(unit.log_density(&[0.0, 1.0]).is_err());

        let se = build_prior(&KernelExpr::Leaf(BaseKernel::Se));
        let direct: f64 = [(-0.212, 1.89), (-3.52, 3.58)]
            .iter()
            .map(|&(m, s): &(f64, f64)| {
                (1.0 / (s * (2.0 * PI).sqrt()) * (-(0.0 - m) * (0.0 - m) / (2.0 * s * s)).exp()).ln()
            })
            .sum();
        assert!((se.log_density(&[0.0, 0.0]).unwrap() - direct).abs() < 1e-12);
        assert!(PriorSpec::new(vec![NormalPrior::new(0.0, 0.0)]).is_err());
    }

    #[test]
    fn map_is_sum_of_parts() {
        let m = se_model();
        let prior = build_prior(&m.expr);
        let d = linear_ten();
        for raw in [[0.0, 0.0], [0.5, -2.4], [-1.0, 1.0]] {
            let p = HyperParams::new(param_layout(&m.expr), raw.to_vec()).unwrap();
            let lm = log_map(&m, &prior, &p, &d).unwrap();
            let parts = log_mll(&m, &p, &d).unwrap() + log_prior(&prior, &p).unwrap();
            assert_eq!(lm, parts);
        }
    }

    #[test]
    fn log_det_matches_direct_determinant() {
        let mut rng = StdRng::seed_from_u64(3);
        for n in 1..=8 {
            let m = GPModel::new(parse_kernel("SE+LIN").unwrap());
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let k = m.covariance(&[0.2, -0.5, -1.0], &x);
            let (chol, jitter) = m.factorize(k.clone()).unwrap();
            let ld = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let direct = (k + DMatrix::identity(n, n) * jitter).determinant().ln();
            assert!((ld - direct).abs() < 1e-8);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = se_model();
        assert!(matches!(m.log_mll_raw(&[0.0], &linear_ten()), Err(Error::Dimension { .. })));
        assert!(Dataset::new(vec![0.0], vec![]).is_err());
        assert!(Dataset::new(vec![], vec![]).is_err());
        assert!(Dataset::new(vec![f64::NAN], vec![0.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn gradient_matches_central_differences(
            expr_idx in 0usize..6,
            seed in any::<u64>(),
        ) {
            let exprs = ["SE", "LIN", "MAT32+SE", "SE*LIN", "PER+RQ", "K1+K2+K3+K4"];
            let m = GPModel::new(parse_kernel(exprs[expr_idx]).unwrap());
            let mut rng = StdRng::seed_from_u64(seed);
            let n = rng.random_range(3..12);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            let d = Dataset::new(x, y).unwrap();
            let u = m.n_params();
            let mut raw: Vec<f64> = (0..u).map(|_| rng.random_range(-1.0..1.0)).collect();
            if param_layout(&m.expr).model_noise {
                raw[u - 1] = rng.random_range(-2.0..0.5);
            }
            let eval = m.log_mll_eval(&raw, &d, true).unwrap();
            let grad = eval.grad.unwrap();
            for i in 0..u {
                let h = 1e-5;
                let mut up = raw.clone();
                up[i] += h;
                let mut dn = raw.clone();
                dn[i] -= h;
                let fd = (m.log_mll_raw(&up, &d).unwrap() - m.log_mll_raw(&dn, &d).unwrap()) / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-2);
                prop_assert!(rel < 1e-4, "{} slot {}: fd {} analytic {}", exprs[expr_idx], i, fd, grad[i]);
            }
        }

        #[test]
        fn stationary_shift_invariance(shift in -5.0..5.0f64, seed in any::<u64>()) {
            let m = GPModel::new(parse_kernel("SE*MAT32+SE").unwrap());
            let mut rng = StdRng::seed_from_u64(seed);
            let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.3).collect();
            let y: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let raw = [0.1, 0.4, -0.3, -1.5];
            let a = m.log_mll_raw(&raw, &Dataset::new(x.clone(), y.clone()).unwrap()).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
            let b = m.log_mll_raw(&raw, &Dataset::new(shifted, y).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-8);
        }
    }
}
