//! Laplace approximations of the model evidence with eigenvalue clamping.
//!
//! The plain Laplace estimate is
//! `log Z ≈ L_MAP + (u/2)·log 2π - ½·log|H|` where `H` is the negative
//! Hessian of the log posterior at the MAP optimum. Writing the log
//! determinant through the eigenvalues `λᵢ` of `H`, every hyperparameter
//! contributes `½ log 2π - ½ log λᵢ`. Raising each eigenvalue to at least
//! `exp(-2r)·2π` caps that contribution at `r`:
//!
//! | variant | `r`       | floor on `λ`  |
//! |---------|-----------|---------------|
//! | LapS    | `0`       | `2π`          |
//! | LapAIC  | `-1`      | `2π·e²`       |
//! | LapBIC  | `-log n`  | `2π·n²`       |
//!
//! With every eigenvalue clamped the estimate collapses to `L_MAP + u·r`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{optimize, FitOptions, FitResult, Objective};
use crate::kernels::KernelExpr;
use crate::model::{Dataset, GPModel, PriorSpec};

/// Symmetric matrix with its eigendecomposition; eigenvalues ascend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianSpectrum {
    /// Row-major `u×u` matrix.
    pub matrix: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the eigenvector of `eigenvalues[i]`, stored row-major.
    pub eigenvectors: Vec<Vec<f64>>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

impl HessianSpectrum {
    /// Symmetrizes `(H + Hᵀ)/2` and eigendecomposes.
    pub fn from_matrix(h: &DMatrix<f64>) -> Result<Self> {
        if h.nrows() != h.ncols() {
            return Err(Error::Dimension { expected: h.nrows(), got: h.ncols() });
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
        }
        let sym = (h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let mut order: Vec<usize> = (0..sym.nrows()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let vecs = DMatrix::from_fn(sym.nrows(), sym.ncols(), |r, c| eig.eigenvectors[(r, order[c])]);
        Ok(HessianSpectrum { matrix: to_rows(&sym), eigenvalues, eigenvectors: to_rows(&vecs) })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        from_rows(&self.matrix)
    }

    pub fn eigenvectors(&self) -> DMatrix<f64> {
        from_rows(&self.eigenvectors)
    }

    /// `V·diag(λ)·Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let v = self.eigenvectors();
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.eigenvalues));
        &v * d * v.transpose()
    }

    /// Raises every eigenvalue below `exp(-2r)·2π` to that floor.
    ///
    /// Returns the modified spectrum and how many eigenvalues moved.
    pub fn clamp(&self, r: f64) -> (HessianSpectrum, usize) {
        let floor = eigenvalue_floor(r);
        let mut clamped = 0;
        let eigenvalues: Vec<f64> = self
            .eigenvalues
            .iter()
            .map(|&l| {
                if l < floor {
                    clamped += 1;
                    floor
                } else {
                    l
                }
            })
            .collect();
        let mut out = HessianSpectrum { matrix: self.matrix.clone(), eigenvalues, eigenvectors: self.eigenvectors.clone() };
        if clamped > 0 {
            out.matrix = to_rows(&out.reconstruct());
        }
        (out, clamped)
    }
}

/// Lowest eigenvalue that keeps a parameter's contribution at or below `r`.
pub fn eigenvalue_floor(r: f64) -> f64 {
    (-2.0 * r).exp() * 2.0 * PI
}

pub fn clamp_eigenvalues(spectrum: &HessianSpectrum, r: f64) -> (HessianSpectrum, usize) {
    spectrum.clamp(r)
}

/// `-∇∇f` at `theta` from central second differences with `hᵢ = 1e-4·max(1, |θᵢ|)`.
pub fn negative_hessian<F: Fn(&[f64]) -> f64>(f: F, theta: &[f64]) -> Result<DMatrix<f64>> {
    let u = theta.len();
    let h: Vec<f64> = theta.iter().map(|t| 1e-4 * t.abs().max(1.0)).collect();
    let mut point = theta.to_vec();
    let mut at = |deltas: &[(usize, f64)]| {
        point.copy_from_slice(theta);
        for &(i, d) in deltas {
            point[i] += d;
        }
        f(&point)
    };
    let f0 = at(&[]);
    let mut out = DMatrix::zeros(u, u);
    for i in 0..u {
        let fp = at(&[(i, h[i])]);
        let fm = at(&[(i, -h[i])]);
        let v = -(fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        if !v.is_finite() {
            return Err(Error::NonFiniteHessian(i, i));
        }
        out[(i, i)] = v;
        for j in 0..i {
            let fpp = at(&[(i, h[i]), (j, h[j])]);
            let fpm = at(&[(i, h[i]), (j, -h[j])]);
            let fmp = at(&[(i, -h[i]), (j, h[j])]);
            let fmm = at(&[(i, -h[i]), (j, -h[j])]);
            let v = -(fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            if !v.is_finite() {
                return Err(Error::NonFiniteHessian(i, j));
            }
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Hessian of the negative log posterior at `theta_hat`.
pub fn hessian_at(model: &GPModel, prior: &PriorSpec, data: &Dataset, theta_hat: &[f64]) -> Result<HessianSpectrum> {
    let h = negative_hessian(
        |raw| match (model.log_mll_raw(raw, data), prior.log_density(raw)) {
            (Ok(l), Ok(p)) => l + p,
            _ => f64::NAN,
        },
        theta_hat,
    )?;
    HessianSpectrum::from_matrix(&h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LaplaceVariant {
    Lap,
    LapS,
    LapAic,
    LapBic,
}

impl LaplaceVariant {
    pub const ALL: [LaplaceVariant; 4] =
        [LaplaceVariant::Lap, LaplaceVariant::LapS, LaplaceVariant::LapAic, LaplaceVariant::LapBic];

    /// Maximal per-parameter contribution, `None` for the unclamped estimate.
    pub fn contribution_bound(self, n: usize) -> Option<f64> {
        match self {
            LaplaceVariant::Lap => None,
            LaplaceVariant::LapS => Some(0.0),
            LaplaceVariant::LapAic => Some(-1.0),
            LaplaceVariant::LapBic => Some(-(n as f64).ln()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LaplaceVariant::Lap => "Lap",
            LaplaceVariant::LapS => "LapS",
            LaplaceVariant::LapAic => "LapAIC",
            LaplaceVariant::LapBic => "LapBIC",
        }
    }
}

/// Per-eigenvalue contributions `½ log 2π - ½ log λ`.
pub fn contributions(eigenvalues: &[f64]) -> Vec<f64> {
    let half_ln_2pi = 0.5 * (2.0 * PI).ln();
    eigenvalues.iter().map(|l| half_ln_2pi - 0.5 * l.ln()).collect()
}

/// Laplace log-evidence for `variant`; `None` when plain Lap meets a
/// non-positive eigenvalue.
pub fn log_evidence_laplace(map_value: f64, spectrum: &HessianSpectrum, variant: LaplaceVariant, n: usize) -> Option<f64> {
    let eigenvalues = match variant.contribution_bound(n) {
        None => {
            if spectrum.eigenvalues.iter().any(|&l| !(l > 0.0)) {
                return None;
            }
            spectrum.eigenvalues.clone()
        }
        Some(r) => spectrum.clamp(r).0.eigenvalues,
    };
    let value = map_value + contributions(&eigenvalues).iter().sum::<f64>();
    value.is_finite().then_some(value)
}

/// Model-selection criteria a kernel search can rank by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Criterion {
    #[serde(rename = "MLL")]
    Mll,
    #[serde(rename = "MAP")]
    Map,
    #[serde(rename = "AIC")]
    Aic,
    #[serde(rename = "BIC")]
    Bic,
    #[serde(rename = "LapS")]
    LapS,
    #[serde(rename = "LapAIC")]
    LapAic,
    #[serde(rename = "LapBIC")]
    LapBic,
}

impl Criterion {
    pub const ALL: [Criterion; 7] = [
        Criterion::Mll,
        Criterion::Map,
        Criterion::Aic,
        Criterion::Bic,
        Criterion::LapS,
        Criterion::LapAic,
        Criterion::LapBic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Mll => "MLL",
            Criterion::Map => "MAP",
            Criterion::Aic => "AIC",
            Criterion::Bic => "BIC",
            Criterion::LapS => "LapS",
            Criterion::LapAic => "LapAIC",
            Criterion::LapBic => "LapBIC",
        }
    }

    /// AIC and BIC are minimized, everything else maximized.
    pub fn lower_is_better(self) -> bool {
        matches!(self, Criterion::Aic | Criterion::Bic)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown criterion `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampCounts {
    pub lap_s: usize,
    pub lap_aic: usize,
    pub lap_bic: usize,
}

/// Every criterion for one kernel on one dataset.
///
/// Values from a failed fit are `None` and the failure is listed in `errors`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub kernel: KernelExpr,
    pub n: usize,
    pub u: usize,
    pub mll: Option<f64>,
    pub map: Option<f64>,
    pub aic: Option<f64>,
    pub bic: Option<f64>,
    /// `-AIC/2`
    pub log_z_aic: Option<f64>,
    /// `-BIC/2`
    pub log_z_bic: Option<f64>,
    /// AIC with the MAP value standing in for the likelihood.
    pub aic_map_surrogate: Option<f64>,
    pub bic_map_surrogate: Option<f64>,
    /// Unclamped Laplace; `None` also when the Hessian has a non-positive eigenvalue.
    pub log_z_lap: Option<f64>,
    pub log_z_lap_s: Option<f64>,
    pub log_z_lap_aic: Option<f64>,
    pub log_z_lap_bic: Option<f64>,
    pub spectrum: Option<HessianSpectrum>,
    pub clamp_counts: Option<ClampCounts>,
    pub mll_fit: Option<FitResult>,
    pub map_fit: Option<FitResult>,
    pub errors: Vec<String>,
}

impl EvaluationResult {
    pub fn value(&self, criterion: Criterion) -> Option<f64> {
        match criterion {
            Criterion::Mll => self.mll,
            Criterion::Map => self.map,
            Criterion::Aic => self.aic,
            Criterion::Bic => self.bic,
            Criterion::LapS => self.log_z_lap_s,
            Criterion::LapAic => self.log_z_lap_aic,
            Criterion::LapBic => self.log_z_lap_bic,
        }
    }

    /// Criterion value oriented so that higher is better.
    pub fn score(&self, criterion: Criterion) -> Option<f64> {
        self.value(criterion).map(|v| if criterion.lower_is_better() { -v } else { v })
    }

    /// Largest single-eigenvalue contribution of the plain Laplace estimate.
    pub fn max_lap_contribution(&self) -> Option<f64> {
        let spectrum = self.spectrum.as_ref()?;
        contributions(&spectrum.eigenvalues).into_iter().reduce(f64::max)
    }
}

pub fn aic(u: usize, log_likelihood: f64) -> f64 {
    2.0 * u as f64 - 2.0 * log_likelihood
}

pub fn bic(u: usize, n: usize, log_likelihood: f64) -> f64 {
    u as f64 * (n as f64).ln() - 2.0 * log_likelihood
}

/// Fits the MLL and MAP objectives and derives every criterion.
pub fn criteria_suite(
    model: &GPModel,
    prior: &PriorSpec,
    data: &Dataset,
    options: &FitOptions,
    seed: u64,
) -> Result<EvaluationResult> {
    let u = model.n_params();
    let n = data.n();
    let (mll_fit, map_fit) = rayon::join(
        || optimize(model, prior, data, Objective::Mll, options, seed),
        || optimize(model, prior, data, Objective::Map, options, seed),
    );
    let mut errors = Vec::new();
    let mll_fit = mll_fit.map_err(|e| errors.push(format!("MLL fit: {e}"))).ok();
    let map_fit = map_fit.map_err(|e| errors.push(format!("MAP fit: {e}"))).ok();
    if mll_fit.is_none() && map_fit.is_none() {
        return Err(Error::Optimization(errors.join("; ")));
    }

    let mll = mll_fit.as_ref().map(|f| f.value);
    let map = map_fit.as_ref().map(|f| f.value);
    let spectrum = map_fit.as_ref().and_then(|f| {
        hessian_at(model, prior, data, &f.theta_hat.raw).map_err(|e| errors.push(format!("Hessian: {e}"))).ok()
    });

    let laplace = |variant| Some(log_evidence_laplace(map?, spectrum.as_ref()?, variant, n)).flatten();
    let clamp_counts = spectrum.as_ref().map(|s| ClampCounts {
        lap_s: s.clamp(0.0).1,
        lap_aic: s.clamp(-1.0).1,
        lap_bic: s.clamp(-(n as f64).ln()).1,
    });

    Ok(EvaluationResult {
        kernel: model.expr.clone(),
        n,
        u,
        mll,
        map,
        aic: mll.map(|l| aic(u, l)),
        bic: mll.map(|l| bic(u, n, l)),
        log_z_aic: mll.map(|l| -0.5 * aic(u, l)),
        log_z_bic: mll.map(|l| -0.5 * bic(u, n, l)),
        aic_map_surrogate: map.map(|l| aic(u, l)),
        bic_map_surrogate: map.map(|l| bic(u, n, l)),
        log_z_lap: laplace(LaplaceVariant::Lap),
        log_z_lap_s: laplace(LaplaceVariant::LapS),
        log_z_lap_aic: laplace(LaplaceVariant::LapAic),
        log_z_lap_bic: laplace(LaplaceVariant::LapBic),
        spectrum,
        clamp_counts,
        mll_fit,
        map_fit,
        errors,
    })
}

/// Level set `(θ - c)ᵀ H' (θ - c) = level²` of a 2-D Laplace Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseSpec {
    pub center: [f64; 2],
    /// Unit principal directions.
    pub axes: [[f64; 2]; 2],
    /// Semi-axis lengths along `axes`.
    pub lengths: [f64; 2],
    pub level: f64,
}

impl EllipseSpec {
    pub fn contains(&self, point: &[f64]) -> bool {
        let d = [point[0] - self.center[0], point[1] - self.center[1]];
        let q: f64 = (0..2)
            .map(|k| {
                let proj = d[0] * self.axes[k][0] + d[1] * self.axes[k][1];
                (proj / self.lengths[k]).powi(2)
            })
            .sum();
        q <= 1.0
    }
}

/// Confidence ellipse of `N(θ̂, H'⁻¹)` at `sigma_level` standard deviations.
pub fn confidence_ellipse(theta_hat: &[f64], spectrum: &HessianSpectrum, sigma_level: f64) -> Result<EllipseSpec> {
    if theta_hat.len() != 2 || spectrum.dim() != 2 {
        return Err(Error::InvalidArgument(format!(
            "confidence ellipses need exactly 2 hyperparameters, got {}",
            theta_hat.len().max(spectrum.dim())
        )));
    }
    if spectrum.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::InvalidArgument("ellipse needs a positive definite Hessian".into()));
    }
    let v = spectrum.eigenvectors();
    let axis = |k: usize| [v[(0, k)], v[(1, k)]];
    Ok(EllipseSpec {
        center: [theta_hat[0], theta_hat[1]],
        axes: [axis(0), axis(1)],
        lengths: [
            sigma_level * (1.0 / spectrum.eigenvalues[0]).sqrt(),
            sigma_level * (1.0 / spectrum.eigenvalues[1]).sqrt(),
        ],
        level: sigma_level,
    })
}
