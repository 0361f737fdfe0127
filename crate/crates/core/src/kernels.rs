//! Compositional covariance functions over scalar inputs.
//!
//! A [`KernelExpr`] is a binary tree of base kernels joined by `+` and `*`.
//! Every hyperparameter lives in unconstrained *raw* space; the value the
//! kernel actually sees is `softplus(raw)`. Parameters are laid out in
//! depth-first, left-to-right leaf order, followed by one trailing model
//! noise variance unless the expression carries its own white-noise term
//! (the `K4` preset).

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// `log(1 + exp(x))`, stable for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BaseKernel {
    /// `exp(-r²/2ℓ²)`
    Se,
    /// `v·x·x'`
    Lin,
    /// Matérn 3/2
    Mat32,
    /// exp-sine-squared with lengthscale and period
    Per,
    /// rational quadratic
    Rq,
    /// `θ₁²·SE(θ₂)`
    K1,
    /// `θ₃²·exp(-r²/2θ₄² - 2sin²(πr)/θ₅²)`
    K2,
    /// `θ₆²·RQ(θ₇, θ₈)`
    K3,
    /// `θ₉²·SE(θ₁₀) + θ₁₁²·δ(x, x')`
    K4,
}

/// What a single hyperparameter means; selects its prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    SeLengthscale,
    Mat32Lengthscale,
    PerLengthscale,
    PeriodLength,
    RqLengthscale,
    RqAlpha,
    LinVariance,
    Scale,
    Noise,
}

impl ParamRole {
    pub fn name(self) -> &'static str {
        match self {
            ParamRole::SeLengthscale => "se_lengthscale",
            ParamRole::Mat32Lengthscale => "mat32_lengthscale",
            ParamRole::PerLengthscale => "per_lengthscale",
            ParamRole::PeriodLength => "period_length",
            ParamRole::RqLengthscale => "rq_lengthscale",
            ParamRole::RqAlpha => "rq_alpha",
            ParamRole::LinVariance => "lin_variance",
            ParamRole::Scale => "scale",
            ParamRole::Noise => "noise",
        }
    }
}

impl BaseKernel {
    pub const ALL: [BaseKernel; 9] = [
        BaseKernel::Se,
        BaseKernel::Lin,
        BaseKernel::Mat32,
        BaseKernel::Per,
        BaseKernel::Rq,
        BaseKernel::K1,
        BaseKernel::K2,
        BaseKernel::K3,
        BaseKernel::K4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaseKernel::Se => "SE",
            BaseKernel::Lin => "LIN",
            BaseKernel::Mat32 => "MAT32",
            BaseKernel::Per => "PER",
            BaseKernel::Rq => "RQ",
            BaseKernel::K1 => "K1",
            BaseKernel::K2 => "K2",
            BaseKernel::K3 => "K3",
            BaseKernel::K4 => "K4",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        BaseKernel::ALL.into_iter().find(|b| b.name() == name)
    }

    pub fn roles(self) -> &'static [ParamRole] {
        use ParamRole::*;
        match self {
            BaseKernel::Se => &[SeLengthscale],
            BaseKernel::Lin => &[LinVariance],
            BaseKernel::Mat32 => &[Mat32Lengthscale],
            BaseKernel::Per => &[PerLengthscale, PeriodLength],
            BaseKernel::Rq => &[RqLengthscale, RqAlpha],
            BaseKernel::K1 => &[Scale, SeLengthscale],
            BaseKernel::K2 => &[Scale, SeLengthscale, PeriodLength],
            BaseKernel::K3 => &[Scale, RqLengthscale, RqAlpha],
            BaseKernel::K4 => &[Scale, SeLengthscale, Noise],
        }
    }

    pub fn n_params(self) -> usize {
        self.roles().len()
    }

    /// Stationary kernels depend on `x - x'` only.
    pub fn is_stationary(self) -> bool {
        !matches!(self, BaseKernel::Lin)
    }

    /// Evaluates the kernel and writes `∂k/∂raw` into `grad`.
    fn eval_grad(self, raw: &[f64], x: f64, x2: f64, grad: &mut [f64]) -> f64 {
        let r = x - x2;
        let r2 = r * r;
        match self {
            BaseKernel::Se => {
                let l = softplus(raw[0]);
                let v = (-r2 / (2.0 * l * l)).exp();
                grad[0] = v * r2 / (l * l * l) * sigmoid(raw[0]);
                v
            }
            BaseKernel::Lin => {
                let var = softplus(raw[0]);
                grad[0] = x * x2 * sigmoid(raw[0]);
                var * x * x2
            }
            BaseKernel::Mat32 => {
                let l = softplus(raw[0]);
                let a = SQRT_3 * r.abs() / l;
                let e = (-a).exp();
                grad[0] = a * a * e / l * sigmoid(raw[0]);
                (1.0 + a) * e
            }
            BaseKernel::Per => {
                let l = softplus(raw[0]);
                let p = softplus(raw[1]);
                let arg = PI * r / p;
                let (s, c) = arg.sin_cos();
                let v = (-2.0 * s * s / (l * l)).exp();
                grad[0] = v * 4.0 * s * s / (l * l * l) * sigmoid(raw[0]);
                grad[1] = v * 4.0 * PI * r * s * c / (l * l * p * p) * sigmoid(raw[1]);
                v
            }
            BaseKernel::Rq => {
                let l = softplus(raw[0]);
                let alpha = softplus(raw[1]);
                let (v, dl, da) = rational_quadratic(r2, l, alpha);
                grad[0] = dl * sigmoid(raw[0]);
                grad[1] = da * sigmoid(raw[1]);
                v
            }
            BaseKernel::K1 => {
                let t1 = softplus(raw[0]);
                let t2 = softplus(raw[1]);
                let e = (-r2 / (2.0 * t2 * t2)).exp();
                grad[0] = 2.0 * t1 * e * sigmoid(raw[0]);
                grad[1] = t1 * t1 * e * r2 / (t2 * t2 * t2) * sigmoid(raw[1]);
                t1 * t1 * e
            }
            BaseKernel::K2 => {
                let t3 = softplus(raw[0]);
                let t4 = softplus(raw[1]);
                let t5 = softplus(raw[2]);
                let s = (PI * r).sin();
                let e = (-r2 / (2.0 * t4 * t4) - 2.0 * s * s / (t5 * t5)).exp();
                let v = t3 * t3 * e;
                grad[0] = 2.0 * t3 * e * sigmoid(raw[0]);
                grad[1] = v * r2 / (t4 * t4 * t4) * sigmoid(raw[1]);
                grad[2] = v * 4.0 * s * s / (t5 * t5 * t5) * sigmoid(raw[2]);
                v
            }
            BaseKernel::K3 => {
                let t6 = softplus(raw[0]);
                let t7 = softplus(raw[1]);
                let t8 = softplus(raw[2]);
                let (q, dl, da) = rational_quadratic(r2, t7, t8);
                let s2 = t6 * t6;
                grad[0] = 2.0 * t6 * q * sigmoid(raw[0]);
                grad[1] = s2 * dl * sigmoid(raw[1]);
                grad[2] = s2 * da * sigmoid(raw[2]);
                s2 * q
            }
            BaseKernel::K4 => {
                let t9 = softplus(raw[0]);
                let t10 = softplus(raw[1]);
                let t11 = softplus(raw[2]);
                let e = (-r2 / (2.0 * t10 * t10)).exp();
                let delta = if x == x2 { 1.0 } else { 0.0 };
                grad[0] = 2.0 * t9 * e * sigmoid(raw[0]);
                grad[1] = t9 * t9 * e * r2 / (t10 * t10 * t10) * sigmoid(raw[1]);
                grad[2] = 2.0 * t11 * delta * sigmoid(raw[2]);
                t9 * t9 * e + t11 * t11 * delta
            }
        }
    }
}

/// Rational quadratic value with derivatives in lengthscale and alpha.
fn rational_quadratic(r2: f64, l: f64, alpha: f64) -> (f64, f64, f64) {
    let q = r2 / (2.0 * alpha * l * l);
    let b = 1.0 + q;
    let lnb = q.ln_1p();
    let v = (-alpha * lnb).exp();
    let dl = v * 2.0 * alpha * q / (b * l);
    let da = v * (q / b - lnb);
    (v, dl, da)
}

impl fmt::Display for BaseKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Binary expression tree of base kernels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum KernelExpr {
    Leaf(BaseKernel),
    Sum(Box<KernelExpr>, Box<KernelExpr>),
    Product(Box<KernelExpr>, Box<KernelExpr>),
}

impl KernelExpr {
    pub fn leaf(base: BaseKernel) -> Self {
        KernelExpr::Leaf(base)
    }

    pub fn sum(left: KernelExpr, right: KernelExpr) -> Self {
        KernelExpr::Sum(Box::new(left), Box::new(right))
    }

    pub fn product(left: KernelExpr, right: KernelExpr) -> Self {
        KernelExpr::Product(Box::new(left), Box::new(right))
    }

    /// Number of leaves.
    pub fn size(&self) -> usize {
        match self {
            KernelExpr::Leaf(_) => 1,
            KernelExpr::Sum(l, r) | KernelExpr::Product(l, r) => l.size() + r.size(),
        }
    }

    /// Leaves in depth-first, left-to-right order.
    pub fn leaves(&self) -> Vec<BaseKernel> {
        let mut out = Vec::with_capacity(self.size());
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<BaseKernel>) {
        match self {
            KernelExpr::Leaf(b) => out.push(*b),
            KernelExpr::Sum(l, r) | KernelExpr::Product(l, r) => {
                l.collect_leaves(out);
                r.collect_leaves(out);
            }
        }
    }

    /// Number of kernel hyperparameters (excluding model noise).
    pub fn n_kernel_params(&self) -> usize {
        match self {
            KernelExpr::Leaf(b) => b.n_params(),
            KernelExpr::Sum(l, r) | KernelExpr::Product(l, r) => {
                l.n_kernel_params() + r.n_kernel_params()
            }
        }
    }

    /// True when a leaf supplies its own diagonal noise term.
    pub fn has_intrinsic_noise(&self) -> bool {
        self.leaves().contains(&BaseKernel::K4)
    }

    pub fn is_stationary(&self) -> bool {
        self.leaves().iter().all(|b| b.is_stationary())
    }

    /// Evaluates `k(x, x2)` from the kernel slice of the raw parameters.
    pub fn eval_raw(&self, raw: &[f64], x: f64, x2: f64) -> f64 {
        let mut scratch = vec![0.0; self.n_kernel_params()];
        self.eval_grad_raw(raw, x, x2, &mut scratch)
    }

    /// Evaluates `k(x, x2)` and writes `∂k/∂raw` for every kernel parameter.
    pub fn eval_grad_raw(&self, raw: &[f64], x: f64, x2: f64, grad: &mut [f64]) -> f64 {
        match self {
            KernelExpr::Leaf(b) => b.eval_grad(raw, x, x2, grad),
            KernelExpr::Sum(l, r) => {
                let nl = l.n_kernel_params();
                let (gl, gr) = grad.split_at_mut(nl);
                l.eval_grad_raw(&raw[..nl], x, x2, gl) + r.eval_grad_raw(&raw[nl..], x, x2, gr)
            }
            KernelExpr::Product(l, r) => {
                let nl = l.n_kernel_params();
                let (gl, gr) = grad.split_at_mut(nl);
                let lv = l.eval_grad_raw(&raw[..nl], x, x2, gl);
                let rv = r.eval_grad_raw(&raw[nl..], x, x2, gr);
                gl.iter_mut().for_each(|g| *g *= rv);
                gr.iter_mut().for_each(|g| *g *= lv);
                lv * rv
            }
        }
    }

    pub fn layout(&self) -> ParamLayout {
        param_layout(self)
    }
}

/// Evaluates `k(x, x2)` after checking that `params` was laid out for `expr`.
pub fn eval_kernel(expr: &KernelExpr, params: &HyperParams, x: f64, x2: f64) -> Result<f64> {
    params.check_layout(expr)?;
    Ok(expr.eval_raw(params.kernel_raw(), x, x2))
}

impl fmt::Display for KernelExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelExpr::Leaf(b) => write!(f, "{b}"),
            KernelExpr::Sum(l, r) => {
                write!(f, "{l}+")?;
                match **r {
                    KernelExpr::Sum(..) => write!(f, "({r})"),
                    _ => write!(f, "{r}"),
                }
            }
            KernelExpr::Product(l, r) => {
                match **l {
                    KernelExpr::Sum(..) => write!(f, "({l})")?,
                    _ => write!(f, "{l}")?,
                }
                f.write_str("*")?;
                match **r {
                    KernelExpr::Leaf(_) => write!(f, "{r}"),
                    _ => write!(f, "({r})"),
                }
            }
        }
    }
}

impl std::str::FromStr for KernelExpr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_kernel(s)
    }
}

impl Serialize for KernelExpr {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for KernelExpr {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_kernel(&text).map_err(serde::de::Error::custom)
    }
}

/// Parses `expr := term (('+'|'*') term)*`, `term := base | '(' expr ')'`,
/// with `*` binding tighter than `+` and both left-associative.
pub fn parse_kernel(text: &str) -> Result<KernelExpr> {
    let mut parser = Parser { src: text.as_bytes(), pos: 0 };
    let expr = parser.sum()?;
    parser.skip_ws();
    if parser.pos < parser.src.len() {
        return Err(parser.error("unexpected trailing input"));
    }
    Ok(expr)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn error(&self, message: &str) -> Error {
        Error::Syntax { offset: self.pos, message: message.to_string() }
    }

    fn sum(&mut self) -> Result<KernelExpr> {
        let mut left = self.product()?;
        while self.peek() == Some(b'+') {
            self.pos += 1;
            let right = self.product()?;
            left = KernelExpr::sum(left, right);
        }
        Ok(left)
    }

    fn product(&mut self) -> Result<KernelExpr> {
        let mut left = self.term()?;
        while self.peek() == Some(b'*') {
            self.pos += 1;
            let right = self.term()?;
            left = KernelExpr::product(left, right);
        }
        Ok(left)
    }

    fn term(&mut self) -> Result<KernelExpr> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.sum()?;
                if self.peek() != Some(b')') {
                    return Err(self.error("expected `)`"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(c) if c.is_ascii_alphanumeric() => {
                let start = self.pos;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or_default();
                BaseKernel::from_name(&name.to_ascii_uppercase())
                    .map(KernelExpr::Leaf)
                    .ok_or_else(|| Error::UnknownKernel { name: name.to_string(), offset: start })
            }
            Some(_) => Err(self.error("expected a base kernel or `(`")),
        }
    }
}

/// Mauna Loa presets: `k₁`, `k₁+k₂`, `k₁+k₂+k₃`, `k₁+k₂+k₃+k₄`.
pub fn mauna_kernel(level: u32) -> Result<KernelExpr> {
    const PRESETS: [BaseKernel; 4] = [BaseKernel::K1, BaseKernel::K2, BaseKernel::K3, BaseKernel::K4];
    if !(1..=4).contains(&level) {
        return Err(Error::InvalidArgument(format!("Mauna Loa level must be in 1..=4, got {level}")));
    }
    let mut expr = KernelExpr::Leaf(PRESETS[0]);
    for base in &PRESETS[1..level as usize] {
        expr = KernelExpr::sum(expr, KernelExpr::Leaf(*base));
    }
    Ok(expr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    /// Leaf index, or `None` for the trailing model noise.
    pub leaf: Option<usize>,
    pub role: ParamRole,
}

/// Binding of each raw hyperparameter to a leaf and a role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub slots: Vec<ParamSlot>,
    /// Whether the last slot is the model noise variance.
    pub model_noise: bool,
}

impl ParamLayout {
    /// `u`, the total number of hyperparameters.
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn n_kernel_params(&self) -> usize {
        self.slots.len() - usize::from(self.model_noise)
    }
}

pub fn param_layout(expr: &KernelExpr) -> ParamLayout {
    let mut slots = Vec::new();
    for (leaf, base) in expr.leaves().into_iter().enumerate() {
        slots.extend(base.roles().iter().map(|&role| ParamSlot { leaf: Some(leaf), role }));
    }
    let model_noise = !expr.has_intrinsic_noise();
    if model_noise {
        slots.push(ParamSlot { leaf: None, role: ParamRole::Noise });
    }
    ParamLayout { slots, model_noise }
}

/// Raw hyperparameter vector together with its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub raw: Vec<f64>,
    pub layout: ParamLayout,
}

impl HyperParams {
    pub fn new(layout: ParamLayout, raw: Vec<f64>) -> Result<Self> {
        if raw.len() != layout.len() {
            return Err(Error::Dimension { expected: layout.len(), got: raw.len() });
        }
        Ok(HyperParams { raw, layout })
    }

    pub fn zeros(expr: &KernelExpr) -> Self {
        let layout = param_layout(expr);
        HyperParams { raw: vec![0.0; layout.len()], layout }
    }

    /// Builds parameters from constrained (positive) values.
    pub fn from_constrained(expr: &KernelExpr, values: &[f64]) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::InvalidArgument(format!("constrained value {v} is not positive")));
        }
        HyperParams::new(param_layout(expr), values.iter().map(|&v| inverse_softplus(v)).collect())
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn constrained(&self) -> Vec<f64> {
        self.raw.iter().map(|&r| softplus(r)).collect()
    }

    pub fn kernel_raw(&self) -> &[f64] {
        &self.raw[..self.layout.n_kernel_params()]
    }

    /// Model noise variance, zero when the kernel carries its own.
    pub fn noise_variance(&self) -> f64 {
        if self.layout.model_noise {
            softplus(*self.raw.last().expect("layout has a noise slot"))
        } else {
            0.0
        }
    }

    pub fn check_layout(&self, expr: &KernelExpr) -> Result<()> {
        let expected = param_layout(expr);
        if self.layout != expected {
            return Err(Error::Structure(format!(
                "parameters laid out for {} slots do not match `{expr}` ({} slots)",
                self.layout.len(),
                expected.len()
            )));
        }
        if self.raw.len() != expected.len() {
            return Err(Error::Dimension { expected: expected.len(), got: self.raw.len() });
        }
        Ok(())
    }
}
