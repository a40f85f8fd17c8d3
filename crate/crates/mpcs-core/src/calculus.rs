//! Differential calculus on the configuration space: cylinder functions,
//! intrinsic directional derivatives and gradients, logarithmic derivatives,
//! divergence, the Dirichlet form integrand and the intrinsic Dirichlet
//! operator, and the Lie-algebra generators.

use std::sync::Arc;

use crate::base_space::{
    act_flow_point, directional_derivative_base, FlowParams, LieElement,
};
use crate::configuration::{sample_mixed, sample_poisson, MarkedConfiguration, MixingLaw};
use crate::error::{Error, Result};
use crate::geometry::{MarkedPoint, SpatialVec};
use crate::levy::{LevyModel, Window};
use crate::montecarlo::{estimate, McEstimate, RngSpec, StreamRng};
use crate::smooth::{FnHandle, SmoothFn};

/// Which configuration law an expectation runs over.
#[derive(Clone, Debug)]
pub enum ConfigurationLaw {
    Poisson,
    Mixed(MixingLaw),
}

impl ConfigurationLaw {
    pub fn sample(
        &self,
        model: &LevyModel,
        window: &Window,
        rng: &mut StreamRng,
    ) -> Result<MarkedConfiguration> {
        match self {
            ConfigurationLaw::Poisson => sample_poisson(model, window, rng),
            ConfigurationLaw::Mixed(law) => Ok(sample_mixed(model, law, window, rng)?.1),
        }
    }
}

/// Outer function `g(r_1, ..., r_N)` with gradient and Hessian evaluators.
pub trait OuterEval: Send + Sync {
    fn value(&self, r: &[f64]) -> f64;
    fn grad(&self, r: &[f64]) -> Vec<f64>;
    /// Row-major `N x N` Hessian.
    fn hessian(&self, r: &[f64]) -> Vec<f64>;
}

/// Built-in outer families; `Custom` admits module-defined ones (the chaos
/// module plugs its Charlier outer in here).
#[derive(Clone)]
pub enum OuterFn {
    Constant(f64),
    /// `w . r + b`
    Linear { weights: Vec<f64>, offset: f64 },
    /// `r^T Q r / 2 + w . r + b`
    Quadratic {
        quad: Vec<f64>,
        weights: Vec<f64>,
        offset: f64,
    },
    /// `exp(w . r + b)`; polynomially bounded class.
    Exp { weights: Vec<f64>, offset: f64 },
    /// `sin(w . r + b)`; bounded with all derivatives bounded.
    Sin { weights: Vec<f64>, offset: f64 },
    Custom(Arc<dyn OuterEval>),
}

impl OuterFn {
    fn arity_weights(&self) -> Option<usize> {
        match self {
            OuterFn::Constant(_) => None,
            OuterFn::Linear { weights, .. }
            | OuterFn::Exp { weights, .. }
            | OuterFn::Sin { weights, .. }
            | OuterFn::Quadratic { weights, .. } => Some(weights.len()),
            OuterFn::Custom(_) => None,
        }
    }

    pub fn value(&self, r: &[f64]) -> f64 {
        match self {
            OuterFn::Constant(c) => *c,
            OuterFn::Linear { weights, offset } => dot(weights, r) + offset,
            OuterFn::Quadratic {
                quad,
                weights,
                offset,
            } => {
                let n = weights.len();
                let mut acc = *offset + dot(weights, r);
                for i in 0..n {
                    for j in 0..n {
                        acc += 0.5 * quad[i * n + j] * r[i] * r[j];
                    }
                }
                acc
            }
            OuterFn::Exp { weights, offset } => (dot(weights, r) + offset).exp(),
            OuterFn::Sin { weights, offset } => (dot(weights, r) + offset).sin(),
            OuterFn::Custom(f) => f.value(r),
        }
    }

    pub fn grad(&self, r: &[f64]) -> Vec<f64> {
        match self {
            OuterFn::Constant(_) => vec![0.0; r.len()],
            OuterFn::Linear { weights, .. } => weights.clone(),
            OuterFn::Quadratic { quad, weights, .. } => {
                let n = weights.len();
                let mut g = weights.clone();
                for i in 0..n {
                    for j in 0..n {
                        g[i] += 0.5 * (quad[i * n + j] + quad[j * n + i]) * r[j];
                    }
                }
                g
            }
            OuterFn::Exp { weights, offset } => {
                let v = (dot(weights, r) + offset).exp();
                weights.iter().map(|w| w * v).collect()
            }
            OuterFn::Sin { weights, offset } => {
                let c = (dot(weights, r) + offset).cos();
                weights.iter().map(|w| w * c).collect()
            }
            OuterFn::Custom(f) => f.grad(r),
        }
    }

    pub fn hessian(&self, r: &[f64]) -> Vec<f64> {
        let n = r.len();
        match self {
            OuterFn::Constant(_) | OuterFn::Linear { .. } => vec![0.0; n * n],
            OuterFn::Quadratic { quad, .. } => {
                let mut h = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        h[i * n + j] = 0.5 * (quad[i * n + j] + quad[j * n + i]);
                    }
                }
                h
            }
            OuterFn::Exp { weights, offset } => {
                let v = (dot(weights, r) + offset).exp();
                let mut h = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        h[i * n + j] = weights[i] * weights[j] * v;
                    }
                }
                h
            }
            OuterFn::Sin { weights, offset } => {
                let s = (dot(weights, r) + offset).sin();
                let mut h = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        h[i * n + j] = -weights[i] * weights[j] * s;
                    }
                }
                h
            }
            OuterFn::Custom(f) => f.hessian(r),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Whether the outer function is bounded with all derivatives bounded, or
/// merely polynomially bounded (exponential functionals).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FunctionClass {
    Bounded,
    Polynomial,
}

/// Cylinder function `F(omega) = g(<phi_1, omega>, ..., <phi_N, omega>)`.
#[derive(Clone)]
pub struct CylinderFunction {
    fns: Vec<FnHandle>,
    outer: OuterFn,
    class: FunctionClass,
}

impl CylinderFunction {
    pub fn new(fns: Vec<FnHandle>, outer: OuterFn, class: FunctionClass) -> Result<Self> {
        if fns.is_empty() {
            return Err(Error::InvalidArgument(
                "cylinder function needs at least one test function".into(),
            ));
        }
        if let Some(n) = outer.arity_weights() {
            if n != fns.len() {
                return Err(Error::InvalidArgument(format!(
                    "outer arity {n} does not match {} test functions",
                    fns.len()
                )));
            }
        }
        Ok(Self { fns, outer, class })
    }

    pub fn constant(c: f64, placeholder: FnHandle) -> Self {
        Self {
            fns: vec![placeholder],
            outer: OuterFn::Constant(c),
            class: FunctionClass::Bounded,
        }
    }

    /// `F = <phi, omega>`.
    pub fn linear(phi: FnHandle) -> Self {
        Self {
            fns: vec![phi],
            outer: OuterFn::Linear {
                weights: vec![1.0],
                offset: 0.0,
            },
            class: FunctionClass::Polynomial,
        }
    }

    /// `F = sin(sum_j w_j <phi_j, omega> + b)`; bounded class.
    pub fn sin_of(fns: Vec<FnHandle>, weights: Vec<f64>, offset: f64) -> Result<Self> {
        Self::new(
            fns,
            OuterFn::Sin {
                weights,
                offset,
            },
            FunctionClass::Bounded,
        )
    }

    /// `F = exp(<phi, omega>)`; polynomial class.
    pub fn exp_of(phi: FnHandle) -> Self {
        Self {
            fns: vec![phi],
            outer: OuterFn::Exp {
                weights: vec![1.0],
                offset: 0.0,
            },
            class: FunctionClass::Polynomial,
        }
    }

    pub fn test_functions(&self) -> &[FnHandle] {
        &self.fns
    }

    pub fn outer(&self) -> &OuterFn {
        &self.outer
    }

    pub fn class(&self) -> FunctionClass {
        self.class
    }

    pub fn pairings(&self, omega: &MarkedConfiguration) -> Result<Vec<f64>> {
        self.fns
            .iter()
            .map(|phi| omega.pair(|p| phi.value_at(p)))
            .collect()
    }

    pub fn eval(&self, omega: &MarkedConfiguration) -> Result<f64> {
        Ok(self.outer.value(&self.pairings(omega)?))
    }

    /// Pointwise product `F * G` as one cylinder function over the
    /// concatenated test-function lists.
    pub fn product(f: &Self, g: &Self) -> Self {
        let mut fns = f.fns.clone();
        fns.extend(g.fns.iter().cloned());
        let class = if f.class == FunctionClass::Bounded && g.class == FunctionClass::Bounded {
            FunctionClass::Bounded
        } else {
            FunctionClass::Polynomial
        };
        Self {
            fns,
            outer: OuterFn::Custom(Arc::new(ProductOuter {
                left: f.outer.clone(),
                right: g.outer.clone(),
                split: f.fns.len(),
            })),
            class,
        }
    }
}

struct ProductOuter {
    left: OuterFn,
    right: OuterFn,
    split: usize,
}

impl OuterEval for ProductOuter {
    fn value(&self, r: &[f64]) -> f64 {
        self.left.value(&r[..self.split]) * self.right.value(&r[self.split..])
    }

    fn grad(&self, r: &[f64]) -> Vec<f64> {
        let (ra, rb) = r.split_at(self.split);
        let (va, vb) = (self.left.value(ra), self.right.value(rb));
        let mut g: Vec<f64> = self.left.grad(ra).iter().map(|d| d * vb).collect();
        g.extend(self.right.grad(rb).iter().map(|d| d * va));
        g
    }

    fn hessian(&self, r: &[f64]) -> Vec<f64> {
        let n = r.len();
        let (ra, rb) = r.split_at(self.split);
        let (va, vb) = (self.left.value(ra), self.right.value(rb));
        let (ga, gb) = (self.left.grad(ra), self.right.grad(rb));
        let (ha, hb) = (self.left.hessian(ra), self.right.hessian(rb));
        let k = self.split;
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                h[i * n + j] = match (i < k, j < k) {
                    (true, true) => ha[i * k + j] * vb,
                    (false, false) => hb[(i - k) * (n - k) + (j - k)] * va,
                    (true, false) => ga[i] * gb[j - k],
                    (false, true) => gb[i - k] * ga[j],
                };
            }
        }
        h
    }
}

/// A tangent vector at `omega`: one `(u_x, r_x)` pair per point, indexed in
/// the configuration's canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    entries: Vec<(SpatialVec, f64)>,
}

impl TangentVector {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn entries(&self) -> &[(SpatialVec, f64)] {
        &self.entries
    }
}

/// `<V1, V2>_{T_omega} = sum over points of (<u1, u2> + r1 r2)`.
pub fn tangent_inner(v1: &TangentVector, v2: &TangentVector) -> Result<f64> {
    if v1.entries.len() != v2.entries.len() {
        return Err(Error::TangentIndexMismatch);
    }
    Ok(v1
        .entries
        .iter()
        .zip(&v2.entries)
        .map(|((u1, r1), (u2, r2))| u1.dot(u2) + r1 * r2)
        .sum())
}

/// Lift of `(v, a)` to a tangent vector at `omega`: `x -> (v(x), a(x))`.
pub fn lift_tangent(elem: &LieElement, omega: &MarkedConfiguration) -> TangentVector {
    TangentVector {
        entries: omega
            .points()
            .iter()
            .map(|p| (elem.v.value(&p.x), elem.a.value(&p.x)))
            .collect(),
    }
}

/// Directional derivative
/// `(grad^Omega_{(v,a)} F)(omega)
///   = sum_j d g/d r_j * <grad^{X x R_+}_{(v,a)} phi_j, omega>`.
pub fn dir_derivative(
    elem: &LieElement,
    f: &CylinderFunction,
    omega: &MarkedConfiguration,
) -> Result<f64> {
    let r = f.pairings(omega)?;
    let grad = f.outer.grad(&r);
    let mut acc = 0.0;
    for (j, phi) in f.fns.iter().enumerate() {
        if grad[j] != 0.0 {
            acc += grad[j]
                * omega.pair(|p| directional_derivative_base(elem, phi.as_ref(), p))?;
        }
    }
    Ok(acc)
}

/// Intrinsic gradient at `omega`: per point
/// `sum_j dg/dr_j (grad_x phi_j, s d_s phi_j)`.
pub fn gradient(f: &CylinderFunction, omega: &MarkedConfiguration) -> Result<TangentVector> {
    let r = f.pairings(omega)?;
    let grad = f.outer.grad(&r);
    let entries = omega
        .points()
        .iter()
        .map(|p| {
            let mut u = SpatialVec::zeros(p.x.dim());
            let mut mark = 0.0;
            for (j, phi) in f.fns.iter().enumerate() {
                if grad[j] != 0.0 {
                    u = u.axpy(grad[j], &phi.grad_x(&p.x, p.s));
                    mark += grad[j] * p.s * phi.ds(&p.x, p.s);
                }
            }
            (u, mark)
        })
        .collect();
    Ok(TangentVector { entries })
}

/// Logarithmic derivative `B_{(v,a)}(omega) = <beta_{(v,a)}, omega>`.
pub fn log_derivative_b(
    elem: &LieElement,
    model: &LevyModel,
    omega: &MarkedConfiguration,
) -> Result<f64> {
    let mut acc = 0.0;
    for p in omega.points() {
        acc += model.beta_point(elem, p)?;
    }
    Ok(acc)
}

/// Divergence of the cylinder vector field `V = sum_j G_j (v_j, a_j)`:
/// `sum_j grad_{(v_j,a_j)} G_j + sum_j B_{(v_j,a_j)} G_j`.
pub fn divergence_cyl(
    terms: &[(CylinderFunction, LieElement)],
    model: &LevyModel,
    omega: &MarkedConfiguration,
) -> Result<f64> {
    let mut acc = 0.0;
    for (g, elem) in terms {
        acc += dir_derivative(elem, g, omega)?;
        acc += log_derivative_b(elem, model, omega)? * g.eval(omega)?;
    }
    Ok(acc)
}

/// Tangent vector of the cylinder field `V = sum_j G_j (v_j, a_j)` at `omega`.
pub fn cylinder_field_tangent(
    terms: &[(CylinderFunction, LieElement)],
    omega: &MarkedConfiguration,
) -> Result<TangentVector> {
    let coeffs: Vec<f64> = terms
        .iter()
        .map(|(g, _)| g.eval(omega))
        .collect::<Result<Vec<_>>>()?;
    let entries = omega
        .points()
        .iter()
        .map(|p| {
            let mut u = SpatialVec::zeros(p.x.dim());
            let mut mark = 0.0;
            for ((_, elem), c) in terms.iter().zip(&coeffs) {
                u = u.axpy(*c, &elem.v.value(&p.x));
                mark += c * elem.a.value(&p.x);
            }
            (u, mark)
        })
        .collect();
    Ok(TangentVector { entries })
}

/// The integration-by-parts integrand
/// `(grad_{(v,a)} F) G + F (grad_{(v,a)} G) + F G B_{(v,a)}`; its
/// expectation vanishes under every measure in the IbP class.
pub fn ibp_integrand(
    f: &CylinderFunction,
    g: &CylinderFunction,
    elem: &LieElement,
    model: &LevyModel,
    omega: &MarkedConfiguration,
) -> Result<f64> {
    let df = dir_derivative(elem, f, omega)?;
    let dg = dir_derivative(elem, g, omega)?;
    let fv = f.eval(omega)?;
    let gv = g.eval(omega)?;
    let b = log_derivative_b(elem, model, omega)?;
    Ok(df * gv + fv * dg + fv * gv * b)
}

/// Monte Carlo estimate of the IbP residual over the chosen law.
#[allow(clippy::too_many_arguments)]
pub fn ibp_residual(
    f: &CylinderFunction,
    g: &CylinderFunction,
    elem: &LieElement,
    model: &LevyModel,
    window: &Window,
    law: &ConfigurationLaw,
    n: usize,
    spec: RngSpec,
    workers: usize,
) -> Result<McEstimate> {
    estimate(n, spec, workers, |rng| {
        let omega = law.sample(model, window, rng)?;
        ibp_integrand(f, g, elem, model, &omega)
    })
}

/// `<grad F, grad G>_{T_omega}`.
pub fn dirichlet_integrand(
    f: &CylinderFunction,
    g: &CylinderFunction,
    omega: &MarkedConfiguration,
) -> Result<f64> {
    tangent_inner(&gradient(f, omega)?, &gradient(g, omega)?)
}

/// The base Dirichlet operator applied to a smooth function at a point:
/// `H phi = -Lap_x phi - <grad_x log q, grad_x phi>
///          - s^2 d2s phi - 2 s ds phi - (s d_s log q)(s ds phi)`.
pub fn base_dirichlet_apply(model: &LevyModel, phi: &dyn SmoothFn, p: &MarkedPoint) -> f64 {
    let grad = phi.grad_x(&p.x, p.s);
    let ds = phi.ds(&p.x, p.s);
    let d2s = phi.d2s(&p.x, p.s);
    -phi.lap_x(&p.x, p.s)
        - model.grad_log_q(&p.x, p.s).dot(&grad)
        - p.s * p.s * d2s
        - 2.0 * p.s * ds
        - model.s_dlog_q(&p.x, p.s) * (p.s * ds)
}

/// The tangent inner product of two base gradients:
/// `<grad phi, grad xi>_{T(X x R_+)} = <grad_x phi, grad_x xi>
///  + (s ds phi)(s ds xi)`.
pub fn base_gradient_inner(phi: &dyn SmoothFn, xi: &dyn SmoothFn, p: &MarkedPoint) -> f64 {
    phi.grad_x(&p.x, p.s).dot(&xi.grad_x(&p.x, p.s))
        + p.s * p.s * phi.ds(&p.x, p.s) * xi.ds(&p.x, p.s)
}

/// The intrinsic Dirichlet operator on a cylinder function:
/// `(H F)(omega) = -sum_{j,k} d2g/dr_j dr_k <<grad phi_j, grad phi_k>, omega>
///                 + sum_j dg/dr_j <H phi_j, omega>`.
pub fn dirichlet_operator_apply(
    model: &LevyModel,
    f: &CylinderFunction,
    omega: &MarkedConfiguration,
) -> Result<f64> {
    let r = f.pairings(omega)?;
    let grad = f.outer.grad(&r);
    let hess = f.outer.hessian(&r);
    let n = f.fns.len();
    let mut acc = 0.0;
    for j in 0..n {
        for k in 0..n {
            if hess[j * n + k] != 0.0 {
                let pairing = omega.pair(|p| {
                    base_gradient_inner(f.fns[j].as_ref(), f.fns[k].as_ref(), p)
                })?;
                acc -= hess[j * n + k] * pairing;
            }
        }
    }
    for j in 0..n {
        if grad[j] != 0.0 {
            acc += grad[j]
                * omega.pair(|p| base_dirichlet_apply(model, f.fns[j].as_ref(), p))?;
        }
    }
    Ok(acc)
}

/// The (real coefficient of the) Lie-algebra generator applied to `F`:
/// `A_{(v,a)} F = grad_{(v,a)} F + (1/2) B_{(v,a)} F`. The quantum generator
/// is `R = (1/i) A`.
pub fn generator_coefficient(
    elem: &LieElement,
    model: &LevyModel,
    f: &CylinderFunction,
    omega: &MarkedConfiguration,
) -> Result<f64> {
    Ok(dir_derivative(elem, f, omega)?
        + 0.5 * log_derivative_b(elem, model, omega)? * f.eval(omega)?)
}

/// `R_{(v,a)} F` as a complex number `(re, im) = (0, -A F)`, since
/// `(1/i) A = -i A`.
pub fn generator_r(
    elem: &LieElement,
    model: &LevyModel,
    f: &CylinderFunction,
    omega: &MarkedConfiguration,
) -> Result<(f64, f64)> {
    Ok((0.0, -generator_coefficient(elem, model, f, omega)?))
}

/// Applies the one-parameter curve `(psi_t, theta_t)` of `(v, a)` to every
/// point of a configuration.
pub fn act_flow_config(
    elem: &LieElement,
    t: f64,
    omega: &MarkedConfiguration,
    params: &FlowParams,
) -> Result<MarkedConfiguration> {
    MarkedConfiguration::new(
        omega
            .points()
            .iter()
            .map(|p| act_flow_point(elem, t, p, params))
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Nested generator application by Richardson-extrapolated central
/// differences along the flow of `e_outer`: approximates
/// `(grad_{e_outer} (A_{e_inner} F))(omega)` for the commutator checks.
pub fn nested_generator_derivative(
    e_outer: &LieElement,
    e_inner: &LieElement,
    model: &LevyModel,
    f: &CylinderFunction,
    omega: &MarkedConfiguration,
    h: f64,
    params: &FlowParams,
) -> Result<f64> {
    let eval_at = |t: f64| -> Result<f64> {
        let moved = act_flow_config(e_outer, t, omega, params)?;
        generator_coefficient(e_inner, model, f, &moved)
    };
    let central = |step: f64| -> Result<f64> {
        Ok((eval_at(step)? - eval_at(-step)?) / (2.0 * step))
    };
    Ok((4.0 * central(h / 2.0)? - central(h)?) / 3.0)
}
