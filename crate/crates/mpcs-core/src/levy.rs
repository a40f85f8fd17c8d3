//! The Lévy measure `sigma~(dx, ds) = q(x, s) dx ds = rho(x) p(x, s) dx ds`:
//! built-in density families, window masses, logarithmic derivatives, and
//! exact samplers.
//!
//! Every built-in mark family is a probability density in `s`, so the mark
//! mass `p(x, R_+)` is one and the window mass reduces to the spatial
//! integral of `rho`.

use rand_distr::Distribution;
use statrs::function::erf::erf;

use crate::base_space::LieElement;
use crate::error::{Error, Result};
use crate::geometry::{BoxRegion, MarkedPoint, SpatialVec};
use crate::montecarlo::StreamRng;
use crate::quadrature::{integrate, QuadratureRule};
use crate::smooth::{BumpPiece, SmoothFn};

/// Bounded observation window `Λ` in `X`; marks range over all of `(0, inf)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    region: BoxRegion,
}

impl Window {
    pub fn new(region: BoxRegion) -> Self {
        Self { region }
    }

    pub fn from_intervals(intervals: &[(f64, f64)]) -> Result<Self> {
        Ok(Self::new(BoxRegion::from_intervals(intervals)?))
    }

    pub fn region(&self) -> &BoxRegion {
        &self.region
    }

    pub fn dim(&self) -> usize {
        self.region.dim()
    }
}

/// Spatial intensity family `rho`.
#[derive(Clone, Debug)]
pub enum SpatialFamily {
    /// `rho = level` on `region`, zero outside.
    Uniform { level: f64, region: BoxRegion },
    /// `rho(x) = amplitude * prod_i N(x_i; mean_i, variance)`.
    Gaussian {
        mean: SpatialVec,
        variance: f64,
        amplitude: f64,
    },
}

/// Mark density family `p(x, s)` on `(0, inf)`, normalized in `s`.
#[derive(Clone, Debug)]
pub enum MarkFamily {
    Exponential {
        rate: f64,
    },
    Gamma {
        shape: f64,
        rate: f64,
    },
    /// `log s ~ N(mu(x), sigma2)` with `mu(x) = mu0 + mu1 * bump(x)`;
    /// `mu1 = 0` gives position-independent marking.
    Lognormal {
        mu0: f64,
        mu1: f64,
        mu_region: Option<BoxRegion>,
        sigma2: f64,
    },
}

/// The Lévy measure `q(x, s) dx ds` with its logarithmic derivatives and
/// exact samplers.
#[derive(Clone, Debug)]
pub struct LevyModel {
    dim: usize,
    spatial: SpatialFamily,
    mark: MarkFamily,
    mu_pieces: Vec<BumpPiece>,
}

const SQRT_2PI: f64 = 2.5066282746310002;

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

impl LevyModel {
    pub fn new(dim: usize, spatial: SpatialFamily, mark: MarkFamily) -> Result<Self> {
        match &spatial {
            SpatialFamily::Uniform { level, region } => {
                if *level <= 0.0 || region.dim() != dim {
                    return Err(Error::InvalidModel(
                        "uniform family needs level > 0 and a box of the model dimension".into(),
                    ));
                }
            }
            SpatialFamily::Gaussian {
                mean,
                variance,
                amplitude,
            } => {
                if *variance <= 0.0 || *amplitude <= 0.0 || mean.dim() != dim {
                    return Err(Error::InvalidModel(
                        "gaussian family needs variance > 0 and amplitude > 0".into(),
                    ));
                }
            }
        }
        let mu_pieces = match &mark {
            MarkFamily::Exponential { rate } => {
                if *rate <= 0.0 {
                    return Err(Error::InvalidModel("exponential rate must be positive".into()));
                }
                Vec::new()
            }
            MarkFamily::Gamma { shape, rate } => {
                if *shape <= 0.0 || *rate <= 0.0 {
                    return Err(Error::InvalidModel("gamma parameters must be positive".into()));
                }
                Vec::new()
            }
            MarkFamily::Lognormal {
                sigma2,
                mu1,
                mu_region,
                ..
            } => {
                if *sigma2 <= 0.0 {
                    return Err(Error::InvalidModel("lognormal variance must be positive".into()));
                }
                match mu_region {
                    Some(region) if *mu1 != 0.0 => {
                        if region.dim() != dim {
                            return Err(Error::InvalidModel(
                                "lognormal mu bump region has wrong dimension".into(),
                            ));
                        }
                        (0..dim)
                            .map(|i| BumpPiece::poly(region.lo().get(i), region.hi().get(i)))
                            .collect()
                    }
                    _ => Vec::new(),
                }
            }
        };
        Ok(Self {
            dim,
            spatial,
            mark,
            mu_pieces,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spatial(&self) -> &SpatialFamily {
        &self.spatial
    }

    pub fn mark(&self) -> &MarkFamily {
        &self.mark
    }

    /// Spatial intensity `rho(x)`.
    pub fn rho(&self, x: &SpatialVec) -> f64 {
        match &self.spatial {
            SpatialFamily::Uniform { level, region } => {
                if region.contains(x) {
                    *level
                } else {
                    0.0
                }
            }
            SpatialFamily::Gaussian {
                mean,
                variance,
                amplitude,
            } => {
                let d = x.sub(mean);
                let norm = (SQRT_2PI * variance.sqrt()).powi(self.dim as i32);
                amplitude * (-0.5 * d.dot(&d) / variance).exp() / norm
            }
        }
    }

    fn grad_log_rho(&self, x: &SpatialVec) -> SpatialVec {
        match &self.spatial {
            SpatialFamily::Uniform { .. } => SpatialVec::zeros(self.dim),
            SpatialFamily::Gaussian { mean, variance, .. } => {
                x.sub(mean).scale(-1.0 / variance)
            }
        }
    }

    /// `mu(x)` and its gradient for the lognormal family.
    fn lognormal_mu(&self, x: &SpatialVec) -> (f64, SpatialVec) {
        if let MarkFamily::Lognormal { mu0, mu1, .. } = &self.mark {
            if self.mu_pieces.is_empty() {
                return (*mu0, SpatialVec::zeros(self.dim));
            }
            let vals: Vec<(f64, f64, f64)> = self
                .mu_pieces
                .iter()
                .enumerate()
                .map(|(i, p)| p.eval(x.get(i)))
                .collect();
            let prod: f64 = vals.iter().map(|v| v.0).product();
            let mut grad = SpatialVec::zeros(self.dim);
            for i in 0..self.dim {
                let mut d = *mu1 * vals[i].1;
                for (j, v) in vals.iter().enumerate() {
                    if j != i {
                        d *= v.0;
                    }
                }
                grad.set(i, d);
            }
            (mu0 + mu1 * prod, grad)
        } else {
            (0.0, SpatialVec::zeros(self.dim))
        }
    }

    /// Mark density `p(x, s)`.
    pub fn mark_density(&self, x: &SpatialVec, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        match &self.mark {
            MarkFamily::Exponential { rate } => rate * (-rate * s).exp(),
            MarkFamily::Gamma { shape, rate } => {
                let log_p = shape * rate.ln() + (shape - 1.0) * s.ln()
                    - rate * s
                    - ln_gamma_fn(*shape);
                log_p.exp()
            }
            MarkFamily::Lognormal { sigma2, .. } => {
                let (mu, _) = self.lognormal_mu(x);
                let u = s.ln();
                (-0.5 * (u - mu) * (u - mu) / sigma2).exp() / (s * sigma2.sqrt() * SQRT_2PI)
            }
        }
    }

    /// The density `q(x, s) = rho(x) p(x, s)`.
    pub fn q(&self, x: &SpatialVec, s: f64) -> f64 {
        self.rho(x) * self.mark_density(x, s)
    }

    /// `grad_x log q(x, s)`.
    pub fn grad_log_q(&self, x: &SpatialVec, s: f64) -> SpatialVec {
        let mut g = self.grad_log_rho(x);
        if let MarkFamily::Lognormal { sigma2, .. } = &self.mark {
            if !self.mu_pieces.is_empty() {
                let (mu, grad_mu) = self.lognormal_mu(x);
                g = g.axpy((s.ln() - mu) / sigma2, &grad_mu);
            }
        }
        g
    }

    /// `s d_s log q(x, s)` (equals `s d_s log p`, `rho` being mark-free).
    pub fn s_dlog_q(&self, x: &SpatialVec, s: f64) -> f64 {
        match &self.mark {
            MarkFamily::Exponential { rate } => -rate * s,
            MarkFamily::Gamma { shape, rate } => (shape - 1.0) - rate * s,
            MarkFamily::Lognormal { sigma2, .. } => {
                let (mu, _) = self.lognormal_mu(x);
                -(s.ln() - mu) / sigma2 - 1.0
            }
        }
    }

    /// Mark mass `p(x, R_+)`; one for every built-in family.
    pub fn mark_mass(&self, _x: &SpatialVec) -> f64 {
        1.0
    }

    /// `sigma~(Λ x R_+)`, in closed form per family.
    pub fn sigma_mass(&self, window: &Window) -> Result<f64> {
        if window.dim() != self.dim {
            return Err(Error::InvalidModel("window dimension mismatch".into()));
        }
        let mass = match &self.spatial {
            SpatialFamily::Uniform { level, region } => {
                level * region.intersection_volume(window.region())
            }
            SpatialFamily::Gaussian {
                mean,
                variance,
                amplitude,
            } => {
                let sd = variance.sqrt();
                let mut m = *amplitude;
                for i in 0..self.dim {
                    let lo = (window.region().lo().get(i) - mean.get(i)) / sd;
                    let hi = (window.region().hi().get(i) - mean.get(i)) / sd;
                    m *= normal_cdf(hi) - normal_cdf(lo);
                }
                m
            }
        };
        if !mass.is_finite() {
            return Err(Error::InvalidModel("non-finite window mass".into()));
        }
        Ok(mass)
    }

    /// Draws `x` from `rho` restricted to the window, then `s` from the
    /// normalized `p(x, .)`; the pair is distributed as
    /// `sigma~ / sigma~(Λ x R_+)`.
    pub fn sample_point(&self, window: &Window, rng: &mut StreamRng) -> Result<MarkedPoint> {
        let x = self.sample_spatial(window, rng)?;
        let s = self.sample_mark(&x, rng);
        MarkedPoint::new(x, s)
    }

    fn sample_spatial(&self, window: &Window, rng: &mut StreamRng) -> Result<SpatialVec> {
        match &self.spatial {
            SpatialFamily::Uniform { region, .. } => {
                let mut x = SpatialVec::zeros(self.dim);
                for i in 0..self.dim {
                    let lo = window.region().lo().get(i).max(region.lo().get(i));
                    let hi = window.region().hi().get(i).min(region.hi().get(i));
                    if hi <= lo {
                        return Err(Error::ZeroMassWindow);
                    }
                    x.set(i, lo + (hi - lo) * rng.uniform());
                }
                Ok(x)
            }
            SpatialFamily::Gaussian { mean, variance, .. } => {
                let sd = variance.sqrt();
                let normal = rand_distr::StandardNormal;
                for _ in 0..100_000 {
                    let mut x = SpatialVec::zeros(self.dim);
                    for i in 0..self.dim {
                        let z: f64 = normal.sample(rng);
                        x.set(i, mean.get(i) + sd * z);
                    }
                    if window.region().contains(&x) {
                        return Ok(x);
                    }
                }
                Err(Error::ZeroMassWindow)
            }
        }
    }

    fn sample_mark(&self, x: &SpatialVec, rng: &mut StreamRng) -> f64 {
        match &self.mark {
            MarkFamily::Exponential { rate } => -(1.0 - rng.uniform()).ln() / rate,
            MarkFamily::Gamma { shape, rate } => {
                let gamma = rand_distr::Gamma::new(*shape, 1.0 / rate).expect("validated");
                gamma.sample(rng)
            }
            MarkFamily::Lognormal { sigma2, .. } => {
                let (mu, _) = self.lognormal_mu(x);
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                (mu + sigma2.sqrt() * z).exp()
            }
        }
    }

    /// Logarithmic derivative of `sigma~` along `(v, a)`:
    /// `<grad_x log q, v> + div v + (s d_s log q) a + a`.
    pub fn beta_point(&self, elem: &LieElement, p: &MarkedPoint) -> Result<f64> {
        if self.q(&p.x, p.s) <= 0.0 {
            return Err(Error::Domain {
                x: p.x.coords().to_vec(),
                s: p.s,
            });
        }
        let a_val = elem.a.value(&p.x);
        Ok(self.grad_log_q(&p.x, p.s).dot(&elem.v.value(&p.x))
            + elem.v.divergence(&p.x)
            + self.s_dlog_q(&p.x, p.s) * a_val
            + a_val)
    }
}

fn ln_gamma_fn(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Quadrature residual of the base integration by parts formula:
/// `∫ (grad_{(v,a)} phi1) phi2 dsigma~ + ∫ phi1 (grad_{(v,a)} phi2) dsigma~
///  + ∫ phi1 phi2 beta_{(v,a)} dsigma~`.
///
/// Vanishes analytically; the returned magnitude is quadrature error.
pub fn base_ibp_residual(
    elem: &LieElement,
    phi1: &dyn SmoothFn,
    phi2: &dyn SmoothFn,
    model: &LevyModel,
    rule: &QuadratureRule,
) -> Result<f64> {
    base_ibp_residual_with_beta(elem, phi1, phi2, model, model, rule)
}

/// Same residual, with the logarithmic derivative taken from `beta_model`
/// while the integrals run against `model`. With `beta_model != model` this
/// is the negative control for the uniqueness of the dual measure.
pub fn base_ibp_residual_with_beta(
    elem: &LieElement,
    phi1: &dyn SmoothFn,
    phi2: &dyn SmoothFn,
    model: &LevyModel,
    beta_model: &LevyModel,
    rule: &QuadratureRule,
) -> Result<f64> {
    use crate::base_space::directional_derivative_base;
    integrate(
        |x, s| {
            let p = MarkedPoint { x: *x, s };
            let q = model.q(x, s);
            if q <= 0.0 {
                return 0.0;
            }
            let d1 = directional_derivative_base(elem, phi1, &p);
            let d2 = directional_derivative_base(elem, phi2, &p);
            let f1 = phi1.value(x, s);
            let f2 = phi2.value(x, s);
            let beta = beta_model.grad_log_q(x, s).dot(&elem.v.value(x))
                + elem.v.divergence(x)
                + (beta_model.s_dlog_q(x, s) + 1.0) * elem.a.value(x);
            (d1 * f2 + f1 * d2 + f1 * f2 * beta) * q
        },
        rule,
    )
}
