//! The explicitly solvable base operator — Ornstein–Uhlenbeck in `x` tensor
//! Ornstein–Uhlenbeck in `log s` for the Gaussian-spatial, lognormal-mark
//! model — its truncated Hermite eigenexpansion, the heat semigroup, the
//! lifted semigroup on exponential configuration functionals, and the
//! ergodicity probe that separates pure Poisson laws from mixtures.

use crate::calculus::ConfigurationLaw;
use crate::configuration::MarkedConfiguration;
use crate::error::{Error, Result};
use crate::geometry::{MarkedPoint, SpatialVec};
use crate::levy::{LevyModel, MarkFamily, SpatialFamily, Window};
use crate::montecarlo::{pairwise_sum, RngSpec};
use crate::quadrature::gauss_hermite_normal;
use crate::smooth::{SmoothFn, SupportBox};

/// Probabilists' Hermite values `He_0(x) .. He_n(x)`.
pub fn hermite_values(n: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(1.0);
    if n == 0 {
        return out;
    }
    out.push(x);
    for k in 1..n {
        let next = x * out[k] - k as f64 * out[k - 1];
        out.push(next);
    }
    out
}

/// The product eigenmode `He_n(x) He_m(log s)` with closed-form derivatives;
/// an eigenfunction of the solvable base operator with eigenvalue `n + m`.
#[derive(Clone, Copy, Debug)]
pub struct HermiteModeFn {
    pub n: usize,
    pub m: usize,
}

impl SmoothFn for HermiteModeFn {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, x: &SpatialVec, s: f64) -> f64 {
        hermite_values(self.n, x.get(0))[self.n] * hermite_values(self.m, s.ln())[self.m]
    }

    fn grad_x(&self, x: &SpatialVec, s: f64) -> SpatialVec {
        let hx = hermite_values(self.n, x.get(0));
        let hu = hermite_values(self.m, s.ln());
        let d = if self.n == 0 {
            0.0
        } else {
            self.n as f64 * hx[self.n - 1]
        };
        SpatialVec::scalar(d * hu[self.m])
    }

    fn ds(&self, x: &SpatialVec, s: f64) -> f64 {
        let hx = hermite_values(self.n, x.get(0));
        let hu = hermite_values(self.m, s.ln());
        let du = if self.m == 0 {
            0.0
        } else {
            self.m as f64 * hu[self.m - 1]
        };
        hx[self.n] * du / s
    }

    fn d2s(&self, x: &SpatialVec, s: f64) -> f64 {
        let hx = hermite_values(self.n, x.get(0));
        let u = s.ln();
        let hu = hermite_values(self.m, u);
        let du = if self.m == 0 {
            0.0
        } else {
            self.m as f64 * hu[self.m - 1]
        };
        let d2u = if self.m < 2 {
            0.0
        } else {
            (self.m * (self.m - 1)) as f64 * hu[self.m - 2]
        };
        hx[self.n] * (d2u - du) / (s * s)
    }

    fn lap_x(&self, x: &SpatialVec, s: f64) -> f64 {
        let hx = hermite_values(self.n, x.get(0));
        let hu = hermite_values(self.m, s.ln());
        let d2 = if self.n < 2 {
            0.0
        } else {
            (self.n * (self.n - 1)) as f64 * hx[self.n - 2]
        };
        d2 * hu[self.m]
    }

    fn support(&self) -> Option<SupportBox> {
        None
    }
}

/// Spectral coefficients `c_{nm}` of a function in the `He_n(x) He_m(log s)`
/// basis, row-major over `(n, m)`.
#[derive(Clone, Debug)]
pub struct CoeffMatrix {
    c: Vec<f64>,
    n_x: usize,
    n_u: usize,
}

impl CoeffMatrix {
    pub fn coeff(&self, n: usize, m: usize) -> f64 {
        self.c[n * (self.n_u + 1) + m]
    }

    pub fn orders(&self) -> (usize, usize) {
        (self.n_x, self.n_u)
    }

    fn map(&self, f: impl Fn(usize, usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for n in 0..=self.n_x {
            for m in 0..=self.n_u {
                out.c[n * (self.n_u + 1) + m] = f(n, m, self.coeff(n, m));
            }
        }
        out
    }
}

/// Variance of the semigroup image at one probe time.
#[derive(Clone, Debug, PartialEq)]
pub struct VariancePoint {
    pub t: f64,
    pub variance: f64,
    /// Delta-method standard error of the variance estimate.
    pub stderr: f64,
}

/// Truncated eigenexpansion of the solvable base operator, powering
/// `exp(-t H)`.
#[derive(Clone, Debug)]
pub struct SpectralBaseOperator {
    model: LevyModel,
    mass: f64,
    n_x: usize,
    n_u: usize,
    nodes_x: Vec<f64>,
    weights_x: Vec<f64>,
    nodes_u: Vec<f64>,
    weights_u: Vec<f64>,
    /// `∫ He_n dN` by the rule, per order; the quadrature-oracle route to
    /// `∫ . dsigma~` for spectral functions.
    mode_integrals_x: Vec<f64>,
    mode_integrals_u: Vec<f64>,
    factorials: Vec<f64>,
    /// Evaluator validity half-width in `x` and `log s`; beyond it the
    /// truncated series is replaced by the equilibrium mode.
    safe_halfwidth: f64,
}

impl SpectralBaseOperator {
    /// Solvable model `mass * N(0,1) x Lognormal(0,1)` in one dimension,
    /// truncated at Hermite orders `(n_x, n_u)`.
    pub fn new(mass: f64, n_x: usize, n_u: usize, quad_order: usize) -> Result<Self> {
        if quad_order < n_x.max(n_u) + 2 {
            return Err(Error::InvalidArgument(
                "quadrature order too small for the requested truncation".into(),
            ));
        }
        let model = LevyModel::new(
            1,
            SpatialFamily::Gaussian {
                mean: SpatialVec::scalar(0.0),
                variance: 1.0,
                amplitude: mass,
            },
            MarkFamily::Lognormal {
                mu0: 0.0,
                mu1: 0.0,
                mu_region: None,
                sigma2: 1.0,
            },
        )?;
        let (nodes_x, weights_x) = gauss_hermite_normal(quad_order);
        let (nodes_u, weights_u) = gauss_hermite_normal(quad_order);
        let max_order = n_x.max(n_u);
        let mut factorials = vec![1.0; max_order + 1];
        for k in 1..=max_order {
            factorials[k] = factorials[k - 1] * k as f64;
        }
        let mode_int = |nodes: &[f64], weights: &[f64], order: usize| -> Vec<f64> {
            let mut acc = vec![0.0; order + 1];
            for (&x, &w) in nodes.iter().zip(weights) {
                for (k, h) in hermite_values(order, x).into_iter().enumerate() {
                    acc[k] += w * h;
                }
            }
            acc
        };
        Ok(Self {
            mode_integrals_x: mode_int(&nodes_x, &weights_x, n_x),
            mode_integrals_u: mode_int(&nodes_u, &weights_u, n_u),
            model,
            mass,
            n_x,
            n_u,
            nodes_x,
            weights_x,
            nodes_u,
            weights_u,
            factorials,
            safe_halfwidth: 4.0,
        })
    }

    pub fn model(&self) -> &LevyModel {
        &self.model
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// `c_{nm} = (phi, He_n He_m)_{L^2(sigma~)} / (n! m! mass)` by
    /// Gauss–Hermite quadrature in `(x, log s)`.
    pub fn spectral_coeffs(&self, phi: &dyn SmoothFn) -> CoeffMatrix {
        let nu1 = self.n_u + 1;
        let mut c = vec![0.0; (self.n_x + 1) * nu1];
        for (ix, &x) in self.nodes_x.iter().enumerate() {
            let hx = hermite_values(self.n_x, x);
            let wx = self.weights_x[ix];
            let xv = SpatialVec::scalar(x);
            for (iu, &u) in self.nodes_u.iter().enumerate() {
                let hu = hermite_values(self.n_u, u);
                let w = wx * self.weights_u[iu];
                let v = phi.value(&xv, u.exp());
                for n in 0..=self.n_x {
                    let vn = w * v * hx[n];
                    for m in 0..=self.n_u {
                        c[n * nu1 + m] += vn * hu[m];
                    }
                }
            }
        }
        for n in 0..=self.n_x {
            for m in 0..=self.n_u {
                c[n * nu1 + m] /= self.factorials[n] * self.factorials[m];
            }
        }
        CoeffMatrix {
            c,
            n_x: self.n_x,
            n_u: self.n_u,
        }
    }

    /// Energy `sum c^2 n! m! mass` carried by the top truncation shells
    /// `n + m >= max(n_x, n_u) - 1`; small values certify spectral
    /// representability of the function.
    pub fn tail_energy(&self, coeffs: &CoeffMatrix) -> f64 {
        let cutoff = self.n_x.max(self.n_u).saturating_sub(1);
        let mut acc = 0.0;
        for n in 0..=self.n_x {
            for m in 0..=self.n_u {
                if n + m >= cutoff {
                    let c = coeffs.coeff(n, m);
                    acc += c * c * self.factorials[n] * self.factorials[m] * self.mass;
                }
            }
        }
        acc
    }

    /// Parseval norm `||phi||^2_{L^2(sigma~)} = sum c^2 n! m! mass`.
    pub fn norm_sq(&self, coeffs: &CoeffMatrix) -> f64 {
        let mut acc = 0.0;
        for n in 0..=self.n_x {
            for m in 0..=self.n_u {
                let c = coeffs.coeff(n, m);
                acc += c * c * self.factorials[n] * self.factorials[m] * self.mass;
            }
        }
        acc
    }

    /// Semigroup action on coefficients: `c_{nm} -> e^{-(n+m)t} c_{nm}`.
    pub fn heat(&self, t: f64, coeffs: &CoeffMatrix) -> CoeffMatrix {
        coeffs.map(|n, m, c| (-((n + m) as f64) * t).exp() * c)
    }

    /// Generator action on coefficients: `c_{nm} -> (n+m) c_{nm}`.
    pub fn apply_generator(&self, coeffs: &CoeffMatrix) -> CoeffMatrix {
        coeffs.map(|n, m, c| (n + m) as f64 * c)
    }

    /// `∫ f dsigma~` for a spectral function, through the quadrature of each
    /// basis mode (exact for the truncated class up to roundoff).
    pub fn integral_dsigma(&self, coeffs: &CoeffMatrix) -> f64 {
        let mut acc = 0.0;
        for n in 0..=self.n_x {
            for m in 0..=self.n_u {
                acc += coeffs.coeff(n, m)
                    * self.mode_integrals_x[n]
                    * self.mode_integrals_u[m];
            }
        }
        acc * self.mass
    }

    /// Point evaluator for a coefficient matrix.
    pub fn spectral_fn(&self, coeffs: &CoeffMatrix) -> SpectralFn {
        SpectralFn {
            coeffs: coeffs.clone(),
            safe_halfwidth: self.safe_halfwidth,
        }
    }

    /// Per-point energy-shell profile `E_k = sum_{n+m=k} c_{nm} He_n He_m`,
    /// so that the heat image at the point is `sum_k e^{-kt} E_k`.
    pub fn eigen_profile(&self, coeffs: &CoeffMatrix, p: &MarkedPoint) -> Vec<f64> {
        let mut out = vec![0.0; self.n_x + self.n_u + 1];
        let x = p.x.get(0);
        let u = p.s.ln();
        if x.abs() > self.safe_halfwidth || u.abs() > self.safe_halfwidth {
            out[0] = coeffs.coeff(0, 0);
            return out;
        }
        let hx = hermite_values(self.n_x, x);
        let hu = hermite_values(self.n_u, u);
        for n in 0..=self.n_x {
            for m in 0..=self.n_u {
                out[n + m] += coeffs.coeff(n, m) * hx[n] * hu[m];
            }
        }
        out
    }

    /// The lifted heat semigroup on an exponential functional:
    /// `T(t) exp(<log(1+phi), .>)` evaluated at `omega`, including the
    /// `∫ (e^{-tH} - 1) phi dsigma~` correction (which the conservative
    /// solvable generator keeps at roundoff size).
    pub fn lifted_semigroup(
        &self,
        t: f64,
        coeffs: &CoeffMatrix,
        omega: &MarkedConfiguration,
    ) -> Result<f64> {
        let heated = self.heat(t, coeffs);
        let correction = self.integral_dsigma(&heated) - self.integral_dsigma(coeffs);
        let phi_t = self.spectral_fn(&heated);
        let mut log_pair = 0.0;
        for p in omega.points() {
            let v = 1.0 + phi_t.value_at(p);
            if v <= 0.0 {
                return Err(Error::Domain {
                    x: p.x.coords().to_vec(),
                    s: p.s,
                });
            }
            log_pair += v.ln();
        }
        Ok((log_pair - correction).exp())
    }

    /// `| -(d/dt) T(t)F|_{t=0} - <(1+phi)^{-1} H phi, omega> F(omega) |`
    /// with the time derivative by Richardson-extrapolated central
    /// differences (base step 1e-3) and `H phi` by the spectral route.
    pub fn generator_residual(
        &self,
        coeffs: &CoeffMatrix,
        omega: &MarkedConfiguration,
    ) -> Result<f64> {
        let h = 1e-3;
        let central = |step: f64| -> Result<f64> {
            Ok(
                (self.lifted_semigroup(step, coeffs, omega)?
                    - self.lifted_semigroup(-step, coeffs, omega)?)
                    / (2.0 * step),
            )
        };
        let derivative = (4.0 * central(h / 2.0)? - central(h)?) / 3.0;

        let phi = self.spectral_fn(coeffs);
        let h_phi = self.spectral_fn(&self.apply_generator(coeffs));
        let f_omega = self.lifted_semigroup(0.0, coeffs, omega)?;
        let drift = omega.pair(|p| {
            let denom = 1.0 + phi.value_at(p);
            h_phi.value_at(p) / denom
        })?;
        Ok((-derivative - drift * f_omega).abs())
    }

    /// Monte Carlo variance of `T(t) F` for `F = exp(<log(1+phi), .>)` on a
    /// time grid, under the given configuration law.
    #[allow(clippy::too_many_arguments)]
    pub fn ergodicity_probe(
        &self,
        law: &ConfigurationLaw,
        coeffs: &CoeffMatrix,
        window: &Window,
        t_grid: &[f64],
        n: usize,
        spec: RngSpec,
        workers: usize,
    ) -> Result<Vec<VariancePoint>> {
        let corrections: Vec<f64> = t_grid
            .iter()
            .map(|&t| self.integral_dsigma(&self.heat(t, coeffs)) - self.integral_dsigma(coeffs))
            .collect();

        // One pass per sample: eigen-profiles once, then every t reuses them.
        let k_max = self.n_x + self.n_u;
        let n_t = t_grid.len();
        let decay: Vec<Vec<f64>> = t_grid
            .iter()
            .map(|&t| (0..=k_max).map(|k| (-(k as f64) * t).exp()).collect())
            .collect();

        let mut values = vec![vec![f64::NAN; n]; n_t];
        let rows: Vec<Option<Vec<f64>>> = {
            let eval_one = |i: usize| -> Result<Vec<f64>> {
                let mut rng = RngSpec::new(spec.seed, spec.stream.wrapping_add(i as u64)).rng();
                let omega = law.sample(&self.model, window, &mut rng)?;
                let profiles: Vec<Vec<f64>> = omega
                    .points()
                    .iter()
                    .map(|p| self.eigen_profile(coeffs, p))
                    .collect();
                let mut row = Vec::with_capacity(n_t);
                for (it, d) in decay.iter().enumerate() {
                    let mut log_pair = 0.0;
                    for profile in &profiles {
                        let mut v = 0.0;
                        for k in 0..=k_max {
                            v += d[k] * profile[k];
                        }
                        let w = 1.0 + v;
                        if w <= 0.0 {
                            return Err(Error::Domain {
                                x: vec![],
                                s: f64::NAN,
                            });
                        }
                        log_pair += w.ln();
                    }
                    row.push((log_pair - corrections[it]).exp());
                }
                Ok(row)
            };
            if workers <= 1 {
                (0..n).map(|i| eval_one(i).ok()).collect()
            } else {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .expect("worker pool");
                use rayon::prelude::*;
                pool.install(|| (0..n).into_par_iter().map(|i| eval_one(i).ok()).collect())
            }
        };
        let mut skipped = 0usize;
        for (i, row) in rows.iter().enumerate() {
            match row {
                Some(r) => {
                    for (it, v) in r.iter().enumerate() {
                        values[it][i] = *v;
                    }
                }
                None => skipped += 1,
            }
        }
        if skipped * 100 > n {
            return Err(Error::TooManySkipped {
                skipped,
                total: n,
                limit: n / 100,
            });
        }
        Ok(t_grid
            .iter()
            .zip(values)
            .map(|(&t, mut col)| {
                col.retain(|v| v.is_finite());
                let nf = col.len() as f64;
                let mean = pairwise_sum(&col) / nf;
                let sq: Vec<f64> = col.iter().map(|v| (v - mean) * (v - mean)).collect();
                let variance = pairwise_sum(&sq) / nf;
                // Delta method: Var(hat V) ~ (m4 - V^2) / n.
                let quads: Vec<f64> = col
                    .iter()
                    .map(|v| {
                        let d = (v - mean) * (v - mean);
                        (d - variance) * (d - variance)
                    })
                    .collect();
                let stderr = (pairwise_sum(&quads) / (nf * nf)).sqrt().max(f64::MIN_POSITIVE);
                VariancePoint { t, variance, stderr }
            })
            .collect())
    }
}



/// Point evaluator of a truncated eigenexpansion. Valid on the calibration
/// box `|x|, |log s| <= safe_halfwidth`; beyond it the truncated series is
/// dominated by its highest mode and the evaluator returns the equilibrium
/// (constant) coefficient instead.
#[derive(Clone, Debug)]
pub struct SpectralFn {
    coeffs: CoeffMatrix,
    safe_halfwidth: f64,
}

impl SmoothFn for SpectralFn {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, x: &SpatialVec, s: f64) -> f64 {
        let xv = x.get(0);
        let u = s.ln();
        if xv.abs() > self.safe_halfwidth || u.abs() > self.safe_halfwidth {
            return self.coeffs.coeff(0, 0);
        }
        let (n_x, n_u) = self.coeffs.orders();
        let hx = hermite_values(n_x, xv);
        let hu = hermite_values(n_u, u);
        let mut acc = 0.0;
        for n in 0..=n_x {
            let mut inner = 0.0;
            for m in 0..=n_u {
                inner += self.coeffs.coeff(n, m) * hu[m];
            }
            acc += inner * hx[n];
        }
        acc
    }

    fn grad_x(&self, x: &SpatialVec, s: f64) -> SpatialVec {
        let xv = x.get(0);
        let u = s.ln();
        if xv.abs() > self.safe_halfwidth || u.abs() > self.safe_halfwidth {
            return SpatialVec::zeros(1);
        }
        let (n_x, n_u) = self.coeffs.orders();
        let hx = hermite_values(n_x, xv);
        let hu = hermite_values(n_u, u);
        let mut acc = 0.0;
        for n in 1..=n_x {
            let mut inner = 0.0;
            for m in 0..=n_u {
                inner += self.coeffs.coeff(n, m) * hu[m];
            }
            acc += inner * n as f64 * hx[n - 1];
        }
        SpatialVec::scalar(acc)
    }

    fn ds(&self, x: &SpatialVec, s: f64) -> f64 {
        let xv = x.get(0);
        let u = s.ln();
        if xv.abs() > self.safe_halfwidth || u.abs() > self.safe_halfwidth {
            return 0.0;
        }
        let (n_x, n_u) = self.coeffs.orders();
        let hx = hermite_values(n_x, xv);
        let hu = hermite_values(n_u, u);
        let mut acc = 0.0;
        for n in 0..=n_x {
            let mut inner = 0.0;
            for m in 1..=n_u {
                inner += self.coeffs.coeff(n, m) * m as f64 * hu[m - 1];
            }
            acc += inner * hx[n];
        }
        acc / s
    }

    fn d2s(&self, x: &SpatialVec, s: f64) -> f64 {
        let xv = x.get(0);
        let u = s.ln();
        if xv.abs() > self.safe_halfwidth || u.abs() > self.safe_halfwidth {
            return 0.0;
        }
        let (n_x, n_u) = self.coeffs.orders();
        let hx = hermite_values(n_x, xv);
        let hu = hermite_values(n_u, u);
        let mut f_u = 0.0;
        let mut f_uu = 0.0;
        for n in 0..=n_x {
            let mut du = 0.0;
            let mut d2u = 0.0;
            for m in 1..=n_u {
                du += self.coeffs.coeff(n, m) * m as f64 * hu[m - 1];
                if m >= 2 {
                    d2u += self.coeffs.coeff(n, m) * (m * (m - 1)) as f64 * hu[m - 2];
                }
            }
            f_u += du * hx[n];
            f_uu += d2u * hx[n];
        }
        (f_uu - f_u) / (s * s)
    }

    fn lap_x(&self, x: &SpatialVec, s: f64) -> f64 {
        let xv = x.get(0);
        let u = s.ln();
        if xv.abs() > self.safe_halfwidth || u.abs() > self.safe_halfwidth {
            return 0.0;
        }
        let (n_x, n_u) = self.coeffs.orders();
        let hx = hermite_values(n_x, xv);
        let hu = hermite_values(n_u, u);
        let mut acc = 0.0;
        for n in 2..=n_x {
            let mut inner = 0.0;
            for m in 0..=n_u {
                inner += self.coeffs.coeff(n, m) * hu[m];
            }
            acc += inner * (n * (n - 1)) as f64 * hx[n - 2];
        }
        acc
    }

    fn support(&self) -> Option<SupportBox> {
        None
    }
}
