//! Finite marked configurations, pairings, counting functionals, samplers
//! for the marked Poisson and mixed marked Poisson measures, and the
//! bijection with compound (weighted atomic) measures.

use rand_distr::Distribution;

use crate::error::{Error, Result};
use crate::geometry::{MarkedPoint, SpatialVec};
use crate::levy::{LevyModel, Window};
use crate::montecarlo::StreamRng;
use crate::smooth::SupportBox;

/// Minimal pairwise distance between positions; closer pairs are rejected
/// (or resampled during sampling).
pub const EPS_COINCIDE: f64 = 1e-12;

/// A finite marked configuration: points with pairwise distinct positions,
/// canonically sorted so equal configurations compare equal value-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkedConfiguration {
    points: Vec<MarkedPoint>,
}

fn lex_cmp(a: &MarkedPoint, b: &MarkedPoint) -> std::cmp::Ordering {
    for i in 0..a.x.dim() {
        match a.x.get(i).partial_cmp(&b.x.get(i)).unwrap() {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    a.s.partial_cmp(&b.s).unwrap()
}

impl MarkedConfiguration {
    pub fn empty() -> Self {
        Self { points: Vec::new() }
    }

    /// Sorts and validates distinctness of positions.
    pub fn new(mut points: Vec<MarkedPoint>) -> Result<Self> {
        points.sort_by(lex_cmp);
        let cfg = Self { points };
        cfg.validate_distinct()?;
        Ok(cfg)
    }

    fn validate_distinct(&self) -> Result<()> {
        for i in 0..self.points.len() {
            for j in (i + 1)..self.points.len() {
                if self.points[i].x.sub(&self.points[j].x).norm() <= EPS_COINCIDE {
                    return Err(Error::Coincidence { eps: EPS_COINCIDE });
                }
            }
        }
        Ok(())
    }

    pub fn points(&self) -> &[MarkedPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `omega + epsilon_{(x,s)}`; errors when the position collides.
    pub fn with_point(&self, p: MarkedPoint) -> Result<Self> {
        for q in &self.points {
            if q.x.sub(&p.x).norm() <= EPS_COINCIDE {
                return Err(Error::Coincidence { eps: EPS_COINCIDE });
            }
        }
        let mut points = self.points.clone();
        let pos = points
            .binary_search_by(|probe| lex_cmp(probe, &p))
            .unwrap_or_else(|e| e);
        points.insert(pos, p);
        Ok(Self { points })
    }

    /// `<f, omega> = sum_{(x,s) in omega} f(x, s)`.
    pub fn pair<F>(&self, f: F) -> Result<f64>
    where
        F: Fn(&MarkedPoint) -> f64,
    {
        let mut acc = 0.0;
        for p in &self.points {
            let term = f(p);
            if !term.is_finite() {
                return Err(Error::NonFinitePairing);
            }
            acc += term;
        }
        Ok(acc)
    }

    /// `N_B(omega)`: number of points inside the box `B` of `X x R_+`.
    pub fn count(&self, b: &SupportBox) -> usize {
        self.points.iter().filter(|p| b.contains_point(p)).count()
    }

    /// CSV dump `x1,...,xd,s`, one point per row, in canonical order.
    pub fn to_csv(&self, dim: usize) -> String {
        let mut out = String::new();
        for i in 0..dim {
            out.push_str(&format!("x{},", i + 1));
        }
        out.push_str("s\n");
        for p in &self.points {
            for i in 0..dim {
                out.push_str(&format!("{},", p.x.get(i)));
            }
            out.push_str(&format!("{}\n", p.s));
        }
        out
    }
}

/// Draws `omega ~ pi_{z sigma~}` restricted to the window: Poisson point
/// count with mean `z sigma~(Λ_mk)`, then i.i.d. points. Colliding positions
/// (an almost-surely-null event) are resampled.
pub fn sample_poisson_scaled(
    model: &LevyModel,
    window: &Window,
    z: f64,
    rng: &mut StreamRng,
) -> Result<MarkedConfiguration> {
    if z < 0.0 || !z.is_finite() {
        return Err(Error::InvalidArgument(format!("intensity multiplier {z}")));
    }
    let mass = z * model.sigma_mass(window)?;
    if mass == 0.0 {
        return Ok(MarkedConfiguration::empty());
    }
    let n = if mass < 30.0 {
        // Knuth's product-of-uniforms method.
        let limit = (-mass).exp();
        let mut k = 0usize;
        let mut prod = rng.uniform();
        while prod > limit {
            k += 1;
            prod *= rng.uniform();
        }
        k
    } else {
        let poisson = rand_distr::Poisson::new(mass).expect("positive mean");
        poisson.sample(rng) as usize
    };
    let mut points: Vec<MarkedPoint> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut attempts = 0;
        loop {
            let p = model.sample_point(window, rng)?;
            let collides = points
                .iter()
                .any(|q| q.x.sub(&p.x).norm() <= EPS_COINCIDE);
            if !collides {
                points.push(p);
                break;
            }
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::Coincidence { eps: EPS_COINCIDE });
            }
        }
    }
    MarkedConfiguration::new(points)
}

/// `omega ~ pi_{sigma~}` on the window.
pub fn sample_poisson(
    model: &LevyModel,
    window: &Window,
    rng: &mut StreamRng,
) -> Result<MarkedConfiguration> {
    sample_poisson_scaled(model, window, 1.0, rng)
}

/// Finite discrete mixing law `nu = sum_k w_k delta_{z_k}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingLaw {
    atoms: Vec<(f64, f64)>,
}

impl MixingLaw {
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidArgument("mixing law needs at least one atom".into()));
        }
        let mut total = 0.0;
        for &(z, w) in &atoms {
            if z < 0.0 || !z.is_finite() || w <= 0.0 || !w.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "mixing atom (z = {z}, w = {w}) invalid"
                )));
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mixing weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { atoms })
    }

    /// Point mass at `z`.
    pub fn dirac(z: f64) -> Self {
        Self::new(vec![(z, 1.0)]).expect("valid atom")
    }

    /// The two-point mixture used throughout the experiments.
    pub fn half_half(z1: f64, z2: f64) -> Self {
        Self::new(vec![(z1, 0.5), (z2, 0.5)]).expect("valid atoms")
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    /// `∫ z dnu`.
    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|&(z, w)| z * w).sum()
    }

    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        let u = rng.uniform();
        let mut acc = 0.0;
        for &(z, w) in &self.atoms {
            acc += w;
            if u < acc {
                return z;
            }
        }
        self.atoms.last().unwrap().0
    }
}

/// Draws `z ~ nu`, then `omega ~ pi_{z sigma~}`; `z = 0` yields the empty
/// configuration.
pub fn sample_mixed(
    model: &LevyModel,
    law: &MixingLaw,
    window: &Window,
    rng: &mut StreamRng,
) -> Result<(f64, MarkedConfiguration)> {
    let z = law.sample(rng);
    let omega = sample_poisson_scaled(model, window, z, rng)?;
    Ok((z, omega))
}

/// A compound measure `sum_x s_x eps_x`: the bijective image of a marked
/// configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct CompoundMeasure {
    atoms: Vec<(SpatialVec, f64)>,
}

impl CompoundMeasure {
    pub fn atoms(&self) -> &[(SpatialVec, f64)] {
        &self.atoms
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// `<u, upsilon> = sum_x s_x u(x)` for a spatial test function.
    pub fn pair_spatial<F>(&self, u: F) -> Result<f64>
    where
        F: Fn(&SpatialVec) -> f64,
    {
        let mut acc = 0.0;
        for (x, s) in &self.atoms {
            let term = s * u(x);
            if !term.is_finite() {
                return Err(Error::NonFinitePairing);
            }
            acc += term;
        }
        Ok(acc)
    }
}

/// The map `I omega = sum s_x eps_x`.
pub fn to_compound(omega: &MarkedConfiguration) -> CompoundMeasure {
    CompoundMeasure {
        atoms: omega.points().iter().map(|p| (p.x, p.s)).collect(),
    }
}

/// Inverse of [`to_compound`]; exact round trip.
pub fn from_compound(upsilon: &CompoundMeasure) -> Result<MarkedConfiguration> {
    MarkedConfiguration::new(
        upsilon
            .atoms
            .iter()
            .map(|&(x, s)| MarkedPoint::new(x, s))
            .collect::<Result<Vec<_>>>()?,
    )
}
