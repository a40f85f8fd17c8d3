//! Smooth functions on `X x R_+` with the derivative surface used across the
//! library: value, spatial gradient, spatial Laplacian, and the first two
//! mark derivatives.
//!
//! Test functions are separable products of compactly supported C^2 pieces
//! with closed-form derivatives; combinators (sums, products, powers,
//! coordinates, Gaussian profiles) cover everything the calculus, chaos and
//! spectral modules need without symbolic differentiation.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{BoxRegion, MarkedPoint, SpatialVec, MAX_DIM};

/// Support region `box x [s_lo, s_hi]` in `X x R_+`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupportBox {
    pub x: BoxRegion,
    pub s_lo: f64,
    pub s_hi: f64,
}

impl SupportBox {
    pub fn new(x: BoxRegion, s_lo: f64, s_hi: f64) -> Result<Self> {
        if !(s_lo > 0.0 && s_hi > s_lo && s_hi.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "support mark range must satisfy 0 < s_lo < s_hi < inf, got [{s_lo}, {s_hi}]"
            )));
        }
        Ok(Self { x, s_lo, s_hi })
    }

    pub fn contains(&self, x: &SpatialVec, s: f64) -> bool {
        self.x.contains(x) && s >= self.s_lo && s <= self.s_hi
    }

    pub fn contains_point(&self, p: &MarkedPoint) -> bool {
        self.contains(&p.x, p.s)
    }

    fn intersect(&self, other: &Self) -> Option<Self> {
        let mut lo = *self.x.lo();
        let mut hi = *self.x.hi();
        for i in 0..lo.dim() {
            lo.set(i, lo.get(i).max(other.x.lo().get(i)));
            hi.set(i, hi.get(i).min(other.x.hi().get(i)));
            if lo.get(i) >= hi.get(i) {
                return None;
            }
        }
        let s_lo = self.s_lo.max(other.s_lo);
        let s_hi = self.s_hi.min(other.s_hi);
        if s_lo >= s_hi {
            return None;
        }
        Some(Self {
            x: BoxRegion::new(lo, hi).ok()?,
            s_lo,
            s_hi,
        })
    }
}

/// Shape of a one-dimensional compactly supported piece on `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PieceShape {
    /// `(1 - u^2)^3`, the polynomial bump.
    PolyBump,
    /// Identically one on `|u| <= flat`, then a quintic smoothstep down to
    /// zero at `|u| = 1`. C^2 everywhere.
    Plateau { flat: f64 },
}

/// One factor of a separable test function: a C^2 piece affinely mapped onto
/// `[center - radius, center + radius]`, raised to an integer power.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BumpPiece {
    pub center: f64,
    pub radius: f64,
    pub shape: PieceShape,
    pub power: u32,
}

impl BumpPiece {
    pub fn poly(lo: f64, hi: f64) -> Self {
        Self {
            center: 0.5 * (lo + hi),
            radius: 0.5 * (hi - lo),
            shape: PieceShape::PolyBump,
            power: 1,
        }
    }

    pub fn plateau(lo: f64, hi: f64, flat: f64) -> Self {
        assert!((0.0..1.0).contains(&flat));
        Self {
            center: 0.5 * (lo + hi),
            radius: 0.5 * (hi - lo),
            shape: PieceShape::Plateau { flat },
            power: 1,
        }
    }

    /// Value and first two derivatives with respect to the raw coordinate.
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let u = (x - self.center) / self.radius;
        if u.abs() >= 1.0 {
            return (0.0, 0.0, 0.0);
        }
        let (b, mut db, mut d2b) = match self.shape {
            PieceShape::PolyBump => {
                let w = 1.0 - u * u;
                let b = w * w * w;
                let db = -6.0 * u * w * w;
                let d2b = -6.0 * w * w + 24.0 * u * u * w;
                (b, db, d2b)
            }
            PieceShape::Plateau { flat } => {
                let au = u.abs();
                if au <= flat {
                    (1.0, 0.0, 0.0)
                } else {
                    let scale = 1.0 / (1.0 - flat);
                    let t = (au - flat) * scale;
                    // 1 - quintic smoothstep: C^2 joins at both ends.
                    let b = 1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
                    let dbdt = -30.0 * t * t * (1.0 - t) * (1.0 - t);
                    let d2bdt2 = -60.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
                    let sgn = u.signum();
                    (b, dbdt * scale * sgn, d2bdt2 * scale * scale)
                }
            }
        };
        db /= self.radius;
        d2b /= self.radius * self.radius;
        if self.power > 1 {
            let k = self.power as f64;
            let bk2 = b.powi(self.power as i32 - 2);
            let bk1 = bk2 * b;
            let bk = bk1 * b;
            let dfull = k * bk1 * db;
            let d2full = k * (k - 1.0) * bk2 * db * db + k * bk1 * d2b;
            (bk, dfull, d2full)
        } else {
            (b, db, d2b)
        }
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.center - self.radius, self.center + self.radius)
    }
}

/// The derivative surface every module consumes.
pub trait SmoothFn: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &SpatialVec, s: f64) -> f64;
    fn grad_x(&self, x: &SpatialVec, s: f64) -> SpatialVec;
    fn ds(&self, x: &SpatialVec, s: f64) -> f64;
    fn d2s(&self, x: &SpatialVec, s: f64) -> f64;
    fn lap_x(&self, x: &SpatialVec, s: f64) -> f64;
    /// `None` means the function is not compactly supported.
    fn support(&self) -> Option<SupportBox>;

    fn value_at(&self, p: &MarkedPoint) -> f64 {
        self.value(&p.x, p.s)
    }
}

/// Shared handle to a smooth function.
pub type FnHandle = Arc<dyn SmoothFn>;

/// Separable test function `A * prod_i chi_i(x_i) * eta(s)` built from C^2
/// pieces; an element of the class the calculus is defined on.
#[derive(Clone, Debug)]
pub struct TestFunction {
    amplitude: f64,
    spatial: [BumpPiece; MAX_DIM],
    dim: usize,
    mark: BumpPiece,
    support: SupportBox,
}

impl TestFunction {
    pub fn new(amplitude: f64, spatial: &[BumpPiece], mark: BumpPiece) -> Result<Self> {
        let dim = spatial.len();
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(Error::InvalidArgument("spatial dimension must be 1..=3".into()));
        }
        let (s_lo, s_hi) = mark.interval();
        let intervals: Vec<(f64, f64)> = spatial.iter().map(|p| p.interval()).collect();
        let support = SupportBox::new(BoxRegion::from_intervals(&intervals)?, s_lo, s_hi)?;
        let mut pieces = [spatial[0]; MAX_DIM];
        pieces[..dim].copy_from_slice(spatial);
        Ok(Self {
            amplitude,
            spatial: pieces,
            dim,
            mark,
            support,
        })
    }

    /// Bumps on the given intervals, unit amplitude by default.
    pub fn bump(
        amplitude: f64,
        x_intervals: &[(f64, f64)],
        s_interval: (f64, f64),
    ) -> Result<Self> {
        let spatial: Vec<BumpPiece> = x_intervals
            .iter()
            .map(|&(lo, hi)| BumpPiece::poly(lo, hi))
            .collect();
        Self::new(
            amplitude,
            &spatial,
            BumpPiece::poly(s_interval.0, s_interval.1),
        )
    }

    /// Plateau profile in every axis: exactly `amplitude` on the inner
    /// `flat` fraction of the box.
    pub fn plateau(
        amplitude: f64,
        x_intervals: &[(f64, f64)],
        s_interval: (f64, f64),
        flat: f64,
    ) -> Result<Self> {
        let spatial: Vec<BumpPiece> = x_intervals
            .iter()
            .map(|&(lo, hi)| BumpPiece::plateau(lo, hi, flat))
            .collect();
        Self::new(
            amplitude,
            &spatial,
            BumpPiece::plateau(s_interval.0, s_interval.1, flat),
        )
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// Upper bound for `|phi|` (pieces are bounded by one).
    pub fn sup_norm_bound(&self) -> f64 {
        self.amplitude.abs()
    }

    #[inline]
    fn pieces(&self, x: &SpatialVec, s: f64) -> Option<([(f64, f64, f64); MAX_DIM], (f64, f64, f64))> {
        if !self.support.contains(x, s) {
            return None;
        }
        let mut sp = [(0.0, 0.0, 0.0); MAX_DIM];
        for i in 0..self.dim {
            sp[i] = self.spatial[i].eval(x.get(i));
        }
        Some((sp, self.mark.eval(s)))
    }
}

impl SmoothFn for TestFunction {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &SpatialVec, s: f64) -> f64 {
        match self.pieces(x, s) {
            None => 0.0,
            Some((sp, m)) => {
                let mut v = self.amplitude * m.0;
                for piece in sp.iter().take(self.dim) {
                    v *= piece.0;
                }
                v
            }
        }
    }

    fn grad_x(&self, x: &SpatialVec, s: f64) -> SpatialVec {
        match self.pieces(x, s) {
            None => SpatialVec::zeros(self.dim),
            Some((sp, m)) => {
                let mut g = SpatialVec::zeros(self.dim);
                for i in 0..self.dim {
                    let mut v = self.amplitude * m.0 * sp[i].1;
                    for (j, piece) in sp.iter().enumerate().take(self.dim) {
                        if j != i {
                            v *= piece.0;
                        }
                    }
                    g.set(i, v);
                }
                g
            }
        }
    }

    fn ds(&self, x: &SpatialVec, s: f64) -> f64 {
        match self.pieces(x, s) {
            None => 0.0,
            Some((sp, m)) => {
                let mut v = self.amplitude * m.1;
                for piece in sp.iter().take(self.dim) {
                    v *= piece.0;
                }
                v
            }
        }
    }

    fn d2s(&self, x: &SpatialVec, s: f64) -> f64 {
        match self.pieces(x, s) {
            None => 0.0,
            Some((sp, m)) => {
                let mut v = self.amplitude * m.2;
                for piece in sp.iter().take(self.dim) {
                    v *= piece.0;
                }
                v
            }
        }
    }

    fn lap_x(&self, x: &SpatialVec, s: f64) -> f64 {
        match self.pieces(x, s) {
            None => 0.0,
            Some((sp, m)) => {
                let mut acc = 0.0;
                for i in 0..self.dim {
                    let mut v = sp[i].2;
                    for (j, piece) in sp.iter().enumerate().take(self.dim) {
                        if j != i {
                            v *= piece.0;
                        }
                    }
                    acc += v;
                }
                self.amplitude * m.0 * acc
            }
        }
    }

    fn support(&self) -> Option<SupportBox> {
        Some(self.support)
    }
}

/// Pointwise integer power `f^k` with chain-rule derivatives.
#[derive(Clone)]
pub struct PowFn {
    inner: FnHandle,
    k: u32,
}

impl PowFn {
    pub fn new(inner: FnHandle, k: u32) -> Self {
        assert!(k >= 1);
        Self { inner, k }
    }
}

impl SmoothFn for PowFn {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, x: &SpatialVec, s: f64) -> f64 {
        self.inner.value(x, s).powi(self.k as i32)
    }

    fn grad_x(&self, x: &SpatialVec, s: f64) -> SpatialVec {
        let f = self.inner.value(x, s);
        let k = self.k as f64;
        self.inner
            .grad_x(x, s)
            .scale(k * f.powi(self.k as i32 - 1))
    }

    fn ds(&self, x: &SpatialVec, s: f64) -> f64 {
        let f = self.inner.value(x, s);
        self.k as f64 * f.powi(self.k as i32 - 1) * self.inner.ds(x, s)
    }

    fn d2s(&self, x: &SpatialVec, s: f64) -> f64 {
        let f = self.inner.value(x, s);
        let k = self.k as f64;
        let ds = self.inner.ds(x, s);
        k * (k - 1.0) * f.powi(self.k as i32 - 2) * ds * ds
            + k * f.powi(self.k as i32 - 1) * self.inner.d2s(x, s)
    }

    fn lap_x(&self, x: &SpatialVec, s: f64) -> f64 {
        let f = self.inner.value(x, s);
        let k = self.k as f64;
        let g = self.inner.grad_x(x, s);
        k * (k - 1.0) * f.powi(self.k as i32 - 2) * g.dot(&g)
            + k * f.powi(self.k as i32 - 1) * self.inner.lap_x(x, s)
    }

    fn support(&self) -> Option<SupportBox> {
        self.inner.support()
    }
}

/// Pointwise product with product-rule derivatives.
#[derive(Clone)]
pub struct MulFn {
    a: FnHandle,
    b: FnHandle,
}

impl MulFn {
    pub fn new(a: FnHandle, b: FnHandle) -> Self {
        assert_eq!(a.dim(), b.dim());
        Self { a, b }
    }
}

impl SmoothFn for MulFn {
    fn dim(&self) -> usize {
        self.a.dim()
    }

    fn value(&self, x: &SpatialVec, s: f64) -> f64 {
        self.a.value(x, s) * self.b.value(x, s)
    }

    fn grad_x(&self, x: &SpatialVec, s: f64) -> SpatialVec {
        let (fa, fb) = (self.a.value(x, s), self.b.value(x, s));
        self.a
            .grad_x(x, s)
            .scale(fb)
            .add(&self.b.grad_x(x, s).scale(fa))
    }

    fn ds(&self, x: &SpatialVec, s: f64) -> f64 {
        self.a.value(x, s) * self.b.ds(x, s) + self.b.value(x, s) * self.a.ds(x, s)
    }

    fn d2s(&self, x: &SpatialVec, s: f64) -> f64 {
        self.a.value(x, s) * self.b.d2s(x, s)
            + 2.0 * self.a.ds(x, s) * self.b.ds(x, s)
            + self.b.value(x, s) * self.a.d2s(x, s)
    }

    fn lap_x(&self, x: &SpatialVec, s: f64) -> f64 {
        self.a.value(x, s) * self.b.lap_x(x, s)
            + 2.0 * self.a.grad_x(x, s).dot(&self.b.grad_x(x, s))
            + self.b.value(x, s) * self.a.lap_x(x, s)
    }

    fn support(&self) -> Option<SupportBox> {
        match (self.a.support(), self.b.support()) {
            (Some(sa), Some(sb)) => sa.intersect(&sb),
            (Some(sa), None) => Some(sa),
            (None, Some(sb)) => Some(sb),
            (None, None) => None,
        }
    }
}

/// Linear combination `sum_i c_i f_i`.
#[derive(Clone)]
pub struct SumFn {
    terms: Vec<(f64, FnHandle)>,
    dim: usize,
}

impl SumFn {
    pub fn new(terms: Vec<(f64, FnHandle)>) -> Self {
        assert!(!terms.is_empty());
        let dim = terms[0].1.dim();
        assert!(terms.iter().all(|(_, f)| f.dim() == dim));
        Self { terms, dim }
    }
}

impl SmoothFn for SumFn {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &SpatialVec, s: f64) -> f64 {
        self.terms.iter().map(|(c, f)| c * f.value(x, s)).sum()
    }

    fn grad_x(&self, x: &SpatialVec, s: f64) -> SpatialVec {
        let mut g = SpatialVec::zeros(self.dim);
        for (c, f) in &self.terms {
            g = g.axpy(*c, &f.grad_x(x, s));
        }
        g
    }

    fn ds(&self, x: &SpatialVec, s: f64) -> f64 {
        self.terms.iter().map(|(c, f)| c * f.ds(x, s)).sum()
    }

    fn d2s(&self, x: &SpatialVec, s: f64) -> f64 {
        self.terms.iter().map(|(c, f)| c * f.d2s(x, s)).sum()
    }

    fn lap_x(&self, x: &SpatialVec, s: f64) -> f64 {
        self.terms.iter().map(|(c, f)| c * f.lap_x(x, s)).sum()
    }

    fn support(&self) -> Option<SupportBox> {
        // Union of supports; None as soon as one term is global.
        let mut acc: Option<SupportBox> = None;
        for (_, f) in &self.terms {
            match (acc, f.support()) {
                (_, None) => return None,
                (None, Some(s)) => acc = Some(s),
                (Some(a), Some(s)) => {
                    acc = Some(SupportBox {
                        x: a.x.union(&s.x),
                        s_lo: a.s_lo.min(s.s_lo),
                        s_hi: a.s_hi.max(s.s_hi),
                    })
                }
            }
        }
        acc
    }
}

/// The coordinate function `(x, s) -> x_axis`.
#[derive(Clone, Copy, Debug)]
pub struct CoordFn {
    pub axis: usize,
    pub dim: usize,
}

impl SmoothFn for CoordFn {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &SpatialVec, _s: f64) -> f64 {
        x.get(self.axis)
    }

    fn grad_x(&self, _x: &SpatialVec, _s: f64) -> SpatialVec {
        let mut g = SpatialVec::zeros(self.dim);
        g.set(self.axis, 1.0);
        g
    }

    fn ds(&self, _x: &SpatialVec, _s: f64) -> f64 {
        0.0
    }

    fn d2s(&self, _x: &SpatialVec, _s: f64) -> f64 {
        0.0
    }

    fn lap_x(&self, _x: &SpatialVec, _s: f64) -> f64 {
        0.0
    }

    fn support(&self) -> Option<SupportBox> {
        None
    }
}

/// One axis factor of a [`GaussProfile`]: `(x - root)^k * exp(-(x-c)^2/(2 w^2))`
/// with `k` zero or one.
#[derive(Clone, Copy, Debug)]
pub struct GaussFactor {
    pub center: f64,
    pub width: f64,
    pub linear_root: Option<f64>,
}

impl GaussFactor {
    pub fn new(center: f64, width: f64) -> Self {
        Self {
            center,
            width,
            linear_root: None,
        }
    }

    pub fn linear(center: f64, width: f64, root: f64) -> Self {
        Self {
            center,
            width,
            linear_root: Some(root),
        }
    }

    fn eval(&self, x: f64) -> (f64, f64, f64) {
        let z = (x - self.center) / (self.width * self.width);
        let g = (-0.5 * (x - self.center) * z).exp();
        let dg = -z * g;
        let d2g = (z * z - 1.0 / (self.width * self.width)) * g;
        match self.linear_root {
            None => (g, dg, d2g),
            Some(r) => {
                let p = x - r;
                (p * g, g + p * dg, 2.0 * dg + p * d2g)
            }
        }
    }
}

/// Separable Gaussian profile in `(x, log s)`: smooth, globally defined, with
/// rapidly decreasing spectral coefficients under the solvable base operator.
#[derive(Clone, Debug)]
pub struct GaussProfile {
    pub amplitude: f64,
    pub spatial: Vec<GaussFactor>,
    pub mark: GaussFactor,
}

impl GaussProfile {
    pub fn new(amplitude: f64, spatial: Vec<GaussFactor>, mark: GaussFactor) -> Self {
        assert!((1..=MAX_DIM).contains(&spatial.len()));
        Self {
            amplitude,
            spatial,
            mark,
        }
    }

    #[inline]
    fn parts(&self, x: &SpatialVec, s: f64) -> (Vec<(f64, f64, f64)>, (f64, f64, f64)) {
        let sp = self
            .spatial
            .iter()
            .enumerate()
            .map(|(i, f)| f.eval(x.get(i)))
            .collect();
        (sp, self.mark.eval(s.ln()))
    }
}

impl SmoothFn for GaussProfile {
    fn dim(&self) -> usize {
        self.spatial.len()
    }

    fn value(&self, x: &SpatialVec, s: f64) -> f64 {
        let (sp, m) = self.parts(x, s);
        self.amplitude * m.0 * sp.iter().map(|p| p.0).product::<f64>()
    }

    fn grad_x(&self, x: &SpatialVec, s: f64) -> SpatialVec {
        let (sp, m) = self.parts(x, s);
        let mut g = SpatialVec::zeros(self.dim());
        for i in 0..self.dim() {
            let mut v = self.amplitude * m.0 * sp[i].1;
            for (j, p) in sp.iter().enumerate() {
                if j != i {
                    v *= p.0;
                }
            }
            g.set(i, v);
        }
        g
    }

    fn ds(&self, x: &SpatialVec, s: f64) -> f64 {
        // eta(s) = f(log s): d/ds = f'(u)/s.
        let (sp, m) = self.parts(x, s);
        self.amplitude * (m.1 / s) * sp.iter().map(|p| p.0).product::<f64>()
    }

    fn d2s(&self, x: &SpatialVec, s: f64) -> f64 {
        let (sp, m) = self.parts(x, s);
        self.amplitude * ((m.2 - m.1) / (s * s)) * sp.iter().map(|p| p.0).product::<f64>()
    }

    fn lap_x(&self, x: &SpatialVec, s: f64) -> f64 {
        let (sp, m) = self.parts(x, s);
        let mut acc = 0.0;
        for i in 0..self.dim() {
            let mut v = sp[i].2;
            for (j, p) in sp.iter().enumerate() {
                if j != i {
                    v *= p.0;
                }
            }
            acc += v;
        }
        self.amplitude * m.0 * acc
    }

    fn support(&self) -> Option<SupportBox> {
        None
    }
}

#[cfg(test)]
pub(crate) fn fd_consistency_max_rel_error(
    f: &dyn SmoothFn,
    x: &SpatialVec,
    s: f64,
    h: f64,
) -> f64 {
    let scale = |a: f64| a.abs().max(1e-3);
    let mut worst: f64 = 0.0;

    for i in 0..f.dim() {
        let mut xp = *x;
        xp.set(i, x.get(i) + h);
        let mut xm = *x;
        xm.set(i, x.get(i) - h);
        let fd = (f.value(&xp, s) - f.value(&xm, s)) / (2.0 * h);
        let g = f.grad_x(x, s).get(i);
        worst = worst.max((fd - g).abs() / scale(g));
    }

    let fd_s = (f.value(x, s + h) - f.value(x, s - h)) / (2.0 * h);
    worst = worst.max((fd_s - f.ds(x, s)).abs() / scale(f.ds(x, s)));

    let fd_ss = (f.value(x, s + h) - 2.0 * f.value(x, s) + f.value(x, s - h)) / (h * h);
    worst = worst.max((fd_ss - f.d2s(x, s)).abs() / scale(f.d2s(x, s)));

    let mut lap_fd = 0.0;
    for i in 0..f.dim() {
        let mut xp = *x;
        xp.set(i, x.get(i) + h);
        let mut xm = *x;
        xm.set(i, x.get(i) - h);
        lap_fd += (f.value(&xp, s) - 2.0 * f.value(x, s) + f.value(&xm, s)) / (h * h);
    }
    worst.max((lap_fd - f.lap_x(x, s)).abs() / scale(f.lap_x(x, s)))
}
