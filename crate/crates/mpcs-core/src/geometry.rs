//! Small fixed-capacity vectors, matrices and boxes for the base space
//! `X = R^d` with `d <= 3`.
//!
//! The dimension is a runtime value; storage is inline (`Copy`, no heap) so
//! the Monte Carlo and ODE kernels allocate nothing per point.

use crate::error::{Error, Result};

/// Maximal supported spatial dimension.
pub const MAX_DIM: usize = 3;

/// A point or tangent vector of `R^d`, `1 <= d <= MAX_DIM`.
///
/// Unused coordinates are kept at zero, so dot products and norms may always
/// run over the full backing array.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialVec {
    dim: usize,
    data: [f64; MAX_DIM],
}

impl SpatialVec {
    pub fn zeros(dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "dimension must be 1..=3");
        Self {
            dim,
            data: [0.0; MAX_DIM],
        }
    }

    pub fn from_slice(coords: &[f64]) -> Self {
        let mut v = Self::zeros(coords.len());
        v.data[..coords.len()].copy_from_slice(coords);
        v
    }

    /// 1-d convenience constructor.
    pub fn scalar(x: f64) -> Self {
        Self::from_slice(&[x])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn coords(&self) -> &[f64] {
        &self.data[..self.dim]
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        debug_assert!(i < self.dim);
        self.data[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: f64) {
        debug_assert!(i < self.dim);
        self.data[i] = value;
    }

    #[inline]
    pub fn dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.dim, other.dim);
        let mut acc = 0.0;
        for i in 0..MAX_DIM {
            acc += self.data[i] * other.data[i];
        }
        acc
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    #[inline]
    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.dim, other.dim);
        let mut out = *self;
        for i in 0..MAX_DIM {
            out.data[i] += other.data[i];
        }
        out
    }

    #[inline]
    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.dim, other.dim);
        let mut out = *self;
        for i in 0..MAX_DIM {
            out.data[i] -= other.data[i];
        }
        out
    }

    #[inline]
    pub fn scale(&self, c: f64) -> Self {
        let mut out = *self;
        for i in 0..MAX_DIM {
            out.data[i] *= c;
        }
        out
    }

    /// `self + c * other`, fused for the RK4 loops.
    #[inline]
    pub fn axpy(&self, c: f64, other: &Self) -> Self {
        debug_assert_eq!(self.dim, other.dim);
        let mut out = *self;
        for i in 0..MAX_DIM {
            out.data[i] += c * other.data[i];
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.coords().iter().all(|c| c.is_finite())
    }
}

/// A `d x d` matrix with inline storage. Row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SquareMat {
    dim: usize,
    data: [f64; MAX_DIM * MAX_DIM],
}

impl SquareMat {
    pub fn zeros(dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim));
        Self {
            dim,
            data: [0.0; MAX_DIM * MAX_DIM],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.set(i, i, 1.0);
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.dim && col < self.dim);
        self.data[row * MAX_DIM + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.dim && col < self.dim);
        self.data[row * MAX_DIM + col] = value;
    }

    #[inline]
    pub fn matvec(&self, v: &SpatialVec) -> SpatialVec {
        debug_assert_eq!(self.dim, v.dim());
        let mut out = SpatialVec::zeros(self.dim);
        for i in 0..self.dim {
            let mut acc = 0.0;
            for j in 0..self.dim {
                acc += self.get(i, j) * v.get(j);
            }
            out.set(i, acc);
        }
        out
    }

    #[inline]
    pub fn matmul(&self, other: &Self) -> Self {
        debug_assert_eq!(self.dim, other.dim);
        let mut out = Self::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                let mut acc = 0.0;
                for k in 0..self.dim {
                    acc += self.get(i, k) * other.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[inline]
    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.dim, other.dim);
        let mut out = *self;
        for i in 0..MAX_DIM * MAX_DIM {
            out.data[i] += other.data[i];
        }
        out
    }

    #[inline]
    pub fn scale(&self, c: f64) -> Self {
        let mut out = *self;
        for x in out.data.iter_mut() {
            *x *= c;
        }
        out
    }

    #[inline]
    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn det(&self) -> f64 {
        match self.dim {
            1 => self.get(0, 0),
            2 => self.get(0, 0) * self.get(1, 1) - self.get(0, 1) * self.get(1, 0),
            3 => {
                let m = |r, c| self.get(r, c);
                m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
                    - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                    + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
            }
            _ => unreachable!(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.is_finite())
    }
}

/// Axis-aligned box in `X`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxRegion {
    lo: SpatialVec,
    hi: SpatialVec,
}

impl BoxRegion {
    pub fn new(lo: SpatialVec, hi: SpatialVec) -> Result<Self> {
        if lo.dim() != hi.dim() {
            return Err(Error::InvalidArgument("box corner dimensions differ".into()));
        }
        for i in 0..lo.dim() {
            // negated form also rejects NaN corners
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(lo.get(i) < hi.get(i)) {
                return Err(Error::InvalidArgument(format!(
                    "degenerate box on axis {i}: [{}, {}]",
                    lo.get(i),
                    hi.get(i)
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn from_intervals(intervals: &[(f64, f64)]) -> Result<Self> {
        let lo = SpatialVec::from_slice(&intervals.iter().map(|p| p.0).collect::<Vec<_>>());
        let hi = SpatialVec::from_slice(&intervals.iter().map(|p| p.1).collect::<Vec<_>>());
        Self::new(lo, hi)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.lo.dim()
    }

    #[inline]
    pub fn lo(&self) -> &SpatialVec {
        &self.lo
    }

    #[inline]
    pub fn hi(&self) -> &SpatialVec {
        &self.hi
    }

    #[inline]
    pub fn contains(&self, x: &SpatialVec) -> bool {
        (0..self.dim()).all(|i| x.get(i) >= self.lo.get(i) && x.get(i) <= self.hi.get(i))
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.hi.get(i) - self.lo.get(i))
            .product()
    }

    /// Volume of the intersection with `other`; zero if disjoint.
    pub fn intersection_volume(&self, other: &Self) -> f64 {
        let mut vol = 1.0;
        for i in 0..self.dim() {
            let lo = self.lo.get(i).max(other.lo.get(i));
            let hi = self.hi.get(i).min(other.hi.get(i));
            if hi <= lo {
                return 0.0;
            }
            vol *= hi - lo;
        }
        vol
    }

    pub fn union(&self, other: &Self) -> Self {
        let mut lo = self.lo;
        let mut hi = self.hi;
        for i in 0..self.dim() {
            lo.set(i, lo.get(i).min(other.lo.get(i)));
            hi.set(i, hi.get(i).max(other.hi.get(i)));
        }
        Self { lo, hi }
    }

    pub fn pad(&self, margin: f64) -> Self {
        let mut lo = self.lo;
        let mut hi = self.hi;
        for i in 0..self.dim() {
            lo.set(i, lo.get(i) - margin);
            hi.set(i, hi.get(i) + margin);
        }
        Self { lo, hi }
    }
}

/// A marked point `(x, s)` with position `x` in `X` and mark `s > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarkedPoint {
    pub x: SpatialVec,
    pub s: f64,
}

impl MarkedPoint {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // negated form also rejects NaN marks
    pub fn new(x: SpatialVec, s: f64) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() || !x.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "marked point needs finite coordinates and mark > 0, got ({:?}, {s})",
                x.coords()
            )));
        }
        Ok(Self { x, s })
    }

    /// 1-d convenience constructor.
    pub fn scalar(x: f64, s: f64) -> Result<Self> {
        Self::new(SpatialVec::scalar(x), s)
    }
}
