//! Geometry of the base space `X x R_+`: Lie-algebra elements `(v, a)`,
//! flows of compactly supported vector fields, currents `e^{t a}`, and the
//! directional derivative that they induce on smooth functions.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{BoxRegion, MarkedPoint, SpatialVec, SquareMat};
use crate::smooth::{BumpPiece, PieceShape, SmoothFn};

/// Fixed-step RK4 parameters. The step actually used for a time `t` is
/// `t / ceil(|t| / h0)`.
#[derive(Clone, Copy, Debug)]
pub struct FlowParams {
    pub h0: f64,
    pub t_max: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            h0: 1e-3,
            t_max: 10.0,
        }
    }
}

type VecEval = Arc<dyn Fn(&SpatialVec) -> SpatialVec + Send + Sync>;
type MatEval = Arc<dyn Fn(&SpatialVec) -> SquareMat + Send + Sync>;
type ScalarEval = Arc<dyn Fn(&SpatialVec) -> f64 + Send + Sync>;
type GradEval = Arc<dyn Fn(&SpatialVec) -> SpatialVec + Send + Sync>;

/// Compactly supported smooth vector field with its Jacobian matrix.
#[derive(Clone)]
pub struct VectorField {
    eval: VecEval,
    jacobian: MatEval,
    support: BoxRegion,
    dim: usize,
    /// Bound for `|v|` over the support; used to pad displacement estimates.
    max_speed: f64,
}

impl VectorField {
    pub fn new(
        dim: usize,
        support: BoxRegion,
        max_speed: f64,
        eval: VecEval,
        jacobian: MatEval,
    ) -> Self {
        Self {
            eval,
            jacobian,
            support,
            dim,
            max_speed,
        }
    }

    pub fn zero(dim: usize) -> Self {
        let support = BoxRegion::from_intervals(&vec![(-1e-6, 1e-6); dim]).unwrap();
        Self {
            eval: Arc::new(move |_| SpatialVec::zeros(dim)),
            jacobian: Arc::new(move |_| SquareMat::zeros(dim)),
            support,
            dim,
            max_speed: 0.0,
        }
    }

    /// `v(x) = amplitude * direction * prod_i chi_i(x_i)` with separable C^2
    /// pieces over `box_region`.
    pub fn bump(
        direction: &SpatialVec,
        amplitude: f64,
        box_region: BoxRegion,
        shape: PieceShape,
    ) -> Self {
        let dim = direction.dim();
        assert_eq!(dim, box_region.dim());
        let pieces: Vec<BumpPiece> = (0..dim)
            .map(|i| {
                let (lo, hi) = (box_region.lo().get(i), box_region.hi().get(i));
                match shape {
                    PieceShape::PolyBump => BumpPiece::poly(lo, hi),
                    PieceShape::Plateau { flat } => BumpPiece::plateau(lo, hi, flat),
                }
            })
            .collect();
        let dir = *direction;
        let pieces_eval = pieces.clone();
        let eval: VecEval = Arc::new(move |x: &SpatialVec| {
            let mut prod = amplitude;
            for (i, p) in pieces_eval.iter().enumerate() {
                prod *= p.eval(x.get(i)).0;
            }
            dir.scale(prod)
        });
        let pieces_jac = pieces;
        let jacobian: MatEval = Arc::new(move |x: &SpatialVec| {
            let vals: Vec<(f64, f64, f64)> =
                pieces_jac.iter().enumerate().map(|(i, p)| p.eval(x.get(i))).collect();
            let mut m = SquareMat::zeros(dim);
            for col in 0..dim {
                let mut d = amplitude * vals[col].1;
                for (j, v) in vals.iter().enumerate() {
                    if j != col {
                        d *= v.0;
                    }
                }
                for row in 0..dim {
                    m.set(row, col, dir.get(row) * d);
                }
            }
            m
        });
        Self {
            eval,
            jacobian,
            support: box_region,
            dim,
            max_speed: amplitude.abs() * dir.norm(),
        }
    }

    #[inline]
    pub fn value(&self, x: &SpatialVec) -> SpatialVec {
        (self.eval)(x)
    }

    #[inline]
    pub fn jacobian(&self, x: &SpatialVec) -> SquareMat {
        (self.jacobian)(x)
    }

    #[inline]
    pub fn divergence(&self, x: &SpatialVec) -> f64 {
        self.jacobian(x).trace()
    }

    pub fn support(&self) -> &BoxRegion {
        &self.support
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_speed(&self) -> f64 {
        self.max_speed
    }
}

/// Compactly supported smooth scalar field with its gradient.
#[derive(Clone)]
pub struct ScalarField {
    eval: ScalarEval,
    grad: GradEval,
    support: BoxRegion,
    dim: usize,
}

impl ScalarField {
    pub fn new(dim: usize, support: BoxRegion, eval: ScalarEval, grad: GradEval) -> Self {
        Self {
            eval,
            grad,
            support,
            dim,
        }
    }

    pub fn zero(dim: usize) -> Self {
        let support = BoxRegion::from_intervals(&vec![(-1e-6, 1e-6); dim]).unwrap();
        Self {
            eval: Arc::new(|_| 0.0),
            grad: Arc::new(move |_| SpatialVec::zeros(dim)),
            support,
            dim,
        }
    }

    pub fn bump(amplitude: f64, box_region: BoxRegion, shape: PieceShape) -> Self {
        let dim = box_region.dim();
        let pieces: Vec<BumpPiece> = (0..dim)
            .map(|i| {
                let (lo, hi) = (box_region.lo().get(i), box_region.hi().get(i));
                match shape {
                    PieceShape::PolyBump => BumpPiece::poly(lo, hi),
                    PieceShape::Plateau { flat } => BumpPiece::plateau(lo, hi, flat),
                }
            })
            .collect();
        let pieces_eval = pieces.clone();
        let eval: ScalarEval = Arc::new(move |x: &SpatialVec| {
            let mut prod = amplitude;
            for (i, p) in pieces_eval.iter().enumerate() {
                prod *= p.eval(x.get(i)).0;
            }
            prod
        });
        let grad: GradEval = Arc::new(move |x: &SpatialVec| {
            let vals: Vec<(f64, f64, f64)> =
                pieces.iter().enumerate().map(|(i, p)| p.eval(x.get(i))).collect();
            let mut g = SpatialVec::zeros(dim);
            for i in 0..dim {
                let mut d = amplitude * vals[i].1;
                for (j, v) in vals.iter().enumerate() {
                    if j != i {
                        d *= v.0;
                    }
                }
                g.set(i, d);
            }
            g
        });
        Self {
            eval,
            grad,
            support: box_region,
            dim,
        }
    }

    #[inline]
    pub fn value(&self, x: &SpatialVec) -> f64 {
        (self.eval)(x)
    }

    #[inline]
    pub fn grad(&self, x: &SpatialVec) -> SpatialVec {
        (self.grad)(x)
    }

    pub fn support(&self) -> &BoxRegion {
        &self.support
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Element `(v, a)` of the Lie algebra `V_0(X) x C_0^inf(X)`.
#[derive(Clone)]
pub struct LieElement {
    pub v: VectorField,
    pub a: ScalarField,
    support: BoxRegion,
    dim: usize,
}

impl LieElement {
    pub fn new(v: VectorField, a: ScalarField) -> Self {
        assert_eq!(v.dim(), a.dim());
        let support = v.support().union(a.support());
        let dim = v.dim();
        Self { v, a, support, dim }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(VectorField::zero(dim), ScalarField::zero(dim))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support(&self) -> &BoxRegion {
        &self.support
    }

    /// Lie bracket `[(v1,a1),(v2,a2)] = ([v1,v2], grad_{v1} a2 - grad_{v2} a1)`.
    ///
    /// The bracket field `[v1,v2] = Dv2 v1 - Dv1 v2` has a closed form from
    /// the operands; its own Jacobian and the gradient of the scalar part are
    /// taken by central differences of the bracket field.
    pub fn bracket(e1: &Self, e2: &Self, fd_step: f64) -> Self {
        assert_eq!(e1.dim, e2.dim);
        let dim = e1.dim;
        let support = e1.support.union(&e2.support);

        let (v1, v2) = (e1.v.clone(), e2.v.clone());
        let bracket_value = {
            let (v1, v2) = (v1.clone(), v2.clone());
            move |x: &SpatialVec| -> SpatialVec {
                v2.jacobian(x)
                    .matvec(&v1.value(x))
                    .sub(&v1.jacobian(x).matvec(&v2.value(x)))
            }
        };
        let eval: VecEval = {
            let f = bracket_value.clone();
            Arc::new(move |x| f(x))
        };
        let jacobian: MatEval = {
            let f = bracket_value.clone();
            Arc::new(move |x: &SpatialVec| {
                let mut m = SquareMat::zeros(dim);
                for col in 0..dim {
                    let mut xp = *x;
                    xp.set(col, x.get(col) + fd_step);
                    let mut xm = *x;
                    xm.set(col, x.get(col) - fd_step);
                    let d = f(&xp).sub(&f(&xm)).scale(1.0 / (2.0 * fd_step));
                    for row in 0..dim {
                        m.set(row, col, d.get(row));
                    }
                }
                m
            })
        };
        // Coarse sup-norm estimate over the support grid.
        let mut max_speed: f64 = 0.0;
        let probes = 24usize;
        let mut index = vec![0usize; dim];
        'outer: loop {
            let mut x = SpatialVec::zeros(dim);
            for (i, &k) in index.iter().enumerate() {
                let (lo, hi) = (support.lo().get(i), support.hi().get(i));
                x.set(i, lo + (hi - lo) * (k as f64 + 0.5) / probes as f64);
            }
            max_speed = max_speed.max(bracket_value(&x).norm());
            let mut axis = 0;
            loop {
                if axis == dim {
                    break 'outer;
                }
                index[axis] += 1;
                if index[axis] < probes {
                    break;
                }
                index[axis] = 0;
                axis += 1;
            }
        }
        let v_br = VectorField::new(dim, support, max_speed * 1.1, eval, jacobian);

        let (a1, a2) = (e1.a.clone(), e2.a.clone());
        let (w1, w2) = (e1.v.clone(), e2.v.clone());
        let scalar_value = move |x: &SpatialVec| -> f64 {
            a2.grad(x).dot(&w1.value(x)) - a1.grad(x).dot(&w2.value(x))
        };
        let a_eval: ScalarEval = {
            let f = scalar_value.clone();
            Arc::new(move |x| f(x))
        };
        let a_grad: GradEval = Arc::new(move |x: &SpatialVec| {
            let mut g = SpatialVec::zeros(dim);
            for i in 0..dim {
                let mut xp = *x;
                xp.set(i, x.get(i) + fd_step);
                let mut xm = *x;
                xm.set(i, x.get(i) - fd_step);
                g.set(i, (scalar_value(&xp) - scalar_value(&xm)) / (2.0 * fd_step));
            }
            g
        });
        let a_br = ScalarField::new(dim, support, a_eval, a_grad);

        Self::new(v_br, a_br)
    }
}

#[inline]
fn rk4_step(v: &VectorField, x: &SpatialVec, h: f64) -> SpatialVec {
    let k1 = v.value(x);
    let k2 = v.value(&x.axpy(0.5 * h, &k1));
    let k3 = v.value(&x.axpy(0.5 * h, &k2));
    let k4 = v.value(&x.axpy(h, &k3));
    x.axpy(h / 6.0, &k1)
        .axpy(h / 3.0, &k2)
        .axpy(h / 3.0, &k3)
        .axpy(h / 6.0, &k4)
}

/// The flow `psi_t^v(x)`: fixed-step RK4 solution of `dx/dt = v(x)`.
///
/// Points outside the support of `v` are fixed points of the flow and are
/// returned unchanged.
pub fn flow(v: &VectorField, t: f64, x: &SpatialVec, params: &FlowParams) -> Result<SpatialVec> {
    if t.abs() > params.t_max {
        return Err(Error::InvalidArgument(format!(
            "|t| = {} exceeds t_max = {}",
            t.abs(),
            params.t_max
        )));
    }
    if t == 0.0 || !v.support().contains(x) || v.max_speed() == 0.0 {
        return Ok(*x);
    }
    let n_steps = (t.abs() / params.h0).ceil().max(1.0) as usize;
    let h = t / n_steps as f64;
    let mut state = *x;
    for step in 0..n_steps {
        state = rk4_step(v, &state, h);
        if !state.is_finite() {
            return Err(Error::IntegrationDiverged { step });
        }
    }
    Ok(state)
}

/// The flow together with the solution `J(t)` of the variational equation
/// `dJ/dt = Dv(psi_t(x)) J`, `J(0) = I`.
pub fn flow_jacobian(
    v: &VectorField,
    t: f64,
    x: &SpatialVec,
    params: &FlowParams,
) -> Result<(SpatialVec, SquareMat)> {
    if t.abs() > params.t_max {
        return Err(Error::InvalidArgument(format!(
            "|t| = {} exceeds t_max = {}",
            t.abs(),
            params.t_max
        )));
    }
    let identity = SquareMat::identity(x.dim());
    if t == 0.0 || !v.support().contains(x) || v.max_speed() == 0.0 {
        return Ok((*x, identity));
    }
    let n_steps = (t.abs() / params.h0).ceil().max(1.0) as usize;
    let h = t / n_steps as f64;
    let mut pos = *x;
    let mut jac = identity;
    for step in 0..n_steps {
        // Coupled RK4 on (x, J).
        let kx1 = v.value(&pos);
        let kj1 = v.jacobian(&pos).matmul(&jac);

        let x2 = pos.axpy(0.5 * h, &kx1);
        let j2 = jac.add(&kj1.scale(0.5 * h));
        let kx2 = v.value(&x2);
        let kj2 = v.jacobian(&x2).matmul(&j2);

        let x3 = pos.axpy(0.5 * h, &kx2);
        let j3 = jac.add(&kj2.scale(0.5 * h));
        let kx3 = v.value(&x3);
        let kj3 = v.jacobian(&x3).matmul(&j3);

        let x4 = pos.axpy(h, &kx3);
        let j4 = jac.add(&kj3.scale(h));
        let kx4 = v.value(&x4);
        let kj4 = v.jacobian(&x4).matmul(&j4);

        pos = pos
            .axpy(h / 6.0, &kx1)
            .axpy(h / 3.0, &kx2)
            .axpy(h / 3.0, &kx3)
            .axpy(h / 6.0, &kx4);
        jac = jac
            .add(&kj1.scale(h / 6.0))
            .add(&kj2.scale(h / 3.0))
            .add(&kj3.scale(h / 3.0))
            .add(&kj4.scale(h / 6.0));
        if !pos.is_finite() || !jac.is_finite() {
            return Err(Error::IntegrationDiverged { step });
        }
    }
    Ok((pos, jac))
}

/// The current `theta_t^a(x) = exp(t a(x))`; identically one outside the
/// support of `a`.
pub fn current(a: &ScalarField, t: f64, x: &SpatialVec) -> f64 {
    (t * a.value(x)).exp()
}

/// The curve `(psi_t^v, theta_t^a)` applied to a marked point:
/// `(x, s) -> (psi_t(x), exp(t a(psi_t(x))) s)`.
pub fn act_flow_point(
    elem: &LieElement,
    t: f64,
    p: &MarkedPoint,
    params: &FlowParams,
) -> Result<MarkedPoint> {
    let y = flow(&elem.v, t, &p.x, params)?;
    let theta = current(&elem.a, t, &y);
    MarkedPoint::new(y, theta * p.s)
}

/// Directional derivative of a smooth function along `(v, a)`:
/// `<grad_x phi, v(x)> + s (d_s phi) a(x)`.
pub fn directional_derivative_base(elem: &LieElement, phi: &dyn SmoothFn, p: &MarkedPoint) -> f64 {
    let spatial = phi.grad_x(&p.x, p.s).dot(&elem.v.value(&p.x));
    let mark = p.s * phi.ds(&p.x, p.s) * elem.a.value(&p.x);
    spatial + mark
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::montecarlo::RngSpec;
    use crate::smooth::TestFunction;

    fn plateau_field() -> VectorField {
        // v = 1 on [-1, 1], supported on [-1.5, 1.5].
        VectorField::bump(
            &SpatialVec::scalar(1.0),
            1.0,
            BoxRegion::from_intervals(&[(-1.5, 1.5)]).unwrap(),
            PieceShape::Plateau { flat: 2.0 / 3.0 },
        )
    }

    fn generic_elem(seed: u64) -> LieElement {
        let mut rng = RngSpec::new(seed, 0).rng();
        let amp_v = 0.3 + 0.5 * rng.uniform();
        let amp_a = 0.4 + 0.5 * rng.uniform();
        let v = VectorField::bump(
            &SpatialVec::scalar(1.0),
            amp_v,
            BoxRegion::from_intervals(&[(-1.4, 1.6)]).unwrap(),
            PieceShape::PolyBump,
        );
        let a = ScalarField::bump(
            amp_a,
            BoxRegion::from_intervals(&[(-1.2, 1.2)]).unwrap(),
            PieceShape::PolyBump,
        );
        LieElement::new(v, a)
    }

    #[test]
    fn flow_zero_time_is_identity() {
        let v = plateau_field();
        let x = SpatialVec::scalar(0.3);
        assert_eq!(flow(&v, 0.0, &x, &FlowParams::default()).unwrap(), x);
    }

    #[test]
    fn flow_of_zero_field_is_identity() {
        let v = VectorField::zero(1);
        let x = SpatialVec::scalar(0.7);
        assert_eq!(flow(&v, 2.0, &x, &FlowParams::default()).unwrap(), x);
    }

    #[test]
    fn flow_on_plateau_is_translation() {
        // dx/dt = 1 there, so psi_0.1(0) = 0.1 exactly.
        let v = plateau_field();
        let x = SpatialVec::scalar(0.0);
        let y = flow(&v, 0.1, &x, &FlowParams::default()).unwrap();
        assert!((y.get(0) - 0.1).abs() < 1e-9, "got {}", y.get(0));
    }

    #[test]
    fn flow_outside_support_unchanged() {
        let v = plateau_field();
        let x = SpatialVec::scalar(2.0);
        assert_eq!(flow(&v, 1.0, &x, &FlowParams::default()).unwrap(), x);
    }

    #[test]
    fn jacobian_identity_cases() {
        let params = FlowParams::default();
        let v = plateau_field();
        let x = SpatialVec::scalar(0.2);
        let (_, j0) = flow_jacobian(&v, 0.0, &x, &params).unwrap();
        assert_eq!(j0, SquareMat::identity(1));
        let (_, jz) = flow_jacobian(&VectorField::zero(1), 1.5, &x, &params).unwrap();
        assert_eq!(jz, SquareMat::identity(1));
        // Dv = 0 on the plateau, so J stays the identity.
        let (_, jp) = flow_jacobian(&v, 0.1, &x, &params).unwrap();
        assert!((jp.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobian_determinant_positive_on_fixtures() {
        let params = FlowParams::default();
        for seed in 0..20 {
            let e = generic_elem(seed);
            let mut rng = RngSpec::new(seed + 100, 0).rng();
            let x = SpatialVec::scalar(-1.0 + 2.0 * rng.uniform());
            let (_, j) = flow_jacobian(&e.v, 1.0, &x, &params).unwrap();
            assert!(j.det() > 0.0);
        }
    }

    #[test]
    fn flow_group_law_and_inverse() {
        let params = FlowParams::default();
        let mut rng = RngSpec::new(314, 0).rng();
        for seed in 0..100 {
            let e = generic_elem(seed);
            let x = SpatialVec::scalar(-1.3 + 2.8 * rng.uniform());
            let t1 = -1.0 + 2.0 * rng.uniform();
            let t2 = -1.0 + 2.0 * rng.uniform();
            let a = flow(&e.v, t1 + t2, &x, &params).unwrap();
            let b = flow(&e.v, t1, &flow(&e.v, t2, &x, &params).unwrap(), &params).unwrap();
            assert!(a.sub(&b).norm() <= 1e-8, "group law violated: {:?} {:?}", a, b);

            let fwd = flow(&e.v, t1, &x, &params).unwrap();
            let back = flow(&e.v, -t1, &fwd, &params).unwrap();
            assert!(back.sub(&x).norm() <= 1e-8);
        }
    }

    #[test]
    fn jacobian_composition_multiplies() {
        let params = FlowParams::default();
        let mut rng = RngSpec::new(2718, 0).rng();
        for seed in 0..30 {
            let e = generic_elem(seed);
            let x = SpatialVec::scalar(-1.2 + 2.4 * rng.uniform());
            let t1 = -0.8 + 1.6 * rng.uniform();
            let t2 = -0.8 + 1.6 * rng.uniform();
            let (_, j_sum) = flow_jacobian(&e.v, t1 + t2, &x, &params).unwrap();
            let (mid, j2) = flow_jacobian(&e.v, t2, &x, &params).unwrap();
            let (_, j1) = flow_jacobian(&e.v, t1, &mid, &params).unwrap();
            let lhs = j_sum.det();
            let rhs = j1.det() * j2.det();
            assert!((lhs - rhs).abs() <= 1e-7, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn current_values() {
        let a = ScalarField::bump(
            2.0,
            BoxRegion::from_intervals(&[(-1.0, 1.0)]).unwrap(),
            PieceShape::Plateau { flat: 0.5 },
        );
        let x = SpatialVec::scalar(0.0);
        assert_eq!(current(&a, 0.0, &x), 1.0);
        assert_eq!(current(&ScalarField::zero(1), 1.7, &x), 1.0);
        // a(0) = 2 on the plateau: e^{0.5 * 2} = e.
        let v = current(&a, 0.5, &x);
        assert!((v - std::f64::consts::E).abs() < 1e-12);
        // outside the support the current is one
        assert_eq!(current(&a, 3.0, &SpatialVec::scalar(1.5)), 1.0);
    }

    #[test]
    fn directional_derivative_zero_cases() {
        let phi = TestFunction::bump(1.0, &[(-1.0, 1.0)], (0.2, 3.0)).unwrap();
        let p = MarkedPoint::scalar(0.3, 1.0).unwrap();
        assert_eq!(
            directional_derivative_base(&LieElement::zero(1), &phi, &p),
            0.0
        );
    }

    #[test]
    fn directional_derivative_ignores_marks_on_plateau() {
        // phi constant in s on its mark plateau: only the spatial term remains.
        let phi = TestFunction::plateau(1.0, &[(-1.5, 1.5)], (0.2, 4.0), 0.7).unwrap();
        let e = generic_elem(5);
        let p = MarkedPoint::scalar(0.4, 2.0).unwrap();
        let full = directional_derivative_base(&e, &phi, &p);
        let spatial_only = phi.grad_x(&p.x, p.s).dot(&e.v.value(&p.x));
        assert_eq!(full, spatial_only);
        assert_eq!(phi.ds(&p.x, p.s), 0.0);
    }

    #[test]
    fn directional_derivative_matches_flow_finite_difference() {
        // Oracle: Richardson-extrapolated centered difference of
        // phi((psi_t, theta_t)(x, s)) at t = 0 with base step h = 1e-4.
        let params = FlowParams::default();
        let phi = TestFunction::bump(0.9, &[(-1.1, 1.2)], (0.3, 3.5)).unwrap();
        let mut rng = RngSpec::new(99, 0).rng();
        let h = 1e-4;
        for seed in 0..100 {
            let e = generic_elem(seed);
            let p = MarkedPoint::scalar(-0.9 + 1.8 * rng.uniform(), 0.5 + 2.0 * rng.uniform())
                .unwrap();
            let central = |step: f64| -> f64 {
                let fp = act_flow_point(&e, step, &p, &params).unwrap();
                let fm = act_flow_point(&e, -step, &p, &params).unwrap();
                (phi.value_at(&fp) - phi.value_at(&fm)) / (2.0 * step)
            };
            let fd = (4.0 * central(h / 2.0) - central(h)) / 3.0;
            let an = directional_derivative_base(&e, &phi, &p);
            let scale = an.abs().max(1e-3);
            assert!(
                (fd - an).abs() / scale <= 1e-6,
                "seed {seed}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn bracket_matches_nested_derivative_commutator() {
        // Defining property: grad_[e1,e2] phi = (grad_1 grad_2 - grad_2 grad_1) phi.
        let params = FlowParams::default();
        let phi = TestFunction::bump(1.0, &[(-1.3, 1.3)], (0.2, 4.0)).unwrap();
        let h = 1e-4;
        let mut rng = RngSpec::new(123, 0).rng();
        for trial in 0..20 {
            let e1 = generic_elem(trial);
            let e2 = generic_elem(trial + 1000);
            let br = LieElement::bracket(&e1, &e2, 1e-5);
            let p = MarkedPoint::scalar(-0.8 + 1.6 * rng.uniform(), 0.6 + 1.5 * rng.uniform())
                .unwrap();

            let dir = |e: &LieElement, q: &MarkedPoint| -> f64 {
                directional_derivative_base(e, &phi, q)
            };
            // Nested: d/dt [ dir_2 phi ]((psi_t^1, theta_t^1)(p)) at 0, minus the swap.
            let nested = |ea: &LieElement, eb: &LieElement| -> f64 {
                let pp = act_flow_point(ea, h, &p, &params).unwrap();
                let pm = act_flow_point(ea, -h, &p, &params).unwrap();
                (dir(eb, &pp) - dir(eb, &pm)) / (2.0 * h)
            };
            let comm = nested(&e1, &e2) - nested(&e2, &e1);
            let direct = dir(&br, &p);
            assert!(
                (comm - direct).abs() <= 1e-4 * direct.abs().max(1.0),
                "trial {trial}: commutator {comm} vs bracket {direct}"
            );
        }
    }

    #[test]
    fn bracket_of_pure_currents_vanishes() {
        let a1 = ScalarField::bump(
            0.7,
            BoxRegion::from_intervals(&[(-1.0, 1.0)]).unwrap(),
            PieceShape::PolyBump,
        );
        let a2 = ScalarField::bump(
            -0.4,
            BoxRegion::from_intervals(&[(-0.8, 1.2)]).unwrap(),
            PieceShape::PolyBump,
        );
        let e1 = LieElement::new(VectorField::zero(1), a1);
        let e2 = LieElement::new(VectorField::zero(1), a2);
        let br = LieElement::bracket(&e1, &e2, 1e-5);
        for x in [-0.9, -0.3, 0.0, 0.5, 1.1] {
            let xv = SpatialVec::scalar(x);
            assert_eq!(br.v.value(&xv).norm(), 0.0);
            assert_eq!(br.a.value(&xv), 0.0);
        }
    }

    #[test]
    fn divergence_is_trace_of_jacobian() {
        let e = generic_elem(3);
        let mut rng = RngSpec::new(17, 0).rng();
        for _ in 0..50 {
            let x = SpatialVec::scalar(-1.4 + 3.0 * rng.uniform());
            assert_eq!(e.v.divergence(&x), e.v.jacobian(&x).trace());
        }
    }

    #[test]
    fn flow_rejects_excessive_time() {
        let v = plateau_field();
        let x = SpatialVec::scalar(0.0);
        assert!(flow(&v, 11.0, &x, &FlowParams::default()).is_err());
    }
}
