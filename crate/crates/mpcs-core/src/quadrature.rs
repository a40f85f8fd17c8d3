//! Deterministic quadrature on the window `Λ x [s_lo, s_hi]`.
//!
//! Tensor-product Gauss–Legendre rules, with an optional `u = log s`
//! substitution on the mark axis (all built-in mark densities are smooth in
//! `log s`). Gauss–Hermite rules back the spectral module.

use crate::error::{Error, Result};
use crate::geometry::{BoxRegion, SpatialVec};
use crate::montecarlo::pairwise_sum;

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss–Hermite nodes and weights for the weight `exp(-t^2)` on the line.
///
/// Uses the orthonormal recurrence so intermediate values stay bounded up to
/// high orders.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let sqrt_pi_quarter = std::f64::consts::PI.powf(0.25);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut x = 0.0f64;
    for i in 0..m {
        // Initial guesses from Numerical Recipes, largest root first.
        x = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => x - 1.14 * nf.powf(0.426) / x,
            2 => 1.86 * x - 0.86 * nodes[0],
            3 => 1.91 * x - 0.91 * nodes[1],
            _ => 2.0 * x - nodes[i - 2],
        };
        let mut dp = 0.0;
        for _ in 0..200 {
            // Orthonormal Hermite functions (weight exp(-t^2)).
            let mut p0 = 1.0 / sqrt_pi_quarter;
            let mut p1 = std::f64::consts::SQRT_2 * x * p0;
            for j in 1..n {
                let jf = j as f64;
                let p2 = x * (2.0 / (jf + 1.0)).sqrt() * p1 - (jf / (jf + 1.0)).sqrt() * p0;
                p0 = p1;
                p1 = p2;
            }
            dp = (2.0 * nf).sqrt() * p0;
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
        nodes[i] = x;
        nodes[n - 1 - i] = -x;
        weights[i] = 2.0 / (dp * dp);
        weights[n - 1 - i] = weights[i];
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    // Largest-to-smallest in the first half; re-sort ascending for cleanliness.
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| nodes[a].partial_cmp(&nodes[b]).unwrap());
    let nodes_sorted: Vec<f64> = idx.iter().map(|&i| nodes[i]).collect();
    let weights_sorted: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
    (nodes_sorted, weights_sorted)
}

/// Nodes and weights for averaging against the standard normal density:
/// `∫ f dN(0,1) ≈ Σ w_i f(x_i)`.
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (t, w) = gauss_hermite(n);
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    (
        t.iter().map(|&ti| std::f64::consts::SQRT_2 * ti).collect(),
        w.iter().map(|&wi| wi * inv_sqrt_pi).collect(),
    )
}

/// Tensor-product Lebesgue rule on `Λ x [s_lo, s_hi]`.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    nodes: Vec<(SpatialVec, f64)>,
    weights: Vec<f64>,
    spatial_order: usize,
    mark_order: usize,
    log_mark: bool,
    window: BoxRegion,
    s_range: (f64, f64),
}

/// Splits `[lo, hi]` at the interior breakpoints and lays a Gauss–Legendre
/// panel of the given order on each piece.
fn paneled_axis(lo: f64, hi: f64, breaks: &[f64], order: usize) -> Vec<(f64, f64)> {
    let (t, wt) = gauss_legendre(order);
    let mut edges: Vec<f64> = std::iter::once(lo)
        .chain(breaks.iter().copied().filter(|&b| b > lo && b < hi))
        .chain(std::iter::once(hi))
        .collect();
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    let mut nodes = Vec::with_capacity(order * (edges.len() - 1));
    for seg in edges.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        for (&ti, &wi) in t.iter().zip(&wt) {
            nodes.push((0.5 * (b + a) + 0.5 * (b - a) * ti, 0.5 * (b - a) * wi));
        }
    }
    nodes
}

impl QuadratureRule {
    /// `spatial_order` nodes per spatial axis, `mark_order` on the mark axis.
    /// With `log_mark` the mark integral is computed in `u = log s`.
    pub fn new(
        window: &BoxRegion,
        s_lo: f64,
        s_hi: f64,
        spatial_order: usize,
        mark_order: usize,
        log_mark: bool,
    ) -> Result<Self> {
        Self::with_breakpoints(
            window,
            s_lo,
            s_hi,
            spatial_order,
            mark_order,
            log_mark,
            &vec![Vec::new(); window.dim()],
            &[],
        )
    }

    /// Paneled rule: each axis is split at the given interior breakpoints
    /// (per spatial axis, and on the mark axis) with a full Gauss–Legendre
    /// panel per piece. Placing breakpoints on the support edges of the
    /// integrand restores spectral accuracy for piecewise-smooth factors.
    #[allow(clippy::too_many_arguments)]
    pub fn with_breakpoints(
        window: &BoxRegion,
        s_lo: f64,
        s_hi: f64,
        spatial_order: usize,
        mark_order: usize,
        log_mark: bool,
        x_breaks: &[Vec<f64>],
        s_breaks: &[f64],
    ) -> Result<Self> {
        if !(s_lo > 0.0 && s_hi > s_lo) {
            return Err(Error::InvalidArgument(format!(
                "mark range must satisfy 0 < s_lo < s_hi, got [{s_lo}, {s_hi}]"
            )));
        }
        let dim = window.dim();
        if x_breaks.len() != dim {
            return Err(Error::InvalidArgument(
                "one breakpoint list per spatial axis required".into(),
            ));
        }
        let mut axis_nodes: Vec<Vec<(f64, f64)>> = Vec::with_capacity(dim);
        for i in 0..dim {
            axis_nodes.push(paneled_axis(
                window.lo().get(i),
                window.hi().get(i),
                &x_breaks[i],
                spatial_order,
            ));
        }
        let mark_nodes: Vec<(f64, f64)> = if log_mark {
            let breaks: Vec<f64> = s_breaks.iter().map(|&s| s.ln()).collect();
            paneled_axis(s_lo.ln(), s_hi.ln(), &breaks, mark_order)
                .into_iter()
                .map(|(u, w)| {
                    let s = u.exp();
                    // du-weight times ds/du = s.
                    (s, w * s)
                })
                .collect()
        } else {
            paneled_axis(s_lo, s_hi, s_breaks, mark_order)
        };

        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut index = vec![0usize; dim];
        loop {
            let mut x = SpatialVec::zeros(dim);
            let mut wx = 1.0;
            for (i, &k) in index.iter().enumerate() {
                let (xi, wi) = axis_nodes[i][k];
                x.set(i, xi);
                wx *= wi;
            }
            for &(s, ws) in &mark_nodes {
                nodes.push((x, s));
                weights.push(wx * ws);
            }
            // Advance the mixed-radix spatial index.
            let mut axis = 0;
            loop {
                if axis == dim {
                    return Ok(Self {
                        nodes,
                        weights,
                        spatial_order,
                        mark_order,
                        log_mark,
                        window: *window,
                        s_range: (s_lo, s_hi),
                    });
                }
                index[axis] += 1;
                if index[axis] < axis_nodes[axis].len() {
                    break;
                }
                index[axis] = 0;
                axis += 1;
            }
        }
    }

    pub fn nodes(&self) -> &[(SpatialVec, f64)] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn window(&self) -> &BoxRegion {
        &self.window
    }

    pub fn s_range(&self) -> (f64, f64) {
        self.s_range
    }

    pub fn spatial_order(&self) -> usize {
        self.spatial_order
    }

    pub fn mark_order(&self) -> usize {
        self.mark_order
    }

    pub fn log_mark(&self) -> bool {
        self.log_mark
    }
}

/// Rule paneled at the support edges of the given functions, so that
/// integrands built from them are smooth panel by panel.
pub fn rule_for_supports(
    window: &BoxRegion,
    s_lo: f64,
    s_hi: f64,
    spatial_order: usize,
    mark_order: usize,
    log_mark: bool,
    fns: &[&dyn crate::smooth::SmoothFn],
) -> Result<QuadratureRule> {
    let dim = window.dim();
    let mut x_breaks = vec![Vec::new(); dim];
    let mut s_breaks = Vec::new();
    for f in fns {
        if let Some(sup) = f.support() {
            for (i, breaks) in x_breaks.iter_mut().enumerate() {
                breaks.push(sup.x.lo().get(i));
                breaks.push(sup.x.hi().get(i));
            }
            s_breaks.push(sup.s_lo);
            s_breaks.push(sup.s_hi);
        }
    }
    QuadratureRule::with_breakpoints(
        window,
        s_lo,
        s_hi,
        spatial_order,
        mark_order,
        log_mark,
        &x_breaks,
        &s_breaks,
    )
}

/// `Σ w_i f(node_i)`; errors on a non-finite node value.
pub fn integrate<F>(f: F, rule: &QuadratureRule) -> Result<f64>
where
    F: Fn(&SpatialVec, f64) -> f64,
{
    let mut terms = Vec::with_capacity(rule.nodes.len());
    for ((x, s), w) in rule.nodes.iter().zip(&rule.weights) {
        let v = f(x, *s);
        if !v.is_finite() {
            return Err(Error::QuadratureNonFinite {
                x: x.coords().to_vec(),
                s: *s,
            });
        }
        terms.push(w * v);
    }
    Ok(pairwise_sum(&terms))
}
