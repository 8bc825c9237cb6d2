//! Geometry of `Gr(d, l) × ℝ^m` with orthonormal representatives, and a
//! Riemannian conjugate-gradient minimiser on it.
//!
//! A Grassmann point is stored as a `d × l` matrix `L` with `LᵀL = I`. Its
//! tangent vectors are horizontal matrices (`Lᵀξ = 0`); the metric is the
//! Frobenius inner product. The Euclidean factor is an arbitrary matrix `v`
//! (a `2d × 1` column or a `d × l` matrix) with the flat metric. The product
//! metric is the sum of the two.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest singular value of `L + ξ` below which retraction is refused.
pub const RETRACTION_MIN_SINGULAR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ProductPoint {
    /// Orthonormal representative of the subspace.
    pub l: DMatrix<f64>,
    /// Euclidean factor.
    pub v: DMatrix<f64>,
}

impl ProductPoint {
    pub fn new(l: DMatrix<f64>, v: DMatrix<f64>) -> Self {
        Self { l, v }
    }

    /// `‖LᵀL − I‖_F`.
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.l)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductTangent {
    pub l: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl ProductTangent {
    pub fn zeros_like(x: &ProductPoint) -> Self {
        Self {
            l: DMatrix::zeros(x.l.nrows(), x.l.ncols()),
            v: DMatrix::zeros(x.v.nrows(), x.v.ncols()),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            l: &self.l * s,
            v: &self.v * s,
        }
    }

    pub fn norm(&self) -> f64 {
        inner(self, self).sqrt()
    }
}

pub fn orthonormality_error(l: &DMatrix<f64>) -> f64 {
    let k = l.ncols();
    (l.transpose() * l - DMatrix::<f64>::identity(k, k)).norm()
}

/// Horizontal part `G − L(LᵀG)` of an ambient matrix.
pub fn project_horizontal(l: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    g - l * (l.transpose() * g)
}

/// Polar retraction: the orthonormal factor `UVᵀ` of the thin SVD of `L + ξ`.
///
/// Each left singular vector is sign-normalised so that its largest-magnitude
/// entry is non-negative (the matching right vector is flipped with it),
/// which leaves `UVᵀ` unchanged but fixes the rounding path.
pub fn retract(l: &DMatrix<f64>, xi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    polar_factor(l + xi)
}

pub fn polar_factor(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = m.ncols();
    if k == 0 {
        return Ok(m);
    }
    let svd = m.svd(true, true);
    let min_singular = svd.singular_values.min();
    if !(min_singular >= RETRACTION_MIN_SINGULAR) {
        return Err(Error::RetractionUndefined { min_singular });
    }
    let mut u = svd.u.expect("left singular vectors requested");
    let mut vt = svd.v_t.expect("right singular vectors requested");
    for c in 0..k {
        let (mut best, mut arg) = (-1.0, 0);
        for r in 0..u.nrows() {
            if u[(r, c)].abs() > best {
                best = u[(r, c)].abs();
                arg = r;
            }
        }
        if u[(arg, c)] < 0.0 {
            u.column_mut(c).neg_mut();
            vt.row_mut(c).neg_mut();
        }
    }
    Ok(u * vt)
}

/// Product metric `Tr(ξ_Lᵀζ_L) + ⟨ξ_v, ζ_v⟩`.
pub fn inner(xi: &ProductTangent, zeta: &ProductTangent) -> f64 {
    xi.l.dot(&zeta.l) + xi.v.dot(&zeta.v)
}

/// Riemannian gradient from Euclidean gradients: horizontal projection on the
/// Grassmann factor, identity on the Euclidean one.
pub fn riemannian_gradient(x: &ProductPoint, grad_l: &DMatrix<f64>, grad_v: &DMatrix<f64>) -> ProductTangent {
    ProductTangent {
        l: project_horizontal(&x.l, grad_l),
        v: grad_v.clone(),
    }
}

/// Moves along `t·dir` and lands back on the manifold.
pub fn retract_point(x: &ProductPoint, dir: &ProductTangent, t: f64) -> Result<ProductPoint> {
    Ok(ProductPoint {
        l: retract(&x.l, &(&dir.l * t))?,
        v: &x.v + &dir.v * t,
    })
}

/// Vector transport by projection onto the horizontal space at `to`.
pub fn transport(to: &ProductPoint, xi: &ProductTangent) -> ProductTangent {
    ProductTangent {
        l: project_horizontal(&to.l, &xi.l),
        v: xi.v.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgOptions {
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c1: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// First trial step. `None` scales the first step to unit length.
    pub initial_step: Option<f64>,
    /// Keep the Euclidean factor fixed (its gradient is dropped).
    pub freeze_euclidean: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iters: 500,
            armijo_c1: 1e-4,
            backtrack: 0.5,
            max_backtracks: 30,
            initial_step: None,
            freeze_euclidean: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    /// Steepest descent could not produce a decrease that is visible in
    /// floating point.
    Stagnated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgTrace {
    /// Cost at the start point followed by one entry per accepted step.
    pub costs: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub iterations: usize,
    pub restarts: usize,
    pub stop: StopReason,
}

/// State handed to an observer after the start point and every step.
pub struct CgIterate<'a> {
    pub iteration: usize,
    pub point: &'a ProductPoint,
    pub cost: f64,
    pub grad_norm: f64,
}

pub fn cg_minimize<C, G>(cost: C, egrad: G, x0: ProductPoint, opts: &CgOptions) -> Result<(ProductPoint, CgTrace)>
where
    C: Fn(&ProductPoint) -> f64,
    G: Fn(&ProductPoint) -> (DMatrix<f64>, DMatrix<f64>),
{
    cg_minimize_observed(cost, egrad, x0, opts, |_| {})
}

/// Riemannian conjugate gradient with Hestenes–Stiefel updates, projection
/// transport, Armijo backtracking and the polar retraction.
pub fn cg_minimize_observed<C, G, O>(
    cost: C,
    egrad: G,
    x0: ProductPoint,
    opts: &CgOptions,
    mut observe: O,
) -> Result<(ProductPoint, CgTrace)>
where
    C: Fn(&ProductPoint) -> f64,
    G: Fn(&ProductPoint) -> (DMatrix<f64>, DMatrix<f64>),
    O: FnMut(&CgIterate<'_>),
{
    let gradient = |x: &ProductPoint| {
        let (gl, gv) = egrad(x);
        let mut g = riemannian_gradient(x, &gl, &gv);
        if opts.freeze_euclidean {
            g.v.fill(0.0);
        }
        g
    };

    let mut x = x0;
    let mut f = cost(&x);
    if !f.is_finite() {
        return Err(Error::NonFiniteCost {
            iteration: 0,
            detail: format!("initial cost is {f}"),
        });
    }
    let mut grad = gradient(&x);
    let mut gnorm = grad.norm();
    let mut trace = CgTrace {
        costs: vec![f],
        grad_norms: vec![gnorm],
        step_sizes: Vec::new(),
        iterations: 0,
        restarts: 0,
        stop: StopReason::MaxIterations,
    };
    observe(&CgIterate { iteration: 0, point: &x, cost: f, grad_norm: gnorm });

    let mut dir = grad.scale(-1.0);
    let mut steepest = true;
    let mut prev_step: Option<f64> = None;

    for iter in 1..=opts.max_iters {
        if gnorm < opts.grad_tol {
            trace.stop = StopReason::GradientTolerance;
            return Ok((x, trace));
        }
        let mut slope = inner(&grad, &dir);
        if !(slope < 0.0) {
            dir = grad.scale(-1.0);
            slope = -gnorm * gnorm;
            if !steepest {
                trace.restarts += 1;
            }
            steepest = true;
        }

        let accepted = loop {
            let t0 = match prev_step {
                Some(t) => 2.0 * t,
                None => opts.initial_step.unwrap_or(1.0 / dir.norm()),
            };
            match armijo(&cost, &x, f, &dir, slope, t0, opts) {
                Ok(found) => break Ok(found),
                Err(_) if !steepest => {
                    dir = grad.scale(-1.0);
                    slope = -gnorm * gnorm;
                    steepest = true;
                    trace.restarts += 1;
                }
                Err(smallest_trial) => break Err(smallest_trial),
            }
        };

        let (t, x_new, f_new) = match accepted {
            Ok(found) => found,
            Err(smallest_trial) => {
                // Flat to rounding precision along steepest descent: the
                // optimum is reached as far as the cost can resolve.
                let resolution = 64.0 * f64::EPSILON * f.abs().max(1.0);
                if (smallest_trial - f).abs() <= resolution {
                    trace.stop = StopReason::Stagnated;
                    return Ok((x, trace));
                }
                return Err(Error::LineSearchFailed { iteration: iter, cost: f, slope });
            }
        };

        let grad_new = gradient(&x_new);
        let grad_old_t = transport(&x_new, &grad);
        let dir_t = transport(&x_new, &dir);
        let y = ProductTangent {
            l: &grad_new.l - &grad_old_t.l,
            v: &grad_new.v - &grad_old_t.v,
        };
        let denom = inner(&dir_t, &y);
        let beta = if denom.abs() > f64::MIN_POSITIVE {
            inner(&grad_new, &y) / denom
        } else {
            0.0
        };
        let beta = if beta.is_finite() { beta } else { 0.0 };
        steepest = beta == 0.0;
        dir = ProductTangent {
            l: &dir_t.l * beta - &grad_new.l,
            v: &dir_t.v * beta - &grad_new.v,
        };

        x = x_new;
        f = f_new;
        grad = grad_new;
        gnorm = grad.norm();
        prev_step = Some(t);
        trace.costs.push(f);
        trace.grad_norms.push(gnorm);
        trace.step_sizes.push(t);
        trace.iterations = iter;
        observe(&CgIterate { iteration: iter, point: &x, cost: f, grad_norm: gnorm });
    }
    trace.stop = if gnorm < opts.grad_tol {
        StopReason::GradientTolerance
    } else {
        StopReason::MaxIterations
    };
    Ok((x, trace))
}

/// Backtracking search with a final interpolation step. On failure returns the cost at the smallest step
/// tried (`+∞` if that point was not evaluable).
fn armijo<C>(
    cost: &C,
    x: &ProductPoint,
    f: f64,
    dir: &ProductTangent,
    slope: f64,
    t0: f64,
    opts: &CgOptions,
) -> std::result::Result<(f64, ProductPoint, f64), f64>
where
    C: Fn(&ProductPoint) -> f64,
{
    let mut t = t0;
    let mut last = f64::INFINITY;
    for _ in 0..=opts.max_backtracks {
        last = f64::INFINITY;
        if let Ok(candidate) = retract_point(x, dir, t) {
            let fc = cost(&candidate);
            if fc.is_finite() && fc <= f + opts.armijo_c1 * t * slope {
                return Ok(refine(cost, x, f, dir, slope, opts, (t, candidate, fc)));
            }
            if fc.is_finite() {
                last = fc;
            }
        }
        t *= opts.backtrack;
    }
    Err(last)
}

/// One step of quadratic interpolation through `f`, `slope` and the accepted
/// trial; kept only if it lowers the cost and still passes the Armijo test.
fn refine<C>(
    cost: &C,
    x: &ProductPoint,
    f: f64,
    dir: &ProductTangent,
    slope: f64,
    opts: &CgOptions,
    accepted: (f64, ProductPoint, f64),
) -> (f64, ProductPoint, f64)
where
    C: Fn(&ProductPoint) -> f64,
{
    let (t, _, fc) = accepted;
    let curvature = 2.0 * (fc - f - slope * t);
    if !(curvature > 0.0) {
        return accepted;
    }
    let tq = -slope * t * t / curvature;
    if !tq.is_finite() || tq <= 0.0 || (tq - t).abs() <= 1e-3 * t {
        return accepted;
    }
    match retract_point(x, dir, tq) {
        Ok(candidate) => {
            let fq = cost(&candidate);
            if fq.is_finite() && fq < fc && fq <= f + opts.armijo_c1 * tq * slope {
                (tq, candidate, fq)
            } else {
                accepted
            }
        }
        Err(_) => accepted,
    }
}
