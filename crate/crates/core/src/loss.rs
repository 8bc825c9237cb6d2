//! Reweighted probabilistic angular loss and its gradients.
//!
//! For a triplet `(x, x⁺, x⁻)` with midpoint `a = (x + x⁺)/2`:
//!
//! ```text
//! z = ‖Lᵀ(x − x⁺)‖² − 4tan²α ‖Lᵀ(x⁻ − a)‖²     angular margin
//! m = softplus(z)                              metric loss
//! f = w · m                                    weighted loss
//! J = softplus(f) = −log p,  p = 1/(1 + eᶠ)    negative log-likelihood
//! ```
//!
//! The weight `w ∈ (0, 1)` comes either from a logistic model on the stacked
//! vector `c = [a; x⁻]` with parameter `r ∈ ℝ^{2d}` ([`Variant::Rpml`]) or from
//! two bilinear similarities through a `d × l'` matrix `R`
//! ([`Variant::RpmlV1`]). The objective is `Σ J`.
//!
//! Everything is evaluated column-wise on a [`TripletBatch`]: the per-triplet
//! scalars are vectors and the gradients are products of the difference
//! matrices with column scalings. Naming: `D_ap`/`D_nm` hold the
//! anchor−positive and negative−midpoint differences, and `S_ap`/`S_nm` are
//! those matrices with each column scaled by `2 g w β`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::ProductPoint;
use crate::triplets::TripletBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Logistic weight on the stacked triplet vector, parameter `r ∈ ℝ^{2d}`.
    #[default]
    Rpml,
    /// Bilinear-similarity weight, parameter `R ∈ ℝ^{d×l'}`.
    RpmlV1,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rpml" => Ok(Variant::Rpml),
            "rpml_v1" | "rpml-v1" | "v1" => Ok(Variant::RpmlV1),
            other => Err(Error::Parameter(format!(
                "unknown variant `{other}` (expected rpml or rpml_v1)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Rpml => "rpml",
            Variant::RpmlV1 => "rpml_v1",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Angle bound in degrees, `0 < α < 90`.
    pub alpha: f64,
    pub variant: Variant,
    /// Margin of the baseline hinge triplet loss.
    pub tau: f64,
    /// Column count of `R` for the bilinear weights; `None` uses the
    /// embedding dimension.
    pub v1_rank: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 45.0,
            variant: Variant::Rpml,
            tau: 1.0,
            v1_rank: None,
        }
    }
}

impl LossConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.alpha > 0.0 && self.alpha < 90.0) {
            out.push(format!("alpha must be in (0, 90) degrees (got {})", self.alpha));
        }
        if !(self.tau > 0.0) {
            out.push(format!("tau must be > 0 (got {})", self.tau));
        }
        if self.v1_rank == Some(0) {
            out.push("v1-rank must be >= 1".into());
        }
        out
    }

    /// `4 tan²α`.
    pub fn angle_factor(&self) -> f64 {
        angle_factor(self.alpha)
    }
}

/// `4 tan²α` for an angle in degrees.
pub fn angle_factor(alpha_deg: f64) -> f64 {
    let t = alpha_deg.to_radians().tan();
    4.0 * t * t
}

/// `log(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `1 / (1 + e⁻ˣ)` without overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `e⁻ˣ / (1 + e⁻ˣ)²`, the derivative of the sigmoid.
fn sigmoid_slope(x: f64) -> f64 {
    sigmoid(x) * sigmoid(-x)
}

/// Sum with a fixed pairwise tree over index order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n if n <= 8 => v.iter().sum(),
        n => {
            let (lo, hi) = v.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

/// `w_i = sigmoid(rᵀc_i)`, plus the logits `rᵀc_i`.
pub fn weights_rpml(r: &DMatrix<f64>, c: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let logits: DVector<f64> = (c.transpose() * r).column(0).into_owned();
    (logits.map(sigmoid), logits)
}

/// Bilinear weights: `w = (w⁺ + w⁻)/2` with `w⁺ = sigmoid(xᵀRRᵀx⁺)` and
/// `w⁻ = 1 − sigmoid(aᵀRRᵀx⁻)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearWeights {
    pub w: DVector<f64>,
    pub w_plus: DVector<f64>,
    pub w_minus: DVector<f64>,
    /// `xᵀRRᵀx⁺`
    pub s_plus: DVector<f64>,
    /// `aᵀRRᵀx⁻`
    pub s_minus: DVector<f64>,
    pub h_plus: DVector<f64>,
    pub h_minus: DVector<f64>,
}

pub fn weights_v1(rr: &DMatrix<f64>, batch: &TripletBatch) -> BilinearWeights {
    let rt = rr.transpose();
    let pa = &rt * &batch.anchors;
    let pp = &rt * &batch.positives;
    let pm = &rt * &batch.a;
    let pn = &rt * batch.negatives();
    let t = batch.len();
    let s_plus = DVector::from_fn(t, |i, _| pa.column(i).dot(&pp.column(i)));
    let s_minus = DVector::from_fn(t, |i, _| pm.column(i).dot(&pn.column(i)));
    let w_plus = s_plus.map(sigmoid);
    let w_minus = s_minus.map(|s| sigmoid(-s));
    let w = (&w_plus + &w_minus) * 0.5;
    BilinearWeights {
        w,
        w_plus,
        w_minus,
        h_plus: s_plus.map(sigmoid_slope),
        h_minus: s_minus.map(sigmoid_slope),
        s_plus,
        s_minus,
    }
}

/// Column-wise squared norms.
fn col_sq_norms(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |i, _| m.column(i).norm_squared())
}

/// `z_i = ‖Lᵀ(x_i − x_i⁺)‖² − 4tan²α ‖Lᵀ(x_i⁻ − a_i)‖²`.
pub fn angular_margins(l: &DMatrix<f64>, batch: &TripletBatch, alpha_deg: f64) -> DVector<f64> {
    let lt = l.transpose();
    margins_from_projections(&(&lt * &batch.d_ap), &(&lt * &batch.d_nm), angle_factor(alpha_deg))
}

fn margins_from_projections(proj_ap: &DMatrix<f64>, proj_nm: &DMatrix<f64>, factor: f64) -> DVector<f64> {
    col_sq_norms(proj_ap) - col_sq_norms(proj_nm) * factor
}

/// Per-triplet quantities of the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossIntermediates {
    /// Weights `w_i ∈ (0, 1)`.
    pub w: DVector<f64>,
    /// Angular margins.
    pub z: DVector<f64>,
    /// `m = softplus(z)`.
    pub m: DVector<f64>,
    /// `f = w ⊙ m`.
    pub f: DVector<f64>,
    /// `f̃ = softplus(f)`, the per-triplet negative log-likelihood.
    pub f_tilde: DVector<f64>,
    /// `g = sigmoid(f)`.
    pub g: DVector<f64>,
    /// `β = sigmoid(z)`.
    pub beta: DVector<f64>,
    pub weight_terms: WeightTerms,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightTerms {
    Logistic {
        /// `ρ = 1 + exp(−rᵀc)`; may be `+∞` when the logit saturates.
        rho: DVector<f64>,
        /// `h = w(1 − w)`.
        h: DVector<f64>,
    },
    Bilinear(BilinearWeights),
}

impl LossIntermediates {
    /// Probability `p_i = 1/(1 + e^{f_i})` that triplet `i` satisfies the
    /// angular constraint.
    pub fn probabilities(&self) -> DVector<f64> {
        self.f.map(|f| sigmoid(-f))
    }

    pub fn mean_weight(&self) -> f64 {
        if self.w.is_empty() {
            0.0
        } else {
            pairwise_sum(self.w.as_slice()) / self.w.len() as f64
        }
    }
}

/// Checks that `params` fits `batch` under `cfg`.
pub fn check_shapes(params: &ProductPoint, batch: &TripletBatch, cfg: &LossConfig) -> Result<()> {
    let d = batch.dim();
    if params.l.nrows() != d {
        return Err(Error::Dimension(format!(
            "embedding has {} rows, features have dimension {d}",
            params.l.nrows()
        )));
    }
    let expected = match cfg.variant {
        Variant::Rpml => (2 * d, 1),
        Variant::RpmlV1 => (d, cfg.v1_rank.unwrap_or(params.l.ncols())),
    };
    if params.v.shape() != expected {
        return Err(Error::Dimension(format!(
            "{} weight parameter must be {}x{}, got {}x{}",
            cfg.variant,
            expected.0,
            expected.1,
            params.v.nrows(),
            params.v.ncols()
        )));
    }
    Ok(())
}

struct Projections {
    ap: DMatrix<f64>,
    nm: DMatrix<f64>,
}

fn project(l: &DMatrix<f64>, batch: &TripletBatch) -> Projections {
    let lt = l.transpose();
    Projections {
        ap: &lt * &batch.d_ap,
        nm: &lt * &batch.d_nm,
    }
}

fn intermediates_with(params: &ProductPoint, batch: &TripletBatch, cfg: &LossConfig, proj: &Projections) -> LossIntermediates {
    let z = margins_from_projections(&proj.ap, &proj.nm, cfg.angle_factor());
    let (w, weight_terms) = match cfg.variant {
        Variant::Rpml => {
            let (w, logits) = weights_rpml(&params.v, &batch.c);
            let rho = logits.map(|s| 1.0 + (-s).exp());
            let h = logits.map(sigmoid_slope);
            (w, WeightTerms::Logistic { rho, h })
        }
        Variant::RpmlV1 => {
            let bw = weights_v1(&params.v, batch);
            (bw.w.clone(), WeightTerms::Bilinear(bw))
        }
    };
    let m = z.map(softplus);
    let f = w.component_mul(&m);
    LossIntermediates {
        f_tilde: f.map(softplus),
        g: f.map(sigmoid),
        beta: z.map(sigmoid),
        w,
        z,
        m,
        f,
        weight_terms,
    }
}

pub fn intermediates(params: &ProductPoint, batch: &TripletBatch, cfg: &LossConfig) -> LossIntermediates {
    intermediates_with(params, batch, cfg, &project(&params.l, batch))
}

/// `Σ_i softplus(w_i · softplus(z_i))`.
pub fn objective(params: &ProductPoint, batch: &TripletBatch, cfg: &LossConfig) -> f64 {
    pairwise_sum(intermediates(params, batch, cfg).f_tilde.as_slice())
}

/// Exact Euclidean gradients `(∇_L, ∇_v)` of [`objective`].
pub fn euclid_grad(params: &ProductPoint, batch: &TripletBatch, cfg: &LossConfig) -> (DMatrix<f64>, DMatrix<f64>) {
    let (_, gl, gv) = objective_and_grad(params, batch, cfg);
    (gl, gv)
}

/// Objective and gradients sharing one pass over the batch.
///
/// `∇_L = (S_ap D_apᵀ − 4tan²α S_nm D_nmᵀ) L`, evaluated right to left so
/// that no `d × d` matrix is formed. `∇_r = C (g ⊙ h ⊙ m)` for the logistic
/// weights; for the bilinear weights
/// `∇_R = ½ Σ g m [h⁺(x x⁺ᵀ + x⁺xᵀ) − h⁻(a x⁻ᵀ + x⁻aᵀ)] R`.
pub fn objective_and_grad(
    params: &ProductPoint,
    batch: &TripletBatch,
    cfg: &LossConfig,
) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let proj = project(&params.l, batch);
    let it = intermediates_with(params, batch, cfg, &proj);
    let value = pairwise_sum(it.f_tilde.as_slice());
    let factor = cfg.angle_factor();

    // Column scale 2 g w β shared by S_ap and S_nm.
    let s = (it.g.component_mul(&it.w).component_mul(&it.beta)) * 2.0;
    let mut ap_t = proj.ap.transpose();
    let mut nm_t = proj.nm.transpose();
    for (i, &si) in s.iter().enumerate() {
        ap_t.row_mut(i).scale_mut(si);
        nm_t.row_mut(i).scale_mut(si * factor);
    }
    let grad_l = &batch.d_ap * ap_t - &batch.d_nm * nm_t;

    let grad_v = match &it.weight_terms {
        WeightTerms::Logistic { h, .. } => {
            let u = it.g.component_mul(h).component_mul(&it.m);
            &batch.c * DMatrix::from_column_slice(u.len(), 1, u.as_slice())
        }
        WeightTerms::Bilinear(bw) => {
            let gm = it.g.component_mul(&it.m) * 0.5;
            let up = gm.component_mul(&bw.h_plus);
            let un = gm.component_mul(&bw.h_minus);
            let r = &params.v;
            let negatives = batch.negatives().into_owned();
            let scaled = |m: &DMatrix<f64>, u: &DVector<f64>| {
                let mut p = m.transpose() * r;
                for (i, &ui) in u.iter().enumerate() {
                    p.row_mut(i).scale_mut(ui);
                }
                p
            };
            &batch.anchors * scaled(&batch.positives, &up) + &batch.positives * scaled(&batch.anchors, &up)
                - &batch.a * scaled(&negatives, &un)
                - &negatives * scaled(&batch.a, &un)
        }
    };
    (value, grad_l, grad_v)
}

/// `Σ [‖Lᵀ(x − x⁺)‖² − ‖Lᵀ(x − x⁻)‖² + τ]₊`, forward value only.
pub fn baseline_triplet_hinge(l: &DMatrix<f64>, batch: &TripletBatch, tau: f64) -> f64 {
    let lt = l.transpose();
    let pos = col_sq_norms(&(&lt * &batch.d_ap));
    let neg = col_sq_norms(&(&lt * (&batch.anchors - batch.negatives())));
    let terms: Vec<f64> = pos
        .iter()
        .zip(neg.iter())
        .map(|(p, n)| (p - n + tau).max(0.0))
        .collect();
    pairwise_sum(&terms)
}

/// `Σ [z_i]₊`, forward value only.
pub fn baseline_angular_hinge(l: &DMatrix<f64>, batch: &TripletBatch, alpha_deg: f64) -> f64 {
    let terms: Vec<f64> = angular_margins(l, batch, alpha_deg)
        .iter()
        .map(|z| z.max(0.0))
        .collect();
    pairwise_sum(&terms)
}
