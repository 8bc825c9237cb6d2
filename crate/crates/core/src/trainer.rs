//! Learning the embedding: triplets from pseudo-labels, then either joint
//! conjugate gradient over the whole triplet set or fixed-step mini-batch
//! updates.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, FeatureMatrix, LabelVector};
use crate::error::{Error, Result};
use crate::loss::{self, LossConfig, Variant};
use crate::manifold::{self, CgOptions, ProductPoint, StopReason};
use crate::rng;
use crate::triplets::{build_batch, generate_triplets, TripletBatch, TripletStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Riemannian conjugate gradient on the full triplet set.
    #[default]
    FullBatchCg,
    /// Fixed-step Riemannian gradient updates on shuffled mini-batches.
    Stochastic,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_batch_cg" | "full-batch-cg" | "cg" => Ok(TrainMode::FullBatchCg),
            "stochastic" | "sgd" => Ok(TrainMode::Stochastic),
            other => Err(Error::Parameter(format!(
                "unknown mode `{other}` (expected full_batch_cg or stochastic)"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::FullBatchCg => "full_batch_cg",
            TrainMode::Stochastic => "stochastic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Embedding dimension.
    pub l: usize,
    pub loss: LossConfig,
    /// Conjugate-gradient iteration cap (full-batch mode).
    pub maxiter: usize,
    pub grad_tol: f64,
    pub mode: TrainMode,
    pub batch_size: usize,
    /// Step size of the stochastic updates.
    pub eta: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Keep the weight parameter at its initial value.
    pub freeze_weights: bool,
    pub per_anchor: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l: 8,
            loss: LossConfig::default(),
            maxiter: 500,
            grad_tol: 1e-6,
            mode: TrainMode::FullBatchCg,
            batch_size: 120,
            eta: 0.01,
            epochs: 30,
            seed: 0,
            freeze_weights: false,
            per_anchor: 5,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.loss.problems();
        if self.l < 1 {
            out.push("l must be >= 1".into());
        }
        if self.batch_size < 1 {
            out.push("batch-size must be >= 1".into());
        }
        if !(self.eta > 0.0) {
            out.push(format!("eta must be > 0 (got {})", self.eta));
        }
        if !(self.grad_tol >= 0.0) {
            out.push(format!("grad-tol must be >= 0 (got {})", self.grad_tol));
        }
        if self.per_anchor < 1 {
            out.push("per-anchor must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(p.join("; ")))
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    /// CG iteration, or epoch in stochastic mode.
    pub iteration: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub mean_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub variant: Variant,
    pub trace: Vec<ProgressRecord>,
    pub final_grad_norm: f64,
    pub iterations: usize,
    pub elapsed_secs: f64,
    pub triplets: TripletStats,
    pub stop: Option<StopReason>,
    /// Step size after any divergence-guard halvings (stochastic mode).
    pub final_eta: Option<f64>,
}

impl TrainReport {
    pub fn costs(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.cost).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ProductPoint,
    pub report: TrainReport,
}

/// Seeded start point: `L` is the Q factor (positive-diagonal convention) of
/// a standard Gaussian `d × l` matrix; `r = 0`, or `R` Gaussian scaled by
/// `1/√d` for the bilinear variant.
pub fn initialize(d: usize, l: usize, variant: Variant, seed: u64, v1_rank: Option<usize>) -> Result<ProductPoint> {
    if l < 1 || l > d {
        return Err(Error::Parameter(format!(
            "embedding dimension l = {l} must satisfy 1 <= l <= d = {d}"
        )));
    }
    let mut rng = rng::substream(seed, rng::STREAM_INIT);
    let g = DMatrix::from_fn(d, l, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..l {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let v = match variant {
        Variant::Rpml => DMatrix::zeros(2 * d, 1),
        Variant::RpmlV1 => {
            let k = v1_rank.unwrap_or(l);
            let scale = 1.0 / (d as f64).sqrt();
            DMatrix::from_fn(d, k, |_, _| {
                let s: f64 = StandardNormal.sample(&mut rng);
                s * scale
            })
        }
    };
    Ok(ProductPoint::new(q, v))
}

/// Row `i` of the result is `Lᵀx_i`.
pub fn embed(l: &DMatrix<f64>, x: &FeatureMatrix) -> Result<DMatrix<f64>> {
    if l.nrows() != x.d() {
        return Err(Error::Dimension(format!(
            "embedding expects dimension {}, features have {}",
            l.nrows(),
            x.d()
        )));
    }
    Ok(x.values() * l)
}

fn mean_weight(params: &ProductPoint, batch: &TripletBatch, cfg: &LossConfig) -> f64 {
    let w = match cfg.variant {
        Variant::Rpml => loss::weights_rpml(&params.v, &batch.c).0,
        Variant::RpmlV1 => loss::weights_v1(&params.v, batch).w,
    };
    if w.is_empty() {
        0.0
    } else {
        loss::pairwise_sum(w.as_slice()) / w.len() as f64
    }
}

fn riemannian_grad_norm(params: &ProductPoint, batch: &TripletBatch, cfg: &TrainConfig) -> f64 {
    let (gl, gv) = loss::euclid_grad(params, batch, &cfg.loss);
    let mut g = manifold::riemannian_gradient(params, &gl, &gv);
    if cfg.freeze_weights {
        g.v.fill(0.0);
    }
    g.norm()
}

pub fn fit(x: &FeatureMatrix, pseudo_labels: &LabelVector, cfg: &TrainConfig) -> Result<FitResult> {
    fit_with_progress(x, pseudo_labels, cfg, |_| {})
}

/// As [`fit`], calling `progress` for the start point and after every CG
/// iteration or epoch.
pub fn fit_with_progress<P>(x: &FeatureMatrix, pseudo_labels: &LabelVector, cfg: &TrainConfig, progress: P) -> Result<FitResult>
where
    P: FnMut(&ProgressRecord),
{
    cfg.validate()?;
    pseudo_labels.check_len(x.n())?;
    let set = generate_triplets(pseudo_labels, cfg.per_anchor, cfg.seed)?;
    let batch = build_batch(x, &set.triplets)?;
    let x0 = initialize(x.d(), cfg.l, cfg.loss.variant, cfg.seed, cfg.loss.v1_rank)?;
    fit_batch(&batch, x0, set.stats, cfg, progress)
}

/// Optimises from `x0` on a prepared batch.
pub fn fit_batch<P>(batch: &TripletBatch, x0: ProductPoint, stats: TripletStats, cfg: &TrainConfig, mut progress: P) -> Result<FitResult>
where
    P: FnMut(&ProgressRecord),
{
    loss::check_shapes(&x0, batch, &cfg.loss)?;
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut record = |r: ProgressRecord, trace: &mut Vec<ProgressRecord>| {
        progress(&r);
        trace.push(r);
    };

    let (params, stop, final_eta, iterations) = match cfg.mode {
        TrainMode::FullBatchCg => {
            let opts = CgOptions {
                grad_tol: cfg.grad_tol,
                max_iters: cfg.maxiter,
                freeze_euclidean: cfg.freeze_weights,
                ..CgOptions::default()
            };
            let (params, cg) = manifold::cg_minimize_observed(
                |p| loss::objective(p, batch, &cfg.loss),
                |p| loss::euclid_grad(p, batch, &cfg.loss),
                x0,
                &opts,
                |it| {
                    let r = ProgressRecord {
                        iteration: it.iteration,
                        cost: it.cost,
                        grad_norm: it.grad_norm,
                        mean_weight: mean_weight(it.point, batch, &cfg.loss),
                    };
                    record(r, &mut trace);
                },
            )?;
            (params, Some(cg.stop), None, cg.iterations)
        }
        TrainMode::Stochastic => {
            let (params, eta, epochs) = run_stochastic(batch, x0, cfg, |r| record(r, &mut trace))?;
            (params, None, Some(eta), epochs)
        }
    };

    let final_grad_norm = trace.last().map_or(0.0, |r| r.grad_norm);
    Ok(FitResult {
        params,
        report: TrainReport {
            mode: cfg.mode,
            variant: cfg.loss.variant,
            trace,
            final_grad_norm,
            iterations,
            elapsed_secs: start.elapsed().as_secs_f64(),
            triplets: stats,
            stop,
            final_eta,
        },
    })
}

const MAX_ETA_HALVINGS: usize = 5;

/// One fixed-step update on a mini-batch: `v ← v − η∇_v`,
/// `L ← retract(L, −η·grad_L)` with both gradients taken at the current point.
pub fn stochastic_step(params: &ProductPoint, batch: &TripletBatch, cfg: &TrainConfig, eta: f64) -> Result<ProductPoint> {
    let (gl, gv) = loss::euclid_grad(params, batch, &cfg.loss);
    let xi = manifold::project_horizontal(&params.l, &gl) * -eta;
    let l = manifold::retract(&params.l, &xi)?;
    let v = if cfg.freeze_weights {
        params.v.clone()
    } else {
        &params.v - gv * eta
    };
    Ok(ProductPoint::new(l, v))
}

fn run_stochastic<R>(batch: &TripletBatch, x0: ProductPoint, cfg: &TrainConfig, mut record: R) -> Result<(ProductPoint, f64, usize)>
where
    R: FnMut(ProgressRecord),
{
    let full_cost = |p: &ProductPoint| loss::objective(p, batch, &cfg.loss);
    let mut params = x0;
    let cost0 = full_cost(&params);
    if !cost0.is_finite() {
        return Err(Error::NonFiniteCost {
            iteration: 0,
            detail: format!("initial cost is {cost0}"),
        });
    }
    record(ProgressRecord {
        iteration: 0,
        cost: cost0,
        grad_norm: riemannian_grad_norm(&params, batch, cfg),
        mean_weight: mean_weight(&params, batch, &cfg.loss),
    });

    let mut shuffle = rng::substream(cfg.seed, rng::STREAM_SHUFFLE);
    let mut eta = cfg.eta;
    let mut halvings = 0;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let checkpoint = params.clone();
        let cost = loop {
            let attempt = order.chunks(cfg.batch_size).try_fold(checkpoint.clone(), |p, chunk| {
                let mut idx = chunk.to_vec();
                idx.sort_unstable();
                stochastic_step(&p, &batch.select(&idx), cfg, eta)
            });
            let failure = match attempt {
                Ok(p) => {
                    let c = full_cost(&p);
                    if c.is_finite() {
                        params = p;
                        break c;
                    }
                    format!("cost {c}")
                }
                Err(e) => e.to_string(),
            };
            halvings += 1;
            if halvings > MAX_ETA_HALVINGS {
                return Err(Error::NonFiniteCost {
                    iteration: epoch,
                    detail: format!("{failure} after {MAX_ETA_HALVINGS} step-size halvings (eta {eta:e})"),
                });
            }
            log::warn!("epoch {epoch}: {failure}; halving eta to {:e}", eta / 2.0);
            eta /= 2.0;
        };
        record(ProgressRecord {
            iteration: epoch,
            cost,
            grad_norm: riemannian_grad_norm(&params, batch, cfg),
            mean_weight: mean_weight(&params, batch, &cfg.loss),
        });
    }
    Ok((params, eta, cfg.epochs))
}

/// Embedding, weight parameter and iteration counter on disk: a directory
/// with `embedding.rpml`, `weights.rpml` (binary matrix container) and
/// `manifest.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ProductPoint,
    pub iteration: usize,
    pub variant: Variant,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    iteration: usize,
    variant: Variant,
    embedding: String,
    weights: String,
    d: usize,
    l: usize,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        dataset::save_embedding(&self.params.l, &dir.join("embedding.rpml"))?;
        dataset::save_embedding(&self.params.v, &dir.join("weights.rpml"))?;
        let manifest = Manifest {
            format_version: dataset::FORMAT_VERSION,
            iteration: self.iteration,
            variant: self.variant,
            embedding: "embedding.rpml".into(),
            weights: "weights.rpml".into(),
            d: self.params.l.nrows(),
            l: self.params.l.ncols(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            row: e.line(),
            message: format!("{}: {e}", path.display()),
        })?;
        let l = dataset::load_embedding(&dir.join(&manifest.embedding))?;
        let v = dataset::load_embedding(&dir.join(&manifest.weights))?;
        if l.shape() != (manifest.d, manifest.l) {
            return Err(Error::Dimension(format!(
                "checkpoint embedding is {}x{}, manifest says {}x{}",
                l.nrows(),
                l.ncols(),
                manifest.d,
                manifest.l
            )));
        }
        Ok(Self {
            params: ProductPoint::new(l, v),
            iteration: manifest.iteration,
            variant: manifest.variant,
        })
    }
}
