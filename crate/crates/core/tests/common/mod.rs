//! Reference implementations and instance generators shared by the
//! integration tests. The oracles are written as plain loops over examples,
//! triplets or pairs and never call into the code under test beyond its
//! public data types.

#![allow(dead_code)]

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rpml_core::dataset::{FeatureMatrix, LabelVector};
use rpml_core::graph_cluster::GraphModel;
use rpml_core::loss::{LossConfig, Variant};
use rpml_core::manifold::ProductPoint;
use rpml_core::triplets::Triplet;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn random_orthonormal(d: usize, l: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    gaussian(d, l, rng).qr().q()
}

pub fn random_features(n: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    FeatureMatrix::new(gaussian(n, d, rng)).unwrap()
}

/// Random triplets over `n` examples with three distinct members each.
pub fn random_triplets(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Triplet> {
    (0..count)
        .map(|_| {
            let idx: Vec<usize> = rand::seq::index::sample(rng, n, 3).into_vec();
            Triplet { anchor: idx[0], positive: idx[1], negative: idx[2] }
        })
        .collect()
}

/// A random loss instance: features, triplets and a point with weights away
/// from saturation.
pub struct LossInstance {
    pub x: FeatureMatrix,
    pub triplets: Vec<Triplet>,
    pub params: ProductPoint,
    pub cfg: LossConfig,
}

pub fn loss_instance(d: usize, l: usize, count: usize, variant: Variant, rng: &mut ChaCha8Rng) -> LossInstance {
    let n = (count / 2).max(6);
    let x = FeatureMatrix::new(gaussian(n, d, rng) * 0.5).unwrap();
    let triplets = random_triplets(n, count, rng);
    let lmat = random_orthonormal(d, l, rng);
    let v = match variant {
        Variant::Rpml => gaussian(2 * d, 1, rng) * 0.3,
        Variant::RpmlV1 => gaussian(d, l, rng) * (1.0 / (d as f64).sqrt()),
    };
    let alpha = rng.random_range(20.0..60.0);
    LossInstance {
        x,
        triplets,
        params: ProductPoint::new(lmat, v),
        cfg: LossConfig { alpha, variant, ..LossConfig::default() },
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Objective and Euclidean gradients, one triplet at a time.
pub fn naive_objective_and_grad(
    params: &ProductPoint,
    x: &FeatureMatrix,
    triplets: &[Triplet],
    cfg: &LossConfig,
) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let l = &params.l;
    let d = l.nrows();
    let t = 4.0 * cfg.alpha.to_radians().tan().powi(2);
    let mut value = 0.0;
    let mut gl = DMatrix::zeros(d, l.ncols());
    let mut gv = DMatrix::zeros(params.v.nrows(), params.v.ncols());
    for tr in triplets {
        let xa = x.row(tr.anchor);
        let xp = x.row(tr.positive);
        let xn = x.row(tr.negative);
        let avg = (&xa + &xp) * 0.5;
        let dap = &xa - &xp;
        let dnm = &xn - &avg;
        let pa = l.transpose() * &dap;
        let pn = l.transpose() * &dnm;
        let z = pa.norm_squared() - t * pn.norm_squared();
        let m = softplus(z);
        let (w, dw_dv) = match cfg.variant {
            Variant::Rpml => {
                let mut cat = DVector::zeros(2 * d);
                for k in 0..d {
                    cat[k] = avg[k];
                    cat[d + k] = xn[k];
                }
                let s = params.v.column(0).dot(&cat);
                let w = logistic(s);
                let grad = DMatrix::from_column_slice(2 * d, 1, (cat * (w * (1.0 - w))).as_slice());
                (w, grad)
            }
            Variant::RpmlV1 => {
                let rr = &params.v;
                let sp = (rr.transpose() * &xa).dot(&(rr.transpose() * &xp));
                let sm = (rr.transpose() * &avg).dot(&(rr.transpose() * &xn));
                let wp = logistic(sp);
                let wm = 1.0 - logistic(sm);
                let hp = wp * (1.0 - wp);
                let hm = logistic(sm) * (1.0 - logistic(sm));
                let sym_p = &xa * xp.transpose() + &xp * xa.transpose();
                let sym_m = &avg * xn.transpose() + &xn * avg.transpose();
                let grad = (sym_p * hp - sym_m * hm) * rr * 0.5;
                ((wp + wm) / 2.0, grad)
            }
        };
        let f = w * m;
        value += softplus(f);
        let g = logistic(f);
        let beta = logistic(z);
        let outer = &dap * dap.transpose() - (&dnm * dnm.transpose()) * t;
        gl += outer * l * (2.0 * g * w * beta);
        gv += dw_dv * (g * m);
    }
    (value, gl, gv)
}

/// Central differences of `f` at every entry of `at`.
pub fn finite_difference<F: Fn(&DMatrix<f64>) -> f64>(f: F, at: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(at.nrows(), at.ncols());
    for i in 0..at.nrows() {
        for j in 0..at.ncols() {
            let mut plus = at.clone();
            plus[(i, j)] += h;
            let mut minus = at.clone();
            minus[(i, j)] -= h;
            out[(i, j)] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
    }
    out
}

pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}

/// k nearest neighbours of every row by full sort, ties to the lower index.
pub fn brute_knn(x: &FeatureMatrix, k: usize) -> Vec<Vec<usize>> {
    let n = x.n();
    (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| ((x.row(i) - x.row(j)).norm_squared(), j))
                .collect();
            others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Stationary distribution of the damped walk by solving the linear system
/// `ω(I − P̂) = 0`, `Σω = 1` directly.
pub fn dense_stationary(g: &GraphModel, damping: f64) -> Vec<f64> {
    let n = g.n();
    let mut p = DMatrix::from_element(n, n, damping / n as f64);
    for i in 0..n {
        for e in g.edges(i) {
            p[(i, e.target)] += (1.0 - damping) * e.prob;
        }
    }
    // Rows of the system: (I − P̂)ᵀ ωᵀ = 0 with the last row replaced by Σω = 1.
    let mut a = DMatrix::identity(n, n) - p.transpose();
    let mut b = DVector::zeros(n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    b[n - 1] = 1.0;
    a.lu().solve(&b).unwrap().as_slice().to_vec()
}

/// `M(MᵀM)^{-1/2}` via a symmetric eigendecomposition.
pub fn polar_by_eigen(m: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = m.transpose() * m;
    let eig = SymmetricEigen::new(gram);
    let inv_sqrt = eig.eigenvalues.map(|v| 1.0 / v.sqrt());
    let s = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
    m * s
}

/// (TP, FP, FN) over all unordered pairs.
pub fn brute_pairs(truth: &[usize], pred: &[usize]) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for i in 0..truth.len() {
        for j in (i + 1)..truth.len() {
            let same_t = truth[i] == truth[j];
            let same_p = pred[i] == pred[j];
            match (same_p, same_t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
    }
    (tp, fp, fneg)
}

/// NMI from probabilities, `−Σ p ln p` entropies.
pub fn brute_nmi(truth: &[usize], pred: &[usize]) -> f64 {
    let n = truth.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut pt: HashMap<usize, f64> = HashMap::new();
    let mut pp: HashMap<usize, f64> = HashMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        *joint.entry((t, p)).or_default() += 1.0 / n;
        *pt.entry(t).or_default() += 1.0 / n;
        *pp.entry(p).or_default() += 1.0 / n;
    }
    let h = |m: &HashMap<usize, f64>| -m.values().map(|p| p * p.ln()).sum::<f64>();
    let mi: f64 = joint.iter().map(|(&(t, p), &pj)| pj * (pj / (pt[&t] * pp[&p])).ln()).sum();
    let (ht, hp) = (h(&pt), h(&pp));
    if pt.len() == 1 && pp.len() == 1 {
        return 1.0;
    }
    if ht + hp == 0.0 {
        return 0.0;
    }
    mi / ((ht + hp) / 2.0)
}

/// Recall@K by double loop and full sort.
pub fn brute_recall(e: &DMatrix<f64>, labels: &[usize], k: usize) -> f64 {
    let n = e.nrows();
    let mut hits = 0;
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ((e.row(i) - e.row(j)).norm_squared(), j))
            .collect();
        d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        if d.iter().take(k).any(|&(_, j)| labels[j] == labels[i]) {
            hits += 1;
        }
    }
    100.0 * hits as f64 / n as f64
}

/// Random labels over `classes` classes, each used at least twice.
pub fn random_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> LabelVector {
    assert!(n >= 2 * classes);
    let mut v: Vec<usize> = (0..n).map(|i| if i < 2 * classes { i / 2 } else { rng.random_range(0..classes) }).collect();
    v.shuffle(rng);
    LabelVector::new(v)
}

/// Two isotropic blobs in the plane with unit spread whose centres are
/// `separation` apart; the first `per` rows belong to blob 0.
pub fn two_blobs(per: usize, separation: f64, rng: &mut ChaCha8Rng) -> (FeatureMatrix, LabelVector) {
    let mut rows = Vec::with_capacity(2 * per);
    let mut labels = Vec::with_capacity(2 * per);
    for b in 0..2 {
        for _ in 0..per {
            let dx: f64 = StandardNormal.sample(rng);
            let dy: f64 = StandardNormal.sample(rng);
            rows.push(vec![b as f64 * separation + dx, dy]);
            labels.push(b);
        }
    }
    (FeatureMatrix::from_rows(&rows).unwrap(), LabelVector::new(labels))
}

/// Isotropic unit-spread clusters in `ℝ^d` whose centres lie on a random
/// orthonormal frame scaled so that every pair of centres is `separation`
/// apart. Returns a training and an independent test draw.
pub struct Clusters {
    pub train: FeatureMatrix,
    pub train_labels: LabelVector,
    pub test: FeatureMatrix,
    pub test_labels: LabelVector,
}

pub fn gaussian_clusters(classes: usize, d: usize, per: usize, separation: f64, seed: u64) -> Clusters {
    let mut rng = rng(seed);
    let frame = random_orthonormal(d, classes, &mut rng);
    let scale = separation / 2f64.sqrt();
    let draw = |rng: &mut ChaCha8Rng| {
        let mut m = DMatrix::zeros(classes * per, d);
        let mut labels = Vec::with_capacity(classes * per);
        for c in 0..classes {
            for i in 0..per {
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(rng);
                    m[(c * per + i, j)] = scale * frame[(j, c)] + z;
                }
                labels.push(c);
            }
        }
        (FeatureMatrix::new(m).unwrap(), LabelVector::new(labels))
    };
    let (train, train_labels) = draw(&mut rng);
    let (test, test_labels) = draw(&mut rng);
    Clusters { train, train_labels, test, test_labels }
}

/// Fraction of examples whose predicted cluster's majority truth label is
/// their own.
pub fn purity(truth: &[usize], pred: &[usize]) -> f64 {
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        *counts.entry((p, t)).or_default() += 1;
    }
    let mut best: HashMap<usize, usize> = HashMap::new();
    for (&(p, _), &c) in &counts {
        let e = best.entry(p).or_default();
        *e = (*e).max(c);
    }
    best.values().sum::<usize>() as f64 / truth.len() as f64
}
