//! Triplet sampling from (pseudo-)labels and the column-stacked matrices
//! the loss is evaluated on.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureMatrix, LabelVector};
use crate::error::{Error, Result};
use crate::rng;

/// Indices of an (anchor, positive, negative) triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletStats {
    pub triplets: usize,
    pub anchors: usize,
    /// Examples skipped as anchors because their cluster has one member.
    pub singleton_anchors: usize,
    pub clusters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
    pub stats: TripletStats,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// Draws `per_anchor` triplets for every example whose cluster has at least
/// two members. Positives are uniform over the anchor's cluster peers and
/// negatives uniform over all examples of other clusters, with replacement.
///
/// Each anchor has its own RNG derived from `(seed, anchor)`, so the output
/// does not depend on how the work is scheduled.
pub fn generate_triplets(labels: &LabelVector, per_anchor: usize, seed: u64) -> Result<TripletSet> {
    let labels = labels.as_slice();
    let n = labels.len();
    let num_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_labels];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let clusters = members.iter().filter(|m| !m.is_empty()).count();
    if clusters < 2 {
        return Err(Error::Triplets("no negatives available".into()));
    }
    if members.iter().all(|m| m.len() < 2) {
        return Err(Error::Triplets("no positives available".into()));
    }
    // Position of each example inside its own cluster list.
    let mut slot = vec![0usize; n];
    for m in &members {
        for (k, &i) in m.iter().enumerate() {
            slot[i] = k;
        }
    }

    let base = rng::derive_seed(seed, rng::STREAM_TRIPLETS);
    let per: Vec<Vec<Triplet>> = (0..n)
        .into_par_iter()
        .map(|a| {
            let peers = &members[labels[a]];
            if peers.len() < 2 {
                return Vec::new();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(rng::derive_seed(base, a as u64));
            (0..per_anchor)
                .map(|_| {
                    let mut k = rng.random_range(0..peers.len() - 1);
                    if k >= slot[a] {
                        k += 1;
                    }
                    let negative = loop {
                        let j = rng.random_range(0..n);
                        if labels[j] != labels[a] {
                            break j;
                        }
                    };
                    Triplet {
                        anchor: a,
                        positive: peers[k],
                        negative,
                    }
                })
                .collect()
        })
        .collect();

    let anchors = per.iter().filter(|v| !v.is_empty()).count();
    let singleton_anchors = n - anchors;
    let triplets: Vec<Triplet> = per.into_iter().flatten().collect();
    Ok(TripletSet {
        stats: TripletStats {
            triplets: triplets.len(),
            anchors,
            singleton_anchors,
            clusters,
        },
        triplets,
    })
}

/// Column-stacked triplet data, one column per triplet.
///
/// `a` holds the anchor/positive midpoints, `c` the midpoint stacked over the
/// negative, `d_ap` the anchor−positive differences and `d_nm` the
/// negative−midpoint differences. Anchors and positives are kept as well for
/// the bilinear weight function and the baseline losses.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d_ap: DMatrix<f64>,
    pub d_nm: DMatrix<f64>,
    pub anchors: DMatrix<f64>,
    pub positives: DMatrix<f64>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Negatives, the lower half of `c`.
    pub fn negatives(&self) -> nalgebra::DMatrixView<'_, f64> {
        let d = self.dim();
        self.c.view((d, 0), (d, self.len()))
    }

    /// Sub-batch made of the given columns, in the given order.
    pub fn select(&self, cols: &[usize]) -> TripletBatch {
        TripletBatch {
            triplets: cols.iter().map(|&i| self.triplets[i]).collect(),
            a: self.a.select_columns(cols),
            c: self.c.select_columns(cols),
            d_ap: self.d_ap.select_columns(cols),
            d_nm: self.d_nm.select_columns(cols),
            anchors: self.anchors.select_columns(cols),
            positives: self.positives.select_columns(cols),
        }
    }
}

pub fn build_batch(x: &FeatureMatrix, triplets: &[Triplet]) -> Result<TripletBatch> {
    let (n, d, t) = (x.n(), x.d(), triplets.len());
    for (pos, tr) in triplets.iter().enumerate() {
        for index in [tr.anchor, tr.positive, tr.negative] {
            if index >= n {
                return Err(Error::IndexOutOfRange { position: pos, index, n });
            }
        }
    }
    let xv = x.values();
    let mut a = DMatrix::zeros(d, t);
    let mut c = DMatrix::zeros(2 * d, t);
    let mut d_ap = DMatrix::zeros(d, t);
    let mut d_nm = DMatrix::zeros(d, t);
    let mut anchors = DMatrix::zeros(d, t);
    let mut positives = DMatrix::zeros(d, t);
    for (col, tr) in triplets.iter().enumerate() {
        for k in 0..d {
            let xa = xv[(tr.anchor, k)];
            let xp = xv[(tr.positive, k)];
            let xn = xv[(tr.negative, k)];
            let mid = (xa + xp) / 2.0;
            a[(k, col)] = mid;
            c[(k, col)] = mid;
            c[(d + k, col)] = xn;
            d_ap[(k, col)] = xa - xp;
            d_nm[(k, col)] = xn - mid;
            anchors[(k, col)] = xa;
            positives[(k, col)] = xp;
        }
    }
    Ok(TripletBatch {
        triplets: triplets.to_vec(),
        a,
        c,
        d_ap,
        d_nm,
        anchors,
        positives,
    })
}
