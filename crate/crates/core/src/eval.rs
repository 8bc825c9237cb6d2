//! Clustering and retrieval metrics for a labelled evaluation set.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabelVector;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_KS: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub nmi: f64,
    pub f_measure: f64,
    pub precision: f64,
    pub recall: f64,
    /// Recall@K in percent.
    pub recall_at_k: BTreeMap<usize, f64>,
}

impl EvalResult {
    /// Header and value line, tab separated: NMI, F, P, R, then R@K.
    pub fn to_tsv(&self) -> String {
        let mut head = vec!["NMI".to_string(), "F".into(), "P".into(), "R".into()];
        let mut vals = vec![
            format!("{:.6}", self.nmi),
            format!("{:.6}", self.f_measure),
            format!("{:.6}", self.precision),
            format!("{:.6}", self.recall),
        ];
        for (k, v) in &self.recall_at_k {
            head.push(format!("R@{k}"));
            vals.push(format!("{v:.4}"));
        }
        format!("{}\n{}\n", head.join("\t"), vals.join("\t"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: LabelVector,
    pub centroids: DMatrix<f64>,
    /// Within-cluster sum of squares of `labels`.
    pub wcss: f64,
    /// WCSS of every restart, in order.
    pub restart_wcss: Vec<f64>,
}

fn sq_dist_rows(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|c| (a[(i, c)] - b[(j, c)]).powi(2)).sum()
}

/// Within-cluster sum of squares of a labelling, using cluster means.
pub fn wcss(points: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let cents = centroids(points, labels, k);
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist_rows(points, i, &cents, l))
        .sum()
}

fn centroids(points: &DMatrix<f64>, labels: &[usize], k: usize) -> DMatrix<f64> {
    let mut sums = DMatrix::zeros(k, points.ncols());
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for c in 0..points.ncols() {
            sums[(l, c)] += points[(i, c)];
        }
    }
    for (l, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            sums.row_mut(l).unscale_mut(cnt as f64);
        }
    }
    sums
}

fn nearest(points: &DMatrix<f64>, i: usize, cents: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..cents.nrows() {
        let d = sq_dist_rows(points, i, cents, c);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeds<R: Rng>(points: &DMatrix<f64>, k: usize, rng: &mut R) -> DMatrix<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist_rows(points, i, points, chosen[0])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if d2[pick] == 0.0 {
                // Rounding pushed past the last positive weight.
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap();
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist_rows(points, i, points, next));
        }
    }
    points.select_rows(&chosen)
}

fn lloyd(points: &DMatrix<f64>, mut cents: DMatrix<f64>, max_iters: usize) -> (Vec<usize>, DMatrix<f64>, f64) {
    let n = points.nrows();
    let k = cents.nrows();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let assign: Vec<(usize, f64)> = (0..n).map(|i| nearest(points, i, &cents)).collect();
        let new_labels: Vec<usize> = assign.iter().map(|a| a.0).collect();
        let changed = new_labels != labels;
        labels = new_labels;
        // Refill empty clusters with the points farthest from their centroid.
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let mut dist: Vec<(usize, f64)> = assign.iter().map(|a| a.1).enumerate().collect();
        dist.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut donors = dist.into_iter();
        for c in 0..k {
            if counts[c] == 0 {
                for (i, _) in donors.by_ref() {
                    if counts[labels[i]] > 1 {
                        counts[labels[i]] -= 1;
                        labels[i] = c;
                        counts[c] = 1;
                        break;
                    }
                }
            }
        }
        cents = centroids(points, &labels, k);
        if !changed {
            break;
        }
    }
    let w = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist_rows(points, i, &cents, l))
        .sum();
    (labels, cents, w)
}

/// k-means++ seeded Lloyd iterations; the restart with the lowest WCSS wins
/// (first one on ties).
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64, restarts: usize, max_iters: usize) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k-means needs 1 <= k <= n (k = {k}, n = {n})")));
    }
    let mut rng = rng::substream(seed, rng::STREAM_KMEANS);
    let mut best: Option<(Vec<usize>, DMatrix<f64>, f64)> = None;
    let mut restart_wcss = Vec::new();
    for _ in 0..restarts.max(1) {
        let seeds = plus_plus_seeds(points, k, &mut rng);
        let (labels, cents, w) = lloyd(points, seeds, max_iters);
        restart_wcss.push(w);
        if best.as_ref().is_none_or(|b| w < b.2) {
            best = Some((labels, cents, w));
        }
    }
    let (labels, centroids, wcss) = best.unwrap();
    Ok(KMeansResult {
        labels: LabelVector::new(labels),
        centroids,
        wcss,
        restart_wcss,
    })
}

fn check_pair(truth: &LabelVector, pred: &LabelVector) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::Dimension(format!(
            "label vectors differ in length ({} vs {})",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

struct Contingency {
    n: f64,
    rows: Vec<f64>,
    cols: Vec<f64>,
    cells: Vec<(usize, usize, f64)>,
}

fn contingency(truth: &[usize], pred: &[usize]) -> Contingency {
    let mut cells: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        *cells.entry((t, p)).or_default() += 1;
        *rows.entry(t).or_default() += 1;
        *cols.entry(p).or_default() += 1;
    }
    let row_idx: BTreeMap<usize, usize> = rows.keys().enumerate().map(|(i, &k)| (k, i)).collect();
    let col_idx: BTreeMap<usize, usize> = cols.keys().enumerate().map(|(i, &k)| (k, i)).collect();
    Contingency {
        n: truth.len() as f64,
        rows: rows.values().map(|&v| v as f64).collect(),
        cols: cols.values().map(|&v| v as f64).collect(),
        cells: cells
            .into_iter()
            .map(|((t, p), c)| (row_idx[&t], col_idx[&p], c as f64))
            .collect(),
    }
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts.iter().map(|&c| c / n * (n / c).ln()).sum()
}

/// Mutual information over the arithmetic mean of the two entropies.
///
/// Two single-cluster labellings score 1; otherwise zero mutual information
/// scores 0. Labellings that are the same partition score exactly 1.
pub fn nmi(truth: &LabelVector, pred: &LabelVector) -> Result<f64> {
    check_pair(truth, pred)?;
    let ct = contingency(truth.as_slice(), pred.as_slice());
    if ct.rows.len() == 1 && ct.cols.len() == 1 {
        return Ok(1.0);
    }
    if ct.cells.len() == ct.rows.len() && ct.cells.len() == ct.cols.len() {
        return Ok(1.0);
    }
    let n = ct.n;
    let mi: f64 = ct
        .cells
        .iter()
        .map(|&(i, j, c)| c / n * ((n * c) / (ct.rows[i] * ct.cols[j])).ln())
        .sum();
    let denom = 0.5 * (entropy(&ct.rows, n) + entropy(&ct.cols, n));
    if mi <= 0.0 || denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCounts {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
}

fn pairs(c: f64) -> u64 {
    let c = c as u64;
    c * c.saturating_sub(1) / 2
}

pub fn pair_counts(truth: &LabelVector, pred: &LabelVector) -> Result<PairCounts> {
    check_pair(truth, pred)?;
    let ct = contingency(truth.as_slice(), pred.as_slice());
    let tp: u64 = ct.cells.iter().map(|&(_, _, c)| pairs(c)).sum();
    let same_pred: u64 = ct.cols.iter().map(|&c| pairs(c)).sum();
    let same_truth: u64 = ct.rows.iter().map(|&c| pairs(c)).sum();
    Ok(PairCounts {
        true_positive: tp,
        false_positive: same_pred - tp,
        false_negative: same_truth - tp,
    })
}

/// Pairwise precision, recall and F-measure over unordered example pairs.
/// Zero denominators yield 0.
pub fn pairwise_prf(truth: &LabelVector, pred: &LabelVector) -> Result<(f64, f64, f64)> {
    let pc = pair_counts(truth, pred)?;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(pc.true_positive, pc.true_positive + pc.false_positive);
    let r = ratio(pc.true_positive, pc.true_positive + pc.false_negative);
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    Ok((p, r, f))
}

/// Percentage of examples with at least one same-label example among their
/// `K` nearest neighbours (Euclidean, self excluded, ties to lower index).
pub fn recall_at_k(points: &DMatrix<f64>, labels: &LabelVector, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let n = points.nrows();
    labels.check_len(n)?;
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k >= n) {
        return Err(Error::Parameter(format!("recall@K needs 1 <= K < n (K = {bad}, n = {n})")));
    }
    let Some(&kmax) = ks.iter().max() else {
        return Ok(BTreeMap::new());
    };
    let lab = labels.as_slice();
    // For each query, the rank of the first same-label neighbour (if within kmax).
    let first_hit: Vec<Option<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, sq_dist_rows(points, i, points, j)))
                .collect();
            let by = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
            if kmax < cand.len() {
                cand.select_nth_unstable_by(kmax - 1, by);
                cand.truncate(kmax);
            }
            cand.sort_by(by);
            cand.iter().position(|&(j, _)| lab[j] == lab[i])
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|h| h.is_some_and(|r| r < k)).count();
            (k, 100.0 * hits as f64 / n as f64)
        })
        .collect())
}

/// k-means with `k` set to the number of true classes, then NMI, pairwise
/// P/R/F and Recall@K.
pub fn evaluate(points: &DMatrix<f64>, truth: &LabelVector, ks: &[usize], seed: u64) -> Result<EvalResult> {
    truth.check_len(points.nrows())?;
    let k = truth.num_classes();
    let km = kmeans(points, k, seed, 10, 300)?;
    let (precision, recall, f_measure) = pairwise_prf(truth, &km.labels)?;
    Ok(EvalResult {
        nmi: nmi(truth, &km.labels)?,
        f_measure,
        precision,
        recall,
        recall_at_k: recall_at_k(points, truth, ks)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn lv(v: &[usize]) -> LabelVector {
        LabelVector::new(v.to_vec())
    }

    #[test]
    fn nmi_identical_is_one() {
        assert_eq!(nmi(&lv(&[0, 0, 1, 1, 2]), &lv(&[0, 0, 1, 1, 2])).unwrap(), 1.0);
        assert_eq!(nmi(&lv(&[0, 0, 1, 1, 2]), &lv(&[5, 5, 3, 3, 0])).unwrap(), 1.0);
    }

    #[test]
    fn nmi_single_prediction_is_zero() {
        assert_eq!(nmi(&lv(&[0, 0, 1, 1]), &lv(&[0, 0, 0, 0])).unwrap(), 0.0);
        assert_eq!(nmi(&lv(&[3, 3, 3]), &lv(&[1, 1, 1])).unwrap(), 1.0);
    }

    #[test]
    fn nmi_independent_partitions() {
        assert_eq!(nmi(&lv(&[0, 0, 1, 1]), &lv(&[0, 1, 0, 1])).unwrap(), 0.0);
    }

    #[test]
    fn nmi_length_mismatch() {
        assert!(nmi(&lv(&[0, 1]), &lv(&[0])).is_err());
    }

    #[test]
    fn prf_example() {
        let (p, r, f) = pairwise_prf(&lv(&[0, 0, 1, 1]), &lv(&[0, 0, 0, 1])).unwrap();
        assert_relative_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(r, 0.5, epsilon = 1e-15);
        assert_relative_eq!(f, 0.4, epsilon = 1e-15);
    }

    #[test]
    fn prf_perfect_and_singletons() {
        assert_eq!(pairwise_prf(&lv(&[0, 0, 1]), &lv(&[2, 2, 0])).unwrap(), (1.0, 1.0, 1.0));
        assert_eq!(pairwise_prf(&lv(&[0, 0, 1, 1]), &lv(&[0, 1, 2, 3])).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn kmeans_k_equals_n() {
        let pts = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 3.0, 5.0, 5.0]);
        let km = kmeans(&pts, 4, 1, 3, 100).unwrap();
        assert_eq!(km.wcss, 0.0);
        assert_eq!(km.labels.num_classes(), 4);
    }

    #[test]
    fn kmeans_single_cluster() {
        let pts = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, 3.0, 6.0]);
        let km = kmeans(&pts, 1, 1, 2, 100).unwrap();
        assert!(km.labels.as_slice().iter().all(|&l| l == 0));
        // mean 3, squared deviations 4 + 1 + 0 + 9.
        assert_relative_eq!(km.wcss, 14.0, epsilon = 1e-12);
    }

    #[test]
    fn kmeans_k_too_large() {
        let pts = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(kmeans(&pts, 3, 0, 1, 10).is_err());
    }

    #[test]
    fn recall_singletons_and_duplicates() {
        let pts = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 5.0, 6.0]);
        let r = recall_at_k(&pts, &lv(&[0, 1, 2, 3]), &[1, 2, 3]).unwrap();
        assert!(r.values().all(|&v| v == 0.0));
        let dup = DMatrix::from_row_slice(4, 1, &[0.0, 0.0, 7.0, 7.0]);
        let r = recall_at_k(&dup, &lv(&[0, 0, 1, 1]), &[1]).unwrap();
        assert_eq!(r[&1], 100.0);
        assert!(recall_at_k(&dup, &lv(&[0, 0, 1, 1]), &[4]).is_err());
    }

    #[test]
    fn tsv_layout() {
        let mut rk = BTreeMap::new();
        rk.insert(1, 50.0);
        rk.insert(2, 75.0);
        let e = EvalResult { nmi: 0.5, f_measure: 0.25, precision: 0.125, recall: 1.0, recall_at_k: rk };
        assert_eq!(
            e.to_tsv(),
            "NMI\tF\tP\tR\tR@1\tR@2\n0.500000\t0.250000\t0.125000\t1.000000\t50.0000\t75.0000\n"
        );
    }
}
