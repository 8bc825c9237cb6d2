//! Python bindings. Matrices cross the boundary as lists of rows.

use nalgebra::DMatrix;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rpml_core::dataset::{self, FeatureMatrix, LabelVector};
use rpml_core::eval;
use rpml_core::graph_cluster::{self, ClusterConfig};
use rpml_core::loss::{LossConfig, Variant};
use rpml_core::manifold::ProductPoint;
use rpml_core::trainer::{self, TrainConfig, TrainMode, TrainReport};
use rpml_core::triplets::generate_triplets;
use rpml_core::{Error, ErrorKind};

fn to_py(e: Error) -> PyErr {
    match (&e, e.kind()) {
        (Error::Io { .. }, _) => PyOSError::new_err(e.to_string()),
        (_, ErrorKind::Numerical) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Row lists to a matrix; every row must have the same length.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, Error> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(Error::Format {
            row: i,
            message: format!("expected {d} values, found {}", r.len()),
        });
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn features(rows: &[Vec<f64>]) -> PyResult<FeatureMatrix> {
    FeatureMatrix::new(matrix_from_rows(rows).map_err(to_py)?).map_err(to_py)
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn check(problems: Vec<String>) -> PyResult<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(PyValueError::new_err(format!("invalid parameter(s): {}", problems.join("; "))))
    }
}

/// Pseudo-labels from authority-ascent clustering.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (features, k=50, gamma=100.0, epsilon=0.65, damping=0.01, tol=1e-12, max_power_iters=10_000))]
fn cluster(
    py: Python<'_>,
    features: Vec<Vec<f64>>,
    k: usize,
    gamma: f64,
    epsilon: f64,
    damping: f64,
    tol: f64,
    max_power_iters: usize,
) -> PyResult<Vec<usize>> {
    let x = self::features(&features)?;
    let cfg = ClusterConfig { k, gamma, epsilon, damping, tol, max_power_iters };
    check(cfg.problems())?;
    let a = py.detach(|| graph_cluster::cluster(&x, &cfg)).map_err(to_py)?;
    Ok(a.labels.into_inner())
}

/// `(anchor, positive, negative)` index triples.
#[pyfunction]
#[pyo3(signature = (labels, per_anchor=5, seed=0))]
fn triplets(labels: Vec<usize>, per_anchor: usize, seed: u64) -> PyResult<Vec<(usize, usize, usize)>> {
    let set = generate_triplets(&LabelVector::new(labels), per_anchor, seed).map_err(to_py)?;
    Ok(set.triplets.iter().map(|t| (t.anchor, t.positive, t.negative)).collect())
}

/// A learned embedding and its training log.
#[pyclass(module = "rpml", frozen)]
struct Model {
    params: ProductPoint,
    report: TrainReport,
}

#[pymethods]
impl Model {
    /// `d × l` projection with orthonormal columns.
    #[getter]
    fn embedding(&self) -> Vec<Vec<f64>> {
        rows_of(&self.params.l)
    }

    #[getter]
    fn weights(&self) -> Vec<Vec<f64>> {
        rows_of(&self.params.v)
    }

    /// Cost after every iteration (epoch in stochastic mode).
    #[getter]
    fn costs(&self) -> Vec<f64> {
        self.report.costs()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.report.iterations
    }

    #[getter]
    fn triplet_count(&self) -> usize {
        self.report.triplets.triplets
    }

    fn embed(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = self::features(&features)?;
        Ok(rows_of(&trainer::embed(&self.params.l, &x).map_err(to_py)?))
    }

    /// Writes the embedding in the binary matrix format.
    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        dataset::save_embedding(&self.params.l, &path).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(d={}, l={}, variant={}, iterations={})",
            self.params.l.nrows(),
            self.params.l.ncols(),
            self.report.variant,
            self.report.iterations
        )
    }
}

#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (
    features, labels, l=8, alpha=45.0, variant="rpml", mode="full_batch_cg", maxiter=500,
    grad_tol=1e-6, batch_size=120, eta=0.01, epochs=30, per_anchor=5, v1_rank=None,
    freeze_weights=false, seed=0,
))]
fn fit(
    py: Python<'_>,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    l: usize,
    alpha: f64,
    variant: &str,
    mode: &str,
    maxiter: usize,
    grad_tol: f64,
    batch_size: usize,
    eta: f64,
    epochs: usize,
    per_anchor: usize,
    v1_rank: Option<usize>,
    freeze_weights: bool,
    seed: u64,
) -> PyResult<Model> {
    let x = self::features(&features)?;
    let cfg = TrainConfig {
        l,
        loss: LossConfig { alpha, variant: parse::<Variant>(variant)?, v1_rank, ..LossConfig::default() },
        maxiter,
        grad_tol,
        mode: parse::<TrainMode>(mode)?,
        batch_size,
        eta,
        epochs,
        seed,
        freeze_weights,
        per_anchor,
    };
    check(cfg.problems())?;
    let labels = LabelVector::new(labels);
    let fit = py.detach(|| trainer::fit(&x, &labels, &cfg)).map_err(to_py)?;
    Ok(Model { params: fit.params, report: fit.report })
}

/// Projects rows of `features` with a `d × l` matrix.
#[pyfunction]
fn embed(features: Vec<Vec<f64>>, embedding: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let x = self::features(&features)?;
    let l = matrix_from_rows(&embedding).map_err(to_py)?;
    Ok(rows_of(&trainer::embed(&l, &x).map_err(to_py)?))
}

/// NMI, pairwise F/P/R of k-means on the points, and Recall@K (percent).
#[pyfunction]
#[pyo3(signature = (points, labels, ks=vec![1, 2, 4, 8], seed=0))]
fn evaluate<'py>(
    py: Python<'py>,
    points: Vec<Vec<f64>>,
    labels: Vec<usize>,
    ks: Vec<usize>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = matrix_from_rows(&points).map_err(to_py)?;
    let truth = LabelVector::new(labels);
    let r = py.detach(|| eval::evaluate(&p, &truth, &ks, seed)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("nmi", r.nmi)?;
    d.set_item("f", r.f_measure)?;
    d.set_item("precision", r.precision)?;
    d.set_item("recall", r.recall)?;
    d.set_item("recall_at_k", r.recall_at_k)?;
    Ok(d)
}

#[pyfunction]
fn nmi(truth: Vec<usize>, pred: Vec<usize>) -> PyResult<f64> {
    eval::nmi(&LabelVector::new(truth), &LabelVector::new(pred)).map_err(to_py)
}

/// `(precision, recall, f)` over same-cluster pairs.
#[pyfunction]
fn pairwise_prf(truth: Vec<usize>, pred: Vec<usize>) -> PyResult<(f64, f64, f64)> {
    eval::pairwise_prf(&LabelVector::new(truth), &LabelVector::new(pred)).map_err(to_py)
}

#[pyfunction]
fn recall_at_k(points: Vec<Vec<f64>>, labels: Vec<usize>, ks: Vec<usize>) -> PyResult<std::collections::BTreeMap<usize, f64>> {
    let p = matrix_from_rows(&points).map_err(to_py)?;
    eval::recall_at_k(&p, &LabelVector::new(labels), &ks).map_err(to_py)
}

/// Labels and centroids of the best of `restarts` k-means runs.
#[pyfunction]
#[pyo3(signature = (points, k, seed=0, restarts=10, max_iters=300))]
fn kmeans(points: Vec<Vec<f64>>, k: usize, seed: u64, restarts: usize, max_iters: usize) -> PyResult<(Vec<usize>, Vec<Vec<f64>>)> {
    let p = matrix_from_rows(&points).map_err(to_py)?;
    let r = eval::kmeans(&p, k, seed, restarts, max_iters).map_err(to_py)?;
    Ok((r.labels.into_inner(), rows_of(&r.centroids)))
}

#[pymodule]
pub fn rpml(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add_function(wrap_pyfunction!(triplets, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(nmi, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_prf, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let m = matrix_from_rows(&rows).unwrap();
        assert_eq!(m.shape(), (3, 2));
        assert_eq!(m[(2, 0)], 5.0);
        assert_eq!(rows_of(&m), rows);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let err = matrix_from_rows(&[vec![1.0, 2.0], vec![3.0]]).unwrap_err();
        assert_eq!(err.to_string(), "format error at row 1: expected 2 values, found 1");
    }
}
