use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyDict>)>(f: F) {
    Python::initialize();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(rpml::rpml)(py);
        let globals = PyDict::new(py);
        globals.set_item("rpml", m).unwrap();
        f(py, &globals);
    });
}

fn run(py: Python<'_>, globals: &Bound<'_, PyDict>, code: &str) {
    let code = std::ffi::CString::new(code).unwrap();
    if let Err(e) = py.run(&code, Some(globals), None) {
        e.display(py);
        panic!("python code failed");
    }
}

const BLOBS: &str = r#"
import random
rng = random.Random(3)
def blob(cx, n):
    return [[cx + rng.gauss(0, 1), rng.gauss(0, 1), rng.gauss(0, 1)] for _ in range(n)]
train = blob(0.0, 30) + blob(15.0, 30)
truth = [0] * 30 + [1] * 30
"#;

#[test]
fn end_to_end_from_python() {
    with_module(|py, g| {
        run(py, g, BLOBS);
        run(
            py,
            g,
            r#"
labels = rpml.cluster(train, k=10, epsilon=0.3)
assert len(labels) == 60
assert all(labels[i] != labels[j] for i in range(30) for j in range(30, 60))
trip = rpml.triplets(truth, per_anchor=2, seed=1)
assert len(trip) == 120 and all(truth[a] == truth[p] != truth[n] for a, p, n in trip)
model = rpml.fit(train, truth, l=2, seed=4)
L = model.embedding
assert len(L) == 3 and len(L[0]) == 2
gram = [[sum(L[r][i] * L[r][j] for r in range(3)) for j in range(2)] for i in range(2)]
assert all(abs(gram[i][j] - (i == j)) < 1e-10 for i in range(2) for j in range(2))
assert all(b <= a + 1e-12 for a, b in zip(model.costs, model.costs[1:]))
e = model.embed(train)
assert e == rpml.embed(train, L)
m = rpml.evaluate(e, truth, ks=[1, 4], seed=2)
assert m["nmi"] == 1.0 and m["recall_at_k"][1] == 100.0
assert repr(model).startswith("Model(d=3, l=2")
"#,
        );
    });
}

#[test]
fn metric_functions() {
    with_module(|py, g| {
        run(
            py,
            g,
            r#"
assert rpml.nmi([0, 0, 1, 1], [5, 5, 7, 7]) == 1.0
p, r, f = rpml.pairwise_prf([0, 0, 1, 1], [0, 0, 0, 1])
assert abs(p - 1 / 3) < 1e-15 and r == 0.5 and abs(f - 0.4) < 1e-15
rec = rpml.recall_at_k([[0.0], [0.1], [5.0], [5.1]], [0, 0, 1, 1], [1, 2])
assert rec == {1: 100.0, 2: 100.0}
labels, centroids = rpml.kmeans([[0.0], [0.2], [9.0], [9.2]], 2, seed=1)
assert labels[0] == labels[1] != labels[2] == labels[3] and len(centroids) == 2
"#,
        );
    });
}

#[test]
fn errors_map_to_python_exceptions() {
    with_module(|py, g| {
        run(
            py,
            g,
            r#"
def raises(exc, fn, *args, **kw):
    try:
        fn(*args, **kw)
    except exc as e:
        return str(e)
    raise AssertionError("no exception")
assert "examples" in raises(ValueError, rpml.cluster, [[1.0, 2.0]])
assert "row 1" in raises(ValueError, rpml.embed, [[1.0, 2.0], [3.0]], [[1.0], [0.0]])
assert "alpha" in raises(ValueError, rpml.fit, [[0.0], [1.0]], [0, 1], l=1, alpha=120.0)
assert "variant" in raises(ValueError, rpml.fit, [[0.0], [1.0]], [0, 1], l=1, variant="nope")
raises(OSError, rpml.fit([[0.0, 1.0], [1.0, 0.0], [0.0, 2.0], [2.0, 0.0]], [0, 1, 0, 1], l=1).save, "/nonexistent/dir/x.rpml")
"#,
        );
    });
}
