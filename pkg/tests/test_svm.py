import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from co2occ.ingest import NormStats
from co2occ.svm import (
    CACHE_ENV,
    KernelParams,
    SvmError,
    SvmModel,
    balanced_weights,
    default_cache_bytes,
    dual_objective,
    kernel_matrix,
    predict,
    rbf_kernel,
    train_binary,
    train_multiclass,
)
from oracles import qp_enumerate, random_binary_problem, rbf_gram


def test_rbf_kernel_examples():
    assert rbf_kernel([1.0, 2.0], [1.0, 2.0], 3.7) == 1.0
    assert rbf_kernel([0.0], [1.0], math.log(2)) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(SvmError):
        rbf_kernel([0.0], [1.0], 0.0)
    with pytest.raises(SvmError, match="dimension"):
        rbf_kernel([0.0], [1.0, 2.0], 1.0)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(1e-3, 10))
def test_rbf_kernel_symmetric(x, z, gamma):
    assert rbf_kernel(x, z, gamma) == rbf_kernel(z, x, gamma)


@settings(max_examples=50)
@given(st.integers(1, 20), st.integers(1, 4), st.floats(1e-3, 50), st.integers(0, 2**31))
def test_kernel_matrix_psd(n, d, gamma, seed):
    x = np.random.default_rng(seed).normal(size=(n, d))
    k = kernel_matrix(x, x, gamma)
    np.testing.assert_array_equal(k, k.T)
    assert np.linalg.eigvalsh(k).min() >= -1e-9
    np.testing.assert_allclose(k, rbf_gram(x, x, gamma), atol=1e-12)


@pytest.mark.parametrize("y, expected", [
    ([0, 0, 1, 1], {0: 1.0, 1: 1.0}),
    ([0, 0, 0, 1], {0: 2 / 3, 1: 2.0}),
    ([5, 7, 7, 9, 9, 9], {5: 2.0, 7: 1.0, 9: 2 / 3}),
])
def test_balanced_weights(y, expected):
    w = balanced_weights(y)
    assert w.keys() == expected.keys()
    for k in w:
        assert w[k] == pytest.approx(expected[k])
    counts = {c: y.count(c) for c in set(y)}
    assert sum(w[c] * counts[c] for c in counts) == pytest.approx(len(y))


@pytest.mark.parametrize("y", [[0], []])
def test_balanced_weights_errors(y):
    with pytest.raises(SvmError):
        balanced_weights(y)


def test_params_validation():
    for g, c in [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0), (math.inf, 1.0)]:
        with pytest.raises(SvmError):
            KernelParams(gamma=g, c=c)


def _check_feasible(m, y, w, c):
    alpha = m.alpha
    box = np.array([c * w[v] for v in y])
    assert np.all(alpha >= 0) and np.all(alpha <= box)
    ys = np.where(y == m.positive, 1.0, -1.0)
    assert abs(alpha @ ys) <= 1e-8


@pytest.mark.parametrize("seed", range(25))
def test_smo_matches_exact_qp(seed):
    rng = np.random.default_rng(seed)
    x, y, w, params = random_binary_problem(rng)
    ys = np.where(y == 0, 1.0, -1.0)
    gram = rbf_gram(x, x, params.gamma)
    box = np.array([params.c * w[v] for v in y])
    a_ref, b_ref, obj_ref = qp_enumerate(gram, ys, box)
    m = train_binary(x, y, params, weights=w, tol=1e-10)
    assert m.converged
    _check_feasible(m, y, w, params.c)
    assert m.objective == pytest.approx(obj_ref, abs=1e-6)
    assert dual_objective(m.alpha, ys, gram) == pytest.approx(obj_ref, abs=1e-6)
    probe = rng.normal(size=(40, x.shape[1]))
    dec_ref = rbf_gram(probe, x, params.gamma) @ (a_ref * ys) + b_ref
    clear = np.abs(dec_ref) > 1e-9
    np.testing.assert_array_equal(m.predict(probe)[clear], np.where(dec_ref >= 0, 0, 1)[clear])


def test_default_tolerance_reaches_kkt_tolerance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(60, 2))
    y = (x[:, 0] * x[:, 1] > 0).astype(int)
    m = train_binary(x, y, KernelParams(1.0, 10.0))
    assert m.converged and m.violation < 1e-3
    _check_feasible(m, y, {0: 1.0, 1: 1.0}, 10.0)


def test_two_points_margin_midway():
    x = np.array([[0.0, 0.0], [2.0, 0.0]])
    m = train_binary(x, [0, 1], KernelParams(0.5, 1e6))
    np.testing.assert_array_equal(m.predict(x), [0, 1])
    assert abs(m.decision_function([[1.0, 0.0]])[0]) < 1e-12
    # exact midpoint is a tie: smaller label wins
    assert predict(train_multiclass(x, [0, 1], KernelParams(0.5, 1e6)), [1.0, 0.0]) == 0


def test_xor_fits():
    x = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    y = np.array([0, 0, 1, 1])
    m = train_binary(x, y, KernelParams(1.0, 1e6))
    np.testing.assert_array_equal(m.predict(x), y)
    ys = np.where(y == 0, 1.0, -1.0)
    _, _, obj = qp_enumerate(rbf_gram(x, x, 1.0), ys, np.full(4, 1e6))
    assert m.objective == pytest.approx(obj, rel=1e-6)


def test_single_class_rejected():
    with pytest.raises(SvmError, match="2 classes"):
        train_binary([[0.0], [1.0]], [1, 1], KernelParams(1.0, 1.0))
    with pytest.raises(SvmError, match="single class"):
        train_multiclass([[0.0], [1.0]], [1, 1], KernelParams(1.0, 1.0))


def test_max_iter_flags_nonconvergence():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 2))
    y = rng.integers(0, 2, 40)
    m = train_binary(x, y, KernelParams(1.0, 1e4), max_iter=3)
    assert not m.converged and m.iterations == 3


def test_small_cache_gives_same_solution():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(50, 3))
    y = (x[:, 0] + 0.5 * rng.normal(size=50) > 0).astype(int)
    p = KernelParams(0.7, 5.0)
    full = train_binary(x, y, p)
    tiny = train_binary(x, y, p, cache_bytes=8 * 50 * 3)
    np.testing.assert_allclose(tiny.alpha, full.alpha, atol=1e-12)
    assert tiny.iterations == full.iterations


def test_cache_env(monkeypatch):
    monkeypatch.setenv(CACHE_ENV, "2")
    assert default_cache_bytes() == 2 * 1024 * 1024
    monkeypatch.setenv(CACHE_ENV, "lots")
    with pytest.raises(SvmError, match=CACHE_ENV):
        default_cache_bytes()
    monkeypatch.delenv(CACHE_ENV)
    assert default_cache_bytes() == 64 * 1024 * 1024


@pytest.mark.parametrize("seed", range(5))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.normal(size=(30, 2))
    y = (np.linalg.norm(x, axis=1) > 1.1).astype(int)
    p = KernelParams(0.8, 4.0)
    a = train_binary(x, y, p, tol=1e-9)
    perm = rng.permutation(30)
    b = train_binary(x[perm], y[perm], p, tol=1e-9)
    probe = rng.normal(size=(200, 2))
    np.testing.assert_array_equal(a.predict(probe), b.predict(probe))
    assert a.objective == pytest.approx(b.objective, abs=1e-8)


def _blobs(rng, per=15, sigma=0.5):
    centers = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
    x = np.vstack([c + sigma * rng.normal(size=(per, 2)) for c in centers])
    y = np.repeat([0, 10, 20], per)
    return centers, x, y


def test_blobs_multiclass():
    rng = np.random.default_rng(11)
    centers, x, y = _blobs(rng)
    model = train_multiclass(x, y, KernelParams(1.0, 100.0))
    assert len(model.machines) == 3
    np.testing.assert_array_equal(model.predict(x), y)
    # held-out points within one sigma: nearest-centroid oracle
    probe = np.vstack([c + 0.5 * rng.uniform(-0.7, 0.7, size=(10, 2)) for c in centers])
    nearest = np.array([0, 10, 20])[np.argmin(
        ((probe[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)]
    np.testing.assert_array_equal(model.predict(probe), nearest)
    for m in model.machines:
        ys = np.where(y[m.support] == m.positive, 1.0, -1.0)
        assert abs(m.dual_coef.sum()) <= 1e-8
        assert np.all(m.dual_coef * ys >= 0)


def test_two_class_multiclass_equals_binary():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(40, 2))
    y = (x[:, 0] > 0).astype(int) * 3
    p = KernelParams(1.0, 2.0)
    w = balanced_weights(y)
    probe = rng.normal(size=(100, 2))
    np.testing.assert_array_equal(
        train_multiclass(x, y, p).predict(probe), train_binary(x, y, p, weights=w).predict(probe)
    )


def test_all_distinct_labels():
    x = np.arange(5, dtype=float)[:, None]
    model = train_multiclass(x, [4, 3, 2, 1, 0], KernelParams(1.0, 10.0))
    assert set(model.predict(np.linspace(-1, 5, 13)[:, None])) <= {0, 1, 2, 3, 4}


def test_support_vector_predicts_own_label():
    x = np.array([[0.0], [1.0], [3.0], [4.0]])
    y = np.array([0, 0, 1, 1])
    m = train_binary(x, y, KernelParams(0.5, 1e6))
    for i in m.support:
        assert m.predict(x[i:i + 1])[0] == y[i]


def test_predict_dimension_mismatch():
    model = train_multiclass([[0.0, 0.0], [1.0, 1.0]], [0, 1], KernelParams(1.0, 1.0))
    with pytest.raises(SvmError, match="dimension"):
        predict(model, [1.0, 2.0, 3.0])


def test_predict_gram_matches_predict():
    rng = np.random.default_rng(9)
    _, x, y = _blobs(rng, per=8, sigma=2.0)
    model = train_multiclass(x, y, KernelParams(0.3, 3.0))
    probe = rng.normal(size=(50, 2)) * 4
    np.testing.assert_array_equal(model.predict_gram(kernel_matrix(probe, x, 0.3)),
                                  model.predict(probe))


def test_serialization_roundtrip():
    rng = np.random.default_rng(4)
    _, x, y = _blobs(rng, per=6, sigma=1.5)
    model = train_multiclass(x, y, KernelParams(0.5, 8.0))
    model.norm = NormStats.fit(x, ["a", "b"])
    model.feature_names = ["a", "b"]
    blob = json.loads(json.dumps(model.to_dict()))
    assert blob["format"] == "co2occ-svm" and blob["version"] == 1
    back = SvmModel.from_dict(blob)
    probe = rng.normal(size=(60, 2)) * 4
    np.testing.assert_array_equal(back.predict(probe), model.predict(probe))
    assert back.feature_names == ["a", "b"]
    np.testing.assert_array_equal(back.norm.max, model.norm.max)
    with pytest.raises(SvmError):
        SvmModel.from_dict({"format": "other"})
