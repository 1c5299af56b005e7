import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selective_fusion.errors import InvalidInputError, InvalidModelError, SingularSystemError
from selective_fusion.estimation import (
    MeasurementModel,
    batch_fuse,
    compare_subsets,
    load_wls_config,
    ls_estimate,
    misspecification_trial,
    run_wls_demo,
    sample_measurements,
    stack_models,
    wls_estimate,
    write_subset_csv,
)


def random_spd(rng, n):
    A = rng.normal(size=(n, n))
    return A @ A.T + n * np.eye(n)


def random_instance(rng):
    n_y = int(rng.integers(1, 5))
    n_s = int(rng.integers(1, 6))
    models, xs = [], []
    for _ in range(n_s):
        n_x = int(rng.integers(n_y, n_y + 3))
        models.append(MeasurementModel(rng.normal(size=(n_x, n_y)), random_spd(rng, n_x)))
        xs.append(rng.normal(size=n_x))
    return models, xs


def stacked_reference(models, xs):
    """Single block model solved with explicit inverses (deliberately naive)."""
    H = np.vstack([m.H for m in models])
    n = H.shape[0]
    W = np.zeros((n, n))
    r = 0
    for m in models:
        k = m.n_x
        W[r:r + k, r:r + k] = np.linalg.inv(m.R)
        r += k
    x = np.concatenate(xs)
    return np.linalg.inv(H.T @ W @ H) @ (H.T @ W @ x)


def test_ls_examples():
    assert ls_estimate(np.eye(3), [1, 2, 3]) == pytest.approx([1, 2, 3])
    assert ls_estimate([[1], [1]], [2, 4]) == pytest.approx([3.0])
    assert ls_estimate([[1], [1], [1]], [1, 1, 1]) == pytest.approx([1.0])


def test_wls_examples():
    m = MeasurementModel([[1.0], [1.0]], np.diag([1.0, 4.0]))
    assert abs(wls_estimate(m, [0.0, 5.0])[0] - 1.0) < 1e-9
    far = MeasurementModel([[1.0], [1.0]], np.diag([1.0, 1e6]))
    assert abs(wls_estimate(far, [0.0, 5.0])[0]) < 1e-4


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_wls_with_identity_r_equals_ls(seed):
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(5, 2))
    x = rng.normal(size=5)
    assert np.allclose(wls_estimate(MeasurementModel(H, np.eye(5)), x), ls_estimate(H, x), atol=1e-10)


def test_batch_fuse_matches_block_stacking():
    rng = np.random.default_rng(1)
    for _ in range(100):
        models, xs = random_instance(rng)
        fused = batch_fuse(models, xs).y_hat
        assert np.allclose(fused, stacked_reference(models, xs), atol=1e-8, rtol=0)
        assert np.allclose(fused, wls_estimate(stack_models(models), np.concatenate(xs)), atol=1e-8)


def test_batch_fuse_two_equal_scalars():
    m = MeasurementModel([[1.0]], [[1.0]])
    est = batch_fuse([m, m], [[2.0], [6.0]])
    assert est.y_hat == pytest.approx([4.0])
    assert est.covariance[0, 0] == pytest.approx(0.5)


def test_batch_fuse_single_model_is_wls():
    rng = np.random.default_rng(4)
    m = MeasurementModel(rng.normal(size=(4, 2)), random_spd(rng, 4))
    x = rng.normal(size=4)
    assert np.allclose(batch_fuse([m], [x]).y_hat, wls_estimate(m, x))


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_fused_covariance_is_symmetric_and_no_larger(seed):
    rng = np.random.default_rng(seed)
    models, xs = random_instance(rng)
    full = batch_fuse(models, xs).covariance
    assert np.array_equal(full, full.T)
    if len(models) > 1:
        sub = batch_fuse(models[:-1], xs[:-1]).covariance
        # Adding an honest sensor can only shrink the covariance.
        assert np.linalg.eigvalsh(sub - full).min() > -1e-9


def test_model_validation():
    with pytest.raises(InvalidModelError):
        MeasurementModel([[1.0], [1.0]], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(InvalidModelError):
        MeasurementModel([[1.0]], [[0.0]])
    with pytest.raises(InvalidInputError):
        MeasurementModel([[1.0], [1.0]], [[1.0]])


def test_singular_and_shape_errors():
    with pytest.raises(SingularSystemError):
        ls_estimate([[1.0, 1.0], [2.0, 2.0]], [1.0, 2.0])
    m = MeasurementModel([[1.0, 0.0]], [[1.0]])
    with pytest.raises(SingularSystemError):
        batch_fuse([m], [[1.0]])
    with pytest.raises(InvalidInputError):
        wls_estimate(MeasurementModel([[1.0]], [[1.0]]), [1.0, 2.0])
    with pytest.raises(InvalidInputError):
        batch_fuse([], [])


def test_monte_carlo_matches_analytic_covariance():
    rng = np.random.default_rng(7)
    models = [MeasurementModel(rng.normal(size=(2, 2)), random_spd(rng, 2)) for _ in range(3)]
    true_y = np.array([1.0, -2.0])
    res = compare_subsets(true_y, models, [m.R for m in models], {"all": [0, 1, 2]}, 100_000, seed=3)[0]
    analytic = np.trace(batch_fuse(models, [np.zeros(2)] * 3).covariance)
    assert res.analytic_mse == pytest.approx(analytic)
    assert res.mean_squared_error == pytest.approx(analytic, rel=0.1)


def test_larger_honest_subsets_do_better():
    m = MeasurementModel([[1.0]], [[1.0]])
    subsets = {"1": [0], "2": [0, 1], "3": [0, 1, 2]}
    res = compare_subsets([0.0], [m] * 3, [[[1.0]]] * 3, subsets, 10_000, seed=0)
    mse = [r.mean_squared_error for r in res]
    assert mse[0] > mse[1] > mse[2]


def test_misspecified_sensor_hurts():
    m = MeasurementModel([[1.0]], [[1.0]])
    covs = [[[1.0]], [[1.0]], [[100.0]]]
    res = {r.subset_id: r for r in compare_subsets([0.0], [m] * 3, covs, {"all": [0, 1, 2], "good": [0, 1]}, 10_000, 0)}
    assert res["all"].mean_squared_error > 1.2 * res["good"].mean_squared_error


def test_compare_subsets_matches_trial_loop():
    rng_models = np.random.default_rng(2)
    models = [MeasurementModel(rng_models.normal(size=(2, 1)), random_spd(rng_models, 2)) for _ in range(3)]
    covs = [2 * m.R for m in models]
    trials = 200
    fast = compare_subsets([0.5], models, covs, {"s": [0, 2]}, trials, seed=11)[0]
    rng = np.random.default_rng(11)
    slow = [misspecification_trial([0.5], models, covs, [0, 2], rng) for _ in range(trials)]
    assert fast.mean_squared_error == pytest.approx(np.mean(slow), rel=1e-9)


def test_sample_measurements_shapes():
    models = [MeasurementModel(np.ones((3, 2)), np.eye(3)), MeasurementModel(np.ones((1, 2)), np.eye(1))]
    xs = sample_measurements([0.0, 0.0], models, [np.eye(3), np.eye(1)], np.random.default_rng(0))
    assert [x.shape for x in xs] == [(3,), (1,)]


def test_wls_config_roundtrip(tmp_path):
    cfg = {
        "sensors": [
            {"name": "a", "H": [[1.0]], "R": [[1.0]]},
            {"name": "b", "H": [[1.0]], "R": [[1.0]], "true_cov": [[100.0]]},
        ],
        "subsets": [[0], [0, 1]],
        "true_y": [0.0],
        "trials": 500,
        "seed": 5,
    }
    p = tmp_path / "wls.json"
    p.write_text(json.dumps(cfg))
    loaded = load_wls_config(p)
    assert list(loaded["subsets"]) == ["a", "a+b"]
    res = run_wls_demo(loaded)
    out = tmp_path / "out.csv"
    write_subset_csv(res, out)
    first = out.read_bytes()
    write_subset_csv(run_wls_demo(load_wls_config(p)), out)
    assert out.read_bytes() == first
    assert first.decode().splitlines()[0] == "subset_id,sensors,mean_squared_error,std_error,declared_trace"


def test_wls_config_requires_seed():
    from selective_fusion.estimation import wls_config_from_dict

    with pytest.raises(InvalidInputError):
        wls_config_from_dict({"sensors": [{"H": [[1.0]], "R": [[1.0]]}]})
