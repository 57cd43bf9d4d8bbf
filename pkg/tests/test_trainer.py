import os

import numpy as np
import pytest

from flag_agg.trainer import (
    DatasetError, DatasetPartition, Model, NoisyQuadratic, PartitionObjective, SgdConfig, SyntheticSpec,
    global_gradient, load_csv, local_gradient, make_synthetic, momentum_step, synthetic_test_set, write_csv,
)

DATA = os.path.join(os.path.dirname(__file__), "data")


def fd_gradient(f, theta, eps=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        g[i] = (f(theta + e) - f(theta - e)) / (2 * eps)
    return g


@pytest.mark.parametrize("model, y_kind", [
    (Model("linear", 5), "float"),
    (Model("logistic", 5), "binary"),
    (Model("mlp", 5, (4, 3), 3), "class"),
])
def test_gradient_matches_finite_differences(model, y_kind):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(7, 5))
    y = {"float": rng.normal(size=7), "binary": rng.integers(0, 2, 7), "class": rng.integers(0, 3, 7)}[y_kind]
    theta = rng.normal(size=model.dim) * 0.5
    wd = 0.01
    num = fd_gradient(lambda t: model.loss(t, X, y, wd), theta)
    assert np.allclose(model.gradient(theta, X, y, wd), num, atol=1e-6)


def test_model_validation_and_dims():
    with pytest.raises(ValueError):
        Model("cnn", 3)
    with pytest.raises(ValueError):
        Model("logistic", 3, (4,))
    assert Model("mlp", 3, (4,), 2).dim == 3 * 4 + 4 + 4 * 2 + 2
    with pytest.raises(ValueError):
        Model("linear", 3).accuracy(np.zeros(3), np.zeros((1, 3)), [0.0])


def test_sgd_config_validation():
    for bad in (dict(eta=0), dict(momentum=1.0), dict(weight_decay=-1), dict(batch_size=0)):
        with pytest.raises(ValueError):
            SgdConfig(**bad)


def test_momentum_step():
    cfg = SgdConfig(momentum=0.5)
    v, d = momentum_step(np.array([2.0]), np.array([1.0]), cfg)
    assert v[0] == 2.0 and d[0] == 2.0


def test_local_gradient_checks_batch():
    part = DatasetPartition(np.ones((3, 2)), np.array([0, 1, 0]))
    m = Model("logistic", 2)
    with pytest.raises(IndexError):
        local_gradient(m, np.zeros(2), part, [3], SgdConfig())
    with pytest.raises(ValueError):
        local_gradient(m, np.zeros(2), part, [], SgdConfig())


def test_noisy_quadratic_moments():
    h = np.linspace(0.1, 1.0, 20)
    obj = NoisyQuadratic(h, sigma=2.0, batch_size=8)
    theta = np.ones(20)
    rng = np.random.default_rng(1)
    draws = np.stack([obj.stochastic_gradient(theta, rng) for _ in range(20_000)])
    assert np.allclose(draws.mean(axis=0), h, atol=0.02)
    total_var = ((draws - h) ** 2).sum(axis=1).mean()
    assert total_var == pytest.approx(4.0 / 8, rel=0.03)
    assert obj.smoothness == 1.0
    assert obj.loss(obj.optimum) == 0.0


def test_synthetic_is_deterministic_and_disjoint():
    spec = SyntheticSpec(n_clients=3, samples_per_client=50)
    a, b = make_synthetic(spec, 7), make_synthetic(spec, 7)
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.features, pb.features)
    idx = np.concatenate([p.indices for p in a])
    assert len(np.unique(idx)) == 150
    assert a[0].features.shape[1] == spec.input_dim
    assert not np.array_equal(make_synthetic(spec, 8)[0].features, a[0].features)


def test_synthetic_label_skew():
    parts = make_synthetic(SyntheticSpec(n_clients=2, samples_per_client=200, split="label_skew"), 0)
    assert parts[0].labels.mean() < parts[1].labels.mean()


def test_synthetic_spec_validation():
    with pytest.raises(DatasetError):
        SyntheticSpec.from_dict({"task": "ranking"})
    with pytest.raises(DatasetError):
        SyntheticSpec.from_dict({"colour": "red"})


def test_separable_task_is_learned():
    spec = SyntheticSpec(n_clients=2, samples_per_client=300, n_features=5, margin=0.5, noise=0.0)
    parts = make_synthetic(spec, 3)
    test = synthetic_test_set(spec, 3)
    model = Model("logistic", spec.input_dim)
    cfg = SgdConfig(weight_decay=0.0)
    objs = [PartitionObjective(model, p, cfg) for p in parts]
    theta = np.zeros(model.dim)
    for _ in range(2000):
        theta -= 1.0 * global_gradient(objs, theta)
    assert model.accuracy(theta, test.features, test.labels) >= 0.99


def test_load_shipped_fixture():
    part = load_csv(os.path.join(DATA, "small.csv"), {"label": "label"})
    assert part.features.shape == (6, 2)
    assert part.labels.dtype == np.int64
    assert list(part.labels) == [1, 0, 1, 0, 1, 0]
    only = load_csv(os.path.join(DATA, "small.csv"), {"label": "label", "features": ["x1"]})
    assert np.array_equal(only.features[:, 0], [1.0, 2.0, -1.0, 0.0, 0.5, -1.5])


def test_csv_roundtrip(tmp_path):
    parts = make_synthetic(SyntheticSpec(n_clients=1, samples_per_client=20), 0)
    path = tmp_path / "d.csv"
    write_csv(path, parts[0])
    back = load_csv(path, {"label": "label"})
    assert np.array_equal(back.features, parts[0].features)
    assert np.array_equal(back.labels, parts[0].labels)


@pytest.mark.parametrize("text, schema, needle", [
    ("", {"label": "y"}, "empty"),
    ("a,y\n", {"label": "y"}, "no data rows"),
    ("a,y\n1,0\n2\n", {"label": "y"}, "row 3"),
    ("a,y\n1,0\nfoo,1\n", {"label": "y"}, "[3]"),
    ("a,b\n1,0\n", {"label": "y"}, "not in header"),
    ("a,y\n1,0.5\n", {"label": "y"}, "integral"),
    ("a,y\n1,0\n", {"label": "y", "features": ["z"]}, "not in header"),
    ("a,y\n1,0\n", {}, "label"),
])
def test_csv_errors(tmp_path, text, schema, needle):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(DatasetError, match=needle.replace("[", r"\[").replace("]", r"\]")):
        load_csv(path, schema)


def test_csv_missing_file(tmp_path):
    with pytest.raises(DatasetError):
        load_csv(tmp_path / "nope.csv", {"label": "y"})
