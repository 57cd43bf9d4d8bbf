"""Worked examples for the trainer, protocol and command-line modules."""

import csv
import json

import numpy as np
import pytest
from scipy import stats

from flag_agg import analysis, lwe, protocol
from flag_agg.analysis import ConvergenceInputs
from flag_agg.cli import main
from flag_agg.keys import direct_key_sum
from flag_agg.lwe import LweParams
from flag_agg.protocol import Bucketing, ClientState, FederatedRun, ProtocolConfig, ServerState
from flag_agg.quantizer import ZeroDither
from flag_agg.trainer import (
    DatasetPartition, Model, NoisyQuadratic, PartitionObjective, SgdConfig, SyntheticSpec, global_gradient,
    load_csv, local_gradient, make_synthetic, momentum_step, write_csv,
)
from flag_agg.wire import BroadcastMessage, packed_size

SMALL = LweParams(32, 64, 65536, 6)


# --- trainer ----------------------------------------------------------------

def test_linear_single_sample_closed_form():
    x, y = np.array([1.0, -2.0, 0.5]), np.array([0.7])
    theta = np.array([0.3, 0.1, -1.0])
    part = DatasetPartition(x[None, :], y)
    for wd in (0.0, 0.1):
        g = local_gradient(Model("linear", 3), theta, part, [0], SgdConfig(weight_decay=wd))
        assert np.allclose(g, (theta @ x - y[0]) * x + wd * theta)


def test_zero_gradient_at_least_squares_optimum():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(40, 4)), rng.normal(size=40)
    theta = np.linalg.lstsq(X, y, rcond=None)[0]
    g = local_gradient(Model("linear", 4), theta, DatasetPartition(X, y), np.arange(40),
                       SgdConfig(weight_decay=0.0))
    assert np.abs(g).max() < 1e-10


def test_momentum_examples():
    g = np.array([1.0, -2.0])
    v, d = momentum_step(np.zeros(2), g, SgdConfig(momentum=0.0))
    assert np.array_equal(d, g)
    cfg = SgdConfig(momentum=0.9)
    v = np.zeros(2)
    for _ in range(400):
        v, d = momentum_step(v, g, cfg)
    assert np.allclose(d, g / 0.1, rtol=1e-12)
    half = SgdConfig(momentum=0.5)
    v, _ = momentum_step(np.zeros(2), np.array([1.0, 0.0]), half)
    v, d = momentum_step(v, np.array([0.0, 1.0]), half)
    assert np.array_equal(v, [0.5, 1.0]) and np.array_equal(d, v)


def test_separable_reaches_train_accuracy_in_500_rounds():
    spec = SyntheticSpec(n_clients=4, samples_per_client=100, n_features=5, margin=0.5, noise=0.0)
    parts = make_synthetic(spec, 1)
    assert sum(len(p.labels) for p in parts) == 400
    model = Model("logistic", spec.input_dim)
    cfg = SgdConfig(weight_decay=0.0)
    objs = [PartitionObjective(model, p, cfg) for p in parts]
    theta = np.zeros(model.dim)
    for _ in range(500):
        theta -= 1.0 * global_gradient(objs, theta)
    X = np.vstack([p.features for p in parts])
    y = np.concatenate([p.labels for p in parts])
    assert model.accuracy(theta, X, y) >= 0.99


def test_large_csv_roundtrip(tmp_path):
    part = make_synthetic(SyntheticSpec(n_clients=1, samples_per_client=10_000), 3)[0]
    write_csv(tmp_path / "big.csv", part)
    back = load_csv(tmp_path / "big.csv", {"label": "label"})
    assert np.array_equal(back.features, part.features) and np.array_equal(back.labels, part.labels)


def test_gradient_descent_on_quadratic_within_bound():
    # F = 1/2 ||theta||^2, N=4, B=8, T=2000, eta=0.1, momentum off.
    # C leaves room for N unclipped gradients so no level sum wraps.
    d, N, B, sigma, T, eta, C, b = 10, 4, 8, 1.0, 2000, 0.1, 10.0, 6
    objs = [NoisyQuadratic(np.ones(d), sigma, B) for _ in range(N)]
    theta0 = np.ones(d)
    cfg = ProtocolConfig(SMALL, eta=eta, clip_rule="fixed", C0=C)
    run = FederatedRun(cfg, objs, SgdConfig(eta=eta, momentum=0.0, weight_decay=0.0, batch_size=B), theta0)
    hist = run.run(T)
    measured = np.mean([m.grad_norm_sq for m in hist])
    gap = objs[0].loss(theta0)
    bound = analysis.convergence_bound(ConvergenceInputs(gap, T, eta, sigma, B, N, d, C, b, 1.0))
    assert sum(m.overflow_count for m in hist) == 0
    assert measured <= bound.total


# --- protocol ---------------------------------------------------------------

def test_bucketize_examples():
    assert protocol.bucketize(np.array([1, 2, 3, 4, 5]), 3).tolist() == [[1, 2, 3], [4, 5, 0]]
    one = protocol.bucketize(np.arange(4), 4)
    assert one.shape == (1, 4) and Bucketing(4, 4).pad == 0


def _client(d, obj=None, N=1):
    obj = obj or NoisyQuadratic(np.ones(d), 0.0, 1, optimum=np.zeros(d))
    return ClientState(0, np.zeros(d), obj, SgdConfig(momentum=0.0, weight_decay=0.0), 0, 0)


def test_zero_gradient_zero_dither_upload_is_a_times_s():
    d = 100
    client = _client(d)
    client.dither = ZeroDither()
    client.secret = lwe.sample_secret(client.key_rng, SMALL)
    client.compute_direction()
    nb = Bucketing(d, SMALL.m).num_buckets
    mats = protocol.expand_matrices(lwe.Seed.from_int(0), SMALL, nb)
    msg = protocol.client_upload(client, mats, SMALL, 0, 7)
    cts = msg.ciphertexts(SMALL.m, SMALL.residue_bits)
    for j in range(nb):
        assert np.array_equal(cts[j], lwe.matvec_mod(mats[j], client.secret, SMALL.q))
    assert len(msg.encode()) == 29 + packed_size(nb * SMALL.m, SMALL.residue_bits)


def test_single_client_roundtrip_and_n1_broadcast():
    d = 70
    rng = np.random.default_rng(3)
    # Gradients stay inside (-C, C) so no level reaches -2^(b-1); see the alias test.
    obj = NoisyQuadratic(np.ones(d), 0.0, 1, optimum=rng.normal(size=d) * 0.1)
    client = _client(d, obj)
    client.secret = lwe.sample_secret(client.key_rng, SMALL)
    client.compute_direction()
    nb = Bucketing(d, SMALL.m).num_buckets
    mats = protocol.expand_matrices(lwe.Seed.from_int(0), SMALL, nb)
    msg = protocol.client_upload(client, mats, SMALL, 0, 7)
    own = lwe.decrypt_buckets(SMALL, mats, client.secret, msg.ciphertexts(SMALL.m, SMALL.residue_bits))
    assert np.array_equal(own * SMALL.gamma_step, client.contribution)
    server = ServerState(round=0, seed_id=7)
    out = protocol.server_aggregate(server, [msg], SMALL, 1)
    assert out.payload == msg.payload
    assert protocol.measure_overflow(own, client.contribution // SMALL.gamma_step) == 0


def test_single_client_bottom_level_aliases_to_top():
    # Centered decoding maps q/2 to +q/2, so a lone level -2^(b-1) comes back as +2^(b-1).
    rng = np.random.default_rng(0)
    A = lwe.expand_public_matrix(lwe.Seed.from_int(0), SMALL)
    s = lwe.sample_secret(rng, SMALL)
    k = np.full(SMALL.m, -SMALL.max_level)
    got = lwe.decrypt(SMALL, A, s, lwe.encrypt(SMALL, A, s, k))
    assert protocol.measure_overflow(got, k) == SMALL.m
    assert np.all(got == SMALL.max_level)


def test_zero_broadcast_leaves_model_unchanged():
    d = 10
    client = _client(d)
    client.theta = np.arange(d, dtype=np.float64)
    mats = protocol.expand_matrices(lwe.Seed.from_int(0), SMALL, 1)
    s = lwe.sample_secret(np.random.default_rng(0), SMALL)
    ct = lwe.encrypt(SMALL, mats[0], s, np.zeros(SMALL.m, dtype=np.int64))
    from flag_agg.wire import pack_residues
    bc = BroadcastMessage(0, 1, SMALL.b, 1.0, 0, pack_residues(ct[None, :], SMALL.residue_bits))
    before = client.theta.copy()
    protocol.client_apply_update(client, bc, s, mats, SMALL, 0.1, 2)
    assert np.array_equal(client.theta, before)


def test_decrypted_broadcast_is_level_sum():
    N, d = 5, 150
    rng = np.random.default_rng(11)
    nb = Bucketing(d, SMALL.m).num_buckets
    mats = protocol.expand_matrices(lwe.Seed.from_int(1), SMALL, nb)
    clients = []
    for i in range(N):
        obj = NoisyQuadratic(np.ones(d), 0.0, 1, optimum=rng.normal(size=d) * 0.05)
        c = ClientState(i, np.zeros(d), obj, SgdConfig(momentum=0.0, weight_decay=0.0), 2, 3)
        c.secret = lwe.sample_secret(c.key_rng, SMALL)
        c.compute_direction()
        clients.append(c)
    msgs = [protocol.client_upload(c, mats, SMALL, 0, 9) for c in clients]
    bc = protocol.server_aggregate(ServerState(round=0, seed_id=9), msgs[::-1], SMALL, N)
    s_sum = direct_key_sum([c.secret for c in clients], SMALL.q)
    levels, _ = protocol.decrypt_aggregate(SMALL, mats, s_sum, bc, d)
    truth = protocol.debucketize(sum(c.contribution for c in clients) // SMALL.gamma_step, d)
    assert np.array_equal(levels, truth)


def test_baseline_zero_sigma_and_error_std():
    rng = np.random.default_rng(0)
    A = lwe.expand_public_matrix(lwe.Seed.from_int(0), SMALL)
    s = lwe.sample_secret(rng, SMALL)
    k = rng.integers(-5, 6, size=SMALL.m)
    assert np.array_equal(protocol.baseline_lwe_encrypt(SMALL, A, s, k, 0.0, rng), lwe.encrypt(SMALL, A, s, k))
    sigma_e = protocol.baseline_sigma(SMALL, "printed")
    err = protocol.rounded_gaussian(np.random.default_rng(1), sigma_e, 100_000)
    assert err.std() == pytest.approx(sigma_e, rel=0.02)


def test_linear_round_bytes_n2():
    spec = SyntheticSpec(task="regression", n_clients=2, samples_per_client=30, n_features=5)
    model = Model("linear", spec.input_dim)
    sgd = SgdConfig(eta=0.05, momentum=0.0, batch_size=4)
    objs = [PartitionObjective(model, p, sgd) for p in make_synthetic(spec, 0)]
    run = FederatedRun(ProtocolConfig(SMALL, eta=0.05), objs, sgd, np.zeros(model.dim))
    m = run.run_round()
    bits = 1 * SMALL.m * 16
    assert m.upload_payload_bits == bits == analysis.ct_bits(Bucketing(model.dim, SMALL.m).padded, SMALL.q)
    assert m.upload_bytes == 29 + bits // 8


def test_overflow_bound_rule_has_no_overflow_over_200_rounds():
    spec = SyntheticSpec(n_clients=4, samples_per_client=60, n_features=8)
    model = Model("logistic", spec.input_dim)
    sgd = SgdConfig(eta=0.1, momentum=0.9, weight_decay=1e-4, batch_size=8)
    objs = [PartitionObjective(model, p, sgd) for p in make_synthetic(spec, 0)]
    # Round 0 has no aggregate to estimate from, so it runs at a generous C0.
    cfg = ProtocolConfig(SMALL, eta=0.1, clip_rule="overflow_bound", C0=10.0, rng_seed=0, dither_seed=1)
    hist = FederatedRun(cfg, objs, sgd, np.zeros(model.dim)).run(200)
    assert sum(m.overflow_count for m in hist) == 0


# --- cli --------------------------------------------------------------------

def _write(tmp_path, name, cfg):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_cli_flag_and_plain_differ_only_in_bytes(tmp_path):
    base = {"n": 16, "m": 32, "q": 65536, "b": 6, "N": 3, "T": 10, "eta": 0.1,
            "dataset": {"source": "synthetic", "samples_per_client": 40, "n_features": 6},
            "seeds": {"matrix": 1, "rng": 2, "dither": 3}}
    for mode in ("flag", "quantized_plain"):
        path = _write(tmp_path, f"{mode}.json", {**base, "mode": mode, "output_dir": mode})
        assert main(["train", str(path), "--quiet"]) == 0
    a, b = _rows(tmp_path / "flag" / "metrics.csv"), _rows(tmp_path / "quantized_plain" / "metrics.csv")
    for ra, rb in zip(a, b):
        for col in ("round", "loss", "grad_norm_sq", "overflow_count", "C_t"):
            assert ra[col] == rb[col]
        assert ra["upload_bytes"] != rb["upload_bytes"]


def sweep_config(seed, b, out):
    return {"mode": "flag", "n": 64, "m": 128, "q": 65536, "b": b, "N": 4, "T": 300, "eta": 0.5,
            "momentum": 0.0, "weight_decay": 0.0, "batch_size": 16,
            "dataset": {"source": "synthetic", "samples_per_client": 250, "n_features": 50,
                        "noise": 1.0, "label_noise": 0.05},
            "seeds": {"matrix": seed, "rng": seed, "dither": 100 + seed, "model": seed, "data": seed},
            "output_dir": out}


def test_cli_b_sweep_final_loss_majority(tmp_path):
    monotone = 0
    for seed in range(5):
        losses = []
        for b in (4, 6, 8):
            out = f"s{seed}b{b}"
            path = _write(tmp_path, out + ".json", sweep_config(seed, b, out))
            assert main(["train", str(path), "--quiet"]) == 0
            losses.append(json.loads((tmp_path / out / "summary.json").read_text())["final_loss"])
        monotone += losses[0] >= losses[1] >= losses[2]
    assert monotone >= 3


def test_cli_analyze_examples(capsys):
    assert main(["analyze", "overflow", "--N", "100", "--sigma", "0.01", "--delta", "1e-6"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["formula_value"] <= 1e-6 * (1 + 1e-9) and out["C"] > 0
    assert main(["analyze", "comm", "--b", "8", "--q", "65536", "--m", "768"]) == 0
    assert json.loads(capsys.readouterr().out)["tau_measured"] == 2.0


def test_keydemo_small_modulus_is_hand_checkable(capsys):
    args = ["keydemo", "--N", "2", "--n", "4", "--q", "17", "--seed", "1"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first
    shares = {}
    for line in first.splitlines():
        if line.startswith("share "):
            label, vals = line[6:].split(": ")
            shares[label] = np.array(vals.split(), dtype=int)
        if line.startswith("s_sum: "):
            s_sum = np.array(line[7:].split(), dtype=int)
    # Each client's two shares reconstruct its key; all four add to s_sum mod 17.
    assert len(shares) == 4 and all(v.max() < 17 for v in shares.values())
    assert np.array_equal(sum(shares.values()) % 17, s_sum)
