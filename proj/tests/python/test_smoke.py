import numpy as np
import pytest

import mtfuse


def softplus(x):
    return np.log1p(np.exp(x))


def reference_scan(x, A, B, C, D):
    # x [T x G x L], parameter row t*G + j
    T, G, L = x.shape
    n = A.shape[1]
    y = np.zeros_like(x)
    for j in range(G):
        h = np.zeros((n, L))
        for t in range(T):
            r = t * G + j
            h = np.exp(-softplus(A[r]))[:, None] * h + B[r][:, None] * x[t, j][None, :]
            y[t, j] = C[r] @ h + D[r] * x[t, j]
    return y


def random_ssm(rng, rows, n):
    return [rng.normal(size=(rows, n)), rng.normal(size=(rows, n)), rng.normal(size=(rows, n)), rng.normal(size=rows)]


def test_param_counts():
    full = mtfuse.count_params()
    assert full["total"] == 918660
    assert sum(n for _, n in full["breakdown"]) == full["total"]
    assert mtfuse.count_params(overrides="no_mgmi=true")["total"] < full["total"]
    assert mtfuse.count_params("toy")["total"] == 26820


def test_config_errors_raise():
    with pytest.raises(mtfuse.Error, match="C % T"):
        mtfuse.config_text(overrides="channels=100")
    with pytest.raises(ValueError):
        mtfuse.config_text(overrides="bogus=1")
    text = mtfuse.config_text("toy")
    assert "channels=16" in text
    assert mtfuse.config_hash("toy") != mtfuse.config_hash()


def test_mean_accuracy_row():
    n = 10000
    preds = [[1] * h + [0] * (n - h) for h in (7500, 6931, 9629, 8611)]
    labels = [[1] * n] * 4
    assert mtfuse.mean_accuracy(preds, labels) * 100 == pytest.approx(81.68, abs=0.005)


def test_scan_matches_numpy():
    rng = np.random.default_rng(0)
    T, G, L, n = 3, 2, 5, 2
    A, B, C, D = random_ssm(rng, T * G, n)
    x = rng.normal(size=(T, G, L))
    y = mtfuse.scan(x, A, B, C, D)
    assert np.abs(y - reference_scan(x, A, B, C, D)).max() < 1e-12
    back = mtfuse.scan(x, A, B, C, D, backward=True)
    flipped = mtfuse.scan(x[::-1].copy(), A, B, C, D)[::-1]
    assert np.array_equal(back, flipped)


def test_gate_bounds_and_formula():
    rng = np.random.default_rng(1)
    A, B, C, D = random_ssm(rng, 6, 3)
    g = mtfuse.compute_gate(A, B, C, D)
    ds, dd = np.ones(3) / np.sqrt(3), np.ones(6) / np.sqrt(6)
    ref = 1 / (1 + np.exp(-(A @ ds + B @ (C.T @ dd) + D)))
    assert np.allclose(g, ref, atol=1e-14)
    assert ((g > 0) & (g < 1)).all()
    with pytest.raises(mtfuse.Error):
        mtfuse.compute_gate(A, B[:, :2], C, D)


def test_gradcheck_ssm():
    reports = mtfuse.gradcheck("ssm", seed=1)
    assert reports and all(r["passed"] for r in reports)
    with pytest.raises(mtfuse.Error):
        mtfuse.gradcheck("nonsense")


def test_synthetic_shapes():
    samples = mtfuse.generate_synthetic(8, seed=2)
    assert len(samples) == 8
    s = samples[0]
    assert s["exterior"][0].shape == (4, 3, 10, 10)
    assert s["joints"].shape == (4, 8, 3)
    assert len(s["labels"]) == 4


def test_short_training_lowers_loss():
    r = mtfuse.train_toy(steps=30, seed=3, train_samples=48, val_samples=32)
    first, last = r["trajectory"][0], r["trajectory"][-1]
    assert last["total_loss"] < first["total_loss"]
    assert len(r["step_losses"]) == 30
    assert set(last["accuracy"]) == {"der", "dbr", "tcr", "vbr"}


def test_bench_record():
    r = mtfuse.bench(duration=0.2)
    assert r["fps"] > 0
    assert r["latency_p50_ms"] <= r["latency_p95_ms"]
