import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfgflow.core import TimeGrid
from mfgflow.models import CyberModel, QuadraticModel
from mfgflow.nn import MlpParams, loss_and_grad, loss_value, mlp_forward
from mfgflow.pipeline import (
    Dataset,
    DatasetError,
    GenerationError,
    NetworkPredictor,
    SolverOracle,
    TrainConfig,
    dataset_header,
    encode_inputs,
    evaluate_flow_map,
    evaluate_reconstruction,
    generate_dataset,
    network_meta,
    read_dataset,
    sample_kappa,
    sample_pairs,
    sample_simplex,
    split_indices,
    train_flow_map,
    width_sweep,
    write_dataset,
)
from mfgflow.solver import PicardConfig, picard_solve

QUAD = QuadraticModel(3)
GRID = TimeGrid(1.0, 20)


@pytest.fixture(scope="module")
def small_ds():
    ds, report = generate_dataset(QUAD, GRID, 120, "pointwise", seed=5)
    return ds, report


# --- sampling ----------------------------------------------------------------------

def test_simplex_degenerate_and_valid():
    rng = np.random.default_rng(0)
    assert sample_simplex(rng, 1).probs.tolist() == [1.0]
    with pytest.raises(ValueError):
        sample_simplex(rng, 0)


@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_simplex_draw_on_simplex(seed, d):
    p = sample_simplex(np.random.default_rng(seed), d).probs
    assert p.min() >= 0 and abs(p.sum() - 1) < 1e-12


@pytest.mark.parametrize("d", [2, 3, 5])
def test_simplex_mean_is_uniform(d):
    rng = np.random.default_rng(d)
    draws = np.stack([sample_simplex(rng, d).probs for _ in range(100_000)])
    # flat Dirichlet marginal variance (d - 1) / (d^2 (d + 1))
    se = np.sqrt((d - 1) / (d * d * (d + 1)) / draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - 1 / d) < 3 * se)


def test_kappa_boxes():
    rng = np.random.default_rng(0)
    assert sample_kappa(rng, [0.0, 0.0], [0.0, 0.0]).tolist() == [0.0, 0.0]
    k = sample_kappa(rng, *CyberModel().kappa_bounds)
    assert k.shape == (1,) and 0 <= k[0] <= 10
    q = sample_kappa(rng, *QuadraticModel(4).kappa_bounds)
    assert q.shape == (4,) and np.all((0 <= q) & (q <= 1))
    with pytest.raises(ValueError):
        sample_kappa(rng, [1.0], [0.0])


# --- generation ----------------------------------------------------------------------

def test_generate_smoke_two_records(tmp_path):
    ds, report = generate_dataset(QUAD, GRID, 2, seed=0)
    path = tmp_path / "d.jsonl"
    write_dataset(path, ds)
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    for line in lines[1:]:
        rec = json.loads(line)
        assert rec["mode"] == "pointwise" and 1 <= rec["j"] <= GRID.M
        assert rec["t"] == rec["j"] * GRID.T / GRID.M
        assert abs(sum(rec["eta"]) - 1) < 1e-12 and all(0 <= k <= 1 for k in rec["kappa"])
        assert np.all(np.isfinite(rec["y"])) and len(rec["y"]) == 3
    assert len(report) == 2


def test_labels_match_solver(small_ds):
    ds, report = small_ds
    for i in (0, 17, 119):
        sol = picard_solve(QUAD, ds.eta[i], ds.kappa[i], GRID).solution
        assert np.array_equal(ds.y[i], sol.u[ds.j[i]])
    assert all(r["residual"] < PicardConfig().tol and r["retries"] == 0 for r in report)


def test_generation_deterministic_and_order_independent(tmp_path):
    a, _ = generate_dataset(QUAD, GRID, 30, seed=9, threads=1)
    b, _ = generate_dataset(QUAD, GRID, 30, seed=9, threads=3, chunk_size=7)
    write_dataset(tmp_path / "a.jsonl", a)
    write_dataset(tmp_path / "b.jsonl", b)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    c, _ = generate_dataset(QUAD, GRID, 30, seed=10)
    assert not np.array_equal(a.eta, c.eta)


def test_generation_resamples_failed_solves():
    # at tol 1e-10 about half the draws need 9 sweeps; capping at 8 fails them and they are redrawn
    cfg = PicardConfig(tol=1e-10, max_iter=8)
    ds, report = generate_dataset(QUAD, GRID, 40, seed=1, solver_cfg=cfg)
    assert sum(r["retries"] for r in report) > 0
    assert all(r["iterations"] <= 8 and r["residual"] < 1e-10 for r in report)
    for i in range(40):
        sol = picard_solve(QUAD, ds.eta[i], ds.kappa[i], GRID).solution
        assert np.max(np.abs(ds.y[i] - sol.u[ds.j[i]])) < 1e-8


def test_generation_retry_budget():
    with pytest.raises(GenerationError):
        generate_dataset(QUAD, GRID, 3, seed=0, solver_cfg=PicardConfig(max_iter=1))


def test_augmented_mode(tmp_path):
    ds, _ = generate_dataset(QUAD, GRID, 3, "augmented", seed=2)
    assert ds.y.shape == (3, (GRID.M + 1) * 3) and ds.j is None
    sol = picard_solve(QUAD, ds.eta[1], ds.kappa[1], GRID).solution
    assert np.array_equal(ds.y[1].reshape(GRID.M + 1, 3), sol.u)
    write_dataset(tmp_path / "a.jsonl", ds)
    back = read_dataset(tmp_path / "a.jsonl")
    assert back.mode == "augmented" and np.array_equal(back.y, ds.y)
    rec = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[1])
    assert rec["j"] is None and rec["t"] is None


def test_dataset_round_trip_exact(small_ds, tmp_path):
    ds, _ = small_ds
    write_dataset(tmp_path / "d.jsonl", ds)
    back = read_dataset(tmp_path / "d.jsonl", expected_model=QUAD)
    assert back.header == ds.header
    for name in ("eta", "kappa", "y", "j"):
        assert np.array_equal(getattr(back, name), getattr(ds, name))


def test_dataset_rejects_mismatches(small_ds, tmp_path):
    ds, _ = small_ds
    path = tmp_path / "d.jsonl"
    write_dataset(path, ds)
    with pytest.raises(DatasetError):
        read_dataset(path, expected_model=QuadraticModel(3, b=2.0))
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["model"]["b"] = 5.0
    (tmp_path / "t.jsonl").write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    with pytest.raises(DatasetError):
        read_dataset(tmp_path / "t.jsonl")
    (tmp_path / "short.jsonl").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(DatasetError):
        read_dataset(tmp_path / "short.jsonl")
    (tmp_path / "empty.jsonl").write_text("")
    with pytest.raises(DatasetError):
        read_dataset(tmp_path / "empty.jsonl")


def test_generation_rejects_cfl_violation():
    from mfgflow.core import CFLError

    with pytest.raises(CFLError):
        generate_dataset(QuadraticModel(20), TimeGrid(1.0, 10), 2)


# --- training ----------------------------------------------------------------------------

def test_split_is_pure_function():
    a = split_indices(3, 100)
    b = split_indices(3, 100)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    train, test = a
    assert test.size == 20 and np.intersect1d(train, test).size == 0
    assert np.array_equal(np.union1d(train, test), np.arange(100))
    assert not np.array_equal(split_indices(4, 100)[1], test)


def test_train_config_invariants():
    for bad in ({"epochs": 0}, {"batch_size": 0}, {"test_fraction": 1.0}, {"test_fraction": 0.0}, {"patience": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_encode_inputs():
    meta = {"mode": "pointwise", "T": 2.0, "kappa_low": [0.0, 1.0], "kappa_high": [1.0, 3.0]}
    x = encode_inputs(meta, [[0.5, 0.5]], [[0.5, 2.0]], [1.0])
    assert x.tolist() == [[0.5, 0.5, 0.5, 0.5, 0.5]]
    meta["mode"] = "augmented"
    assert encode_inputs(meta, [[0.5, 0.5]], [[0.5, 2.0]]).tolist() == [[0.5, 0.5, 0.5, 0.5]]


def test_constant_labels_are_learned():
    # preset-sized dataset (n = 4000) with labels that need no solver
    rng = np.random.default_rng(0)
    n = 4000
    header = dataset_header(QUAD, GRID, 0, "pointwise", n)
    const = Dataset(header, rng.dirichlet(np.ones(3), n), rng.random((n, 3)), np.tile([0.7, -1.3, 2.1], (n, 1)),
                    rng.integers(1, GRID.M + 1, n))
    cfg = TrainConfig(epochs=500, width=16, depth=2, optimizer="adam", loss="l2", lr0=8e-4, test_every=100)
    res = train_flow_map(const, cfg)
    assert res.final_train_loss < 1e-6
    assert len(res.history) == 500 and res.checkpoint.epoch == 500


def test_one_full_batch_epoch_is_gradient_descent(small_ds):
    ds, _ = small_ds
    cfg = TrainConfig(epochs=1, batch_size=96, width=8, depth=2, optimizer="sgd", loss="l2", lr0=0.05)
    start = train_flow_map(ds, cfg, until=0)
    assert start.checkpoint.epoch == 0
    after = train_flow_map(ds, cfg, resume=start.checkpoint)
    meta = network_meta(ds.header, QUAD, cfg)
    X = encode_inputs(meta, ds.eta, ds.kappa, GRID.times[ds.j])
    train_idx, _ = split_indices(cfg.seed, ds.n)
    assert train_idx.size == 96
    loss0, grad = loss_and_grad(start.params, X[train_idx], ds.y[train_idx], "l2")
    expected = start.params.flat - 0.05 * grad
    assert np.allclose(after.params.flat, expected, rtol=0, atol=1e-15)
    assert after.final_train_loss == pytest.approx(
        loss_value("l2", mlp_forward(MlpParams(start.params.sizes, expected), X[train_idx]), ds.y[train_idx]),
        rel=1e-12,
    )
    assert after.final_train_loss < loss0


def test_training_logs_test_loss_periodically(small_ds):
    ds, _ = small_ds
    res = train_flow_map(ds, TrainConfig(epochs=30, width=8, test_every=10))
    logged = [r["epoch"] for r in res.history if r["test_loss"] is not None]
    assert logged == [10, 20, 30]
    assert all(r["weight_bound"] > 0 for r in res.history if r["test_loss"] is not None)
    assert res.final_test_loss == res.history[-1]["test_loss"]


def test_training_deterministic_and_resumable(small_ds):
    ds, _ = small_ds
    cfg = TrainConfig(epochs=12, width=8, test_every=4)
    a = train_flow_map(ds, cfg)
    b = train_flow_map(ds, cfg)
    assert np.array_equal(a.params.flat, b.params.flat)
    half = train_flow_map(ds, cfg, until=5)
    assert half.checkpoint.epoch == 5
    full = train_flow_map(ds, cfg, resume=half.checkpoint)
    assert np.array_equal(full.params.flat, a.params.flat) and full.history == a.history


def test_early_stopping_restores_best(small_ds):
    ds, _ = small_ds
    # a huge learning rate makes the test loss wander so the best epoch is early
    cfg = TrainConfig(epochs=200, width=8, lr0=0.5, optimizer="sgd", loss="l2", test_every=5, patience=20)
    res = train_flow_map(ds, cfg)
    tests = [r["test_loss"] for r in res.history if r["test_loss"] is not None]
    assert res.checkpoint.meta["stopped_early"]
    assert res.final_test_loss == pytest.approx(min(tests), rel=1e-12)
    assert len(res.history) < 200


def test_training_rejects_mismatched_resume(small_ds):
    ds, _ = small_ds
    ckpt = train_flow_map(ds, TrainConfig(epochs=1, width=8)).checkpoint
    with pytest.raises(ValueError):
        train_flow_map(ds, TrainConfig(epochs=2, width=16), resume=ckpt)
    with pytest.raises(ValueError):
        train_flow_map(ds, TrainConfig(epochs=1, batch_size=1000))


def test_augmented_training_shapes():
    ds, _ = generate_dataset(QUAD, GRID, 20, "augmented", seed=4)
    res = train_flow_map(ds, TrainConfig(epochs=2, width=8, batch_size=8))
    assert res.params.sizes[0] == 3 + 3 and res.params.sizes[-1] == (GRID.M + 1) * 3
    pred = NetworkPredictor(res.params, res.checkpoint.meta).predict(ds.eta[0], ds.kappa[0], GRID)
    assert pred.shape == (GRID.M + 1, 3)
    with pytest.raises(ValueError):
        NetworkPredictor(res.params, res.checkpoint.meta).predict(ds.eta[0], ds.kappa[0], TimeGrid(1.0, 10))


# --- evaluation ---------------------------------------------------------------------------

def test_oracle_evaluation_is_exact():
    pairs = sample_pairs(QUAD, 3, 0)
    res = evaluate_reconstruction(SolverOracle(QUAD), QUAD, GRID, pairs)
    assert all(p.sup_error == 0 for p in res.pairs)
    assert all(p.mu_sup_error <= 1e-12 for p in res.pairs)
    assert res.summary()["max_sup_u_error"] == 0


def test_zero_network_error_is_value_magnitude(small_ds):
    ds, _ = small_ds
    cfg = TrainConfig(width=8, depth=2)
    meta = network_meta(ds.header, QUAD, cfg)
    zero = NetworkPredictor(MlpParams([7, 8, 8, 3]), meta)
    res = evaluate_flow_map(zero, QUAD, GRID, sample_pairs(QUAD, 2, 1))
    for p in res.pairs:
        assert np.array_equal(p.abs_error, np.abs(p.u))
        assert p.time_error.shape == (GRID.M + 1,) and p.state_error.shape == (3,)


def test_reconstruction_ignores_per_slice_shifts():
    class Shifted:
        def predict(self, eta, kappa, grid):
            u = SolverOracle(QUAD).predict(eta, kappa, grid)
            return u + np.linspace(-3, 5, grid.M + 1)[:, None]

    res = evaluate_reconstruction(Shifted(), QUAD, GRID, sample_pairs(QUAD, 2, 2))
    assert all(p.mu_sup_error <= 1e-12 for p in res.pairs)
    assert all(p.sup_error > 1 for p in res.pairs)


def test_evaluation_skips_non_converged_pairs():
    res = evaluate_flow_map(SolverOracle(QUAD), QUAD, GRID, sample_pairs(QUAD, 2, 3), PicardConfig(max_iter=1))
    assert res.pairs == [] and res.skipped == [0, 1]


# --- sweep ------------------------------------------------------------------------------------

def test_sweep_single_run_matches_training(small_ds):
    ds, _ = small_ds
    base = TrainConfig(epochs=5, width=8, test_every=5)
    sweep = width_sweep(ds, base, [8], [0])
    direct = train_flow_map(ds, base)
    assert len(sweep.summary) == 1 and sweep.summary[0]["std_test_loss"] == 0
    assert sweep.summary[0]["mean_test_loss"] == direct.final_test_loss
    again = width_sweep(ds, base, [8], [0])
    assert again.summary == sweep.summary


def test_sweep_rows_per_width(small_ds):
    ds, _ = small_ds
    sweep = width_sweep(ds, TrainConfig(epochs=2, width=8, test_every=1), [4, 8], [0, 1])
    assert [r["width"] for r in sweep.summary] == [4, 8]
    assert set(sweep.runs) == {(4, 0), (4, 1), (8, 0), (8, 1)}
