"""Sampling, label generation, flow-map training and evaluation.

Dataset files are JSON lines. The first line is a header::

    {"kind": "header", "schema_version": 1, "model": {...}, "model_digest": "...",
     "d": 3, "k": 3, "M": 100, "T": 1.0, "seed": 0, "mode": "pointwise", "n": 4000}

followed by one record per sample, in sample-index order::

    {"mode": "pointwise", "eta": [...], "kappa": [...], "j": 17, "t": 0.17, "y": [...]}

Augmented records carry the whole trajectory ``u[0..M]`` flattened row-major
in ``y`` and ``null`` for ``j`` and ``t``.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import MfgError, SimplexDist, TimeGrid, as_probs
from .models import canonical_json, model_digest, model_from_dict
from .nn import (
    Checkpoint,
    MlpParams,
    OptimState,
    cosine_lr,
    init_params,
    loss_and_grad,
    loss_value,
    mlp_forward,
    optimizer_step,
    weight_bound,
)
from .solver import PicardConfig, kfp_reconstruct, picard_solve_batch

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = ("pointwise", "augmented")
MAX_RETRIES = 10


class DatasetError(MfgError, ValueError):
    """Dataset file is malformed or does not match the expected model."""


class GenerationError(MfgError, RuntimeError):
    """A sample could not be labeled within the retry budget."""


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_simplex(rng: np.random.Generator, d: int) -> SimplexDist:
    """Uniform draw from the simplex via normalized unit exponentials."""
    if d < 1:
        raise ValueError("d must be positive")
    e = rng.standard_exponential(d)
    return SimplexDist(e / e.sum())


def sample_kappa(rng: np.random.Generator, low, high) -> np.ndarray:
    low = np.atleast_1d(np.asarray(low, dtype=np.float64))
    high = np.atleast_1d(np.asarray(high, dtype=np.float64))
    if low.shape != high.shape or np.any(low > high):
        raise ValueError("degenerate parameter box: lower bound exceeds upper bound")
    return low + (high - low) * rng.random(low.shape)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index``; unaffected by processing order."""
    return np.random.default_rng([int(seed), int(index)])


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    header: dict
    eta: np.ndarray
    kappa: np.ndarray
    y: np.ndarray
    j: np.ndarray | None = None

    @property
    def mode(self) -> str:
        return self.header["mode"]

    @property
    def n(self) -> int:
        return self.eta.shape[0]

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.header["T"], self.header["M"])

    @property
    def model(self):
        return model_from_dict(self.header["model"])

    def records(self):
        grid = self.grid
        for i in range(self.n):
            rec = {"mode": self.mode, "eta": self.eta[i].tolist(), "kappa": self.kappa[i].tolist()}
            if self.mode == "pointwise":
                j = int(self.j[i])
                rec.update(j=j, t=grid.time(j))
            else:
                rec.update(j=None, t=None)
            rec["y"] = self.y[i].tolist()
            yield rec


def _draw(rng, model, grid):
    eta = sample_simplex(rng, model.d).probs
    kappa = sample_kappa(rng, model.kappa_low, model.kappa_high)
    j = int(rng.integers(1, grid.M + 1)) if grid.M else 0
    return eta, kappa, j


def generate_dataset(
    model,
    grid: TimeGrid,
    n: int,
    mode: str = "pointwise",
    seed: int = 0,
    solver_cfg: PicardConfig = PicardConfig(),
    threads: int = 1,
    chunk_size: int = 500,
):
    """Label ``n`` samples with Picard solves; returns ``(Dataset, report)``.

    Pointwise mode draws ``j`` uniformly from ``1..M`` and keeps
    ``u[j]``; augmented mode keeps the whole trajectory. Samples whose solve
    does not converge are redrawn from their own stream, at most
    ``MAX_RETRIES`` times.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if n < 1:
        raise ValueError("n must be positive")
    model.check_cfl(grid)
    rngs = [sample_rng(seed, i) for i in range(n)]
    draws = [_draw(r, model, grid) for r in rngs]
    retries = np.zeros(n, dtype=int)
    results = [None] * n
    pending = list(range(n))

    def solve(idx):
        etas = np.stack([draws[i][0] for i in idx])
        kappas = np.stack([draws[i][1] for i in idx])
        return picard_solve_batch(model, etas, kappas, grid, solver_cfg)

    while pending:
        chunks = [pending[s:s + chunk_size] for s in range(0, len(pending), chunk_size)]
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            solved = list(pool.map(solve, chunks))
        failed = []
        for idx, res in zip(chunks, solved):
            for i, r in zip(idx, res):
                if r.converged:
                    results[i] = r
                else:
                    failed.append(i)
        for i in failed:
            retries[i] += 1
            if retries[i] > MAX_RETRIES:
                raise GenerationError(f"sample {i}: no converged solve after {MAX_RETRIES} retries")
            draws[i] = _draw(rngs[i], model, grid)
        if failed:
            log.info("resampling %d non-converged samples", len(failed))
        pending = failed

    eta = np.stack([d[0] for d in draws])
    kappa = np.stack([d[1] for d in draws])
    if mode == "pointwise":
        j = np.array([d[2] for d in draws])
        y = np.stack([results[i].solution.u[j[i]] for i in range(n)])
    else:
        j = None
        y = np.stack([results[i].solution.u.reshape(-1) for i in range(n)])
    header = dataset_header(model, grid, seed, mode, n)
    report = [
        {"index": i, "iterations": results[i].iterations, "residual": results[i].residual, "retries": int(retries[i])}
        for i in range(n)
    ]
    return Dataset(header, eta, kappa, y, j), report


def dataset_header(model, grid: TimeGrid, seed: int, mode: str, n: int) -> dict:
    return {
        "kind": "header",
        "schema_version": SCHEMA_VERSION,
        "model": model.to_dict(),
        "model_digest": model_digest(model),
        "d": model.d,
        "k": model.k,
        "M": grid.M,
        "T": grid.T,
        "seed": int(seed),
        "mode": mode,
        "n": int(n),
    }


def write_dataset(path, ds: Dataset) -> None:
    with open(path, "w") as fh:
        fh.write(canonical_json(ds.header) + "\n")
        for rec in ds.records():
            fh.write(canonical_json(rec) + "\n")


def write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(canonical_json(row) + "\n")


def read_dataset(path, expected_model=None) -> Dataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:] if line]
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: {exc}") from None
    if header.get("kind") != "header" or header.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"{path}: missing or unsupported header")
    if model_digest(model_from_dict(header["model"])) != header["model_digest"]:
        raise DatasetError(f"{path}: header digest does not match its model")
    if expected_model is not None and model_digest(expected_model) != header["model_digest"]:
        raise DatasetError(f"{path}: dataset was generated for a different model")
    if len(records) != header["n"]:
        raise DatasetError(f"{path}: header says {header['n']} records, found {len(records)}")
    if not records:
        raise DatasetError(f"{path}: no records")
    mode = header["mode"]
    if any(r.get("mode") != mode for r in records):
        raise DatasetError(f"{path}: record mode differs from header")
    eta = np.array([r["eta"] for r in records], dtype=np.float64)
    kappa = np.array([r["kappa"] for r in records], dtype=np.float64)
    y = np.array([r["y"] for r in records], dtype=np.float64)
    j = np.array([r["j"] for r in records], dtype=int) if mode == "pointwise" else None
    d, M = header["d"], header["M"]
    width = d if mode == "pointwise" else (M + 1) * d
    if eta.shape != (len(records), d) or y.shape != (len(records), width):
        raise DatasetError(f"{path}: record shapes do not match the header")
    return Dataset(header, eta, kappa, y, j)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 64
    width: int = 64
    depth: int = 4
    lr0: float = 8e-4
    optimizer: str = "adamw"
    loss: str = "smooth_l1"
    seed: int = 0
    patience: int | None = None
    test_fraction: float = 0.2
    test_every: int = 25
    weight_decay: float | None = None

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.width, self.depth, self.test_every) < 1:
            raise ValueError("epochs, batch size, width, depth and test_every must be positive")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def encode_inputs(meta: dict, eta, kappa, t=None) -> np.ndarray:
    """Network features: ``(t / T, eta, kappa rescaled to [0, 1])``; no ``t`` in augmented mode."""
    eta = np.atleast_2d(eta)
    kappa = np.atleast_2d(kappa)
    lo = np.asarray(meta["kappa_low"])
    span = np.asarray(meta["kappa_high"]) - lo
    scaled = np.divide(kappa - lo, span, out=np.zeros_like(kappa), where=span > 0)
    parts = [eta, scaled]
    if meta["mode"] == "pointwise":
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (eta.shape[0], 1))
        parts.insert(0, t / meta["T"])
    return np.hstack(parts)


def network_meta(ds_header: dict, model, cfg: TrainConfig) -> dict:
    return {
        "kind": "network",
        "mode": ds_header["mode"],
        "d": ds_header["d"],
        "k": ds_header["k"],
        "M": ds_header["M"],
        "T": ds_header["T"],
        "kappa_low": model.kappa_low.tolist(),
        "kappa_high": model.kappa_high.tolist(),
        "model": ds_header["model"],
        "model_digest": ds_header["model_digest"],
        "train": cfg.to_dict(),
    }


def dataset_arrays(ds: Dataset, meta: dict):
    t = ds.grid.times[ds.j] if ds.mode == "pointwise" else None
    return encode_inputs(meta, ds.eta, ds.kappa, t), ds.y


def split_indices(seed: int, n: int, test_fraction: float = 0.2):
    """Held-out split as a pure function of ``(seed, n)``: returns ``(train, test)``."""
    perm = np.random.default_rng([int(seed), n, 7]).permutation(n)
    n_test = max(1, int(round(test_fraction * n)))
    if n_test >= n:
        raise ValueError("dataset too small to hold out a test split")
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def params(self) -> MlpParams:
        return self.checkpoint.params

    @property
    def final_test_loss(self) -> float:
        return self.checkpoint.meta["final_test_loss"]

    @property
    def final_train_loss(self) -> float:
        return self.checkpoint.meta["final_train_loss"]


def train_flow_map(
    ds: Dataset, cfg: TrainConfig, resume: Checkpoint | None = None, until: int | None = None
) -> TrainResult:
    """Mini-batch training with a per-epoch cosine schedule.

    Test loss and the weight bound are logged every ``cfg.test_every`` epochs
    and at the last epoch. With ``patience`` set, training stops once the test
    loss has not improved for that many epochs and the best parameters are
    restored.

    ``until`` pauses after that many epochs (counted from the start of the
    schedule); resuming from the returned checkpoint reproduces an
    uninterrupted run exactly when early stopping is off.
    """
    start = time.perf_counter()
    model = ds.model
    meta = network_meta(ds.header, model, cfg)
    X, Y = dataset_arrays(ds, meta)
    train_idx, test_idx = split_indices(cfg.seed, ds.n, cfg.test_fraction)
    if cfg.batch_size > train_idx.size:
        raise ValueError("batch size exceeds the training split")
    sizes = [X.shape[1]] + [cfg.width] * cfg.depth + [Y.shape[1]]

    rng = np.random.default_rng([int(cfg.seed), 2])
    if resume is not None:
        if resume.params is None or resume.params.sizes != sizes:
            raise ValueError("checkpoint architecture does not match the dataset/config")
        params = resume.params.copy()
        opt = copy.deepcopy(resume.optimizer)
        rng.bit_generator.state = resume.rng_state
        first_epoch = resume.epoch
        history = list(resume.meta.get("history", []))
    else:
        params = init_params(rng, sizes)
        overrides = {} if cfg.weight_decay is None else {"weight_decay": cfg.weight_decay}
        opt = OptimState.for_kind(cfg.optimizer, params.flat.size, **overrides)
        first_epoch = 0
        history = []

    Xtest, Ytest = X[test_idx], Y[test_idx]
    best = (np.inf, None, first_epoch)
    epoch = first_epoch
    stopped_early = False
    stop_at = cfg.epochs if until is None else min(until, cfg.epochs)
    for epoch in range(first_epoch, stop_at):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
        order = rng.permutation(train_idx)
        total = 0.0
        for s in range(0, order.size, cfg.batch_size):
            batch = order[s:s + cfg.batch_size]
            loss, grad = loss_and_grad(params, X[batch], Y[batch], cfg.loss)
            optimizer_step(opt, params, grad, lr)
            total += loss * batch.size
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": total / order.size, "test_loss": None, "weight_bound": None}
        last = epoch + 1 == cfg.epochs
        if (epoch + 1) % cfg.test_every == 0 or last:
            test_loss = loss_value(cfg.loss, mlp_forward(params, Xtest), Ytest)
            row.update(test_loss=test_loss, weight_bound=weight_bound(params))
            if test_loss < best[0]:
                best = (test_loss, params.copy(), epoch + 1)
            if cfg.patience is not None and epoch + 1 - best[2] >= cfg.patience:
                stopped_early = True
        history.append(row)
        if stopped_early:
            break

    completed = epoch + 1 if stop_at > first_epoch else first_epoch
    if stopped_early and best[1] is not None:
        params = best[1]
    final_test = loss_value(cfg.loss, mlp_forward(params, Xtest), Ytest)
    final_train = loss_value(cfg.loss, mlp_forward(params, X[train_idx]), Y[train_idx])
    meta.update(
        final_test_loss=final_test,
        final_train_loss=final_train,
        weight_bound=weight_bound(params),
        stopped_early=stopped_early,
        history=history,
    )
    ckpt = Checkpoint(params, opt, completed, rng.bit_generator.state, meta)
    return TrainResult(ckpt, history, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# Predictors and evaluation
# ---------------------------------------------------------------------------

class NetworkPredictor:
    """Value-function trajectories from a trained network."""

    def __init__(self, params: MlpParams, meta: dict):
        self.params = params
        self.meta = meta

    def predict(self, eta, kappa, grid: TimeGrid) -> np.ndarray:
        d = self.meta["d"]
        if self.meta["mode"] == "pointwise":
            times = grid.times
            X = encode_inputs(self.meta, np.tile(eta, (times.size, 1)), np.tile(kappa, (times.size, 1)), times)
            return mlp_forward(self.params, X)
        if grid.M != self.meta["M"]:
            raise ValueError("augmented network only predicts on its training grid")
        return mlp_forward(self.params, encode_inputs(self.meta, eta, kappa))[0].reshape(grid.M + 1, d)


class SolverOracle:
    """Predictor that answers with the Picard solution itself."""

    def __init__(self, model, cfg: PicardConfig = PicardConfig()):
        self.model = model
        self.cfg = cfg

    def predict(self, eta, kappa, grid: TimeGrid) -> np.ndarray:
        res = picard_solve_batch(self.model, np.atleast_2d(eta), np.atleast_2d(kappa), grid, self.cfg)[0]
        return res.solution.u


def oracle_checkpoint(model) -> Checkpoint:
    return Checkpoint(None, meta={"kind": "oracle", "model": model.to_dict(), "model_digest": model_digest(model)})


def predictor_from_checkpoint(ckpt: Checkpoint, model, solver_cfg: PicardConfig = PicardConfig()):
    if ckpt.meta.get("model_digest") != model_digest(model):
        raise ValueError("checkpoint was trained for a different model")
    if ckpt.meta.get("kind") == "oracle":
        return SolverOracle(model, solver_cfg)
    return NetworkPredictor(ckpt.params, ckpt.meta)


def sample_pairs(model, count: int, seed: int):
    pairs = []
    for i in range(count):
        rng = sample_rng(seed, i)
        pairs.append((sample_simplex(rng, model.d).probs, sample_kappa(rng, model.kappa_low, model.kappa_high)))
    return pairs


@dataclass
class PairEvaluation:
    index: int
    eta: np.ndarray
    kappa: np.ndarray
    u: np.ndarray
    u_hat: np.ndarray
    mu: np.ndarray
    mu_hat: np.ndarray | None = None

    @property
    def abs_error(self) -> np.ndarray:
        return np.abs(self.u - self.u_hat)

    @property
    def sup_error(self) -> float:
        return float(self.abs_error.max())

    @property
    def time_error(self) -> np.ndarray:
        return self.abs_error.max(axis=1)

    @property
    def state_error(self) -> np.ndarray:
        return self.abs_error.max(axis=0)

    @property
    def mu_sup_error(self) -> float:
        return float(np.max(np.abs(self.mu - self.mu_hat))) if self.mu_hat is not None else float("nan")


@dataclass
class EvaluationResult:
    pairs: list[PairEvaluation]
    skipped: list[int]

    def summary(self) -> dict:
        sups = np.array([p.sup_error for p in self.pairs])
        out = {
            "pairs": len(self.pairs),
            "skipped": len(self.skipped),
            "mean_sup_u_error": float(sups.mean()) if sups.size else float("nan"),
            "max_sup_u_error": float(sups.max()) if sups.size else float("nan"),
            "mean_abs_u_error": float(np.mean([p.abs_error.mean() for p in self.pairs])) if sups.size else float("nan"),
        }
        mus = [p.mu_sup_error for p in self.pairs if p.mu_hat is not None]
        if mus:
            out["mean_sup_mu_error"] = float(np.mean(mus))
            out["max_sup_mu_error"] = float(np.max(mus))
        return out


def evaluate_flow_map(
    predictor, model, grid: TimeGrid, pairs, solver_cfg: PicardConfig = PicardConfig(), reconstruct: bool = False
) -> EvaluationResult:
    """Compare predicted value functions with Picard solutions pair by pair.

    With ``reconstruct=True`` the predicted values also drive a forward sweep
    whose measures are stored for comparison with the Picard flow.
    """
    if not pairs:
        return EvaluationResult([], [])
    etas = np.stack([as_probs(e) for e, _ in pairs])
    kappas = np.stack([model.check_kappa(k) for _, k in pairs])
    solved = picard_solve_batch(model, etas, kappas, grid, solver_cfg)
    out, skipped = [], []
    for i, res in enumerate(solved):
        if not res.converged:
            skipped.append(i)
            continue
        u_hat = np.asarray(predictor.predict(etas[i], kappas[i], grid), dtype=np.float64)
        mu_hat = kfp_reconstruct(model, lambda j: u_hat[j], etas[i], grid) if reconstruct else None
        out.append(PairEvaluation(i, etas[i], kappas[i], res.solution.u, u_hat, res.solution.mu, mu_hat))
    return EvaluationResult(out, skipped)


def evaluate_reconstruction(
    predictor, model, grid: TimeGrid, pairs, solver_cfg: PicardConfig = PicardConfig()
) -> EvaluationResult:
    return evaluate_flow_map(predictor, model, grid, pairs, solver_cfg, reconstruct=True)


def pair_curve_rows(ev: PairEvaluation, grid: TimeGrid) -> tuple[list[str], list[list]]:
    d = ev.u.shape[1]
    header = ["j", "t"] + [f"u_{x}" for x in range(d)] + [f"u_hat_{x}" for x in range(d)]
    header += [f"abs_err_{x}" for x in range(d)] + ["max_abs_err"]
    rows = []
    for j, t in enumerate(grid.times):
        rows.append([j, t, *ev.u[j], *ev.u_hat[j], *ev.abs_error[j], ev.time_error[j]])
    return header, rows


def mu_curve_rows(ev: PairEvaluation, grid: TimeGrid) -> tuple[list[str], list[list]]:
    d = ev.mu.shape[1]
    header = ["j", "t"] + [f"mu_{x}" for x in range(d)] + [f"mu_hat_{x}" for x in range(d)] + ["max_abs_err"]
    rows = []
    for j, t in enumerate(grid.times):
        rows.append([j, t, *ev.mu[j], *ev.mu_hat[j], float(np.max(np.abs(ev.mu[j] - ev.mu_hat[j])))])
    return header, rows


# ---------------------------------------------------------------------------
# Width sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    summary: list[dict]
    runs: dict[tuple[int, int], TrainResult]


def width_sweep(ds: Dataset, base_cfg: TrainConfig, widths, seeds) -> SweepResult:
    """Train one network per ``(width, seed)`` and aggregate final losses per width."""
    runs = {}
    summary = []
    for w in widths:
        tests, trains = [], []
        for s in seeds:
            cfg = TrainConfig(**{**base_cfg.to_dict(), "width": int(w), "seed": int(s)})
            res = train_flow_map(ds, cfg)
            log.info("width %d seed %d: test %.4g (%.1fs)", w, s, res.final_test_loss, res.seconds)
            runs[(int(w), int(s))] = res
            tests.append(res.final_test_loss)
            trains.append(res.final_train_loss)
        summary.append(
            {
                "width": int(w),
                "trials": len(seeds),
                "mean_test_loss": float(np.mean(tests)),
                "std_test_loss": float(np.std(tests)),
                "mean_train_loss": float(np.mean(trains)),
                "std_train_loss": float(np.std(trains)),
            }
        )
    return SweepResult(summary, runs)


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_csv(path, header, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_dict_csv(path, rows: list[dict]) -> None:
    header = list(rows[0]) if rows else []
    write_csv(path, header, [[r.get(k) for k in header] for r in rows])
