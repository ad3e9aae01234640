"""``mfgflow`` command line: sample, train, eval, sweep, check.

Exit status: 0 success, 2 configuration error, 3 numerical failure
(non-convergence, failed diagnostic), 4 I/O failure (unreadable or
incompatible files).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config, preset_names
from .core import CFLError, ConvergenceError, check_lasry_lions, selector_gradient_consistency
from .models import ConfigError
from .nn import load_checkpoint, save_checkpoint, weight_bound
from .pipeline import (
    DatasetError,
    GenerationError,
    evaluate_flow_map,
    generate_dataset,
    mu_curve_rows,
    oracle_checkpoint,
    pair_curve_rows,
    predictor_from_checkpoint,
    read_dataset,
    sample_pairs,
    sample_rng,
    sample_simplex,
    sample_kappa,
    train_flow_map,
    width_sweep,
    write_csv,
    write_dataset,
    write_dict_csv,
    write_jsonl,
)

log = logging.getLogger("mfgflow")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class DiagnosticFailure(RuntimeError):
    pass


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    """Command-line flags take precedence over file values."""
    training = cfg.training
    sampling = cfg.sampling
    sweep = cfg.sweep
    if getattr(args, "seed", None) is not None:
        sampling = dataclasses.replace(sampling, seed=args.seed)
        training = dataclasses.replace(training, seed=args.seed)
    if getattr(args, "mode", None) is not None:
        sampling = dataclasses.replace(sampling, mode=args.mode)
    if getattr(args, "epochs", None) is not None:
        training = dataclasses.replace(training, epochs=args.epochs)
    if getattr(args, "widths", None) is not None:
        sweep = dataclasses.replace(sweep, widths=args.widths)
    if getattr(args, "trials", None) is not None:
        sweep = dataclasses.replace(sweep, trials=args.trials)
    out = getattr(args, "out", None) or cfg.out or "."
    return dataclasses.replace(cfg, training=training, sampling=sampling, sweep=sweep, out=out)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_sample(cfg: ExperimentConfig, threads: int = 1):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, report = generate_dataset(
        cfg.model, cfg.grid, cfg.sampling.n, cfg.sampling.mode, cfg.sampling.seed, cfg.solver, threads=threads
    )
    write_dataset(out / "dataset.jsonl", ds)
    write_jsonl(out / "report.jsonl", report)
    retries = sum(r["retries"] for r in report)
    print(f"wrote {ds.n} {ds.mode} records to {out / 'dataset.jsonl'} ({retries} retries)")
    return ds, report


def _load_dataset(cfg: ExperimentConfig, path):
    path = Path(path) if path else Path(cfg.out) / "dataset.jsonl"
    ds = read_dataset(path, expected_model=cfg.model)
    if (ds.header["M"], ds.header["T"]) != (cfg.grid.M, cfg.grid.T):
        raise DatasetError(f"{path}: grid (M={ds.header['M']}, T={ds.header['T']}) does not match the config")
    return ds


def _history_rows(history):
    header = ["epoch", "lr", "train_loss", "test_loss", "weight_bound"]
    return header, [[r[k] for k in header] for r in history]


def cmd_train(cfg: ExperimentConfig, dataset=None, resume=None):
    out = Path(cfg.out)
    ds = _load_dataset(cfg, dataset)
    ckpt = load_checkpoint(resume) if resume else None
    if ckpt is not None:
        log.info("resuming at epoch %d", ckpt.epoch)
    res = train_flow_map(ds, cfg.training, resume=ckpt)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.bin", res.checkpoint)
    write_csv(out / "curves" / "train.csv", *_history_rows(res.history))
    print(
        f"trained to epoch {res.checkpoint.epoch}: train loss {res.final_train_loss:.6g}, "
        f"test loss {res.final_test_loss:.6g}, p(theta) {res.checkpoint.meta['weight_bound']:.6g}"
    )
    return res


def _predictor(cfg: ExperimentConfig, checkpoint):
    if checkpoint in (None, "oracle"):
        ckpt = oracle_checkpoint(cfg.model)
    else:
        ckpt = load_checkpoint(checkpoint)
    if ckpt.meta.get("kind") == "network" and ckpt.meta["mode"] == "augmented" and ckpt.meta["M"] != cfg.grid.M:
        raise ConfigError("augmented checkpoint was trained on a different grid")
    try:
        return predictor_from_checkpoint(ckpt, cfg.model, cfg.solver)
    except ValueError as exc:
        raise DatasetError(str(exc)) from None


def cmd_eval(cfg: ExperimentConfig, checkpoint=None):
    out = Path(cfg.out)
    predictor = _predictor(cfg, checkpoint)
    pairs = sample_pairs(cfg.model, cfg.evaluation.pairs, cfg.evaluation.seed)
    result = evaluate_flow_map(predictor, cfg.model, cfg.grid, pairs, cfg.solver, reconstruct=True)
    rows = []
    for ev in result.pairs:
        u_head, u_rows = pair_curve_rows(ev, cfg.grid)
        mu_head, mu_rows = mu_curve_rows(ev, cfg.grid)
        rows_joined = [a + b[2:] for a, b in zip(u_rows, mu_rows)]
        head = u_head + ["mu_" + h if h == "max_abs_err" else h for h in mu_head[2:]]
        write_csv(out / "curves" / f"pair_{ev.index:03d}.csv", head, rows_joined)
        rows.append(
            {
                "pair": ev.index,
                "eta": " ".join(repr(float(v)) for v in ev.eta),
                "kappa": " ".join(repr(float(v)) for v in ev.kappa),
                "sup_u_error": ev.sup_error,
                "mean_abs_u_error": float(ev.abs_error.mean()),
                "sup_mu_error": ev.mu_sup_error,
            }
        )
    agg = result.summary()
    for key in ("mean", "max"):
        rows.append(
            {
                "pair": key,
                "eta": "",
                "kappa": "",
                "sup_u_error": agg[f"{key}_sup_u_error"],
                "mean_abs_u_error": agg["mean_abs_u_error"] if key == "mean" else max(
                    (float(e.abs_error.mean()) for e in result.pairs), default=float("nan")
                ),
                "sup_mu_error": agg.get(f"{key}_sup_mu_error", float("nan")),
            }
        )
    write_dict_csv(out / "summary.csv", rows)
    for i in result.skipped:
        log.warning("pair %d skipped: Picard did not converge", i)
    print(
        f"{agg['pairs']} pairs ({agg['skipped']} skipped): mean sup |u - u_hat| {agg['mean_sup_u_error']:.4g}, "
        f"mean sup |mu - mu_hat| {agg.get('mean_sup_mu_error', float('nan')):.4g}"
    )
    return result


def cmd_sweep(cfg: ExperimentConfig, dataset=None, threads: int = 1):
    out = Path(cfg.out)
    default = out / "dataset.jsonl"
    if dataset is None and not default.exists():
        cmd_sample(cfg, threads)
    ds = _load_dataset(cfg, dataset)
    seeds = [cfg.training.seed + i for i in range(cfg.sweep.trials)]
    result = width_sweep(ds, cfg.training, cfg.sweep.widths, seeds)
    for (w, s), run in result.runs.items():
        write_csv(out / "curves" / f"width{w}_seed{s}.csv", *_history_rows(run.history))
    write_dict_csv(out / "summary.csv", result.summary)
    for row in result.summary:
        print(
            f"W={row['width']}: test {row['mean_test_loss']:.4g} +- {row['std_test_loss']:.2g}, "
            f"train {row['mean_train_loss']:.4g} +- {row['std_train_loss']:.2g}"
        )
    return result


def cmd_check(cfg: ExperimentConfig, checkpoint=None, pairs: int = 1000, seed: int = 0):
    """Preflight diagnostics; raises ``DiagnosticFailure`` when any fails."""
    model = cfg.model
    results = []

    def record(name, ok, value):
        results.append((name, ok, value))
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {value}")

    draws = [(sample_simplex(sample_rng(seed, 2 * i), model.d).probs,
              sample_simplex(sample_rng(seed, 2 * i + 1), model.d).probs) for i in range(pairs)]
    rep = check_lasry_lions(model.mean_field_cost, draws)
    record(f"running mean-field cost monotone on {pairs} pairs", rep.ok, f"min sum {rep.min_sum:.3e}")
    kappa = sample_kappa(np.random.default_rng([seed, 3]), model.kappa_low, model.kappa_high)
    rep = check_lasry_lions(lambda x, eta: model.terminal_cost(kappa, x, eta), draws)
    record(f"terminal cost monotone on {pairs} pairs", rep.ok, f"min sum {rep.min_sum:.3e}")

    rng = np.random.default_rng([seed, 4])
    gap = 0.0
    for i in range(200):
        x = int(rng.integers(model.d))
        p = rng.uniform(-10.0, 10.0, model.d)
        gap = max(gap, selector_gradient_consistency(model, x, sample_simplex(rng, model.d).probs, p))
    record("selector equals the p-gradient of H (200 points)", gap < 1e-5, f"max gap {gap:.3e}")

    cfl = model.cfl_number(cfg.grid)
    record("CFL dt * max exit rate <= 1", cfl <= 1.0, f"{cfl:.4g}")

    if checkpoint is not None:
        ckpt = load_checkpoint(checkpoint)
        if ckpt.params is None:
            record("weight bound p(theta)", True, "oracle checkpoint has no parameters")
        else:
            record("weight bound p(theta)", True, f"{weight_bound(ckpt.params):.6g} (frobenius)")
    failed = [name for name, ok, _ in results if not ok]
    if failed:
        raise DiagnosticFailure(f"{len(failed)} diagnostic(s) failed")
    return results


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _widths(text: str):
    try:
        widths = [int(w) for w in text.split(",") if w.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("widths must be comma-separated integers") from None
    if not widths or min(widths) < 1:
        raise argparse.ArgumentTypeError("widths must be positive")
    return widths


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfgflow", description="Learn flow maps of finite-state mean-field games.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", required=True, help=f"config file or preset ({', '.join(preset_names())})")
        p.add_argument("--out", help="output directory (overrides the config)")
        if seed:
            p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        return p

    p = common(sub.add_parser("sample", help="generate a labeled dataset"))
    p.add_argument("--mode", choices=["pointwise", "augmented"])

    p = common(sub.add_parser("train", help="train a flow-map network"))
    p.add_argument("--dataset", help="dataset file (default <out>/dataset.jsonl)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--mode", choices=["pointwise", "augmented"])
    p.add_argument("--resume", help="checkpoint to continue from")

    p = common(sub.add_parser("eval", help="compare a checkpoint against the solver"), seed=False)
    p.add_argument("--checkpoint", default="oracle", help="checkpoint file or 'oracle'")

    p = common(sub.add_parser("sweep", help="train across widths and seeds"))
    p.add_argument("--dataset")
    p.add_argument("--widths", type=_widths)
    p.add_argument("--trials", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--mode", choices=["pointwise", "augmented"])

    p = common(sub.add_parser("check", help="preflight diagnostics"))
    p.add_argument("--checkpoint")
    p.add_argument("--pairs", type=int, default=1000)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if getattr(args, "threads", 1) < 1 or (args.command == "sweep" and cfg.sweep.trials < 1):
            raise ConfigError("--threads and --trials must be positive")
        if args.command == "sample":
            cmd_sample(cfg, args.threads)
        elif args.command == "train":
            cmd_train(cfg, args.dataset, args.resume)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        elif args.command == "sweep":
            cmd_sweep(cfg, args.dataset, args.threads)
        elif args.command == "check":
            cmd_check(cfg, args.checkpoint, args.pairs, args.seed or 0)
    except (ConfigError, CFLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GenerationError, ConvergenceError, DiagnosticFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
