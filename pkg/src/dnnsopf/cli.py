"""Command-line entry point: ``dnnsopf {train,eval,compare,pf}``.

Every command writes only inside ``--out`` and appends one entry to
``<out>/manifest.json`` listing the config snapshot, case hash, seed and the
files it produced. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .acpf import Dispatch, Grid, PowerFlowDivergence, constraint_values, generation_cost
from .baseline import evaluate_baseline
from .caseio import DATA_DIR, CaseParseError, CaseValidationError, SingularBranchError, load_case
from .ccsopf import (
    Metrics,
    TrainConfig,
    TrainingAborted,
    evaluate,
    load_metrics,
    make_split,
    save_metrics,
    solve_with_fallback,
    train,
)
from .policy import CheckpointError, forward, load_checkpoint, save_checkpoint

log = logging.getLogger("dnnsopf")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad flags, config or input files; maps to exit code 2."""


@dataclass
class RunManifest:
    command: str
    config: dict
    case: str
    case_sha256: str
    seed: int
    started: str
    finished: str = ""
    version: str = __version__
    outputs: list[str] = field(default_factory=list)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _case_path(ref: str) -> Path:
    p = Path(ref)
    if p.exists():
        return p
    bundled = DATA_DIR / (p.name if p.suffix == ".m" else p.name + ".m")
    if p.parent == Path(".") and bundled.exists():
        return bundled
    raise UsageError(f"case file not found: {ref}")


def _load_grid(ref: str) -> tuple[Grid, Path, str]:
    path = _case_path(ref)
    try:
        case = load_case(path)
        grid = Grid(case)
    except (CaseParseError, CaseValidationError, SingularBranchError) as exc:
        raise UsageError(f"invalid case {ref}: {exc}") from exc
    return grid, path, hashlib.sha256(path.read_bytes()).hexdigest()


def _config(args, base: dict | None = None) -> TrainConfig:
    d = dict(base or {})
    if args.config:
        try:
            with open(args.config) as fh:
                d.update(json.load(fh))
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
    for key in ("seed", "mode", "alpha", "epochs"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _append_manifest(out: Path, man: RunManifest) -> None:
    path = out / MANIFEST
    entries = json.loads(path.read_text()) if path.exists() else []
    man.finished = _now()
    entries.append(asdict(man))
    path.write_text(json.dumps(entries, indent=1) + "\n")


def metrics_table(rows: list[Metrics]) -> str:
    lines = [
        "| policy | max violation [%] | avg cost [$] | eval time [s] | PF failures |",
        "|---|---:|---:|---:|---:|",
    ]
    for m in rows:
        lines.append(f"| {m.policy} | {m.max_violation_pct:.1f} | {m.avg_cost:.2f} | {m.eval_time:.2f} "
                     f"| {m.pf_failures} |")
    return "\n".join(lines) + "\n"


def metrics_csv(rows: list[Metrics]) -> str:
    lines = ["policy,max_violation_pct,avg_cost,eval_time,pf_failures,n_samples"]
    for m in rows:
        lines.append(f"{m.policy},{m.max_violation_pct!r},{m.avg_cost!r},{m.eval_time!r},{m.pf_failures},"
                     f"{m.n_samples}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    grid, path, digest = _load_grid(args.case)
    cfg = _config(args)
    out = _out_dir(args)
    man = RunManifest("train", cfg.to_dict(), str(path), digest, cfg.seed, _now())
    train_set, _ = make_split(grid, cfg)
    params, hist = train(grid, cfg, train_set)
    meta = {"config": cfg.to_dict(), "case": path.stem, "case_sha256": digest, "version": __version__}
    save_checkpoint(params, out / "checkpoint.json", meta)
    (out / "history.csv").write_text(hist.to_csv())
    (out / "epochs.json").write_text(json.dumps(hist.epoch_summary, indent=1) + "\n")
    man.outputs = ["checkpoint.json", "history.csv", "epochs.json"]
    _append_manifest(out, man)
    last = hist.epoch_summary[-1] if hist.epoch_summary else {}
    print(f"trained {cfg.epochs} epochs on {path.stem}: final epoch cost {last.get('avg_cost', float('nan')):.2f}, "
          f"max violation {last.get('max_violation_pct', float('nan')):.1f}%")
    return EXIT_OK


def _check_dims(params, grid: Grid) -> None:
    idx = grid.index
    d_in = idx.dim_phi if params.mode == "full" else 1
    if params.dims[-1] != idx.dim_x or params.dims[0] != d_in or params.n_gen != idx.n_gen:
        raise UsageError(
            f"dimension mismatch: checkpoint maps {params.dims[0]} inputs to {params.dims[-1]} dispatch "
            f"variables, case needs {d_in} -> {idx.dim_x}"
        )


def cmd_eval(args) -> int:
    grid, path, digest = _load_grid(args.case)
    params, meta = None, {}
    if args.policy == "dnn":
        if not args.checkpoint:
            raise UsageError("--checkpoint is required for --policy dnn")
        try:
            params, meta = load_checkpoint(args.checkpoint)
        except FileNotFoundError as exc:
            raise UsageError(f"checkpoint not found: {args.checkpoint}") from exc
        except (CheckpointError, KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"invalid checkpoint: {exc}") from exc
        _check_dims(params, grid)
    cfg = _config(args, meta.get("config"))
    out = _out_dir(args)
    man = RunManifest("eval", cfg.to_dict(), str(path), digest, cfg.seed, _now())
    _, test_set = make_split(grid, cfg)
    if args.policy == "baseline":
        metrics, sols = evaluate_baseline(grid, test_set)
        n_bad = sum(not s.converged for s in sols)
        if n_bad:
            log.warning("%d/%d baseline solves did not meet the first-order test", n_bad, len(sols))
    else:
        metrics = evaluate(params, grid, test_set)
    stem = f"metrics_{metrics.policy}"
    save_metrics(metrics, out / f"{stem}.json")
    table = metrics_table([metrics])
    (out / f"{stem}.md").write_text(table)
    man.outputs = [f"{stem}.json", f"{stem}.md"]
    _append_manifest(out, man)
    print(table, end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    if not args.metrics:
        raise UsageError("compare needs at least one metrics file")
    rows = []
    for p in args.metrics:
        try:
            rows.append(load_metrics(p))
        except FileNotFoundError as exc:
            raise UsageError(f"metrics file not found: {p}") from exc
        except (ValueError, KeyError) as exc:
            raise UsageError(f"{p}: {exc}") from exc
    out = _out_dir(args)
    man = RunManifest("compare", {"inputs": [str(p) for p in args.metrics]}, "", "", 0, _now())
    table = metrics_table(rows)
    (out / "compare.csv").write_text(metrics_csv(rows))
    (out / "compare.md").write_text(table)
    man.outputs = ["compare.csv", "compare.md"]
    _append_manifest(out, man)
    print(table, end="")
    return EXIT_OK


def cmd_pf(args) -> int:
    """One power flow at nominal loads, dispatched by a checkpoint or the box midpoint."""
    grid, path, digest = _load_grid(args.case)
    loads = grid.nominal_loads()
    if args.checkpoint:
        try:
            params, _ = load_checkpoint(args.checkpoint)
        except (FileNotFoundError, CheckpointError, KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read checkpoint: {exc}") from exc
        _check_dims(params, grid)
        x = forward(params, loads).as_array()
    else:
        x = 0.5 * (grid.index.x_lower + grid.index.x_upper)
    state = solve_with_fallback(grid, x, loads, None)
    cv = constraint_values(state, grid, x, loads)
    cost, _ = generation_cost(state, grid, x, loads)
    report = {
        "case": path.stem,
        "dispatch": Dispatch.from_array(x, grid.index).as_array().tolist(),
        "v": state.v.tolist(),
        "theta": state.theta.tolist(),
        "cost": cost,
        "max_slack": float(cv.slack.max(initial=-np.inf)),
        "violated": [lab for lab, s in zip(cv.labels, cv.slack) if s > 0],
    }
    out = _out_dir(args)
    man = RunManifest("pf", {}, str(path), digest, 0, _now(), outputs=["pf.json"])
    (out / "pf.json").write_text(json.dumps(report, indent=1) + "\n")
    _append_manifest(out, man)
    print(f"{path.stem}: cost {cost:.2f}, max slack {report['max_slack']:.3g}, "
          f"{len(report['violated'])} violated rows")
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--case", help="MATPOWER case file or bundled case name")
    common.add_argument("--config", help="JSON file with TrainConfig fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    common.add_argument("--mode", choices=["full", "agc"])
    common.add_argument("--alpha", type=float)
    common.add_argument("--epochs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="dnnsopf", description="Chance-constrained OPF policies trained by SPD.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common], help="train a dispatch policy")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", parents=[common], help="evaluate a policy on the seeded test split")
    p.add_argument("--checkpoint")
    p.add_argument("--policy", choices=["dnn", "baseline"], default="dnn")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("compare", parents=[common], help="tabulate metrics files side by side")
    p.add_argument("metrics", nargs="*")
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("pf", parents=[common], help="one power flow at nominal loads")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_pf)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command in ("train", "eval", "pf") and not args.case:
        ap.error("--case is required")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, PowerFlowDivergence) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
