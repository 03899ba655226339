"""Command-line entry point: ``ginn {impute,inject,extend,benchmark}``.

Exit codes: 0 on success, 1 on a processing error (bad data, schema or
checkpoint mismatch, divergence), 2 on invalid arguments.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import evalkit
from .errors import ConfigurationError, GinnError, SchemaError
from .model import VARIANTS, GinnConfig, load_checkpoint, save_checkpoint
from .simgraph import DEFAULT_PERCENTILE, build_graph, extend_graph, identity_graph
from .tabular import (
    Dataset,
    SpecConfig,
    Split,
    attach_labels,
    concat,
    inject_mcar,
    injected_mask,
    load_csv,
    read_table,
    write_csv,
    write_table,
)
from .trainer import TrainConfig, fit_impute, impute_unseen

PROG = "ginn"


class UsageError(Exception):
    """Invalid arguments detected after parsing (exit code 2)."""


@dataclass(frozen=True)
class RunConfig:
    ginn: GinnConfig
    train: TrainConfig
    percentile: float = DEFAULT_PERCENTILE
    include_labels: bool = True


def load_run_config(path, seed: int | None = None) -> RunConfig:
    """Flat JSON object whose keys are GinnConfig/TrainConfig fields plus
    ``percentile`` and ``include_labels``."""
    raw = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: expected a JSON object")
    g_keys, t_keys = set(GinnConfig.field_names()), set(TrainConfig.field_names())
    unknown = sorted(set(raw) - g_keys - t_keys - {"percentile", "include_labels"})
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    try:
        ginn = GinnConfig(**{k: v for k, v in raw.items() if k in g_keys})
        train = TrainConfig(**{k: v for k, v in raw.items() if k in t_keys})
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid config: {exc}") from None
    if seed is not None:
        train = replace(train, seed=seed)
    return RunConfig(
        ginn,
        train,
        float(raw.get("percentile", DEFAULT_PERCENTILE)),
        bool(raw.get("include_labels", True)),
    )


def _with_labels(ds: Dataset, observed: bool = True) -> Dataset:
    if ds.labels is None:
        return ds
    return attach_labels(ds, None if observed else Split(np.arange(0), np.arange(ds.n)))


def _missing_token(config: SpecConfig) -> str:
    return next((t for t in config.missing_tokens if t), config.missing_tokens[0] if config.missing_tokens else "NA")


# ---------------------------------------------------------------------------
# commands


def cmd_impute(args) -> int:
    run = load_run_config(args.config, args.seed)
    ds = _with_labels(load_csv(args.input, args.spec))
    model, _, result = fit_impute(
        ds, run.ginn, run.train, run.percentile, run.include_labels, log_path=args.log
    )
    write_csv(args.output, ds, result.X_imp)
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint)
    return 0


def cmd_inject(args) -> int:
    config = SpecConfig.load(args.spec)
    header, rows = read_table(args.input)
    ds = load_csv(args.input, config)
    col = {name: j for j, name in enumerate(header)}
    if args.from_mask:
        m_header, m_rows = read_table(args.from_mask)
        if m_header != header or len(m_rows) != len(rows):
            raise SchemaError("mask file does not match the input's header and row count")
        cells = np.array([[v.strip() == "1" for v in r] for r in m_rows], dtype=bool)
        observed = np.array([[v not in config.missing_tokens for v in r] for r in rows], dtype=bool)
        if (cells & ~observed).any():
            raise SchemaError("mask marks cells that are already missing in the input")
    else:
        inj = injected_mask(ds, inject_mcar(ds, args.fraction, args.seed))
        cells = np.zeros((len(rows), len(header)), dtype=bool)
        for s in ds.feature_specs:
            cells[:, col[s.name]] = inj[:, s.start] == 1
    token = _missing_token(config)
    damaged = [[token if cells[i, j] else v for j, v in enumerate(r)] for i, r in enumerate(rows)]
    write_table(args.output, header, damaged)
    if args.mask_output:
        write_table(args.mask_output, header, [["1" if c else "0" for c in r] for r in cells])
    return 0


def cmd_extend(args) -> int:
    run = load_run_config(args.config, args.seed)
    _, new_rows = read_table(args.new)
    if not new_rows:
        raise UsageError(f"--new file {args.new} has no data rows")
    model = load_checkpoint(args.checkpoint, run.ginn)
    train = load_csv(args.train, args.spec)
    old = _with_labels(train)
    new = _with_labels(load_csv(args.new, args.spec, reference=train), observed=False)
    if model.d != old.d:
        raise SchemaError(f"checkpoint expects {model.d} columns, training data encodes to {old.d}")
    if model.config.identity_adjacency:
        g_ext = identity_graph(old.n + new.n)
    else:
        g = build_graph(old, run.percentile, include_labels=run.include_labels)
        g_ext = extend_graph(g, old, new)
    result = impute_unseen(model, g_ext, concat(old, new), args.fine_tune, new.n, run.train)
    write_csv(args.output, new, result.X_imp)
    return 0


def cmd_benchmark(args) -> int:
    run = load_run_config(args.config)
    ds = load_csv(args.input, args.spec)
    report = evalkit.run_benchmark(
        ds,
        args.noise,
        args.methods,
        args.classifiers,
        args.seeds,
        dataset_name=args.name or Path(args.input).stem,
        ginn_config=run.ginn,
        train_config=run.train,
        percentile=run.percentile,
    )
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
    sys.stdout.write(report.format_table())
    return 0


# ---------------------------------------------------------------------------
# parsing


def _open_fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"fraction must lie strictly between 0 and 1, got {v}")
    return v


def _list_of(kind, valid=None):
    def parse(text: str):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        try:
            values = [kind(t) for t in items]
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid list {text!r}") from None
        if valid is not None:
            bad = [v for v in values if v not in valid]
            if bad:
                raise argparse.ArgumentTypeError(
                    f"unknown name(s) {', '.join(bad)}; valid: {', '.join(valid)}"
                )
        return values

    return parse


def _noise_list(text: str) -> list[float]:
    values = _list_of(float)(text)
    for v in values:
        if not 0.0 <= v < 1.0:
            raise argparse.ArgumentTypeError(f"noise level must lie in [0, 1), got {v}")
    return values


def _nonnegative_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description="Graph imputation of incomplete tables.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("impute", help="train on a CSV and write it back with every gap filled")
    p.add_argument("--input", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--log")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("inject", help="remove a random fraction of observed cells (MCAR)")
    p.add_argument("--input", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--mask-output")
    p.add_argument("--seed", type=int, default=0)
    how = p.add_mutually_exclusive_group(required=True)
    how.add_argument("--fraction", type=_open_fraction)
    how.add_argument("--from-mask", help="reapply a mask CSV written by an earlier run")
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("extend", help="impute new rows with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--new", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--fine-tune", type=_nonnegative_int, default=0)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_extend)

    methods = sorted(VARIANTS) + list(evalkit.BASELINE_METHODS)
    p = sub.add_parser("benchmark", help="compare imputers over noise levels and seeds")
    p.add_argument("--input", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--noise", type=_noise_list, default=[0.1, 0.2, 0.3, 0.5])
    p.add_argument("--methods", type=_list_of(str, methods), default=["a-ginn-skip-global", "median", "knn", "mf"])
    p.add_argument("--classifiers", type=_list_of(str, evalkit.CLASSIFIERS), default=list(evalkit.CLASSIFIERS))
    p.add_argument("--seeds", type=_list_of(int), default=[0, 1, 2, 3, 4])
    p.add_argument("--report")
    p.add_argument("--name", help="dataset name in the report (default: input file stem)")
    p.add_argument("--config")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    except (GinnError, OSError, ValueError, ArithmeticError) as exc:
        print(f"{PROG}: error: {exc}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
