"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data or validation error,
3 adapter (external backend) failure. Diagnostics go to standard error;
machine artifacts are written only to declared output paths (reports also
render a PNG figure next to each CSV).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .errors import AdapterFailure, ConfigError, DataError, PtlError
from .gap import DEFAULT_SCALES, MultiScaleFeatures, score_pool
from .gaussian import FeatureSet, FeatureVector, fit_gaussian
from .loop import (
    DEFAULT_DIM,
    DEFAULT_GAMMA,
    DEFAULT_ITERATIONS,
    DEFAULT_RIDGE_SCALE,
    PtlConfig,
    load_state,
    run,
    save_state,
)
from .protocol import (
    CommandBackend,
    canonical_json,
    dump_json,
    load_json,
    model_from_dict,
    model_to_dict,
    read_features,
    write_features,
    write_metadata,
)
from .reports import read_csv, write_csv, write_gap_histogram, write_metadata_spread
from .sampler import DEFAULT_N, DEFAULT_TAU, SamplerConfig, select_candidates, weight
from .synth import (
    GridConfig,
    SimulatedBackends,
    WorldConfig,
    fixed_histogram_edges,
    generate_world,
    regenerate_world,
    report_gap_histogram,
    report_metadata_spread,
    run_synthetic,
)

SCORES_HEADER = ("instance_id", "gap", "argmin_scale")


class _Parser(argparse.ArgumentParser):
    """argparse, but usage problems exit 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _parse_scales(text: str) -> tuple[int, ...]:
    try:
        scales = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"bad scale list {text!r}: {exc}") from exc
    if not scales:
        raise ConfigError("scale list is empty")
    return scales


def _load_config_file(path) -> dict:
    cfg = load_json(path)
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return cfg


def _setting(args, file_cfg: dict, flag: str, key: str, default):
    """Flag wins over config file wins over default."""
    val = getattr(args, flag, None)
    if val is not None:
        return val
    if key in file_cfg:
        return file_cfg[key]
    return default


def build_ptl_config(args, file_cfg: dict) -> PtlConfig:
    scales = _setting(args, file_cfg, "scales", "scales", DEFAULT_SCALES)
    if isinstance(scales, str):
        scales = _parse_scales(scales)
    try:
        return PtlConfig(
            sampler=SamplerConfig(
                tau=float(_setting(args, file_cfg, "tau", "tau", DEFAULT_TAU)),
                n=int(_setting(args, file_cfg, "n", "n", DEFAULT_N)),
                seed=int(_setting(args, file_cfg, "seed", "seed", 0)),
            ),
            scales=tuple(int(s) for s in scales),
            iterations=int(
                _setting(args, file_cfg, "iterations", "iterations", DEFAULT_ITERATIONS)
            ),
            ridge_scale=float(
                _setting(args, file_cfg, "ridge_scale", "ridge_scale", DEFAULT_RIDGE_SCALE)
            ),
            dim=int(_setting(args, file_cfg, "dim", "dim", DEFAULT_DIM)),
            gamma=float(_setting(args, file_cfg, "gamma", "gamma", DEFAULT_GAMMA)),
            category=str(_setting(args, file_cfg, "category", "category", "object")),
            embedder_endpoint=_setting(args, file_cfg, "embedder", "embedder", None),
            transformer_endpoint=_setting(args, file_cfg, "transformer", "transformer", None),
            adapter_timeout=float(
                _setting(args, file_cfg, "adapter_timeout", "adapter_timeout", 3600.0)
            ),
            anchors_path=_setting(args, file_cfg, "anchors", "anchors", None),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


class _SnapshotLock:
    """Exclusive lock file guarding a live run on a state snapshot."""

    def __init__(self, state_path: Path):
        self.path = Path(str(state_path) + ".lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DataError(
                f"snapshot is locked by a live run ({self.path}); "
                "remove the lock file if that run is dead"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        return False


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_fit(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    ridge = float(_setting(args, file_cfg, "ridge_scale", "ridge_scale", DEFAULT_RIDGE_SCALE))
    category = str(_setting(args, file_cfg, "category", "category", "object"))
    _, vectors = read_features(args.features)
    if not vectors:
        from .errors import EmptySet

        raise EmptySet(f"{args.features} holds no feature vectors")
    fs = FeatureSet(category=category, dim=vectors[0].dim, members=vectors)
    model = fit_gaussian(fs, ridge)
    dump_json(args.out, model_to_dict(model))
    return 0


def cmd_gap(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    scales = _setting(args, file_cfg, "scales", "scales", DEFAULT_SCALES)
    if isinstance(scales, str):
        scales = _parse_scales(scales)
    scales = tuple(int(s) for s in scales)

    model = model_from_dict(load_json(args.model))
    pool_dir = Path(args.pool)
    if not pool_dir.is_dir():
        raise DataError(f"{pool_dir} is not a directory")
    by_scale: dict[int, dict[int, FeatureVector]] = {}
    for f in sorted(pool_dir.glob("*.ptlf")):
        scale, vectors = read_features(f)
        if scale in by_scale:
            raise DataError(f"duplicate feature file for scale {scale}: {f}")
        by_scale[scale] = {fv.instance_id: fv for fv in vectors}

    from .errors import MissingScale

    missing = [s for s in scales if s not in by_scale]
    if missing:
        raise MissingScale(f"pool dir lacks feature files for scales {missing}")
    ids = sorted(set().union(*(by_scale[s].keys() for s in scales)))
    pool = []
    for i in ids:
        per_scale = {}
        for s in scales:
            fv = by_scale[s].get(i)
            if fv is None:
                if args.partial_scales:
                    continue
                raise MissingScale(f"instance {i} lacks scale {s}")
            per_scale[s] = fv
        pool.append(MultiScaleFeatures(i, per_scale))
    scores = score_pool(model, pool, scales, strict=not args.partial_scales)
    write_csv(
        args.out,
        SCORES_HEADER,
        [(s.instance_id, float(s.gap), s.argmin_scale) for s in scores],
    )
    return 0


def cmd_select(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    tau = float(_setting(args, file_cfg, "tau", "tau", DEFAULT_TAU))
    n = int(_setting(args, file_cfg, "n", "n", DEFAULT_N))
    seed = int(_setting(args, file_cfg, "seed", "seed", 0))
    if not tau > 0:
        raise ConfigError("tau must be > 0")
    if n < 1:
        raise ConfigError("n must be >= 1")

    header, rows = read_csv(args.scores)
    if tuple(header) != SCORES_HEADER:
        raise DataError(f"{args.scores}: expected header {','.join(SCORES_HEADER)}")
    from .gap import GapScore

    try:
        scores = [GapScore(int(r[0]), float(r[1]), int(r[2])) for r in rows]
    except (ValueError, IndexError) as exc:
        raise DataError(f"{args.scores}: malformed row: {exc}") from exc

    cfg = SamplerConfig(tau=tau, n=n, seed=seed)
    chosen = select_candidates(scores, cfg)
    by_id = {s.instance_id: s for s in scores}
    dump_json(
        args.out,
        {
            "format": "ptl-selection",
            "version": 1,
            "seed": seed,
            "tau": tau,
            "n_requested": n,
            "selected": [
                {
                    "instance_id": i,
                    "gap": by_id[i].gap,
                    "weight": weight(by_id[i].gap, tau),
                    "argmin_scale": by_id[i].argmin_scale,
                }
                for i in chosen
            ],
            "shortfall": len(chosen) < n,
        },
    )
    return 0


def _build_backends(args, cfg: PtlConfig, state, state_path: Path):
    if cfg.embedder_endpoint and cfg.transformer_endpoint:
        workdir = Path(args.workdir) if args.workdir else state_path.parent / "adapters"
        embedder = CommandBackend(cfg.embedder_endpoint, workdir, cfg.adapter_timeout)
        transformer = CommandBackend(cfg.transformer_endpoint, workdir, cfg.adapter_timeout)
        return embedder, transformer
    if cfg.embedder_endpoint or cfg.transformer_endpoint:
        raise ConfigError("--embedder and --transformer must be given together")
    if state.world is None:
        raise ConfigError(
            "state has no synthetic-world provenance; --embedder/--transformer required"
        )
    world = regenerate_world(state.world)
    backends = SimulatedBackends.for_state(world, state)
    return backends, backends


def _cmd_loop(args, iterations_override: int | None) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    cfg = build_ptl_config(args, file_cfg)
    if iterations_override is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, iterations=iterations_override)
    state_path = Path(args.state)
    state = load_state(state_path)
    embedder, transformer = _build_backends(args, cfg, state, state_path)
    with _SnapshotLock(state_path):
        final = run(
            state,
            cfg,
            embedder,
            transformer,
            snapshot_dir=state_path.parent,
        )
        save_state(state_path, final)
    if args.verbose:
        print(
            f"completed {final.iteration} iterations: "
            f"|R|={len(final.real_set)} |V|={len(final.virtual_pool)}"
            + (f" (stopped: {final.stop_reason})" if final.stop_reason else ""),
            file=sys.stderr,
        )
    return 0


def cmd_iterate(args) -> int:
    return _cmd_loop(args, iterations_override=1)


def cmd_run(args) -> int:
    return _cmd_loop(args, iterations_override=None)


def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    cfg = build_ptl_config(args, file_cfg)
    seed = cfg.sampler.seed
    world_cfg = WorldConfig(
        dim=cfg.dim,
        real_count=int(_setting(args, file_cfg, "real_count", "real_count", 50)),
        kappa=float(_setting(args, file_cfg, "kappa", "kappa", WorldConfig().kappa)),
        gamma=cfg.gamma,
        scales=cfg.scales,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    result = run_synthetic(world_cfg, seed, cfg, out_dir=out, bins=args.bins)
    world = result.world
    write_metadata(out / "metadata.csv", [world.metadata[i] for i in world.virtual_ids])
    anchors = [FeatureVector(i, world.real_features[i]) for i in world.real_ids] + [
        FeatureVector(i, world.virtual_anchor[i]) for i in world.virtual_ids
    ]
    write_features(out / "anchors.ptlf", 0, anchors)
    dump_json(
        out / "summary.json",
        {
            "format": "ptl-synth-summary",
            "version": 1,
            "seed": seed,
            "iterations": [
                {
                    "index": r.index,
                    "mean_pool_gap": r.mean_pool_gap,
                    "mean_selected_distance": r.mean_selected_distance,
                    "occupied_cells": r.occupied_cells,
                }
                for r in result.iterations
            ],
        },
    )
    if args.verbose:
        gaps = ", ".join(f"{g:.1f}" for g in result.mean_pool_gaps())
        print(f"mean pool gap by iteration: {gaps}", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    state = load_state(args.state)
    if args.kind == "gap-hist":
        if state.world is None:
            raise DataError("state has no synthetic-world provenance; cannot rescore")
        if state.model is None:
            raise DataError("state has no fitted model; run at least one iteration")
        world = regenerate_world(state.world)
        rows = report_gap_histogram(world, state, state.model, args.bins)
        write_gap_histogram(
            args.out, rows, title=f"domain gap distribution, iteration {state.iteration}"
        )
    elif args.kind == "metadata-spread":
        rows = report_metadata_spread(state)
        write_metadata_spread(
            args.out, rows, title=f"accumulated selections, iteration {state.iteration}"
        )
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown report kind {args.kind!r}")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, help="base RNG seed (default 0)")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--verbose", action="store_true", help="progress diagnostics on stderr")


def build_parser() -> _Parser:
    parser = _Parser(prog="ptl", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("fit", help="fit a Gaussian model on a PTLF feature file")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ridge-scale", dest="ridge_scale", type=float)
    p.add_argument("--category")
    _add_common(p)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("gap", help="score a pool of per-scale PTLF files")
    p.add_argument("--model", required=True)
    p.add_argument("--pool", required=True, help="directory of per-scale .ptlf files")
    p.add_argument("--out", required=True)
    p.add_argument("--scales", help="comma-separated, default 128,256,384,512")
    p.add_argument(
        "--partial-scales",
        action="store_true",
        help="allow instances missing some configured scales",
    )
    _add_common(p)
    p.set_defaults(fn=cmd_gap)

    p = sub.add_parser("select", help="draw weighted candidates from a scores CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_select)

    for name, help_text in (
        ("iterate", "run exactly one loop iteration on a state snapshot"),
        ("run", "run the configured number of loop iterations"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--state", required=True)
        p.add_argument("--embedder", help="embedder backend command")
        p.add_argument("--transformer", help="transformer backend command")
        p.add_argument("--workdir", help="adapter invocation directory")
        p.add_argument("--tau", type=float)
        p.add_argument("--n", type=int)
        p.add_argument("--iterations", type=int)
        p.add_argument("--scales")
        p.add_argument("--ridge-scale", dest="ridge_scale", type=float)
        p.add_argument("--dim", type=int)
        p.add_argument("--gamma", type=float)
        p.add_argument("--anchors")
        _add_common(p)
        p.set_defaults(fn=cmd_iterate if name == "iterate" else cmd_run)

    p = sub.add_parser("synth", help="generate a synthetic world and run the loop")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--real-count", dest="real_count", type=int)
    p.add_argument("--scales")
    p.add_argument("--bins", type=int, default=40)
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("report", help="emit a report CSV (+PNG) from a state snapshot")
    p.add_argument("--state", required=True)
    p.add_argument("--kind", required=True, choices=["gap-hist", "metadata-spread"])
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=40)
    _add_common(p)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as exc:
        print(f"ptl: error: {exc}", file=sys.stderr)
        return 1
    except AdapterFailure as exc:
        print(f"ptl: adapter failure: {exc}", file=sys.stderr)
        if exc.stderr_tail:
            print(exc.stderr_tail, file=sys.stderr)
        return 3
    except (DataError, PtlError) as exc:
        print(f"ptl: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"ptl: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
