"""``curionav`` command line: train, eval, plot and map utilities.

Exit codes: 0 ok, 1 unexpected failure, 2 missing or invalid input,
3 snapshot unreadable or not matching the network, 4 malformed data.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .autodiff import ShapeError
from .config import PRESET_NAMES, ConfigError, RunConfig, format_config, load_config, load_preset
from .evalbench import (RESULT_COLUMNS, SUMMARY_COLUMNS, build_suite, results_rows, run_eval, summary_row,
                        write_csv)
from .geometry import MapFormatError, bundled_maps, load_map, render_ascii, resolve_map_path
from .optim import SnapshotError, read_snapshot
from .policy import ActorCritic, NetworkConfig
from .trainer import METRICS_COLUMNS, train

log = logging.getLogger("curionav")

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_SNAPSHOT, EXIT_DATA = 0, 1, 2, 3, 4
WORKERS_ENV = "CURIONAV_WORKERS"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json_atomic(path: Path, obj) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


@dataclass
class RunManifest:
    config: dict
    map_name: str
    map_sha256: str
    seed: int
    workers: int
    started: str
    finished: str | None = None
    status: str = "running"
    iterations: int | None = None
    artifacts: dict = field(default_factory=dict)

    def write(self, path: Path) -> None:
        _write_json_atomic(path, self.__dict__)


# -- input resolution ---------------------------------------------------------------

def _config(arg: str) -> RunConfig:
    """A preset name or a path to a config file."""
    if arg in PRESET_NAMES and not Path(arg).exists():
        return load_preset(arg)
    p = Path(arg)
    if not p.is_file():
        raise CliError(f"config not found: {p}", EXIT_INPUT)
    try:
        return load_config(p)
    except ConfigError as exc:
        raise CliError(f"{p}: {exc}", EXIT_INPUT) from None


def _map_path(arg: str) -> Path:
    try:
        return resolve_map_path(arg)
    except FileNotFoundError:
        raise CliError(f"map not found: {arg}", EXIT_INPUT) from None


def _load_map(path: Path):
    try:
        return load_map(path)
    except MapFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_DATA) from None


def _workers(arg: int | None, cfg: RunConfig) -> int:
    if arg is not None:
        return arg
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise CliError(f"{WORKERS_ENV} must be an integer, got {env!r}", EXIT_INPUT) from None
        if n < 1:
            raise CliError(f"{WORKERS_ENV} must be >= 1", EXIT_INPUT)
        return n
    return cfg.trainer.workers


# -- commands ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args.config)
    map_path = _map_path(args.map)
    m = _load_map(map_path)
    overrides = {}
    if args.iterations is not None:
        overrides["total_iterations"] = args.iterations
    if args.seed is not None:
        overrides["seed"] = args.seed
    workers = _workers(args.workers, cfg)
    overrides["workers"] = workers
    try:
        cfg = cfg.replace(trainer=overrides)
    except (ConfigError, ValueError) as exc:
        raise CliError(str(exc), EXIT_INPUT) from None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(format_config(cfg))
    shutil.copyfile(map_path, out / f"{m.name}.map")
    manifest = RunManifest(cfg.to_dict(), m.name, _sha256(map_path), cfg.trainer.seed, workers, _now(),
                           artifacts={"config": "config.cfg", "map": f"{m.name}.map"})
    manifest.write(out / "manifest.json")

    try:
        result = train(cfg, m, out_dir=out)
    except BaseException:
        manifest.status, manifest.finished = "failed", _now()
        manifest.write(out / "manifest.json")
        raise
    snaps = sorted(p.relative_to(out).as_posix() for p in (out / "snapshots").glob("*.snap"))
    manifest.artifacts.update({"metrics": "metrics.csv", "final_snapshot": "final.snap", "snapshots": snaps})
    manifest.status, manifest.finished, manifest.iterations = "completed", _now(), result.iterations
    manifest.write(out / "manifest.json")
    print(f"trained {result.iterations} iterations in {result.wall_seconds:.1f} s -> {out}")
    return EXIT_OK


def _snapshot(path: str):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"snapshot not found: {p}", EXIT_INPUT)
    try:
        return read_snapshot(p)
    except SnapshotError as exc:
        raise CliError(f"{p}: {exc}", EXIT_SNAPSHOT) from None


def _network_for(meta: dict, config_arg: str | None) -> tuple[NetworkConfig, str]:
    if config_arg is not None:
        cfg = _config(config_arg)
        return cfg.network, cfg.name
    stored = meta.get("config")
    if not stored:
        return NetworkConfig(), "snapshot"
    def tupled(v):
        return tuple(tupled(x) for x in v) if isinstance(v, list) else v

    try:
        net = NetworkConfig(**{k: tupled(v) for k, v in stored["network"].items()})
    except (TypeError, KeyError) as exc:
        raise CliError(f"snapshot metadata has no usable network config: {exc}", EXIT_SNAPSHOT) from None
    return net, stored.get("name", "snapshot")


def cmd_eval(args) -> int:
    params, meta = _snapshot(args.snapshot)
    network, label = _network_for(meta, args.config)
    label = args.label or label
    try:
        ActorCritic(network, params)
    except ShapeError as exc:
        raise CliError(f"snapshot does not match the network: {exc}", EXIT_SNAPSHOT) from None
    maps = [_map_path(a) for a in args.map]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summaries = []
    for path in maps:
        m = _load_map(path)
        suite = build_suite(m, args.seed, args.episodes, args.max_steps)
        res = run_eval(params, suite, greedy=not args.stochastic, network=network, seed=args.seed)
        write_csv(out / f"episodes_{m.name}.csv", RESULT_COLUMNS, results_rows(m.name, label, res))
        summaries.append(summary_row(m.name, label, res))
        print(f"{m.name}: success {res.success_ratio:.1f}%  steps {res.steps_mean:.1f}±{res.steps_std:.1f}")
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, summaries)
    return EXIT_OK


def read_metrics(path: Path) -> list[dict]:
    """Rows of a metrics CSV as floats; malformed content raises CliError(EXIT_DATA)."""
    if not path.is_file():
        raise CliError(f"metrics file not found: {path}", EXIT_INPUT)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CliError(f"{path}: empty file", EXIT_DATA)
        if tuple(header) != METRICS_COLUMNS:
            raise CliError(f"{path}: row 1: expected header {','.join(METRICS_COLUMNS)}", EXIT_DATA)
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(METRICS_COLUMNS):
                raise CliError(f"{path}: row {lineno}: expected {len(METRICS_COLUMNS)} fields, got {len(rec)}",
                               EXIT_DATA)
            try:
                values = [float(v) for v in rec]
            except ValueError:
                raise CliError(f"{path}: row {lineno}: non-numeric value", EXIT_DATA) from None
            if not all(math.isfinite(v) for v in values):
                raise CliError(f"{path}: row {lineno}: non-finite value", EXIT_DATA)
            rows.append(dict(zip(METRICS_COLUMNS, values)))
    if not rows:
        raise CliError(f"{path}: no data rows", EXIT_DATA)
    return rows


def _label_for(path: Path) -> str:
    """Configuration label: the run's manifest name if present, else the parent directory."""
    manifest = path.parent / "manifest.json"
    if manifest.is_file():
        try:
            return json.loads(manifest.read_text())["config"]["name"]
        except (ValueError, KeyError, TypeError):
            pass
    return path.parent.name or path.stem


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    groups: dict[str, list[list[dict]]] = {}
    labels = args.label or []
    if labels and len(labels) != len(args.metrics):
        raise CliError("--label must be given once per metrics file", EXIT_INPUT)
    for i, name in enumerate(args.metrics):
        path = Path(name)
        rows = read_metrics(path)
        groups.setdefault(labels[i] if labels else _label_for(path), []).append(rows)

    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for (label, runs), color in zip(sorted(groups.items()), plt.rcParams["axes.prop_cycle"].by_key()["color"] * 10):
        n = min(len(r) for r in runs)
        x = np.array([r["iteration"] for r in runs[0][:n]])
        for ax, key in zip(axes, ("avg_reward", "avg_steps")):
            y = np.array([[r[key] for r in run[:n]] for run in runs])
            ax.plot(x, y.mean(axis=0), color=color, label=f"{label} (n={len(runs)})")
            if len(runs) > 1:
                ax.fill_between(x, y.min(axis=0), y.max(axis=0), color=color, alpha=0.2)
    for ax, title in zip(axes, ("average reward", "average steps")):
        ax.set_xlabel("iteration")
        ax.set_title(title)
        ax.grid(alpha=0.3)
    axes[0].legend()
    fig.tight_layout()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out)
    plt.close(fig)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_maps_validate(args) -> int:
    names = args.maps or bundled_maps()
    bad = 0
    for name in names:
        path = _map_path(name)
        try:
            m = load_map(path)
        except MapFormatError as exc:
            print(f"{path}: INVALID: {exc}")
            bad += 1
            continue
        print(f"{path}: ok ({m.width} x {m.height} m, {len(m.segments)} segments)")
    return EXIT_DATA if bad else EXIT_OK


def cmd_maps_render(args) -> int:
    m = _load_map(_map_path(args.map))
    print(render_ascii(m, cell=args.cell, clearance=args.clearance), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="curionav", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an agent on one map")
    t.add_argument("config", help=f"config file or preset ({', '.join(PRESET_NAMES)})")
    t.add_argument("map", help="map file or bundled map name")
    t.add_argument("out", help="run directory (created)")
    t.add_argument("--iterations", type=int, help="override total environment steps")
    t.add_argument("--seed", type=int, help="override the trainer seed")
    t.add_argument("--workers", type=int, help=f"worker threads (default: ${WORKERS_ENV} or the config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a snapshot on fixed episode suites")
    e.add_argument("snapshot")
    e.add_argument("map", nargs="+", help="one or more maps")
    e.add_argument("--out", required=True, help="directory for episodes_<map>.csv and summary.csv")
    e.add_argument("--seed", type=int, default=0, help="suite seed (default 0)")
    e.add_argument("--episodes", type=int, default=300)
    e.add_argument("--max-steps", type=int, default=400)
    e.add_argument("--config", help="config whose network to use (default: stored in the snapshot)")
    e.add_argument("--label", help="configuration label for the CSVs")
    e.add_argument("--stochastic", action="store_true", help="sample actions instead of taking the argmax")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="plot reward/steps curves from metrics CSVs")
    pl.add_argument("metrics", nargs="+", help="metrics.csv files; runs sharing a label are banded")
    pl.add_argument("--out", required=True, help="image path (format from extension)")
    pl.add_argument("--label", action="append", help="label per metrics file, in order")
    pl.set_defaults(func=cmd_plot)

    mp = sub.add_parser("maps", help="floorplan utilities")
    msub = mp.add_subparsers(dest="maps_command", required=True)
    v = msub.add_parser("validate", help="parse and check maps (default: all bundled)")
    v.add_argument("maps", nargs="*")
    v.set_defaults(func=cmd_maps_validate)
    r = msub.add_parser("render", help="ASCII dump of a floorplan")
    r.add_argument("map")
    r.add_argument("--cell", type=float, default=0.1, help="cell size in metres")
    r.add_argument("--clearance", type=float, help="also mark cells closer than this to a wall")
    r.set_defaults(func=cmd_maps_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"curionav: {exc}", file=sys.stderr)
        return exc.code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
