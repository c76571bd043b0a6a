"""Experiment runner: sweeps seeds, scenarios, image sizes and scheduler settings.

Every combination is simulated independently; traces go to
``trace_<seed>_<scenario>_<size>_r<regions>_<mode>_<p|np>.json`` and per-priority
statistics to ``results.csv`` in the output directory.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .fabric import TimingModel
from .metrics import export_csv, export_gantt, stats_rows
from .scheduler import MODES, SchedulerConfig, simulate
from .workload import STUDY_SEEDS, SCENARIOS, WorkloadSpec, generate_workload, load_workload

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2

CONFIG_KEYS = {"seeds", "scenario", "T", "sizes", "tasks", "regions", "mode", "preemption",
               "timing", "out", "replay", "functional", "jobs"}


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...] = STUDY_SEEDS
    scenarios: tuple[str, ...] = ("busy",)
    T: Optional[float] = None  # explicit window in minutes, replaces scenarios
    sizes: tuple[int, ...] = (200, 300, 400, 500, 600)
    n_tasks: int = 30
    regions: tuple[int, ...] = (2,)
    modes: tuple[str, ...] = ("partial",)
    preemption: tuple[bool, ...] = (True,)
    timing: TimingModel = field(default_factory=TimingModel)
    out: Path = Path("results")
    replay: Optional[Path] = None
    functional: bool = True
    jobs: int = 1

    def __post_init__(self):
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise UsageError(f"unknown scenario {s!r}; expected one of {sorted(SCENARIOS)}")
        for m in self.modes:
            if m not in MODES:
                raise UsageError(f"unknown mode {m!r}; expected one of {MODES}")
        if not self.seeds:
            raise UsageError("at least one seed is required")
        if any(s < 0 or s > 0xFFFFFFFF for s in self.seeds):
            raise UsageError("seeds must be 32-bit unsigned integers")
        if any(n < 8 for n in self.sizes):
            raise UsageError("image sizes must be at least 8")
        if any(r < 1 for r in self.regions):
            raise UsageError("region counts must be at least 1")
        if self.n_tasks < 1:
            raise UsageError("tasks must be at least 1")
        if self.T is not None and not self.T > 0:
            raise UsageError("T must be positive")
        if self.jobs < 1:
            raise UsageError("jobs must be at least 1")

    def windows(self) -> list[tuple[str, float]]:
        if self.T is not None:
            return [(f"T{self.T:g}", self.T)]
        return [(s, SCENARIOS[s]) for s in self.scenarios]


@dataclass(frozen=True)
class Run:
    seed: int
    scenario: str
    T: float
    size: int
    regions: int
    mode: str
    preemption: bool

    @property
    def key(self) -> dict:
        return {"seed": self.seed, "scenario": self.scenario, "regions": self.regions,
                "mode": self.mode, "preemption": "on" if self.preemption else "off",
                "size": self.size}

    @property
    def trace_name(self) -> str:
        flag = "p" if self.preemption else "np"
        return (f"trace_{self.seed}_{self.scenario}_{self.size}_r{self.regions}"
                f"_{self.mode}_{flag}.json")


def expand_runs(cfg: ExperimentConfig) -> list[Run]:
    """All combinations in the deterministic order used for output."""
    if cfg.replay is not None:
        tasks = load_workload(cfg.replay)
        sizes = sorted({t.size for t in tasks}) or [0]
        combos = itertools.product(cfg.seeds[:1], [("replay", 0.0)], sizes[:1],
                                   cfg.regions, cfg.modes, cfg.preemption)
    else:
        combos = itertools.product(cfg.seeds, cfg.windows(), cfg.sizes,
                                   cfg.regions, cfg.modes, cfg.preemption)
    runs = [Run(seed, scen, T, size, r, m, p) for seed, (scen, T), size, r, m, p in combos]
    return sorted(runs, key=lambda r: (r.seed, r.scenario, r.size, r.regions, r.mode,
                                       not r.preemption))


def run_one(cfg: ExperimentConfig, run: Run) -> tuple[list[dict], str]:
    if cfg.replay is not None:
        tasks = load_workload(cfg.replay, seed=run.seed)
    else:
        spec = WorkloadSpec(n_tasks=cfg.n_tasks, T=run.T, image_size=run.size)
        tasks = generate_workload(spec, run.seed)
    sched = SchedulerConfig(mode=run.mode, preemption=run.preemption, n_regions=run.regions)
    result = simulate(tasks, sched, cfg.timing, functional=cfg.functional)
    return stats_rows(run.key, result.stats()), export_gantt(result.trace)


def _run_star(args):
    return run_one(*args)


def run_experiment(cfg: ExperimentConfig) -> list[dict]:
    """Simulate every combination, write traces and ``results.csv``; return the rows."""
    runs = expand_runs(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    work = [(cfg, r) for r in runs]
    if cfg.jobs > 1 and len(runs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            outputs = list(pool.map(_run_star, work))
    else:
        outputs = [run_one(c, r) for c, r in work]
    rows = []
    for run, (run_rows, gantt) in zip(runs, outputs):
        (cfg.out / run.trace_name).write_text(gantt + "\n", encoding="utf-8")
        rows.extend(run_rows)
        log.info("%s done", run.trace_name)
    (cfg.out / "results.csv").write_text(export_csv(rows), encoding="utf-8")
    return rows


# -- argument handling -----------------------------------------------------------

def _as_tuple(value, conv):
    if isinstance(value, (list, tuple)):
        return tuple(conv(v) for v in value)
    return (conv(value),)


def _on_off(value) -> bool:
    if isinstance(value, bool):
        return value
    if value in ("on", "true", "yes", "1"):
        return True
    if value in ("off", "false", "no", "0"):
        return False
    raise UsageError(f"preemption must be on or off, got {value!r}")


def _from_mapping(data: dict) -> dict:
    unknown = set(data) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    conv = {
        "seeds": lambda v: _as_tuple(v, int),
        "scenario": lambda v: _as_tuple(v, str),
        "sizes": lambda v: _as_tuple(v, int),
        "regions": lambda v: _as_tuple(v, int),
        "mode": lambda v: _as_tuple(v, str),
        "preemption": lambda v: _as_tuple(v, _on_off),
        "T": float,
        "tasks": int,
        "out": Path,
        "replay": Path,
        "functional": bool,
        "jobs": int,
    }
    names = {"scenario": "scenarios", "mode": "modes", "tasks": "n_tasks"}
    for key, value in data.items():
        if value is None:
            continue
        if key == "timing":
            try:
                out["timing"] = TimingModel.from_dict(value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad timing config: {exc}") from None
            continue
        try:
            out[names.get(key, key)] = conv[key](value)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prsched", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="JSON file with experiment settings")
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--scenario", nargs="+", choices=sorted(SCENARIOS))
    p.add_argument("--T", type=float, help="explicit arrival window in minutes")
    p.add_argument("--sizes", nargs="+", type=int)
    p.add_argument("--tasks", type=int)
    p.add_argument("--regions", nargs="+", type=int)
    p.add_argument("--mode", nargs="+", choices=MODES)
    p.add_argument("--preemption", nargs="+", choices=("on", "off"))
    p.add_argument("--out", type=Path)
    p.add_argument("--replay", type=Path, help="workload JSON to simulate instead of drawing one")
    p.add_argument("--timing-only", action="store_true",
                   help="skip pixel computation; schedules are identical")
    p.add_argument("--jobs", type=int, help="parallel worker processes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    settings: dict = {}
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        settings.update(_from_mapping(data))
    flags = {k: getattr(args, k) for k in
             ("seeds", "scenario", "T", "sizes", "tasks", "regions", "mode", "preemption",
              "out", "replay", "jobs")}
    settings.update(_from_mapping(flags))
    if args.timing_only:
        settings["functional"] = False
    return ExperimentConfig(**settings)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"prsched: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"prsched: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        rows = run_experiment(cfg)
    except OSError as exc:
        print(f"prsched: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"prsched: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"wrote {len(rows)} rows to {cfg.out / 'results.csv'}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
