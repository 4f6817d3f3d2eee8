"""Batch runner: one simulation per seed, per-run and mean-aggregate outputs.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .config import ConfigError, ScenarioConfig, load_config
from .metrics import export, export_aggregate, load_run
from .sim import run

log = logging.getLogger("cv2xsim")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


@dataclass
class CliInvocation:
    config_path: str | None
    output_dir: str
    seeds: list[int]
    runs: int = 5
    overrides: list[str] = field(default_factory=list)
    workers: int = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cv2xsim", description=__doc__.splitlines()[0])
    p.add_argument("-c", "--config", help="scenario file (YAML or JSON mapping of config keys)")
    p.add_argument("-o", "--output", default="results", help="output directory")
    p.add_argument("--seeds", type=int, nargs="+", help="explicit seed list (overrides --runs)")
    p.add_argument("--runs", type=int, default=5, help="number of runs, seeds 1..runs")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("-O", "--override", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_and_validate(argv: list[str]) -> tuple[CliInvocation, ScenarioConfig]:
    args = build_parser().parse_args(argv)
    if args.runs < 1:
        raise ConfigError("--runs must be >= 1")
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    seeds = list(args.seeds) if args.seeds else list(range(1, args.runs + 1))
    inv = CliInvocation(config_path=args.config, output_dir=args.output, seeds=seeds,
                        runs=len(seeds), overrides=list(args.override), workers=args.workers)
    cfg = load_config(args.config, args.override)
    return inv, cfg


def _run_one(cfg_dict: dict, out_dir: str) -> dict:
    cfg = ScenarioConfig.from_dict(cfg_dict)
    metrics = run(cfg)
    manifest = {"config": cfg.to_dict(), "seed": cfg.seed, "version": __version__,
                "status": "ok"}
    export(metrics, out_dir, manifest)
    return {"seed": cfg.seed, "dir": out_dir, "status": "ok"}


def run_batch(inv: CliInvocation, cfg: ScenarioConfig) -> int:
    out = Path(inv.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for seed in inv.seeds:
        cfg_s = dataclasses.replace(cfg, seed=seed).to_dict()
        jobs.append((cfg_s, str(out / f"run_seed{seed}")))

    results = []
    if inv.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=inv.workers) as pool:
            futures = [pool.submit(_run_one, *job) for job in jobs]
            for (cfg_s, d), fut in zip(jobs, futures):
                try:
                    results.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - reported in manifest
                    results.append({"seed": cfg_s["seed"], "dir": d, "status": f"failed: {exc}"})
    else:
        for cfg_s, d in jobs:
            try:
                results.append(_run_one(cfg_s, d))
            except Exception as exc:  # noqa: BLE001
                log.exception("run for seed %s failed", cfg_s["seed"])
                results.append({"seed": cfg_s["seed"], "dir": d, "status": f"failed: {exc}"})

    ok = [r for r in results if r["status"] == "ok"]
    partial = len(ok) != len(results)
    batch = {"config": cfg.to_dict(), "seeds": inv.seeds, "version": __version__,
             "runs": [{"seed": r["seed"], "dir": Path(r["dir"]).name, "status": r["status"]}
                      for r in results],
             "partial": partial}
    if ok:
        export_aggregate([load_run(r["dir"]) for r in ok], out / "aggregate",
                         {"seeds": [r["seed"] for r in ok], "version": __version__,
                          "partial": partial})
    (out / "manifest.json").write_text(json.dumps(batch, indent=2, sort_keys=True) + "\n")
    return EXIT_RUNTIME if partial else EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        inv, cfg = parse_and_validate(argv)
    except ConfigError as exc:
        print(f"cv2xsim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run_batch(inv, cfg)
    except Exception as exc:  # noqa: BLE001
        print(f"cv2xsim: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
