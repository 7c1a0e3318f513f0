"""
Command-line entry point: ``fedlab run | compare | grid | bounds``.

Exit codes are 0 on success, 1 for invalid configs or arguments, 2 for
runtime failures and 3 for I/O errors.
"""

import argparse
import csv
import glob
import json
import logging
import os
import subprocess
import sys
import uuid
from datetime import datetime, timezone
from typing import List, Optional, Sequence

import fedlab
from fedlab.analysis import (
    MajorityQuery,
    consistency_stat,
    danger_zone_scan,
    majority_report,
    consistency_holds,
)
from fedlab.config import ExperimentConfig, read_yaml
from fedlab.errors import (
    ComparabilityError,
    ConfigError,
    FedLabError,
    InvalidInputError,
)
from fedlab.federation import run_experiment
from fedlab.log import configure_logging
from fedlab.records import CsvRoundSink, write_json_atomic
from fedlab.units import Stopwatch

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3

MERGED_COLUMNS = ("round", "defense", "mta", "asr", "excluded_count")
GRID_COLUMNS = (
    "config_id",
    "lr",
    "batch_size",
    "epochs",
    "mta",
    "asr",
    "danger_zone",
    "lambda",
    "tau",
    "error",
)
CONFIG_PATTERNS = ("*.yaml", "*.yml", "*.json")


class UsageError(FedLabError):
    """Bad command-line arguments"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def git_hash() -> Optional[str]:
    """Commit of the source tree fedlab runs from, if it is a git checkout"""
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    if out.returncode != 0:
        return None
    return out.stdout.strip() or None


class Manifest:
    """Completion marker of an output directory, written last"""

    FILENAME = "manifest.json"

    def __init__(self, out_dir: str, command: str, config: Optional[dict], seed):
        self._out = out_dir
        self._files: List[str] = []
        self._watch = Stopwatch()
        self._data = {
            "run_id": str(uuid.uuid4()),
            "command": command,
            "version": fedlab.__version__,
            "git_hash": git_hash(),
            "seed": seed,
            "config": config,
            "started": _now(),
        }
        stale = os.path.join(out_dir, self.FILENAME)
        if os.path.exists(stale):
            os.remove(stale)

    def path(self, name: str) -> str:
        self._files.append(name)
        return os.path.join(self._out, name)

    def write(self) -> str:
        self._files.append(self.FILENAME)
        self._data.update(
            finished=_now(),
            duration_ms=self._watch.elapsed_ms,
            files=list(self._files),
        )
        target = os.path.join(self._out, self.FILENAME)
        write_json_atomic(target, self._data)
        return target


def cmd_run(config: str, out: str, seed: Optional[int] = None) -> int:
    """Run one experiment into `out`: rounds.csv, summary.json, manifest.json"""
    cfg = read_yaml(config, seed=seed)
    os.makedirs(out, exist_ok=True)
    manifest = Manifest(out, "run", cfg.to_dict(), cfg.seed)
    with CsvRoundSink(manifest.path("rounds.csv")) as sink:
        records = run_experiment(cfg, sink=sink)
    write_json_atomic(manifest.path("summary.json"), summarise(cfg, records))
    manifest.write()
    return EXIT_OK


def summarise(cfg: ExperimentConfig, records) -> dict:
    lam, tau = cfg.analysis.lam, cfg.analysis.tau
    worst, size = consistency_stat(records, lam)
    last = records[-1] if records else None
    return {
        "name": cfg.name,
        "defense": cfg.defense.name,
        "rounds": len(records),
        "final_mta": None if last is None else last.mta,
        "final_asr": None if last is None else last.asr,
        "min_asr_over_k": worst,
        "k_size": size,
        "lambda": lam,
        "tau": tau,
        "consistency_holds": consistency_holds(records, lam, tau),
        "malicious_majority_rounds": sum(1 for r in records if r.malicious_majority),
        "aborted_rounds": [r.round for r in records if r.error],
        "timing_ms": [r.timing_ms for r in records],
        "config": cfg.to_dict(),
        "git_hash": git_hash(),
    }


def _config_files(directory: str) -> List[str]:
    files = set()
    for pattern in CONFIG_PATTERNS:
        files.update(glob.glob(os.path.join(directory, pattern)))
    return sorted(files)


def check_comparable(configs: Sequence[ExperimentConfig], names: Sequence[str]) -> None:
    """Refuse configs that differ anywhere but in their defense block"""
    reference = configs[0].comparison_key()
    for cfg, name in zip(configs[1:], names[1:]):
        key = cfg.comparison_key()
        if key != reference:
            sections = sorted(k for k in key if key[k] != reference.get(k))
            raise ComparabilityError(
                "{} differs from {} outside the defense block: {}".format(
                    name, names[0], ", ".join(sections)
                )
            )


def cmd_compare(configs: str, out: str, seed: Optional[int] = None) -> int:
    """Run every config in a directory on a shared seed into one merged.csv"""
    files = _config_files(configs)
    if len(files) < 2:
        raise InvalidInputError("{} holds fewer than 2 configs".format(configs))
    loaded = [read_yaml(f, seed=seed) for f in files]
    check_comparable(loaded, files)

    os.makedirs(out, exist_ok=True)
    manifest = Manifest(
        out, "compare", {os.path.basename(f): c.to_dict() for f, c in zip(files, loaded)}, loaded[0].seed
    )
    summaries = []
    with open(manifest.path("merged.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MERGED_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for cfg in loaded:
            records = run_experiment(cfg)
            for r in records:
                writer.writerow(
                    {
                        "round": r.round,
                        "defense": cfg.defense.name,
                        "mta": repr(r.mta),
                        "asr": "" if r.asr is None else repr(r.asr),
                        "excluded_count": len(r.excluded),
                    }
                )
            f.flush()
            summary = summarise(cfg, records)
            del summary["config"]
            summaries.append(summary)
    write_json_atomic(manifest.path("summary.json"), {"runs": summaries})
    manifest.write()
    return EXIT_OK


def _cell_runner(out: str):
    """Grid runner that reuses finished cells from ``cells/<id>/cell.json``"""

    def run(cell_id: str, cfg: ExperimentConfig):
        cell_dir = os.path.join(out, "cells", cell_id)
        marker = os.path.join(cell_dir, "cell.json")
        key = json.loads(json.dumps(cfg.to_dict()))
        if os.path.exists(marker):
            with open(marker) as f:
                done = json.load(f)
            if done.get("config") == key:
                logger.info("grid cell %s already finished, skipping", cell_id)
                return done["mta"], done["asr"]
        os.makedirs(cell_dir, exist_ok=True)
        records = run_experiment(cfg)
        if not records:
            raise InvalidInputError("no rounds were run")
        last = records[-1]
        write_json_atomic(marker, {"config": key, "mta": last.mta, "asr": last.asr})
        return last.mta, last.asr

    return run


def cmd_grid(config: str, out: str, jobs: int = 1, seed: Optional[int] = None) -> int:
    """Danger-zone scan over the config's learning-configuration grid"""
    if jobs < 1:
        raise UsageError("--jobs must be positive")
    cfg = read_yaml(config, seed=seed)
    os.makedirs(out, exist_ok=True)
    manifest = Manifest(out, "grid", cfg.to_dict(), cfg.seed)
    report = danger_zone_scan(
        cfg.analysis.grid(),
        None,
        cfg,
        lam=cfg.analysis.lam,
        tau=cfg.analysis.tau,
        jobs=jobs,
        runner=_cell_runner(out),
    )
    with open(manifest.path("danger_zones.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=GRID_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(report.rows())
    write_json_atomic(
        manifest.path("summary.json"),
        {
            "lambda": report.lam,
            "tau": report.tau,
            "zones": [c.config_id for c in report.zones],
            "ranked_by_asr": [c.config_id for c in report.ranked_zones()],
            "failed": [c.config_id for c in report.cells if c.error],
        },
    )
    manifest.write()
    return EXIT_OK


def cmd_bounds(rho: float, clients: int, sampled: int) -> int:
    """Print the four malicious-majority probabilities as one JSON object"""
    try:
        query = MajorityQuery(rho, sampled, clients)
    except (InvalidInputError, TypeError) as exc:
        raise UsageError(str(exc) or "invalid bounds arguments")
    print(json.dumps(majority_report(query)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedlab", description="federated backdoor attack/defense lab")
    parser.add_argument("--version", action="version", version=fedlab.__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int)

    compare = sub.add_parser("compare", help="compare defenses on a shared seed")
    compare.add_argument("--configs", required=True, help="directory of configs")
    compare.add_argument("--out", required=True)
    compare.add_argument("--seed", type=int)

    grid = sub.add_parser("grid", help="danger-zone scan over learning configurations")
    grid.add_argument("--config", required=True)
    grid.add_argument("--out", required=True)
    grid.add_argument("--jobs", type=int, default=1)
    grid.add_argument("--seed", type=int)

    bounds = sub.add_parser("bounds", help="malicious-majority probabilities")
    bounds.add_argument("--rho", type=float, required=True)
    bounds.add_argument("--clients", type=int, required=True, help="N")
    bounds.add_argument("--sampled", type=int, required=True, help="C")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed)
        if args.command == "compare":
            return cmd_compare(args.configs, args.out, args.seed)
        if args.command == "grid":
            return cmd_grid(args.config, args.out, args.jobs, args.seed)
        return cmd_bounds(args.rho, args.clients, args.sampled)
    except (ConfigError, InvalidInputError, ComparabilityError, UsageError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    except Exception as exc:
        logger.exception("run failed: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
