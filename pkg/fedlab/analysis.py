"""
Probability of malicious-majority rounds, the MTA / ASR metrics, the
consistency statistic over high-accuracy rounds, and the danger-zone scan
over learning configurations.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, ndtr
from scipy.stats import binom, hypergeom

from fedlab.errors import InvalidInputError
from fedlab.nn.models import Classifier
from fedlab.nn.training import TrainingConfig

logger = logging.getLogger(__name__)

__all__ = [
    "MajorityQuery",
    "GridCell",
    "DangerZoneReport",
    "chernoff_majority_bound",
    "exact_majority_prob",
    "normal_majority_approx",
    "majority_report",
    "mta",
    "asr",
    "consistency_stat",
    "consistency_holds",
    "danger_zone_scan",
]

MODELS = ("binomial", "hypergeometric")


@dataclass(frozen=True)
class MajorityQuery:
    """Malicious ratio `rho` with `C` clients sampled out of `N`

    Parameters
    ----------
    rho : float

    C : int
        clients sampled per round

    N : int, default None
        federation size, needed by the hypergeometric model only

    """

    rho: float
    C: int
    N: Optional[int] = None

    def __post_init__(self):
        if type(self.C) is not int or (self.N is not None and type(self.N) is not int):
            raise TypeError
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidInputError("rho must lie in [0, 1], got {}".format(self.rho))
        if self.C < 1:
            raise InvalidInputError("C must be positive")
        if self.N is not None and self.C > self.N:
            raise InvalidInputError("C={} exceeds N={}".format(self.C, self.N))

    @property
    def threshold(self) -> int:
        """Smallest malicious count that is at least half the sample"""
        return int(math.ceil(self.C / 2))


def chernoff_majority_bound(q: MajorityQuery) -> float:
    """``1 - (4 rho (1 - rho)) ** (C / 2)``, clamped to [0, 1]

    rho of 0 and 1 return 0 and 1 by continuity and are logged.

    Example
    -------
    >>> round(chernoff_majority_bound(MajorityQuery(0.4, 20)), 5)
    0.33517
    """
    if q.rho in (0.0, 1.0):
        logger.info("rho=%g is outside (0, 1), bound set to %g", q.rho, q.rho)
        return float(q.rho)
    value = 1.0 - (4.0 * q.rho * (1.0 - q.rho)) ** (q.C / 2.0)
    return min(1.0, max(0.0, value))


def exact_majority_prob(q: MajorityQuery, model: str = "binomial") -> float:
    """P(M >= C/2) summed exactly over the log-space pmf

    ``binomial`` draws every sampled client malicious with probability rho;
    ``hypergeometric`` draws C of N clients without replacement, round(rho N)
    of them malicious.
    """
    if model not in MODELS:
        raise InvalidInputError("unknown model {!r}".format(model))
    k = np.arange(q.threshold, q.C + 1)
    if model == "binomial":
        if q.rho in (0.0, 1.0):
            return float(q.rho)
        logp = binom.logpmf(k, q.C, q.rho)
    else:
        if q.N is None:
            raise InvalidInputError("the hypergeometric model needs N")
        malicious = int(round(q.rho * q.N))
        if malicious < q.threshold:
            return 0.0
        logp = hypergeom.logpmf(k, q.N, malicious, q.C)
    return float(min(1.0, math.exp(logsumexp(logp))))


def normal_majority_approx(q: MajorityQuery) -> float:
    """``Phi(sqrt(C) * (2 rho - 1))``, with rho of 0 and 1 mapped to 0 and 1"""
    if q.rho in (0.0, 1.0):
        return float(q.rho)
    return float(ndtr(math.sqrt(q.C) * (2.0 * q.rho - 1.0)))


def majority_report(q: MajorityQuery) -> Dict[str, float]:
    """The four malicious-majority probabilities side by side

    The hypergeometric entry uses N = C when the query has no N.
    """
    population = q.N if q.N is not None else q.C
    hyper = MajorityQuery(q.rho, q.C, population)
    report = {
        "chernoff": chernoff_majority_bound(q),
        "exact_binomial": exact_majority_prob(q, "binomial"),
        "exact_hypergeometric": exact_majority_prob(hyper, "hypergeometric"),
        "normal_approx": normal_majority_approx(q),
    }
    if report["chernoff"] > report["exact_binomial"] + 1e-12:
        logger.warning(
            "closed-form bound %.6f exceeds the exact binomial tail %.6f "
            "(rho=%g, C=%d), so it is not a lower bound here",
            report["chernoff"],
            report["exact_binomial"],
            q.rho,
            q.C,
        )
    return report


def mta(model: Classifier, test) -> float:
    """Top-1 accuracy on a clean labeled set"""
    if len(test) == 0:
        raise InvalidInputError("empty test set")
    return float(np.mean(model.predict(test.inputs) == test.labels))


def asr(model: Classifier, triggered, target: int) -> float:
    """Fraction of triggered victim-class inputs predicted as `target`"""
    if len(triggered) == 0:
        raise InvalidInputError("empty triggered set")
    return float(np.mean(model.predict(triggered.inputs) == int(target)))


def consistency_stat(records: Sequence, lam: float) -> Tuple[Optional[float], int]:
    """Minimum ASR over the rounds K with MTA >= `lam`, and |K|

    Returns ``(None, 0)`` when no round qualifies. Rounds without an ASR
    (attack disabled) never qualify.
    """
    asrs = [r.asr for r in records if r.mta >= lam and r.asr is not None]
    if not asrs:
        return None, 0
    return min(asrs), len(asrs)


def consistency_holds(records: Sequence, lam: float, tau: float) -> bool:
    """The attack stays above `tau` ASR on every round with MTA >= `lam`"""
    worst, size = consistency_stat(records, lam)
    return size > 0 and worst >= tau


@dataclass(frozen=True)
class GridCell:
    config_id: str
    lr: float
    batch_size: int
    epochs: int
    mta: Optional[float] = None
    asr: Optional[float] = None
    danger_zone: bool = False
    error: Optional[str] = None

    def to_row(self, lam: float, tau: float) -> dict:
        return {
            "config_id": self.config_id,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "mta": "" if self.mta is None else repr(self.mta),
            "asr": "" if self.asr is None else repr(self.asr),
            "danger_zone": str(self.danger_zone).lower(),
            "lambda": lam,
            "tau": tau,
            "error": self.error or "",
        }


@dataclass(frozen=True)
class DangerZoneReport:
    """Final MTA / ASR per learning configuration, and the flagged zones"""

    cells: Tuple[GridCell, ...]
    lam: float
    tau: float

    @property
    def zones(self) -> List[GridCell]:
        return [c for c in self.cells if c.danger_zone]

    def ranked_zones(self) -> List[GridCell]:
        """Zones by descending ASR, grid order on ties"""
        return sorted(self.zones, key=lambda c: -c.asr)

    def rows(self) -> List[dict]:
        return [c.to_row(self.lam, self.tau) for c in self.cells]


Runner = Callable[[str, object], Tuple[float, float]]


def _final_metrics(cell_id: str, cfg) -> Tuple[float, float]:
    from fedlab.federation import run_experiment

    records = run_experiment(cfg)
    if not records:
        raise InvalidInputError("{}: no rounds were run".format(cell_id))
    return records[-1].mta, records[-1].asr


def danger_zone_scan(
    grid: Sequence[TrainingConfig],
    attack,
    template,
    lam: float = 0.8,
    tau: float = 0.85,
    jobs: int = 1,
    runner: Optional[Runner] = None,
) -> DangerZoneReport:
    """Run an undefended experiment per learning configuration

    Parameters
    ----------
    grid : list of TrainingConfig

    attack : AttackConfig
        replaces the template's attack block, None keeps it

    template : ExperimentConfig
        everything else; the defense is forced to plain FedAvg

    lam, tau : float
        a cell is a danger zone when its final MTA >= lam and ASR >= tau

    jobs : int, default 1
        cells run concurrently on this many threads

    runner : callable, default None
        ``runner(config_id, cfg) -> (mta, asr)``; runs the experiment when
        omitted. A raising runner marks its cell failed and the scan goes on.

    """
    grid = list(grid)
    if not grid:
        raise InvalidInputError("grid is empty")
    if attack is not None:
        template = replace(template, attack=attack)
    template = template.with_defense("fedavg")
    runner = runner or _final_metrics

    def run(indexed):
        index, training = indexed
        cell_id = "C{}".format(index + 1)
        base = GridCell(cell_id, training.lr, training.batch_size, training.epochs)
        try:
            mta_, asr_ = runner(cell_id, template.with_training(training))
        except Exception as exc:
            logger.warning("grid cell %s failed: %s", cell_id, exc)
            return replace(base, error="{}: {}".format(type(exc).__name__, exc))
        zone = mta_ is not None and asr_ is not None and mta_ >= lam and asr_ >= tau
        return replace(base, mta=mta_, asr=asr_, danger_zone=zone)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(run, enumerate(grid)))
    else:
        cells = [run(item) for item in enumerate(grid)]
    return DangerZoneReport(tuple(cells), lam, tau)
