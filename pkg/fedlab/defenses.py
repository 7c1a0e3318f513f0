"""
The `defenses.py` module wraps every aggregation rule behind one interface
the round loop can drive

---------

A defense receives the round's updates as an immutable snapshot and returns
the next global model together with what the round record needs: who was
aggregated and, for the clustering defenses, the benign / suspect split.
"""

import logging
from abc import ABC as _ABC
from abc import abstractmethod as _abstractmethod
from dataclasses import dataclass
from typing import FrozenSet, Mapping, Optional, Tuple

from fedlab.aggregation import KrumParams, fedavg, median_agg, multi_krum
from fedlab.config import DefenseConfig, FederationConfig
from fedlab.drop import (
    DistillConfig,
    PenaltyLedger,
    drop_pipeline,
    droplet_pipeline,
)
from fedlab.errors import InvalidInputError
from fedlab.nn.models import Classifier

logger = logging.getLogger(__name__)

__all__ = [
    "RoundContext",
    "DefenseOutcome",
    "Defense",
    "FedAvgDefense",
    "MedianDefense",
    "MultiKrumDefense",
    "DropletDefense",
    "DropDefense",
    "build_defense",
]


@dataclass(frozen=True)
class RoundContext:
    """What a defense sees of one round

    Parameters
    ----------
    round_index : int
        1-based

    updates : mapping of int to Classifier
        locally trained model per sampled client

    global_model : Classifier
        the model the clients started from

    seed : int
        for any randomness the defense needs

    """

    round_index: int
    updates: Mapping[int, Classifier]
    global_model: Classifier
    seed: int = 0

    @property
    def ids(self) -> Tuple[int, ...]:
        return tuple(sorted(self.updates))


@dataclass(frozen=True)
class DefenseOutcome:
    global_model: Optional[Classifier]
    aggregated: Tuple[int, ...] = ()
    benign_cluster: Tuple[int, ...] = ()
    suspect_cluster: Tuple[int, ...] = ()
    distilled: bool = False


class Defense(_ABC):
    """Abstract base class for aggregation pipelines"""

    name = "defense"

    def __repr__(self):
        return "<{}('{}')>".format(self.__class__.__name__, self.name)

    @property
    def banned(self) -> FrozenSet[int]:
        """Clients barred from sampling"""
        return frozenset()

    @_abstractmethod
    def aggregate(self, ctx: RoundContext) -> DefenseOutcome:
        """Next global model for a round"""

    def _wrap(self, ctx: RoundContext, vector, aggregated) -> DefenseOutcome:
        model = ctx.global_model.with_params(
            vector.values.astype(ctx.global_model.dtype)
        )
        return DefenseOutcome(model, tuple(sorted(aggregated)))


class FedAvgDefense(Defense):
    """No defense: the unweighted mean of every update"""

    name = "fedavg"

    def aggregate(self, ctx):
        ids = ctx.ids
        return self._wrap(ctx, fedavg([ctx.updates[c].params for c in ids]), ids)


class MedianDefense(Defense):
    name = "median"

    def aggregate(self, ctx):
        ids = ctx.ids
        return self._wrap(ctx, median_agg([ctx.updates[c].params for c in ids]), ids)


class MultiKrumDefense(Defense):
    """Multi-Krum with f = round(rho * C) and m = n - f unless configured

    `f` shrinks to ``n - 3`` when a round has too few updates for it; below
    three updates the round falls back to FedAvg.
    """

    name = "multikrum"

    def __init__(self, f: int, m: Optional[int] = None):
        if f < 0:
            raise InvalidInputError("f must be non-negative")
        self._f = int(f)
        self._m = None if m is None else int(m)

    @property
    def f(self):
        return self._f

    def aggregate(self, ctx):
        ids = ctx.ids
        n = len(ids)
        params = [ctx.updates[c].params for c in ids]
        if n < 3:
            logger.warning("multi-krum needs 3 updates, got %d; using fedavg", n)
            return self._wrap(ctx, fedavg(params), ids)
        f = self._f
        if n < f + 3:
            logger.warning("multi-krum f=%d too large for %d updates, using %d", f, n, n - 3)
            f = n - 3
        m = min(n, self._m if self._m is not None else n - f)
        selected, vector = multi_krum(params, KrumParams(f, m))
        return self._wrap(ctx, vector, [ids[i] for i in selected])


class DropletDefense(Defense):
    """Clustering and activity monitoring; keeps the penalty ledger"""

    name = "droplet"

    def __init__(self, ledger: Optional[PenaltyLedger] = None):
        self._ledger = ledger if ledger is not None else PenaltyLedger()

    @property
    def ledger(self) -> PenaltyLedger:
        return self._ledger

    @property
    def banned(self):
        return self._ledger.banned

    def _run(self, ctx):
        return droplet_pipeline(
            ctx.updates, self._ledger, ctx.round_index, ctx.global_model
        )

    def aggregate(self, ctx):
        result = self._run(ctx)
        self._ledger = result.ledger
        return DefenseOutcome(
            result.global_model,
            tuple(sorted(result.survivors)),
            result.split.benign,
            result.split.suspect,
            result.distilled,
        )


class DropDefense(DropletDefense):
    """DROPlet plus distillation every K rounds; keeps the generator"""

    name = "drop"

    def __init__(self, distill: DistillConfig, ledger: Optional[PenaltyLedger] = None):
        super().__init__(ledger)
        self._distill = distill
        self._generator = None

    @property
    def generator(self):
        return self._generator

    def _run(self, ctx):
        result = drop_pipeline(
            ctx.updates,
            self._ledger,
            ctx.global_model,
            self._generator,
            self._distill,
            ctx.round_index,
            seed=ctx.seed,
        )
        self._generator = result.generator
        return result


def build_defense(
    config: DefenseConfig, federation: FederationConfig, clean=None
) -> Defense:
    """Defense named by `config`

    `clean` is the server's trusted seed set, used by DROP only.
    """
    if config.name == "fedavg":
        return FedAvgDefense()
    if config.name == "median":
        return MedianDefense()
    if config.name == "multikrum":
        f = config.krum_f
        if f is None:
            f = int(round(federation.mcr * federation.per_round))
        return MultiKrumDefense(f, config.krum_m)

    ledger = PenaltyLedger(
        penalty=config.p,
        reward=config.r,
        ban_threshold=config.tau_b,
        ban_enabled=config.ban_enabled,
        exclusion=config.exclusion,
    )
    if config.name == "droplet":
        return DropletDefense(ledger)
    distill = DistillConfig(
        period=config.K,
        query_budget=config.query_budget,
        batch_size=config.distill_batch,
        generator_steps=config.generator_steps,
        clone_steps=config.clone_steps,
        clone_lr=config.clone_lr,
        generator_lr=config.generator_lr,
        latent_dim=config.latent_dim,
        hidden=config.generator_hidden,
        seed_steps=config.seed_steps,
        clean=clean,
    )
    return DropDefense(distill, ledger)
