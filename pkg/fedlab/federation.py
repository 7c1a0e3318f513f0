"""
The federated round loop: client sampling, local training of benign and
malicious clients, defense-driven aggregation and per-round evaluation.

All randomness derives from the run seed through fixed streams, so a rerun
with the same config reproduces every record.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import FrozenSet, Iterable, List, Optional, Sequence

import numpy as np

from fedlab.aggregation import fedavg
from fedlab.analysis import asr, mta
from fedlab.config import ExperimentConfig, FederationConfig
from fedlab.datasets import (
    LabeledDataset,
    PoisonSpec,
    load_idx,
    partition,
    poison,
    split,
    synth_blobs,
    take,
    triggered_testset,
)
from fedlab.defenses import Defense, RoundContext, build_defense
from fedlab.errors import InsufficientVictimsError, InvalidInputError, RoundAbortedError
from fedlab.nn.models import Classifier
from fedlab.nn.training import train_local
from fedlab.records import RoundRecord
from fedlab.units import Stopwatch

logger = logging.getLogger(__name__)

__all__ = [
    "ClientState",
    "Federation",
    "sample_clients",
    "run_experiment",
    "fedavg",
]

# independent random streams derived from the run seed
_DATA, _SPLIT, _CLEAN, _PARTITION, _ADVERSARY, _POISON, _INIT = range(7)
_SAMPLE, _TRAIN, _DEFENSE = 100, 101, 102


def _stream(seed: int, *keys: int) -> List[int]:
    return [int(seed)] + [int(k) for k in keys]


def sample_clients(
    cfg: FederationConfig, round_index: int, banned: Iterable[int] = ()
) -> List[int]:
    """Uniform sample of C non-banned clients without replacement

    Seeded by ``(cfg.seed, round_index)``. With fewer than C clients left the
    sample shrinks to all of them and a warning is logged.
    """
    banned = set(banned)
    available = [c for c in range(cfg.clients) if c not in banned]
    size = cfg.per_round
    if len(available) < size:
        logger.warning(
            "round %d: only %d clients left, sampling all of them instead of %d",
            round_index,
            len(available),
            size,
        )
        size = len(available)
    if size == 0:
        return []
    rng = np.random.default_rng(_stream(cfg.seed, _SAMPLE, round_index))
    chosen = rng.choice(np.array(available), size=size, replace=False)
    return sorted(int(c) for c in chosen)


@dataclass(frozen=True)
class ClientState:
    """A client and its local data

    `is_malicious` is ground truth; defenses never see it.
    """

    id: int
    data: LabeledDataset
    is_malicious: bool = False
    poison: Optional[PoisonSpec] = None

    def __post_init__(self):
        if self.is_malicious != (self.poison is not None):
            raise InvalidInputError(
                "client {}: a poison spec is required iff malicious".format(self.id)
            )


def _poison_client(
    data: LabeledDataset, spec: PoisonSpec, client: int, seed
) -> LabeledDataset:
    try:
        return poison(data, spec, seed)
    except InsufficientVictimsError as exc:
        logger.warning(
            "client %d holds %d victim samples, %d short of dpr=%g; poisoning all of them",
            client,
            exc.available,
            exc.shortfall,
            spec.dpr,
        )
        return poison(data, spec, seed, count=exc.available)


class Federation:
    """Clients, evaluation sets and the current global model of one run

    Parameters
    ----------
    config : FederationConfig

    clients : list of ClientState
        indexed by client id

    global_model : Classifier
        the round-0 model

    test : LabeledDataset
        clean test set for MTA

    triggered : LabeledDataset, default None
        output of `triggered_testset`, for ASR

    target : int, default None
        attack target class

    clean : LabeledDataset, default None
        trusted server-side seed set

    """

    def __init__(
        self,
        config: FederationConfig,
        clients: Sequence[ClientState],
        global_model: Classifier,
        test: LabeledDataset,
        triggered: Optional[LabeledDataset] = None,
        target: Optional[int] = None,
        clean: Optional[LabeledDataset] = None,
    ):
        if not isinstance(global_model, Classifier):
            raise TypeError
        self._config = config
        self._clients = tuple(clients)
        if [c.id for c in self._clients] != list(range(config.clients)):
            raise InvalidInputError("clients must be numbered 0..N-1")
        self._global = global_model
        self._test = test
        self._triggered = triggered
        self._target = target
        self._clean = clean
        self._round = 0

    def __repr__(self):
        return "<Federation({} clients, round {})>".format(len(self._clients), self._round)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "Federation":
        """Build data, clients and the shared initial model from a config"""
        seed = cfg.seed
        ds = cfg.dataset
        if ds.kind == "blobs":
            pool = synth_blobs(ds.classes, ds.dim, ds.per_class, ds.spread, _stream(seed, _DATA))
            train, test = split(pool, ds.test_fraction, _stream(seed, _SPLIT))
        else:
            train = load_idx(ds.train_images, ds.train_labels)
            if ds.test_images and ds.test_labels:
                test = load_idx(ds.test_images, ds.test_labels)
            else:
                train, test = split(train, ds.test_fraction, _stream(seed, _SPLIT))

        fed = cfg.federation
        train, clean = take(train, ds.clean_size, _stream(seed, _CLEAN))
        if ds.clean_size > len(train) // fed.clients:
            raise InvalidInputError(
                "clean seed set of {} exceeds one client's share of {}".format(
                    ds.clean_size, len(train) // fed.clients
                )
            )
        plan = partition(train, fed.clients, ds.alpha, _stream(seed, _PARTITION))

        spec, triggered = None, None
        malicious = frozenset()
        image_shape = ds.image_shape or (train.dim,)
        if cfg.attack.enabled:
            spec = cfg.attack.poison_spec(image_shape)
            triggered = triggered_testset(test, spec)
            rng = np.random.default_rng(_stream(seed, _ADVERSARY))
            chosen = rng.choice(fed.clients, size=fed.malicious_count, replace=False)
            malicious = frozenset(int(c) for c in chosen)

        clients = []
        for cid, indices in enumerate(plan.assignments):
            data = train.subset(indices)
            if cid in malicious:
                data = _poison_client(data, spec, cid, _stream(seed, _POISON, cid))
                clients.append(ClientState(cid, data, True, spec))
            else:
                clients.append(ClientState(cid, data))

        arch = cfg.model.architecture(train.dim, train.classes, ds.image_shape)
        model = Classifier(arch, seed=_stream(seed, _INIT))
        logger.info(
            "federation of %d clients, %d malicious, %d sampled per round",
            fed.clients,
            len(malicious),
            fed.per_round,
        )
        return cls(
            fed,
            clients,
            model,
            test,
            triggered=triggered,
            target=None if spec is None else spec.target,
            clean=clean,
        )

    @property
    def config(self) -> FederationConfig:
        return self._config

    @property
    def clients(self):
        return self._clients

    @property
    def malicious_ids(self) -> FrozenSet[int]:
        return frozenset(c.id for c in self._clients if c.is_malicious)

    @property
    def global_model(self) -> Classifier:
        return self._global

    @property
    def clean(self):
        return self._clean

    @property
    def round_index(self) -> int:
        """Rounds completed so far"""
        return self._round

    def _train(self, cid: int, round_index: int) -> Classifier:
        client = self._clients[cid]
        if len(client.data) == 0:
            logger.debug("client %d holds no data, returning the global model", cid)
            return self._global
        seed = _stream(self._config.seed, _TRAIN, round_index, cid)
        local = train_local(self._global, client.data, self._config.training, seed)
        scale = self._config.update_scale
        if client.is_malicious and scale != 1.0:
            start = self._global.params.values
            local = local.with_params(start + scale * (local.params.values - start))
        return local

    def evaluate(self, model: Optional[Classifier] = None):
        """(MTA, ASR) of a model, the current global one by default"""
        if model is None:
            model = self._global
        attack = None
        if self._triggered is not None:
            attack = asr(model, self._triggered, self._target)
        return mta(model, self._test), attack

    def run_round(self, defense: Defense) -> RoundRecord:
        """Sample, train, aggregate through `defense`, install and evaluate"""
        t = self._round + 1
        watch = Stopwatch()
        sampled = sample_clients(self._config, t, defense.banned)
        bad = sum(1 for c in sampled if self._clients[c].is_malicious)
        majority = bool(sampled) and 2 * bad >= len(sampled)

        outcome, error = None, None
        try:
            if not sampled:
                raise RoundAbortedError("no clients left to sample")
            if self._config.workers > 1:
                with ThreadPoolExecutor(max_workers=self._config.workers) as pool:
                    models = list(pool.map(lambda c: self._train(c, t), sampled))
            else:
                models = [self._train(c, t) for c in sampled]
            ctx = RoundContext(
                t,
                dict(zip(sampled, models)),
                self._global,
                seed=_stream(self._config.seed, _DEFENSE, t),
            )
            outcome = defense.aggregate(ctx)
            if outcome.global_model is None:
                raise RoundAbortedError("defense returned no global model")
        except RoundAbortedError as exc:
            logger.error("round %d aborted: %s", t, exc)
            error = str(exc)
            outcome = None

        if outcome is not None:
            self._global = outcome.global_model
        self._round = t
        mta_, asr_ = self.evaluate()
        aggregated = () if outcome is None else outcome.aggregated
        return RoundRecord(
            round=t,
            sampled=tuple(sampled),
            malicious_sampled=bad,
            malicious_majority=majority,
            mta=mta_,
            asr=asr_,
            excluded=tuple(c for c in sampled if c not in set(aggregated)),
            benign_cluster=() if outcome is None else outcome.benign_cluster,
            suspect_cluster=() if outcome is None else outcome.suspect_cluster,
            aggregated=tuple(aggregated),
            distilled=False if outcome is None else outcome.distilled,
            timing_ms=watch.elapsed_ms,
            error=error,
        )


def run_experiment(
    cfg: ExperimentConfig,
    attack=None,
    defense: Optional[Defense] = None,
    sink=None,
    federation: Optional[Federation] = None,
) -> List[RoundRecord]:
    """Run T rounds, streaming each record to `sink` as soon as it exists

    Parameters
    ----------
    cfg : ExperimentConfig

    attack : AttackConfig, default None
        overrides ``cfg.attack``

    defense : Defense, default None
        built from ``cfg.defense`` when omitted

    sink : object with ``write(record)``, default None

    federation : Federation, default None
        built from `cfg` when omitted

    """
    if attack is not None:
        cfg = replace(cfg, attack=attack)
    if federation is None:
        federation = Federation.from_config(cfg)
    if defense is None:
        defense = build_defense(cfg.defense, cfg.federation, federation.clean)
    records = []
    for _ in range(cfg.federation.rounds):
        record = federation.run_round(defense)
        records.append(record)
        if sink is not None:
            sink.write(record)
        logger.info(
            "round %d: mta=%.4f asr=%s excluded=%s",
            record.round,
            record.mta,
            "n/a" if record.asr is None else "{:.4f}".format(record.asr),
            list(record.excluded),
        )
    return records
