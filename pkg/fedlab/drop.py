"""
The clustering, activity-monitoring and distillation stages of the DROP
defense, and the DROP / DROPlet round pipelines built from them.

A round runs ``cluster_updates -> update_ledger -> filter_by_ledger ->
fedavg`` and, on every K-th round, ``distill``. DROPlet is the same pipeline
without the distillation stage.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import FrozenSet, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage

from fedlab.aggregation import fedavg
from fedlab.errors import InvalidInputError, ShapeError
from fedlab.nn.base import FlatParams, Network
from fedlab.nn.models import Classifier, Generator
from fedlab.nn.training import l1_logit_loss_and_grad, sgd_step

logger = logging.getLogger(__name__)

__all__ = [
    "ClusterSplit",
    "PenaltyLedger",
    "DistillConfig",
    "DistillResult",
    "PipelineResult",
    "ward_distance",
    "cluster_updates",
    "update_ledger",
    "filter_by_ledger",
    "ensemble_logits",
    "seed_generator",
    "distill_with_generator",
    "distill",
    "drop_pipeline",
    "droplet_pipeline",
]

EXCLUSION_RULES = ("strict", "threshold")


def _vector(update) -> np.ndarray:
    if isinstance(update, Network):
        update = update.params
    if isinstance(update, FlatParams):
        return update.values.astype(np.float64, copy=False)
    return np.ravel(np.asarray(update, dtype=np.float64))


def _matrix(cluster) -> np.ndarray:
    rows = [_vector(u) for u in cluster]
    if not rows:
        raise InvalidInputError("cluster is empty")
    if len({r.size for r in rows}) != 1:
        raise ShapeError("updates in a cluster differ in length")
    return np.stack(rows)


def ward_distance(a: Sequence, b: Sequence) -> float:
    """Increase in total intra-cluster variance caused by merging `a` and `b`

    ``(|A||B| / (|A|+|B|)) * ||mu_A - mu_B||^2``

    Example
    -------
    >>> ward_distance([[0.0, 0.0]], [[3.0, 4.0]])
    12.5
    """
    ma, mb = _matrix(a), _matrix(b)
    if ma.shape[1] != mb.shape[1]:
        raise ShapeError("clusters live in different dimensions")
    na, nb = len(ma), len(mb)
    gap = ma.mean(axis=0) - mb.mean(axis=0)
    return float(na * nb / (na + nb) * np.dot(gap, gap))


def _sse(matrix: np.ndarray) -> float:
    return float(((matrix - matrix.mean(axis=0)) ** 2).sum())


@dataclass(frozen=True)
class ClusterSplit:
    """Benign cluster C_b and suspect cluster C_s of one round"""

    benign: Tuple[int, ...]
    suspect: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "benign", tuple(sorted(int(c) for c in self.benign)))
        object.__setattr__(self, "suspect", tuple(sorted(int(c) for c in self.suspect)))
        if not self.benign:
            raise InvalidInputError("benign cluster must not be empty")
        if set(self.benign) & set(self.suspect):
            raise InvalidInputError("benign and suspect clusters overlap")

    @property
    def clients(self) -> Tuple[int, ...]:
        return tuple(sorted(self.benign + self.suspect))


def cluster_updates(updates: Mapping[int, object]) -> ClusterSplit:
    """Ward-linkage agglomerative clustering halted at two clusters

    The larger cluster is benign. Equal sizes go to the cluster with the lower
    intra-cluster sum of squares, then to the one holding the lowest client id.
    Updates are processed in ascending client-id order whatever the mapping
    order.
    """
    ids = sorted(int(c) for c in updates)
    if not ids:
        raise InvalidInputError("no updates to cluster")
    if len(ids) == 1:
        logger.warning("single update from client %d, treated as benign", ids[0])
        return ClusterSplit((ids[0],), ())

    matrix = _matrix([updates[c] for c in ids])
    tree = linkage(matrix, method="ward")
    if tree[-1, 2] == 0.0:
        # no separation at all, so nothing can be called suspect
        logger.info("all %d updates coincide, no suspect cluster", len(ids))
        return ClusterSplit(tuple(ids), ())
    labels = cut_tree(tree, n_clusters=2).ravel()

    groups = []
    for label in (0, 1):
        members = np.flatnonzero(labels == label)
        groups.append(
            (-len(members), _sse(matrix[members]), ids[members[0]], [ids[i] for i in members])
        )
    groups.sort(key=lambda g: g[:3])
    return ClusterSplit(tuple(groups[0][3]), tuple(groups[1][3]))


@dataclass(frozen=True)
class PenaltyLedger:
    """Per-client penalty scores of the activity monitor

    Parameters
    ----------
    scores : mapping of int to float
        running penalty score per client; absent clients score 0

    penalty : float, default 1.0
        added when a client lands in the suspect cluster

    reward : float, default 1.0
        subtracted, floored at zero, when a client lands in the benign cluster

    ban_threshold : float, default 5.0

    ban_enabled : bool, default False
        when set, clients reaching `ban_threshold` are barred from sampling

    banned : frozenset of int

    exclusion : str, default "strict"
        ``"strict"`` drops every benign-cluster client with a positive score,
        ``"threshold"`` only those at or above `ban_threshold`

    """

    scores: Mapping[int, float] = field(default_factory=dict)
    penalty: float = 1.0
    reward: float = 1.0
    ban_threshold: float = 5.0
    ban_enabled: bool = False
    banned: FrozenSet[int] = frozenset()
    exclusion: str = "strict"

    def __post_init__(self):
        object.__setattr__(
            self, "scores", {int(c): float(s) for c, s in dict(self.scores).items()}
        )
        object.__setattr__(self, "banned", frozenset(int(c) for c in self.banned))
        if self.penalty <= 0 or self.reward <= 0 or self.ban_threshold <= 0:
            raise InvalidInputError("penalty, reward and ban_threshold must be positive")
        if any(s < 0 for s in self.scores.values()):
            raise InvalidInputError("penalty scores must be non-negative")
        if self.exclusion not in EXCLUSION_RULES:
            raise InvalidInputError("unknown exclusion rule {!r}".format(self.exclusion))

    def score(self, client: int) -> float:
        return self.scores.get(int(client), 0.0)

    def excludes(self, client: int) -> bool:
        if client in self.banned:
            return True
        if self.exclusion == "strict":
            return self.score(client) > 0
        return self.score(client) >= self.ban_threshold


def update_ledger(ledger: PenaltyLedger, split: ClusterSplit) -> PenaltyLedger:
    """Penalise the suspect cluster, reward the benign one

    Unsampled clients keep their scores. Banning is monotone: once banned a
    client stays banned.
    """
    scores = dict(ledger.scores)
    for c in split.suspect:
        scores[c] = scores.get(c, 0.0) + ledger.penalty
    for c in split.benign:
        scores[c] = max(0.0, scores.get(c, 0.0) - ledger.reward)
    banned = set(ledger.banned)
    if ledger.ban_enabled:
        newly = {c for c, s in scores.items() if s >= ledger.ban_threshold} - banned
        if newly:
            logger.info("banning clients %s", sorted(newly))
        banned |= newly
    return replace(ledger, scores=scores, banned=frozenset(banned))


def filter_by_ledger(split: ClusterSplit, ledger: PenaltyLedger) -> List[int]:
    """Benign-cluster clients allowed into the aggregate

    If every benign-cluster client is excluded, the one with the lowest score
    (lowest id on ties) is kept alone.
    """
    survivors = [c for c in split.benign if not ledger.excludes(c)]
    if survivors:
        return survivors
    fallback = min(split.benign, key=lambda c: (ledger.score(c), c))
    logger.warning(
        "every benign-cluster client is excluded, keeping client %d (score %g)",
        fallback,
        ledger.score(fallback),
    )
    return [fallback]


def ensemble_logits(models: Sequence[Classifier], batch) -> np.ndarray:
    """Arithmetic mean of the models' logits"""
    models = list(models)
    if not models:
        raise InvalidInputError("ensemble needs at least one model")
    total = models[0].forward(batch)
    for model in models[1:]:
        total = total + model.forward(batch)
    return total / len(models)


@dataclass(frozen=True)
class DistillConfig:
    """Schedule and budget of the distillation stage

    Parameters
    ----------
    period : int, default 5
        distill on rounds divisible by this

    query_budget : int, default 50000
        generated inputs allowed per distillation; 0 skips distillation

    batch_size : int, default 64
        generated inputs per step; clone steps add as many clean samples

    generator_steps : int, default 1
        generator updates before each run of clone updates

    clone_steps : int, default 5

    clone_lr : float, default 0.01

    generator_lr : float, default 0.01

    latent_dim : int, default 64

    hidden : int, default 128
        generator hidden width

    seed_steps : int, default 200
        regression steps fitting a fresh generator to `clean`

    clean : LabeledDataset, default None
        trusted seed set D_clean, required for distillation

    """

    period: int = 5
    query_budget: int = 50000
    batch_size: int = 64
    generator_steps: int = 1
    clone_steps: int = 5
    clone_lr: float = 0.01
    generator_lr: float = 0.01
    latent_dim: int = 64
    hidden: int = 128
    seed_steps: int = 200
    clean: Optional[object] = None

    def __post_init__(self):
        for name in ("period", "batch_size", "generator_steps", "clone_steps", "latent_dim", "hidden"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError("{} must be positive".format(name))
        if self.query_budget < 0 or self.seed_steps < 0:
            raise InvalidInputError("query_budget and seed_steps must be non-negative")
        if self.clone_lr <= 0 or self.generator_lr <= 0:
            raise InvalidInputError("learning rates must be positive")

    def is_distill_round(self, round_index: int) -> bool:
        return round_index % self.period == 0


class DistillResult(NamedTuple):
    model: Classifier
    generator: Optional[Generator]
    queries: int
    loss: Optional[float]


def seed_generator(
    generator: Generator, clean, steps: int, lr: float, seed: int
) -> Generator:
    """Pull generator outputs towards the clean seed set with an L2 loss"""
    if steps == 0 or clean is None or len(clean) == 0:
        return generator
    rng = np.random.default_rng(seed)
    values = np.array(generator.params.values, copy=True)
    inputs = np.asarray(clean.inputs, dtype=generator.dtype)
    batch = min(64, len(inputs))
    for _ in range(steps):
        targets = inputs[rng.choice(len(inputs), size=batch, replace=False)]
        z = generator.sample_latent(batch, rng)
        out, state = generator.run_forward(values, z)
        _, grad = generator.run_backward(state, 2.0 * (out - targets) / batch)
        values = sgd_step(values, grad, lr)
    return generator.with_params(values)


def _clean_batch(inputs: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    replace_ = size > len(inputs)
    return inputs[rng.choice(len(inputs), size=size, replace=replace_)]


def distill_with_generator(
    global_model: Classifier,
    benign_models: Sequence[Classifier],
    generator: Optional[Generator],
    cfg: DistillConfig,
    seed: int,
) -> DistillResult:
    """Distil the benign ensemble into a clone of `global_model`

    Generator steps ascend the clone-vs-ensemble ℓ1 disagreement on
    generated batches, with gradients taken through the clone and every
    ensemble member. Clone steps start from `global_model` and descend the
    same loss on generated batches mixed 1:1 with batches from ``cfg.clean``.
    Only generated inputs count against the query budget.
    """
    benign_models = list(benign_models)
    if not benign_models:
        raise InvalidInputError("distillation needs at least one benign model")
    if cfg.query_budget == 0:
        logger.info("query budget is 0, distillation skipped")
        return DistillResult(global_model, generator, 0, None)
    if cfg.clean is None or len(cfg.clean) == 0:
        raise InvalidInputError("distillation needs a non-empty clean seed set")

    rng = np.random.default_rng(seed)
    if generator is None:
        generator = Generator.for_classifier(
            global_model, latent_dim=cfg.latent_dim, hidden=cfg.hidden, seed=seed
        )
        generator = seed_generator(
            generator, cfg.clean, cfg.seed_steps, cfg.generator_lr, seed
        )
    if generator.output_dim != global_model.input_dim:
        raise ShapeError("generator output does not match the classifier input")

    clean = np.asarray(cfg.clean.inputs, dtype=global_model.dtype)
    gen_values = np.array(generator.params.values, copy=True)
    clone_values = np.array(global_model.params.values, copy=True)
    weight = 1.0 / len(benign_models)
    used, loss = 0, None

    def generator_step(n):
        z = generator.sample_latent(n, rng)
        x, gen_state = generator.run_forward(gen_values, z)
        s, clone_state = global_model.run_forward(clone_values, x)
        states = [m.run_forward(m.params.values, x) for m in benign_models]
        t = sum(out for out, _ in states) * weight
        _, g = l1_logit_loss_and_grad(s, t)
        dx, _ = global_model.run_backward(clone_state, g)
        for model, (_, state) in zip(benign_models, states):
            dx = dx + model.run_backward(state, -g * weight)[0]
        _, grad = generator.run_backward(gen_state, dx)
        # ascent: the generator hunts for disagreement
        return sgd_step(gen_values, grad, -cfg.generator_lr)

    def clone_step(n):
        x = generator.run_forward(gen_values, generator.sample_latent(n, rng))[0]
        x = np.vstack([x, _clean_batch(clean, n, rng)])
        t = ensemble_logits(benign_models, x)
        s, state = global_model.run_forward(clone_values, x)
        value, g = l1_logit_loss_and_grad(s, t)
        _, grad = global_model.run_backward(state, g)
        return sgd_step(clone_values, grad, cfg.clone_lr), value

    while used < cfg.query_budget:
        for _ in range(cfg.generator_steps):
            n = min(cfg.batch_size, cfg.query_budget - used)
            if n <= 0:
                break
            gen_values = generator_step(n)
            used += n
        for _ in range(cfg.clone_steps):
            n = min(cfg.batch_size, cfg.query_budget - used)
            if n <= 0:
                break
            clone_values, loss = clone_step(n)
            used += n

    logger.debug("distillation used %d queries, final clone loss %s", used, loss)
    return DistillResult(
        global_model.with_params(clone_values),
        generator.with_params(gen_values),
        used,
        loss,
    )


def distill(
    global_model: Classifier,
    benign_models: Sequence[Classifier],
    generator: Optional[Generator],
    cfg: DistillConfig,
    seed: int,
) -> Classifier:
    """The cleansed global model; see `distill_with_generator`"""
    return distill_with_generator(global_model, benign_models, generator, cfg, seed).model


class PipelineResult(NamedTuple):
    global_model: Classifier
    ledger: PenaltyLedger
    split: ClusterSplit
    survivors: List[int]
    generator: Optional[Generator] = None
    distilled: bool = False


def droplet_pipeline(
    updates: Mapping[int, Classifier],
    ledger: PenaltyLedger,
    round_index: int,
    global_model: Optional[Classifier] = None,
) -> PipelineResult:
    """Clustering and activity monitoring followed by FedAvg over survivors

    `global_model` only supplies the architecture of the returned model; when
    omitted the first update's is used.
    """
    if not updates:
        raise InvalidInputError("no updates in round {}".format(round_index))
    split = cluster_updates(updates)
    ledger = update_ledger(ledger, split)
    survivors = filter_by_ledger(split, ledger)
    logger.info(
        "round %d: benign %s, suspect %s, aggregating %s",
        round_index,
        list(split.benign),
        list(split.suspect),
        survivors,
    )
    template = global_model if global_model is not None else updates[min(updates)]
    aggregate = fedavg([updates[c].params for c in survivors])
    return PipelineResult(
        template.with_params(aggregate.values.astype(template.dtype)),
        ledger,
        split,
        survivors,
    )


def drop_pipeline(
    updates: Mapping[int, Classifier],
    ledger: PenaltyLedger,
    global_model: Classifier,
    generator: Optional[Generator],
    cfg: DistillConfig,
    round_index: int,
    seed: int = 0,
) -> PipelineResult:
    """DROPlet plus distillation of the survivors on every K-th round"""
    result = droplet_pipeline(updates, ledger, round_index, global_model)
    if not cfg.is_distill_round(round_index):
        return result._replace(generator=generator)
    survivors = [updates[c] for c in result.survivors]
    outcome = distill_with_generator(
        result.global_model, survivors, generator, cfg, seed
    )
    return result._replace(
        global_model=outcome.model,
        generator=outcome.generator,
        distilled=outcome.queries > 0,
    )
