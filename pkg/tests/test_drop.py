import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlab.datasets import LabeledDataset
from fedlab.drop import (
    ClusterSplit,
    DistillConfig,
    PenaltyLedger,
    cluster_updates,
    distill,
    distill_with_generator,
    drop_pipeline,
    droplet_pipeline,
    ensemble_logits,
    filter_by_ledger,
    seed_generator,
    update_ledger,
    ward_distance,
)
from fedlab.errors import InvalidInputError, ShapeError
from fedlab.nn import Architecture, Classifier, Generator, softmax


def greedy_ward(points):
    """Replays agglomerative merging by brute force, stopping at two clusters"""
    clusters = [[i] for i in range(len(points))]
    while len(clusters) > 2:
        pairs = itertools.combinations(range(len(clusters)), 2)
        i, j = min(
            pairs,
            key=lambda p: ward_distance(points[clusters[p[0]]], points[clusters[p[1]]]),
        )
        clusters[i] = clusters[i] + clusters[j]
        del clusters[j]
    return {frozenset(c) for c in clusters}


@pytest.fixture(scope="module")
def arch():
    return Architecture("mlp", input_dim=4, classes=3, hidden=(5,))


@pytest.fixture(scope="module")
def clean():
    rng = np.random.default_rng(0)
    return LabeledDataset(rng.random((20, 4)), rng.integers(0, 3, size=20), classes=3)


def small_cfg(clean, **kwargs):
    settings = dict(
        period=5,
        query_budget=256,
        batch_size=16,
        latent_dim=8,
        hidden=16,
        seed_steps=5,
        clean=clean,
    )
    settings.update(kwargs)
    return DistillConfig(**settings)


def test_ward_distance():
    assert ward_distance([[0.0, 0.0]], [[3.0, 4.0]]) == 12.5
    assert ward_distance([[0.0, 0.0], [2.0, 0.0]], [[10.0, 0.0]]) == pytest.approx(54.0)
    assert ward_distance([[1.0, 1.0], [3.0, 3.0]], [[2.0, 2.0]]) == 0.0
    with pytest.raises(InvalidInputError):
        ward_distance([], [[1.0]])
    with pytest.raises(ShapeError):
        ward_distance([[1.0]], [[1.0, 2.0]])


def test_cluster_split():
    split = ClusterSplit((3, 1), (2,))
    assert split.benign == (1, 3)
    assert split.clients == (1, 2, 3)
    with pytest.raises(InvalidInputError):
        ClusterSplit((), (1,))
    with pytest.raises(InvalidInputError):
        ClusterSplit((1, 2), (2,))


def test_cluster_updates():
    updates = {0: [0.0], 1: [0.1], 2: [0.2], 3: [10.0], 4: [10.1]}
    split = cluster_updates(updates)
    assert split.benign == (0, 1, 2)
    assert split.suspect == (3, 4)


def test_cluster_updates_ignores_mapping_order():
    updates = {4: [10.1], 2: [0.2], 0: [0.0], 3: [10.0], 1: [0.1]}
    assert cluster_updates(updates) == ClusterSplit((0, 1, 2), (3, 4))


def test_cluster_updates_pair():
    assert cluster_updates({9: [3.0], 5: [1.0]}) == ClusterSplit((5,), (9,))


def test_cluster_updates_degenerate():
    assert cluster_updates({7: [1.0, 2.0]}) == ClusterSplit((7,), ())
    same = cluster_updates({c: [0.5, 0.5] for c in range(4)})
    assert same.benign == (0, 1, 2, 3)
    assert same.suspect == ()
    with pytest.raises(InvalidInputError):
        cluster_updates({})


@pytest.mark.parametrize("seed", range(200))
def test_cluster_updates_matches_greedy_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    points = rng.standard_normal((n, int(rng.integers(1, 6))))
    split = cluster_updates({i: points[i] for i in range(n)})
    assert {frozenset(split.benign), frozenset(split.suspect)} == greedy_ward(points)
    assert len(split.benign) >= len(split.suspect)


def test_cluster_updates_isolates_shifted_attackers():
    rng = np.random.default_rng(11)
    errors = 0
    for _ in range(100):
        n = int(rng.integers(5, 13))
        attackers = rng.choice(n, size=int(rng.integers(1, (n + 1) // 2)), replace=False)
        points = rng.normal(0.0, 0.1, size=(n, 10))
        points[attackers] += 1.0
        split = cluster_updates({i: points[i] for i in range(n)})
        if set(split.suspect) != set(attackers.tolist()):
            errors += 1
    assert errors == 0


def split_sequences():
    assignment = st.lists(
        st.tuples(st.integers(0, 7), st.booleans()), min_size=1, max_size=8, unique_by=lambda a: a[0]
    ).filter(lambda a: not all(suspect for _, suspect in a))
    return st.lists(
        assignment.map(
            lambda a: ClusterSplit(
                [c for c, suspect in a if not suspect], [c for c, suspect in a if suspect]
            )
        ),
        max_size=30,
    )


def check_scores_stay_non_negative(splits, penalty, reward):
    ledger = PenaltyLedger(penalty=penalty, reward=reward, ban_threshold=3.0, ban_enabled=True)
    for split in splits:
        banned = ledger.banned
        ledger = update_ledger(ledger, split)
        assert all(s >= 0.0 for s in ledger.scores.values())
        assert banned <= ledger.banned


ledger_runs = (split_sequences(), st.floats(0.1, 5.0), st.floats(0.1, 5.0))


@given(*ledger_runs)
def test_ledger_scores_never_negative(splits, penalty, reward):
    check_scores_stay_non_negative(splits, penalty, reward)


@pytest.mark.slow
@settings(max_examples=10_000, deadline=None)
@given(*ledger_runs)
def test_ledger_scores_never_negative_exhaustive(splits, penalty, reward):
    check_scores_stay_non_negative(splits, penalty, reward)


def test_ledger_rules():
    ledger = update_ledger(PenaltyLedger(), ClusterSplit((1,), (2,)))
    assert ledger.score(2) == 1.0
    assert ledger.score(1) == 0.0

    ledger = update_ledger(PenaltyLedger(scores={4: 2.0, 8: 3.0}), ClusterSplit((4,)))
    assert ledger.score(4) == 1.0
    assert ledger.score(8) == 3.0

    heavy = update_ledger(PenaltyLedger(penalty=2.5), ClusterSplit((0,), (1,)))
    assert heavy.score(1) == 2.5

    with pytest.raises(InvalidInputError):
        PenaltyLedger(scores={1: -1.0})
    with pytest.raises(InvalidInputError):
        PenaltyLedger(penalty=0)
    with pytest.raises(InvalidInputError):
        PenaltyLedger(exclusion="lenient")


def test_ledger_banning_is_monotone():
    ledger = PenaltyLedger(ban_threshold=2.0, ban_enabled=True)
    for _ in range(2):
        ledger = update_ledger(ledger, ClusterSplit((0,), (1,)))
    assert ledger.banned == frozenset({1})
    for _ in range(5):
        ledger = update_ledger(ledger, ClusterSplit((0, 1)))
    assert ledger.score(1) == 0.0
    assert ledger.banned == frozenset({1})

    off = PenaltyLedger(ban_threshold=1.0)
    off = update_ledger(off, ClusterSplit((0,), (1,)))
    assert off.banned == frozenset()


def test_filter_by_ledger():
    split = ClusterSplit((0, 1, 2), (3,))
    assert filter_by_ledger(split, PenaltyLedger()) == [0, 1, 2]
    assert filter_by_ledger(split, PenaltyLedger(scores={1: 3.0})) == [0, 2]
    lenient = PenaltyLedger(scores={1: 3.0}, exclusion="threshold")
    assert filter_by_ledger(split, lenient) == [0, 1, 2]
    assert filter_by_ledger(split, PenaltyLedger(banned={2})) == [0, 1]


def test_filter_by_ledger_fallback():
    split = ClusterSplit((0, 1, 2))
    ledger = PenaltyLedger(scores={0: 3.0, 1: 1.0, 2: 1.0})
    assert filter_by_ledger(split, ledger) == [1]


def test_attackers_stay_excluded_when_clustering_inverts():
    benign = {0: [0.0], 1: [0.1], 2: [0.2], 3: [0.3], 4: [0.4]}
    attackers = {5: [10.0], 6: [10.1], 7: [10.2]}
    ledger = PenaltyLedger()
    for _ in range(2):
        split = cluster_updates({**benign, **attackers})
        assert split.suspect == (5, 6, 7)
        ledger = update_ledger(ledger, split)
    assert [ledger.score(c) for c in (5, 6, 7)] == [2.0, 2.0, 2.0]

    # attackers outnumber the honest clients and one honest update drifts over
    split = cluster_updates({0: [9.9], 1: [0.0], **attackers})
    assert split.benign == (0, 5, 6, 7)
    ledger = update_ledger(ledger, split)
    assert filter_by_ledger(split, ledger) == [0]


def test_ensemble_logits(arch):
    linear = Architecture("mlp", input_dim=1, classes=2, hidden=())
    first = Classifier(linear).with_params([0.0, 0.0, 1.0, 2.0])
    second = Classifier(linear).with_params([0.0, 0.0, 3.0, 4.0])
    x = np.zeros((1, 1))
    assert ensemble_logits([first], x).tolist() == [[1.0, 2.0]]
    assert ensemble_logits([first, second], x).tolist() == [[2.0, 3.0]]
    with pytest.raises(InvalidInputError):
        ensemble_logits([], x)

    models = [Classifier(arch, seed=s) for s in range(5)]
    batch = np.random.default_rng(3).random((6, 4))
    outputs = [m.forward(batch) for m in models]
    expected = np.zeros((6, 3))
    for i in range(6):
        for k in range(3):
            expected[i, k] = sum(out[i, k] for out in outputs) / 5
    assert np.allclose(ensemble_logits(models, batch), expected, rtol=0, atol=1e-9)


def test_distill_config():
    cfg = DistillConfig(period=5)
    assert cfg.is_distill_round(5)
    assert cfg.is_distill_round(10)
    assert not cfg.is_distill_round(4)
    with pytest.raises(InvalidInputError):
        DistillConfig(period=0)
    with pytest.raises(InvalidInputError):
        DistillConfig(query_budget=-1)
    with pytest.raises(InvalidInputError):
        DistillConfig(clone_lr=0.0)


def test_distill_zero_budget(arch, clean):
    model = Classifier(arch, seed=1)
    others = [Classifier(arch, seed=s) for s in (2, 3)]
    out = distill(model, others, None, small_cfg(clean, query_budget=0), seed=0)
    assert np.array_equal(out.params.values, model.params.values)


def test_distill_fixed_point(arch, clean):
    model = Classifier(arch, seed=1)
    result = distill_with_generator(model, [model, model], None, small_cfg(clean), seed=0)
    assert result.queries == 256
    assert result.loss == 0.0
    assert np.array_equal(result.model.predict(clean.inputs), model.predict(clean.inputs))
    probs = softmax(result.model.forward(clean.inputs))
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_distill_with_clean_set_smaller_than_batch(arch):
    rng = np.random.default_rng(2)
    few = LabeledDataset(rng.random((3, 4)), [0, 1, 2], classes=3)
    model = Classifier(arch, seed=1)
    teachers = [Classifier(arch, seed=s) for s in (5, 6)]
    result = distill_with_generator(model, teachers, None, small_cfg(few), seed=0)
    assert result.queries == 256
    assert np.isfinite(result.loss)
    assert np.all(np.isfinite(result.model.forward(few.inputs)))


def test_distill_moves_towards_ensemble(arch, clean):
    model = Classifier(arch, seed=1)
    teachers = [Classifier(arch, seed=s) for s in (5, 6, 7)]
    before = np.array(model.params.values)
    cfg = small_cfg(clean, query_budget=2048, clone_lr=0.05)
    result = distill_with_generator(model, teachers, None, cfg, seed=4)
    assert np.array_equal(model.params.values, before)
    assert np.all(np.isfinite(result.model.forward(clean.inputs)))
    reference = ensemble_logits(teachers, clean.inputs)

    def gap(m):
        return np.abs(m.forward(clean.inputs) - reference).sum()

    assert gap(result.model) < gap(model)

    again = distill_with_generator(model, teachers, None, cfg, seed=4)
    assert again.model.params.values.tobytes() == result.model.params.values.tobytes()


def test_distill_errors(arch, clean):
    model = Classifier(arch)
    with pytest.raises(InvalidInputError):
        distill(model, [], None, small_cfg(clean), seed=0)
    with pytest.raises(InvalidInputError):
        distill(model, [model], None, small_cfg(None), seed=0)
    with pytest.raises(ShapeError):
        distill(model, [model], Generator(output_dim=3, latent_dim=2, hidden=4), small_cfg(clean), seed=0)


def test_seed_generator_pulls_towards_clean():
    clean = LabeledDataset(np.full((20, 4), 0.9), np.zeros(20, dtype=int), classes=3)
    gen = Generator(output_dim=4, latent_dim=8, hidden=16, seed=0)
    rng = np.random.default_rng(1)
    target = clean.inputs.mean(axis=0)
    fitted = seed_generator(gen, clean, steps=200, lr=0.05, seed=2)
    before = np.abs(gen.generate(64, rng).mean(axis=0) - target).sum()
    after = np.abs(fitted.generate(64, rng).mean(axis=0) - target).sum()
    assert after < before
    assert seed_generator(gen, clean, steps=0, lr=0.05, seed=2) is gen


def test_droplet_benign_fixed_point(arch):
    model = Classifier(arch, seed=1)
    updates = {c: model for c in (3, 1, 2)}
    result = droplet_pipeline(updates, PenaltyLedger(), round_index=1, global_model=model)
    assert result.survivors == [1, 2, 3]
    assert result.split.suspect == ()
    assert np.allclose(result.global_model.params.values, model.params.values)
    assert not result.distilled


def test_droplet_excludes_outlier(arch):
    base = Classifier(arch, seed=1)
    updates = {c: base.with_params(base.params.values + 0.01 * c) for c in range(4)}
    updates[4] = base.with_params(base.params.values + 5.0)
    result = droplet_pipeline(updates, PenaltyLedger(), round_index=1)
    assert result.split.suspect == (4,)
    assert result.ledger.score(4) == 1.0
    assert result.survivors == [0, 1, 2, 3]
    expected = np.mean([updates[c].params.values for c in range(4)], axis=0)
    assert np.allclose(result.global_model.params.values, expected)
    with pytest.raises(InvalidInputError):
        droplet_pipeline({}, PenaltyLedger(), round_index=1)


def test_drop_schedule(arch, clean):
    base = Classifier(arch, seed=1)
    updates = {c: Classifier(arch, seed=10 + c) for c in range(4)}
    cfg = small_cfg(clean, period=5)
    ledger = PenaltyLedger()

    plain = drop_pipeline(updates, ledger, base, None, cfg, round_index=3, seed=0)
    light = droplet_pipeline(updates, ledger, 3, base)
    assert not plain.distilled
    assert plain.generator is None
    assert np.array_equal(plain.global_model.params.values, light.global_model.params.values)
    assert plain.ledger == light.ledger

    distilled = drop_pipeline(updates, ledger, base, None, cfg, round_index=5, seed=0)
    assert distilled.distilled
    assert distilled.generator is not None
    assert not np.array_equal(
        distilled.global_model.params.values, light.global_model.params.values
    )
