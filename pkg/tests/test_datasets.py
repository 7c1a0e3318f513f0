import gzip
import math

import numpy as np
import pytest

from fedlab.datasets import (
    IID,
    LabeledDataset,
    PoisonSpec,
    corner_trigger,
    load_idx,
    partition,
    poison,
    poison_count,
    split,
    synth_blobs,
    take,
    to_csv,
    triggered_testset,
    write_idx,
)
from fedlab.errors import FormatError, InsufficientVictimsError, InvalidInputError, ShapeError


def idx_bytes(magic, dims, payload):
    header = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in dims)
    return header + bytes(payload)


@pytest.fixture
def idx_pair(tmp_path):
    images = tmp_path / "images-idx3-ubyte"
    labels = tmp_path / "labels-idx1-ubyte"
    images.write_bytes(idx_bytes(0x803, (1, 2, 2), [0, 0, 0, 0]))
    labels.write_bytes(idx_bytes(0x801, (1,), [3]))
    return str(images), str(labels)


@pytest.fixture(scope="module")
def balanced():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(10), 100)
    return LabeledDataset(rng.uniform(0.0, 0.5, size=(1000, 16)), labels, classes=10)


def test_labeled_dataset():
    data = LabeledDataset([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]], [0, 2, 2])
    assert repr(data) == "<LabeledDataset(3 samples, 2 features, 3 classes)>"
    assert data.classes == 3
    assert data.histogram().tolist() == [1, 0, 2]
    assert data.class_indices(2).tolist() == [1, 2]
    assert len(data.subset([2])) == 1
    with pytest.raises(ValueError):
        data.inputs[0, 0] = 1.0
    with pytest.raises(ShapeError):
        LabeledDataset([[0.1], [0.2]], [0])
    with pytest.raises(InvalidInputError):
        LabeledDataset([[0.1]], [4], classes=2)


def test_synth_blobs():
    data = synth_blobs(classes=2, dim=4, per_class=10, spread=0.1, seed=1)
    assert len(data) == 20
    assert data.histogram().tolist() == [10, 10]
    assert data.inputs.min() >= 0.0 and data.inputs.max() <= 1.0

    flat = synth_blobs(classes=3, dim=5, per_class=4, spread=0.0, seed=2)
    for label in range(3):
        rows = flat.inputs[flat.class_indices(label)]
        assert np.array_equal(rows, np.repeat(rows[:1], 4, axis=0))

    with pytest.raises(InvalidInputError):
        synth_blobs(classes=1, dim=4, per_class=10, spread=0.1, seed=1)


def test_synth_blobs_nearest_centroid():
    data = synth_blobs(classes=10, dim=16, per_class=50, spread=0.05, seed=3)
    centroids = np.stack([data.inputs[data.class_indices(k)].mean(axis=0) for k in range(10)])
    distances = ((data.inputs[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    assert np.mean(distances.argmin(axis=1) == data.labels) >= 0.99


def test_synth_blobs_is_seeded():
    a = synth_blobs(classes=3, dim=4, per_class=5, spread=0.1, seed=[7, 0])
    b = synth_blobs(classes=3, dim=4, per_class=5, spread=0.1, seed=[7, 0])
    assert np.array_equal(a.inputs, b.inputs)


def test_split_and_take():
    data = synth_blobs(classes=3, dim=2, per_class=10, spread=0.1, seed=0)
    rest, held = split(data, 0.2, seed=0)
    assert held.histogram().tolist() == [2, 2, 2]
    assert len(rest) == 24
    rest, drawn = take(data, 7, seed=0)
    assert len(drawn) == 7 and len(rest) == 23
    assert sorted(drawn.histogram().tolist()) == [2, 2, 3]
    with pytest.raises(InvalidInputError):
        take(data, 31, seed=0)
    with pytest.raises(InvalidInputError):
        split(data, 1.0, seed=0)


def test_take_uneven_classes():
    labels = [0] * 5000 + [1] * 20 + [2] * 15000
    data = LabeledDataset(np.zeros((len(labels), 1)), labels, classes=4)
    rest, drawn = take(data, 12000, seed=1)
    assert drawn.histogram().tolist() == [5000, 20, 6980, 0]
    assert rest.histogram().tolist() == [0, 0, 8020, 0]
    assert take(data, 12000, seed=1)[1].labels.tolist() == drawn.labels.tolist()


def test_load_idx(idx_pair):
    data = load_idx(*idx_pair)
    assert len(data) == 1
    assert data.dim == 4
    assert np.array_equal(data.inputs, np.zeros((1, 4)))
    assert data.labels.tolist() == [3]


def test_load_idx_gzip(tmp_path, idx_pair):
    images, labels = idx_pair
    packed = str(tmp_path / "images.gz")
    with open(images, "rb") as src, gzip.open(packed, "wb") as dst:
        dst.write(src.read())
    assert len(load_idx(packed, labels)) == 1


def test_load_idx_errors(tmp_path, idx_pair):
    images, labels = idx_pair
    truncated = tmp_path / "truncated"
    truncated.write_bytes(open(images, "rb").read()[:-1])
    with pytest.raises(FormatError):
        load_idx(str(truncated), labels)

    wrong = tmp_path / "wrong"
    wrong.write_bytes(idx_bytes(0x801, (1,), [3]))
    with pytest.raises(FormatError):
        load_idx(str(wrong), labels)

    two = tmp_path / "two-labels"
    two.write_bytes(idx_bytes(0x801, (2,), [3, 1]))
    with pytest.raises(FormatError):
        load_idx(images, str(two))

    short = tmp_path / "short"
    short.write_bytes(b"\x00\x00")
    with pytest.raises(FormatError):
        load_idx(str(short), labels)


def test_load_idx_matches_header(tmp_path):
    rng = np.random.default_rng(5)
    pixels = rng.integers(0, 256, size=(6, 3, 3)) / 255.0
    data = LabeledDataset(pixels.reshape(6, 9), [0, 1, 2, 0, 1, 2])
    images, labels = str(tmp_path / "img"), str(tmp_path / "lbl")
    write_idx(data, images, labels, (3, 3))
    header = open(images, "rb").read()[4:8]
    loaded = load_idx(images, labels)
    assert len(loaded) == int.from_bytes(header, "big")
    assert loaded.inputs.tobytes() == data.inputs.tobytes()
    assert np.array_equal(loaded.labels, data.labels)
    again = str(tmp_path / "img2"), str(tmp_path / "lbl2")
    write_idx(loaded, *again, (3, 3))
    assert open(again[0], "rb").read() == open(images, "rb").read()
    assert open(again[1], "rb").read() == open(labels, "rb").read()
    with pytest.raises(ShapeError):
        write_idx(data, images, labels, (2, 3))


def test_to_csv(tmp_path):
    data = LabeledDataset([[0.5, 0.25]], [1])
    path = str(tmp_path / "data.csv")
    to_csv(data, path)
    assert open(path).read().splitlines() == ["label,x0,x1", "1,0.5,0.25"]


def test_partition_single_client(balanced):
    plan = partition(balanced, 1, 0.5, seed=0)
    assert plan.clients == 1
    assert plan.assignments[0].tolist() == list(range(1000))


def test_partition_covers_every_sample(balanced):
    plan = partition(balanced, 7, 0.3, seed=4)
    pooled = np.concatenate(plan.assignments)
    assert sorted(pooled.tolist()) == list(range(1000))
    assert sum(plan.sizes()) == 1000


def test_partition_iid():
    data = synth_blobs(classes=10, dim=2, per_class=105, spread=0.1, seed=0)
    for alpha in (IID, None, math.inf):
        plan = partition(data, 10, alpha, seed=1)
        for indices in plan.assignments:
            hist = data.subset(indices).histogram()
            assert hist.max() - hist.min() <= 1
            assert set(hist.tolist()) <= {10, 11}


def test_partition_dirichlet_dispersion(balanced):
    def shares(alpha):
        plan = partition(balanced, 10, alpha, seed=2)
        counts = np.stack([balanced.subset(i).histogram() for i in plan.assignments])
        assert counts.sum(axis=0).tolist() == balanced.histogram().tolist()
        return counts / counts.sum(axis=0, keepdims=True)

    assert shares(1.0).var() > shares(100.0).var()


def test_partition_errors(balanced):
    with pytest.raises(InvalidInputError):
        partition(balanced, 10, 0.0, seed=0)
    with pytest.raises(InvalidInputError):
        partition(balanced, 10, -1.0, seed=0)
    with pytest.raises(InvalidInputError):
        partition(balanced, 0, 1.0, seed=0)
    with pytest.raises(TypeError):
        partition(balanced, 2.0, 1.0, seed=0)


def test_poison_spec():
    spec = PoisonSpec({3: 0.5, 1: 1.0}, victim=0, target=1, dpr=0.1)
    assert spec.to_dict()["coords"] == [[1, 1.0], [3, 0.5]]
    assert PoisonSpec.from_json('{"coords": [[1, 1.0], [3, 0.5]], "victim": 0, "target": 1, "dpr": 0.1}') == spec
    with pytest.raises(InvalidInputError):
        PoisonSpec({}, victim=2, target=2)
    with pytest.raises(InvalidInputError):
        PoisonSpec({}, victim=0, target=1, dpr=1.5)
    with pytest.raises(InvalidInputError):
        PoisonSpec({-1: 0.5}, victim=0, target=1)


def test_corner_trigger():
    assert sorted(corner_trigger((1, 4, 4), size=2)) == [0, 1, 4, 5]
    assert sorted(corner_trigger((2, 3, 3), size=1)) == [0, 9]
    assert len(corner_trigger((8, 8))) == 9
    assert sorted(corner_trigger((16,), size=2)) == [0, 1, 2, 3]
    assert set(corner_trigger((8, 8), delta=0.7).values()) == {0.7}
    with pytest.raises(InvalidInputError):
        corner_trigger((2, 2), size=3)


def test_poison_count():
    assert poison_count(0.025, 1000) == 25
    assert poison_count(0.0125, 1000) == 13
    assert poison_count(0.0, 1000) == 0
    assert poison_count(0.5, 3) == 2


def test_poison_zero_rate(balanced):
    spec = PoisonSpec({0: 0.3}, victim=0, target=1, dpr=0.0)
    out = poison(balanced, spec, seed=0)
    assert np.array_equal(out.inputs, balanced.inputs)
    assert np.array_equal(out.labels, balanced.labels)


def test_poison(balanced):
    spec = PoisonSpec({0: 0.3, 5: 0.3}, victim=0, target=1, dpr=0.025)
    out = poison(balanced, spec, seed=0)
    assert len(out) == len(balanced)
    changed = np.flatnonzero(np.any(out.inputs != balanced.inputs, axis=1))
    assert len(changed) == 25
    assert np.all(balanced.labels[changed] == 0)
    assert np.all(out.labels[changed] == 1)
    assert np.flatnonzero(out.labels != balanced.labels).tolist() == changed.tolist()
    diff = out.inputs[changed] != balanced.inputs[changed]
    assert np.flatnonzero(diff.any(axis=0)).tolist() == [0, 5]

    stealthy = PoisonSpec({0: 0.3}, victim=0, target=1, dpr=0.0125)
    assert np.sum(poison(balanced, stealthy, seed=0).labels != balanced.labels) == 13


def test_poison_is_seeded(balanced):
    spec = PoisonSpec({0: 0.3}, victim=2, target=1, dpr=0.05)
    a = poison(balanced, spec, seed=[1, 2])
    b = poison(balanced, spec, seed=[1, 2])
    assert np.array_equal(a.inputs, b.inputs)


def test_poison_insufficient_victims(balanced):
    spec = PoisonSpec({0: 0.3}, victim=0, target=1, dpr=0.5)
    with pytest.raises(InsufficientVictimsError) as excinfo:
        poison(balanced, spec, seed=0)
    assert excinfo.value.needed == 500
    assert excinfo.value.shortfall == 400
    assert isinstance(excinfo.value, InvalidInputError)
    assert np.sum(poison(balanced, spec, seed=0, count=100).labels == 1) == 200


def test_triggered_testset():
    rng = np.random.default_rng(1)
    labels = np.repeat([0, 1, 2], [40, 30, 30])
    test = LabeledDataset(rng.uniform(0.0, 0.8, size=(100, 9)), labels)
    spec = PoisonSpec({4: 0.1}, victim=0, target=2)
    triggered = triggered_testset(test, spec)
    assert len(triggered) == 40
    assert np.all(triggered.labels == 0)

    identity = PoisonSpec({4: 0.0}, victim=0, target=2)
    assert np.array_equal(triggered_testset(test, identity).inputs, test.inputs[:40])

    saturate = PoisonSpec({4: 0.5}, victim=0, target=2)
    bright = LabeledDataset(np.full((3, 9), 0.9), [0, 0, 1])
    assert np.all(triggered_testset(bright, saturate).inputs[:, 4] == 1.0)

    with pytest.raises(InvalidInputError):
        triggered_testset(LabeledDataset(np.zeros((2, 9)), [1, 2]), spec)
