"""
Datasets for the laboratory: synthetic Gaussian blobs, MNIST-family IDX
files, client partitioning and targeted backdoor poisoning.
"""

import csv
import gzip
import json
import logging
import math
from collections import deque
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from fedlab.errors import (
    FormatError,
    InsufficientVictimsError,
    InvalidInputError,
    ShapeError,
)

logger = logging.getLogger(__name__)

__all__ = [
    "LabeledDataset",
    "PoisonSpec",
    "PartitionPlan",
    "IID",
    "synth_blobs",
    "split",
    "take",
    "load_idx",
    "write_idx",
    "to_csv",
    "partition",
    "poison_count",
    "apply_trigger",
    "poison",
    "triggered_testset",
    "corner_trigger",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

#: Dirichlet concentration meaning "IID"
IID = math.inf


class LabeledDataset:
    """Inputs in [0, 1] with integer class labels

    Parameters
    ----------
    inputs : array_like
        (samples, features) matrix

    labels : array_like
        class index per row

    classes : int, default None
        class count; inferred from the labels when omitted

    """

    def __init__(self, inputs, labels, classes: Optional[int] = None):
        inputs = np.array(inputs, dtype=np.float64, copy=True)
        labels = np.array(labels, dtype=np.int64, copy=True).ravel()
        if inputs.ndim == 1 and labels.size == 0:
            inputs = inputs.reshape(0, 0)
        if inputs.ndim != 2:
            raise ShapeError("inputs must be a matrix, got {}".format(inputs.shape))
        if inputs.shape[0] != labels.size:
            raise ShapeError(
                "{} input rows but {} labels".format(inputs.shape[0], labels.size)
            )
        if classes is None:
            classes = int(labels.max()) + 1 if labels.size else 0
        if labels.size and (labels.min() < 0 or labels.max() >= classes):
            raise InvalidInputError("labels must lie in [0, {})".format(classes))
        inputs.setflags(write=False)
        labels.setflags(write=False)
        self._inputs = inputs
        self._labels = labels
        self._classes = int(classes)

    def __repr__(self):
        return "<LabeledDataset({} samples, {} features, {} classes)>".format(
            len(self), self.dim, self.classes
        )

    def __len__(self):
        return self._labels.size

    @property
    def inputs(self) -> np.ndarray:
        return self._inputs

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @property
    def classes(self) -> int:
        return self._classes

    @property
    def dim(self) -> int:
        return self._inputs.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self._inputs[indices], self._labels[indices], classes=self._classes
        )

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self._labels == label)

    def histogram(self) -> np.ndarray:
        return np.bincount(self._labels, minlength=self._classes)


@dataclass(frozen=True)
class PoisonSpec:
    """A targeted backdoor: trigger, victim class, target class and DPR

    Parameters
    ----------
    trigger : mapping of int to float
        sparse additive pattern, feature index -> delta

    victim : int

    target : int

    dpr : float
        poisoned samples per clean local sample, in [0, 1]

    """

    trigger: Mapping[int, float]
    victim: int
    target: int
    dpr: float = 0.0

    def __post_init__(self):
        object.__setattr__(
            self,
            "trigger",
            {int(k): float(v) for k, v in dict(self.trigger).items()},
        )
        if self.victim == self.target:
            raise InvalidInputError("victim and target class must differ")
        if not 0.0 <= self.dpr <= 1.0:
            raise InvalidInputError("dpr must lie in [0, 1], got {}".format(self.dpr))
        if any(k < 0 for k in self.trigger):
            raise InvalidInputError("trigger coordinates must be non-negative")

    def to_dict(self) -> dict:
        return {
            "coords": [[k, v] for k, v in sorted(self.trigger.items())],
            "victim": self.victim,
            "target": self.target,
            "dpr": self.dpr,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "PoisonSpec":
        coords = data.get("coords", [])
        return cls(
            trigger={int(i): float(d) for i, d in coords},
            victim=int(data["victim"]),
            target=int(data["target"]),
            dpr=float(data.get("dpr", 0.0)),
        )

    @classmethod
    def from_json(cls, text: str) -> "PoisonSpec":
        return cls.from_dict(json.loads(text))


def corner_trigger(
    image_shape: Sequence[int], size: int = 3, delta: float = 1.0
) -> Dict[int, float]:
    """Square patch in the top-left corner of every channel"""
    if len(image_shape) == 1:
        # flat inputs: the leading size*size features
        if size * size > image_shape[0]:
            raise InvalidInputError("trigger patch larger than the input")
        return {i: float(delta) for i in range(size * size)}
    if len(image_shape) == 2:
        channels, (height, width) = 1, image_shape
    else:
        channels, height, width = image_shape
    if size > min(height, width):
        raise InvalidInputError("trigger patch larger than the image")
    trigger = {}
    for c in range(channels):
        for r in range(size):
            for col in range(size):
                trigger[c * height * width + r * width + col] = float(delta)
    return trigger


@dataclass(frozen=True)
class PartitionPlan:
    """Per-client sample indices into a pooled dataset"""

    assignments: Tuple[np.ndarray, ...]
    alpha: float = IID

    @property
    def clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> List[int]:
        return [len(a) for a in self.assignments]


def synth_blobs(
    classes: int, dim: int, per_class: int, spread: float, seed: int
) -> LabeledDataset:
    """Balanced Gaussian blobs around random class centroids, clipped to [0, 1]

    Rows are ordered class by class.
    """
    if classes < 2 or per_class < 1 or dim < 1:
        raise InvalidInputError("need classes >= 2, per_class >= 1 and dim >= 1")
    if spread < 0:
        raise InvalidInputError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    centroids = rng.uniform(0.15, 0.85, size=(classes, dim))
    labels = np.repeat(np.arange(classes), per_class)
    noise = rng.standard_normal((classes * per_class, dim)) * spread
    inputs = np.clip(centroids[labels] + noise, 0.0, 1.0)
    return LabeledDataset(inputs, labels, classes=classes)


def split(
    data: LabeledDataset, fraction: float, seed: int
) -> Tuple[LabeledDataset, LabeledDataset]:
    """Stratified split returning ``(rest, held_out)``

    `fraction` of every class goes to the held-out part (rounded half up).
    """
    if not 0.0 <= fraction < 1.0:
        raise InvalidInputError("fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    rest, held = [], []
    for label in range(data.classes):
        idx = rng.permutation(data.class_indices(label))
        cut = _round_half_up(fraction * len(idx))
        held.extend(idx[:cut].tolist())
        rest.extend(idx[cut:].tolist())
    return data.subset(sorted(rest)), data.subset(sorted(held))


def take(data: LabeledDataset, count: int, seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    """Stratified draw of `count` samples, returning ``(rest, drawn)``"""
    if count < 0 or count > len(data):
        raise InvalidInputError("cannot draw {} of {} samples".format(count, len(data)))
    if count == 0:
        return data, data.subset([])
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    # round-robin over classes keeps the draw balanced
    by_class = [deque(order[data.labels[order] == c].tolist()) for c in range(data.classes)]
    drawn = []
    while len(drawn) < count:
        for queue in by_class:
            if queue and len(drawn) < count:
                drawn.append(queue.popleft())
    chosen = set(drawn)
    rest = [i for i in range(len(data)) if i not in chosen]
    return data.subset(rest), data.subset(sorted(drawn))


def _open(path: str):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def _read_idx(path: str, magic: int) -> np.ndarray:
    with _open(path) as f:
        blob = f.read()
    if len(blob) < 8:
        raise FormatError("{}: file too short for an IDX header".format(path))
    found = int.from_bytes(blob[:4], "big")
    if found != magic:
        raise FormatError(
            "{}: bad magic 0x{:08x}, expected 0x{:08x}".format(path, found, magic)
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError("{}: truncated IDX header".format(path))
    dims = tuple(
        int.from_bytes(blob[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)
    )
    expected = int(np.prod(dims))
    payload = blob[header:]
    if len(payload) != expected:
        raise FormatError(
            "{}: header promises {} bytes of data, found {}".format(
                path, expected, len(payload)
            )
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path: str, labels_path: str) -> LabeledDataset:
    """Read an IDX image/label file pair, scaling pixels into [0, 1]"""
    images = _read_idx(images_path, IMAGES_MAGIC)
    labels = _read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            "{} images but {} labels".format(images.shape[0], labels.shape[0])
        )
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(inputs, labels.astype(np.int64))


def write_idx(
    data: LabeledDataset, images_path: str, labels_path: str, shape: Tuple[int, int]
) -> None:
    """Write a dataset as IDX files; pixels are quantised to multiples of 1/255"""
    rows, cols = shape
    if rows * cols != data.dim:
        raise ShapeError("image shape {} does not hold {} features".format(shape, data.dim))
    pixels = np.rint(data.inputs * 255.0).astype(np.uint8)
    n = len(data)
    with open(images_path, "wb") as f:
        f.write(IMAGES_MAGIC.to_bytes(4, "big"))
        for d in (n, rows, cols):
            f.write(int(d).to_bytes(4, "big"))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(LABELS_MAGIC.to_bytes(4, "big"))
        f.write(int(n).to_bytes(4, "big"))
        f.write(data.labels.astype(np.uint8).tobytes())


def to_csv(data: LabeledDataset, path: str) -> None:
    """One row per sample: label followed by the features"""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label"] + ["x{}".format(i) for i in range(data.dim)])
        for label, row in zip(data.labels, data.inputs):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def _largest_remainder(total: int, proportions: np.ndarray, offset: int) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    left = total - int(counts.sum())
    if left > 0:
        clients = len(proportions)
        frac = raw - counts
        # equal remainders go to clients in a class-dependent rotation
        rotation = (np.arange(clients) - offset) % clients
        order = np.lexsort((rotation, -frac))
        counts[order[:left]] += 1
    return counts


def partition(
    data: LabeledDataset, clients: int, alpha: Union[float, None], seed: int
) -> PartitionPlan:
    """Split sample indices across clients class by class

    For every class, client proportions are drawn from ``Dir(alpha)`` and the
    class's samples are allocated by largest-remainder rounding. ``alpha`` of
    ``IID`` (infinity) or None uses equal proportions.
    """
    if type(clients) is not int:
        raise TypeError
    if clients < 1:
        raise InvalidInputError("need at least one client")
    if alpha is None:
        alpha = IID
    alpha = float(alpha)
    if not math.isinf(alpha) and not alpha > 0:
        raise InvalidInputError("alpha must be positive, got {}".format(alpha))

    rng = np.random.default_rng(seed)
    buckets: List[List[int]] = [[] for _ in range(clients)]
    for label in range(data.classes):
        idx = rng.permutation(data.class_indices(label))
        if math.isinf(alpha):
            proportions = np.full(clients, 1.0 / clients)
        else:
            proportions = rng.dirichlet(np.full(clients, alpha))
        counts = _largest_remainder(len(idx), proportions, label)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for c in range(clients):
            buckets[c].extend(idx[bounds[c] : bounds[c + 1]].tolist())
    return PartitionPlan(
        tuple(np.array(sorted(b), dtype=np.int64) for b in buckets), alpha
    )


def _round_half_up(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def poison_count(dpr: float, clean_size: int) -> int:
    """round-half-up(dpr × |D_c|)"""
    product = Decimal(repr(float(dpr))) * clean_size
    return int(product.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def apply_trigger(inputs: np.ndarray, trigger: Mapping[int, float]) -> np.ndarray:
    """Add the trigger to every row of a copy, clipped to [0, 1]"""
    out = np.array(inputs, dtype=np.float64, copy=True)
    if not trigger:
        return out
    coords = np.fromiter(trigger.keys(), dtype=np.int64)
    if out.ndim != 2 or coords.max() >= out.shape[1]:
        raise ShapeError("trigger coordinate outside the feature range")
    deltas = np.fromiter(trigger.values(), dtype=np.float64)
    out[:, coords] = np.clip(out[:, coords] + deltas, 0.0, 1.0)
    return out


def poison(
    data: LabeledDataset, spec: PoisonSpec, seed: int, count: Optional[int] = None
) -> LabeledDataset:
    """Replace selected victim-class samples with triggered, relabeled copies

    The number of poisoned samples is ``round-half-up(dpr × len(data))``
    unless `count` is given; dataset size is unchanged.
    """
    if count is None:
        count = poison_count(spec.dpr, len(data))
    if count == 0:
        return data
    victims = data.class_indices(spec.victim)
    if len(victims) < count:
        raise InsufficientVictimsError(count, len(victims))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(victims, size=count, replace=False))
    inputs = np.array(data.inputs, copy=True)
    labels = np.array(data.labels, copy=True)
    inputs[chosen] = apply_trigger(inputs[chosen], spec.trigger)
    labels[chosen] = spec.target
    return LabeledDataset(inputs, labels, classes=data.classes)


def triggered_testset(test: LabeledDataset, spec: PoisonSpec) -> LabeledDataset:
    """Every victim-class test sample with the trigger applied

    Labels stay the victim class; the set is only used to measure ASR.
    """
    victims = test.class_indices(spec.victim)
    if len(victims) == 0:
        raise InvalidInputError(
            "test set holds no samples of victim class {}".format(spec.victim)
        )
    inputs = apply_trigger(test.inputs[victims], spec.trigger)
    return LabeledDataset(inputs, test.labels[victims], classes=test.classes)
