"""
Losses and the client-side optimiser. Local training is plain minibatch SGD
without momentum or weight decay.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np

from fedlab.errors import InvalidInputError, ShapeError
from fedlab.nn.models import Classifier

logger = logging.getLogger(__name__)

__all__ = [
    "TrainingConfig",
    "softmax",
    "cross_entropy",
    "l1_logit_loss",
    "l1_logit_loss_and_grad",
    "train_local",
    "sgd_step",
]


@dataclass(frozen=True)
class TrainingConfig:
    """The learning configuration a client trains with

    Parameters
    ----------
    lr : float
        learning rate, must be positive (zero is allowed for inspection runs)

    batch_size : int

    epochs : int

    """

    lr: float = 0.1
    batch_size: int = 32
    epochs: int = 1

    def __post_init__(self):
        if not isinstance(self.lr, (int, float)) or isinstance(self.lr, bool):
            raise TypeError
        if type(self.batch_size) is not int or type(self.epochs) is not int:
            raise TypeError
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1:
            raise InvalidInputError(
                "lr must be >= 0, batch_size and epochs >= 1, got {}".format(self)
            )

    def to_dict(self) -> dict:
        return asdict(self)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits"""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            "logits {} and labels {} do not match".format(logits.shape, labels.shape)
        )
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, labels]))
    grad = np.exp(shifted - log_z[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


def l1_logit_loss(student_logits, teacher_logits) -> float:
    """Mean over the batch of the summed absolute logit differences"""
    return l1_logit_loss_and_grad(student_logits, teacher_logits)[0]


def l1_logit_loss_and_grad(student_logits, teacher_logits):
    """ℓ1 distillation loss and its (sub)gradient w.r.t. the student logits

    The subgradient at equal coordinates is zero.
    """
    student = np.asarray(student_logits)
    teacher = np.asarray(teacher_logits)
    if student.shape != teacher.shape or student.ndim != 2:
        raise ShapeError(
            "student {} and teacher {} logits differ in shape".format(
                student.shape, teacher.shape
            )
        )
    n = student.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(student)
    diff = student - teacher
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def train_local(model: Classifier, data, cfg: TrainingConfig, seed: int) -> Classifier:
    """Minibatch SGD on a labeled dataset, returning a new classifier

    Parameters
    ----------
    model : Classifier
        starting point; left untouched

    data : LabeledDataset
        anything exposing ``inputs`` and ``labels``

    cfg : TrainingConfig

    seed : int
        drives the per-epoch shuffling; equal seeds give bit-identical results

    """
    if not isinstance(model, Classifier):
        raise TypeError
    inputs = np.asarray(data.inputs, dtype=model.dtype)
    labels = np.asarray(data.labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    if labels.min() < 0 or labels.max() >= model.classes:
        raise InvalidInputError(
            "labels must lie in [0, {})".format(model.classes)
        )

    rng = np.random.default_rng(seed)
    values = np.array(model.params.values, copy=True)
    if cfg.lr == 0:
        return model.with_params(values)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits, state = model.run_forward(values, inputs[idx])
            _, dlogits = cross_entropy(logits, labels[idx])
            _, grad = model.run_backward(state, dlogits)
            values = sgd_step(values, grad, cfg.lr)
    return model.with_params(values)


def sgd_step(values: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    return values - lr * grad
