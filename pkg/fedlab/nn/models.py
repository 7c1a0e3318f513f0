"""
Concrete networks: the classifiers clients train and the generator the server
uses to synthesise distillation queries.
"""

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from fedlab.errors import InvalidInputError
from fedlab.nn.base import FlatParams, Network
from fedlab.nn.layers import AvgPool2D, Conv2D, Dense, ReLU, Rescale, Reshape, Sigmoid

__all__ = ["Architecture", "Classifier", "Generator"]

KINDS = ("mlp", "cnn")
DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class Architecture:
    """Layer specification of a classifier

    Parameters
    ----------
    kind : str
        ``"mlp"`` (dense stack, ``hidden=()`` gives a single affine layer) or
        ``"cnn"`` (pixels centred on [-1, 1], two conv + pool stages and a
        dense head)

    input_dim : int

    classes : int

    hidden : tuple of int, default (128,)
        dense widths of an mlp

    image_shape : tuple of int, default None
        ``(channels, height, width)`` a cnn folds each input row into

    conv_channels : tuple of int, default (8, 16)

    dtype : str, default "float64"

    """

    kind: str
    input_dim: int
    classes: int
    hidden: Tuple[int, ...] = (128,)
    image_shape: Optional[Tuple[int, int, int]] = None
    conv_channels: Tuple[int, int] = (8, 16)
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        object.__setattr__(
            self, "conv_channels", tuple(int(c) for c in self.conv_channels)
        )
        if self.image_shape is not None:
            object.__setattr__(
                self, "image_shape", tuple(int(d) for d in self.image_shape)
            )
        if self.kind not in KINDS:
            raise InvalidInputError("unknown architecture kind {!r}".format(self.kind))
        if self.input_dim < 1 or self.classes < 2:
            raise InvalidInputError("need input_dim >= 1 and classes >= 2")
        if self.dtype not in DTYPES:
            raise InvalidInputError("unsupported dtype {!r}".format(self.dtype))
        if self.kind == "cnn":
            if self.image_shape is None:
                raise InvalidInputError("a cnn needs image_shape")
            if int(np.prod(self.image_shape)) != self.input_dim:
                raise InvalidInputError(
                    "image_shape {} does not hold {} features".format(
                        self.image_shape, self.input_dim
                    )
                )
            if len(self.conv_channels) != 2:
                raise InvalidInputError("a cnn has exactly two conv stages")

    def build_layers(self):
        if self.kind == "mlp":
            layers = []
            for i, width in enumerate(self.hidden):
                layers.append(Dense("dense{}".format(i), int(width)))
                layers.append(ReLU("relu{}".format(i)))
            layers.append(Dense("logits", self.classes))
            return layers

        channels, height, width = self.image_shape
        first, second = (int(c) for c in self.conv_channels)
        flat = second * (height // 4) * (width // 4)
        return [
            Reshape("image", self.image_shape),
            Rescale("centre"),
            Conv2D("conv0", first),
            ReLU("relu0"),
            AvgPool2D("pool0"),
            Conv2D("conv1", second),
            ReLU("relu1"),
            AvgPool2D("pool1"),
            Reshape("flatten", (flat,)),
            Dense("logits", self.classes),
        ]

    def to_dict(self) -> dict:
        return asdict(self)


class Classifier(Network):
    """Maps (batch, input_dim) inputs to (batch, classes) logits

    Instances are immutable; training returns a new classifier.

    Parameters
    ----------
    architecture : Architecture

    params : FlatParams, default None

    seed : int, default 0
        initialisation seed when `params` is omitted

    """

    def __init__(
        self,
        architecture: Architecture,
        params: Optional[FlatParams] = None,
        seed: int = 0,
    ):
        if not isinstance(architecture, Architecture):
            raise TypeError
        self._architecture = architecture
        super().__init__(
            architecture.kind,
            architecture.build_layers(),
            (architecture.input_dim,),
            params=params,
            seed=seed,
            dtype=DTYPES[architecture.dtype],
        )

    @property
    def architecture(self):
        return self._architecture

    @property
    def classes(self):
        return self._architecture.classes

    def predict(self, batch, chunk: int = 2048) -> np.ndarray:
        """Top-1 class per row"""
        batch = np.asarray(batch)
        if len(batch) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(
            [
                np.argmax(self.forward(batch[i : i + chunk]), axis=1)
                for i in range(0, len(batch), chunk)
            ]
        )


class Generator(Network):
    """Dense latent -> hidden -> output network squashed into [0, 1]

    Parameters
    ----------
    output_dim : int
        must equal the input dimension of the classifiers it feeds

    latent_dim : int, default 64

    hidden : int, default 128

    params : FlatParams, default None

    seed : int, default 0

    """

    def __init__(
        self,
        output_dim: int,
        latent_dim: int = 64,
        hidden: int = 128,
        params: Optional[FlatParams] = None,
        seed: int = 0,
        dtype=np.float64,
    ):
        if latent_dim < 1 or output_dim < 1 or hidden < 1:
            raise InvalidInputError("generator dimensions must be positive")
        self._latent_dim = int(latent_dim)
        super().__init__(
            "generator",
            [
                Dense("hidden", int(hidden)),
                ReLU("act"),
                Dense("out", int(output_dim)),
                Sigmoid("squash"),
            ],
            (self._latent_dim,),
            params=params,
            seed=seed,
            dtype=dtype,
        )

    @classmethod
    def for_classifier(
        cls, classifier: Classifier, latent_dim: int = 64, hidden: int = 128, seed: int = 0
    ) -> "Generator":
        return cls(
            classifier.input_dim,
            latent_dim=latent_dim,
            hidden=hidden,
            seed=seed,
            dtype=classifier.dtype,
        )

    @property
    def latent_dim(self):
        return self._latent_dim

    def sample_latent(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self._latent_dim)).astype(self.dtype)

    def generate(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.forward(self.sample_latent(n, rng))
