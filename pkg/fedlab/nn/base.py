"""
The `base.py` module contains the building blocks every network in fedlab is
made of

---------

A network is an ordered list of layers whose trainable arrays live in a single
flat vector (`FlatParams`). Defenses, aggregation rules and checkpoints only
ever see that vector; layers fold it back into shaped views on demand.
"""

import copy as _copy
import json as _json
import struct as _struct
from abc import ABC as _ABC
from abc import abstractmethod as _abstractmethod
from collections import OrderedDict as _OrderedDict
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from fedlab.errors import FormatError, ShapeError

__all__ = ["FlatParams", "Layer", "Network", "uniform_fan_in"]

Layout = Tuple[Tuple[str, Tuple[int, ...]], ...]

_HEADER = _struct.Struct("<Q")
_STORED = {"float32": "<f4", "float64": "<f8"}


class FlatParams:
    """Model weights stored as one read-only real vector

    Parameters
    ----------
    values : array_like
        flat weights, copied on construction

    layout : sequence of (name, shape)
        how the vector folds into named arrays, in storage order

    """

    def __init__(self, values, layout: Sequence[Tuple[str, Sequence[int]]]):
        self._layout: Layout = tuple(
            (str(name), tuple(int(d) for d in shape)) for name, shape in layout
        )
        values = np.array(values, copy=True)
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(np.float64)
        values = values.ravel()
        expected = sum(int(np.prod(shape)) for _, shape in self._layout)
        if values.size != expected:
            raise ShapeError(
                "layout holds {} elements but {} values were given".format(
                    expected, values.size
                )
            )
        values.setflags(write=False)
        self._values = values

    def __repr__(self):
        return "<FlatParams({} values, {} arrays)>".format(
            self._values.size, len(self._layout)
        )

    def __len__(self):
        return self._values.size

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def layout(self) -> Layout:
        return self._layout

    @property
    def dtype(self):
        return self._values.dtype

    def unflatten(self) -> "_OrderedDict[str, np.ndarray]":
        """Named read-only views into the flat vector"""
        arrays: "_OrderedDict" = _OrderedDict()
        offset = 0
        for name, shape in self._layout:
            size = int(np.prod(shape))
            arrays[name] = self._values[offset : offset + size].reshape(shape)
            offset += size
        return arrays

    @classmethod
    def flatten(cls, arrays: Mapping[str, np.ndarray]) -> "FlatParams":
        """Concatenate named arrays, in mapping order, into one vector"""
        layout = [(name, np.shape(array)) for name, array in arrays.items()]
        if not arrays:
            return cls(np.zeros(0), layout)
        values = np.concatenate([np.ravel(array) for array in arrays.values()])
        return cls(values, layout)

    def with_values(self, values) -> "FlatParams":
        """Same layout, new vector"""
        return FlatParams(values, self._layout)

    def to_bytes(self) -> bytes:
        """JSON header (layout and dtype) followed by a little-endian value stream"""
        header = _json.dumps(
            {
                "layout": [[name, list(shape)] for name, shape in self._layout],
                "dtype": self._values.dtype.name,
            }
        ).encode("utf-8")
        stored = _STORED[self._values.dtype.name]
        payload = np.ascontiguousarray(self._values, dtype=stored).tobytes()
        return _HEADER.pack(len(header)) + header + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FlatParams":
        if len(blob) < _HEADER.size:
            raise FormatError("checkpoint too short for its header")
        (length,) = _HEADER.unpack_from(blob)
        start = _HEADER.size + length
        if len(blob) < start:
            raise FormatError("checkpoint header truncated")
        try:
            header = _json.loads(blob[_HEADER.size : start].decode("utf-8"))
            layout = [(name, tuple(shape)) for name, shape in header["layout"]]
            dtype = np.dtype(header.get("dtype", "float64"))
            stored = _STORED[dtype.name]
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError("unreadable checkpoint header: {}".format(exc))
        payload = blob[start:]
        if len(payload) % np.dtype(stored).itemsize:
            raise FormatError("checkpoint payload is not a whole number of values")
        values = np.frombuffer(payload, dtype=stored).astype(dtype)
        try:
            return cls(values, layout)
        except ShapeError as exc:
            raise FormatError(str(exc))

    def save(self, filename: str) -> None:
        if type(filename) is not str:
            raise TypeError
        with open(filename, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, filename: str) -> "FlatParams":
        with open(filename, "rb") as f:
            return cls.from_bytes(f.read())


class Layer(_ABC):
    """Abstract base class for all layers

    A layer is stateless: parameters are passed in on every call and
    `forward` returns a cache that `backward` consumes.
    """

    def __init__(self, name: str):
        if type(name) is str:
            self._name = name
        else:
            raise TypeError

    def __repr__(self):
        return "<{}('{}')>".format(self.__class__.__name__, self.name)

    @property
    def name(self):
        return self._name

    def param_shapes(self, input_shape: Tuple[int, ...]) -> List[Tuple[str, tuple]]:
        """Trainable arrays this layer needs for a per-sample input shape"""
        return []

    def init_params(
        self, input_shape: Tuple[int, ...], rng: np.random.Generator
    ) -> Dict[str, np.ndarray]:
        return {}

    @_abstractmethod
    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        """Per-sample output shape, raising ShapeError on incompatible input"""

    @_abstractmethod
    def forward(self, params: Mapping[str, np.ndarray], x: np.ndarray):
        """Returns ``(y, cache)``"""

    @_abstractmethod
    def backward(self, params: Mapping[str, np.ndarray], cache, dy: np.ndarray):
        """Returns ``(dx, grads)`` with grads keyed like `param_shapes`"""


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """U(-s, s) with s = 1/sqrt(fan_in)"""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Network(_ABC):
    """Abstract base class for classifiers and generators

    Parameters
    ----------
    name : str

    layers : list of Layer

    input_shape : tuple of int
        per-sample shape the first layer expects; callers always pass flat
        rows of ``prod(input_shape)`` features

    params : FlatParams, default None
        weights; initialised from `seed` when omitted

    seed : int, default 0

    dtype : numpy dtype, default float64

    """

    def __init__(
        self,
        name: str,
        layers: Sequence[Layer],
        input_shape: Tuple[int, ...],
        params: Optional[FlatParams] = None,
        seed: int = 0,
        dtype=np.float64,
    ):
        if type(name) is not str:
            raise TypeError
        self._name = name
        self._layers = tuple(layers)
        for layer in self._layers:
            if not isinstance(layer, Layer):
                raise TypeError
        self._input_shape = tuple(int(d) for d in input_shape)
        self._dtype = np.dtype(dtype)

        shape = self._input_shape
        layout = []
        self._shapes = []
        for layer in self._layers:
            self._shapes.append(shape)
            for pname, pshape in layer.param_shapes(shape):
                layout.append(("{}.{}".format(layer.name, pname), tuple(pshape)))
            shape = layer.output_shape(shape)
        self._output_shape = shape
        self._layout = tuple(layout)

        if params is None:
            params = self._init_params(seed)
        elif not isinstance(params, FlatParams):
            raise TypeError
        elif params.layout != self._layout:
            raise ShapeError("parameter layout does not match the architecture")
        elif params.dtype != self._dtype:
            params = params.with_values(params.values.astype(self._dtype))
        self._params = params

    def __repr__(self):
        return "<{}('{}')>".format(self.__class__.__name__, self.name)

    @property
    def name(self):
        return self._name

    @property
    def layers(self):
        return self._layers

    @property
    def params(self) -> FlatParams:
        return self._params

    @property
    def input_dim(self) -> int:
        return int(np.prod(self._input_shape))

    @property
    def output_dim(self) -> int:
        return int(np.prod(self._output_shape))

    @property
    def dtype(self):
        return self._dtype

    def _init_params(self, seed: int) -> FlatParams:
        rng = np.random.default_rng(seed)
        arrays: "_OrderedDict" = _OrderedDict()
        for layer, shape in zip(self._layers, self._shapes):
            for pname, array in layer.init_params(shape, rng).items():
                arrays["{}.{}".format(layer.name, pname)] = np.asarray(
                    array, dtype=self._dtype
                )
        if not arrays:
            return FlatParams(np.zeros(0, dtype=self._dtype), [])
        return FlatParams(
            np.concatenate([a.ravel() for a in arrays.values()]).astype(self._dtype),
            self._layout,
        )

    def with_params(self, params) -> "Network":
        """A copy of this network carrying other weights

        `params` may be a FlatParams with the same layout or a bare vector.
        """
        if not isinstance(params, FlatParams):
            params = self._params.with_values(np.asarray(params, dtype=self._dtype))
        elif params.layout != self._layout:
            raise ShapeError("parameter layout does not match the architecture")
        elif params.dtype != self._dtype:
            params = params.with_values(params.values.astype(self._dtype))
        clone = _copy.copy(self)
        clone._params = params
        return clone

    def _check_batch(self, batch) -> np.ndarray:
        batch = np.asarray(batch, dtype=self._dtype)
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise ShapeError(
                "expected a (batch, {}) input, got {}".format(
                    self.input_dim, batch.shape
                )
            )
        return batch

    def _split(self, values: np.ndarray):
        views = self._params.with_values(values).unflatten()
        per_layer = []
        for layer in self._layers:
            prefix = layer.name + "."
            per_layer.append(
                {k[len(prefix) :]: v for k, v in views.items() if k.startswith(prefix)}
            )
        return per_layer

    def run_forward(self, values: np.ndarray, batch: np.ndarray):
        """Forward pass with explicit weights, keeping caches for `run_backward`"""
        x = self._check_batch(batch)
        x = x.reshape((x.shape[0],) + self._input_shape)
        per_layer = self._split(values)
        caches = []
        for layer, params in zip(self._layers, per_layer):
            x, cache = layer.forward(params, x)
            caches.append(cache)
        return x.reshape(x.shape[0], -1), (per_layer, caches)

    def run_backward(self, state, dout: np.ndarray):
        """Returns ``(d_input, flat_gradient)`` for an upstream gradient"""
        per_layer, caches = state
        dy = np.asarray(dout)
        dy = dy.reshape((dy.shape[0],) + self._output_shape)
        grads = {}
        for layer, params, cache in reversed(
            list(zip(self._layers, per_layer, caches))
        ):
            dy, layer_grads = layer.backward(params, cache, dy)
            for pname, g in layer_grads.items():
                grads["{}.{}".format(layer.name, pname)] = g
        if self._layout:
            flat = np.concatenate([np.ravel(grads[name]) for name, _ in self._layout])
        else:
            flat = np.zeros(0, dtype=self._dtype)
        return dy.reshape(dy.shape[0], -1), flat

    def forward(self, batch) -> np.ndarray:
        """Outputs for a (batch, input_dim) matrix"""
        out, _ = self.run_forward(self._params.values, batch)
        return out
