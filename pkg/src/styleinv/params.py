"""Named parameter collections shared by both networks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np

from .layers import ConvSpec, NormState
from .tensor import Graph, Tensor

BUFFER_SUFFIXES = (".running_mean", ".running_var")


@dataclass
class ModelParams:
    """Ordered name -> array map for one network.

    ``kind`` is ``"seg"`` or ``"st"``.  Names ending in ``.running_mean`` or
    ``.running_var`` are batch-norm buffers: saved with the model but never
    touched by the optimiser.
    """

    kind: str
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def trainable(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.endswith(BUFFER_SUFFIXES)}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.endswith(BUFFER_SUFFIXES)}

    def copy(self) -> "ModelParams":
        return ModelParams(self.kind, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.kind, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> Iterable[str]:
        return self.tensors.keys()

    def n_values(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


class Initializer:
    """Deterministic He-normal initialisation driven by one seed."""

    def __init__(self, seed: int, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.tensors: Dict[str, np.ndarray] = {}

    def conv(self, name: str, cin: int, cout: int, k: int = 3) -> None:
        std = np.sqrt(2.0 / (cin * k * k))
        self.tensors[f"{name}.weight"] = (self.rng.standard_normal((cout, cin, k, k)) * std).astype(self.dtype)
        self.tensors[f"{name}.bias"] = np.zeros(cout, self.dtype)

    def norm(self, name: str, channels: int, kind: str) -> None:
        self.tensors[f"{name}.gamma"] = np.ones(channels, self.dtype)
        self.tensors[f"{name}.beta"] = np.zeros(channels, self.dtype)
        if kind == "batch":
            self.tensors[f"{name}.running_mean"] = np.zeros(channels, self.dtype)
            self.tensors[f"{name}.running_var"] = np.ones(channels, self.dtype)


class Bound:
    """Parameter view used during one forward pass.

    With a graph, trainable arrays become graph leaves so their gradients can
    be looked up afterwards with :meth:`grads`.
    """

    def __init__(self, params: ModelParams, graph: Optional[Graph] = None, dtype=None):
        self.params = params
        self.graph = graph
        self.dtype = dtype
        self.tensors: Dict[str, Tensor] = {}
        self.norm_states: Dict[str, NormState] = {}

    def _cast(self, arr: np.ndarray) -> np.ndarray:
        return arr if self.dtype is None else arr.astype(self.dtype, copy=False)

    def get(self, name: str) -> Tensor:
        t = self.tensors.get(name)
        if t is None:
            arr = self._cast(self.params.tensors[name])
            t = self.graph.leaf(arr, name) if self.graph is not None else Tensor(arr)
            self.tensors[name] = t
        return t

    def conv(self, name: str, padding: int = 1) -> ConvSpec:
        return ConvSpec(self.get(f"{name}.weight"), self.get(f"{name}.bias"), 1, padding)

    def norm(self, name: str, kind: str) -> NormState:
        st = NormState(kind, self.get(f"{name}.gamma"), self.get(f"{name}.beta"))
        if kind == "batch":
            st.running_mean = self._cast(self.params.tensors[f"{name}.running_mean"])
            st.running_var = self._cast(self.params.tensors[f"{name}.running_var"])
        self.norm_states[name] = st
        return st

    def updated_buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, st in self.norm_states.items():
            if st.kind == "batch":
                out[f"{name}.running_mean"] = st.running_mean
                out[f"{name}.running_var"] = st.running_var
        return out

    def grads(self, grad_map: Dict[int, np.ndarray]) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.params.trainable():
            t = self.tensors.get(name)
            if t is None or t.node not in grad_map:
                out[name] = np.zeros_like(self.params.tensors[name])
            else:
                out[name] = grad_map[t.node]
        return out
