"""Named parameter collections, Adam, and the checkpoint container."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

_MAGIC = b"PSET1\n"


class ParamSet:
    """Ordered name -> Tensor mapping holding all weights of one model."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = values if isinstance(values, Tensor) else Tensor(values)
        t.requires_grad = True
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def num_values(self):
        return sum(t.size for t in self._entries.values())

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._entries.items():
            out.add(name, t.values.copy())
        return out

    def load_values(self, other: "ParamSet"):
        for name, t in self._entries.items():
            t.values[...] = other[name].values


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, learning_rate=1e-3, beta1=0.9,
                   beta2=0.999, eps_adam=1e-8) -> "AdamState":
        st = cls(learning_rate, beta1, beta2, eps_adam)
        for name, t in params.items():
            st.first_moment[name] = np.zeros_like(t.values)
            st.second_moment[name] = np.zeros_like(t.values)
        return st


def adam_step(params: ParamSet, state: AdamState):
    """One bias-corrected Adam update in place. Gradients are left untouched."""
    for name, t in params.items():
        if t.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = t.grad
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        t.values -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps_adam)


# ---------------------------------------------------------------------------
# checkpoint container: magic, one JSON header line, raw little-endian f64
# ---------------------------------------------------------------------------


def save_paramset(path, params: ParamSet, meta: dict | None = None):
    header = {
        "version": 1,
        "meta": meta or {},
        "entries": [{"name": n, "shape": list(t.shape)} for n, t in params.items()],
    }
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, t in params.items():
            f.write(np.ascontiguousarray(t.values, dtype="<f8").tobytes())


def load_paramset(path) -> tuple[ParamSet, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
        header = json.loads(f.readline().decode())
        if header.get("version") != 1:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        params = ParamSet()
        for ent in header["entries"]:
            shape = tuple(ent["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated checkpoint at {ent['name']!r}")
            params.add(ent["name"], np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
        return params, header["meta"]
