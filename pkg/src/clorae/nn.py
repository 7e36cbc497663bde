"""Parameter/module containers, deterministic initialization, RNG streams.

Every random draw in the system flows from a root seed through named
streams (`derive_rng`). Parameter initialization keys off the parameter's
qualified name, so two models that share a submodule layout get identical
draws for the shared part regardless of what else they construct.
"""
from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from .autodiff import Tensor, layer_norm, linear

Array = np.ndarray


def _hash_tag(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(*tags) -> np.random.Generator:
    """A generator keyed by an ordered list of tags (ints or strings)."""
    return np.random.default_rng(np.random.SeedSequence([_hash_tag(t) for t in tags]))


class Parameter(Tensor):
    """A named, optionally frozen leaf tensor.

    Frozen parameters never require grad, never accumulate one and are
    skipped by the optimizer. `init` describes how `Module.initialize`
    fills the value; until then the buffer is zeros.
    """

    __slots__ = ("frozen", "init")

    def __init__(self, shape, frozen: bool = False, init: tuple = ("zeros",)):
        super().__init__(np.zeros(shape, dtype=np.float64), requires_grad=not frozen)
        self.frozen = frozen
        self.init = init


def _apply_init(p: Parameter, rng: np.random.Generator) -> None:
    kind = p.init[0]
    if kind == "zeros":
        p.data[...] = 0.0
    elif kind == "constant":
        p.data[...] = p.init[1]
    elif kind == "normal":
        p.data[...] = rng.normal(0.0, p.init[1], size=p.data.shape)
    elif kind == "identity":
        if p.data.ndim != 2 or p.data.shape[0] != p.data.shape[1]:
            raise ValueError(f"identity init needs a square matrix, got {p.data.shape}")
        p.data[...] = np.eye(p.data.shape[0])
    else:
        raise ValueError(f"unknown init spec {p.init!r}")


class Module:
    """Composite of parameters and submodules with qualified naming."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if not p.frozen]

    def initialize(self, seed: int) -> None:
        """Fill every parameter from its init spec, one stream per name."""
        for name, p in self.named_parameters():
            _apply_init(p, derive_rng(seed, "init", name))

    def state_dict(self) -> dict[str, Array]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, state: dict[str, Array]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(
                f"state mismatch: missing={missing[:5]} extra={extra[:5]}")
        for name, p in own.items():
            arr = state[name]
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data[...] = arr


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class ModuleDict(Module):
    def __init__(self, modules: dict[str, Module] | None = None):
        super().__init__()
        self._keys: list[str] = []
        for k, m in (modules or {}).items():
            self[k] = m

    def __setitem__(self, key: str, m: Module) -> None:
        if "." in key:
            raise ValueError(f"module key may not contain '.': {key!r}")
        setattr(self, key, m)
        self._keys.append(key)

    def __getitem__(self, key: str) -> Module:
        return self._modules[key]

    def __contains__(self, key: str) -> bool:
        return key in self._modules

    def keys(self):
        return list(self._keys)

    def items(self):
        return [(k, self._modules[k]) for k in self._keys]


class Linear(Module):
    """Plain affine map. Frozen by default: the backbone never trains here."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True,
                 frozen: bool = True, init_std: float | None = None):
        super().__init__()
        std = init_std if init_std is not None else 1.0 / np.sqrt(d_in)
        self.weight = Parameter((d_out, d_in), frozen=frozen, init=("normal", std))
        self.bias = Parameter((d_out,), frozen=frozen, init=("zeros",)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = linear(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, frozen: bool = True, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = Parameter((dim,), frozen=frozen, init=("constant", 1.0))
        self.bias = Parameter((dim,), frozen=frozen, init=("zeros",))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)
