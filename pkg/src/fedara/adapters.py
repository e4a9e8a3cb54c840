"""Frozen linear layers with trainable low-rank adapters.

Two flavours share one interface:

* LoRA, ``W = W0 + (alpha/r) B A`` with ``B`` zero and ``A`` Gaussian at init.
* truncated-SVD adaptation, ``W = W0 + (alpha/r) B diag(E) A`` with Gaussian
  ``B``/``A`` and ``E = 0`` at init.

A *triplet* is slot ``i``: column ``i`` of ``B``, ``E[i]`` and row ``i`` of
``A``. Pruned (dead) triplets are hard-zeroed and never come back.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .numerics import ContractError, Rng, gaussian_fill


class Flavor(str, enum.Enum):
    LORA = "lora"
    TRUNC_SVD = "svd"


@dataclass(frozen=True)
class AdapterConfig:
    r_init: int
    alpha: float = 16.0
    flavor: Flavor = Flavor.TRUNC_SVD
    init_std: float = 0.02

    def __post_init__(self):
        if self.r_init < 1:
            raise ContractError(f"r_init must be >= 1, got {self.r_init}")
        if not self.alpha > 0:
            raise ContractError(f"alpha must be positive, got {self.alpha}")
        if not self.init_std > 0:
            raise ContractError(f"init_std must be positive, got {self.init_std}")
        object.__setattr__(self, "flavor", Flavor(self.flavor))

    @property
    def scale(self) -> float:
        # fixed at the configured rank so pruning never rescales survivors
        return self.alpha / self.r_init

    def check_dims(self, d_out: int, d_in: int) -> None:
        if 2 * self.r_init > min(d_out, d_in):
            raise ContractError(
                f"r_init={self.r_init} too large for a {d_out}x{d_in} layer "
                f"(need r_init <= min(d_out, d_in)/2)"
            )


@dataclass
class SvdAdapter:
    base: np.ndarray
    B: np.ndarray
    E: np.ndarray
    A: np.ndarray
    config: AdapterConfig
    alive: np.ndarray = field(default=None)

    has_e = True

    def __post_init__(self):
        if self.alive is None:
            self.alive = np.ones(self.config.r_init, dtype=bool)

    @property
    def d_out(self) -> int:
        return self.base.shape[0]

    @property
    def d_in(self) -> int:
        return self.base.shape[1]

    def trainables(self) -> dict[str, np.ndarray]:
        return {"B": self.B, "E": self.E, "A": self.A}


@dataclass
class LoraAdapter:
    base: np.ndarray
    B: np.ndarray
    A: np.ndarray
    config: AdapterConfig
    alive: np.ndarray = field(default=None)

    has_e = False

    def __post_init__(self):
        if self.alive is None:
            self.alive = np.ones(self.config.r_init, dtype=bool)

    @property
    def d_out(self) -> int:
        return self.base.shape[0]

    @property
    def d_in(self) -> int:
        return self.base.shape[1]

    def trainables(self) -> dict[str, np.ndarray]:
        return {"B": self.B, "A": self.A}


Adapter = Union[SvdAdapter, LoraAdapter]


def _frozen(base: np.ndarray) -> np.ndarray:
    base = np.array(base, dtype=np.float64)
    if base.ndim != 2:
        raise ContractError("base weight must be a 2-D matrix")
    base.flags.writeable = False
    return base


def new_svd_adapter(rng: Rng, base: np.ndarray, config: AdapterConfig) -> SvdAdapter:
    if config.flavor is not Flavor.TRUNC_SVD:
        raise ContractError("new_svd_adapter needs a truncated-SVD config")
    base = base if not base.flags.writeable and base.dtype == np.float64 else _frozen(base)
    d_out, d_in = base.shape
    config.check_dims(d_out, d_in)
    r = config.r_init
    B = gaussian_fill(rng.fork("B"), d_out, r, config.init_std)
    A = gaussian_fill(rng.fork("A"), r, d_in, config.init_std)
    return SvdAdapter(base=base, B=B, E=np.zeros(r), A=A, config=config)


def new_lora_adapter(rng: Rng, base: np.ndarray, config: AdapterConfig) -> LoraAdapter:
    if config.flavor is not Flavor.LORA:
        raise ContractError("new_lora_adapter needs a LoRA config")
    base = base if not base.flags.writeable and base.dtype == np.float64 else _frozen(base)
    d_out, d_in = base.shape
    config.check_dims(d_out, d_in)
    r = config.r_init
    A = gaussian_fill(rng.fork("A"), r, d_in, config.init_std)
    return LoraAdapter(base=base, B=np.zeros((d_out, r)), A=A, config=config)


def new_adapter(rng: Rng, base: np.ndarray, config: AdapterConfig) -> Adapter:
    if config.flavor is Flavor.LORA:
        return new_lora_adapter(rng, base, config)
    return new_svd_adapter(rng, base, config)


def delta_w(adapter: Adapter) -> np.ndarray:
    s = adapter.config.scale
    if adapter.has_e:
        return (s * adapter.B * adapter.E) @ adapter.A
    return (s * adapter.B) @ adapter.A


def forward(adapter: Adapter, x: np.ndarray) -> np.ndarray:
    """``(W0 + dW) x`` in factored form; columns of ``x`` are samples."""
    if x.ndim != 2 or x.shape[0] != adapter.d_in:
        raise ContractError(f"input must have {adapter.d_in} rows, got shape {x.shape}")
    u = adapter.A @ x
    if adapter.has_e:
        u = adapter.E[:, None] * u
    return adapter.base @ x + adapter.config.scale * (adapter.B @ u)


def apply_mask(adapter: Adapter, mask) -> None:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != adapter.alive.shape:
        raise ContractError(f"mask length {mask.size} != r_init {adapter.alive.size}")
    if np.any(mask & ~adapter.alive):
        raise ContractError("mask would revive a dead triplet")
    dead = ~mask
    adapter.B[:, dead] = 0.0
    adapter.A[dead, :] = 0.0
    if adapter.has_e:
        adapter.E[dead] = 0.0
    adapter.alive = mask.copy()


def live_rank(adapter: Adapter) -> int:
    return int(np.count_nonzero(adapter.alive))


def clone(adapter: Adapter) -> Adapter:
    """Copy trainable state; the frozen base is shared, not copied."""
    kwargs = {k: v.copy() for k, v in adapter.trainables().items()}
    return type(adapter)(base=adapter.base, config=adapter.config, alive=adapter.alive.copy(), **kwargs)
