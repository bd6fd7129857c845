"""Dense building blocks: linear layers, batch norm, dropout, residual blocks.

Each layer reads its weights from a :class:`ParamStore` under a name prefix and
records its forward pass on a :class:`Tape`. Running statistics for batch norm
live in ``store.buffers`` and are updated only when ``update_stats`` is set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DimensionError
from . import autodiff as ad
from .autodiff import Tape, Var
from .params import ParamStore

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
DEFAULT_DROPOUT = 0.1
# Output heads start near zero so untrained lifters predict an almost flat pose.
HEAD_INIT_GAIN = 0.1


def init_linear(
    store: ParamStore, prefix: str, fan_in: int, fan_out: int, rng: np.random.Generator, gain: float = 1.0
) -> None:
    # He-uniform on fan-in, zero bias.
    bound = gain * np.sqrt(6.0 / fan_in)
    store.add(f"{prefix}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(f"{prefix}.b", np.zeros(fan_out))


def init_batch_norm(store: ParamStore, prefix: str, width: int) -> None:
    store.add(f"{prefix}.gamma", np.ones(width))
    store.add(f"{prefix}.beta", np.zeros(width))
    store.add_buffer(f"{prefix}.running_mean", np.zeros(width))
    store.add_buffer(f"{prefix}.running_var", np.ones(width))


def linear_forward(x, weight, bias) -> Var:
    """``x @ weight + bias`` with the bias broadcast over batch rows."""
    x, weight, bias = ad.as_var(x), ad.as_var(weight), ad.as_var(bias)
    if x.value.ndim != 2:
        raise DimensionError(f"linear input must be 2-D, got {x.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"input has {x.shape[1]} columns, weight expects {weight.shape[0]}")
    if bias.shape[-1] != weight.shape[1] or bias.value.size != weight.shape[1]:
        raise DimensionError(f"bias {bias.shape} does not match output width {weight.shape[1]}")
    return ad.matmul(x, weight) + ad.reshape(bias, (weight.shape[1],))


def linear(tape: Tape, store: ParamStore, prefix: str, x: Var) -> Var:
    return linear_forward(x, tape.param(store, f"{prefix}.w"), tape.param(store, f"{prefix}.b"))


def batch_norm(
    tape: Tape, store: ParamStore, prefix: str, x: Var, training: bool, update_stats: bool = True
) -> Var:
    gamma = tape.param(store, f"{prefix}.gamma")
    beta = tape.param(store, f"{prefix}.beta")
    rm_key, rv_key = f"{prefix}.running_mean", f"{prefix}.running_var"
    if not training:
        return ad.batch_norm_infer(x, gamma, beta, store.buffers[rm_key], store.buffers[rv_key], BN_EPS)
    n = x.shape[0]
    if n < 2:
        raise ConfigError("batch norm in training mode needs a batch of at least 2")
    out, mu, var = ad.batch_norm_train(x, gamma, beta, BN_EPS)
    if update_stats:
        unbiased = var * n / (n - 1)
        store.buffers[rm_key] = (1 - BN_MOMENTUM) * store.buffers[rm_key] + BN_MOMENTUM * mu
        store.buffers[rv_key] = (1 - BN_MOMENTUM) * store.buffers[rv_key] + BN_MOMENTUM * unbiased
    return out


def dropout(x: Var, p: float, training: bool, rng: np.random.Generator | None) -> Var:
    """Inverted dropout; identity outside training or when ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ConfigError("training-mode dropout needs an rng")
    keep = rng.random(x.shape) >= p
    return ad.mul(x, keep / (1.0 - p))


def _dense_unit(tape, store, prefix, x, training, rng, p, update_stats) -> Var:
    h = linear(tape, store, f"{prefix}.lin", x)
    h = batch_norm(tape, store, f"{prefix}.bn", h, training, update_stats)
    h = ad.relu(h)
    return dropout(h, p, training, rng)


def init_residual_block(store: ParamStore, prefix: str, width: int, rng: np.random.Generator) -> None:
    for i in (1, 2):
        init_linear(store, f"{prefix}.u{i}.lin", width, width, rng)
        init_batch_norm(store, f"{prefix}.u{i}.bn", width)


def residual_block(
    tape: Tape,
    store: ParamStore,
    prefix: str,
    x: Var,
    training: bool,
    rng: np.random.Generator | None,
    p: float = DEFAULT_DROPOUT,
    update_stats: bool = True,
) -> Var:
    """``x + f(x)`` with ``f`` two rounds of linear, batch norm, ReLU, dropout."""
    width = store.params[f"{prefix}.u1.lin.w"].shape[0]
    if x.shape[-1] != width:
        raise DimensionError(f"residual block {prefix!r} has width {width}, input has {x.shape[-1]}")
    h = _dense_unit(tape, store, f"{prefix}.u1", x, training, rng, p, update_stats)
    h = _dense_unit(tape, store, f"{prefix}.u2", h, training, rng, p, update_stats)
    return x + h


def residual_block_forward(
    x: np.ndarray,
    store: ParamStore,
    prefix: str = "block",
    training: bool = False,
    rng: np.random.Generator | None = None,
    p: float = DEFAULT_DROPOUT,
) -> np.ndarray:
    """Untracked convenience wrapper around :func:`residual_block`."""
    return residual_block(Tape(), store, prefix, ad.Var(x), training, rng, p).value


@dataclass(frozen=True)
class MLPSpec:
    """Shape of one residual dense network.

    in_dim -> [linear, BN, ReLU, dropout] -> ``blocks`` residual blocks -> linear head.
    """

    in_dim: int
    width: int
    blocks: int
    out_dim: int
    dropout: float = DEFAULT_DROPOUT

    def parameter_count(self) -> int:
        w = self.width
        stem = self.in_dim * w + w + 2 * w
        block = 2 * (w * w + w + 2 * w)
        head = w * self.out_dim + self.out_dim
        return stem + self.blocks * block + head


class ResidualMLP:
    """Residual dense network whose parameters live in a dedicated store."""

    def __init__(self, spec: MLPSpec, store: ParamStore):
        self.spec = spec
        self.store = store

    @classmethod
    def create(cls, name: str, spec: MLPSpec, rng: np.random.Generator) -> "ResidualMLP":
        store = ParamStore(name)
        init_linear(store, "stem.lin", spec.in_dim, spec.width, rng)
        init_batch_norm(store, "stem.bn", spec.width)
        for i in range(spec.blocks):
            init_residual_block(store, f"block{i}", spec.width, rng)
        init_linear(store, "head", spec.width, spec.out_dim, rng, gain=HEAD_INIT_GAIN)
        return cls(spec, store)

    def forward(
        self,
        tape: Tape,
        x: Var,
        training: bool,
        rng: np.random.Generator | None = None,
        update_stats: bool = True,
    ) -> Var:
        if x.shape[-1] != self.spec.in_dim:
            raise DimensionError(
                f"network {self.store.name!r} expects {self.spec.in_dim} inputs, got {x.shape[-1]}"
            )
        p = self.spec.dropout
        h = _dense_unit(tape, self.store, "stem", x, training, rng, p, update_stats)
        for i in range(self.spec.blocks):
            h = residual_block(tape, self.store, f"block{i}", h, training, rng, p, update_stats)
        return linear(tape, self.store, "head", h)
