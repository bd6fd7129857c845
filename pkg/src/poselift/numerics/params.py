from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError


@dataclass
class ParamStore:
    """Named trainable tensors of one network plus its optimizer state.

    ``buffers`` hold non-trainable state (batch-norm running statistics); they
    are checkpointed but not counted or optimized.
    """

    name: str
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, key: str, value: np.ndarray) -> None:
        if key in self.params:
            raise ConfigError(f"parameter {key!r} already defined in store {self.name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[key] = value
        self.m[key] = np.zeros_like(value)
        self.v[key] = np.zeros_like(value)

    def add_buffer(self, key: str, value: np.ndarray) -> None:
        self.buffers[key] = np.array(value, dtype=np.float64)

    def count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zeros_like_params(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(p) for k, p in self.params.items()}

    def copy(self) -> "ParamStore":
        return ParamStore(
            name=self.name,
            params={k: p.copy() for k, p in self.params.items()},
            buffers={k: b.copy() for k, b in self.buffers.items()},
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
        )

    def check(self) -> None:
        if self.step < 0:
            raise ConfigError("optimizer step counter must be non-negative")
        for k, p in self.params.items():
            if self.m[k].shape != p.shape or self.v[k].shape != p.shape:
                raise ConfigError(f"moment buffers for {k!r} do not match parameter shape")
            if not np.all(np.isfinite(p)):
                raise ConfigError(f"parameter {k!r} has non-finite entries")
