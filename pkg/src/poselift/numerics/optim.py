from __future__ import annotations

from typing import Mapping

import numpy as np

from ..errors import ContractError, TrainingDivergence
from .params import ParamStore

DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8


def adam_step(
    store: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float,
    betas: tuple[float, float] = DEFAULT_BETAS,
    eps: float = DEFAULT_EPS,
) -> ParamStore:
    """One bias-corrected Adam update, applied to ``store`` in place.

    Parameter arrays are replaced rather than mutated so values captured by an
    earlier forward pass stay valid.
    """
    if set(grads) != set(store.params):
        missing = sorted(set(store.params) - set(grads))
        extra = sorted(set(grads) - set(store.params))
        raise ContractError(f"gradient keys do not match store {store.name!r}: missing={missing} extra={extra}")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingDivergence(
            f"non-finite gradient in store {store.name!r}",
            {"store": store.name, "params": bad, "step": store.step},
        )
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, g in grads.items():
        m = b1 * store.m[k] + (1.0 - b1) * g
        v = b2 * store.v[k] + (1.0 - b2) * (g * g)
        store.m[k] = m
        store.v[k] = v
        store.params[k] = store.params[k] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store
