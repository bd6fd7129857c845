"""Generator and discriminator objectives.

All batched losses average over the pose batch; per-pose terms are squared
Frobenius norms over the keypoints selected by a mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError
from .numerics import autodiff as ad
from .numerics.autodiff import Var


@dataclass
class LossWeights:
    """Relative weights of the adversarial, reprojection and 90-degree terms.

    ``per_network`` optionally overrides the adversarial weight for individual
    sub-networks of the independent representations.
    """

    adversarial: float = 1.0
    reprojection: float = 1.0
    ninety: float = 1.0
    per_network: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        values = [self.adversarial, self.reprojection, self.ninety, *self.per_network.values()]
        for v in values:
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"loss weights must be finite and non-negative, got {v}")

    def adversarial_for(self, network: str) -> float:
        return self.per_network.get(network, self.adversarial)

    @classmethod
    def parse(cls, text: str) -> "LossWeights":
        try:
            w1, w2, w3 = (float(v) for v in text.split(","))
        except ValueError:
            raise ConfigError(f"weights must be three comma-separated numbers, got {text!r}") from None
        return cls(w1, w2, w3)


def _mask_index(mask, n: int) -> np.ndarray:
    m = np.asarray(mask)
    idx = np.flatnonzero(m) if m.dtype == bool else np.unique(m.astype(np.intp))
    if idx.size == 0:
        raise ContractError("loss mask selects no keypoints")
    if idx.max() >= n:
        raise ContractError(f"loss mask index {idx.max()} out of range for {n} keypoints")
    return idx


def masked_sq_norm(diff: Var, mask) -> Var:
    """Batch mean of the squared norm of ``diff`` restricted to masked keypoints.

    ``diff`` is (N, d) for one pose or (B, N, d) for a batch.
    """
    diff = ad.as_var(diff)
    batched = diff.value.ndim == 3
    n = diff.shape[-2]
    idx = _mask_index(mask, n)
    if idx.size != n:
        diff = ad.take(diff, idx, axis=-2)
    total = ad.sum(ad.square(diff))
    return total * (1.0 / diff.shape[0]) if batched else total


def reprojection_loss(Y, Y_back, mask=None) -> Var:
    """Squared error between the input pose and its round-trip reconstruction."""
    Y, Y_back = ad.as_var(Y), ad.as_var(Y_back)
    if Y.shape != Y_back.shape:
        raise ContractError(f"pose shapes differ: {Y.shape} vs {Y_back.shape}")
    if mask is None:
        mask = np.ones(Y.shape[-2], dtype=bool)
    return masked_sq_norm(Y_back - Y, mask)


def _depth_as_2d(depth: Var) -> Var:
    return ad.reshape(depth, depth.shape + (1,))


def quarter_turn_lifts(lift: Callable[[Var], Var], Y: Var, z: Var) -> tuple[Var, Var, Var]:
    """Depths lifted from the pose turned clockwise, anticlockwise and half way."""
    Y, z = ad.as_var(Y), ad.as_var(z)
    y = _depth_as_2d(Y[..., 1])
    zc = _depth_as_2d(z)
    cw = lift(ad.concat([zc, y], axis=-1))
    acw = lift(ad.concat([-zc, y], axis=-1))
    half = lift(ad.concat([_depth_as_2d(-Y[..., 0]), y], axis=-1))
    return cw, acw, half


def ninety_degree_terms(lift: Callable[[Var], Var], Y: Var, z: Var, mask=None, lifts=None) -> tuple[Var, Var, Var]:
    """The three quarter-turn consistency terms for depths ``z = lift(Y)``.

    Clockwise:      lift(z, y) should equal -x.
    Anticlockwise:  lift(-z, y) should equal x.
    Half turn:      lift(x, y) + lift(-x, y) should vanish.

    ``lifts`` reuses the output of :func:`quarter_turn_lifts` across masks.
    """
    Y, z = ad.as_var(Y), ad.as_var(z)
    if mask is None:
        mask = np.ones(Y.shape[-2], dtype=bool)
    cw, acw, half = lifts if lifts is not None else quarter_turn_lifts(lift, Y, z)
    x = Y[..., 0]
    t_cw = masked_sq_norm(_depth_as_2d(cw + x), mask)
    t_acw = masked_sq_norm(_depth_as_2d(acw - x), mask)
    t_half = masked_sq_norm(_depth_as_2d(z + half), mask)
    return t_cw, t_acw, t_half


def ninety_degree_loss(lift: Callable[[Var], Var], Y, z, mask=None) -> Var:
    t1, t2, t3 = ninety_degree_terms(lift, Y, z, mask)
    return t1 + t2 + t3


def lsgan_from_scores(real_scores, fake_scores, flip: bool = False) -> tuple[Var, Var]:
    """Least-squares GAN losses. ``flip`` swaps the real/fake targets for the
    discriminator loss only."""
    real, fake = ad.as_var(real_scores), ad.as_var(fake_scores)
    if real.value.size == 0 or fake.value.size == 0:
        raise ContractError("empty batch")
    real_target, fake_target = (0.0, 1.0) if flip else (1.0, 0.0)
    d_loss = 0.5 * ad.mean(ad.square(real - real_target)) + 0.5 * ad.mean(ad.square(fake - fake_target))
    g_loss = 0.5 * ad.mean(ad.square(fake - 1.0))
    return d_loss, g_loss


def lsgan_losses(
    D,
    real_batch,
    fake_batch,
    flip_rng: np.random.Generator | None = None,
    flip_probability: float = 0.0,
    tape=None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Var, Var, bool]:
    """Score both batches with ``D`` and return ``(d_loss, g_loss, flipped)``."""
    if not 0.0 <= flip_probability <= 1.0:
        raise ConfigError("flip probability must lie in [0, 1]")
    flip = bool(flip_rng is not None and flip_rng.random() < flip_probability)
    real = D.score(tape, ad.as_var(real_batch), training, rng)
    fake = D.score(tape, ad.as_var(fake_batch), training, rng)
    d_loss, g_loss = lsgan_from_scores(real, fake, flip)
    return d_loss, g_loss, flip


def total_generator_loss(adv, l2d, l90, weights: LossWeights, network: str | None = None):
    """Weighted sum of the three generator terms (Var or float inputs)."""
    w1 = weights.adversarial_for(network) if network else weights.adversarial
    for w in (w1, weights.reprojection, weights.ninety):
        if w < 0:
            raise ConfigError("loss weights must be non-negative")
    return w1 * adv + weights.reprojection * l2d + weights.ninety * l90
