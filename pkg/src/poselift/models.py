"""The five lifter topologies and the whole-pose 2D discriminator.

Every lifter maps a (B, 16, 2) pose to (B, 16) root-relative depths:

* ``full``   one network over the whole pose.
* ``sr-lt``  leg and torso networks emit feature vectors; a combiner maps the
             concatenated features to all 16 depths.
* ``ind-lt`` leg and torso networks each predict only their own depths.
* ``sr-5``   as ``sr-lt`` with five limb networks.
* ``ind-5``  five limb networks, each predicting its own 3 or 4 depths.

Sub-network widths are solved so every topology has within 2% of the
parameters of ``full`` (see :func:`solve_architecture`).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ConfigError, DimensionError, SchemaError
from .numerics import autodiff as ad
from .numerics.autodiff import Tape, Var
from .numerics.layers import DEFAULT_DROPOUT, MLPSpec, ResidualMLP
from .numerics.params import ParamStore
from .skeleton import FIVE_LIMBS, LEG_TORSO, KeypointSchema, default_schema

MAX_BLOCKS_PER_PATH = 6
FULL_BLOCKS = 6
LOCAL_BLOCKS = 2
COMBINER_BLOCKS = 2
DISCRIMINATOR_BLOCKS = 3
BUDGET_TOLERANCE = 0.02


class Representation(str, enum.Enum):
    FULL = "full"
    SPLIT_RECOMBINE_LT = "sr-lt"
    INDEPENDENT_LT = "ind-lt"
    SPLIT_RECOMBINE_5 = "sr-5"
    INDEPENDENT_5 = "ind-5"

    @classmethod
    def parse(cls, value: "str | Representation") -> "Representation":
        if isinstance(value, Representation):
            return value
        try:
            return cls(value)
        except ValueError:
            choices = ", ".join(r.value for r in cls)
            raise ConfigError(f"unknown representation {value!r}; choose one of {choices}") from None

    @property
    def partition(self) -> str | None:
        return {
            Representation.FULL: None,
            Representation.SPLIT_RECOMBINE_LT: LEG_TORSO,
            Representation.INDEPENDENT_LT: LEG_TORSO,
            Representation.SPLIT_RECOMBINE_5: FIVE_LIMBS,
            Representation.INDEPENDENT_5: FIVE_LIMBS,
        }[self]

    @property
    def independent(self) -> bool:
        return self in (Representation.INDEPENDENT_LT, Representation.INDEPENDENT_5)

    @property
    def split_recombine(self) -> bool:
        return self in (Representation.SPLIT_RECOMBINE_LT, Representation.SPLIT_RECOMBINE_5)


@dataclass(frozen=True)
class SubNet:
    name: str
    spec: MLPSpec
    segment: str | None = None  # None for the full network and the combiner
    indices: tuple[int, ...] = ()


@dataclass(frozen=True)
class Architecture:
    representation: Representation
    base_width: int
    feature_dim: int
    subnets: tuple[SubNet, ...]

    def parameter_count(self) -> int:
        return sum(s.spec.parameter_count() for s in self.subnets)

    def max_path_blocks(self) -> int:
        if self.representation.split_recombine:
            local = max(s.spec.blocks for s in self.subnets if s.segment is not None)
            comb = next(s.spec.blocks for s in self.subnets if s.segment is None)
            return local + comb
        return max(s.spec.blocks for s in self.subnets)

    def widths(self) -> dict[str, int]:
        return {s.name: s.spec.width for s in self.subnets}


def full_spec(base_width: int, schema: KeypointSchema, dropout: float = DEFAULT_DROPOUT) -> MLPSpec:
    n = schema.num_joints
    return MLPSpec(2 * n, base_width, FULL_BLOCKS, n, dropout)


def default_feature_dim(base_width: int) -> int:
    return max(1, base_width // 4)


def _best_width(count_for_width, target: int, upper: int) -> int:
    widths = np.arange(1, upper + 1)
    counts = np.array([count_for_width(int(w)) for w in widths])
    return int(widths[np.argmin(np.abs(counts - target))])


def _build(rep, schema, base_width, feature_dim, dropout, local_width, comb_width=None) -> tuple[SubNet, ...]:
    n = schema.num_joints
    if rep is Representation.FULL:
        return (SubNet("full", full_spec(base_width, schema, dropout)),)
    segs = schema.segments(rep.partition)
    subnets = []
    for seg, idx in segs.items():
        out_dim = len(idx) if rep.independent else feature_dim
        blocks = FULL_BLOCKS if rep.independent else LOCAL_BLOCKS
        subnets.append(SubNet(seg, MLPSpec(2 * len(idx), local_width, blocks, out_dim, dropout), seg, tuple(idx)))
    if rep.split_recombine:
        comb = MLPSpec(feature_dim * len(segs), comb_width, COMBINER_BLOCKS, n, dropout)
        subnets.append(SubNet("combiner", comb))
    return tuple(subnets)


def solve_architecture(
    rep: Representation | str,
    base_width: int = 1024,
    schema: KeypointSchema | None = None,
    feature_dim: int | None = None,
    dropout: float = DEFAULT_DROPOUT,
) -> Architecture:
    """Pick sub-network widths that best match the ``full`` parameter count.

    Independent topologies share one width across their networks (6 blocks
    each). Split-recombine topologies keep the combiner at ``base_width`` and
    solve the width of the 2-block local networks.
    """
    rep = Representation.parse(rep)
    schema = schema or default_schema()
    feature_dim = feature_dim or default_feature_dim(base_width)
    target = full_spec(base_width, schema, dropout).parameter_count()

    def count(w):
        return sum(s.spec.parameter_count() for s in _build(rep, schema, base_width, feature_dim, dropout, w, base_width))

    if rep is Representation.FULL:
        width = base_width
    else:
        width = _best_width(count, target, 2 * base_width)
    subnets = _build(rep, schema, base_width, feature_dim, dropout, width, base_width)
    return Architecture(rep, base_width, feature_dim, subnets)


def load_width_table() -> dict:
    text = resources.files("poselift.resources").joinpath("widths.json").read_text()
    return json.loads(text)


def architecture_from_meta(meta: dict, schema: KeypointSchema | None = None) -> Architecture:
    """Rebuild an architecture from the description stored in checkpoints."""
    schema = schema or default_schema()
    rep = Representation.parse(meta["representation"])
    subnets = []
    for s in meta["subnets"]:
        spec = MLPSpec(s["in_dim"], s["width"], s["blocks"], s["out_dim"], s["dropout"])
        subnets.append(SubNet(s["name"], spec, s.get("segment"), tuple(s.get("indices", ()))))
    arch = Architecture(rep, meta["base_width"], meta["feature_dim"], tuple(subnets))
    for sub in arch.subnets:
        if sub.segment is not None and tuple(schema.segment_indices(rep.partition, sub.segment)) != sub.indices:
            raise SchemaError(f"checkpoint segment {sub.segment!r} does not match the active schema")
    return arch


def architecture_meta(arch: Architecture) -> dict:
    return {
        "representation": arch.representation.value,
        "base_width": arch.base_width,
        "feature_dim": arch.feature_dim,
        "subnets": [
            {
                "name": s.name,
                "segment": s.segment,
                "indices": list(s.indices),
                "in_dim": s.spec.in_dim,
                "width": s.spec.width,
                "blocks": s.spec.blocks,
                "out_dim": s.spec.out_dim,
                "dropout": s.spec.dropout,
            }
            for s in arch.subnets
        ],
    }


@dataclass
class LossGroup:
    """Networks updated together and the keypoints whose losses they receive."""

    name: str
    nets: tuple[str, ...]
    indices: tuple[int, ...]


def _flatten(tape_free_or_tracked: Var, indices) -> Var:
    part = ad.take(tape_free_or_tracked, indices, axis=1)
    return ad.reshape(part, (part.shape[0], 2 * len(indices)))


@dataclass
class LifterModel:
    architecture: Architecture
    nets: dict[str, ResidualMLP]
    schema: KeypointSchema = field(default_factory=default_schema)

    @classmethod
    def create(cls, arch: Architecture, rng: np.random.Generator, schema: KeypointSchema | None = None):
        nets = {s.name: ResidualMLP.create(f"lifter.{s.name}", s.spec, rng) for s in arch.subnets}
        return cls(arch, nets, schema or default_schema())

    @classmethod
    def from_stores(cls, arch: Architecture, stores: dict[str, ParamStore], schema: KeypointSchema | None = None):
        nets = {}
        for s in arch.subnets:
            key = f"lifter.{s.name}"
            if key not in stores:
                raise SchemaError(f"checkpoint is missing network {key!r}")
            nets[s.name] = ResidualMLP(s.spec, stores[key])
        return cls(arch, nets, schema or default_schema())

    @property
    def representation(self) -> Representation:
        return self.architecture.representation

    @property
    def stores(self) -> list[ParamStore]:
        return [net.store for net in self.nets.values()]

    def parameter_count(self) -> int:
        return sum(store.count() for store in self.stores)

    @property
    def loss_groups(self) -> list[LossGroup]:
        everything = tuple(range(self.schema.num_joints))
        if self.representation.independent:
            return [LossGroup(s.name, (s.name,), s.indices) for s in self.architecture.subnets]
        return [LossGroup("all", tuple(self.nets), everything)]

    def lift(
        self,
        tape: Tape | None,
        Y: Var,
        training: bool,
        rng: np.random.Generator | None = None,
        update_stats: bool = True,
    ) -> Var:
        """Depths for a (B, N, 2) pose batch."""
        if not isinstance(Y, Var):
            Y = Var(Y)
        n = self.schema.num_joints
        if Y.value.ndim != 3 or Y.shape[1:] != (n, 2):
            raise SchemaError(f"lifter expects poses of shape (B, {n}, 2), got {Y.shape}")
        tape = tape if tape is not None else Tape(record=False)
        arch = self.architecture

        def run(name, x):
            return self.nets[name].forward(tape, x, training, rng, update_stats)

        if arch.representation is Representation.FULL:
            return run("full", ad.reshape(Y, (Y.shape[0], 2 * n)))

        locals_ = [s for s in arch.subnets if s.segment is not None]
        outputs = [run(s.name, _flatten(Y, s.indices)) for s in locals_]
        if arch.representation.split_recombine:
            return run("combiner", ad.concat(outputs, axis=1))
        order = np.concatenate([s.indices for s in locals_])
        inverse = np.argsort(order)
        return ad.take(ad.concat(outputs, axis=1), inverse, axis=1)

    def predict(self, Y: np.ndarray) -> np.ndarray:
        """Inference-mode depths for an array of poses (N, 2) or (B, N, 2)."""
        Y = np.asarray(Y, dtype=np.float64)
        single = Y.ndim == 2
        z = self.lift(None, Var(Y[None] if single else Y), training=False).value
        return z[0] if single else z


@dataclass
class Discriminator:
    net: ResidualMLP
    schema: KeypointSchema = field(default_factory=default_schema)

    @classmethod
    def create(cls, width: int, rng: np.random.Generator, schema: KeypointSchema | None = None,
               dropout: float = DEFAULT_DROPOUT):
        schema = schema or default_schema()
        spec = MLPSpec(2 * schema.num_joints, width, DISCRIMINATOR_BLOCKS, 1, dropout)
        return cls(ResidualMLP.create("discriminator", spec, rng), schema)

    @property
    def store(self) -> ParamStore:
        return self.net.store

    def parameter_count(self) -> int:
        return self.store.count()

    def score(
        self,
        tape: Tape | None,
        poses: Var,
        training: bool,
        rng: np.random.Generator | None = None,
        update_stats: bool = True,
    ) -> Var:
        if not isinstance(poses, Var):
            poses = Var(poses)
        n = self.schema.num_joints
        if poses.value.ndim != 3 or poses.shape[1:] != (n, 2):
            raise DimensionError(f"discriminator needs whole poses of shape (B, {n}, 2), got {poses.shape}")
        tape = tape if tape is not None else Tape(record=False)
        flat = ad.reshape(poses, (poses.shape[0], 2 * n))
        out = self.net.forward(tape, flat, training, rng, update_stats)
        return ad.reshape(out, (poses.shape[0],))


def discriminate(D: Discriminator, poses: np.ndarray) -> np.ndarray:
    """Inference-mode plausibility scores, one per pose."""
    poses = np.asarray(poses, dtype=np.float64)
    single = poses.ndim == 2
    s = D.score(None, Var(poses[None] if single else poses), training=False).value
    return s[0] if single else s


def parameter_count(model) -> int:
    if isinstance(model, (LifterModel, Discriminator)):
        return model.parameter_count()
    if isinstance(model, Architecture):
        return model.parameter_count()
    if isinstance(model, MLPSpec):
        return model.parameter_count()
    raise TypeError(f"cannot count parameters of {type(model).__name__}")
