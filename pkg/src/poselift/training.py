"""Adversarial training of a lifter against a whole-pose 2D discriminator.

Each batch runs one discriminator update followed by one generator update.
The generator objective is ``w1 * adversarial + w2 * reprojection + w3 * ninety``;
for independent representations every sub-network receives only the
reprojection and quarter-turn errors of the keypoints it predicts, plus the
shared adversarial loss scaled by its own weight.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .data import PoseDataset
from .errors import ConfigError, TrainingDivergence
from .evaluation import mean_mpjpe
from .geometry import run_cycle, sample_rotation
from .losses import LossWeights, lsgan_from_scores, ninety_degree_terms, quarter_turn_lifts, reprojection_loss
from .models import (
    DISCRIMINATOR_BLOCKS,
    Discriminator,
    LifterModel,
    Representation,
    architecture_from_meta,
    architecture_meta,
    solve_architecture,
)
from .numerics import autodiff as ad
from .numerics.autodiff import Tape, Var
from .numerics.checkpoint import load_checkpoint, save_checkpoint
from .numerics.layers import MLPSpec, ResidualMLP
from .numerics.optim import DEFAULT_BETAS, DEFAULT_EPS, adam_step
from .numerics.params import ParamStore
from .skeleton import KeypointSchema, default_schema

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RNG_STREAMS = ("init", "shuffle", "rotation", "dropout", "flip")

PROFILES: dict[str, dict[str, Any]] = {
    "large": {"batch_size": 8192, "epochs": 800, "base_width": 1024},
    "desk": {"batch_size": 256, "epochs": 200, "base_width": 128},
}


@dataclass
class TrainConfig:
    representation: str = "full"
    epochs: int = 800
    batch_size: int = 8192
    lr: float = 2e-4
    label_flip: float = 0.10
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    base_width: int = 1024
    discriminator_width: int | None = None
    feature_dim: int | None = None
    dropout: float = 0.1
    betas: tuple[float, float] = DEFAULT_BETAS
    eps: float = DEFAULT_EPS
    renormalize: bool = False
    checkpoint_every: int = 0
    profile: str = "large"

    def __post_init__(self):
        Representation.parse(self.representation)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.batch_size < 2:
            raise ConfigError("batch size must be at least 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if not 0.0 <= self.label_flip <= 1.0:
            raise ConfigError("label flip probability must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.base_width < 1:
            raise ConfigError("base width must be positive")

    @property
    def rep(self) -> Representation:
        return Representation.parse(self.representation)

    @classmethod
    def from_profile(cls, profile: str = "large", **overrides) -> "TrainConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose one of {sorted(PROFILES)}")
        kwargs = dict(PROFILES[profile], profile=profile)
        kwargs.update(overrides)
        return cls(**kwargs)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        doc.pop("format", None)
        profile = doc.pop("profile", "large")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls.from_profile(profile, **doc)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        doc = json.loads(Path(path).read_text())
        doc = {k: v for k, v in doc.items() if k not in ("data", "eval_data")}
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class EpochRecord:
    epoch: int
    d_loss: float
    g_loss: dict[str, float]
    adversarial: float
    reprojection: dict[str, float]
    ninety: dict[str, float]
    flips: int
    updates: int
    eval_mpjpe: float | None = None

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["type"] = "epoch"
        return d


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    aborted: str | None = None
    lifter: LifterModel | None = field(default=None, repr=False, compare=False)
    discriminator: Discriminator | None = field(default=None, repr=False, compare=False)

    def eval_curve(self) -> np.ndarray:
        return np.array([e.eval_mpjpe for e in self.epochs], dtype=np.float64)

    def loss_curves(self) -> dict[str, np.ndarray]:
        out = {"d_loss": np.array([e.d_loss for e in self.epochs])}
        for k in self.epochs[0].g_loss if self.epochs else []:
            out[f"g_loss[{k}]"] = np.array([e.g_loss[k] for e in self.epochs])
        return out

    def to_lines(self) -> list[str]:
        lines = [json.dumps({"type": "header", "config": self.config, "config_sha256": self.config_hash,
                             "seed": self.seed}, sort_keys=True)]
        lines += [json.dumps(e.to_json(), sort_keys=True) for e in self.epochs]
        for c in self.checkpoints:
            lines.append(json.dumps({"type": "checkpoint", "path": c}, sort_keys=True))
        if self.aborted:
            lines.append(json.dumps({"type": "aborted", "reason": self.aborted}, sort_keys=True))
        return lines

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.to_lines()) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        rec = None
        for line in Path(path).read_text().splitlines():
            doc = json.loads(line)
            kind = doc.pop("type")
            if kind == "header":
                rec = cls(config=doc["config"], config_hash=doc["config_sha256"], seed=doc["seed"])
            elif kind == "epoch":
                rec.epochs.append(EpochRecord(**doc))
            elif kind == "checkpoint":
                rec.checkpoints.append(doc["path"])
            elif kind == "aborted":
                rec.aborted = doc["reason"]
        if rec is None:
            raise ConfigError(f"{path}: no header record")
        return rec


# --- model construction and persistence ------------------------------------


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, children)}


def build_models(config: TrainConfig, rng: np.random.Generator, schema: KeypointSchema | None = None):
    schema = schema or default_schema()
    arch = solve_architecture(config.rep, config.base_width, schema, config.feature_dim, config.dropout)
    lifter = LifterModel.create(arch, rng, schema)
    disc = Discriminator.create(config.discriminator_width or config.base_width, rng, schema, config.dropout)
    return lifter, disc


def save_models(path, lifter: LifterModel, disc: Discriminator, config: TrainConfig, epoch: int,
                rngs: dict[str, np.random.Generator] | None = None) -> Path:
    meta = {
        "schema_version": SCHEMA_VERSION,
        "schema_name": lifter.schema.name,
        "representation": lifter.representation.value,
        "seed": config.seed,
        "epoch": epoch,
        "config": config.to_dict(),
        "config_sha256": config.hash(),
        "architecture": architecture_meta(lifter.architecture),
        "discriminator": {
            "width": disc.net.spec.width,
            "dropout": disc.net.spec.dropout,
        },
    }
    states = {k: g.bit_generator.state for k, g in (rngs or {}).items()}
    return save_checkpoint(path, [*lifter.stores, disc.store], meta, states)


def load_models(path, schema: KeypointSchema | None = None, expect: Representation | str | None = None):
    """Returns ``(lifter, discriminator, meta, rng_states)``."""
    schema = schema or default_schema()
    stores, meta, rng_states = load_checkpoint(path)
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: checkpoint schema version {meta.get('schema_version')} unsupported")
    if meta.get("schema_name") != schema.name:
        raise ConfigError(f"{path}: checkpoint was trained on schema {meta.get('schema_name')!r}")
    if expect is not None and Representation.parse(expect).value != meta["representation"]:
        raise ConfigError(f"{path}: checkpoint holds representation {meta['representation']!r}")
    arch = architecture_from_meta(meta["architecture"], schema)
    lifter = LifterModel.from_stores(arch, stores, schema)
    disc = None
    if "discriminator" in stores:
        d = meta["discriminator"]
        spec = MLPSpec(2 * schema.num_joints, d["width"], DISCRIMINATOR_BLOCKS, 1, d["dropout"])
        disc = Discriminator(ResidualMLP(spec, stores["discriminator"]), schema)
    return lifter, disc, meta, rng_states


# --- one training step -----------------------------------------------------


@dataclass
class StepStats:
    d_loss: float
    adversarial: float
    flipped: bool
    reprojection: dict[str, float]
    ninety: dict[str, float]
    g_loss: dict[str, float]


def _group_masks(lifter: LifterModel) -> list[tuple[str, tuple[str, ...], np.ndarray]]:
    return [(g.name, g.nets, lifter.schema.mask(g.indices)) for g in lifter.loss_groups]


def generator_objective(
    lifter: LifterModel,
    tape: Tape,
    Y: Var,
    R: np.ndarray,
    weights: LossWeights,
    rng: np.random.Generator | None,
    training: bool = True,
    renormalize: bool = False,
):
    """Consistency losses of one batch recorded on ``tape``.

    Returns ``(cycle, consistency_total, per_group)`` where ``per_group`` maps a
    loss group to its (reprojection, ninety) Vars.
    """
    first = [True]

    def lift(v: Var) -> Var:
        update = first[0]
        first[0] = False
        return lifter.lift(tape, v, training, rng, update_stats=update)

    schema = lifter.schema
    cyc = run_cycle(Y, lift, R, renormalize, (schema.left_hip, schema.right_hip))
    turns = quarter_turn_lifts(lift, Y, cyc.z)
    per_group = {}
    total = None
    for name, _, mask in _group_masks(lifter):
        l2d = reprojection_loss(Y, cyc.y_back, mask)
        t1, t2, t3 = ninety_degree_terms(lift, Y, cyc.z, mask, turns)
        l90 = t1 + t2 + t3
        per_group[name] = (l2d, l90)
        term = weights.reprojection * l2d + weights.ninety * l90
        total = term if total is None else total + term
    return cyc, total, per_group


def train_step(
    lifter: LifterModel,
    disc: Discriminator,
    batch: np.ndarray,
    config: TrainConfig,
    rngs: dict[str, np.random.Generator],
) -> StepStats:
    """One discriminator update followed by one generator update."""
    B = len(batch)
    R = sample_rotation(rngs["rotation"], size=B)
    weights = config.weights
    tape = Tape()
    Y = Var(batch)
    cyc, consistency, per_group = generator_objective(
        lifter, tape, Y, R, weights, rngs["dropout"], renormalize=config.renormalize
    )
    fake_input = cyc.y_tilde

    # Real and fake poses share one batch so batch norm cannot normalize away
    # their differences. The discriminator sees a detached copy of the fakes.
    flipped = bool(rngs["flip"].random() < config.label_flip)
    dtape = Tape()
    scores = disc.score(dtape, ad.concat([Var(batch), Var(fake_input.value)], axis=0), True, rngs["dropout"])
    d_loss, _ = lsgan_from_scores(scores[:B], scores[B:], flipped)
    _check_finite("discriminator loss", d_loss.value)
    d_grads = ad.backward(dtape, d_loss, [disc.store])
    adam_step(disc.store, d_grads[disc.store.name], config.lr, config.betas, config.eps)

    joint = disc.score(tape, ad.concat([Var(batch), fake_input], axis=0), True, rngs["dropout"], update_stats=False)
    fake_g = joint[B:]
    adv = 0.5 * ad.mean(ad.square(fake_g - 1.0))
    _check_finite("adversarial loss", adv.value)
    _check_finite("consistency loss", consistency.value)

    groups = lifter.loss_groups
    w_adv = {g.name: weights.adversarial_for(g.name) for g in groups}
    stores = lifter.stores
    if len(set(w_adv.values())) == 1:
        total = consistency + next(iter(w_adv.values())) * adv
        grads = ad.backward(tape, total, stores)
    else:
        grads = ad.backward(tape, consistency, stores)
        adv_grads = ad.backward(tape, adv, stores)
        for g in groups:
            for net in g.nets:
                key = lifter.nets[net].store.name
                grads[key] = {k: grads[key][k] + w_adv[g.name] * adv_grads[key][k] for k in grads[key]}
    for store in stores:
        adam_step(store, grads[store.name], config.lr, config.betas, config.eps)

    adv_v = float(adv.value)
    reproj = {k: float(v[0].value) for k, v in per_group.items()}
    ninety = {k: float(v[1].value) for k, v in per_group.items()}
    g_loss = {
        k: w_adv[k] * adv_v + weights.reprojection * reproj[k] + weights.ninety * ninety[k] for k in per_group
    }
    return StepStats(float(d_loss.value), adv_v, flipped, reproj, ninety, g_loss)


def _check_finite(what: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise TrainingDivergence(f"{what} is not finite", {"what": what})


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) >= 2:
            yield idx


# --- training loop ---------------------------------------------------------


def train(
    data: PoseDataset | np.ndarray,
    config: TrainConfig,
    eval_set: PoseDataset | None = None,
    out_dir: str | Path | None = None,
    schema: KeypointSchema | None = None,
    progress: bool = False,
) -> RunRecord:
    """Train a lifter and discriminator from scratch, fully determined by ``config.seed``."""
    poses = data.poses if isinstance(data, PoseDataset) else np.asarray(data, dtype=np.float64)
    if len(poses) < 2:
        raise ConfigError("need at least two training poses")
    if eval_set is not None and eval_set.gt3d is None:
        raise ConfigError("evaluation set needs 3D ground truth")
    schema = schema or default_schema()
    rngs = make_rngs(config.seed)
    lifter, disc = build_models(config, rngs["init"], schema)
    record = RunRecord(config=config.to_dict(), config_hash=config.hash(), seed=config.seed)
    record.lifter, record.discriminator = lifter, disc
    out = Path(out_dir) if out_dir is not None else None

    for epoch in range(1, config.epochs + 1):
        snapshot = [s.copy() for s in (*lifter.stores, disc.store)]
        t0 = time.perf_counter()
        try:
            stats = [train_step(lifter, disc, poses[idx], config, rngs)
                     for idx in iterate_batches(len(poses), config.batch_size, rngs["shuffle"])]
        except TrainingDivergence as exc:
            _restore(lifter, disc, snapshot)
            exc.diagnostics.update({"epoch": epoch, "seed": config.seed})
            if out is not None:
                path = save_models(out / "last_good.ckpt", lifter, disc, config, epoch - 1, rngs)
                record.checkpoints.append(path.name)
                exc.diagnostics["last_good_checkpoint"] = str(path)
            record.aborted = str(exc)
            if out is not None:
                record.save(out / "run.jsonl")
            raise
        ep = _summarize(epoch, stats)
        if eval_set is not None:
            ep.eval_mpjpe = mean_mpjpe(lifter, eval_set)
        record.epochs.append(ep)
        if progress:
            log.info("epoch %d d=%.4f g=%s mpjpe=%s (%.1fs)", epoch, ep.d_loss,
                     {k: round(v, 4) for k, v in ep.g_loss.items()}, ep.eval_mpjpe, time.perf_counter() - t0)
        if out is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            record.checkpoints.append(save_models(out / f"epoch{epoch:04d}.ckpt", lifter, disc, config, epoch, rngs).name)

    if out is not None:
        record.checkpoints.append(save_models(out / "final.ckpt", lifter, disc, config, config.epochs, rngs).name)
        record.save(out / "run.jsonl")
    return record


def _restore(lifter: LifterModel, disc: Discriminator, snapshot: list[ParamStore]) -> None:
    for target, saved in zip((*lifter.stores, disc.store), snapshot):
        target.params, target.buffers, target.m, target.v, target.step = (
            saved.params, saved.buffers, saved.m, saved.v, saved.step)


def _summarize(epoch: int, stats: list[StepStats]) -> EpochRecord:
    def avg(values):
        return float(np.mean(values))

    keys = stats[0].g_loss.keys()
    return EpochRecord(
        epoch=epoch,
        d_loss=avg([s.d_loss for s in stats]),
        g_loss={k: avg([s.g_loss[k] for s in stats]) for k in keys},
        adversarial=avg([s.adversarial for s in stats]),
        reprojection={k: avg([s.reprojection[k] for s in stats]) for k in keys},
        ninety={k: avg([s.ninety[k] for s in stats]) for k in keys},
        flips=int(sum(s.flipped for s in stats)),
        updates=len(stats),
    )
