"""Keypoint schema, pose containers and 2D pose normalization.

Schema files are JSON documents::

    {
      "format": "poselift-schema",
      "version": 1,
      "name": "...",
      "joints": [16 joint names, in array order],
      "left_hip": "<joint>", "right_hip": "<joint>",
      "partitions": {"leg_torso": {"legs": [...], "torso": [...]},
                     "five_limbs": {"left_arm": [...], ...}}
    }

A ``full`` partition with a single ``all`` segment is always implied. Every
partition must be disjoint and cover all joints; limb groups of ``five_limbs``
must have 3 or 4 members.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import NormalizationError, SchemaError

NUM_KEYPOINTS = 16
SCHEMA_FORMAT = "poselift-schema"
SCHEMA_VERSION = 1

FULL = "full"
LEG_TORSO = "leg_torso"
FIVE_LIMBS = "five_limbs"


@dataclass(frozen=True)
class KeypointSchema:
    name: str
    joints: tuple[str, ...]
    left_hip: int
    right_hip: int
    partitions: Mapping[str, Mapping[str, tuple[int, ...]]] = field(repr=False)

    def __post_init__(self):
        n = len(self.joints)
        if n != NUM_KEYPOINTS:
            raise SchemaError(f"schema must have {NUM_KEYPOINTS} joints, has {n}")
        if len(set(self.joints)) != n:
            raise SchemaError("duplicate joint names in schema")
        for pname, segments in self.partitions.items():
            seen = [i for idx in segments.values() for i in idx]
            if len(seen) != len(set(seen)):
                raise SchemaError(f"partition {pname!r} has overlapping segments")
            if sorted(seen) != list(range(n)):
                raise SchemaError(f"partition {pname!r} does not cover all {n} joints")
        for seg, idx in self.partitions.get(FIVE_LIMBS, {}).items():
            if len(idx) not in (3, 4):
                raise SchemaError(f"five_limbs segment {seg!r} has {len(idx)} joints, expected 3 or 4")

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    def index(self, joint: str) -> int:
        try:
            return self.joints.index(joint)
        except ValueError:
            raise SchemaError(f"unknown joint {joint!r}") from None

    def segments(self, partition: str) -> dict[str, tuple[int, ...]]:
        try:
            return dict(self.partitions[partition])
        except KeyError:
            raise SchemaError(f"unknown partition {partition!r}") from None

    def segment_indices(self, partition: str, segment: str) -> tuple[int, ...]:
        segs = self.segments(partition)
        if segment not in segs:
            raise SchemaError(f"partition {partition!r} has no segment {segment!r}")
        return segs[segment]

    def mask(self, indices) -> np.ndarray:
        m = np.zeros(self.num_joints, dtype=bool)
        m[list(indices)] = True
        return m


def schema_from_dict(doc: Mapping) -> KeypointSchema:
    if doc.get("format") != SCHEMA_FORMAT:
        raise SchemaError(f"not a schema document (format={doc.get('format')!r})")
    if doc.get("version") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema version {doc.get('version')!r}")
    joints = tuple(doc["joints"])
    lookup = {j: i for i, j in enumerate(joints)}

    def resolve(name):
        if name not in lookup:
            raise SchemaError(f"schema references unknown joint {name!r}")
        return lookup[name]

    for key in ("left_hip", "right_hip"):
        if key not in doc:
            raise SchemaError(f"schema does not identify {key}")
    partitions = {FULL: {"all": tuple(range(len(joints)))}}
    for pname, segs in doc.get("partitions", {}).items():
        partitions[pname] = {s: tuple(resolve(j) for j in members) for s, members in segs.items()}
    return KeypointSchema(
        name=doc.get("name", "unnamed"),
        joints=joints,
        left_hip=resolve(doc["left_hip"]),
        right_hip=resolve(doc["right_hip"]),
        partitions=partitions,
    )


def load_schema(path: str | Path | None = None) -> KeypointSchema:
    if path is None:
        text = resources.files("poselift.resources").joinpath("schema16.json").read_text()
    else:
        text = Path(path).read_text()
    return schema_from_dict(json.loads(text))


_DEFAULT: KeypointSchema | None = None


def default_schema() -> KeypointSchema:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_schema()
    return _DEFAULT


@dataclass(frozen=True)
class Pose2D:
    """Root-centered, max-normalized 2D keypoints.

    ``coords`` has shape (..., N, 2); ``scale`` has the leading shape and holds
    the max-abs coordinate of the centered pose in original units.
    """

    coords: np.ndarray
    scale: np.ndarray | float

    def validate(self, schema: KeypointSchema | None = None, atol: float = 1e-9) -> None:
        c = np.asarray(self.coords)
        if c.shape[-1] != 2 or c.ndim < 2:
            raise SchemaError(f"Pose2D coords must be (..., N, 2), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise NormalizationError("Pose2D has non-finite coordinates")
        if np.any(np.asarray(self.scale) <= 0):
            raise NormalizationError("Pose2D scale must be positive")
        if np.max(np.abs(c)) > 1 + atol:
            raise NormalizationError("Pose2D coordinates exceed [-1, 1]")
        if schema is not None:
            root = hip_midpoint(c, schema)
            if np.max(np.abs(root)) > atol:
                raise NormalizationError("Pose2D is not root-centered")

    def denormalize(self) -> np.ndarray:
        return self.coords * np.asarray(self.scale)[..., None, None]


@dataclass(frozen=True)
class Pose3D:
    """3D pose in the normalized units of the 2D pose it was lifted from."""

    coords: np.ndarray
    scale: np.ndarray | float

    def validate(self) -> None:
        c = np.asarray(self.coords)
        if c.shape[-1] != 3 or c.ndim < 2:
            raise SchemaError(f"Pose3D coords must be (..., N, 3), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise NormalizationError("Pose3D has non-finite coordinates")


def hip_midpoint(coords: np.ndarray, schema: KeypointSchema) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    return 0.5 * (coords[..., schema.left_hip, :] + coords[..., schema.right_hip, :])


def root_center(raw: np.ndarray, schema: KeypointSchema | None = None) -> np.ndarray:
    """Translate so the hip midpoint sits at the origin."""
    schema = schema or default_schema()
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-2] != schema.num_joints:
        raise SchemaError(f"pose has {raw.shape[-2]} joints, schema has {schema.num_joints}")
    return raw - hip_midpoint(raw, schema)[..., None, :]


def max_normalize(centered: np.ndarray) -> Pose2D:
    """Divide each pose by its max-abs coordinate so values lie in [-1, 1]."""
    centered = np.asarray(centered, dtype=np.float64)
    s = np.max(np.abs(centered), axis=(-2, -1))
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise NormalizationError("cannot normalize a degenerate (all-zero or non-finite) pose")
    coords = centered / s[..., None, None]
    return Pose2D(coords=coords, scale=s if s.ndim else float(s))


def normalize(raw: np.ndarray, schema: KeypointSchema | None = None) -> Pose2D:
    return max_normalize(root_center(raw, schema))


def select_segment(pose, schema: KeypointSchema, partition: str, segment: str):
    """Rows of ``pose`` (Pose2D, Pose3D or array) belonging to one segment."""
    idx = list(schema.segment_indices(partition, segment))
    if isinstance(pose, (Pose2D, Pose3D)):
        return type(pose)(coords=np.asarray(pose.coords)[..., idx, :], scale=pose.scale)
    return np.asarray(pose)[..., idx, :]


def scatter_segments(parts: Mapping[str, np.ndarray], schema: KeypointSchema, partition: str) -> np.ndarray:
    """Inverse of :func:`select_segment` over every segment of a partition."""
    segs = schema.segments(partition)
    if set(parts) != set(segs):
        raise SchemaError(f"expected segments {sorted(segs)}, got {sorted(parts)}")
    first = np.asarray(next(iter(parts.values())))
    out = np.empty(first.shape[:-2] + (schema.num_joints, first.shape[-1]), dtype=first.dtype)
    for name, idx in segs.items():
        out[..., list(idx), :] = parts[name]
    return out
