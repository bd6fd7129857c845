"""Pose datasets: line-delimited JSON records, synthetic skeletons, preparation.

Record format (one JSON object per line)::

    {"id": "S9/Walking/0001",            # required, string
     "action": "Walking",                # optional
     "camera": "54138969",               # optional
     "units": {"2d": "px", "3d": "mm"},  # required for every present block
     "keypoints_2d": {"r_hip": [x, y], ... all 16 schema joints},
     "keypoints_3d": {"r_hip": [x, y, z], ...}}   # optional ground truth

Joint names are matched against the schema and reordered to schema order on
load. Floats are written with ``repr`` precision, so write/ingest round trips
are exact.

Users holding Human3.6M or MPI-INF-3DHP licenses convert their files by
yielding :class:`PoseRecord` objects from a :class:`RecordConverter` and
passing them to :func:`write_records`.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Protocol, Sequence

import numpy as np

from .errors import ConfigError, DataFormatError, NormalizationError, SchemaError
from .geometry import rot_x, rot_y
from .skeleton import KeypointSchema, default_schema, hip_midpoint, max_normalize, root_center

log = logging.getLogger(__name__)


@dataclass
class PoseRecord:
    id: str
    keypoints_2d: np.ndarray  # (N, 2), schema order
    keypoints_3d: np.ndarray | None = None  # (N, 3), schema order
    action: str | None = None
    camera: str | None = None
    units_2d: str = "mm"
    units_3d: str | None = None

    def validate(self, schema: KeypointSchema) -> None:
        n = schema.num_joints
        if self.keypoints_2d.shape != (n, 2):
            raise SchemaError(f"record {self.id}: 2D keypoints have shape {self.keypoints_2d.shape}")
        if not np.all(np.isfinite(self.keypoints_2d)):
            raise DataFormatError(f"record {self.id}: non-finite 2D coordinate")
        if self.keypoints_3d is not None:
            if self.keypoints_3d.shape != (n, 3):
                raise SchemaError(f"record {self.id}: 3D keypoints have shape {self.keypoints_3d.shape}")
            if not np.all(np.isfinite(self.keypoints_3d)):
                raise DataFormatError(f"record {self.id}: non-finite 3D coordinate")


class RecordConverter(Protocol):
    """Adapter from a licensed dataset layout to :class:`PoseRecord` objects."""

    def __call__(self, source: Path, schema: KeypointSchema) -> Iterable[PoseRecord]: ...


# --- persistence -----------------------------------------------------------


def _named(arr: np.ndarray, schema: KeypointSchema) -> dict[str, list[float]]:
    return {j: [float(v) for v in arr[i]] for i, j in enumerate(schema.joints)}


def record_to_json(rec: PoseRecord, schema: KeypointSchema) -> dict:
    doc = {"id": rec.id}
    if rec.action is not None:
        doc["action"] = rec.action
    if rec.camera is not None:
        doc["camera"] = rec.camera
    units = {"2d": rec.units_2d}
    doc["keypoints_2d"] = _named(rec.keypoints_2d, schema)
    if rec.keypoints_3d is not None:
        units["3d"] = rec.units_3d or "mm"
        doc["keypoints_3d"] = _named(rec.keypoints_3d, schema)
    doc["units"] = units
    return doc


def write_records(
    path: str | Path, records: Iterable[PoseRecord], schema: KeypointSchema | None = None, comment: str | None = None
) -> Path:
    """One JSON object per line; ``comment`` becomes a leading ``#`` line."""
    schema = schema or default_schema()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for rec in records:
            fh.write(json.dumps(record_to_json(rec, schema)))
            fh.write("\n")
    return path


def _parse_block(block, schema: KeypointSchema, dim: int, line: int, what: str) -> np.ndarray:
    if not isinstance(block, dict):
        raise DataFormatError(f"{what} must be an object of named joints", line)
    out = np.empty((schema.num_joints, dim))
    for i, joint in enumerate(schema.joints):
        if joint not in block:
            raise DataFormatError(f"{what} is missing joint {joint!r}", line)
        value = block[joint]
        if not isinstance(value, list) or len(value) != dim:
            raise DataFormatError(f"{what}[{joint!r}] must be a list of {dim} numbers", line)
        try:
            out[i] = [float(v) for v in value]
        except (TypeError, ValueError):
            raise DataFormatError(f"{what}[{joint!r}] is not numeric", line) from None
    if not np.all(np.isfinite(out)):
        raise DataFormatError(f"{what} has non-finite coordinates", line)
    return out


def iter_records(
    path: str | Path, schema: KeypointSchema | None = None, units_2d: str | None = None, units_3d: str | None = None
) -> Iterator[PoseRecord]:
    """Stream validated records. Units must agree with the arguments, or with
    the first record when an argument is None."""
    schema = schema or default_schema()
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            try:
                doc = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(doc, dict) or "id" not in doc or "keypoints_2d" not in doc:
                raise DataFormatError("record needs 'id' and 'keypoints_2d'", lineno)
            units = doc.get("units")
            if not isinstance(units, dict) or "2d" not in units:
                raise DataFormatError("record needs a 'units' object with a '2d' entry", lineno)
            if units_2d is None:
                units_2d = units["2d"]
            elif units["2d"] != units_2d:
                raise DataFormatError(f"2D units {units['2d']!r} do not match expected {units_2d!r}", lineno)
            kp2d = _parse_block(doc["keypoints_2d"], schema, 2, lineno, "keypoints_2d")
            kp3d = None
            if doc.get("keypoints_3d") is not None:
                if "3d" not in units:
                    raise DataFormatError("record has 3D keypoints but no '3d' unit", lineno)
                if units_3d is None:
                    units_3d = units["3d"]
                elif units["3d"] != units_3d:
                    raise DataFormatError(f"3D units {units['3d']!r} do not match expected {units_3d!r}", lineno)
                kp3d = _parse_block(doc["keypoints_3d"], schema, 3, lineno, "keypoints_3d")
            yield PoseRecord(
                id=str(doc["id"]),
                keypoints_2d=kp2d,
                keypoints_3d=kp3d,
                action=doc.get("action"),
                camera=None if doc.get("camera") is None else str(doc["camera"]),
                units_2d=units["2d"],
                units_3d=units.get("3d") if kp3d is not None else None,
            )


def ingest(path: str | Path, schema: KeypointSchema | None = None, **units) -> list[PoseRecord]:
    return list(iter_records(path, schema, **units))


# --- preparation -----------------------------------------------------------


@dataclass
class PoseDataset:
    """Normalized 2D poses with retained scale, plus optional 3D ground truth.

    ``poses`` (P, N, 2) are root-centered and max-normalized; ``scale`` (P,) is
    the per-pose normalizing factor in original 2D units; ``gt3d`` (P, N, 3) is
    root-centered ground truth in its own units.
    """

    poses: np.ndarray
    scale: np.ndarray
    gt3d: np.ndarray | None = None
    ids: list[str] = field(default_factory=list)
    actions: list[str | None] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.poses)

    def subset(self, index) -> "PoseDataset":
        index = np.asarray(index)
        return PoseDataset(
            poses=self.poses[index],
            scale=self.scale[index],
            gt3d=None if self.gt3d is None else self.gt3d[index],
            ids=[self.ids[i] for i in index] if self.ids else [],
            actions=[self.actions[i] for i in index] if self.actions else [],
        )


def prepare(records: Sequence[PoseRecord] | PoseDataset, schema: KeypointSchema | None = None) -> PoseDataset:
    """Root-center and max-normalize every pose; degenerate poses are skipped."""
    schema = schema or default_schema()
    if isinstance(records, PoseDataset):
        pose = max_normalize(root_center(records.poses, schema))
        return PoseDataset(pose.coords, records.scale * pose.scale, records.gt3d, list(records.ids),
                           list(records.actions))
    poses, scales, gts, ids, actions = [], [], [], [], []
    have_gt = bool(records) and all(r.keypoints_3d is not None for r in records)
    for rec in records:
        rec.validate(schema)
        try:
            p = max_normalize(root_center(rec.keypoints_2d, schema))
        except NormalizationError:
            log.warning("skipping degenerate pose %s", rec.id)
            continue
        poses.append(p.coords)
        scales.append(p.scale)
        if have_gt:
            gts.append(root_center(rec.keypoints_3d, schema))
        ids.append(rec.id)
        actions.append(rec.action)
    if not poses:
        raise NormalizationError("no usable poses in dataset")
    return PoseDataset(
        poses=np.stack(poses),
        scale=np.asarray(scales, dtype=np.float64),
        gt3d=np.stack(gts) if have_gt else None,
        ids=ids,
        actions=actions,
    )


def load_dataset(path: str | Path, schema: KeypointSchema | None = None) -> PoseDataset:
    return prepare(ingest(path, schema), schema)


# --- synthetic skeletons ---------------------------------------------------


def _euler(x: float, y: float, z: float) -> np.ndarray:
    c, s = math.cos(z), math.sin(z)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return rot_y(y) @ rot_x(x) @ rz


@dataclass
class SynthConfig:
    """Forward-kinematics generator settings.

    ``skeleton`` lists joints in parent-before-child order as
    ``{"joint", "parent", "offset"}``; offsets are rest-pose bone vectors in mm
    expressed in the parent frame. The root joint (parent null) is the pelvis,
    placed at the hip midpoint. ``angles`` maps a joint name to three
    ``[lo, hi]`` ranges (radians) for its local x, y, z rotations.
    """

    skeleton: list[dict]
    angles: dict[str, list[list[float]]]
    count: int = 1000
    seed: int = 0
    camera_azimuth: tuple[float, float] = (-math.pi, math.pi)
    camera_elevation: tuple[float, float] = (-math.pi / 18, math.pi / 18)
    action: str = "synthetic"

    def __post_init__(self):
        seen = set()
        for j in self.skeleton:
            if j["parent"] is not None and j["parent"] not in seen:
                raise ConfigError(f"joint {j['joint']!r} listed before its parent {j['parent']!r}")
            if j["parent"] is not None and np.linalg.norm(j["offset"]) <= 0:
                raise ConfigError(f"bone to {j['joint']!r} must have positive length")
            seen.add(j["joint"])
        for joint, ranges in self.angles.items():
            if joint not in seen:
                raise ConfigError(f"angle range given for unknown joint {joint!r}")
            if len(ranges) != 3 or any(lo > hi for lo, hi in ranges):
                raise ConfigError(f"angle ranges for {joint!r} must be three [lo, hi] pairs")
            if any(abs(v) > math.pi for pair in ranges for v in pair):
                raise ConfigError(f"angle ranges for {joint!r} exceed [-pi, pi]")
        if self.count < 1:
            raise ConfigError("count must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        known = {"skeleton", "angles", "count", "seed", "camera_azimuth", "camera_elevation", "action"}
        unknown = set(doc) - known - {"format"}
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        kwargs = {k: doc[k] for k in known if k in doc}
        for k in ("camera_azimuth", "camera_elevation"):
            if k in kwargs:
                kwargs[k] = tuple(kwargs[k])
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path | None = None, **overrides) -> "SynthConfig":
        if path is None:
            text = resources.files("poselift.resources").joinpath("synth_default.json").read_text()
        else:
            text = Path(path).read_text()
        doc = json.loads(text)
        doc.update(overrides)
        return cls.from_dict(doc)

    def bone_lengths(self) -> dict[tuple[str, str], float]:
        return {
            (j["parent"], j["joint"]): float(np.linalg.norm(j["offset"]))
            for j in self.skeleton
            if j["parent"] is not None
        }


def forward_kinematics(config: SynthConfig, local_rotations: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """World positions of every joint given per-joint local rotation matrices."""
    frames: dict[str, np.ndarray] = {}
    positions: dict[str, np.ndarray] = {}
    for j in config.skeleton:
        name, parent = j["joint"], j["parent"]
        local = local_rotations.get(name, np.eye(3))
        if parent is None:
            positions[name] = np.zeros(3)
            frames[name] = local
        else:
            positions[name] = positions[parent] + frames[parent] @ np.asarray(j["offset"], dtype=np.float64)
            frames[name] = frames[parent] @ local
    return positions


def synthesize(config: SynthConfig, schema: KeypointSchema | None = None) -> list[PoseRecord]:
    """Sample poses by forward kinematics and view them orthographically.

    3D ground truth is in the camera frame (mm, root-centered); 2D keypoints are
    its first two columns.
    """
    schema = schema or default_schema()
    names = {j["joint"] for j in config.skeleton}
    missing = [j for j in schema.joints if j not in names]
    if missing:
        raise SchemaError(f"synthetic skeleton lacks schema joints {missing}")
    rng = np.random.default_rng(config.seed)
    records = []
    width = len(str(config.count - 1))
    for k in range(config.count):
        local = {}
        for joint, ranges in config.angles.items():
            x, y, z = (rng.uniform(lo, hi) for lo, hi in ranges)
            local[joint] = _euler(x, y, z)
        world = forward_kinematics(config, local)
        az = rng.uniform(*config.camera_azimuth)
        el = rng.uniform(*config.camera_elevation)
        cam = rot_x(el) @ rot_y(az)
        pts = np.stack([world[j] for j in schema.joints]) @ cam.T
        pts = pts - hip_midpoint(pts, schema)
        records.append(
            PoseRecord(
                id=f"synth-{config.seed}-{k:0{width}d}",
                keypoints_2d=pts[:, :2].copy(),
                keypoints_3d=pts,
                action=config.action,
                units_2d="mm",
                units_3d="mm",
            )
        )
    return records

