"""Post-hoc analyses of trained lifters.

``probe_correlations`` measures how a lifter's predicted depths move when one
2D keypoint is scaled towards or away from the root. ``stability_study``
trains the same configuration under several seeds and summarizes how the
evaluation error spreads across them.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import PoseDataset
from .errors import ConfigError, DimensionError, TrainingDivergence
from .skeleton import KeypointSchema, default_schema
from .training import RunRecord, TrainConfig, train

log = logging.getLogger(__name__)

# Scale factors -0.95 .. 1.05 in steps of 0.01; 1.0 leaves the pose unchanged.
PROBE_PERCENT = np.arange(-95, 106)
PROBE_GRID = PROBE_PERCENT / 100.0


@dataclass
class SensitivityTensor:
    """``deviation[k, s, o]``: mean absolute change of depth ``o`` when keypoint
    ``k`` is scaled by ``scales[s]`` (normalized units)."""

    deviation: np.ndarray
    scales: np.ndarray
    joints: tuple[str, ...]
    representation: str | None = None
    poses: int = 0

    def __post_init__(self):
        k = len(self.joints)
        if self.deviation.shape != (k, len(self.scales), k):
            raise DimensionError(
                f"deviation tensor {self.deviation.shape} does not match {k} joints x {len(self.scales)} scales"
            )

    def curve(self, perturbed: str, ordinate: str) -> np.ndarray:
        return self.deviation[self.joints.index(perturbed), :, self.joints.index(ordinate)]

    def cross_block(self, rows, cols) -> np.ndarray:
        """Slice with perturbed keypoints ``rows`` and output ordinates ``cols``."""
        return self.deviation[np.ix_(list(rows), np.arange(len(self.scales)), list(cols))]

    def max_cross_segment(self, schema: KeypointSchema, partition: str) -> float:
        """Largest deviation of any ordinate outside the perturbed keypoint's segment."""
        segments = list(schema.segments(partition).values())
        worst = 0.0
        for seg in segments:
            others = [j for s in segments if s is not seg for j in s]
            if others:
                worst = max(worst, float(np.max(self.cross_block(seg, others))))
        return worst

    def to_csv(self, config_hash: str | None = None) -> str:
        buf = io.StringIO()
        if config_hash:
            buf.write(f"# config_sha256={config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["keypoint", "scale", "ordinate", "deviation"])
        for k, kname in enumerate(self.joints):
            for s, scale in enumerate(self.scales):
                for o, oname in enumerate(self.joints):
                    w.writerow([kname, f"{scale:.2f}", oname, repr(float(self.deviation[k, s, o]))])
        return buf.getvalue()

    def write(self, out_dir: str | Path, config_hash: str | None = None) -> list[Path]:
        """Long-format CSV plus one two-column curve file per (keypoint, ordinate) pair."""
        out = Path(out_dir)
        curves = out / "curves"
        curves.mkdir(parents=True, exist_ok=True)
        paths = [out / "sensitivity.csv"]
        paths[0].write_text(self.to_csv(config_hash))
        header = f"# config_sha256={config_hash}\n" if config_hash else ""
        for k, kname in enumerate(self.joints):
            for o, oname in enumerate(self.joints):
                rows = "".join(f"{s:.2f},{d!r}\n" for s, d in zip(self.scales, self.deviation[k, :, o].tolist()))
                p = curves / f"{kname}__{oname}.csv"
                p.write_text(header + "scale,deviation\n" + rows)
                paths.append(p)
        return paths


def probe_correlations(
    model,
    data: PoseDataset | np.ndarray,
    grid=PROBE_GRID,
    schema: KeypointSchema | None = None,
    pose_index: int | None = None,
) -> SensitivityTensor:
    """Scale each keypoint's root-relative coordinates by every factor in
    ``grid`` and record the mean absolute change of every predicted depth.

    With ``pose_index`` set only that single pose is probed instead of the
    dataset average.
    """
    schema = schema or default_schema()
    poses = data.poses if isinstance(data, PoseDataset) else np.asarray(data, dtype=np.float64)
    if poses.ndim != 3 or poses.shape[1:] != (schema.num_joints, 2):
        raise DimensionError(f"expected (B, {schema.num_joints}, 2) poses, got {poses.shape}")
    if pose_index is not None:
        poses = poses[pose_index : pose_index + 1]
    if len(poses) == 0:
        raise ConfigError("probe needs at least one pose")
    grid = np.asarray(grid, dtype=np.float64)
    n, k = len(poses), schema.num_joints
    # Every prediction uses the batch shape of the baseline, so untouched
    # ordinates of independent networks reproduce it bit for bit.
    base = model.predict(poses)  # (n, k)
    dev = np.empty((k, len(grid), k))
    for j in range(k):
        for s, factor in enumerate(grid):
            batch = poses.copy()
            batch[:, j, :] *= factor
            dev[j, s] = np.abs(model.predict(batch) - base).mean(axis=0)
    rep = getattr(model, "representation", None)
    return SensitivityTensor(dev, grid, schema.joints, getattr(rep, "value", rep), n)


# --- stability ------------------------------------------------------------


def _mean_std(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    std = float(np.std(values, ddof=1)) if len(values) > 1 else float("nan")
    return float(np.mean(values)), std


@dataclass
class StabilitySummary:
    """Per-seed evaluation curves and their spread across seeds.

    Standard deviations are sample deviations (``ddof=1``) across seeds. The
    windowed deviation is the across-seed deviation at each epoch of the window,
    averaged over the window; the windowed mean averages all window values.
    """

    seeds: list[int]
    curves: dict[int, np.ndarray]
    window: tuple[int, int]
    aborted: dict[int, str] = field(default_factory=dict)
    config_hash: str | None = None

    def __post_init__(self):
        lengths = {len(c) for c in self.curves.values()}
        if len(lengths) > 1:
            raise DimensionError(f"completed runs have different lengths: {sorted(lengths)}")
        lo, hi = self.window
        n = lengths.pop() if lengths else 0
        if not 1 <= lo <= hi or (n and hi > n):
            raise ConfigError(f"window {self.window} is outside epochs 1..{n}")

    @property
    def completed(self) -> list[int]:
        return [s for s in self.seeds if s in self.curves]

    def _matrix(self) -> np.ndarray:
        done = self.completed
        if len(done) < 2:
            raise ConfigError(f"need at least two completed runs, have {len(done)}")
        return np.stack([self.curves[s] for s in done])

    def final(self) -> tuple[float, float]:
        return _mean_std(self._matrix()[:, -1])

    def windowed(self) -> tuple[float, float]:
        lo, hi = self.window
        block = self._matrix()[:, lo - 1 : hi]
        return float(block.mean()), float(np.std(block, axis=0, ddof=1).mean())

    def minimum(self) -> tuple[float, float]:
        return _mean_std(self._matrix().min(axis=1))

    def rows(self) -> list[tuple[str, float, float]]:
        return [("final", *self.final()), ("window", *self.windowed()), ("min", *self.minimum())]

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.config_hash:
            buf.write(f"# config_sha256={self.config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["statistic", "mean_mm", "std_mm", "window_start", "window_end", "runs"])
        for name, m, s in self.rows():
            w.writerow([name, repr(m), repr(s), self.window[0], self.window[1], len(self.completed)])
        for seed, reason in sorted(self.aborted.items()):
            w.writerow([f"aborted[seed={seed}]", "", "", "", "", reason])
        return buf.getvalue()

    def curves_csv(self) -> str:
        buf = io.StringIO()
        if self.config_hash:
            buf.write(f"# config_sha256={self.config_hash}\n")
        done = self.completed
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", *[f"seed{s}" for s in done]])
        for e in range(len(self.curves[done[0]]) if done else 0):
            w.writerow([e + 1, *[repr(float(self.curves[s][e])) for s in done]])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{name:<7} {m:9.3f} +/- {s:.3f} mm" for name, m, s in self.rows()]
        lines.insert(1, f"        (window = epochs {self.window[0]}..{self.window[1]})")
        lines += [f"aborted seed {s}: {r}" for s, r in sorted(self.aborted.items())]
        return "\n".join(lines)


def last_quarter(epochs: int) -> tuple[int, int]:
    return (epochs - max(1, epochs // 4) + 1, epochs)


def _run_seed(args) -> tuple[int, np.ndarray | None, str | None]:
    config, seed, data, eval_set, out_dir = args
    cfg = replace(config, seed=seed)
    run_dir = Path(out_dir) / f"seed{seed}" if out_dir is not None else None
    try:
        rec: RunRecord = train(data, cfg, eval_set=eval_set, out_dir=run_dir)
    except TrainingDivergence as exc:
        log.warning("seed %d aborted: %s", seed, exc)
        return seed, None, str(exc)
    curve = rec.eval_curve()
    if not np.all(np.isfinite(curve)):
        return seed, None, "non-finite evaluation error"
    return seed, curve, None


def stability_study(
    config: TrainConfig,
    seeds: list[int],
    data: PoseDataset | np.ndarray,
    eval_set: PoseDataset,
    window: tuple[int, int] | None = None,
    out_dir: str | Path | None = None,
    workers: int = 1,
) -> StabilitySummary:
    """Train ``config`` once per seed and summarize the evaluation curves.

    Diverged runs are excluded from the statistics and listed in ``aborted``.
    ``window`` defaults to the last quarter of the epochs.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ConfigError("stability study needs at least two seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"seeds must be distinct, got {seeds}")
    if eval_set is None or eval_set.gt3d is None:
        raise ConfigError("stability study needs an evaluation set with 3D ground truth")
    window = tuple(window) if window is not None else last_quarter(config.epochs)
    if not 1 <= window[0] <= window[1] <= config.epochs:
        raise ConfigError(f"window {window} is outside epochs 1..{config.epochs}")
    jobs = [(config, s, data, eval_set, out_dir) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed, jobs))
    else:
        results = [_run_seed(j) for j in jobs]
    curves = {s: c for s, c, _ in results if c is not None}
    aborted = {s: r for s, _, r in results if r is not None}
    return StabilitySummary(seeds, curves, window, aborted, config.hash())
