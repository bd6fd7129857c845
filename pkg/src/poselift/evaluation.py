"""Protocol-II MPJPE (Procrustes-aligned), PCK3D and AUC."""

from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ConfigError, DimensionError
from .skeleton import Pose3D

PCK_THRESHOLD_MM = 150.0
AUC_GRID_MM = np.arange(0.0, 151.0, 5.0)


def upscale(pred: Pose3D) -> Pose3D:
    """Back to the original units of the 2D pose the prediction came from."""
    if pred.scale is None:
        raise ConfigError("prediction carries no normalizing scale")
    s = np.asarray(pred.scale, dtype=np.float64)
    if np.any(s <= 0):
        raise ConfigError("normalizing scale must be positive")
    return Pose3D(np.asarray(pred.coords) * s[..., None, None], 1.0)


def _coords(p) -> np.ndarray:
    return np.asarray(p.coords if isinstance(p, Pose3D) else p, dtype=np.float64)


def rigid_align(pred, gt, scale: bool = True, rank_tol: float = 1e-10) -> np.ndarray:
    """Similarity transform of ``pred`` onto ``gt`` minimizing squared distances.

    Works on (N, 3) or (B, N, 3). With ``scale=False`` only rotation and
    translation are fitted.
    """
    P, G = _coords(pred), _coords(gt)
    if P.shape != G.shape or P.shape[-1] != 3:
        raise DimensionError(f"pred {P.shape} and gt {G.shape} must match and end in 3")
    single = P.ndim == 2
    if single:
        P, G = P[None], G[None]
    mu_p = P.mean(axis=1, keepdims=True)
    mu_g = G.mean(axis=1, keepdims=True)
    X, Y = P - mu_p, G - mu_g
    H = np.swapaxes(X, 1, 2) @ Y  # (B, 3, 3)
    U, S, Vt = np.linalg.svd(H)
    top = S[:, :1]
    if np.any(top <= 0) or np.any(S[:, 1:2] <= rank_tol * np.maximum(top, 1.0)):
        raise AlignmentError("pose set is rank deficient; alignment is not unique")
    V = np.swapaxes(Vt, 1, 2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
    D = np.ones_like(S)
    D[:, -1] = d
    R = (V * D[:, None, :]) @ np.swapaxes(U, 1, 2)  # maps pred onto gt
    if scale:
        var_p = np.sum(X * X, axis=(1, 2))
        s = np.sum(S * D, axis=1) / var_p
    else:
        s = np.ones(len(P))
    out = s[:, None, None] * (X @ np.swapaxes(R, 1, 2)) + mu_g
    return out[0] if single else out


def per_joint_errors(pred, gt) -> np.ndarray:
    P, G = _coords(pred), _coords(gt)
    if P.shape != G.shape:
        raise DimensionError(f"pred {P.shape} and gt {G.shape} differ")
    return np.sqrt(np.sum((P - G) ** 2, axis=-1))


def mpjpe(pred, gt) -> float | np.ndarray:
    """Mean per-joint Euclidean distance; one value per pose for batches."""
    e = per_joint_errors(pred, gt).mean(axis=-1)
    return float(e) if np.ndim(e) == 0 else e


def pck3d_auc(pred, gt, threshold: float = PCK_THRESHOLD_MM, auc_grid=AUC_GRID_MM) -> tuple[float, float]:
    """PCK3D in percent at ``threshold`` and AUC in [0, 1] over ``auc_grid``.

    A joint counts as correct when its error is at most the threshold.
    """
    errors = per_joint_errors(pred, gt)
    if errors.size == 0:
        raise ConfigError("empty pose set")
    grid = np.asarray(auc_grid, dtype=np.float64)
    if grid.size == 0:
        raise ConfigError("empty AUC grid")
    pck = 100.0 * float(np.mean(errors <= threshold))
    curve = (errors.reshape(-1)[None, :] <= grid[:, None]).mean(axis=1)
    return pck, float(curve.mean())


@dataclass
class MetricsReport:
    per_pose_mpjpe: np.ndarray
    pck3d: float
    auc: float
    ids: list[str] = field(default_factory=list)
    actions: list[str | None] = field(default_factory=list)
    aligned_with_scale: bool = True

    @property
    def count(self) -> int:
        return len(self.per_pose_mpjpe)

    @property
    def mpjpe(self) -> float:
        return float(np.mean(self.per_pose_mpjpe))

    def per_action(self) -> "OrderedDict[str, float]":
        out: OrderedDict[str, list] = OrderedDict()
        for a, e in zip(self.actions or [None] * self.count, self.per_pose_mpjpe):
            out.setdefault(a if a is not None else "unlabelled", []).append(e)
        return OrderedDict((k, float(np.mean(v))) for k, v in sorted(out.items()))

    def rows(self) -> list[tuple[str, str]]:
        rows = [("poses", str(self.count)), ("mpjpe_mm", f"{self.mpjpe:.6f}"),
                ("pck3d_pct", f"{self.pck3d:.6f}"), ("auc", f"{self.auc:.6f}")]
        rows += [(f"mpjpe_mm[{a}]", f"{v:.6f}") for a, v in self.per_action().items()]
        return rows

    def to_csv(self, config_hash: str | None = None) -> str:
        buf = io.StringIO()
        if config_hash:
            buf.write(f"# config_sha256={config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows(self.rows())
        return buf.getvalue()

    def per_pose_csv(self, config_hash: str | None = None) -> str:
        buf = io.StringIO()
        if config_hash:
            buf.write(f"# config_sha256={config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "action", "mpjpe_mm"])
        ids = self.ids or [str(i) for i in range(self.count)]
        actions = self.actions or [None] * self.count
        for i, a, e in zip(ids, actions, self.per_pose_mpjpe):
            w.writerow([i, a or "", f"{e:.6f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        rows = self.rows()
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def evaluate_predictions(
    pred_mm: np.ndarray,
    gt_mm: np.ndarray,
    ids=None,
    actions=None,
    align_scale: bool = True,
    threshold: float = PCK_THRESHOLD_MM,
    auc_grid=AUC_GRID_MM,
) -> MetricsReport:
    aligned = rigid_align(pred_mm, gt_mm, scale=align_scale)
    per_pose = np.atleast_1d(mpjpe(aligned, gt_mm))
    pck, auc = pck3d_auc(aligned, gt_mm, threshold, auc_grid)
    return MetricsReport(per_pose, pck, auc, list(ids or []), list(actions or []), align_scale)


def evaluate_model(lifter, dataset, align_scale: bool = True, chunk: int = 4096) -> MetricsReport:
    """Lift ``dataset`` in inference mode and score it against its ground truth."""
    if dataset.gt3d is None:
        raise ConfigError("dataset has no 3D ground truth")
    pred = predict_mm(lifter, dataset.poses, dataset.scale, chunk)
    return evaluate_predictions(pred, dataset.gt3d, dataset.ids, dataset.actions, align_scale)


def predict_mm(lifter, poses: np.ndarray, scale: np.ndarray, chunk: int = 4096) -> np.ndarray:
    z = np.concatenate([lifter.predict(poses[i : i + chunk]) for i in range(0, len(poses), chunk)])
    return upscale(Pose3D(np.concatenate([poses, z[..., None]], axis=-1), scale)).coords


def mean_mpjpe(lifter, dataset, align_scale: bool = True) -> float:
    pred = predict_mm(lifter, dataset.poses, dataset.scale)
    return float(np.mean(mpjpe(rigid_align(pred, dataset.gt3d, scale=align_scale), dataset.gt3d)))
