"""Reconstruction metrics: accuracy, completeness, chamfer-L1 and F-score."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import RimError
from .mesh import TriangleMesh

DEFAULT_TAU = 0.10


@dataclass
class MapMetrics:
    accuracy: float  # cm
    completeness: float  # cm
    chamfer_l1: float  # cm
    f_score: float  # percent
    precision: float  # percent
    recall: float  # percent
    tau: float  # cm
    n_rec: int
    n_gt: int

    def record(self) -> str:
        return (f"acc_cm={self.accuracy:.4f} comp_cm={self.completeness:.4f} "
                f"c_l1_cm={self.chamfer_l1:.4f} f_score={self.f_score:.2f} "
                f"precision={self.precision:.2f} recall={self.recall:.2f} "
                f"tau_cm={self.tau:.2f} n_rec={self.n_rec} n_gt={self.n_gt}")

    def table_row(self) -> str:
        return f"| {self.accuracy:.2f} | {self.completeness:.2f} | {self.chamfer_l1:.2f} | {self.f_score:.2f} |"

    TABLE_HEADER = "| Acc. (cm) | Comp. (cm) | C-L1 (cm) | F-Score (%) |"


def sample_surface(mesh: TriangleMesh, n: int, seed=0) -> np.ndarray:
    """``n`` points uniformly distributed over the mesh area."""
    if len(mesh) == 0:
        raise RimError("cannot sample an empty mesh")
    if n == 0:
        return np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not total > 0:
        raise RimError("mesh has zero area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random((n, 2))
    flip = u.sum(axis=1) > 1
    u[flip] = 1 - u[flip]
    a, b, c = (mesh.vertices[mesh.triangles[tri, k]] for k in range(3))
    return a + u[:, :1] * (b - a) + u[:, 1:] * (c - a)


def _nn_dist(src, dst):
    """Exact nearest-neighbour distances from ``src`` to ``dst``.

    The tree proposes a few candidates; distances are then recomputed with the
    same formula as the brute-force path so near-ties resolve identically.
    """
    k = min(4, len(dst))
    _, idx = cKDTree(dst).query(src, k=k)
    idx = idx.reshape(len(src), k)
    d2 = np.sum((src[:, None, :] - dst[idx]) ** 2, axis=2)
    return np.sqrt(d2.min(axis=1))


def _brute_dist(src, dst):
    out = np.empty(len(src))
    for s in range(0, len(src), 512):
        chunk = src[s:s + 512]
        d2 = np.sum((chunk[:, None, :] - dst[None, :, :]) ** 2, axis=2)
        out[s:s + 512] = np.sqrt(d2.min(axis=1))
    return out


def _metrics(d_rec, d_gt, tau) -> MapMetrics:
    acc = float(d_rec.mean())
    comp = float(d_gt.mean())
    p = float(np.mean(d_rec < tau))
    r = float(np.mean(d_gt < tau))
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return MapMetrics(100 * acc, 100 * comp, 100 * (acc + comp) / 2, 100 * f, 100 * p, 100 * r,
                      100 * tau, len(d_rec), len(d_gt))


def _check(rec, gt):
    rec = np.asarray(rec, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(rec) == 0 or len(gt) == 0:
        raise RimError("metrics need non-empty reconstruction and ground-truth point sets")
    return rec, gt


def compute_metrics(rec_points, gt_points, tau=DEFAULT_TAU) -> MapMetrics:
    """Metrics between two point sets; distances in metres, results in cm / percent."""
    rec, gt = _check(rec_points, gt_points)
    return _metrics(_nn_dist(rec, gt), _nn_dist(gt, rec), tau)


def brute_force_metrics(rec_points, gt_points, tau=DEFAULT_TAU) -> MapMetrics:
    """All-pairs reference implementation of :func:`compute_metrics`."""
    rec, gt = _check(rec_points, gt_points)
    return _metrics(_brute_dist(rec, gt), _brute_dist(gt, rec), tau)


def crop_ground_truth(gt_points, visited, observed_fn=None) -> np.ndarray:
    """Keep points inside the union of closed boxes ``visited = [(lo, hi), ...]``.

    ``observed_fn(points) -> bool mask`` optionally applies a stricter mask.
    """
    pts = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    keep = np.zeros(len(pts), bool)
    for lo, hi in visited:
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        keep |= np.all((pts >= lo) & (pts <= hi), axis=1)
    if observed_fn is not None:
        idx = np.flatnonzero(keep)
        keep[idx] = np.asarray(observed_fn(pts[idx]), bool)
    return pts[keep]


def read_visited(path) -> list:
    """Visited boxes file: one ``lox loy loz hix hiy hiz`` line per box."""
    boxes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = line.split()
            if len(vals) != 6:
                raise RimError(f"{path}:{lineno}: expected 6 numbers, got {len(vals)}")
            v = [float(x) for x in vals]
            boxes.append((v[:3], v[3:]))
    return boxes


def write_visited(boxes, path) -> None:
    with open(path, "w") as fh:
        for lo, hi in boxes:
            fh.write(" ".join(repr(float(x)) for x in (*lo, *hi)) + "\n")
