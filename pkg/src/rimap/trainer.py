"""Online training of the implicit map: sampling, sigmoid/BCE loss and the frame loop."""
from __future__ import annotations

import logging
import shutil
import tempfile
import time
import weakref
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .config import MapperConfig, TrainerConfig
from .decoder import Decoder
from .errors import RimError
from .feature_grid import LocalFeatureGrid, create_grid
from .global_map import GlobalMap, make_archive

log = logging.getLogger(__name__)

# inference batch size for outlier removal and SDF queries
_CHUNK = 1 << 16
# keeps outside-ray samples off the interior boundary
_BOUNDARY_MARGIN = 1e-3


def sigmoid_map(d, sigma):
    """S(d) = 1 / (1 + exp(d / sigma)); saturates cleanly for large |d|."""
    d = np.asarray(d)
    return expit(-d / np.asarray(sigma, dtype=d.dtype if d.dtype.kind == "f" else np.float64))


def bce_loss(refs, preds, sigma, clamp=1e-7):
    """Binary cross entropy between mapped reference and predicted SDFs.

    Returns ``(loss, dloss/dsdf_pred)``. The derivative uses the exact identity
    S'(d) = -S(1 - S)/sigma, so it equals ``(o - o_hat) / (N sigma)``; the clamp
    only guards the logarithms.
    """
    o = np.asarray(refs)
    oh = np.asarray(preds)
    n = o.shape[0]
    if n == 0:
        raise RimError("bce_loss: empty batch")
    c = np.clip(oh.astype(np.float64), clamp, 1.0 - clamp)
    o64 = o.astype(np.float64)
    loss = -np.mean(o64 * np.log(c) + (1.0 - o64) * np.log(1.0 - c))
    grad = (o - oh) / (n * sigma)
    return float(loss), grad.astype(oh.dtype)


def ray_box_interval(origins, dirs, lo, hi):
    """Entry/exit ray parameters against an axis-aligned box (slab method)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    t_enter = np.fmax.reduce(np.fmin(t1, t2), axis=1)
    t_exit = np.fmin.reduce(np.fmax(t1, t2), axis=1)
    return t_enter, t_exit


@dataclass
class SupervisionSet:
    points: np.ndarray
    refs: np.ndarray
    inside_rays: int = 0
    outside_rays: int = 0

    def __len__(self):
        return self.points.shape[0]


def ray_budget(cfg: TrainerConfig, have_inside: bool, have_outside: bool):
    """Number of inside and outside rays so the batch holds about ``batch_points`` samples."""
    per_in = 1 + cfg.surface_samples + cfg.free_samples
    per_out = cfg.free_samples
    have_outside = have_outside and per_out > 0
    N = cfg.batch_points
    if have_inside and have_outside:
        r_out = int(round(N * cfg.outside_fraction / per_out))
        r_in = max(1, int(round((N - r_out * per_out) / per_in)))
        return r_in, r_out
    if have_inside:
        return max(1, int(round(N / per_in))), 0
    if have_outside:
        return 0, max(1, int(round(N / per_out)))
    return 0, 0


def _stratified(rng, t_lo, t_hi, n):
    k = np.arange(n)
    u = rng.random((t_lo.shape[0], n))
    return t_lo[:, None] + (k + u) * ((t_hi - t_lo) / n)[:, None]


def sample_batch(hist_pos, hist_org, out_pts, out_org, grid: LocalFeatureGrid,
                 cfg: TrainerConfig, rng) -> SupervisionSet:
    """Draw one supervision batch from historical (inside) and current outside rays."""
    sigma = cfg.sigma
    r_in, r_out = ray_budget(cfg, len(hist_pos) > 0, len(out_pts) > 0)
    lo, hi = grid.interior_bounds()
    pts_parts, ref_parts = [], []

    if r_in:
        idx = rng.integers(0, len(hist_pos), r_in)
        p, o = hist_pos[idx], hist_org[idx]
        diff = p - o
        r = np.linalg.norm(diff, axis=1)
        u = diff / r[:, None]
        pts_parts.append(p)
        ref_parts.append(np.zeros(r_in))
        if cfg.surface_samples:
            t = r[:, None] + sigma * rng.standard_normal((r_in, cfg.surface_samples))
            pts_parts.append((o[:, None, :] + t[..., None] * u[:, None, :]).reshape(-1, 3))
            ref_parts.append((r[:, None] - t).reshape(-1))
        if cfg.free_samples:
            t_enter, _ = ray_box_interval(o, u, lo, hi)
            t_lo = np.maximum(cfg.t_near, t_enter)
            t_hi = r - 3.0 * sigma
            t = _stratified(rng, t_lo, t_hi, cfg.free_samples)
            ok = np.repeat(t_hi > t_lo, cfg.free_samples)
            pts_parts.append((o[:, None, :] + t[..., None] * u[:, None, :]).reshape(-1, 3)[ok])
            ref_parts.append((r[:, None] - t).reshape(-1)[ok])

    if r_out:
        idx = rng.integers(0, len(out_pts), r_out)
        p, o = out_pts[idx], out_org[idx]
        diff = p - o
        r = np.linalg.norm(diff, axis=1)
        u = diff / r[:, None]
        t_enter, t_exit = ray_box_interval(o, u, lo, hi)
        t_lo = np.maximum(cfg.t_near, t_enter)
        t_hi = np.minimum(t_exit - _BOUNDARY_MARGIN, r - 3.0 * sigma)
        t = _stratified(rng, t_lo, t_hi, cfg.free_samples)
        ok = np.repeat(t_hi > t_lo, cfg.free_samples)
        pts_parts.append((o[:, None, :] + t[..., None] * u[:, None, :]).reshape(-1, 3)[ok])
        ref_parts.append((r[:, None] - t).reshape(-1)[ok])

    if not pts_parts:
        return SupervisionSet(np.zeros((0, 3)), np.zeros(0))
    pts = np.concatenate(pts_parts)
    refs = np.concatenate(ref_parts)
    keep = grid.contains(pts)
    return SupervisionSet(pts[keep], refs[keep], r_in, r_out)


@dataclass
class FrameReport:
    frame_id: int
    losses: list = field(default_factory=list)
    n_points: int = 0
    n_inside: int = 0
    n_outside: int = 0
    n_dropped: int = 0
    n_hist: int = 0
    removed: int = 0
    slides: int = 0
    frozen_decoder: bool = False

    @property
    def loss_first(self):
        return self.losses[0] if self.losses else float("nan")

    @property
    def loss_last(self):
        return self.losses[-1] if self.losses else float("nan")

    def to_line(self) -> str:
        return (
            f"frame={self.frame_id} loss_first={self.loss_first:.6f} "
            f"loss_last={self.loss_last:.6f} hist={self.n_hist} removed={self.removed} "
            f"slides={self.slides} inside={self.n_inside} outside={self.n_outside} "
            f"dropped={self.n_dropped}"
        )

    def to_dict(self) -> dict:
        return {
            "frame_id": self.frame_id, "loss_first": self.loss_first,
            "loss_last": self.loss_last, "n_points": self.n_points,
            "n_inside": self.n_inside, "n_outside": self.n_outside,
            "n_dropped": self.n_dropped, "n_hist": self.n_hist,
            "removed": self.removed, "slides": self.slides,
            "frozen_decoder": self.frozen_decoder,
        }


TIMING_KEYS = ("slide", "preprocess", "sampling", "encoding", "forward", "backward")


class _Rows:
    """(n, 3) float64 array with amortized in-place appends."""

    def __init__(self):
        self.buf = np.zeros((0, 3))
        self.n = 0

    @property
    def view(self) -> np.ndarray:
        return self.buf[:self.n]

    def set(self, arr) -> None:
        self.buf = np.array(arr, dtype=np.float64).reshape(-1, 3)
        self.n = len(self.buf)

    def append(self, rows) -> None:
        need = self.n + len(rows)
        if need > len(self.buf):
            grown = np.empty((max(need, 2 * len(self.buf)), 3))
            grown[:self.n] = self.view
            self.buf = grown
        self.buf[self.n:need] = rows
        self.n = need


def _rows_property(name):
    return property(lambda self: getattr(self, name).view,
                    lambda self, arr: getattr(self, name).set(arr))


class Mapper:
    """Incremental mapping engine: local feature grid + global archive + decoder."""

    hist_pos = _rows_property("_hist_pos")
    hist_org = _rows_property("_hist_org")

    def __init__(self, config: MapperConfig | None = None, work_dir=None):
        self.config = config or MapperConfig()
        cfg = self.config
        self.dtype = np.dtype(cfg.run.precision)
        seed = cfg.run.seed
        self.decoder = Decoder(cfg.grid.feature_width, cfg.decoder.hidden_dim, seed=seed,
                               dtype=self.dtype)
        self.rng = np.random.default_rng([seed, 1])
        archive_root = None
        if cfg.global_map.archive == "disk":
            if work_dir is None:
                work_dir = tempfile.mkdtemp(prefix="rim-archive-")
                weakref.finalize(self, shutil.rmtree, work_dir, True)
            archive_root = f"{work_dir}/archive"
        self.global_map = GlobalMap(cfg.grid, cfg.freeze_radius,
                                    make_archive(cfg.global_map.archive, archive_root), self.dtype)
        self.grid: LocalFeatureGrid | None = None
        self._hist_pos, self._hist_org = _Rows(), _Rows()
        self._hist_origin = None  # local-map origin the history was last cropped to
        self.out_pts = np.zeros((0, 3))
        self.out_org = np.zeros((0, 3))
        self.frame_count = 0
        self.slide_count = 0
        self.visited: list[tuple[list, list]] = []
        self.timing = defaultdict(float)
        self.frame_time = 0.0

    # local map management ---------------------------------------------------

    def _ensure_grid(self, position) -> None:
        if self.grid is not None:
            return
        self.grid = create_grid(self.config.grid, position, dtype=self.dtype)
        for block in self.global_map.fetch_blocks(self.grid.full_regions()):
            self.grid.pad_block(block)

    def slide(self, position) -> bool:
        if self.grid is None:
            self._ensure_grid(position)
            moved = True
        else:
            report = self.grid.slide(position)
            moved = report.moved
            if moved:
                self.global_map.save_blocks(report.outgoing)
                for block in self.global_map.fetch_blocks(report.incoming_regions):
                    self.grid.pad_block(block)
                self.slide_count += 1
        self.global_map.enforce_budget(position, self.grid.origin)
        lo, hi = self.grid.aabb()
        box = (lo.tolist(), hi.tolist())
        if not self.visited or self.visited[-1] != box:
            self.visited.append(box)
        return moved

    def flush(self) -> None:
        """Write the local map's current content into the global map."""
        if self.grid is not None:
            self.global_map.save_blocks(self.grid.snapshot_blocks())

    # frame integration ------------------------------------------------------

    def preprocess(self, pose, points_sensor):
        """Split the frame by the local map, maintain the historical buffer."""
        cfg = self.config.trainer
        grid = self.grid
        world = pose.transform(points_sensor)
        sensor = np.asarray(pose.translation, dtype=np.float64)
        # zero-range rays carry no direction
        world = world[np.linalg.norm(world - sensor, axis=1) > 0]
        inside = grid.contains(world)
        p_in, p_out = world[inside], world[~inside]

        # everything appended since the last crop was inside, so only re-crop after a slide
        if self._hist_origin is None or not np.array_equal(self._hist_origin, grid.origin_index):
            keep = grid.contains(self.hist_pos)
            self.hist_pos, self.hist_org = self.hist_pos[keep], self.hist_org[keep]
            self._hist_origin = grid.origin_index.copy()

        removed = 0
        period = cfg.outlier_period_frames
        if cfg.outlier_removal and period > 0 and self.frame_count > 0 and self.frame_count % period == 0:
            removed = self.remove_outliers()

        org = np.broadcast_to(sensor, p_in.shape).copy()
        if cfg.bundle_supervision:
            self._hist_pos.append(p_in)
            self._hist_org.append(org)
        else:
            self.hist_pos, self.hist_org = p_in, org
        if len(self.hist_pos) > cfg.historical_cap:
            sel = np.sort(self.rng.choice(len(self.hist_pos), cfg.historical_cap, replace=False))
            self.hist_pos, self.hist_org = self.hist_pos[sel], self.hist_org[sel]

        self._mark_observed(p_in)
        self.out_pts = p_out
        self.out_org = np.broadcast_to(sensor, p_out.shape).copy()
        return len(p_in), len(p_out), removed

    def _mark_observed(self, points) -> None:
        if len(points) == 0:
            return
        self.grid.mark_observed_dilated(points, self.config.trainer.observe_dilation)

    def sample_batch(self) -> SupervisionSet:
        return sample_batch(self.hist_pos, self.hist_org, self.out_pts, self.out_org,
                            self.grid, self.config.trainer, self.rng)

    def train_iteration(self, batch: SupervisionSet):
        """One optimisation step; returns the pre-step loss or None for an empty batch."""
        if len(batch) == 0:
            return None
        cfg = self.config.trainer
        clock = time.perf_counter
        t0 = clock()
        feats, icache = self.grid.interpolate(batch.points)
        t1 = clock()
        sdf, fcache = self.decoder.forward(feats)
        refs = sigmoid_map(batch.refs.astype(self.dtype), cfg.sigma)
        preds = sigmoid_map(sdf, cfg.sigma)
        loss, dsdf = bce_loss(refs, preds, cfg.sigma)
        t2 = clock()
        dfeat = self.decoder.backward(fcache, dsdf)
        self.grid.accumulate_feature_grads(icache, dfeat)
        self.grid.adam_update(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        self.decoder.adam_update(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        t3 = clock()
        self.timing["encoding"] += t1 - t0
        self.timing["forward"] += t2 - t1
        self.timing["backward"] += t3 - t2
        return loss

    def integrate_frame(self, pose, cloud, frame_id=None) -> FrameReport:
        """Slide, preprocess, then run ``iterations_per_frame`` sample/train steps."""
        cfg = self.config.trainer
        clock = time.perf_counter
        start = clock()
        pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
        finite = np.all(np.isfinite(pts), axis=1)
        report = FrameReport(frame_id if frame_id is not None else self.frame_count)
        report.n_dropped = int((~finite).sum())
        pts = pts[finite]
        report.n_points = len(pts)
        if len(pts) == 0:
            report.n_hist = len(self.hist_pos)
            report.slides = self.slide_count
            return report

        t0 = clock()
        self.slide(pose.translation)
        t1 = clock()
        report.n_inside, report.n_outside, report.removed = self.preprocess(pose, pts)
        t2 = clock()
        self.timing["slide"] += t1 - t0
        self.timing["preprocess"] += t2 - t1

        for _ in range(cfg.iterations_per_frame):
            ts = clock()
            batch = self.sample_batch()
            self.timing["sampling"] += clock() - ts
            loss = self.train_iteration(batch)
            if loss is not None:
                report.losses.append(loss)

        self.frame_count += 1
        if cfg.freeze_after_frames > 0 and self.frame_count >= cfg.freeze_after_frames:
            self.decoder.freeze()
        report.n_hist = len(self.hist_pos)
        report.slides = self.slide_count
        report.frozen_decoder = self.decoder.frozen
        self.frame_time += clock() - start
        log.info(report.to_line())
        return report

    # inference --------------------------------------------------------------

    def _infer(self, points) -> np.ndarray:
        out = np.empty(len(points), self.dtype)
        for s in range(0, len(points), _CHUNK):
            out[s:s + _CHUNK] = self.decoder(self.grid.interpolate_values(points[s:s + _CHUNK]))
        return out

    def remove_outliers(self) -> int:
        """Drop historical points whose predicted SDF is farther than eps from zero."""
        if len(self.hist_pos) == 0:
            return 0
        sdf = self._infer(self.hist_pos)
        keep = np.abs(sdf) <= self.config.trainer.outlier_eps
        removed = int((~keep).sum())
        self.hist_pos, self.hist_org = self.hist_pos[keep], self.hist_org[keep]
        return removed

    def sdf_query(self, points) -> np.ndarray:
        """Predicted SDF at points inside the local map; NaN elsewhere."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.full(len(pts), np.nan)
        if self.grid is None:
            return out
        ok = self.grid.contains(pts)
        out[ok] = self._infer(pts[ok])
        return out

    def extract_mesh(self, region=None, normals=True):
        from .mesher import extract_mesh

        self.flush()
        return extract_mesh(self.global_map, self.decoder, region, normals=normals)

    # persistence ------------------------------------------------------------

    def checkpoint(self, path) -> None:
        from .checkpoint import save_checkpoint

        save_checkpoint(self, path)

    @classmethod
    def restore(cls, path, work_dir=None) -> "Mapper":
        from .checkpoint import load_checkpoint

        return load_checkpoint(path, work_dir=work_dir)
