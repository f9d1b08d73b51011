"""Synthetic range-sensor sequences over analytic SDF scenes.

Scenes are min-unions of spheres, boxes, cylinders and half-spaces. A
primitive may carry a motion window; outside its window it does not exist.
The sensor frame is x forward, y left, z up.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
from scipy.spatial.transform import Rotation

from .data_io import PoseRecord, write_cloud_ply, write_poses
from .errors import ConfigError

SHAPES = ("sphere", "box", "cylinder", "plane")
TRACE_TOL = 1e-4
TRACE_STEPS = 256


@dataclass
class Motion:
    t_start: float
    t_end: float
    velocity: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.t_end >= self.t_start:
            raise ConfigError(f"motion window end {self.t_end} precedes start {self.t_start}")
        self.velocity = tuple(float(v) for v in self.velocity)

    def active(self, t) -> bool:
        return self.t_start <= t <= self.t_end


@dataclass
class Primitive:
    """One solid. ``size`` is the radius (sphere), half extents (box),
    ``(radius, half_height)`` (cylinder, axis = local z) or unused (plane).
    Planes are half-spaces whose solid side is opposite ``normal``."""

    shape: str
    center: tuple = (0.0, 0.0, 0.0)
    size: tuple = (1.0,)
    rotation: tuple = (0.0, 0.0, 0.0, 1.0)
    normal: tuple = (0.0, 0.0, 1.0)
    motion: Motion | None = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        self.center = tuple(float(c) for c in np.reshape(self.center, 3))
        self.size = tuple(float(s) for s in np.atleast_1d(self.size))
        need = {"sphere": 1, "box": 3, "cylinder": 2, "plane": 0}[self.shape]
        if self.shape != "plane":
            if len(self.size) != need:
                raise ConfigError(f"{self.shape} needs {need} dimension(s), got {self.size}")
            if min(self.size) <= 0:
                raise ConfigError(f"{self.shape} dimensions must be > 0, got {self.size}")
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(q) - 1) > 1e-6:
            raise ConfigError(f"rotation quaternion {tuple(q)} is not unit length")
        self.rotation = tuple(q)
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if not np.linalg.norm(n) > 0:
            raise ConfigError("plane normal must be non-zero")
        self.normal = tuple(n / np.linalg.norm(n))
        self._R = Rotation.from_quat(q).as_matrix()

    def position(self, t) -> np.ndarray:
        c = np.asarray(self.center)
        if self.motion is not None:
            c = c + np.asarray(self.motion.velocity) * (t - self.motion.t_start)
        return c

    def exists(self, t) -> bool:
        return self.motion is None or self.motion.active(t)

    def sdf(self, points, t=0.0) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64) - self.position(t)
        if self.shape == "plane":
            return p @ np.asarray(self.normal)
        q = p @ self._R  # world -> local
        if self.shape == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.shape == "box":
            d = np.abs(q) - np.asarray(self.size)
        else:
            r, h = self.size
            d = np.stack([np.linalg.norm(q[..., :2], axis=-1) - r, np.abs(q[..., 2]) - h], -1)
        outside = np.linalg.norm(np.maximum(d, 0), axis=-1)
        return outside + np.minimum(d.max(axis=-1), 0)

    # area-uniform surface samples, local construction then world transform
    def surface_samples(self, m, rng, t=0.0, plane_disk=(None, 1.0)):
        c = self.position(t)
        if self.shape == "plane":
            centre, radius = plane_disk
            n = np.asarray(self.normal)
            centre = c if centre is None else np.asarray(centre) - ((np.asarray(centre) - c) @ n) * n
            a = np.cross(n, [1.0, 0, 0] if abs(n[0]) < 0.9 else [0, 1.0, 0])
            a /= np.linalg.norm(a)
            b = np.cross(n, a)
            rr = radius * np.sqrt(rng.random(m))
            th = 2 * np.pi * rng.random(m)
            return centre + (rr * np.cos(th))[:, None] * a + (rr * np.sin(th))[:, None] * b
        if self.shape == "sphere":
            v = rng.standard_normal((m, 3))
            local = self.size[0] * v / np.linalg.norm(v, axis=1, keepdims=True)
        elif self.shape == "box":
            h = np.asarray(self.size)
            areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]] * 2)
            face = rng.choice(6, m, p=areas / areas.sum())
            local = (2 * rng.random((m, 3)) - 1) * h
            ax = face % 3
            sign = np.where(face < 3, 1.0, -1.0)
            local[np.arange(m), ax] = sign * h[ax]
        else:
            r, h = self.size
            areas = np.array([2 * np.pi * r * 2 * h, np.pi * r * r, np.pi * r * r])
            part = rng.choice(3, m, p=areas / areas.sum())
            th = 2 * np.pi * rng.random(m)
            rad = np.where(part == 0, r, r * np.sqrt(rng.random(m)))
            z = np.where(part == 0, (2 * rng.random(m) - 1) * h, np.where(part == 1, h, -h))
            local = np.stack([rad * np.cos(th), rad * np.sin(th), z], -1)
        return c + local @ self._R.T

    def area(self, plane_radius=1.0) -> float:
        if self.shape == "sphere":
            return 4 * np.pi * self.size[0] ** 2
        if self.shape == "box":
            x, y, z = self.size
            return 8 * (x * y + y * z + x * z)
        if self.shape == "cylinder":
            r, h = self.size
            return 4 * np.pi * r * h + 2 * np.pi * r * r
        return np.pi * plane_radius ** 2


@dataclass
class SceneSpec:
    primitives: list = field(default_factory=list)

    def __post_init__(self):
        if not any(p.motion is None for p in self.primitives):
            raise ConfigError("a scene needs at least one static primitive")


@dataclass
class SensorSpec:
    kind: str = "depth_camera"
    hfov: float = 90.0  # degrees
    vfov: float = 67.5
    width: int = 64
    height: int = 48
    azimuth_count: int = 360
    elevation_angles: tuple = (-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0)
    max_range: float = 10.0
    range_noise_std: float = 0.0

    def __post_init__(self):
        if self.kind not in ("depth_camera", "spinning_lidar"):
            raise ConfigError(f"unknown sensor kind {self.kind!r}")
        if not self.max_range > 0:
            raise ConfigError("max_range must be > 0")
        if self.range_noise_std < 0:
            raise ConfigError("range_noise_std must be >= 0")
        if min(self.width, self.height, self.azimuth_count) < 1 or len(self.elevation_angles) < 1:
            raise ConfigError("sensor ray counts must be >= 1")
        if self.kind == "depth_camera" and not (0 < self.hfov < 180 and 0 < self.vfov < 180):
            raise ConfigError("camera fields of view must lie in (0, 180) degrees")
        self.elevation_angles = tuple(float(e) for e in self.elevation_angles)

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame."""
        if self.kind == "depth_camera":
            u = (np.arange(self.width) + 0.5) / self.width * 2 - 1
            v = (np.arange(self.height) + 0.5) / self.height * 2 - 1
            vv, uu = np.meshgrid(v, u, indexing="ij")
            d = np.stack([np.ones_like(uu), -uu * math.tan(math.radians(self.hfov) / 2),
                          -vv * math.tan(math.radians(self.vfov) / 2)], -1).reshape(-1, 3)
        else:
            az = 2 * np.pi * np.arange(self.azimuth_count) / self.azimuth_count
            el = np.radians(np.asarray(self.elevation_angles))
            ee, aa = np.meshgrid(el, az, indexing="ij")
            d = np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], -1).reshape(-1, 3)
        return d / np.linalg.norm(d, axis=1, keepdims=True)


def scene_sdf(spec: SceneSpec, points, time=0.0) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    out = np.full(pts.shape[:-1], np.inf)
    for prim in spec.primitives:
        if prim.exists(time):
            out = np.minimum(out, prim.sdf(pts, time))
    return out


@dataclass
class FrameCloud:
    points: np.ndarray  # sensor-frame hit points
    hit: np.ndarray  # per ray
    ranges: np.ndarray  # per ray, inf for misses
    directions: np.ndarray


def sphere_trace(spec, origins, dirs, max_range, time=0.0):
    """Ranges to the zero level set along rays (inf when nothing is hit)."""
    n = len(dirs)
    t = np.zeros(n)
    hit = np.zeros(n, bool)
    alive = np.ones(n, bool)
    for _ in range(TRACE_STEPS):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        d = scene_sdf(spec, origins[idx] + t[idx, None] * dirs[idx], time)
        close = d < TRACE_TOL
        hit[idx[close]] = True
        alive[idx[close]] = False
        step = idx[~close]
        t[step] += d[~close]
        alive[step[t[step] > max_range]] = False
    r = np.where(hit & (t <= max_range), t, np.inf)
    return r


def cast_rays(spec: SceneSpec, pose: PoseRecord, sensor: SensorSpec, time=None, seed=0) -> FrameCloud:
    t = pose.timestamp if time is None else time
    dirs_s = sensor.directions()
    R = pose.rotation_matrix()
    origin = np.asarray(pose.translation, dtype=np.float64)
    dirs_w = dirs_s @ R.T
    ranges = sphere_trace(spec, np.broadcast_to(origin, dirs_w.shape), dirs_w, sensor.max_range, t)
    hit = np.isfinite(ranges)
    if sensor.range_noise_std > 0:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(len(ranges)) * sensor.range_noise_std
        ranges = np.where(hit, ranges + noise, ranges)
    pts = dirs_s[hit] * ranges[hit, None]
    return FrameCloud(pts, hit, ranges, dirs_s)


def generate_sequence(scene: SceneSpec, trajectory, sensor: SensorSpec, out_dir, seed=0) -> None:
    """Write ``poses.txt`` and ``frames/%06d.ply`` (sensor-frame clouds)."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(trajectory):
        ss = np.random.SeedSequence([seed, i])
        frame = cast_rays(scene, pose, sensor, seed=ss)
        write_cloud_ply(frame.points, out / "frames" / f"{pose.frame_id:06d}.ply")
    write_poses(trajectory, out / "poses.txt")


def sample_scene_surface(spec: SceneSpec, n, bounds, seed=0, time=0.0) -> np.ndarray:
    """``n`` points uniform over the visible scene surface inside the closed box ``bounds``.

    Surface patches buried inside another primitive are rejected.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    rng = np.random.default_rng(seed)
    centre = 0.5 * (lo + hi)
    radius = 0.5 * float(np.linalg.norm(hi - lo)) + 1e-6
    prims = [p for p in spec.primitives if p.exists(time)]
    areas = np.array([p.area(radius) for p in prims])
    density = 2.0 * n / areas.sum()
    while True:
        pooled = []
        for i, p in enumerate(prims):
            m = int(np.ceil(density * areas[i]))
            s = p.surface_samples(m, rng, time, plane_disk=(centre, radius))
            ok = np.all((s >= lo) & (s <= hi), axis=1)
            for j, other in enumerate(prims):
                if j != i and ok.any():
                    ok[ok] &= other.sdf(s[ok], time) > -1e-9
            pooled.append(s[ok])
        pts = np.concatenate(pooled)
        if len(pts) >= n:
            return pts[np.sort(rng.choice(len(pts), n, replace=False))]
        if len(pts) == 0 and density > 1e9:
            return pts
        density *= 2.0 * max(1.0, n / max(len(pts), 1))


# declarative text formats -------------------------------------------------

_PRIM_KEYS = {"shape", "center", "size", "rotation", "normal", "motion"}
_MOTION_KEYS = {"t_start", "t_end", "velocity"}


def scene_from_dict(data: dict) -> SceneSpec:
    unknown = set(data) - {"primitive"}
    if unknown:
        raise ConfigError(f"unknown scene section(s): {sorted(unknown)}")
    prims = []
    for i, entry in enumerate(data.get("primitive", [])):
        bad = set(entry) - _PRIM_KEYS
        if bad:
            raise ConfigError(f"primitive {i}: unknown key(s) {sorted(bad)}")
        entry = dict(entry)
        if "motion" in entry:
            bad = set(entry["motion"]) - _MOTION_KEYS
            if bad:
                raise ConfigError(f"primitive {i} motion: unknown key(s) {sorted(bad)}")
            entry["motion"] = Motion(**entry["motion"])
        prims.append(Primitive(**entry))
    return SceneSpec(prims)


def read_scene(path) -> SceneSpec:
    with open(path, "rb") as fh:
        return scene_from_dict(tomli.load(fh))


def read_sensor(path) -> SensorSpec:
    with open(path, "rb") as fh:
        data = tomli.load(fh)
    data = data.get("sensor", data)
    valid = set(SensorSpec.__dataclass_fields__)
    bad = set(data) - valid
    if bad:
        raise ConfigError(f"unknown sensor key(s) {sorted(bad)}; valid keys: {sorted(valid)}")
    return SensorSpec(**data)


# ready-made scenes and trajectories ---------------------------------------

def room_scene(size=(6.0, 6.0, 3.0), transient=None) -> SceneSpec:
    """A closed room (walls, floor, ceiling) with a box, a sphere and a cylinder.

    The room spans ``[0, size]``. ``transient`` adds a moving sphere given as
    ``(radius, start, velocity, t_start, t_end)``.
    """
    sx, sy, sz = size
    prims = [
        Primitive("plane", center=(0, 0, 0), normal=(1, 0, 0)),
        Primitive("plane", center=(sx, 0, 0), normal=(-1, 0, 0)),
        Primitive("plane", center=(0, 0, 0), normal=(0, 1, 0)),
        Primitive("plane", center=(0, sy, 0), normal=(0, -1, 0)),
        Primitive("plane", center=(0, 0, 0), normal=(0, 0, 1)),
        Primitive("plane", center=(0, 0, sz), normal=(0, 0, -1)),
        Primitive("box", center=(0.25 * sx, 0.3 * sy, 0.4), size=(0.5, 0.4, 0.4)),
        Primitive("sphere", center=(0.7 * sx, 0.3 * sy, 0.9), size=(0.6,)),
        Primitive("cylinder", center=(0.5 * sx, 0.75 * sy, 0.75), size=(0.35, 0.75)),
    ]
    if transient is not None:
        r, start, vel, t0, t1 = transient
        prims.append(Primitive("sphere", center=start, size=(r,), motion=Motion(t0, t1, vel)))
    return SceneSpec(prims)


def look_at_quat(position, target) -> np.ndarray:
    """Quaternion (x, y, z, w) turning sensor +x toward ``target`` with z up."""
    f = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    f /= np.linalg.norm(f)
    left = np.cross([0.0, 0.0, 1.0], f)
    if np.linalg.norm(left) < 1e-9:
        left = np.array([0.0, 1.0, 0.0])
    left /= np.linalg.norm(left)
    up = np.cross(f, left)
    return Rotation.from_matrix(np.stack([f, left, up], axis=1)).as_quat()


def orbit_trajectory(n, centre, radius, height, turns=1.0, dt=0.1, yaw_offset=0.9,
                     yaw_swing=0.0, yaw_cycles=4.0, look_swing=0.0, swing_cycles=5.0, t0=0.0):
    """``n`` poses circling ``centre`` at ``height``.

    The view heading is the orbit angle plus ``yaw_offset``, oscillating by
    ``yaw_swing`` radians; ``look_swing`` tilts the view up and down (metres of
    look-at height at 2 m distance) so floors and ceilings get seen too.
    """
    cx, cy = centre[0], centre[1]
    poses = []
    for i in range(n):
        a = 2 * np.pi * turns * i / n
        p = np.array([cx + radius * math.cos(a), cy + radius * math.sin(a), height])
        yaw = a + yaw_offset + yaw_swing * math.sin(yaw_cycles * a)
        look = p + np.array([2 * math.cos(yaw), 2 * math.sin(yaw), look_swing * math.sin(swing_cycles * a)])
        poses.append(PoseRecord(i, t0 + i * dt, p, look_at_quat(p, look)))
    return poses


def straight_trajectory(n, start, end, dt=0.1):
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    return [PoseRecord(i, i * dt, start + (end - start) * (i / max(n - 1, 1)), (0.0, 0.0, 0.0, 1.0))
            for i in range(n)]
