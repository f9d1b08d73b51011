import numpy as np
import pytest

from rimap.data_io import PoseRecord, read_frame_cloud, read_poses
from rimap.errors import ConfigError
from rimap.simulator import (Motion, Primitive, SceneSpec, SensorSpec, cast_rays,
                             generate_sequence, look_at_quat, read_scene, read_sensor,
                             room_scene, sample_scene_surface, scene_sdf, straight_trajectory)

WALL = SceneSpec([Primitive("plane", center=(2, 0, 0), normal=(-1, 0, 0))])


def test_primitive_sdf_examples():
    s = Primitive("sphere", size=(1.0,))
    assert s.sdf(np.array([[2.0, 0, 0]]))[0] == 1.0
    b = Primitive("box", size=(1, 1, 1))
    assert b.sdf(np.array([[0.0, 0, 0]]))[0] == -1.0
    assert b.sdf(np.array([[2.0, 2, 1]]))[0] == pytest.approx(np.sqrt(2))
    c = Primitive("cylinder", size=(0.5, 1.0))
    assert c.sdf(np.array([[1.5, 0, 0]]))[0] == pytest.approx(1.0)
    assert c.sdf(np.array([[0.0, 0, 3]]))[0] == pytest.approx(2.0)
    p = Primitive("plane", center=(0, 0, 1), normal=(0, 0, 1))
    assert p.sdf(np.array([[5.0, 5, 3]]))[0] == pytest.approx(2.0)


def test_rotated_box():
    q = look_at_quat((0, 0, 0), (0, 1, 0))  # 90 degrees about z
    b = Primitive("box", size=(2, 0.5, 0.5), rotation=q)
    assert b.sdf(np.array([[0.0, 2.5, 0]]))[0] == pytest.approx(0.5)
    assert b.sdf(np.array([[1.0, 0.0, 0]]))[0] == pytest.approx(0.5)


def test_union_is_min():
    a = Primitive("sphere", center=(-3, 0, 0), size=(1.0,))
    b = Primitive("sphere", center=(3, 0, 0), size=(1.0,))
    pts = np.random.default_rng(0).uniform(-5, 5, (100, 3))
    assert np.array_equal(scene_sdf(SceneSpec([a, b]), pts), np.minimum(a.sdf(pts), b.sdf(pts)))


def test_scene_validation():
    with pytest.raises(ConfigError):
        SceneSpec([Primitive("sphere", motion=Motion(0, 1))])
    with pytest.raises(ConfigError):
        Primitive("sphere", size=(-1.0,))
    with pytest.raises(ConfigError):
        Primitive("torus")
    with pytest.raises(ConfigError):
        SensorSpec(max_range=0)


def test_plane_range():
    sensor = SensorSpec(width=1, height=1)
    f = cast_rays(WALL, PoseRecord.identity(), sensor)
    assert f.hit.all()
    assert abs(f.ranges[0] - 2.0) <= 1e-4
    assert np.allclose(f.points, [[f.ranges[0], 0, 0]])


def test_sky_is_a_miss():
    sensor = SensorSpec(width=4, height=4, max_range=10)
    pose = PoseRecord(0, 0.0, np.zeros(3), look_at_quat((0, 0, 0), (-1, 0, 0)))
    f = cast_rays(WALL, pose, sensor)
    assert not f.hit.any() and len(f.points) == 0


def test_hits_lie_on_surface():
    scene = room_scene()
    sensor = SensorSpec(width=32, height=24, max_range=12)
    pose = PoseRecord(0, 0.0, np.array([3.0, 3.0, 1.5]), look_at_quat((3, 3, 1.5), (1, 2, 0.5)))
    f = cast_rays(scene, pose, sensor)
    assert f.hit.all()
    world = pose.transform(f.points)
    assert np.abs(scene_sdf(scene, world)).max() <= 1e-3


def test_lidar_directions():
    s = SensorSpec(kind="spinning_lidar", azimuth_count=90, elevation_angles=(-10, 0, 10))
    d = s.directions()
    assert d.shape == (270, 3) and np.allclose(np.linalg.norm(d, axis=1), 1)
    assert np.allclose(sorted(set(np.round(np.degrees(np.arcsin(d[:, 2])), 9))), [-10, 0, 10])


def test_range_noise_std():
    sigma_n = 0.01
    sensor = SensorSpec(width=400, height=250, hfov=60, vfov=45, max_range=10,
                        range_noise_std=sigma_n)
    f = cast_rays(WALL, PoseRecord.identity(), sensor, seed=3)
    assert f.hit.sum() == 100_000
    true = 2.0 / f.directions[:, 0]
    resid = f.ranges - true
    assert abs(resid.std() / sigma_n - 1) <= 0.05


def test_motion_window():
    scene = room_scene(transient=(0.3, (3, 3, 1.5), (0.5, 0, 0), 5.0, 8.0))
    p = np.array([[3.0, 3.0, 1.5]])
    assert scene_sdf(scene, p, time=4.9)[0] == scene_sdf(room_scene(), p)[0]
    assert scene_sdf(scene, p, time=5.0)[0] == pytest.approx(-0.3)
    assert scene_sdf(scene, p + [[1.0, 0, 0]], time=7.0)[0] == pytest.approx(-0.3)
    q = p + [[1.5, 0, 0]]
    assert scene_sdf(scene, q, time=8.1)[0] == scene_sdf(room_scene(), q)[0]


def test_surface_samples_on_surface():
    scene = room_scene()
    pts = sample_scene_surface(scene, 20_000, ((0, 0, 0), (6, 6, 3)), seed=1)
    assert len(pts) == 20_000
    assert np.abs(scene_sdf(scene, pts)).max() < 1e-9
    assert np.all((pts >= 0) & (pts <= np.array([6, 6, 3])))


def test_generate_sequence(tmp_path):
    scene = room_scene()
    sensor = SensorSpec(width=8, height=6, range_noise_std=0.01)
    traj = straight_trajectory(1, (3, 3, 1.5), (3, 3, 1.5))
    generate_sequence(scene, traj, sensor, tmp_path / "a", seed=5)
    assert sorted(p.name for p in (tmp_path / "a" / "frames").iterdir()) == ["000000.ply"]
    assert len(read_poses(tmp_path / "a" / "poses.txt")) == 1
    generate_sequence(scene, traj, sensor, tmp_path / "b", seed=5)
    for rel in ("poses.txt", "frames/000000.ply"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert len(read_frame_cloud(tmp_path / "a" / "frames" / "000000.ply")) == 48


def test_scene_and_sensor_files(tmp_path):
    (tmp_path / "scene.toml").write_text(
        '[[primitive]]\nshape = "plane"\nnormal = [0, 0, 1]\n\n'
        '[[primitive]]\nshape = "sphere"\ncenter = [0, 0, 1]\nsize = [0.5]\n'
        'motion = { t_start = 1.0, t_end = 2.0, velocity = [1, 0, 0] }\n')
    scene = read_scene(tmp_path / "scene.toml")
    assert [p.shape for p in scene.primitives] == ["plane", "sphere"]
    assert scene.primitives[1].motion.active(1.5)
    (tmp_path / "sensor.toml").write_text('[sensor]\nkind = "spinning_lidar"\nmax_range = 40.0\n')
    assert read_sensor(tmp_path / "sensor.toml").max_range == 40.0
    (tmp_path / "bad.toml").write_text('[sensor]\nmax_rang = 4.0\n')
    with pytest.raises(ConfigError):
        read_sensor(tmp_path / "bad.toml")
