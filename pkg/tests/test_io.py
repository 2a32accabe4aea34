from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarocc.geometry import PoseSE3, se3_exp, so3_exp
from lidarocc.io import (
    PlyParseError,
    PointCloudFrame,
    PoseFileError,
    quaternion_to_rotation,
    read_frames,
    read_json,
    read_mesh_ply,
    read_poses,
    read_points_ply,
    rotation_to_quaternion,
    write_frames,
    write_json,
    write_mesh_ply,
    write_points_ply,
    write_poses,
)
from lidarocc.mesher import TriangleMesh
from lidarocc.simulator import FIXTURES, ScanPattern, scan


def test_frames_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    frames = [PointCloudFrame(rng.normal(size=(n, 3)) * 10, i) for i, n in enumerate((5, 0, 300))]
    write_frames(frames, tmp_path)
    back = read_frames(tmp_path)
    assert len(back) == 3
    for a, b in zip(frames, back):
        assert a.points.tobytes() == b.points.tobytes() and a.index == b.index


def test_simulated_frame_round_trip(tmp_path):
    fx = FIXTURES["sphere"]()
    frame = scan(fx.scene, fx.poses(1)[0], ScanPattern(n_rays=800), np.random.default_rng(1))
    write_points_ply(tmp_path / "f.ply", frame.points)
    assert len(read_points_ply(tmp_path / "f.ply")) == len(frame.points)


def test_truncated_and_malformed_ply(tmp_path):
    write_points_ply(tmp_path / "a.ply", np.ones((10, 3)))
    data = (tmp_path / "a.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(data[:-5])
    with pytest.raises(PlyParseError, match="offset"):
        read_points_ply(tmp_path / "t.ply")
    (tmp_path / "x.ply").write_bytes(data + b"\x00")
    with pytest.raises(PlyParseError):
        read_points_ply(tmp_path / "x.ply")
    (tmp_path / "h.ply").write_bytes(b"plx\n" + data[4:])
    with pytest.raises(PlyParseError):
        read_points_ply(tmp_path / "h.ply")
    (tmp_path / "asc.ply").write_bytes(data.replace(b"binary_little_endian", b"ascii"))
    with pytest.raises(PlyParseError):
        read_points_ply(tmp_path / "asc.ply")


def test_non_finite_points_rejected(tmp_path):
    write_points_ply(tmp_path / "n.ply", [[0, 0, 0], [np.nan, 1, 2]])
    with pytest.raises(PlyParseError, match="vertex 1"):
        read_points_ply(tmp_path / "n.ply")


def test_missing_frames_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_frames(tmp_path)


def test_mesh_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    v = rng.normal(size=(6, 3)).astype(np.float32).astype(np.float64)
    n = rng.normal(size=(6, 3)).astype(np.float32).astype(np.float64)
    mesh = TriangleMesh(v, [[0, 1, 2], [3, 4, 5], [0, 2, 4]], n)
    write_mesh_ply(tmp_path / "m.ply", mesh)
    back = read_mesh_ply(tmp_path / "m.ply")
    assert np.array_equal(back.vertices, v) and np.array_equal(back.normals, n)
    assert np.array_equal(back.triangles, mesh.triangles)
    write_mesh_ply(tmp_path / "m2.ply", back)
    assert (tmp_path / "m.ply").read_bytes() == (tmp_path / "m2.ply").read_bytes()
    write_mesh_ply(tmp_path / "e.ply", TriangleMesh.empty())
    assert read_mesh_ply(tmp_path / "e.ply").is_empty


def test_identity_pose_line(tmp_path):
    write_poses([PoseSE3.identity()], tmp_path / "p.txt")
    assert (tmp_path / "p.txt").read_text() == "0 0 0 0 0 0 0 1\n"


def test_quarter_turn_quaternion():
    q = rotation_to_quaternion(so3_exp([0, 0, math.pi / 2]))
    assert np.allclose(q, [0, 0, math.sqrt(0.5), math.sqrt(0.5)], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3.1, 3.1), min_size=3, max_size=3))
def test_quaternion_round_trip(w):
    r = so3_exp(w)
    q = rotation_to_quaternion(r)
    assert abs(np.linalg.norm(q) - 1) < 1e-12 and q[3] >= 0
    assert np.abs(quaternion_to_rotation(q) - r).max() < 1e-9


def test_pose_file_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    poses = [se3_exp(rng.normal(size=6) * 2) for _ in range(20)]
    write_poses(poses, tmp_path / "p.txt")
    back = read_poses(tmp_path / "p.txt")
    for a, b in zip(poses, back):
        assert np.abs(a.rotation - b.rotation).max() < 1e-9
        assert np.array_equal(a.translation, b.translation)
    write_poses(back, tmp_path / "q.txt")
    assert read_poses(tmp_path / "q.txt")[5].matrix() == pytest.approx(back[5].matrix(), abs=1e-12)


def test_quaternion_renormalised_or_rejected(tmp_path, caplog):
    p = tmp_path / "p.txt"
    p.write_text("0 1 2 3 0 0 0 1.0005\n")
    with caplog.at_level("WARNING"):
        poses = read_poses(p)
    assert np.allclose(poses[0].rotation, np.eye(3)) and "renormalising" in caplog.text
    p.write_text("0 1 2 3 0 0 0 1.01\n")
    with pytest.raises(PoseFileError):
        read_poses(p)


@pytest.mark.parametrize("text,lineno", [
    ("0 0 0 0 0 0 0 1\n1 0 0 0 0 0 1\n", 2),
    ("0 0 0 0 0 0 0 1\n# note\n0 0 0 0 0 0 0 1\n", 3),
    ("0 0 0 zero 0 0 0 1\n", 1),
    ("0 0 0 inf 0 0 0 1\n", 1),
])
def test_malformed_pose_lines_report_line_number(tmp_path, text, lineno):
    p = tmp_path / "p.txt"
    p.write_text(text)
    with pytest.raises(PoseFileError, match=f":{lineno}:"):
        read_poses(p)


def test_writers_are_deterministic(tmp_path):
    poses = [se3_exp(np.full(6, 0.3))] * 3
    write_poses(poses, tmp_path / "a.txt")
    write_poses(poses, tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    write_json(tmp_path / "a.json", {"b": 1, "a": [1.5, 2]})
    assert (tmp_path / "a.json").read_text().index('"a"') < (tmp_path / "a.json").read_text().index('"b"')
    assert read_json(tmp_path / "a.json") == {"a": [1.5, 2], "b": 1}
    (tmp_path / "bad.json").write_text("{\n  oops\n}")
    with pytest.raises(ValueError, match=":2:"):
        read_json(tmp_path / "bad.json")
