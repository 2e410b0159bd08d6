import json

import numpy as np
import pytest
from conftest import unit_quaternions
from hypothesis import given, settings
from hypothesis import strategies as st

from inertialpose import kinematics as K
from inertialpose import quaternion as Q
from inertialpose.errors import ContractError


def two_link(length=1.0):
    return K.Skeleton(["a", "b"], [-1, 0], [[0, 0, 0], [length, 0, 0]], tips={"b": [length, 0, 0]})


def rest(skel, frames=1):
    return np.tile(Q.IDENTITY, (frames, skel.n_segments, 1))


def test_presets_sizes():
    assert K.preset("upper9").n_segments == 9
    assert K.preset("full17").n_segments == 17
    with pytest.raises(ContractError):
        K.preset("hands")


def test_identity_gives_rest_positions():
    skel = K.preset("upper9")
    pos = K.forward_kinematics(skel, rest(skel))[0]
    expected = np.zeros_like(pos)
    for i in range(1, skel.n_segments):
        expected[i] = expected[skel.parents[i]] + skel.offsets[i]
    assert np.allclose(pos, expected, atol=1e-15)
    # arms hang symmetric about the sagittal plane
    r, l = skel.index("right_wrist"), skel.index("left_wrist")
    assert np.allclose(pos[r] * [1, -1, 1], pos[l])


def test_height_scales_linearly():
    a = K.forward_kinematics(K.preset("full17", 1.5), rest(K.preset("full17")))
    b = K.forward_kinematics(K.preset("full17", 1.8), rest(K.preset("full17")))
    assert np.allclose(a * 1.8 / 1.5, b)
    with pytest.raises(ContractError):
        K.preset("full17", -1.0)


def test_root_yaw_rotates_everything():
    skel = K.preset("upper9")
    q = rest(skel)
    yaw = Q.from_axis_angle([0, 0, 1], np.pi / 2)
    p0 = K.forward_kinematics(skel, q)
    p1 = K.forward_kinematics(skel, np.broadcast_to(yaw, q.shape))
    assert np.allclose(p1, Q.rotate(yaw, p0), atol=1e-12)
    # x -> y under a 90 degree yaw
    assert np.allclose(Q.rotate(yaw, [1.0, 0, 0]), [0, 1.0, 0], atol=1e-15)


@pytest.mark.parametrize("pitch_deg", [0.0, 30.0, 90.0, -45.0])
def test_two_segment_pitch(pitch_deg):
    skel = two_link(0.4)
    th = np.radians(pitch_deg)
    q = np.array([[Q.from_axis_angle([0, 1, 0], th), Q.IDENTITY]])
    pos = K.forward_kinematics(skel, q)
    # positive pitch about y tips +x downward
    assert np.allclose(pos[0, 1], [0.4 * np.cos(th), 0.0, -0.4 * np.sin(th)], atol=1e-15)
    tip = K.tip_positions(skel, q, pos)["b"]
    assert np.allclose(tip[0], pos[0, 1] + [0.4, 0, 0], atol=1e-15)


def test_root_translation():
    skel = K.preset("upper9")
    a = K.forward_kinematics(skel, rest(skel))
    b = K.forward_kinematics(skel, rest(skel), root=(1.0, 2.0, 3.0))
    assert np.allclose(b - a, [1.0, 2.0, 3.0])


@settings(max_examples=40, deadline=None)
@given(st.lists(unit_quaternions(), min_size=9, max_size=9))
def test_bone_lengths_preserved(qs):
    skel = K.preset("upper9")
    q = np.array(qs)[None]
    pos = K.forward_kinematics(skel, q)[0]
    for p, c in K.bones(skel):
        assert np.linalg.norm(pos[c] - pos[p]) == pytest.approx(np.linalg.norm(skel.offsets[c]), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(unit_quaternions(), min_size=9, max_size=9), unit_quaternions())
def test_global_rotation_equivariance(qs, g):
    skel = K.preset("upper9")
    q = np.array(qs)[None]
    pos = K.forward_kinematics(skel, q)
    rotated = K.forward_kinematics(skel, Q.multiply(g, q))
    assert np.allclose(rotated, Q.rotate(g, pos), atol=1e-12)
    # joint angles are invariant
    assert np.max(Q.qad(K.joint_angles(skel, q), K.joint_angles(skel, Q.multiply(g, q)))) < 1e-7


def test_joint_angle_elbow():
    skel = K.preset("upper9")
    q = rest(skel)
    e = skel.index("right_elbow")
    q[0, e] = Q.from_axis_angle([0, 1, 0], np.radians(30))
    ja = K.joint_angles(skel, q)
    assert np.degrees(Q.qad(Q.IDENTITY, ja[0, e - 1])) == pytest.approx(30.0, abs=1e-9)
    others = np.delete(ja[0], [e - 1, skel.index("right_wrist") - 1], axis=0)
    assert np.allclose(Q.qad(Q.IDENTITY, others), 0.0, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.lists(unit_quaternions(), min_size=9, max_size=9))
def test_joint_angles_compose_back(qs):
    skel = K.preset("upper9")
    q = np.array(qs)[None]
    ja = K.joint_angles(skel, q)
    for i in range(1, skel.n_segments):
        rebuilt = Q.multiply(q[0, skel.parents[i]], ja[0, i - 1])
        assert Q.qad(rebuilt, q[0, i]) < 1e-7


def test_skeleton_validation():
    with pytest.raises(ContractError):
        K.Skeleton(["a", "b"], [0, -1], np.zeros((2, 3)))
    with pytest.raises(ContractError):
        K.Skeleton(["a", "b", "c"], [-1, 2, 0], np.zeros((3, 3)))
    with pytest.raises(ContractError):
        K.Skeleton(["a", "b"], [-1, 0], [[0, 0, 0], [np.nan, 0, 0]])
    with pytest.raises(ContractError):
        K.forward_kinematics(two_link(), np.zeros((1, 3, 4)))
    with pytest.raises(ContractError):
        two_link().index("c")


def test_custom_config_file(tmp_path):
    cfg = {"mini": {"segments": [{"name": "r", "parent": None, "offset": [0, 0, 0]}, {"name": "c", "parent": "r", "offset": [0, 0, 0.5]}]}}
    path = tmp_path / "sk.json"
    path.write_text(json.dumps(cfg))
    skel = K.Skeleton.from_config(str(path), "mini", height=2.0)
    assert np.allclose(skel.offsets[1], [0, 0, 1.0])


def test_npose_offsets_in_parent_frame():
    # parent rotated 90 degrees about z in the N-pose: its local offsets rotate back
    npose = [Q.from_axis_angle([0, 0, 1], np.pi / 2), Q.IDENTITY]
    skel = K.Skeleton(["a", "b"], [-1, 0], [[0, 0, 0], [1.0, 0, 0]], npose=npose)
    pos = K.forward_kinematics(skel, np.array([npose]))
    assert np.allclose(pos[0, 1], [1.0, 0, 0], atol=1e-15)


def test_exports(tmp_path):
    skel = two_link()
    q = rest(skel, 2)
    text = K.pose_csv(skel, [0.0, 0.5], q)
    lines = text.splitlines()
    assert lines[0] == "t,segment,qw,qx,qy,qz,px,py,pz"
    assert lines[2] == "0.0,b,1.0,0.0,0.0,0.0,1.0,0.0,0.0"
    assert len(lines) == 5
    K.write_pose_csv(tmp_path / "p.csv", skel, [0.0, 0.5], q)
    assert (tmp_path / "p.csv").read_text() == text
    doc = json.loads(K.pose_json(skel, [0.0, 0.5], q))
    assert doc["segments"] == ["a", "b"]
    assert doc["frames"][0] == [[[0, 0, 0], [1, 0, 0]], [[1, 0, 0], [2, 0, 0]]]
    svg = K.pose_svg(K.preset("upper9"), rest(K.preset("upper9")))
    assert svg.startswith("<svg") and svg.count("<line") == 8 + 3
    assert K.pose_svg(K.preset("upper9"), rest(K.preset("upper9")), view="side").count("<line") == 11
