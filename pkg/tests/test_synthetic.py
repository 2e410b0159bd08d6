import json

import numpy as np
import pytest

from inertialpose import filters as F
from inertialpose import quaternion as Q
from inertialpose.calibration import triad
from inertialpose.errors import ContractError
from inertialpose.synthetic import (
    Imperfections,
    MagPulse,
    SegmentMotion,
    SynthConfig,
    body_rates,
    generate_truth,
    make_trial,
    offset_quaternions,
    random_motion,
)

from conftest import synth_trial


def test_static_truth_identity():
    q = generate_truth(SynthConfig(duration=1.0))
    assert q.shape == (60, 1, 4)
    assert np.array_equal(q, np.tile(Q.IDENTITY, (60, 1, 1)))


def test_single_axis_sinusoid_angle():
    A = 0.7
    seg = SegmentMotion(kind="sinusoid", amplitude=(0.0, 0.0, A), frequency=(0.0, 0.0, 0.3))
    cfg = SynthConfig(duration=5.0, segments=[seg])
    q = generate_truth(cfg)[:, 0]
    expected = np.abs(A * np.sin(2 * np.pi * 0.3 * cfg.times()))
    assert np.allclose(Q.angle(q), expected, atol=1e-9)


def test_keyframe_midpoint_is_slerp():
    a = Q.IDENTITY
    b = Q.from_axis_angle([1, 2, 3], 1.2)
    seg = SegmentMotion(kind="keyframes", keyframes=[(0.0, a.tolist()), (2.0, b.tolist())])
    q = generate_truth(SynthConfig(duration=3.0, segments=[seg]))
    assert Q.qad(q[60, 0], Q.slerp(a, b, 0.5)) < 1e-12


def test_keyframes_invalid():
    seg = SegmentMotion(kind="keyframes", keyframes=[(1.0, [1, 0, 0, 0]), (0.5, [1, 0, 0, 0])])
    with pytest.raises(ContractError):
        generate_truth(SynthConfig(segments=[seg]))


def test_static_readings():
    tr = make_trial(SynthConfig(duration=1.0))
    assert np.array_equal(tr.gyro, np.zeros_like(tr.gyro))
    assert np.allclose(tr.accel, [0.0, 0.0, 1.0])
    assert np.allclose(np.linalg.norm(tr.mag, axis=-1), 1.0)


def test_constant_rate_recovered():
    w = np.array([0.3, -0.5, 1.1])
    q = Q.exp_map(np.arange(120)[:, None] / 60 * w)[:, None]
    assert np.allclose(body_rates(q, 1 / 60), w, atol=1e-6)


def test_sts_offset_seen_by_triad():
    rng = np.random.default_rng(3)
    offs = offset_quaternions(2, 10.0, rng)
    cfg = SynthConfig(duration=2.0, segments=random_motion(2, rng), imperfections=Imperfections(sts_offsets=offs))
    tr = make_trial(cfg)
    est = triad(tr.accel, tr.mag)
    assert np.max(Q.qad(est, Q.multiply(tr.gt, offs[None]))) < 1e-9
    assert np.allclose(np.degrees(Q.qad(est, tr.gt)), 10.0, atol=0.01)


def test_integration_closure_60s():
    tr = synth_trial(n_segments=3, duration=60.0, seed=12)
    out = F.fuse_body(tr, F.FilterConfig(kind="integral")).quaternions
    assert np.degrees(np.max(Q.qad(tr.gt, out))) < 0.5


def test_mag_pulse_magnitude():
    cfg = SynthConfig(duration=4.0, imperfections=Imperfections(mag_pulses=[MagPulse(1.0, 1.0, factor=2.0)]))
    tr = make_trial(cfg)
    n = np.linalg.norm(tr.mag[:, 0], axis=-1)
    assert np.allclose(n[60:120], 2.0) and np.allclose(n[:60], 1.0) and np.allclose(n[120:], 1.0)


def test_pulse_outside_duration():
    with pytest.raises(ContractError):
        SynthConfig(duration=4.0, imperfections=Imperfections(mag_pulses=[MagPulse(3.5, 1.0)]))


def test_negative_noise_rejected():
    with pytest.raises(ContractError):
        SynthConfig(imperfections=Imperfections(gyro_noise=-1.0))


def test_gyro_bias_added():
    tr = make_trial(SynthConfig(duration=1.0, imperfections=Imperfections(gyro_bias=[0.01, 0, -0.02])))
    assert np.allclose(tr.gyro, [0.01, 0.0, -0.02])


def test_seeded_noise_reproducible():
    a = synth_trial(seed=4, accel_noise=0.01, gyro_noise=0.01, mag_noise=0.01)
    b = synth_trial(seed=4, accel_noise=0.01, gyro_noise=0.01, mag_noise=0.01)
    c = synth_trial(seed=5, accel_noise=0.01, gyro_noise=0.01, mag_noise=0.01)
    assert np.array_equal(a.accel, b.accel) and np.array_equal(a.mag, b.mag)
    assert not np.array_equal(a.accel, c.accel)


def test_config_json_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    cfg = SynthConfig(
        duration=3.0,
        segments=random_motion(2, rng),
        imperfections=Imperfections(gyro_bias=[0.01, 0, 0], sts_offsets=offset_quaternions(2, 5.0, rng), mag_pulses=[MagPulse(1.0, 0.5)]),
        seed=9,
    )
    path = tmp_path / "s.json"
    path.write_text(json.dumps(cfg.to_dict()))
    again = SynthConfig.from_json(path)
    a, b = make_trial(cfg), make_trial(again)
    assert np.array_equal(a.mag, b.mag) and np.array_equal(a.gt, b.gt)


def test_every_filter_solves_clean_oracle():
    tr = synth_trial(n_segments=2, duration=30.0, seed=21)
    for kind in ("madgwick", "madgwick_magreject", "mahony", "ekf"):
        out = F.fuse_body(tr, F.FilterConfig(kind=kind)).quaternions
        assert np.degrees(np.mean(Q.qad(tr.gt, out))) < 2.0, kind
