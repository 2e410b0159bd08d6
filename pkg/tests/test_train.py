import math

import numpy as np
import pytest
from conftest import synth_trial
from hypothesis import given, settings
from hypothesis import strategies as st

from inertialpose import quaternion as Q
from inertialpose.errors import ContractError, ParseError
from inertialpose.nn import checkpoint
from inertialpose.nn.augment import AugmentConfig, augment, rotate_batch, sensor_dropout_mask
from inertialpose.nn.autograd import Tensor
from inertialpose.nn.models import FusionModel, ModelConfig, SequenceBatch
from inertialpose.nn.train import AdamW, TrainConfig, TrainReport, learning_rate, train, trial_batch


# --- schedule --------------------------------------------------------------------


def test_schedule_peak_and_floor():
    cfg = TrainConfig(lr=2e-3, final_lr=1e-5, epochs=25, warmup_epochs=2)
    lrs = [learning_rate(e, cfg) for e in range(25)]
    assert lrs[0] == pytest.approx(1e-3)
    assert lrs[1] == pytest.approx(2e-3, abs=1e-12)
    assert max(lrs) == lrs[1]
    assert abs(lrs[-1] - 1e-5) < 1e-7
    assert all(a >= b for a, b in zip(lrs[1:], lrs[2:]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(0, 5), st.floats(1e-4, 1e-1), st.floats(1e-6, 1e-4))
def test_schedule_bounded(epochs, warmup, lr, final):
    cfg = TrainConfig(lr=lr, final_lr=final, epochs=epochs, warmup_epochs=warmup)
    lrs = np.array([learning_rate(e, cfg) for e in range(epochs)])
    assert np.all(lrs > 0) and np.all(lrs <= lr * (1 + 1e-12))
    if epochs > 1 and warmup < epochs - 1:
        assert lrs[-1] == pytest.approx(final, rel=1e-9)


def test_config_contracts():
    with pytest.raises(ContractError):
        TrainConfig(clip=(0.2, -0.2))
    with pytest.raises(ContractError):
        TrainConfig(loss="huber")
    with pytest.raises(ContractError):
        TrainConfig(window=0)
    assert TrainConfig(window="40").window == 40
    assert TrainConfig(augmentation={"noise": False}).augmentation.noise is False


# --- optimizer ------------------------------------------------------------------


def test_adamw_first_step_is_signed_lr():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.array([0.5, -0.1, 0.0])
    opt = AdamW([("p", p)], weight_decay=0.0)
    opt.step(0.01)
    # bias-corrected first step moves each coordinate by lr * sign(g)
    assert np.allclose(p.data, [0.99, -1.99, 3.0], atol=1e-8)


def test_adamw_decoupled_decay_and_clip():
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.array([0.0])
    opt = AdamW([("p", p)], weight_decay=0.1)
    opt.step(0.5)
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))
    q = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    r = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    q.grad = np.array([100.0, 0.1])
    r.grad = np.array([0.2, 0.1])
    a, b = AdamW([("q", q)], 0.0), AdamW([("r", r)], 0.0)
    a.step(0.1, clip=(-0.2, 0.2))
    b.step(0.1)
    assert np.allclose(q.data, r.data)


def test_adamw_minimises_quadratic():
    p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = AdamW([("p", p)], weight_decay=0.0)
    for _ in range(2000):
        opt.zero_grad()
        loss = (p * p).sum()
        loss.backward()
        opt.step(0.05)
    assert np.allclose(p.data, 0.0, atol=1e-2)


# --- augmentation ------------------------------------------------------------------


@pytest.fixture(scope="module")
def batch():
    trs = [synth_trial(n_segments=3, duration=2.0, seed=s) for s in range(4)]
    return trial_batch(trs)


def test_zero_strength_is_identity(batch):
    out = augment(batch, 0.0, np.random.default_rng(0))
    assert out is batch
    with pytest.raises(ContractError):
        augment(batch, 1.5, np.random.default_rng(0))


def test_augment_does_not_mutate(batch):
    before = batch.marg.copy()
    out = augment(batch, 1.0, np.random.default_rng(0))
    assert np.array_equal(batch.marg, before)
    assert out.marg.shape == batch.marg.shape and out.filter_q is None


def test_sensor_dropout_zeroes_all_channels(batch):
    cfg = AugmentConfig(noise=False, rotation=False, timestep_dropout=False, sensor_dropout_prob=1.0)
    out = augment(batch, 1.0, np.random.default_rng(3), cfg)
    zero = np.all(out.marg == 0.0, axis=-1)
    partial = np.any(out.marg == 0.0, axis=-1) & ~zero
    assert zero.any() and not partial.any()
    assert np.array_equal(out.marg[~zero], batch.marg[~zero])
    mask = sensor_dropout_mask((50, 100, 4), 0.3, np.random.default_rng(0))
    hit = mask.any(axis=1)
    assert abs(hit.mean() - 0.3) < 0.05
    # each hit is a single contiguous span
    for b, s in zip(*np.nonzero(hit)):
        idx = np.flatnonzero(mask[b, :, s])
        assert idx[-1] - idx[0] + 1 == idx.size


def test_timestep_dropout_whole_steps(batch):
    cfg = AugmentConfig(noise=False, rotation=False, sensor_dropout=False, timestep_dropout_prob=0.5)
    out = augment(batch, 1.0, np.random.default_rng(1), cfg)
    zero_steps = np.all(out.marg == 0.0, axis=(0, 2, 3))
    assert zero_steps.any() and not zero_steps[0]
    assert np.array_equal(out.marg[:, ~zero_steps], batch.marg[:, ~zero_steps])


def test_noise_scale(batch):
    for kind in ("gaussian", "uniform"):
        cfg = AugmentConfig(noise_kind=kind, noise_std=(0.1, 0.2, 0.3), rotation=False, sensor_dropout=False, timestep_dropout=False)
        big = SequenceBatch(np.zeros((20, 200, 3, 9)))
        out = augment(big, 0.5, np.random.default_rng(0), cfg)
        std = out.marg.reshape(-1, 3, 3).std(axis=(0, 2))
        assert np.allclose(std, [0.05, 0.1, 0.15], rtol=0.03)
    with pytest.raises(ContractError):
        AugmentConfig(noise_kind="laplace")


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, np.pi), st.integers(0, 1000))
def test_rotation_offset_changes_target_by_angle(theta, seed):
    rng = np.random.default_rng(seed)
    gt = Q.random_quaternions((1, 5, 2), rng)
    axis = rng.normal(size=3)
    r = np.tile(Q.from_axis_angle(axis / np.linalg.norm(axis), theta), (1, 2, 1))
    _, new_gt = rotate_batch(np.zeros((1, 5, 2, 9)), gt, r)
    assert np.allclose(Q.qad(gt, new_gt), theta, atol=1e-6)


def test_rotation_keeps_data_consistent():
    tr = synth_trial(n_segments=2, duration=2.0, seed=2)
    b = trial_batch([tr])
    rng = np.random.default_rng(0)
    r = Q.random_quaternions((1, 2), rng)
    marg, gt = rotate_batch(b.marg, b.gt, r)
    # static-frame readings still agree with the rotated orientation
    up = np.array([0.0, 0.0, 1.0])
    grav_old = Q.rotate(Q.conjugate(b.gt), up)
    grav_new = Q.rotate(Q.conjugate(gt), up)
    assert np.allclose(Q.rotate(Q.conjugate(r)[:, None], grav_old), grav_new, atol=1e-12)
    assert np.allclose(np.linalg.norm(marg[..., 3:6], axis=-1), np.linalg.norm(b.marg[..., 3:6], axis=-1))


def test_rotation_strength_bound(batch):
    cfg = AugmentConfig(noise=False, sensor_dropout=False, timestep_dropout=False, max_rotation_deg=5.0)
    out = augment(batch, 0.4, np.random.default_rng(5), cfg)
    ang = np.degrees(Q.qad(batch.gt, out.gt))
    assert ang.max() <= 2.0 + 1e-9 and ang.max() > 0


# --- training -----------------------------------------------------------------------


def small_model(arch="model_free", **kw):
    return FusionModel(ModelConfig(architecture=arch, cell="gru", hidden=[12], n_segments=2, dropout=0.0, **kw))


def test_empty_dataset():
    with pytest.raises(ContractError):
        train(small_model(), [], cfg=TrainConfig(epochs=1))
    tr = synth_trial(n_segments=2, duration=1.0)
    tr.gt = None
    with pytest.raises(ContractError):
        train(small_model(), [tr], cfg=TrainConfig(epochs=1))


def test_training_converges_without_augmentation():
    trs = [synth_trial(n_segments=2, duration=3.0, seed=s) for s in range(4)]
    cfg = TrainConfig(lr=5e-3, epochs=15, batch_size=2, augment=False, window=60)
    m, rep = train(small_model(), trs[:3], trs[3:], cfg)
    train_loss = [r[1] for r in rep.rows]
    assert rep.status == "completed" and len(rep.rows) == 15
    assert train_loss[-1] < 0.5 * train_loss[0]
    ups = sum(b > a for a, b in zip(train_loss, train_loss[1:]))
    assert ups <= 2
    assert rep.best_val == min(r[2] for r in rep.rows)


def test_training_is_deterministic():
    trs = [synth_trial(n_segments=2, duration=2.0, seed=s) for s in range(3)]
    cfg = TrainConfig(epochs=3, batch_size=2, window=40)
    a, ra = train(small_model("cff_detached"), trs[:2], trs[2:], cfg)
    b, rb = train(small_model("cff_detached"), trs[:2], trs[2:], cfg)
    assert ra.rows == rb.rows
    assert checkpoint.to_bytes(a) == checkpoint.to_bytes(b)


def test_report_csv(tmp_path):
    rep = TrainReport(rows=[(0, 1.5, 2.0, 1e-3, 0.5), (1, 1.0, 1.25, 2e-3, 1.0)])
    text = rep.to_csv()
    assert text.splitlines()[0] == "epoch,train_loss,val_loss,lr,aug_strength"
    assert text.splitlines()[2] == "1,1.0,1.25,0.002,1.0"
    rep.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == text


def test_feedback_training_finishes_or_reports_divergence():
    trs = [synth_trial(n_segments=2, duration=2.0, seed=s) for s in range(3)]
    cfg = TrainConfig(lr=5e-2, epochs=3, batch_size=2, window=30, divergence_deg=1.0, divergence_window=5)
    _, rep = train(small_model("cff_feedback"), trs[:2], trs[2:], cfg)
    assert rep.status == "diverged"
    assert "mean QAD" in rep.message


# --- checkpoints ----------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    tr = synth_trial(n_segments=2, duration=1.0, seed=1)
    m = small_model("complementary", learn_alpha=True, alpha=0.6)
    rng = np.random.default_rng(0)
    for _, p in m.parameters():
        p.data = np.asarray(p.data + rng.normal(0, 0.1, p.data.shape))
    m.fit_normalizer([trial_batch([tr])])
    data = checkpoint.to_bytes(m, {"note": "x"})
    m2, header = checkpoint.from_bytes(data)
    assert header["extra"] == {"note": "x"} and header["version"] == checkpoint.VERSION
    assert checkpoint.to_bytes(m2, {"note": "x"}) == data
    assert np.array_equal(m2.predict_trial(tr), m.predict_trial(tr))
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, m)
    m3, _ = checkpoint.load(path)
    assert np.array_equal(m3.predict_trial(tr), m.predict_trial(tr))
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]


def test_checkpoint_rejects_bad_input():
    data = checkpoint.to_bytes(small_model())
    with pytest.raises(ParseError, match="magic"):
        checkpoint.from_bytes(b"NOT" + data)
    with pytest.raises(ParseError):
        checkpoint.from_bytes(data[: len(checkpoint.MAGIC) + 4])
    with pytest.raises(ParseError, match="truncated"):
        checkpoint.from_bytes(data[:-8])
    bumped = data.replace(b'"version":1', b'"version":9')
    with pytest.raises(ParseError, match="version"):
        checkpoint.from_bytes(bumped)
    assert math.isfinite(len(data))


def test_window_of_full_length_equals_full_mode():
    from inertialpose.nn.losses import compute_loss
    from inertialpose.nn.train import _windows

    tr = synth_trial(n_segments=2, duration=1.0, seed=4)
    b = trial_batch([tr])
    m = small_model("complementary", alpha=0.5)
    (w,) = _windows(b, tr.n_steps)
    full = compute_loss("qad", m.forward(b), b.gt).data
    assert compute_loss("qad", m.forward(w), w.gt).data == full
    assert len(_windows(b, 20)) == tr.n_steps // 20
