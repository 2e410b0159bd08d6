import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inertialpose import quaternion as Q
from inertialpose.errors import ContractError, DegenerateGeometryError, DomainError

from conftest import unit_quaternions, vectors

Z90 = Q.from_axis_angle([0, 0, 1], np.pi / 2)


def matrix_oracle(q):
    """Rotation matrix from the textbook formula, element by element."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def same_rotation(a, b, tol=1e-9):
    return abs(abs(np.dot(a, b)) - 1.0) < tol


# --- construction and products ------------------------------------------------


def test_normalize_zero_raises():
    with pytest.raises(DomainError):
        Q.normalize(np.zeros(4))


def test_identity_product():
    q = Q.normalize(np.array([0.3, -0.2, 0.9, 0.1]))
    assert np.allclose(Q.multiply(Q.IDENTITY, q), q, atol=1e-15)


def test_z90_squared_is_z180():
    assert same_rotation(Q.multiply(Z90, Z90), Q.from_axis_angle([0, 0, 1], np.pi))


def test_multiply_non_finite_raises():
    with pytest.raises(DomainError):
        Q.multiply(np.array([np.nan, 0, 0, 1.0]), Q.IDENTITY)


def test_product_matches_matrix_oracle(rng):
    a, b = Q.random_quaternions(2, rng)
    prod = Q.multiply(a, b)
    assert np.allclose(Q.to_matrix(prod), matrix_oracle(a) @ matrix_oracle(b), atol=1e-12)
    assert same_rotation(Q.from_matrix(matrix_oracle(a) @ matrix_oracle(b)), prod)


@given(unit_quaternions(), vectors())
def test_rotate_matches_matrix(q, v):
    assert np.allclose(Q.rotate(q, v), matrix_oracle(q) @ v, atol=1e-9)


@given(unit_quaternions(), unit_quaternions())
def test_product_is_unit(a, b):
    assert abs(np.linalg.norm(Q.multiply(a, b)) - 1.0) < 1e-9


# --- QAD -------------------------------------------------------------------------


def test_qad_examples():
    q = Q.normalize(np.array([0.1, 0.7, -0.3, 0.2]))
    assert Q.qad(q, q) == 0.0
    assert Q.qad(q, -q) == 0.0
    x90 = Q.from_axis_angle([1, 0, 0], np.pi / 2)
    assert Q.qad(Q.IDENTITY, x90) == pytest.approx(np.pi / 2, abs=1e-12)


@given(unit_quaternions(), unit_quaternions())
def test_qad_symmetric_and_sign_invariant(a, b):
    d = Q.qad(a, b)
    assert 0.0 <= d <= np.pi
    assert d == Q.qad(b, a)
    assert d == Q.qad(a, -b)


def test_qad_triangle_inequality(rng):
    a, b, c = (Q.random_quaternions(10_000, rng) for _ in range(3))
    assert np.all(Q.qad(a, c) <= Q.qad(a, b) + Q.qad(b, c) + 1e-9)


def test_qad_equals_rotation_angle_of_relative(rng):
    a, b = Q.random_quaternions(2, rng)
    rel = Q.multiply(Q.conjugate(a), b)
    assert Q.qad(a, b) == pytest.approx(Q.angle(rel), abs=1e-9)


def test_qad_grad_matches_finite_differences(rng):
    t, p = Q.random_quaternions(2, rng)
    g = Q.qad_grad(t, p)
    h = 1e-6
    loss = lambda x: 2 * np.arccos(abs(np.dot(t, x)))  # noqa: E731
    fd = np.array([(loss(p + h * e) - loss(p - h * e)) / (2 * h) for e in np.eye(4)])
    assert np.max(np.abs(fd - g)) / np.max(np.abs(fd)) < 1e-4


def test_qad_grad_clamped_at_boundary():
    g = Q.qad_grad(Q.IDENTITY, Q.IDENTITY)
    assert np.all(np.isfinite(g))


# --- qdist and RelQAD ------------------------------------------------------------


def test_qdist_examples(rng):
    q = Q.random_quaternions(1, rng)[0]
    assert Q.qdist_loss(q, q) == 0.0
    assert Q.qdist_loss(q, -q) == 0.0
    a, b = Q.random_quaternions(2, rng)
    oracle = min(np.mean((a - b) ** 2), np.mean((a + b) ** 2))
    assert Q.qdist_loss(a, b) == pytest.approx(oracle, rel=1e-12)


def test_rel_qad_examples(rng):
    root = Q.random_quaternions(1, rng)[0]
    same = np.tile(root, (4, 1))
    assert Q.rel_qad(same, same) == pytest.approx(0.0, abs=1e-7)
    t = Q.random_quaternions(5, rng)
    p = Q.random_quaternions(5, rng)
    g = Q.random_quaternions(1, rng)[0]
    assert Q.rel_qad(Q.multiply(g, t), Q.multiply(g, p)) == pytest.approx(Q.rel_qad(t, p), abs=1e-9)
    # identity root reduces to plain QAD on the other segment
    t2 = np.stack([Q.IDENTITY, t[1]])
    p2 = np.stack([Q.IDENTITY, p[1]])
    assert Q.rel_qad(t2, p2) == pytest.approx(Q.qad(t[1], p[1]) / 2, abs=1e-12)


def test_rel_qad_length_mismatch():
    with pytest.raises(ContractError):
        Q.rel_qad(np.tile(Q.IDENTITY, (3, 1)), np.tile(Q.IDENTITY, (2, 1)))


# --- gyro integration ---------------------------------------------------------------


def test_integrate_zero_rate():
    q = Q.normalize(np.array([0.5, 0.5, -0.5, 0.5]))
    assert np.array_equal(Q.integrate_gyro(q, np.zeros(3)), q)


def test_integrate_half_turn_about_z():
    q = Q.IDENTITY
    for _ in range(60):
        q = Q.integrate_gyro(q, np.array([0.0, 0.0, np.pi]), 1 / 60)
    assert Q.qad(q, Q.from_axis_angle([0, 0, 1], np.pi)) < 1e-6


def test_integrate_bad_dt():
    with pytest.raises(ContractError):
        Q.integrate_gyro(Q.IDENTITY, np.zeros(3), 0.0)


def test_integrate_first_order_oracle(rng):
    q = Q.random_quaternions(1, rng)[0]
    w = rng.normal(size=3)
    dt = 1 / 60
    first = Q.normalize(q + 0.5 * Q.multiply_raw(q, np.concatenate([[0.0], w])) * dt)
    assert Q.qad(Q.integrate_gyro(q, w, dt), first) < 10 * (np.linalg.norm(w) * dt) ** 2


def test_integrate_saturates():
    big = Q.integrate_gyro(Q.IDENTITY, np.array([100.0, 0, 0]), 0.01)
    assert Q.angle(big) == pytest.approx(Q.DEFAULT_GYRO_SATURATION * 0.01, abs=1e-12)


@settings(max_examples=50)
@given(vectors(3.0), st.integers(1, 200))
def test_integrate_constant_rate_closed_form(w, n):
    dt = 1 / 60
    q = Q.IDENTITY
    for _ in range(n):
        q = Q.integrate_gyro(q, w, dt)
    assert Q.qad(q, Q.exp_map(w * n * dt)) < 1e-6


# --- representations --------------------------------------------------------------


def test_repr6d_identity():
    assert np.allclose(Q.repr6d_to_quat(np.array([1.0, 0, 0, 0, 1, 0])), Q.IDENTITY)


def test_repr6d_round_trip_30_about_y():
    q = Q.from_axis_angle([0, 1, 0], np.radians(30))
    assert same_rotation(Q.repr6d_to_quat(Q.quat_to_repr6d(q)), q, 1e-12)


def test_repr6d_perturbed_is_orthonormal(rng):
    r = Q.quat_to_repr6d(Q.random_quaternions(1, rng)[0]) + rng.normal(0, 0.2, 6)
    m = Q.repr6d_to_matrix(r)
    assert np.allclose(m.T @ m, np.eye(3), atol=1e-9)
    assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("r", [np.zeros(6), np.array([1.0, 0, 0, 2.0, 0, 0])])
def test_repr6d_degenerate(r):
    with pytest.raises(DegenerateGeometryError):
        Q.repr6d_to_quat(r)


@given(unit_quaternions())
def test_conversions_round_trip(q):
    assert same_rotation(Q.repr6d_to_quat(Q.quat_to_repr6d(q)), q, 1e-7)
    assert same_rotation(Q.from_matrix(Q.to_matrix(q)), q, 1e-7)
    assert same_rotation(Q.exp_map(Q.log_map(q)), q, 1e-7)


def test_euler_identity_and_axes():
    assert np.allclose(Q.euler_to_quat(0.0, 0.0, 0.0), Q.IDENTITY)
    assert same_rotation(Q.euler_to_quat(0.3, 0.0, 0.0), Q.from_axis_angle([0, 0, 1], 0.3))
    assert same_rotation(Q.euler_to_quat(0.0, 0.3, 0.0), Q.from_axis_angle([0, 1, 0], 0.3))
    assert same_rotation(Q.euler_to_quat(0.0, 0.0, 0.3), Q.from_axis_angle([1, 0, 0], 0.3))


def test_euler_is_intrinsic_zyx():
    y, p, r = 0.4, -0.3, 1.1
    expected = Q.multiply(
        Q.multiply(Q.from_axis_angle([0, 0, 1], y), Q.from_axis_angle([0, 1, 0], p)), Q.from_axis_angle([1, 0, 0], r)
    )
    assert same_rotation(Q.euler_to_quat(y, p, r), expected)


@given(
    st.floats(-np.pi + 1e-3, np.pi - 1e-3),
    st.floats(np.radians(-85), np.radians(85)),
    st.floats(-np.pi + 1e-3, np.pi - 1e-3),
)
def test_euler_round_trip(y, p, r):
    out = Q.quat_to_euler(Q.euler_to_quat(y, p, r))
    assert np.allclose(out, (y, p, r), atol=1e-9)


def test_euler_gimbal_lock():
    q = Q.euler_to_quat(0.5, np.pi / 2, 0.2)
    yaw, pitch, roll = Q.quat_to_euler(q)
    assert pitch == pytest.approx(np.pi / 2, abs=1e-7)
    assert roll == 0.0
    # yaw absorbs roll; the rotation itself is preserved
    assert same_rotation(Q.euler_to_quat(yaw, pitch, roll), q, 1e-9)


def test_slerp_midpoint():
    a = Q.IDENTITY
    b = Q.from_axis_angle([0, 0, 1], 1.0)
    assert same_rotation(Q.slerp(a, b, 0.5), Q.from_axis_angle([0, 0, 1], 0.5), 1e-12)


def test_shortest_arc_and_twist(rng):
    u, v = rng.normal(size=(2, 3))
    q = Q.shortest_arc(u, v)
    assert np.allclose(Q.rotate(q, u / np.linalg.norm(u)), v / np.linalg.norm(v), atol=1e-12)
    assert Q.twist_angle(Q.from_axis_angle([0, 0, 1], 0.7)) == pytest.approx(0.7, abs=1e-12)
