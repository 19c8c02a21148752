import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from epod.coeff_models import D1
from epod.mesh_fem import build_mesh, relative_errors
from epod.pod_basis import build_basis
from epod.sensing import (
    MAX_GRAM_NODES, RankDeficientError, SensorSet, ls_solve, lstsq, qr_pivoted, reconstruct_from_measurements,
    select_sensors,
)


def test_first_pivot_is_largest_column():
    assert qr_pivoted(np.diag([1.0, 2.0])).perm[0] == 1


def test_factorisation_identity(rng):
    A = rng.standard_normal((8, 3))
    qr = qr_pivoted(A)
    assert np.linalg.norm(A[:, qr.perm] - qr.Q @ qr.R) <= 1e-10 * np.linalg.norm(A)
    assert np.allclose(qr.Q.T @ qr.Q, np.eye(3), atol=1e-12)


def test_square_consistent_solve(rng):
    A = rng.standard_normal((5, 5))
    x = rng.standard_normal(5)
    assert np.allclose(lstsq(A, A @ x), x, atol=1e-10)


def test_rank_deficiency_reported():
    A = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    with pytest.raises(RankDeficientError) as err:
        lstsq(A, np.ones(3))
    assert err.value.rank == 1


def test_truncated_qr_cannot_solve(rng):
    qr = qr_pivoted(rng.standard_normal((6, 4)), max_steps=2)
    with pytest.raises(ValueError):
        ls_solve(qr, np.ones(6))
    with pytest.raises(ValueError):
        lstsq(rng.standard_normal((2, 4)), np.ones(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 8), st.integers(0, 2**32 - 1))
def test_qr_against_lapack(n, extra, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n + extra, n))
    b = rng.standard_normal((n + extra, 2))
    qr = qr_pivoted(A)
    _, R, P = sla.qr(A, pivoting=True, mode="economic")
    assert np.array_equal(qr.perm, P)
    d = np.abs(np.diag(qr.R))
    assert np.all(np.diff(d) <= 1e-12 * d[0])
    assert np.allclose(d, np.abs(np.diag(R)), rtol=1e-9)
    assert np.allclose(ls_solve(qr, b), np.linalg.lstsq(A, b, rcond=None)[0], atol=1e-8)


def test_identity_columns_pick_unit_nodes():
    phi = np.eye(5)[:, [1, 3]]
    assert sorted(select_sensors(phi, 2).indices.tolist()) == [1, 3]


def test_qdeim_conditioning_beats_random_median(rng):
    phi = np.linalg.qr(rng.standard_normal((50, 3)))[0]
    s = select_sensors(phi, 3)
    conds = [np.linalg.cond(phi[rng.choice(50, 3, replace=False)]) for _ in range(200)]
    assert np.linalg.cond(s.B) <= np.median(conds)


def test_oversampled_rule_pivots_on_gram(rng):
    phi = np.linalg.qr(rng.standard_normal((40, 3)))[0]
    s = select_sensors(phi, 7)
    assert np.array_equal(s.indices, qr_pivoted(phi @ phi.T).perm[:7])
    assert len(set(s.indices.tolist())) == 7


def test_sensor_count_checks(rng):
    phi = rng.standard_normal((10, 3))
    with pytest.raises(ValueError):
        select_sensors(phi, 2)
    with pytest.raises(ValueError):
        select_sensors(phi, 11)
    with pytest.raises(ValueError):
        select_sensors(np.zeros((MAX_GRAM_NODES + 1, 1)) + 1.0, 2)


def test_in_span_recovery_and_zero(rng):
    phi = np.linalg.qr(rng.standard_normal((60, 4)))[0]
    for M in (4, 9):
        s = select_sensors(phi, M)
        c = rng.standard_normal(4)
        u, c_hat = reconstruct_from_measurements(phi, s, (phi @ c)[s.indices], return_coeffs=True)
        assert np.allclose(c_hat, c, atol=1e-8) and np.allclose(u, phi @ c, atol=1e-8)
        assert not reconstruct_from_measurements(phi, s, np.zeros(M)).any()
    with pytest.raises(ValueError):
        reconstruct_from_measurements(phi, s, np.zeros(M + 1))


def test_rank_deficient_measurements():
    phi = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    s = SensorSet(np.array([0, 1]), phi[[0, 1]], np.array([0, 1]))
    with pytest.raises(RankDeficientError):
        reconstruct_from_measurements(phi, s, np.ones(2))


def test_error_non_increasing_in_M(ex1_local32, ex1_set32):
    mesh = build_mesh(32)
    mask = mesh.mask(*D1)
    train = ex1_local32.subset(range(40))
    basis = build_basis(train, mask, K=5, mesh=mesh)
    U = ex1_local32.fields[:, 40:]
    errs = []
    for M in (5, 10, 20, 40):
        s = select_sensors(basis, M)
        R = np.column_stack([reconstruct_from_measurements(basis, s, u[s.indices]) for u in U.T])
        errs.append(relative_errors(mesh, U, R, mask, basis.mass)[0].mean())
    assert all(b <= 1.1 * a for a, b in zip(errs, errs[1:]))
