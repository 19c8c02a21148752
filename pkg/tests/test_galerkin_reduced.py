import numpy as np
import pytest

from epod import snapshots as snap
from epod.coeff_models import D1, NotAffineError, coefficient_callable, sample_params
from epod.galerkin_reduced import (
    NotPositiveDefinite, ReducedSystem, energy_norm, galerkin_residual, online_solve, online_solve_nonaffine,
    precompute_reduced, truncate_system,
)
from epod.mesh_fem import assemble_stiffness, relative_errors
from epod.pod_basis import PodBasis, build_basis, project, reconstruct

FORCE = "trig_indicator_ex1"


@pytest.fixture(scope="module")
def system(ex1_set32, mesh32):
    basis = build_basis(ex1_set32.subset(range(40)), K=8, mesh=mesh32)
    return precompute_reduced(basis, "ex1", FORCE, mesh32)


@pytest.fixture(scope="module")
def test_params():
    return sample_params("ex1", FORCE, 3, 10, start=60)


def test_local_basis_rejected(ex1_local32, mesh32):
    with pytest.raises(ValueError):
        precompute_reduced(build_basis(ex1_local32, K=3), "ex1", FORCE, mesh32)


def test_blocks_symmetric_and_sum_to_projected_stiffness(system, mesh32, test_params):
    assert system.is_affine and system.blocks.shape == (6, 8, 8)
    assert np.abs(system.blocks - system.blocks.transpose(0, 2, 1)).max() <= 1e-10
    phi = system.basis.phi[mesh32.interior_nodes]
    for p in test_params:
        w = np.array([fn(p.xi) for fn in system.weights])
        direct = phi.T @ (assemble_stiffness(mesh32, coefficient_callable("ex1", p.xi), interior=True) @ phi)
        assert np.abs(np.tensordot(w, system.blocks, axes=1) - direct).max() <= 1e-10 * np.abs(direct).max()


def test_single_mode_closed_form(system, mesh32, test_params):
    one = truncate_system(system, 1)
    xi = test_params[0].xi
    a11 = sum(fn(xi) * blk[0, 0] for fn, blk in zip(one.weights, one.blocks))
    assert a11 > 0
    assert online_solve(one, xi) == pytest.approx([one.load[0] / a11], rel=1e-12)


def test_exact_when_solution_in_span(ex1_set32, mesh32):
    # a three-snapshot basis spans each of those snapshots exactly
    few = ex1_set32.subset([4, 9, 17])
    basis = build_basis(few, K=3, mesh=mesh32)
    system = precompute_reduced(basis, "ex1", FORCE, mesh32)
    for k in range(3):
        c = online_solve(system, few.xi[k])
        assert np.abs(c - project(few.fields[:, k], basis)).max() <= 1e-8 * np.abs(c).max()


def test_affine_and_nonaffine_paths_agree(system, mesh32, test_params):
    for p in test_params[:4]:
        a = online_solve(system, p)
        b = online_solve_nonaffine(system.basis, "ex1", p, FORCE, mesh32)
        assert np.abs(a - b).max() <= 1e-10 * np.abs(a).max()


def test_zero_force_gives_zero(system, mesh32, test_params):
    forced = precompute_reduced(system.basis, "ex1", "random_trig", mesh32)
    assert forced.load is None
    c = online_solve(forced, test_params[0].xi, theta=np.zeros(4), mesh=mesh32)
    assert np.array_equal(c, np.zeros(8))
    with pytest.raises(ValueError):
        online_solve(forced, test_params[0].xi, theta=np.zeros(4))


def test_orthogonality_and_energy_optimality(system, mesh32, test_params):
    truth = snap.solve_many(mesh32, "ex1", FORCE, test_params)
    for k, p in enumerate(test_params):
        A = assemble_stiffness(mesh32, coefficient_callable("ex1", p.xi), interior=True)
        c = online_solve(system, p)
        res = galerkin_residual(system.basis, mesh32, A, truth[:, k], c)
        # the reference field is itself a PCG solve at tol 1e-10
        assert np.abs(res).max() <= 1e-9 * np.abs(system.load).max()
        galerkin = energy_norm(mesh32, A, truth[:, k] - reconstruct(system.basis, c))
        proj = energy_norm(mesh32, A, truth[:, k] - reconstruct(system.basis, project(truth[:, k], system.basis)))
        assert galerkin <= proj * (1 + 1e-9)


def test_error_decreases_with_rank_on_nonaffine_family(mesh16):
    train = snap.generate("ex2", "trig_indicator_ex2", 16, 40, seed=2)
    tests = sample_params("ex2", "trig_indicator_ex2", 2, 5, start=40)
    truth = snap.solve_many(mesh16, "ex2", "trig_indicator_ex2", tests)
    full = build_basis(train, K=8, mesh=mesh16)
    errs = []
    for K in (2, 4, 8):
        basis = full.truncate(K)
        approx = np.column_stack([
            reconstruct(basis, online_solve_nonaffine(basis, "ex2", p, "trig_indicator_ex2", mesh16)) for p in tests
        ])
        errs.append(relative_errors(mesh16, truth, approx)[0].mean())
    assert errs[0] > errs[1] > errs[2]
    system = precompute_reduced(full, "ex2", "trig_indicator_ex2", mesh16)
    assert not system.is_affine and system.load is not None
    with pytest.raises(NotAffineError):
        online_solve(system, tests[0])


def test_indefinite_system_raises(system):
    flipped = ReducedSystem(system.basis, system.family, system.force, -system.blocks, system.weights, system.load)
    with pytest.raises(NotPositiveDefinite):
        online_solve(flipped, np.zeros(20))


def test_truncation_matches_smaller_basis(system, mesh32, test_params):
    small = precompute_reduced(system.basis.truncate(5), "ex1", FORCE, mesh32)
    assert np.allclose(online_solve(truncate_system(system, 5), test_params[1]), online_solve(small, test_params[1]),
                       rtol=1e-12, atol=0)
    with pytest.raises(ValueError):
        truncate_system(system, 9)


def test_centred_basis_rejected(ex1_set32, mesh32):
    with pytest.raises(ValueError):
        precompute_reduced(build_basis(ex1_set32, K=3, center=True), "ex1", FORCE, mesh32)
