import numpy as np
import pytest

from _instances import random_instance
from condensers.analysis import (
    energy_scale,
    equivalence_check,
    kkt_verify,
    potential_scale,
    rescale_constraint,
    variational_inequality_check,
    weighted_potentials,
)
from condensers.geometry import Condenser, Plate, build_sphere_plate
from condensers.kernels import Kernel
from condensers.measures import VectorMeasure, r_equivalent_twin, weighted_energy
from condensers.solver import Problem, SolveOptions, brute_force_solve, random_feasible, solve

NEWTON = Kernel.newtonian()


def test_weighted_potential_examples():
    a = Plate([[0, 0, 0], [1, 0, 0]], 0.05, sign=1, f=[0.1, 0.2])
    b = Plate([[0, 3, 0]], 0.05, sign=-1, f=[0.5])
    c = Condenser([a, b])
    p = Problem.build(c, NEWTON)
    lam = VectorMeasure([[0.4, 0.6], [1.0]])
    W = weighted_potentials(lam, p.field, p.K, c)
    K = p.K.entries
    assert W[0][0] == pytest.approx(K[0, 0] * 0.4 + K[0, 1] * 0.6 - K[0, 2] * 1.0 + 0.1)
    assert W[1][0] == pytest.approx(-(K[2, 0] * 0.4 + K[2, 1] * 0.6) + K[2, 2] + 0.5)
    zero = weighted_potentials(VectorMeasure.zeros(c), p.field, p.K, c)
    assert zero[0].tolist() == [0.1, 0.2] and zero[1].tolist() == [0.5]
    single = Condenser([a.replace(f=np.zeros(2))])
    ps = Problem.build(single, NEWTON)
    W1 = weighted_potentials(VectorMeasure([[0.4, 0.6]]), ps.field, ps.K, single)[0]
    assert np.allclose(W1, ps.K.entries @ [0.4, 0.6])


def test_singleton_problem_passes_kkt():
    a = Plate([[0, 0, 0]], 0.05, sign=1)
    b = Plate([[1, 0, 0]], 0.05, sign=-1, cap=[2.0])
    p = Problem.build(Condenser([a, b]), NEWTON)
    lam = VectorMeasure([[1.0], [1.0]])
    assert kkt_verify(lam, p, 1e-12).passed


@pytest.mark.parametrize("seed", range(10))
def test_solver_output_passes_kkt_and_vi(seed):
    p = random_instance(seed)
    lam = solve(p, SolveOptions(tol=1e-11)).minimizer
    scale = potential_scale(p, lam)
    assert kkt_verify(lam, p, 1e-5 * scale).passed
    rng = np.random.default_rng(seed)
    vscale = energy_scale(p, lam)
    for _ in range(100):
        nu = random_feasible(p, rng)
        assert variational_inequality_check(lam, nu, p) >= -1e-8 * vscale


def test_perturbation_breaks_kkt():
    pl = build_sphere_plate((0, 0, 0), 1.0, 30)
    pl = pl.replace(f=pl.nodes[:, 0])  # field breaks the symmetry
    p = Problem.build(Condenser([pl]), NEWTON)
    lam = solve(p, SolveOptions(tol=1e-12)).minimizer
    tol = 1e-5 * potential_scale(p, lam)
    rep = kkt_verify(lam, p, tol)
    assert rep.passed
    W = weighted_potentials(lam, p.field, p.K, p.condenser)[0]
    support = np.flatnonzero(lam[0] > 1e-6)
    i, j = support[np.argmin(W[support])], support[np.argmax(W[support])]
    moved = VectorMeasure([lam[0].copy()])
    delta = 0.01 * lam[0][i]
    moved.masses[0][i] -= delta
    moved.masses[0][j] += delta
    bad = kkt_verify(moved, p, tol)
    assert not bad.passed
    assert bad.plates[0].residuals["b4"] > tol
    # residuals recomputed directly
    W2 = weighted_potentials(moved, p.field, p.K, p.condenser)[0]
    w = float(W2 @ moved[0]) / 1.0
    sup = moved[0] > 1e-12
    assert bad.plates[0].residuals["b4"] == pytest.approx(np.max(np.abs(W2[sup] - w)), rel=1e-12)


def test_non_optimal_point_has_negative_direction():
    p = random_instance(4)
    lam = solve(p, SolveOptions(tol=1e-11)).minimizer
    start = random_feasible(p, np.random.default_rng(99))
    val = variational_inequality_check(start, lam, p)
    # quadratic expansion: G(lam) - G(start) = 2 val + d^2, so val < 0 strictly
    from condensers.measures import semimetric_distance
    d2 = semimetric_distance(lam, start, p.K, p.condenser) ** 2
    G = lambda m: weighted_energy(m, p.field, p.K, p.condenser)
    assert 2 * val + d2 == pytest.approx(G(lam) - G(start), rel=1e-9, abs=1e-12)
    assert val < 0
    assert variational_inequality_check(lam, lam, p) == 0.0


def test_multiplier_scaling():
    p = random_instance(7)
    lam = solve(p, SolveOptions(tol=1e-12)).minimizer
    q = rescale_constraint(p, 2.5)
    lam2 = solve(q, SolveOptions(tol=1e-12)).minimizer
    for m1, m2 in zip(lam.masses, lam2.masses):
        assert np.allclose(m1, m2, atol=1e-8)
    w1 = kkt_verify(lam, p, 1.0).multipliers
    w2 = kkt_verify(lam2, q, 1.0).multipliers
    assert np.allclose(w1 / w2, 2.5, rtol=1e-6)


def test_equivalence_examples():
    pl = build_sphere_plate((0, 0, 0), 1.0, 40)
    c = Condenser([pl.replace(cap=np.full(40, 3 / 40)), pl.replace()])
    p = Problem.build(c, NEWTON)
    lam = VectorMeasure([np.full(40, 1 / 40)] * 2)
    res = equivalence_check(lam, lam, p.K, c)
    assert res.equivalent and res.distance == 0.0
    hat = r_equivalent_twin(lam, c, 0, 1)
    res = equivalence_check(lam, hat, p.K, c)
    assert res.equivalent and res.distance <= 1e-15
    other = VectorMeasure([np.r_[np.full(20, 2 / 40), np.zeros(20)], np.full(40, 1 / 40)])
    assert not equivalence_check(lam, other, p.K, c).equivalent


def test_kkt_both_directions_on_candidates():
    for seed in range(8):
        p = random_instance(seed)
        sol = brute_force_solve(p)
        tol = 1e-5 * potential_scale(p, sol.minimizer)
        escale = energy_scale(p, sol.minimizer)
        assert kkt_verify(sol.minimizer, p, tol).passed
        for cand, G in sol.candidates:
            if kkt_verify(cand, p, tol).passed:
                assert G - sol.G <= 2 * 1e-5 * escale


def test_kkt_case_ii_and_residual_csv(tmp_path):
    p = random_instance(1, case_ii=True)
    assert p.field.mode == "case_ii"
    lam = solve(p, SolveOptions(tol=1e-11)).minimizer
    rep = kkt_verify(lam, p, 1e-5 * potential_scale(p, lam))
    assert rep.passed
    rep.write_residual_csv(tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert len(rows) == 1 + sum(p.condenser.sizes)
    assert isinstance(rep.to_dict()["plates"][0]["residuals"], dict)


def test_degenerate_constrained_plate_is_flagged():
    pl = Plate([[0, 0, 0], [1, 0, 0], [0, 1, 0]], 0.05, cap=[0.5, 0.5, 0.5], a=1.0)
    p = Problem.build(Condenser([pl]), NEWTON)
    rep = kkt_verify(VectorMeasure([[0.5, 0.5, 0.0]]), p, 1e-8)
    assert rep.plates[0].degenerate
