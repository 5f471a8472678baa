"""Acceptance criteria, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v`` or directly with
``python tests/test_acceptance.py``.
"""
from __future__ import annotations

import functools
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from _instances import random_condenser, random_instance  # noqa: E402
from condensers.analysis import (  # noqa: E402
    energy_scale,
    kkt_verify,
    potential_scale,
)
from condensers.captools import (  # noqa: E402
    FINITE_CAPACITY,
    NOT_THIN,
    THIN_INFINITE,
    capacity,
    sphere_twin_example,
    truncation_study,
    wiener_terms,
)
from condensers.geometry import Condenser, RotationProfile, build_sphere_plate  # noqa: E402
from condensers.kernels import Kernel, assemble_kernel_matrix  # noqa: E402
from condensers.measures import (  # noqa: E402
    ExternalField,
    VectorMeasure,
    r_map,
    semimetric_distance,
    semimetric_distance_double_sum,
    weighted_energy,
)
from condensers.solver import (  # noqa: E402
    Problem,
    SolveOptions,
    brute_force_solve,
    random_feasible,
    solve,
)

NEWTON = Kernel.newtonian()
ROOT = Path(__file__).resolve().parent.parent
ORACLE_SEEDS = range(1000, 1025)
FAMILIES = {
    "c1": RotationProfile("power", 0.0),
    "c2": RotationProfile("stretched_exp", 1.0),
    "c3": RotationProfile("stretched_exp", 2.0),
}


def _line(n, ok, detail):
    return f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"


@functools.lru_cache(maxsize=None)
def _oracle_runs():
    t0 = time.perf_counter()
    runs = []
    for seed in ORACLE_SEEDS:
        p = random_instance(seed)
        runs.append((p, solve(p, SolveOptions(tol=1e-10)), brute_force_solve(p)))
    return runs, time.perf_counter() - t0


def criterion_1():
    runs, elapsed = _oracle_runs()
    worst_g, worst_r, n_con = 0.0, 0.0, 0
    for p, rep, sol in runs:
        worst_g = max(worst_g, abs(rep.G - sol.G) / (1 + abs(sol.G)))
        r1, r2 = r_map(rep.minimizer, p.condenser), r_map(sol.minimizer, p.condenser)
        worst_r = max(worst_r, np.max(np.abs(r1 - r2)) / max(1.0, np.abs(r2).max()))
        n_con += any(p.constrained)
    ok = worst_g <= 1e-6 and worst_r <= 1e-5 and elapsed < 30 and 0 < n_con < len(runs)
    return ok, (f"25 instances ({n_con} with caps), max rel G gap {worst_g:.2e}, "
                f"max R-image gap {worst_r:.2e}, {elapsed:.1f}s")


def criterion_2():
    runs, _ = _oracle_runs()
    rel = 1e-5
    optimum_pass, checked, passing, worst_gap = 0, 0, 0, -np.inf
    for seed, (p, rep, sol) in zip(ORACLE_SEEDS, runs):
        tol = rel * potential_scale(p, sol.minimizer)
        escale = energy_scale(p, sol.minimizer)
        optimum_pass += kkt_verify(sol.minimizer, p, tol).passed
        rng = np.random.default_rng(seed)
        pool = [m for m, _ in sol.candidates] + [rep.minimizer]
        pool += [random_feasible(p, rng) for _ in range(20)]
        for h in (1e-3, 1e-6, 1e-9):
            nu = random_feasible(p, rng)
            pool.append(VectorMeasure([(1 - h) * a + h * b
                                       for a, b in zip(sol.minimizer.masses, nu.masses)]))
        for m in pool:
            checked += 1
            if kkt_verify(m, p, tol).passed:
                passing += 1
                bound = 2 * rel * escale
                gap = (weighted_energy(m, p.field, p.K, p.condenser) - sol.G) / bound
                worst_gap = max(worst_gap, gap)
    ok = optimum_pass == len(runs) and worst_gap <= 1.0
    return ok, (f"oracle optima passing {optimum_pass}/{len(runs)}; {passing}/{checked} feasible "
                f"points pass, worst energy gap {max(worst_gap, 0):.2e} of the 2*tol*scale bound")


def criterion_3():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_iso, worst_g = 0.0, 0.0
    count = 0
    for _ in range(10):
        c = random_condenser(rng, n_plates=3, n_nodes=20)
        K = assemble_kernel_matrix(NEWTON, c)
        zeta = rng.normal(size=K.size)
        F = ExternalField.case_ii(zeta)
        for _ in range(10):
            m1 = VectorMeasure([rng.exponential(size=n) for n in c.sizes])
            m2 = VectorMeasure([rng.exponential(size=n) for n in c.sizes])
            d1 = semimetric_distance(m1, m2, K, c)
            d2 = semimetric_distance_double_sum(m1, m2, K, c)
            worst_iso = max(worst_iso, abs(d1 - d2) / d1)
            G = weighted_energy(m1, F, K, c)
            r = r_map(m1, c)
            ref = K.quadratic(r + zeta) - K.quadratic(zeta)
            worst_g = max(worst_g, abs(G - ref) / abs(ref))
            count += 1
    elapsed = time.perf_counter() - t0
    ok = worst_iso <= 1e-10 and worst_g <= 1e-10 and elapsed < 10 and count == 100
    return ok, (f"{count} measures, isometry rel err {worst_iso:.1e}, "
                f"Case II identity rel err {worst_g:.1e}, {elapsed:.1f}s")


def criterion_4():
    ex = sphere_twin_example(500, cap_factor=3.0)
    rep = ex.report(n_random=20, seed=0)
    vi_min = min(rep["min_variational_inequality"].values())
    ok = (all(rep["feasible"]) and rep["G_relative_gap"] <= 1e-12
          and vi_min >= -1e-8 * rep["energy_scale"]
          and rep["max_componentwise_difference"] > 0.1 * rep["mass_scale"])
    return ok, (f"500 nodes, distance {rep['distance']:.1e}, energy gap {rep['G_relative_gap']:.1e}, "
                f"min VI {vi_min:.1e}, max diff / mass scale "
                f"{rep['max_componentwise_difference'] / rep['mass_scale']:.2f}")


@functools.lru_cache(maxsize=None)
def _sphere_capacities():
    t0 = time.perf_counter()
    out = {r: capacity(build_sphere_plate((0, 0, 0), r, 2000), NEWTON) for r in (1.0, 0.5, 2.0)}
    return out, time.perf_counter() - t0


def criterion_5():
    caps, elapsed = _sphere_capacities()
    errs = {r: abs(res.capacity / r - 1) for r, res in caps.items()}
    ok = all(e <= 0.02 for e in errs.values()) and elapsed < 60
    detail = ", ".join(f"r={r:g}: c={caps[r].capacity:.4f}" for r in caps)
    return ok, f"N=2000, {detail}, {elapsed:.1f}s"


@functools.lru_cache(maxsize=None)
def _thinness():
    t0 = time.perf_counter()
    diags = {name: wiener_terms(prof, q=2.0, k_max=8, k=NEWTON) for name, prof in FAMILIES.items()}
    studies = {name: truncation_study(FAMILIES[name], (10, 20, 40)) for name in ("c1", "c2")}
    return diags, studies, time.perf_counter() - t0


def criterion_6():
    diags, studies, elapsed = _thinness()
    expected = {"c1": NOT_THIN, "c2": THIN_INFINITE, "c3": FINITE_CAPACITY}
    verdicts_ok = all(diags[n].verdict == v for n, v in expected.items())
    m1 = studies["c1"].swept_mass
    m2 = studies["c2"].swept_mass
    c1_ok = all(b > a for a, b in zip(m1, m1[1:])) and max(m1) < 1 + 1e-6
    c2_ok = max(m2) < 0.95 and (max(m2) - min(m2)) < 0.02
    ok = verdicts_ok and c1_ok and c2_ok and elapsed < 300
    return ok, (", ".join(f"{n}: {diags[n].verdict}" for n in FAMILIES)
                + f"; swept mass c1 {np.round(m1, 4).tolist()}, c2 {np.round(m2, 4).tolist()}"
                + f" (spread {max(m2) - min(m2):.4f}); {elapsed:.1f}s")


def criterion_7():
    caps, _ = _sphere_capacities()
    diags, _, _ = _thinness()
    rows = [res.summary() for res in caps.values()]
    rows += [eq for d in diags.values() for eq in d.equilibrium]
    worst_norm = max(abs(r["gamma_energy"] / r["capacity"] - 1) for r in rows)
    min_pot = min(r["min_gamma_potential"] for r in rows)
    ok = worst_norm <= 1e-8 and min_pot >= 1 - 1e-3
    return ok, (f"{len(rows)} capacity runs, max |‖γ‖²/c - 1| {worst_norm:.1e}, "
                f"min node potential {min_pot:.6f}")


def criterion_8():
    a = build_sphere_plate((-1.5, 0, 0), 1.0, 300, f=0.1)
    b = build_sphere_plate((1.5, 0, 0), 1.0, 300, sign=-1, a=2.0, cap=np.full(300, 0.02))
    p = Problem.build(Condenser([a, b]), NEWTON)
    r1 = solve(p, SolveOptions(tol=1e-9, seed=11, record_iterates=True))
    r2 = solve(p, SolveOptions(tol=1e-9, seed=12))
    G = r1.energies
    jitter = float(np.max(np.diff(G))) / (1 + abs(G[0]))
    c = p.condenser
    feasible = all(VectorMeasure.from_stacked(c, x).is_admissible(c, rtol=1e-10) for x in r1.iterates)
    scale = np.sqrt(p.K.quadratic(r_map(r1.minimizer, c)))
    dist = semimetric_distance(r1.minimizer, r2.minimizer, p.K, c) / scale
    with tempfile.TemporaryDirectory() as tmp:
        blobs = []
        for name in ("a", "b"):
            out = Path(tmp) / name
            subprocess.run([sys.executable, "-m", "condensers", "solve", "--config",
                            str(ROOT / "configs" / "two_spheres.json"), "--out", str(out),
                            "--seed", "7"], check=True, capture_output=True)
            blobs.append((out / "summary.json").read_bytes())
    identical = blobs[0] == blobs[1]
    ok = jitter <= 1e-12 and feasible and dist <= 1e-5 and identical and r1.converged and r2.converged
    return ok, (f"max trace increase {max(jitter, 0):.1e}, {len(r1.iterates)} iterates feasible={feasible}, "
                f"random-start distance {dist:.1e}, byte-identical summaries={identical}")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4,
            criterion_5, criterion_6, criterion_7, criterion_8]


@pytest.mark.parametrize("n", range(1, 9))
def test_acceptance(n, capsys):
    ok, detail = CRITERIA[n - 1]()
    with capsys.disabled():
        print("\n" + _line(n, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for i, fn in enumerate(CRITERIA, start=1):
        ok, detail = fn()
        failed += not ok
        print(_line(i, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
