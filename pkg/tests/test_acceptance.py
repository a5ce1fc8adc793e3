"""Acceptance criteria, one PASS/FAIL line each, at the full benchmark sizes.

Tolerances are pinned here. The experiments run through the command-line
entry point and are judged from the emitted summary files.
"""

import itertools
import json
import math
import os
import time

import numpy as np
import pytest
from scipy import stats as sps

from saddlekit.bench.cli import EXIT_OK, main
from saddlekit.bench.problems import analytic_dimer_problem, analytic_neb_problem
from saddlekit.bench.stats import hodges_lehmann, loglog_slope, wilcoxon_one_sided
from saddlekit.covariance import Dense, LowRank, MetricParams, apply_metric, to_dense
from saddlekit.dimer import DimerParams, hvp_estimate, run_dimer_batch
from saddlekit.neb import NebParams, hj_tangents, oblique_project, run_neb_batch
from saddlekit.potentials import AnalyticDoubleWell, ConstantField, QuadraticDemo, StochasticForceOracle
from saddlekit.potentials.eam import EamFs, eam_energy_forces
from saddlekit.potentials.lattice import Supercell, build_vacancy_supercell
from saddlekit.potentials.setfl import read_setfl

pytestmark = pytest.mark.slow

DATA = os.path.join(os.path.dirname(__file__), "data")
WVAC_SETFL = os.environ.get("SADDLEKIT_WVAC_SETFL", os.path.join(DATA, "W_zhou.eam.alloy"))
MASON_SETFL = os.environ.get("SADDLEKIT_MASON_SETFL")

# pinned tolerances
C3_UA_RATIO = (0.69, 0.89)
C3_DIAG_RATIO = (0.42, 0.62)
C3_METRIC_REL = 0.10
C3_PEN_AL_RATIO = (0.9, 1.1)
C3_P = 1e-3
C4_UA_VS_STD = (18, 26)
C4_UA_VS_DIAG = (16, 24)
C5_STD = (0.188, 0.260)
C5_UA = (0.147, 0.201)
C5_P = 1e-6
C6_PAPER_MEV = {"ua": 4.45, "diag": 5.80, "std": 10.14}
C6_SOFT_REL = 0.40
C6_MASON_EV, C6_MASON_TOL_EV = 1.5379, 0.010
C7_SLOPE = (-1.6, -1.1)


def inside(x, lohi):
    return lohi[0] <= x <= lohi[1]


def run_cli(tmp_path_factory, experiment, *extra):
    out = tmp_path_factory.mktemp(experiment)
    t0 = time.perf_counter()
    code = main([experiment, "--out", str(out), *extra])
    elapsed = time.perf_counter() - t0
    assert code == EXIT_OK
    with open(out / f"{experiment}_summary.json") as fh:
        return json.load(fh), elapsed


@pytest.fixture(scope="module")
def neb2d(tmp_path_factory):
    return run_cli(tmp_path_factory, "neb2d")


@pytest.fixture(scope="module")
def sweep2d(tmp_path_factory):
    return run_cli(tmp_path_factory, "sweep2d")


@pytest.fixture(scope="module")
def dimer2d(tmp_path_factory):
    return run_cli(tmp_path_factory, "dimer2d")


@pytest.fixture(scope="module")
def wvac(tmp_path_factory):
    if not os.path.exists(WVAC_SETFL):
        pytest.skip(f"setfl file {WVAC_SETFL} not available")
    return run_cli(tmp_path_factory, "wvac", "--setfl", WVAC_SETFL)


@pytest.fixture(scope="module")
def rate2d(tmp_path_factory):
    return run_cli(tmp_path_factory, "rate2d")


# --- 1 ------------------------------------------------------------------------


def test_criterion_1_projection_identities(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    failures = 0
    for i in range(1000):
        d = (2, 5, 50)[i % 3]
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        G = Q @ np.diag(np.exp(rng.uniform(0, math.log(100.0), d))) @ Q.T
        tau = rng.standard_normal(d)
        tau /= np.linalg.norm(tau)
        z = rng.standard_normal(d)
        ap = lambda u: G @ u
        s = np.linalg.norm(G, 2) * (1 + np.linalg.norm(z))
        perp, par = oblique_project(ap, tau, z)
        pp, _ = oblique_project(ap, tau, perp)
        c = rng.normal()
        zero, _ = oblique_project(ap, tau, G @ (c * tau))
        n = rng.standard_normal(d)
        n -= tau * (tau @ n)
        n *= 1e-3 / np.linalg.norm(n)
        nonzero, _ = oblique_project(ap, tau, G @ (c * tau + n))
        ok = (
            abs(tau @ perp) <= 1e-10 * s
            and np.allclose(pp, perp, rtol=0, atol=1e-10 * s)
            and np.allclose(perp + par, z, rtol=0, atol=1e-12 * (1 + np.linalg.norm(z)))
            and np.linalg.norm(zero) <= 1e-10 * np.linalg.norm(G, 2) * (1 + abs(c))
            and np.linalg.norm(nonzero) >= np.linalg.eigvalsh(G)[0] * 1e-3 * (1 - 1e-8)
        )
        failures += not ok
    G = np.array([[7 / 4, -3 * math.sqrt(3) / 4], [-3 * math.sqrt(3) / 4, 13 / 4]])
    e1 = np.array([1.0, 0.0])
    oblique, _ = oblique_project(lambda u: G @ u, e1, G @ e1)
    euclid = G @ e1 - e1 * (e1 @ (G @ e1))
    remark = np.array_equal(oblique, [0.0, 0.0]) and np.array_equal(euclid, [0.0, -3 * math.sqrt(3) / 4])
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and remark and elapsed < 5.0
    assert verdict("1", ok, f"identity failures {failures}/1000; counterexample exact {remark}; {elapsed:.2f} s (< 5 s)")


# --- 2 ------------------------------------------------------------------------


def test_criterion_2_deterministic_regressions(verdict):
    t0 = time.perf_counter()
    pot = AnalyticDoubleWell()
    res = run_neb_batch(analytic_neb_problem(noise_multiplier=0.0), NebParams(variant="std"), [0], 2000)
    X = res.final_band[0]
    E, g = pot.energy_gradient(X)
    tau = hj_tangents(X, E)
    gi = g[1:-1]
    normal = np.linalg.norm(gi - tau * np.einsum("ij,ij->i", tau, gi)[:, None], axis=1).max()
    dres = run_dimer_batch(analytic_dimer_problem(noise_multiplier=0.0), DimerParams(), [0], 260)
    dist = float(dres.distance[0, -1])
    elapsed = time.perf_counter() - t0
    ok = normal <= 1e-4 and dist <= 1e-4 and elapsed < 10.0
    assert verdict("2", ok, f"NEB max normal gradient {normal:.2e} (<= 1e-4 at 2000 it); "
                            f"Dimer distance {dist:.2e} (<= 1e-4 at 260 it); {elapsed:.1f} s (< 10 s)")


# --- 3 ------------------------------------------------------------------------


def test_criterion_3_analytic_neb(neb2d, verdict):
    s, elapsed = neb2d
    agg, paired = s["aggregates"], s["paired_vs_std"]
    r = {v: paired[v]["ratio_to_std"] for v in paired}
    checks = {
        "ua/std": inside(r["ua"], C3_UA_RATIO),
        "diag/std": inside(r["diag"], C3_DIAG_RATIO),
        "metric~ua": abs(agg["metric"]["mean"] / agg["ua"]["mean"] - 1.0) <= C3_METRIC_REL,
        "pen/std": inside(r["pen"], C3_PEN_AL_RATIO),
        "al/std": inside(r["al"], C3_PEN_AL_RATIO),
        "wilcoxon": paired["ua"]["wilcoxon_p"] < C3_P,
    }
    detail = (f"ua/std {r['ua']:.3f} in {C3_UA_RATIO}; diag/std {r['diag']:.3f} in {C3_DIAG_RATIO}; "
              f"metric/ua {agg['metric']['mean'] / agg['ua']['mean']:.3f} within {C3_METRIC_REL:.0%}; "
              f"pen/std {r['pen']:.3f}, al/std {r['al']:.3f} in {C3_PEN_AL_RATIO}; "
              f"p(ua<std) {paired['ua']['wilcoxon_p']:.2e} < {C3_P:g}; "
              f"failed {[k for k, v in checks.items() if not v]}; {elapsed:.0f} s")
    assert verdict("3", all(checks.values()), detail)


# --- 4 ------------------------------------------------------------------------


def test_criterion_4_sweep(sweep2d, verdict):
    s, elapsed = sweep2d
    n_std = s["ua_vs"]["std"]["ua_better_cells"]
    n_diag = s["ua_vs"]["diag"]["ua_better_cells"]
    cells = len(s["thetas"]) * len(s["amplitudes"])
    ok = cells == 35 and inside(n_std, C4_UA_VS_STD) and inside(n_diag, C4_UA_VS_DIAG)
    assert verdict("4", ok, f"ua beats std in {n_std}/{cells} (need {C4_UA_VS_STD}), "
                            f"diag in {n_diag}/{cells} (need {C4_UA_VS_DIAG}); {elapsed:.0f} s")


# --- 5 ------------------------------------------------------------------------


def test_criterion_5_dimer(dimer2d, verdict):
    s, elapsed = dimer2d
    std, ua = s["residual"]["std"]["mean"], s["residual"]["ua"]["mean"]
    p = s["paired_vs_std"]["ua"]["wilcoxon_p"]
    ok = inside(std, C5_STD) and inside(ua, C5_UA) and p < C5_P
    assert verdict("5", ok, f"std residual {std:.4f} in {C5_STD}; ua {ua:.4f} in {C5_UA}; "
                            f"p(ua<std) {p:.2e} < {C5_P:g}; {elapsed:.0f} s")


# --- 6 ------------------------------------------------------------------------


def test_criterion_6_wvac_ordering(wvac, verdict):
    s, elapsed = wvac
    m = {v: s["error_meV"][v]["mean"] for v in ("ua", "diag", "std")}
    order = m["ua"] < m["diag"] < m["std"]
    pos = {k: s["paired"][k]["positive"] for k in ("std-ua", "diag-ua")}
    ok = order and all(n == 24 for n in pos.values())
    assert verdict("6 hard", ok, f"mean meV ua {m['ua']:.2f} < diag {m['diag']:.2f} < std {m['std']:.2f}: {order}; "
                                 f"seeds with ua better: vs std {pos['std-ua']}/24, vs diag {pos['diag-ua']}/24 "
                                 f"(need 24/24); reference {s['reference_barrier_eV']:.4f} eV; {elapsed:.0f} s")


def test_criterion_6_wvac_magnitudes(wvac, verdict):
    s, _ = wvac
    m = {v: s["error_meV"][v]["mean"] for v in C6_PAPER_MEV}
    rel = {v: m[v] / C6_PAPER_MEV[v] - 1.0 for v in m}
    ok = all(abs(x) <= C6_SOFT_REL for x in rel.values())
    assert verdict("6 soft", ok, "; ".join(f"{v} {m[v]:.2f} meV vs {C6_PAPER_MEV[v]} ({rel[v]:+.0%})" for v in m)
                   + f"; tolerance +-{C6_SOFT_REL:.0%}")


def test_criterion_6_reference_barrier(verdict, tmp_path):
    if not MASON_SETFL:
        verdict("6 reference", None, "not evaluable: set SADDLEKIT_MASON_SETFL to the published tungsten file")
        pytest.skip("published tungsten potential not supplied")
    s, _ = run_cli_single(tmp_path, "wvac", "--setfl", MASON_SETFL, "--seeds", "1", "--iterations", "0")
    ref = s["reference_barrier_eV"]
    ok = abs(ref - C6_MASON_EV) <= C6_MASON_TOL_EV
    assert verdict("6 reference", ok, f"deterministic barrier {ref:.4f} eV vs {C6_MASON_EV} +- {C6_MASON_TOL_EV}")


def run_cli_single(tmp_path, experiment, *extra):
    code = main([experiment, "--out", str(tmp_path), *extra])
    assert code == EXIT_OK
    with open(tmp_path / f"{experiment}_summary.json") as fh:
        return json.load(fh), 0.0


# --- 7 ------------------------------------------------------------------------


def test_criterion_7_rate(rate2d, verdict):
    s, elapsed = rate2d
    slopes = s["slopes"]
    k = np.arange(5, 41)
    control = loglog_slope(k, 0.37 / k)
    ok = all(inside(x, C7_SLOPE) for x in slopes.values()) and abs(control + 1.0) <= 1e-6
    assert verdict("7", ok, ", ".join(f"{v} {x:.3f}" for v, x in slopes.items())
                   + f" (need {C7_SLOPE}); c/k control {control:.9f}; {elapsed:.0f} s (< 120 s)")


# --- 8 ------------------------------------------------------------------------


def _enumerate_wilcoxon(d):
    ranks = sps.rankdata(np.abs(d))
    w = ranks[d > 0].sum()
    hits = sum(ranks[np.array(sg, dtype=bool)].sum() >= w - 1e-9 for sg in itertools.product((0, 1), repeat=d.size))
    return hits / 2**d.size


def test_criterion_8_oracle_equivalence(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    checks = {}
    # low-rank Woodbury solve against a dense solve
    worst = 0.0
    for _ in range(50):
        d, r = int(rng.integers(2, 51)), int(rng.integers(1, 9))
        B = rng.standard_normal((r, r))
        op = LowRank(rng.standard_normal((d, r)), B @ B.T)
        z = rng.standard_normal(d)
        dense = np.linalg.solve(to_dense(op) + 0.1 * np.eye(d), z)
        worst = max(worst, np.abs(apply_metric(op, MetricParams(lam=0.1), z) - dense).max() / np.abs(dense).max())
    checks["woodbury"] = (worst <= 1e-9, f"Woodbury rel err {worst:.1e}")
    # exact Wilcoxon against sign-pattern enumeration
    mism = sum(wilcoxon_one_sided(d) != _enumerate_wilcoxon(d)
               for n in range(1, 11) for d in [rng.normal(0.3, 1.0, n) for _ in range(10)])
    checks["wilcoxon"] = (mism == 0, f"Wilcoxon mismatches {mism}/100")
    # Hodges-Lehmann against explicit Walsh averages
    hl_bad = 0
    for _ in range(100):
        d = rng.normal(size=int(rng.integers(1, 30)))
        w = np.sort([(d[i] + d[j]) / 2 for i in range(d.size) for j in range(i, d.size)])
        ref = w[w.size // 2] if w.size % 2 else 0.5 * (w[w.size // 2 - 1] + w[w.size // 2])
        hl_bad += hodges_lehmann(d) != ref
    checks["hl"] = (hl_bad == 0, f"HL mismatches {hl_bad}/100")
    # EAM forces against central differences of the energy
    pot = EamFs.from_tables(read_setfl(os.path.join(DATA, "W_zhou.eam.alloy")))
    base, _ = build_vacancy_supercell(2, 3.165)
    cell = Supercell(base.cell, base.positions + np.random.default_rng(2).normal(0, 0.08, base.positions.shape),
                     base.species)
    _, F = eam_energy_forces(pot, cell)
    x0, h = cell.flat(), 1e-5
    g = np.array([(eam_energy_forces(pot, cell.with_flat(x0 + h * e))[0]
                   - eam_energy_forces(pot, cell.with_flat(x0 - h * e))[0]) / (2 * h) for e in np.eye(x0.size)])
    fd_err = float(np.abs(F.ravel() + g).max())
    checks["eam"] = (fd_err <= 1e-5, f"EAM force vs FD {fd_err:.1e} eV/A")
    # HVP covariance Monte Carlo against the force-covariance formula
    s2, hh = 0.2, 0.05
    orc = StochasticForceOracle(QuadraticDemo(np.diag([-4.0, 15.0])), ConstantField(Dense(s2 * np.eye(2))), 1.0, 0)
    samples = np.array([hvp_estimate(orc, [0.1, 0.2], [0.6, 0.8], hh, (0, k))[0] for k in range(10_000)])
    pred = s2 * np.eye(2) / (2 * hh * hh)
    frob = float(np.linalg.norm(np.cov(samples.T) - pred) / np.linalg.norm(pred))
    checks["hvp"] = (frob <= 0.10, f"HVP cov Frobenius rel {frob:.3f}")
    elapsed = time.perf_counter() - t0
    ok = all(c[0] for c in checks.values()) and elapsed < 60.0
    assert verdict("8", ok, "; ".join(c[1] for c in checks.values()) + f"; {elapsed:.1f} s (< 60 s)")


# --- 9 ------------------------------------------------------------------------


def _read_dir(path):
    return {name: (path / name).read_bytes() for name in sorted(os.listdir(path))}


def test_criterion_9_determinism_and_budget(tmp_path, verdict):
    identical = {}
    for exp in ("neb2d", "dimer2d"):
        outs = []
        for i, threads in enumerate(("1", "8", "1")):
            out = tmp_path / f"{exp}{i}"
            assert main([exp, "--seeds", "8", "--iterations", "60", "--threads", threads, "--out", str(out)]) == EXIT_OK
            outs.append(_read_dir(out))
        identical[exp] = outs[0] == outs[1] == outs[2]
    prob = analytic_neb_problem()
    per_iter = {v: run_neb_batch(prob, NebParams(variant=v), [0, 1, 2], 30).oracle_calls
                for v in ("std", "diag", "metric", "ua", "pen", "al")}
    base = per_iter["std"]
    budget = all(np.array_equal(c, base) for c in per_iter.values()) and np.all(base == 3 * 21)
    ok = all(identical.values()) and budget
    assert verdict("9", ok, f"byte-identical over runs and threads 1/8: {identical}; "
                            f"per-iteration oracle calls equal across variants: {budget}")
