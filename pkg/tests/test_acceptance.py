"""Acceptance checks, one test per criterion.

Each test appends a single ``PASS``/``FAIL`` line to ``RESULTS`` with the
measured quantity next to its tolerance.  The lines are printed in the pytest
terminal summary and when this file is run as a script.
"""

import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

import oracles
import scenes
from indistinct import cli
from indistinct import io as cio
from indistinct.eigen import eigen_tuple, eigen_tuples
from indistinct.errors import SubsetTooSmallError
from indistinct.geometry import PointCloud, build_spatial_index, fps, fps_hierarchy, knn, knn_bruteforce
from indistinct.metric import SUBSETS, IpbmConfig, evaluate_ipbm, geometry_boundary_subset
from indistinct.mining import MiningConfig, accumulate_ld, select_indistinguishable
from indistinct.net import attentive_pool, forward_pipeline, multi_stage_loss

RESULTS = []


def record(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


# -- IPBM oracle equivalence ------------------------------------------------

def _compare(cloud, pred, k, ref):
    """Count mismatches between evaluate_ipbm and an oracle result dict."""
    ok = True
    worst = 0.0
    valid = [name for name in SUBSETS if ref[name] != "too-small"]
    for name in SUBSETS:
        try:
            got = evaluate_ipbm(cloud, pred, IpbmConfig(k=k), [name])[name]
        except SubsetTooSmallError:
            ok &= ref[name] == "too-small"
            continue
        r = ref[name]
        if r == "too-small":
            ok = False
            continue
        ok &= (got.n, got.s1, got.s2, got.s3) == (r["n"], r["s1"], r["s2"], r["s3"])
        ok &= np.array_equal(got.indices, r["indices"]) and np.array_equal(got.tags, r["tags"])
        for a, b in ((got.isa, r["s1"] / r["n"]), (got.cba, r["s2"] / r["n"]), (got.cia, r["s3"] / r["n"])):
            worst = max(worst, abs(a - b))
    return ok and worst <= 1e-12, worst, len(valid)


def _warm_kernels():
    """One-time JIT compilation stays out of the timed region."""
    rng = np.random.default_rng(0)
    for colored in (False, True):
        pos, col, gt, pred = scenes.random_scene(rng, 400, 3, colored)
        evaluate_ipbm(PointCloud(pos, col, gt), pred, IpbmConfig(k=10))


def test_ipbm_oracle_equivalence():
    _warm_kernels()
    start = time.perf_counter()
    rng = np.random.default_rng(20240601)
    failures, worst, evaluated = 0, 0.0, 0
    for _ in range(20):
        n = int(rng.integers(300, 3001))
        c = int(rng.integers(2, 6))
        k = int(rng.choice([5, 10, 20, 40]))
        pos, col, gt, pred = scenes.random_scene(rng, n, c, bool(rng.integers(2)))
        ok, w, v = _compare(PointCloud(pos, col, gt), pred, k, oracles.ipbm(pos, gt, pred, col, k=k))
        failures += not ok
        worst = max(worst, w)
        evaluated += v
    pos, col, gt, pred, _ = scenes.planted_scene()
    ref = oracles.ipbm(pos, gt, pred, col, k=scenes.PLANTED_K)
    ok, w, v = _compare(PointCloud(pos, col, gt), pred, scenes.PLANTED_K, ref)
    failures += not ok
    worst = max(worst, w)
    evaluated += v
    elapsed = time.perf_counter() - start
    passed = record("IPBM oracle equivalence", failures == 0 and elapsed < 30.0,
                    f"21 scenes, {evaluated} subsets compared, {failures} mismatching scenes, "
                    f"max score diff {worst:.1e} (tol 1e-12), {elapsed:.1f} s (budget 30 s)")
    assert passed


# -- planted structures -----------------------------------------------------

def test_planted_structure_discrimination():
    pos, col, gt, pred, structures = scenes.planted_scene()
    report = evaluate_ipbm(PointCloud(pos, col, gt), pred, IpbmConfig(k=scenes.PLANTED_K))
    tags = report["original"].tags
    parts, ok = [], True
    for name, area in (("blob", 1), ("band", 2), ("region", 3)):
        counts = tuple(int(x) for x in np.bincount(tags[structures[name]], minlength=4))
        share = counts[area] / structures[name].size
        ok &= share >= 0.90 and counts == scenes.PLANTED_STRUCTURE_TAGS[name]
        parts.append(f"{name} {100 * share:.1f}% in S{area}")
    frozen = all((s.n, s.s1, s.s2, s.s3) == scenes.PLANTED_TOTALS[s.name] for s in report.subsets)
    ok &= frozen
    assert record("Planted-structure discrimination", ok,
                  ", ".join(parts) + f" (need >= 90%); frozen oracle counts {'match' if frozen else 'DIFFER'}")


# -- default constants ----------------------------------------------------------

def test_default_constants():
    c = IpbmConfig()
    m = MiningConfig()
    checks = {
        "zeta1=0.33": c.zeta1 == 0.33,
        "zeta2=0.66": c.zeta2 == 0.66,
        "K=500": c.k == 500,
        "rho=0.002": c.rho == 0.002,
        "rho*K=1": c.category_threshold == 1.0,
        "epsilon=0.25": c.epsilon == 0.25,
        "tau=4": m.tau == 4.0,
        "mu=(0,0,1)": m.mu == (0.0, 0.0, 1.0),
    }
    rng = np.random.default_rng(0)
    checks["|geometry subset| = 2500 of 10000"] = geometry_boundary_subset(PointCloud(rng.random((10_000, 3)))).size == 2500
    checks["|selected| = 25 of 100"] = select_indistinguishable(rng.random(100), m.tau).size == 25
    d = cli.build_parser().parse_args(["ipbm", "--gt", "g", "--pred", "p"])
    checks["CLI defaults"] = (d.k, d.zeta1, d.zeta2, d.rho, d.epsilon) == (500, 0.33, 0.66, 0.002, 0.25)
    bad = [k for k, v in checks.items() if not v]
    assert record("Default constants", not bad, f"{len(checks) - len(bad)}/{len(checks)} exact"
                  + (f"; failing: {', '.join(bad)}" if bad else ""))


# -- KNN / FPS ----------------------------------------------------------------

def test_knn_fps_correctness():
    rng = np.random.default_rng(7)
    lattice = np.stack(np.meshgrid(np.arange(10), np.arange(10), np.arange(4), indexing="ij"), -1).reshape(-1, 3)
    planted = scenes.planted_scene()[0]
    clouds = {
        "collinear": (np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [4, 0, 0]]), [1, 2, 3]),
        "coincident": (np.zeros((5, 3)), [1, 4]),
        "lattice": (lattice.astype(float), [6, 26, 100]),
        "uniform": (rng.random((3000, 3)), [1, 16, 64]),
        "anisotropic": (rng.normal(size=(2000, 3)) * [10, 1, 0.01], [8, 32]),
        "planted": (planted, [16, 100]),
    }
    knn_ok, checked = True, 0
    for pts, ks in clouds.values():
        index = build_spatial_index(pts)
        for k in ks:
            for inclusive in (False, True):
                if inclusive and k > len(pts) or not inclusive and k >= len(pts):
                    continue
                a = knn(index, k, self_inclusive=inclusive)
                b = knn_bruteforce(pts, k, self_inclusive=inclusive)
                o_idx, o_dist = oracles.knn(pts, k, self_inclusive=inclusive)
                knn_ok &= np.array_equal(a.indices, b.indices) and np.array_equal(a.distances, b.distances)
                knn_ok &= np.array_equal(a.indices, o_idx) and np.array_equal(a.distances, o_dist)
                checked += 1
    square = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    second = fps(square, 2, 0).indices[1]
    counts = [len(level) for level in fps_hierarchy(rng.random((1024, 3)), 5)]
    ok = knn_ok and second == 3 and counts == [1024, 256, 64, 16, 4]
    assert record("KNN/FPS correctness", ok,
                  f"KNN exact on {checked} cloud/K cases: {knn_ok}; FPS second pick on unit square = "
                  f"({square[second][0]:g}, {square[second][1]:g}) (want (1, 1)); FPS layer counts {counts}")


# -- eigen features -----------------------------------------------------------

def test_eigen_feature_numerics():
    rng = np.random.default_rng(99)
    worst_trace = worst_rot = 0.0
    for _ in range(1000):
        a = rng.normal(size=(3, 3)) * 10 ** rng.uniform(-3, 3)
        c = a @ a.T
        q, r = np.linalg.qr(rng.normal(size=(3, 3)))
        q = q * np.sign(np.diag(r))
        rot = q @ c @ q.T
        rot = (rot + rot.T) / 2
        e = eigen_tuple(c)
        scale = np.trace(c)
        worst_trace = max(worst_trace, abs(e.sum() - scale) / scale)
        worst_rot = max(worst_rot, np.abs(eigen_tuple(rot) - e).max() / scale)
    uv = rng.random((2000, 2)) * 5
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    plane = np.column_stack([uv, np.zeros(2000)]) @ q.T + [3.0, -1.0, 2.0]
    lam3 = eigen_tuples(PointCloud(plane), 16)[:, 2].max()
    ok = worst_trace <= 1e-9 and worst_rot <= 1e-9 and lam3 <= 1e-9
    assert record("Eigen-feature numerics", ok,
                  f"1000 PSD matrices: max trace rel err {worst_trace:.1e}, max rotation rel err {worst_rot:.1e} "
                  f"(tol 1e-9); planar max lambda3 {lam3:.1e} (tol 1e-9)")


# -- mining invariances -------------------------------------------------------

def test_mining_invariances():
    rng = np.random.default_rng(5150)
    changed = size_bad = 0
    for _ in range(100):
        n = int(rng.integers(4, 3000))
        tau = float(rng.uniform(1.0, 10.0))
        mu = tuple(rng.choice([0.0, 0.25, 0.5, 1.0], 3))
        ld = rng.random((n, 3)) * rng.uniform(0.1, 100, 3)
        j = int(rng.integers(3))
        moved = ld.copy()
        moved[:, j] = rng.uniform(0.01, 100) * moved[:, j] + rng.uniform(-100, 100)
        a = select_indistinguishable(accumulate_ld(ld, mu), tau)
        b = select_indistinguishable(accumulate_ld(moved, mu), tau)
        changed += set(a.tolist()) != set(b.tolist())
        size_bad += a.size != math.floor(n / tau) or b.size != math.floor(n / tau)
    assert record("Mining invariances", changed == 0 and size_bad == 0,
                  f"100 affine trials: {changed} selections changed, {size_bad} size violations of floor(N/tau)")


# -- forward kernels ----------------------------------------------------------

def test_forward_kernel_invariants():
    rng = np.random.default_rng(3)
    cloud = PointCloud(rng.random((256, 3)), rng.integers(0, 256, (256, 3)), rng.integers(0, 13, 256), 13)
    row_err, non_finite = 0.0, 0
    for seed in range(100):
        res = forward_pipeline(cloud, seed=seed, mode=("attention", "literal")[seed % 2])
        for z in res.features.probs + [res.probs]:
            row_err = max(row_err, float(np.abs(z.sum(axis=1) - 1.0).max()))
        arrays = res.features.encoder + res.features.decoder + res.features.probs + [res.probs]
        non_finite += sum(int((~np.isfinite(x)).sum()) for x in arrays)
        non_finite += not math.isfinite(res.total_loss)
    conv = 0.0
    for _ in range(200):
        local = rng.normal(size=(8, int(rng.integers(1, 40)), 6)).astype(np.float32) * 10
        score = (rng.normal(size=(6, 6)).astype(np.float32) * 5, rng.normal(size=6).astype(np.float32))
        out = attentive_pool(local, score)
        over = np.maximum(out - local.max(axis=1), local.min(axis=1) - out)
        conv = max(conv, float(over.max()))
    ce = abs(multi_stage_loss(np.full((50, 13), 1 / 13), rng.integers(0, 13, 50)) - math.log(13))
    a = forward_pipeline(cloud, seed=77)
    b = forward_pipeline(cloud, seed=77)
    identical = np.array_equal(a.probs, b.probs) and a.total_loss == b.total_loss and all(
        np.array_equal(x, y) for x, y in zip(a.features.decoder, b.features.decoder))
    ok = row_err <= 1e-6 and conv <= 1e-6 and ce <= 1e-9 and identical and non_finite == 0
    assert record("Forward-kernel invariants", ok,
                  f"Z row-sum err {row_err:.1e} (tol 1e-6); pooling outside hull by {max(conv, 0):.1e} (tol 1e-6); "
                  f"|CE - ln 13| {ce:.1e} (tol 1e-9); rerun bit-identical {identical}; "
                  f"non-finite values over 100 seeds {non_finite}")


# -- performance ----------------------------------------------------------------

@pytest.mark.slow
def test_performance_budget():
    rng = np.random.default_rng(123)
    pos, col, gt, pred = scenes.random_scene(rng, 1_000_000, 5, True)
    cloud = PointCloud(pos, col, gt)
    _warm_kernels()
    start = time.perf_counter()
    report = evaluate_ipbm(cloud, pred)
    t_ipbm = time.perf_counter() - start
    start = time.perf_counter()
    nb = knn(build_spatial_index(cloud), 16)
    t_knn = time.perf_counter() - start
    ok = t_ipbm <= 120.0 and t_knn <= 60.0 and len(report.subsets) == 3 and nb.indices.shape == (1_000_000, 16)
    cores = os.cpu_count()
    assert record("Performance budget", ok,
                  f"1M points on {cores} core(s): IPBM K=500 all subsets {t_ipbm:.1f} s (budget 120 s), "
                  f"KNN K=16 {t_knn:.1f} s (budget 60 s)")


# -- end-to-end determinism -----------------------------------------------------

def test_end_to_end_determinism(tmp_path):
    pos, col, gt, pred, _ = scenes.planted_scene()
    cio.save_cloud(PointCloud(pos, col, gt), tmp_path / "room.txt")
    (tmp_path / "pred.txt").write_text("".join(f"{p}\n" for p in pred))
    outputs = []
    for i, extra in enumerate(([], [], ["--threads", "1"])):
        report = tmp_path / f"r{i}.json"
        cmd = [sys.executable, "-m", "indistinct", *extra, "ipbm", "--gt", str(tmp_path / "room.txt"),
               "--pred", str(tmp_path / "pred.txt"), "--k", str(scenes.PLANTED_K), "--report", str(report)]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outputs.append(report.read_bytes())
    same = all(o == outputs[0] for o in outputs)
    parsed = json.loads(outputs[0])
    assert record("End-to-end determinism", same and len(parsed["subsets"]) == 3,
                  f"3 CLI runs (one with --threads 1), reports byte-identical: {same} "
                  f"({len(outputs[0])} bytes each)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
