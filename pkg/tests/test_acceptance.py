"""Acceptance criteria 1-13, each at its stated tolerance and runtime budget.

Every test prints one ``criterion N PASS|FAIL`` line; the lines are also
collected in the terminal summary.  The end-to-end runs are expensive
(roughly an hour in total on one CPU core) and are shared between
criteria through module-scoped fixtures.
"""

import itertools
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import gammaln

from advreg import autodiff as ad
from advreg.analysis import (
    coercivity_probe,
    critic_vs_distance,
    decay_slope,
    distance_critic,
    rotated_critic,
    segment_samples,
    wasserstein1_exact,
)
from advreg.harness.experiment import (
    ExperimentConfig,
    input_psnr,
    load_critic,
    prepare_data,
    run_experiment,
    sigma_for_psnr,
    stability_check,
)
from advreg.harness.theory import CIRCLE_SIGMA, circle_samples, toy_duality, train_circle_critic
from advreg.nets import save_weights
from advreg.operators import IdentityOperator, NoiseModel, RayTransform
from advreg.reconstruction import estimate_lambda
from advreg.training import pseudo_inverse_samples, train

from .conftest import ACCEPTANCE_LINES, check_grads, rel_err
from . import test_autodiff
from .test_autodiff import PRIMITIVES, _penalty_fd

pytestmark = pytest.mark.slow

POOL_CRITIC = {"dense": [], "head": "pool"}

DENOISE = ExperimentConfig(
    task="denoise",
    size=32,
    sigma=sigma_for_psnr(20.0),
    n_real=400,
    n_measured=400,
    n_val=8,
    n_test=50,
    train={"steps": 3000, "lr": 1e-3, "architecture": {**POOL_CRITIC, "conv": [[16, 3, 1], [16, 3, 1]]}},
    solve={"step": 0.1, "iterations": 200},
    figures=False,
)

CT = ExperimentConfig(
    task="ct",
    size=64,
    n_angles=30,
    sigma=2.0,
    n_real=400,
    n_measured=400,
    n_val=8,
    n_test=50,
    train={"steps": 1500, "lr": 1e-3, "architecture": {**POOL_CRITIC, "conv": [[16, 3, 1], [16, 3, 1]]}},
    lam_scale=2.5,
    # fixed step just under 1 / ||A||^2 = 5.4e-4 for this geometry
    solve={"step": 5e-4, "iterations": 200},
    figures=False,
)


def record(n, name, ok, detail, elapsed, budget=None):
    """Print and collect the criterion line; a blown runtime budget fails it."""
    if budget is not None and elapsed > budget:
        ok = False
        detail += f"; runtime over budget {budget:.0f}s"
    line = f"criterion {n} {'PASS' if ok else 'FAIL'} {name}: {detail} ({elapsed:.1f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def bruteforce_w1(p, q):
    """Minimum matching cost over all permutations."""
    c = np.linalg.norm(p[:, None] - q[None], axis=-1)
    idx = np.arange(len(p))
    return min(c[idx, list(s)].mean() for s in itertools.permutations(range(len(q))))


def log_bytes(tlog, path):
    tlog.write_csv(path)
    return path.read_bytes()


def weight_bytes(net, path):
    save_weights(net, path)
    return path.read_bytes()


# -- shared runs -------------------------------------------------------------


@pytest.fixture(scope="module")
def circle_run():
    t0 = time.perf_counter()
    m, real, noisy = circle_samples(seed=0)
    net, tlog = train_circle_critic(real, noisy, seed=0, steps=5000)
    return {"manifold": m, "real": real, "noisy": noisy, "net": net, "log": tlog, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def toy_run():
    t0 = time.perf_counter()
    out = toy_duality(mu=100.0, lr=3e-4, steps=2000, seed=0)
    out["seconds"] = time.perf_counter() - t0
    return out


def _experiment(cfg, tmp_path_factory, tag):
    cfg = replace(cfg, output_dir=str(tmp_path_factory.mktemp(tag)))
    t0 = time.perf_counter()
    report = run_experiment(cfg, log=None)
    rows = {r["method"]: r["psnr"] for r in report["rows"]}
    return {"cfg": cfg, "report": report, "psnr": rows, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def denoise_run(tmp_path_factory):
    return _experiment(DENOISE, tmp_path_factory, "denoise")


@pytest.fixture(scope="module")
def ct_run(tmp_path_factory):
    return _experiment(CT, tmp_path_factory, "ct")


# -- criteria ----------------------------------------------------------------


class TestAcceptance:
    def test_01_autodiff_gradients(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        worst_prim = 0.0
        for _, fn, shapes in PRIMITIVES:
            for _ in range(5):
                worst_prim = max(worst_prim, check_grads(fn, [rng.standard_normal(s) for s in shapes]))
        composites = [
            (test_autodiff.TestFiniteDifferences._mlp, [(4, 3), (3, 5), (5,)]),
            (test_autodiff.TestFiniteDifferences._convnet, [(2, 6, 6, 1), (3, 3, 1, 2), (18,)]),
            (test_autodiff.TestFiniteDifferences._normy, [(3, 4), (4, 2)]),
        ]
        worst_comp = max(check_grads(fn, [rng.standard_normal(s) for s in shapes]) for fn, shapes in composites for _ in range(5))

        params = {"w1": rng.standard_normal((3, 8)), "b1": rng.standard_normal(8), "w2": rng.standard_normal(8)}

        def build(x, p):
            return ad.leaky_relu(x @ p["w1"] + p["b1"], 0.1) @ p["w2"]

        x = rng.standard_normal((6, 3))
        _, grads, _ = ad.grad_of_grad_penalty(build, x, params, mu=10.0)
        fd = _penalty_fd(build, x, params, 10.0)
        worst_pen = max(rel_err(grads[k], fd[k]) for k in params)
        ok = worst_prim < 1e-4 and worst_comp < 1e-4 and worst_pen < 1e-3
        detail = f"{len(PRIMITIVES)} primitives max {worst_prim:.1e}, 3 composites max {worst_comp:.1e}, penalty {worst_pen:.1e}"
        assert record(1, "autodiff gradient suite", ok, detail, time.perf_counter() - t0, 60)

    def test_02_operator_adjoint(self):
        t0 = time.perf_counter()
        op = RayTransform((64, 64), 30)
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(20):
            x = rng.standard_normal(op.image_shape)
            y = rng.standard_normal(op.data_shape)
            ax = op.apply(x)
            gap = abs(np.sum(ax * y) - np.sum(x * op.adjoint(y)))
            worst = max(worst, gap / (np.linalg.norm(ax) * np.linalg.norm(y)))
        assert record(2, "operator adjoint", worst <= 1e-9, f"max normalized gap {worst:.1e} over 20 pairs", time.perf_counter() - t0, 60)

    def test_03_ot_oracle(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        worst_tri = -np.inf
        worst_sym = worst_self = 0.0
        min_val = np.inf
        for _ in range(100):
            p, q, r = (rng.standard_normal((16, 2)) for _ in range(3))
            pq, qp = wasserstein1_exact(p, q), wasserstein1_exact(q, p)
            worst_tri = max(worst_tri, pq - wasserstein1_exact(p, r) - wasserstein1_exact(r, q))
            worst_sym = max(worst_sym, abs(pq - qp))
            worst_self = max(worst_self, abs(wasserstein1_exact(p, p)))
            min_val = min(min_val, pq)
        worst_bf = 0.0
        for n in range(1, 9):
            for _ in range(2):
                p, q = rng.standard_normal((n, 2)), rng.standard_normal((n, 2))
                worst_bf = max(worst_bf, abs(wasserstein1_exact(p, q) - bruteforce_w1(p, q)))
        ok = worst_tri <= 1e-12 and worst_sym <= 1e-12 and worst_self == 0.0 and min_val > 0 and worst_bf <= 1e-12
        detail = (f"triangle excess {worst_tri:.1e}, symmetry {worst_sym:.1e}, self {worst_self:.1e}, "
                  f"min W1 {min_val:.3f}, brute force n<=8 max diff {worst_bf:.1e}")
        assert record(3, "OT oracle", ok, detail, time.perf_counter() - t0, 120)

    def test_04_decay_slope(self, circle_run):
        t0 = time.perf_counter()
        m, real, noisy = circle_run["manifold"], circle_run["real"], circle_run["noisy"]
        ana = decay_slope(distance_critic(m), real, noisy, scale=CIRCLE_SIGMA)
        trained = decay_slope(circle_run["net"], real, noisy, scale=CIRCLE_SIGMA)
        ana_err = abs(ana.numeric + 1.0)
        trained_err = abs(trained.numeric - trained.predicted) / abs(trained.predicted)
        ok = ana_err <= 0.1 and trained_err <= 0.15
        detail = (f"analytic slope {ana.numeric:.4f} vs -1 (err {ana_err:.3f}); trained slope {trained.numeric:.4f} "
                  f"vs -E|grad|^2 {trained.predicted:.4f} (rel err {trained_err:.3f})")
        assert record(4, "decay slope", ok, detail, circle_run["seconds"] + time.perf_counter() - t0, 600)

    def test_05_misaligned_competitor(self, circle_run):
        t0 = time.perf_counter()
        m, real, noisy = circle_run["manifold"], circle_run["real"], circle_run["noisy"]
        ana = decay_slope(distance_critic(m), real, noisy, scale=CIRCLE_SIGMA)
        rot = decay_slope(rotated_critic(m), real, noisy, scale=CIRCLE_SIGMA)
        ok = rot.numeric > ana.numeric
        detail = f"competitor slope {rot.numeric:.4f} > distance critic slope {ana.numeric:.4f}"
        assert record(5, "misaligned competitor decays less", ok, detail, time.perf_counter() - t0, 300)

    def test_06_critic_matches_distance(self, circle_run):
        t0 = time.perf_counter()
        m, noisy = circle_run["manifold"], circle_run["noisy"]
        rep = critic_vs_distance(circle_run["net"], m, segment_samples(m, noisy, 4, seed=0))
        ok = rep.correlation >= 0.9 and rep.mean_cosine >= 0.9
        detail = f"Pearson {rep.correlation:.4f}, mean gradient cosine {rep.mean_cosine:.4f} on {rep.n_samples} points"
        assert record(6, "trained critic vs distance", ok, detail, circle_run["seconds"] + time.perf_counter() - t0, 600)

    def test_07_toy_duality(self, toy_run):
        real, noisy = np.array([[-1.0], [1.0]]), np.array([[-3.0], [3.0]])
        w1 = bruteforce_w1(real, noisy)
        gap_err = abs(toy_run["gap"] - w1) / w1
        lip = toy_run["lipschitz"]["mean"]
        ok = w1 == 2.0 and gap_err <= 0.1 and 0.8 <= lip <= 1.2
        detail = f"gap {toy_run['gap']:.4f} vs W1 {w1:.1f} (rel err {gap_err:.3f}), mean gradient norm {lip:.4f}"
        assert record(7, "toy duality", ok, detail, toy_run["seconds"], 300)

    def test_08_lambda_heuristic(self):
        t0 = time.perf_counter()
        op = IdentityOperator((64, 64))
        lam = estimate_lambda(op, NoiseModel(0.1, seed=0), 32)
        # independent Monte Carlo of 2 sigma E||e|| on its own stream
        mc = 2 * 0.1 * np.linalg.norm(np.random.default_rng(99).standard_normal((2000, 64 * 64)), axis=1).mean()
        # closed form mean of a chi variable with n = 4096 degrees of freedom
        n = 64 * 64
        exact = 2 * 0.1 * math.sqrt(2) * math.exp(gammaln((n + 1) / 2) - gammaln(n / 2))
        lams = [estimate_lambda(op, NoiseModel(s, seed=0), 32) for s in (0.05, 0.1, 0.2, 0.4)]
        scaling = max(abs(l / s - lams[0] / 0.05) / (lams[0] / 0.05) for l, s in zip(lams, (0.05, 0.1, 0.2, 0.4)))
        err = abs(lam - mc) / mc
        ok = err < 0.01 and abs(mc - exact) / exact < 0.01 and scaling < 1e-12
        detail = f"lambda {lam:.4f} vs Monte Carlo {mc:.4f} (rel err {err:.1e}, chi mean {exact:.4f}); sigma scaling dev {scaling:.1e}"
        assert record(8, "lambda heuristic", ok, detail, time.perf_counter() - t0, 60)

    def test_09_denoising(self, denoise_run):
        cfg, p = denoise_run["cfg"], denoise_run["psnr"]
        ds = prepare_data(cfg, cfg.operator())
        noisy = input_psnr(ds)
        ok = abs(noisy - 20.0) < 0.5 and p["Adversarial"] >= noisy + 3.0 and p["Adversarial"] >= p["TV"] - 2.0
        detail = f"noisy {noisy:.2f} dB, TV {p['TV']:.2f} dB, adversarial {p['Adversarial']:.2f} dB on {cfg.n_test} images"
        assert record(9, "end-to-end denoising", ok, detail, denoise_run["seconds"], 45 * 60)

    def test_10_ct(self, ct_run):
        p = ct_run["psnr"]
        ok = p["FBP"] < p["TV"] and p["Adversarial"] >= p["FBP"] + 3.0
        detail = f"FBP {p['FBP']:.2f} dB < TV {p['TV']:.2f} dB; adversarial {p['Adversarial']:.2f} dB"
        assert record(10, "end-to-end CT", ok, detail, ct_run["seconds"], 90 * 60)

    def test_11_coercivity(self, denoise_run):
        t0 = time.perf_counter()
        cfg = denoise_run["cfg"]
        net = load_critic(f"{cfg.output_dir}/critic.advr")
        op = cfg.operator()
        y = prepare_data(cfg, op).test_y[0]
        dirs = np.random.default_rng(0).standard_normal((8,) + op.image_shape)
        ts = np.linspace(0.0, 100.0 * np.linalg.norm(y), 201)
        rep = coercivity_probe(net, op, y, dirs, ts, lam=denoise_run["report"]["lambda"])
        ok = rep.all_finite
        detail = f"8 rays, thresholds <= {rep.thresholds.max():.2f} (grid up to {ts[-1]:.0f})"
        assert record(11, "coercivity probe", ok, detail, time.perf_counter() - t0, 120)

    def test_12_stability(self, denoise_run):
        t0 = time.perf_counter()
        cfg = denoise_run["cfg"]
        net = load_critic(f"{cfg.output_dir}/critic.advr")
        op = cfg.operator()
        y = prepare_data(cfg, op).test_y[0]
        sc = cfg.solve_config(denoise_run["report"]["lambda"])
        rep = stability_check(net, op, y, [0.1, 0.05, 0.025], sc, cfg.delta)
        ok = rep.monotone and rep.deviations[0] > rep.deviations[1] > rep.deviations[2]
        detail = "deviations " + ", ".join(f"{s:g}|y|: {d:.4f}" for s, d in rep.rows())
        assert record(12, "stability", ok, detail, time.perf_counter() - t0, 600)

    def test_13_determinism(self, circle_run, toy_run, denoise_run, tmp_path):
        t0 = time.perf_counter()
        same = {}
        _, real, noisy = circle_samples(seed=0)
        net, tlog = train_circle_critic(real, noisy, seed=0, steps=5000)
        same["4"] = (log_bytes(tlog, tmp_path / "c_b.csv") == log_bytes(circle_run["log"], tmp_path / "c_a.csv")
                     and weight_bytes(net, tmp_path / "c_b.advr") == weight_bytes(circle_run["net"], tmp_path / "c_a.advr"))
        toy = toy_duality(mu=100.0, lr=3e-4, steps=2000, seed=0)
        same["7"] = (log_bytes(toy["log"], tmp_path / "t_b.csv") == log_bytes(toy_run["log"], tmp_path / "t_a.csv")
                     and weight_bytes(toy["net"], tmp_path / "t_b.advr") == weight_bytes(toy_run["net"], tmp_path / "t_a.advr"))
        cfg = denoise_run["cfg"]
        op = cfg.operator()
        ds = prepare_data(cfg, op)
        net, tlog = train(cfg.resolved().train_config(), ds.real, ds.measured, op, noisy=pseudo_inverse_samples(op, ds.measured, cfg.delta))
        out = cfg.output_dir
        same["9"] = (log_bytes(tlog, tmp_path / "d_b.csv") == open(f"{out}/train_log.csv", "rb").read()
                     and weight_bytes(net, tmp_path / "d_b.advr") == open(f"{out}/critic.advr", "rb").read())
        ok = all(same.values())
        detail = ", ".join(f"criterion {k} {'identical' if v else 'DIFFERS'}" for k, v in same.items())
        assert record(13, "determinism", ok, detail, time.perf_counter() - t0)
