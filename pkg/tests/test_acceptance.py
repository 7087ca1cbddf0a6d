"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The heavy experiments run once per module through the public runners with
their default configs; everything is seeded, so results are reproducible.
"""
import dataclasses
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from pntk.envs import LinearDims, TaskDims, gen_smg
from pntk.experiments import artifact_hashes, default_config, run
from pntk.kernel import DecomposedAccumulator, PNTKAccumulator, delta_w_from_pntk, ntk_all, pntk_identity_check
from pntk.model import LinearNet, TaskNet, init_linear, per_output_grad, predict, sgd_train

pytestmark = pytest.mark.acceptance


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def outdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


# ---------------------------------------------------------------- 1


def _fd_grad(net, x, h=1e-5):
    """Central differences of every output over every parameter, ``(D, P)``."""
    cols = []
    for n in net.param_names:
        w = getattr(net, n)
        for idx in np.ndindex(w.shape):
            plus, minus = net.copy(), net.copy()
            getattr(plus, n)[idx] += h
            getattr(minus, n)[idx] -= h
            cols.append((predict(plus, x) - predict(minus, x)) / (2 * h))
    return np.stack(cols, axis=1)


def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(2024)
    for _ in range(20):
        lin = LinearNet(rng.standard_normal((4, 3)), rng.standard_normal((3, 5)))
        x = rng.standard_normal(4)
        g, fd = per_output_grad(lin, x), _fd_grad(lin, x)
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
        d = TaskDims(3, 2, 2, 6)
        u = lambda *s: rng.uniform(-1, 1, size=s)
        tn = TaskNet(u(d.n_stim, d.hidden), u(d.n_tasks, d.hidden), u(d.hidden, d.n_out), u(d.n_tasks, d.n_out))
        xt = (rng.random(d.n_stim), rng.random(d.n_tasks))
        g, fd = per_output_grad(tn, xt), _fd_grad(tn, xt)
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    elapsed = time.perf_counter() - t0
    report(1, worst <= 1e-6 and elapsed < 10,
           f"max relative error {worst:.2e} over 20+20 nets (limit 1e-6), {elapsed:.1f}s (limit 10s)")


# ---------------------------------------------------------------- 2


def test_criterion_2_kernel_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    asym, psd_ratio = 0.0, np.inf
    for i in range(50):
        if i % 2:
            net = LinearNet(rng.standard_normal((4, 3)), rng.standard_normal((3, 5)))
            x = rng.standard_normal((30, 4))
        else:
            d = TaskDims(4, 3, 3, 40)
            u = lambda *s: rng.uniform(-1, 1, size=s)
            net = TaskNet(u(d.n_stim, d.hidden), u(d.n_tasks, d.hidden), u(d.hidden, d.n_out), u(d.n_tasks, d.n_out))
            x = (rng.random((30, d.n_stim)), rng.integers(0, 2, (30, d.n_tasks)).astype(float))
        k = ntk_all(net, x)[rng.integers(0, 5)]
        asym = max(asym, np.max(np.abs(k - k.T)))
        ev = np.linalg.eigvalsh((k + k.T) / 2)
        psd_ratio = min(psd_ratio, ev.min() / ev.max())
    elapsed = time.perf_counter() - t0
    report(2, asym <= 1e-10 and psd_ratio >= -1e-9 and elapsed < 30,
           f"max asymmetry {asym:.1e} (limit 1e-10), min eig/max eig {psd_ratio:.1e} (limit -1e-9), {elapsed:.1f}s")


# ---------------------------------------------------------------- 3


def _identity_residual(lr, seed):
    smg = gen_smg(seed, n=100)
    net = init_linear(LinearDims(), seed, scale=0.3)
    acc = PNTKAccumulator(smg.x_test, smg.x, lr=lr)
    tr = sgd_train(net, smg, lr, int(round(0.5 / lr)), hooks=[acc.hook])
    return pntk_identity_check(acc, net, tr.final)


def test_criterion_3_kernel_machine_identity():
    t0 = time.perf_counter()
    lrs = np.array([1e-2, 5e-3, 2.5e-3])
    res = np.array([[_identity_residual(lr, s) for lr in lrs] for s in range(3)])
    slopes = np.diff(np.log(res), axis=1) / np.diff(np.log(lrs))
    elapsed = time.perf_counter() - t0
    ok = res.max() <= 0.02 and np.all((slopes >= 0.8) & (slopes <= 1.2)) and elapsed < 120
    report(3, ok, f"max residual {res.max():.2%} of output range (limit 2%), lr-halving exponents "
                  f"{slopes.min():.3f}..{slopes.max():.3f} (range 0.8-1.2), {elapsed:.1f}s")


# ---------------------------------------------------------------- 4


def test_criterion_4_delta_w_reconstruction():
    t0 = time.perf_counter()
    smg = gen_smg(0, n=100, singular_values=[3.0, 1.0, 0.3, 0.0])
    net = init_linear(LinearDims(), 0, scale=0.3)
    keep = np.min(np.abs(smg.x_test), axis=1) > 1e-3
    xt = smg.x_test[keep][:20]
    dec = DecomposedAccumulator(xt, smg.x, lr=1e-3)
    tr = sgd_train(net, smg, 1e-3, 1000, hooks=[dec.hook])
    truth = tr.final.w_eff - net.w_eff
    ests = [delta_w_from_pntk(dec, xt, k) for k in range(len(xt))]
    err = np.linalg.norm(ests[0] - truth) / np.linalg.norm(truth)
    spread = max(np.max(np.abs(e - ests[0])) for e in ests)
    elapsed = time.perf_counter() - t0
    report(4, err <= 0.02 and spread <= 1e-6 and elapsed < 120,
           f"relative Frobenius error {err:.2%} (limit 2%), spread over {len(xt)} test points {spread:.1e} "
           f"(limit 1e-6), {elapsed:.1f}s")


# ---------------------------------------------------------------- 5 and 6


@pytest.fixture(scope="module")
def smg_summary(outdir):
    t0 = time.perf_counter()
    summ = run(default_config("smg", out_dir=str(outdir / "smg")))
    return summ, time.perf_counter() - t0


def test_criterion_5_mode_ordering(smg_summary):
    summ, elapsed = smg_summary
    cross = {s: p["crossings"] for s, p in summ["per_seed"].items()}
    report(5, summ["ordered_seeds"] >= 4 and elapsed < 300,
           f"modes 1<2<3 reach overlap 0.9 in order in {summ['ordered_seeds']}/{summ['n_seeds']} seeds "
           f"(need 4), first crossings {cross}, {elapsed:.0f}s")


def test_criterion_6_tiered_loss(smg_summary):
    summ, _ = smg_summary
    tiers = {s: p["n_tiers"] for s, p in summ["per_seed"].items()}
    report(6, summ["tiered_seeds"] >= 4,
           f">=2 plateau-then-drop tiers in {summ['tiered_seeds']}/{summ['n_seeds']} seeds (need 4), tiers {tiers}")


# ---------------------------------------------------------------- 7


def test_criterion_7_t0_grouping(outdir):
    summ = run(default_config("grouping", out_dir=str(outdir / "grouping")))
    q = {s: (round(p["standard"]["by_task"]["quality"], 3), round(p["large"]["by_task"]["quality"], 3))
         for s, p in summ["per_seed"].items()}
    z = summ["standard_control_z"]
    report(7, summ["std_quality_wins"] >= 9 and abs(z) <= 2,
           f"standard beats large in {summ['std_quality_wins']}/10 pairs (need 9), (std, large) {q}; "
           f"unsorted control pooled z {z:.2f} (limit 2)")


# ---------------------------------------------------------------- 8


def test_criterion_8_rand_curves(outdir):
    cfg = default_config("init-compare", init_mode="standard", n_null=10, out_dir=str(outdir / "init-compare"))
    summ = run(cfg)
    rand = {s: p["standard"]["rand"] for s, p in summ["per_seed"].items()}
    finals = {s: round(float(r["task_final"]), 2) for s, r in rand.items()}
    peaks = {s: (int(r["input_max_epoch"]), round(float(r["input_max"]), 2), round(float(r["input_final"]), 2))
             for s, r in rand.items()}
    a, b = summ["standard_task_final_complete"], summ["standard_input_peak_then_fall"]
    tall = sum(p[1] - p[2] >= 0.5 for p in peaks.values())
    report(8, a >= 8 and b >= 8,
           f"task curve final ARI 1.0 in {a}/10 (need 8), finals {finals}; input curve peaks in the first half and "
           f"ends below its peak in {b}/10 (need 8), (peak epoch, peak, final) {peaks}; "
           f"peak exceeds final by >= 0.5 in {tall}/10 (reported only)")


# ---------------------------------------------------------------- 9 and 10


@pytest.fixture(scope="module")
def correlate_summary(outdir):
    t0 = time.perf_counter()
    summ = run(default_config("correlate", out_dir=str(outdir / "correlate")))
    return summ, time.perf_counter() - t0


def test_criterion_9_curriculum_effect(correlate_summary):
    summ, elapsed = correlate_summary
    base = summ["base"]
    s, m = base["std_wins_single"], base["large_wins_multi"]
    report(9, s >= 8 and m >= 9 and elapsed < 1800,
           f"full scale: standard lower single-task loss in {s}/10 (need 8), large lower multitask loss in {m}/10 "
           f"(need 9); base and LR-tuned together took {elapsed / 60:.1f} min (limit 30 at scale 0.25)")


def test_criterion_10_correlation_signs(correlate_summary):
    summ, _ = correlate_summary
    ok, parts = True, []
    for name in ("base", "lr_tuned"):
        c = summ[name]["correlation"]
        d, a = c["difference"], c["absolute"]
        ok &= d["r_single"] <= -0.5 and d["r_multi"] >= 0.5
        parts.append(f"{name}: r_single {d['r_single']:.3f} r_multi {d['r_multi']:.3f}, "
                     f"absolute r_single {a['r_single']:.3f}")
    base = summ["base"]["correlation"]
    ok &= abs(base["absolute"]["r_single"]) < abs(base["difference"]["r_single"])
    comb = summ["combined"]["correlation"]["difference"]
    parts.append(f"combined: r_single {comb['r_single']:.3f} r_multi {comb['r_multi']:.3f}")
    report(10, ok, "; ".join(parts))


# ---------------------------------------------------------------- 11


def test_criterion_11_determinism(outdir):
    checks = {}
    for name, over in (("smg", dict(seeds=[0, 1], epochs=500, snapshot_epochs=list(range(0, 500, 10)), compare_epochs=[190])),
                       ("finetune", dict(seeds=[0, 1], n_train=120, n_test=60, epochs=100, record_every=10)),
                       ("init-compare", dict(seeds=[0], n_train=120, n_null=5, epochs=100,
                                             snapshot_epochs=[0, 50, 100], kernel_seeds=[0])),
                       ("grouping", dict(seeds=[0, 1], n_train=120, n_null=5)),
                       ("correlate", dict(seeds=[0, 1, 2], n_train=120, n_test=60, epochs=100, record_every=10,
                                          protocols={"base": {}, "lr_tuned": {"std_lr_factor": 3.0, "epochs": 25}}))):
        a = default_config(name, out_dir=str(outdir / "det_a" / name), **over)
        b = dataclasses.replace(a, out_dir=str(outdir / "det_b" / name))
        run(a)
        run(b)
        ha, hb = artifact_hashes(a.out_dir), artifact_hashes(b.out_dir)
        checks[name] = (len(ha), ha == hb)
    report(11, all(same for _, same in checks.values()),
           f"identical artifact hashes on rerun: {{experiment: (files, identical)}} {checks}")
