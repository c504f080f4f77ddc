"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The behavioral criteria train on the shipped desk configs (configs/*.toml)
with seeds 1..5. Results are cached per session so paired claims reuse the
same runs.
"""

import functools
import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import conftest
from artn import autodiff as ad
from artn import config as cfgmod
from artn import gradcheck
from artn.autodiff import Tensor
from artn.cli import load_datasets, main, model_factory, n_classes_of, train_config
from artn.harness import (SEEDS, Task, run_lambda_sweep, run_noise_sweep, run_once,
                          run_regularizer_ablation, train_domain_classifier)
from artn.model import (build_model, forward_source, forward_target, gamma_schedule, jsd_discrete,
                        optimal_discriminator, proxy_a_distance, source_pass)
from artn.nn import forward_mlp
from test_model import unrolled_source_pass, zero_transform

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
pytestmark = pytest.mark.slow


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    conftest.ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


@functools.lru_cache(maxsize=None)
def desk(name: str):
    cfg = cfgmod.load(CONFIGS / f"{name}.toml", environ={})
    source, target = load_datasets(cfg)
    task = Task(source, target, model_factory(cfg, source.dim, n_classes_of(source, target)))
    return task, train_config(cfg)


_runs: dict = {}
_elapsed: dict = {}


def paired_accs(name: str, method: str) -> list:
    key = (name, method)
    if key not in _runs:
        task, base = desk(name)
        start = time.perf_counter()
        _runs[key] = [run_once(task, replace(base, seed=s, method=method)).final_target_acc for s in SEEDS]
        _elapsed[key] = time.perf_counter() - start
    return _runs[key]


def weighted(t: Tensor, w: np.ndarray) -> Tensor:
    # injects ``w`` as the upstream gradient of ``t``
    return ad._make("weight", t.data * w, (t,), lambda g: (g * w,))


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    results = [gradcheck.run_check(name) for name in gradcheck.ALL_CHECKS]
    elapsed = time.perf_counter() - start
    worst_op = max(r.worst_rel_error for r in results if r.op not in gradcheck.COMPOSITE_CHECKS)
    composite = max(r.worst_rel_error for r in results if r.op in gradcheck.COMPOSITE_CHECKS)
    failing = [r.op for r in results if not r.ok]
    ok = not failing and worst_op <= 1e-4 and composite <= 1e-3 and elapsed <= 60
    report(1, ok, f"ops={len(results)} worst_op_rel={worst_op:.2e} composite_rel={composite:.2e} "
                  f"time={elapsed:.1f}s failing={failing}")


def test_criterion_2_grl_contract():
    rng = np.random.default_rng(0)
    details, ok = [], True
    for coeff in (0.0, 0.5, 1.0):
        x = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        upstream = rng.normal(size=(6, 4))
        with ad.Tape() as tape:
            y = ad.grl(x, coeff)
            loss = ad.total(weighted(y, upstream))
        grad = tape.backward(loss, wrt=[x])[x]
        identity = y.data.tobytes() == x.data.tobytes()
        # numeric derivative of the forward, scaled by the reversal coefficient
        step = gradcheck.STEP
        numeric = np.empty_like(x.data)
        for idx in np.ndindex(x.data.shape):
            orig = x.data[idx]
            x.data[idx] = orig + step
            up = float((ad.grl(x, coeff).data * upstream).sum())
            x.data[idx] = orig - step
            down = float((ad.grl(x, coeff).data * upstream).sum())
            x.data[idx] = orig
            numeric[idx] = (up - down) / (2 * step)
        expected = -coeff * numeric
        scale = max(np.abs(expected).max(), 1e-12)
        rel = float(np.abs(grad - expected).max() / scale) if coeff else float(np.abs(grad).max())
        ok &= identity and rel <= 1e-6
        details.append(f"c={coeff}: identity={identity} rel={rel:.1e}")
    report(2, ok, "; ".join(details))


def test_criterion_3_analytic_diagnostics():
    g0, g5 = gamma_schedule(0.0), gamma_schedule(0.5)
    j_same = jsd_discrete([0.3, 0.7], [0.3, 0.7])
    j_disjoint = jsd_discrete([1.0, 0.0], [0.0, 1.0])
    pad_half, pad_zero = proxy_a_distance(0.5), proxy_a_distance(0.0)
    ok = (g0 == 0.0 and abs(g5 - 0.986614) <= 1e-6 and j_same == 0.0
          and abs(j_disjoint - math.log(2)) <= 1e-12 and pad_half == 0.0 and pad_zero == 2.0)
    report(3, ok, f"gamma(0)={g0} gamma(0.5)={g5:.7f} jsd_same={j_same} "
                  f"jsd_disjoint-ln2={j_disjoint - math.log(2):.1e} pad(0.5)={pad_half} pad(0)={pad_zero}")


def test_criterion_4_architecture_invariants():
    rng = np.random.default_rng(3)
    # target pass never reaches the transform parameters
    model = build_model(3, [5, 5, 5], 2, seed=0)
    with ad.Tape() as tape:
        loss = ad.total(ad.relu(forward_target(model, Tensor(rng.normal(size=(6, 3))))))
    grads = tape.backward(loss, wrt=list(model.t))
    t_grad_max = max(float(np.abs(grads[t]).max()) for t in model.t)
    # zero transform reproduces G at each residual tap
    tap_err = 0.0
    for bn in (False, True):
        m = build_model(3, [4, 4, 4, 4], 2, batch_norm=bn, transform_activation="none", seed=1)
        zero_transform(m)
        sp = source_pass(m, Tensor(rng.normal(size=(5, 3))))
        for i in m.tap_layers():
            tap_err = max(tap_err, float(np.abs(sp.t_layers[i - 1].data - sp.g_layers[i - 1].data).max()))
    # forward_source against the plain recurrence
    rec_err = 0.0
    for bn in (False, True):
        for stride in (1, 2):
            m = build_model(3, [5, 5, 5, 5], 2, batch_norm=bn, residual_stride=stride, seed=4)
            x = rng.normal(size=(7, 3))
            f_s, t_out = forward_source(m, Tensor(x))
            ref_f, ref_t = unrolled_source_pass(m, x)
            rec_err = max(rec_err, float(np.abs(f_s.data - ref_f).max()), float(np.abs(t_out.data - ref_t).max()))
    ok = t_grad_max == 0.0 and tap_err <= 1e-12 and rec_err <= 1e-10
    report(4, ok, f"target_grad_into_T={t_grad_max} tap_err={tap_err:.1e} recurrence_err={rec_err:.1e}")


def test_criterion_5_adaptation_uplift():
    parts, ok = [], True
    for name in ("moons", "blobs"):
        artn = paired_accs(name, "artn")
        base = paired_accs(name, "source_only")
        uplift = 100 * (np.mean(artn) - np.mean(base))
        elapsed = _elapsed[(name, "artn")] + _elapsed[(name, "source_only")]
        ok &= uplift >= 10 and elapsed <= 300
        parts.append(f"{name}: artn={np.mean(artn):.4f} source_only={np.mean(base):.4f} "
                     f"uplift={uplift:.1f}pts time={elapsed:.1f}s")
    report(5, ok, "; ".join(parts))


def test_criterion_6_regularizer_effect():
    task, base = desk("blobs")
    ab = run_regularizer_ablation(task, base, SEEDS)
    acc_w, acc_wo = float(np.mean(ab.acc_with)), float(np.mean(ab.acc_without))
    soft = ab.mean_std_with <= ab.mean_std_without
    violators = [s for s, a, b in zip(SEEDS, ab.grad_with, ab.grad_without) if a.std > b.std]
    ok = acc_w >= acc_wo
    report(6, ok, f"acc beta>0={acc_w:.4f} beta=0={acc_wo:.4f}; soft grad-std check "
                  f"{'holds' if soft else 'violated'} ({ab.mean_std_with:.3f} vs {ab.mean_std_without:.3f}), "
                  f"seeds with higher std under beta>0: {violators}")


def test_criterion_7_lambda_stability():
    task, base = desk("blobs")
    rows = run_lambda_sweep(task, base, [0.4, 0.5, 0.6, 0.7, 0.8, 0.9], SEEDS)
    accs = np.array([r["target_acc"] for r in rows])
    baseline = rows[0]["source_only_acc"]
    span = 100 * (accs.max() - accs.min())
    ok = all(r["status"] == "ok" for r in rows) and span <= 5 and bool(np.all(accs >= baseline - 0.01))
    report(7, ok, f"accs={np.round(accs, 4).tolist()} span={span:.2f}pts baseline={baseline:.4f}")


def test_criterion_8_noise_robustness():
    task, base = desk("blobs")
    stds = [0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    rows = run_noise_sweep(task, base, stds, SEEDS, ("source_only", "artn"))
    imp = np.array([r["artn_improvement_pct"] for r in rows])
    slope = float(np.polyfit(stds, imp, 1)[0]) * 0.1
    ok = all(r["status"] == "ok" for r in rows) and bool(np.all(imp >= 0)) and slope >= -0.5
    report(8, ok, f"improvement%={np.round(imp, 2).tolist()} slope={slope:+.3f}%/0.1sigma")


def test_criterion_9_manifest_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("ARTN_SEED", raising=False)
    a, b = tmp_path / "a", tmp_path / "b"
    first = main(["train", "-q", "--config", str(CONFIGS / "blobs.toml"), "--out", str(a)])
    second = main(["train", "-q", "--config", str(a / "manifest.json"), "--out", str(b)])
    same = (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    digest = json.loads((a / "manifest.json").read_text())["metrics_sha256"]
    ok = first == 0 and second == 0 and same
    report(9, ok, f"exit codes {first},{second}; metrics.csv identical={same} sha256={digest[:16]}")


def _normal_pdf(x, mu):
    return np.exp(-0.5 * (x - mu) ** 2) / math.sqrt(2 * math.pi)


def test_criterion_10_optimal_discriminator_oracle():
    rng = np.random.default_rng(0)
    n = 4000
    x = np.concatenate([rng.normal(-1.0, 1.0, n), rng.normal(1.0, 1.0, n)])[:, None]
    y = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)])
    clf = train_domain_classifier(x, y, seed=0, hidden=16, epochs=20, learning_rate=0.05)
    grid = np.linspace(-2, 2, 41)
    logits, _ = forward_mlp(clf, Tensor(grid[:, None]), "eval")
    p_source = ad.softmax(logits.data)[:, 0]
    oracle = optimal_discriminator(_normal_pdf(grid, -1.0), _normal_pdf(grid, 1.0))
    mae = float(np.abs(p_source - oracle).mean())
    report(10, mae <= 0.05, f"mae={mae:.4f} over {len(grid)} probe points")
