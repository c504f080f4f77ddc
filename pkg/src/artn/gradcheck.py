"""Central finite-difference checks for every differentiable operation.

Each check builds a random scalar from one operation, differentiates it on a
tape and compares against central differences. The relative error of a
gradient is ``||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STEP = 1e-5
OP_TOLERANCE = 1e-4
COMPOSITE_TOLERANCE = 1e-3
TRIALS = 20


@dataclass
class CheckResult:
    op: str
    worst_rel_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.worst_rel_error <= self.tolerance


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / den)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr``, perturbed in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + step
        up = f()
        arr[idx] = old - step
        down = f()
        arr[idx] = old
        g[idx] = (up - down) / (2 * step)
    return g


def _projected_check(build: Callable[..., Tensor], inputs: list, rng) -> float:
    """Check ``sum(w * build(*inputs))`` for a random weighting ``w``."""
    out = build(*inputs)
    w = rng.normal(size=out.shape)

    def f():
        return float(np.sum(w * build(*inputs).data))

    with ad.Tape() as tape:
        loss = ad.total(_weighted(build(*inputs), w))
    tape.backward(loss, wrt=inputs)
    return max(rel_error(t.grad, numeric_grad(f, t.data)) for t in inputs)


def _weighted(t: Tensor, w: np.ndarray) -> Tensor:
    # elementwise product with a constant weighting
    return ad._make("weight", t.data * w, (t,), lambda g: (g * w,))


def _leaf(rng, *shape, away_from_zero: bool = False) -> Tensor:
    x = rng.normal(size=shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 1e-2, np.sign(x + 1e-12) * (1e-2 + np.abs(x)), x)
    return Tensor(x, requires_grad=True)


def check_matmul(rng) -> float:
    return _projected_check(ad.matmul, [_leaf(rng, 3, 4), _leaf(rng, 4, 2)], rng)


def check_affine(rng) -> float:
    return _projected_check(ad.affine, [_leaf(rng, 2, 3), _leaf(rng, 3, 2), _leaf(rng, 2)], rng)


def check_relu(rng) -> float:
    return _projected_check(ad.relu, [_leaf(rng, 4, 3, away_from_zero=True)], rng)


def check_batch_norm(rng) -> float:
    def bn(x, gamma, shift):
        # a fresh state each call keeps the running moments out of the comparison
        return ad.batch_norm(x, gamma, shift, ad.BatchNormState.fresh(3), "train")
    return _projected_check(bn, [_leaf(rng, 4, 3), _leaf(rng, 3), _leaf(rng, 3)], rng)


def check_softmax_cross_entropy(rng) -> float:
    labels = rng.integers(0, 3, size=4)
    return _projected_check(lambda z: ad.softmax_cross_entropy(z, labels), [_leaf(rng, 4, 3)], rng)


def check_grl(rng) -> float:
    """Reversal is checked against the negated, scaled identity Jacobian."""
    coeff = float(rng.uniform(0.1, 2.0))
    x = _leaf(rng, 3, 4)
    w = rng.normal(size=x.shape)
    with ad.Tape() as tape:
        loss = ad.total(_weighted(ad.grl(x, coeff), w))
    tape.backward(loss)
    return rel_error(x.grad, -coeff * w)


def check_cosine_similarity_mean(rng) -> float:
    return _projected_check(ad.cosine_similarity_mean, [_leaf(rng, 4, 3), _leaf(rng, 4, 3)], rng)


def check_add(rng) -> float:
    return _projected_check(ad.add, [_leaf(rng, 3, 2), _leaf(rng, 3, 2)], rng)


def check_rows(rng) -> float:
    return _projected_check(lambda x: ad.rows(x, 1, 3), [_leaf(rng, 4, 2)], rng)


def _toy_problem(rng, seed: int):
    from .data import Batch
    from .model import build_model

    model = build_model(3, [4, 4], 3, classifier_hidden=4, domain_hidden=4,
                        batch_norm=True, seed=seed)
    # zero-initialised biases put rows that a ReLU has zeroed exactly on the
    # next ReLU's kink, where finite differences are meaningless
    for ps in model.parameter_sets():
        for name, t in ps.tensors.items():
            if name.endswith(".bias"):
                t.data = rng.normal(scale=0.1, size=t.shape)
    bs = Batch(rng.normal(size=(5, 3)), rng.integers(0, 3, size=5), 0)
    bt = Batch(rng.normal(size=(4, 3)) + 0.5, None, 1)
    return model, bs, bt


def check_artn_loss(rng, seed: int = 0) -> float:
    """Every parameter of G, T, C and D against finite differences.

    D descends ``L_s + L_t``; G, T and C descend
    ``L_c + beta r - lambda gamma (L_s + L_t)``, which is what the reversal
    layer makes one backward sweep deliver.
    """
    from .model import ArtnHyper, artn_loss

    model, bs, bt = _toy_problem(rng, seed)
    hyper = ArtnHyper(lam=float(rng.uniform(0.3, 1.0)), beta=float(rng.uniform(0.1, 1.0)))
    p = float(rng.uniform(0.1, 0.9))
    tape = ad.Tape()
    out = artn_loss(model, hyper, bs, bt, p, tape)
    params = [t for ps in model.parameter_sets() for t in ps]
    tape.backward(out.objective, wrt=params)
    coeff = hyper.lam * out.gamma

    def adversarial():
        o = artn_loss(model, hyper, bs, bt, p)
        return o.loss_c + hyper.beta * o.reg - coeff * (o.loss_s + o.loss_t)

    def domain():
        o = artn_loss(model, hyper, bs, bt, p)
        return o.loss_s + o.loss_t

    # normwise over each network: biases feeding batch norm have an exactly
    # zero gradient, which makes per-tensor relative error meaningless
    worst = 0.0
    for ps in model.parameter_sets():
        f = domain if ps.tag == "theta_d" else adversarial
        analytic = np.concatenate([t.grad.ravel() for t in ps])
        numeric = np.concatenate([numeric_grad(f, t.data).ravel() for t in ps])
        worst = max(worst, rel_error(analytic, numeric))
    return worst


OP_CHECKS = {
    "matmul": check_matmul,
    "affine": check_affine,
    "relu": check_relu,
    "batch_norm": check_batch_norm,
    "softmax_cross_entropy": check_softmax_cross_entropy,
    "grl": check_grl,
    "cosine_similarity_mean": check_cosine_similarity_mean,
    "add": check_add,
    "rows": check_rows,
}
COMPOSITE_CHECKS = {"artn_loss": check_artn_loss}
ALL_CHECKS = {**OP_CHECKS, **COMPOSITE_CHECKS}


def run_check(name: str, trials: int = TRIALS, composite_trials: int = TRIALS) -> CheckResult:
    if name not in ALL_CHECKS:
        raise KeyError(f"unknown op {name!r}; choose from {sorted(ALL_CHECKS)} or 'all'")
    composite = name in COMPOSITE_CHECKS
    n = composite_trials if composite else trials
    prev = ad.get_default_dtype()
    ad.set_default_dtype(np.float64)
    try:
        worst = 0.0
        for seed in range(n):
            rng = np.random.default_rng(seed)
            worst = max(worst, ALL_CHECKS[name](rng))
    finally:
        ad.set_default_dtype(prev)
    return CheckResult(name, worst, COMPOSITE_TOLERANCE if composite else OP_TOLERANCE)


def run_suite(scope: str = "all", **kw) -> list:
    names = list(ALL_CHECKS) if scope == "all" else [scope]
    return [run_check(n, **kw) for n in names]
