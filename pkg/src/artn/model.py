"""The adversarial residual transform network and its analytic diagnostics.

Four parameter sets: the feature extractor G (shared by both domains), the
transform network T (source features only, fed by residual taps from G), the
label classifier C and the domain classifier D.

One mechanism carries the adversarial sign: D sees its inputs through a
gradient-reversal layer with coefficient ``lambda * gamma(p)``, so a single
backward pass of ``L_c + L_s + L_t + beta * r`` gives D the descent direction
on ``L_s + L_t`` and G/T the reversed, scaled one.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import NetworkSpec, ParameterSet, apply_layer, forward_mlp, init_parameters

SOURCE_DOMAIN = 0
TARGET_DOMAIN = 1


@dataclass
class ArtnModel:
    g: ParameterSet
    t: ParameterSet
    c: ParameterSet
    d: ParameterSet
    residual_stride: int = 1
    # incremented whenever T is evaluated; lets tests prove the target path skips it
    t_evaluations: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.residual_stride < 1:
            raise ValueError("residual_stride must be a positive integer")
        gs, ts = self.g.spec, self.t.spec
        n = gs.n_layers
        if ts.n_layers != n:
            raise ValueError(f"T has {ts.n_layers} layers, G has {n}")
        if ts.in_width != gs.layer_sizes[1]:
            raise ad.DimensionError(
                f"T input width {ts.in_width} must equal G's first block width {gs.layer_sizes[1]}")
        for i in self.tap_layers():
            if ts.layer_sizes[i] != gs.layer_sizes[i]:
                raise ad.DimensionError(
                    f"residual tap {i}: T width {ts.layer_sizes[i]} != G width {gs.layer_sizes[i]}")
        if not (self.c.spec.in_width == ts.out_width == gs.out_width):
            raise ad.DimensionError("C input, T output and G output widths must agree")
        if self.d.spec.in_width != gs.out_width or self.d.spec.out_width != 2:
            raise ad.DimensionError("D must map feature width to 2 domain logits")

    @property
    def n_layers(self) -> int:
        return self.g.spec.n_layers

    @property
    def n_classes(self) -> int:
        return self.c.spec.out_width

    def tap_layers(self) -> list:
        """1-based layer indices whose T output receives G's activation."""
        n = self.g.spec.n_layers
        return [i for i in range(1, n) if i % self.residual_stride == 0]

    def parameter_sets(self) -> tuple:
        return (self.g, self.t, self.c, self.d)

    def copy(self) -> "ArtnModel":
        return ArtnModel(self.g.copy(), self.t.copy(), self.c.copy(), self.d.copy(),
                         self.residual_stride)


def build_model(in_width: int, feature_widths: Sequence[int], n_classes: int,
                classifier_hidden: int = 100, domain_hidden: int = 100,
                batch_norm: bool = True, residual_stride: int = 1, seed: int = 0,
                transform_activation: str = "relu") -> ArtnModel:
    """G: ``in_width -> feature_widths``; T mirrors G from G's first block on.

    C and D are one hidden layer of the given width followed by the output
    layer. D has no batch norm because it sees single-domain batches.
    """
    widths = [int(w) for w in feature_widths]
    n = len(widths)
    g_spec = NetworkSpec((in_width, *widths), (batch_norm,) * n, ("relu",) * n)
    t_spec = NetworkSpec((widths[0], *widths), (batch_norm,) * n, (transform_activation,) * n)
    c_spec = NetworkSpec.mlp((widths[-1], classifier_hidden, n_classes), batch_norm=batch_norm)
    d_spec = NetworkSpec.mlp((widths[-1], domain_hidden, 2), batch_norm=False)
    seeds = np.random.SeedSequence(seed).generate_state(4)
    return ArtnModel(
        g=init_parameters(g_spec, int(seeds[0]), "theta_g"),
        t=init_parameters(t_spec, int(seeds[1]), "theta_t"),
        c=init_parameters(c_spec, int(seeds[2]), "theta_c"),
        d=init_parameters(d_spec, int(seeds[3]), "theta_d"),
        residual_stride=residual_stride,
    )


@dataclass
class ArtnHyper:
    lam: float = 1.0
    beta: float = 0.2
    grl_schedule: str = "dann"

    def __post_init__(self):
        for name in ("lam", "beta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.grl_schedule not in ("dann", "constant"):
            raise ValueError(f"unknown grl schedule {self.grl_schedule!r}")


class SourcePass(NamedTuple):
    f_s: Tensor
    t_out: Tensor
    g_layers: list
    t_layers: list


def source_pass(model: ArtnModel, x_s: Tensor, mode: str = "train",
                tape: Optional[ad.Tape] = None, g_layers: Optional[list] = None) -> SourcePass:
    """G and T on source inputs, returning every layer's output.

    ``g_layers`` lets a caller supply G's per-layer source activations that
    were computed elsewhere (the joint source/target pass of the losses).
    """
    if tape is not None:
        with tape:
            return source_pass(model, x_s, mode, g_layers=g_layers)
    if g_layers is None:
        _, g_layers = forward_mlp(model.g, x_s, mode)
    taps = set(model.tap_layers())
    model.t_evaluations += 1
    h = g_layers[0]
    t_layers = []
    n = model.n_layers
    for i in range(1, n + 1):
        h = apply_layer(model.t, i - 1, h, mode)
        if i in taps:
            h = ad.add(h, g_layers[i - 1])
        t_layers.append(h)
    return SourcePass(g_layers[-1], h, g_layers, t_layers)


def joint_features(model: ArtnModel, x_s: np.ndarray, x_t: np.ndarray, mode: str = "train"):
    """One G pass over the stacked source and target rows.

    Batch-norm statistics in G are then shared by both domains, matching the
    running moments used at evaluation. Returns the source rows of every G
    layer and the target rows of the last one.
    """
    ns = len(x_s)
    _, layers = forward_mlp(model.g, Tensor(np.concatenate([x_s, x_t])), mode)
    n = len(layers[-1].data)
    return [ad.rows(h, 0, ns) for h in layers], ad.rows(layers[-1], ns, n)


def forward_source(model: ArtnModel, x_s: Tensor, mode: str = "train",
                   tape: Optional[ad.Tape] = None):
    """Return ``(G(x_s), T(G(x_s)))``."""
    sp = source_pass(model, x_s, mode, tape)
    return sp.f_s, sp.t_out


def forward_target(model: ArtnModel, x_t: Tensor, mode: str = "train",
                   tape: Optional[ad.Tape] = None) -> Tensor:
    return forward_mlp(model.g, x_t, mode, tape)[0]


def gamma_schedule(p: float, schedule: str = "dann") -> float:
    """GRL weight ``2 / (1 + exp(-10 p)) - 1`` over training progress ``p``."""
    if schedule == "constant":
        return 1.0
    if schedule != "dann":
        raise ValueError(f"unknown grl schedule {schedule!r}")
    if not 0.0 <= p <= 1.0:
        warnings.warn(f"training progress {p} outside [0, 1]; clamping", RuntimeWarning, stacklevel=2)
        p = min(max(p, 0.0), 1.0)
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0


@dataclass
class LossOutput:
    """``objective`` is the taped scalar to differentiate; the rest are floats."""

    objective: Tensor
    total: float
    loss_c: float
    loss_s: float
    loss_t: float
    reg: float
    gamma: float
    class_logits: Optional[Tensor] = None

    @property
    def parts(self) -> dict:
        return {"L_c": self.loss_c, "L_s": self.loss_s, "L_t": self.loss_t, "r": self.reg}


def _check_batches(batch_s, batch_t, n_classes: int) -> None:
    if len(batch_s.x) == 0 or len(batch_t.x) == 0:
        raise ValueError("empty batch")
    if batch_s.y is None:
        raise ValueError("source batch needs class labels")
    y = np.asarray(batch_s.y)
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ValueError(f"class label out of range [0, {n_classes})")


def _domain_labels(n: int, domain: int) -> np.ndarray:
    return np.full(n, domain, dtype=np.int64)


def artn_loss(model: ArtnModel, hyper: ArtnHyper, batch_s, batch_t, p: float,
              tape: Optional[ad.Tape] = None, mode: str = "train") -> LossOutput:
    """Full objective on one source batch and one target batch.

    Reported ``total = L_c - lambda (L_s + L_t) + beta r``; the taped
    ``objective`` is ``L_c + L_s + L_t + beta r`` with the reversal layer
    supplying the sign and scale seen by G and T.
    """
    if tape is not None:
        with tape:
            return artn_loss(model, hyper, batch_s, batch_t, p, None, mode)
    _check_batches(batch_s, batch_t, model.n_classes)
    gamma = gamma_schedule(p, hyper.grl_schedule)
    coeff = hyper.lam * gamma
    g_layers, f_t = joint_features(model, batch_s.x, batch_t.x, mode)
    f_s, t_out = source_pass(model, None, mode, g_layers=g_layers)[:2]
    logits, _ = forward_mlp(model.c, t_out, mode)
    loss_c = ad.softmax_cross_entropy(logits, batch_s.y)
    dom_s, _ = forward_mlp(model.d, ad.grl(t_out, coeff), mode)
    loss_s = ad.softmax_cross_entropy(dom_s, _domain_labels(len(batch_s.x), SOURCE_DOMAIN))
    sim = ad.cosine_similarity_mean(f_s, t_out)
    reg = ad.scale(sim, -1.0)

    dom_t, _ = forward_mlp(model.d, ad.grl(f_t, coeff), mode)
    loss_t = ad.softmax_cross_entropy(dom_t, _domain_labels(len(batch_t.x), TARGET_DOMAIN))

    objective = ad.add(ad.add(loss_c, ad.add(loss_s, loss_t)), ad.scale(reg, hyper.beta))
    lc, ls, lt, r = loss_c.item(), loss_s.item(), loss_t.item(), reg.item()
    return LossOutput(objective, lc - hyper.lam * (ls + lt) + hyper.beta * r,
                      lc, ls, lt, r, gamma, logits)


def dann_loss(model: ArtnModel, hyper: ArtnHyper, batch_s, batch_t, p: float,
              tape: Optional[ad.Tape] = None, mode: str = "train") -> LossOutput:
    """Symmetric baseline: C and D both read G's features; T and r are unused."""
    if tape is not None:
        with tape:
            return dann_loss(model, hyper, batch_s, batch_t, p, None, mode)
    _check_batches(batch_s, batch_t, model.n_classes)
    gamma = gamma_schedule(p, hyper.grl_schedule)
    coeff = hyper.lam * gamma
    g_layers, f_t = joint_features(model, batch_s.x, batch_t.x, mode)
    f_s = g_layers[-1]
    logits, _ = forward_mlp(model.c, f_s, mode)
    loss_c = ad.softmax_cross_entropy(logits, batch_s.y)
    dom_s, _ = forward_mlp(model.d, ad.grl(f_s, coeff), mode)
    dom_t, _ = forward_mlp(model.d, ad.grl(f_t, coeff), mode)
    loss_s = ad.softmax_cross_entropy(dom_s, _domain_labels(len(batch_s.x), SOURCE_DOMAIN))
    loss_t = ad.softmax_cross_entropy(dom_t, _domain_labels(len(batch_t.x), TARGET_DOMAIN))
    objective = ad.add(loss_c, ad.add(loss_s, loss_t))
    lc, ls, lt = loss_c.item(), loss_s.item(), loss_t.item()
    return LossOutput(objective, lc - hyper.lam * (ls + lt), lc, ls, lt, 0.0, gamma, logits)


def source_only_loss(model: ArtnModel, batch_s, tape: Optional[ad.Tape] = None,
                     mode: str = "train") -> LossOutput:
    if tape is not None:
        with tape:
            return source_only_loss(model, batch_s, None, mode)
    if len(batch_s.x) == 0:
        raise ValueError("empty batch")
    f_s = forward_target(model, Tensor(batch_s.x), mode)
    logits, _ = forward_mlp(model.c, f_s, mode)
    loss_c = ad.softmax_cross_entropy(logits, batch_s.y)
    lc = loss_c.item()
    return LossOutput(loss_c, lc, lc, 0.0, 0.0, 0.0, 0.0, logits)


# ------------------------------------------------------------- diagnostics


def optimal_discriminator(ps, pt) -> np.ndarray:
    """Best possible P(source | z) for densities ``ps`` and ``pt``."""
    ps = np.asarray(ps, dtype=float)
    pt = np.asarray(pt, dtype=float)
    if np.any(ps < 0) or np.any(pt < 0):
        raise ValueError("densities must be non-negative")
    den = ps + pt
    if np.any(den == 0):
        raise ZeroDivisionError("optimal discriminator undefined where both densities vanish")
    return ps / den


def jsd_discrete(p, q, atol: float = 1e-9) -> float:
    """Jensen-Shannon divergence in nats between two histograms."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"histogram shapes differ: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("histograms must be non-negative")
    if abs(p.sum() - 1) > atol or abs(q.sum() - 1) > atol:
        raise ValueError("histograms must each sum to 1")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def proxy_a_distance(error: float) -> float:
    """``2 (1 - 2 error)`` floored at 0 for worse-than-chance classifiers."""
    if not 0.0 <= error <= 1.0:
        raise ValueError(f"domain classifier error must lie in [0, 1], got {error}")
    return max(0.0, 2.0 * (1.0 - 2.0 * error))
