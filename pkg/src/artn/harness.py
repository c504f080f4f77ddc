"""Training loop, evaluation, gradient-norm telemetry and the analysis sweeps."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DomainDataset, add_gaussian_noise, batch_iter, paired_batches
from .model import (ArtnHyper, ArtnModel, artn_loss, dann_loss, forward_source, forward_target,
                    proxy_a_distance, source_only_loss)
from .nn import NetworkSpec, SgdState, forward_mlp, init_parameters, sgd_step

log = logging.getLogger(__name__)

METHODS = ("artn", "dann", "source_only")
METRICS_HEADER = ("epoch", "step", "loss_c", "loss_s", "loss_t", "reg", "total",
                  "grad_norm", "gamma", "source_acc", "target_acc")
SEEDS = (1, 2, 3, 4, 5)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    lam: float = 1.0
    beta: float = 0.2
    grl_schedule: str = "dann"
    seed: int = 0
    eval_every: int = 0  # 0: evaluate at the end of every epoch
    method: str = "artn"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("learning_rate", "momentum", "lam", "beta"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")

    @property
    def hyper(self) -> ArtnHyper:
        return ArtnHyper(self.lam, self.beta, self.grl_schedule)


@dataclass
class MetricsRecord:
    epoch: int
    step: int
    loss_c: float
    loss_s: float
    loss_t: float
    reg: float
    total: float
    grad_norm: float
    gamma: float
    source_acc: Optional[float] = None
    target_acc: Optional[float] = None
    pad: Optional[float] = None

    def csv_row(self) -> list:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [str(self.epoch), str(self.step)] + [fmt(getattr(self, k)) for k in METRICS_HEADER[2:]]


@dataclass
class GradNormSummary:
    max: float
    min: float
    max_minus_min: float
    std: float


@dataclass
class TrainResult:
    model: ArtnModel
    records: list
    config: TrainConfig

    def __iter__(self):
        return iter((self.model, self.records))

    @property
    def final_target_acc(self) -> float:
        return next(r.target_acc for r in reversed(self.records) if r.target_acc is not None)

    @property
    def final_source_acc(self) -> float:
        return next(r.source_acc for r in reversed(self.records) if r.source_acc is not None)


def active_parameter_sets(model: ArtnModel, method: str) -> tuple:
    if method == "artn":
        return model.parameter_sets()
    if method == "dann":
        return (model.g, model.c, model.d)
    return (model.g, model.c)


def global_grad_norm(param_sets) -> float:
    sq = 0.0
    for ps in param_sets:
        for t in ps:
            sq += float(np.sum(np.square(t.grad, dtype=np.float64)))
    return math.sqrt(sq)


def _uses_batch_norm(model: ArtnModel) -> bool:
    return any(any(ps.spec.use_batch_norm) for ps in model.parameter_sets())


def predict(model: ArtnModel, x: np.ndarray, path: str = "target", method: str = "artn") -> np.ndarray:
    """Class predictions in eval mode; the target path never runs T."""
    xt = Tensor(x)
    if path == "target" or method != "artn":
        feats = forward_target(model, xt, "eval")
    elif path == "source":
        feats = forward_source(model, xt, "eval")[1]
    else:
        raise ValueError(f"unknown path {path!r}")
    logits, _ = forward_mlp(model.c, feats, "eval")
    return np.argmax(logits.data, axis=1)


def evaluate(model: ArtnModel, ds: DomainDataset, path: str = "target", method: str = "artn") -> float:
    """Accuracy of C(G(x)) on the target path, C(T(G(x))) on the source path."""
    if ds.class_labels is None:
        raise ValueError(f"{ds.name or 'dataset'} has no labels to evaluate against")
    return float(np.mean(predict(model, ds.features, path, method) == ds.class_labels))


def train(model: ArtnModel, config: TrainConfig, source: DomainDataset, target: DomainDataset,
          on_record: Optional[Callable[[MetricsRecord], None]] = None) -> TrainResult:
    """Minibatch version of the two-stage learning procedure.

    Each step computes the source-side terms, then the target-side term, runs
    one backward pass over their sum and applies one momentum-SGD update to
    each active parameter set. ``model`` is updated in place.
    """
    if source.class_labels is None:
        raise ValueError("source dataset needs class labels")
    hyper = config.hyper
    sets = active_parameter_sets(model, config.method)
    sgd = SgdState(config.learning_rate, config.momentum)
    bn = _uses_batch_norm(model)
    batches_per_epoch = [
        [pair for pair in paired_batches(source, target, config.batch_size, config.seed, e)
         if not bn or (len(pair[0].x) >= 2 and len(pair[1].x) >= 2)]
        for e in range(config.epochs)
    ]
    total_steps = sum(len(b) for b in batches_per_epoch)
    if total_steps == 0:
        raise ValueError("no usable batches; batch norm needs at least two rows per batch")
    records: list = []
    step = 0
    for epoch, pairs in enumerate(batches_per_epoch):
        for i, (bs, bt) in enumerate(pairs):
            p = step / total_steps
            tape = ad.Tape()
            try:
                if config.method == "artn":
                    out = artn_loss(model, hyper, bs, bt, p, tape)
                elif config.method == "dann":
                    out = dann_loss(model, hyper, bs, bt, p, tape)
                else:
                    out = source_only_loss(model, bs, tape)
            except ad.NonFiniteError as exc:
                raise DivergenceError(f"non-finite value at step {step} (epoch {epoch}): {exc}") from exc
            if not math.isfinite(out.total):
                raise DivergenceError(f"non-finite loss at step {step} (epoch {epoch})")
            wrt = [t for ps in sets for t in ps]
            tape.backward(out.objective, wrt=wrt)
            gnorm = global_grad_norm(sets)
            if not math.isfinite(gnorm):
                raise DivergenceError(f"non-finite gradient norm at step {step} (epoch {epoch})")
            for ps in sets:
                sgd_step(ps, None, sgd)
            step += 1
            rec = MetricsRecord(epoch, step, out.loss_c, out.loss_s, out.loss_t, out.reg,
                                out.total, gnorm, out.gamma)
            last = i == len(pairs) - 1
            if (config.eval_every and step % config.eval_every == 0) or (not config.eval_every and last) \
                    or step == total_steps:
                rec.source_acc = evaluate(model, source, "source", config.method)
                if target.class_labels is not None:
                    rec.target_acc = evaluate(model, target, "target", config.method)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
    return TrainResult(model, records, config)


def grad_norm_summary(records: Sequence[MetricsRecord]) -> GradNormSummary:
    if not records:
        raise ValueError("no records to summarise")
    g = np.array([r.grad_norm for r in records], dtype=float)
    return GradNormSummary(float(g.max()), float(g.min()), float(g.max() - g.min()), float(g.std()))


def write_metrics_csv(records: Sequence[MetricsRecord], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow(r.csv_row())


def metrics_csv_text(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    write_metrics_csv(records, buf)
    return buf.getvalue()


# ------------------------------------------------------------- PAD estimate


def estimate_pad(features_s: np.ndarray, features_t: np.ndarray, seed: int = 0,
                 hidden: int = 32, epochs: int = 30, learning_rate: float = 0.05) -> float:
    """Proxy A-distance from a small domain classifier's held-out error.

    Half of each domain trains the classifier, the other half measures error.
    """
    rng = np.random.default_rng(seed)
    xs = features_s[rng.permutation(len(features_s))]
    xt = features_t[rng.permutation(len(features_t))]
    hs, ht = len(xs) // 2, len(xt) // 2
    x_train = np.concatenate([xs[:hs], xt[:ht]])
    y_train = np.concatenate([np.zeros(hs, dtype=np.int64), np.ones(ht, dtype=np.int64)])
    x_test = np.concatenate([xs[hs:], xt[ht:]])
    y_test = np.concatenate([np.zeros(len(xs) - hs, dtype=np.int64), np.ones(len(xt) - ht, dtype=np.int64)])
    mu, sd = x_train.mean(axis=0), x_train.std(axis=0) + 1e-8
    clf = train_domain_classifier((x_train - mu) / sd, y_train, seed, hidden, epochs, learning_rate)
    logits, _ = forward_mlp(clf, Tensor((x_test - mu) / sd), "eval")
    err = float(np.mean(np.argmax(logits.data, axis=1) != y_test))
    return proxy_a_distance(err)


def train_domain_classifier(x: np.ndarray, y: np.ndarray, seed: int, hidden: int = 32,
                            epochs: int = 30, learning_rate: float = 0.05, batch_size: int = 64,
                            momentum: float = 0.9):
    """Plain two-class MLP trained with momentum SGD; returns its parameters."""
    spec = NetworkSpec.mlp((x.shape[1], hidden, 2))
    params = init_parameters(spec, seed, "theta_d")
    sgd = SgdState(learning_rate, momentum)
    ds = DomainDataset(x, y)
    for epoch in range(epochs):
        for b in batch_iter(ds, batch_size, seed, epoch):
            with ad.Tape() as tape:
                logits, _ = forward_mlp(params, Tensor(b.x), "train")
                loss = ad.softmax_cross_entropy(logits, b.y)
            tape.backward(loss, wrt=list(params))
            sgd_step(params, None, sgd)
    return params


# ------------------------------------------------------------------ sweeps


@dataclass
class Task:
    """Datasets plus a model factory; sweeps vary the config around it."""

    source: DomainDataset
    target: DomainDataset
    make_model: Callable[[int], ArtnModel]


def run_once(task: Task, config: TrainConfig, target: Optional[DomainDataset] = None) -> TrainResult:
    model = task.make_model(config.seed)
    return train(model, config, task.source, task.target if target is None else target)


def _cell(fn, *args):
    try:
        return fn(*args), "ok"
    except (DivergenceError, ValueError, FloatingPointError) as exc:
        log.warning("sweep cell failed: %s", exc)
        return None, f"error: {exc}"


def run_noise_sweep(task: Task, base: TrainConfig, stds: Sequence[float],
                    seeds: Sequence[int] = SEEDS, methods=("source_only", "dann", "artn")) -> list:
    """Per noise level: seed-mean target accuracy of each method and improvement over source-only.

    Improvement is ``(method - source_only) / source_only`` in percent, using
    same-seed pairs.
    """
    rows = []
    for std in stds:
        if std < 0:
            raise ValueError(f"noise std must be non-negative, got {std}")
        accs = {m: [] for m in methods}
        status = "ok"
        for seed in seeds:
            target = add_gaussian_noise(task.target, std, seed=10_000 + seed)
            for m in methods:
                cfg = replace(base, seed=seed, method=m)
                res, st = _cell(run_once, task, cfg, target)
                if res is None:
                    status = st
                    accs[m].append(float("nan"))
                else:
                    accs[m].append(res.final_target_acc)
        row = {"sigma": std, "status": status}
        so = np.array(accs.get("source_only", [np.nan]))
        for m in methods:
            a = np.array(accs[m])
            row[f"{m}_acc"] = _finite_mean(a)
            if m != "source_only" and "source_only" in accs:
                with np.errstate(divide="ignore", invalid="ignore"):
                    row[f"{m}_improvement_pct"] = _finite_mean((a - so) / so * 100.0)
        rows.append(row)
    return rows


def _finite_mean(values) -> float:
    """Mean over finite entries; NaN when a whole cell failed."""
    a = np.asarray(values, dtype=float)
    a = a[np.isfinite(a)]
    return float(a.mean()) if a.size else float("nan")


def run_lambda_sweep(task: Task, base: TrainConfig, lambdas: Sequence[float],
                     seeds: Sequence[int] = SEEDS) -> list:
    """Seed-mean target accuracy per trade-off value, plus the no-adaptation row at lambda=0."""
    rows = []
    baseline = []
    for seed in seeds:
        res, _ = _cell(run_once, task, replace(base, seed=seed, method="source_only"))
        baseline.append(res.final_target_acc if res else float("nan"))
    for lam in lambdas:
        if lam < 0:
            raise ValueError(f"lambda must be non-negative, got {lam}")
        accs, status = [], "ok"
        for seed in seeds:
            res, st = _cell(run_once, task, replace(base, seed=seed, lam=lam, method="artn"))
            if res is None:
                status = st
            accs.append(res.final_target_acc if res else float("nan"))
        rows.append({"lambda": lam, "target_acc": _finite_mean(accs),
                     "source_only_acc": _finite_mean(baseline), "status": status})
    return rows


@dataclass
class AblationResult:
    seeds: tuple
    acc_with: list
    acc_without: list
    grad_with: list
    grad_without: list
    steps_with: list = field(default_factory=list)
    steps_without: list = field(default_factory=list)

    @property
    def accuracy_delta(self) -> float:
        return float(np.mean(self.acc_with) - np.mean(self.acc_without))

    @property
    def mean_std_with(self) -> float:
        return float(np.mean([g.std for g in self.grad_with]))

    @property
    def mean_std_without(self) -> float:
        return float(np.mean([g.std for g in self.grad_without]))

    def rows(self) -> list:
        out = []
        for i, seed in enumerate(self.seeds):
            for label, acc, g in (("with_reg", self.acc_with, self.grad_with),
                                  ("without_reg", self.acc_without, self.grad_without)):
                out.append({"seed": seed, "variant": label, "target_acc": acc[i],
                            **{f"grad_{k}": v for k, v in asdict(g[i]).items()}, "status": "ok"})
        return out


def run_regularizer_ablation(task: Task, base: TrainConfig, seeds: Sequence[int] = SEEDS,
                             beta: Optional[float] = None) -> AblationResult:
    """Same-seed ARTN runs with the regularizer weight on and set to zero."""
    beta = base.beta if beta is None else beta
    if beta <= 0:
        raise ValueError("the ablation needs a positive regularizer weight")
    res = AblationResult(tuple(seeds), [], [], [], [])
    for seed in seeds:
        for b, accs, grads, steps in ((beta, res.acc_with, res.grad_with, res.steps_with),
                                      (0.0, res.acc_without, res.grad_without, res.steps_without)):
            r = run_once(task, replace(base, seed=seed, beta=b, method="artn"))
            accs.append(r.final_target_acc)
            grads.append(grad_norm_summary(r.records))
            steps.append(len(r.records))
    return res


def write_table_csv(rows: Sequence[dict], fh) -> None:
    if not rows:
        return
    w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def long_format(rows: Sequence[dict], id_keys: Sequence[str]) -> list:
    """Melt a wide table into ``(ids..., metric, value)`` rows for plotting."""
    out = []
    for r in rows:
        ids = {k: r[k] for k in id_keys}
        for k, v in r.items():
            if k in id_keys or k == "status" or not isinstance(v, (int, float)):
                continue
            out.append({**ids, "metric": k, "value": v})
    return out
