"""Adam, the end-to-end training loop, expert pre-training and distillation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import metrics
from . import tensor as T
from .datasets import ClassSplit, Dataset, batches, filter_by_group
from .models import (
    AttentiveGate,
    MoEModel,
    SoftmaxGate,
    build_model,
    fresh_experts,
    freeze,
    mixture_forward,
    mixture_nll,
)
from .regularizers import RegConfig, regularizer, total_loss
from .rng import make_rng
from .tensor import Tensor

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.value = value


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    reg: RegConfig = field(default_factory=RegConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_chunk: int = 1000

    def __post_init__(self):
        if isinstance(self.reg, dict):
            self.reg = RegConfig(**self.reg)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.reg.kind == "similarity" and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 with the similarity regulariser")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)


# -- Adam -------------------------------------------------------------------
@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState, frozen: Sequence[str] = ()) -> None:
    """One bias-corrected Adam update in place; frozen names and missing grads are skipped."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if name in frozen or g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- reports ----------------------------------------------------------------
@dataclass
class RunReport:
    regime: str
    seed: int
    config: dict
    final_train_loss: float
    train_error: float
    test_error: float | None = None
    h_s: float | None = None
    h_u: float | None = None
    i_ey: float | None = None
    selection_table: dict | None = None
    loss_curve: list[float] = field(default_factory=list)
    n_train: int = 0
    n_test: int = 0
    wall_time: float = 0.0
    test_error_std: float | None = None
    stages: dict[str, dict] = field(default_factory=dict)

    NUMERIC_FIELDS = ("final_train_loss", "train_error", "test_error", "h_s", "h_u", "i_ey",
                      "selection_table", "loss_curve")

    def table(self) -> metrics.SelectionTable | None:
        if self.selection_table is None:
            return None
        return metrics.SelectionTable.from_dict(self.selection_table)

    def numerics(self) -> dict:
        """Everything except timing: two reruns with one seed must agree exactly."""
        out = {k: getattr(self, k) for k in self.NUMERIC_FIELDS}
        out["stages"] = {k: {f: v.get(f) for f in self.NUMERIC_FIELDS} for k, v in self.stages.items()}
        return out

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        known = {f for f in cls.__dataclass_fields__}
        missing = {"regime", "seed", "config", "final_train_loss", "train_error"} - set(d)
        if missing:
            raise ValueError(f"report is missing fields {sorted(missing)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))


# -- evaluation ---------------------------------------------------------------
def predict(model: MoEModel, images: np.ndarray, chunk: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Mixture predictions and gate probabilities without recording a graph."""
    ys, ps = [], []
    with T.no_grad():
        for start in range(0, len(images), chunk):
            y, p, _ = mixture_forward(model, images[start:start + chunk])
            ys.append(y.data)
            ps.append(p.data)
    return np.concatenate(ys), np.concatenate(ps)


def nll(y_hat: np.ndarray, labels: np.ndarray) -> float:
    picked = y_hat[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, 1e-12))))


def evaluate(model: MoEModel, ds: Dataset, chunk: int = 1000) -> metrics.MetricsReport:
    y, p = predict(model, ds.images, chunk)
    return metrics.evaluate_routing(y, p, ds.labels, ds.n_classes, ds.class_names,
                                    with_routing=model.gate is not None)


# -- training -----------------------------------------------------------------
def _config_echo(model: MoEModel, cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d.update(n_experts=model.n_experts, gate=model.gate_kind, frozen=sorted(model.frozen),
             arch=asdict(model.arch))
    return json.loads(json.dumps(d))  # tuples -> lists, so the echo survives a JSON round trip


def train(model: MoEModel, train_ds: Dataset, cfg: TrainConfig, test_ds: Dataset | None = None,
          regime: str = "") -> RunReport:
    """Train all unfrozen parameters end to end and report train/test metrics."""
    params = model.trainable_parameters()
    if not params:
        raise ValueError("every component is frozen; nothing to train")
    state = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    use_reg = model.gate is not None and "gate" not in model.frozen
    started = time.perf_counter()
    curve = []
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for b, (xb, yb) in enumerate(batches(train_ds, cfg.batch_size, cfg.seed, epoch)):
            y_hat, p, _ = mixture_forward(model, xb)
            task = mixture_nll(y_hat, yb)
            reg = regularizer(cfg.reg, xb, p) if use_reg else None
            loss = total_loss(task, reg)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, b, value)
            T.backward(loss)
            adam_step(params, {n: q.grad for n, q in params.items()}, state)
            for q in params.values():
                q.grad = None
            total += task.item() * len(yb)
            seen += len(yb)
        curve.append(total / seen)
        log.debug("%s epoch %d: train nll %.5f", regime, epoch + 1, curve[-1])
    y_tr, _ = predict(model, train_ds.images, cfg.eval_chunk)
    report = RunReport(
        regime=regime,
        seed=cfg.seed,
        config=_config_echo(model, cfg),
        final_train_loss=nll(y_tr, train_ds.labels),
        train_error=metrics.classification_error(y_tr, train_ds.labels),
        loss_curve=curve,
        n_train=len(train_ds),
    )
    if test_ds is not None:
        m = evaluate(model, test_ds, cfg.eval_chunk)
        report.test_error = m.error
        report.h_s, report.h_u, report.i_ey = m.h_s, m.h_u, m.i_ey
        report.selection_table = None if m.table is None else m.table.to_dict()
        report.n_test = len(test_ds)
    report.wall_time = time.perf_counter() - started
    return report


def pretrain_experts(experts, ds: Dataset, split: ClassSplit | Sequence[Sequence[int]],
                     cfg: TrainConfig) -> list[RunReport]:
    """Train expert i alone on the samples whose labels are in split[i].

    The loss is cross-entropy over all K classes, labels unchanged, so the
    experts drop straight back into a K-way mixture.
    """
    split = split if isinstance(split, ClassSplit) else ClassSplit(split)
    if len(split) != len(experts):
        raise ValueError(f"{len(split)} class groups for {len(experts)} experts")
    cfg = cfg.replace(reg=RegConfig())
    reports = []
    for i, (expert, group) in enumerate(zip(experts, split)):
        solo = MoEModel([expert], None)
        sub = filter_by_group(ds, group)
        reports.append(train(solo, sub, cfg.replace(seed=cfg.seed * 1000 + i),
                             regime=f"pretrain expert {i} on {list(group)}"))
    return reports


def replace_experts(model: MoEModel, experts) -> None:
    model.experts = list(experts)
    model.frozen = {c for c in model.frozen if not c.startswith("expert.")}


@dataclass
class Fig3Result:
    report_a: RunReport
    report_b: RunReport

    def __iter__(self):
        return iter((self.report_a, self.report_b))


def run_fig3_protocol(train_ds: Dataset, split: ClassSplit | Sequence[Sequence[int]],
                      cfg: TrainConfig, test_ds: Dataset | None = None, arch=None) -> Fig3Result:
    """Compare a gate learned end to end with one learned over pre-trained experts.

    Branch (a): train a mixture end to end, freeze its gate, train fresh
    experts under it. Branch (b): pre-train expert i on split[i], freeze the
    experts, train a gate, freeze that gate, train fresh experts under it.
    Both branches start from the same initial gate and the same fresh experts.
    Intermediate stage reports are kept in ``report.stages``.
    """
    split = split if isinstance(split, ClassSplit) else ClassSplit(split)
    m, k = len(split), train_ds.n_classes

    a = build_model(m, k, "softmax", cfg.seed, arch)
    stage_a = train(a, train_ds, cfg, test_ds, regime="protocol (a) end-to-end")
    freeze(a, "gate")
    replace_experts(a, fresh_experts(a, cfg.seed))
    report_a = train(a, train_ds, cfg, test_ds, regime="protocol (a) fresh experts, frozen gate")
    report_a.stages = {"end_to_end": stage_a.to_dict()}

    b = build_model(m, k, "softmax", cfg.seed, arch)
    pre = pretrain_experts(b.experts, train_ds, split, cfg)
    freeze(b, "experts")
    stage_b = train(b, train_ds, cfg, test_ds, regime="protocol (b) gate over pre-trained experts")
    freeze(b, "gate")
    replace_experts(b, fresh_experts(b, cfg.seed))
    report_b = train(b, train_ds, cfg, test_ds, regime="protocol (b) fresh experts, frozen gate")
    report_b.stages = {f"pretrain_{i}": r.to_dict() for i, r in enumerate(pre)}
    report_b.stages["gate"] = stage_b.to_dict()
    return Fig3Result(report_a, report_b)


def distilled_model(source: MoEModel, seed: int = 0) -> MoEModel:
    """Softmax-gated copy of an attentive model, before gate training.

    Experts are copied and frozen. The new gate's conv/fc1/fc2 start from the
    attentive gate's layers; its output layer is freshly initialised because
    the attentive gate has none.
    """
    if not isinstance(source.gate, AttentiveGate):
        raise ValueError(f"distillation needs an attentive-gated source, got {source.gate_kind!r}")
    a = source.arch
    gate = SoftmaxGate(source.n_experts, make_rng(seed, "distill-gate"),
                       a.gate_hidden, a.gate_kernel, a.image_size, a.gate_output_relu,
                       a.responsive_conv)
    gate.conv = source.gate.conv.clone()
    gate.fc1 = source.gate.fc1.clone()
    gate.fc2 = source.gate.fc2.clone()
    model = MoEModel([e.clone() for e in source.experts], gate, source.arch)
    freeze(model, "experts")
    return model


def distill(source: MoEModel, ds: Dataset, cfg: TrainConfig,
            test_ds: Dataset | None = None) -> tuple[MoEModel, RunReport]:
    """Transplant an attentive model into a softmax-gated mixture and train its gate."""
    model = distilled_model(source, cfg.seed)
    report = train(model, ds, cfg.replace(reg=RegConfig()), test_ds, regime="distilled")
    return model, report
