"""Expert networks, softmax and attentive gates, and the output-mixture model."""

from __future__ import annotations

import copy
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .rng import make_rng
from .tensor import DimensionError, Tensor

GATE_KINDS = ("softmax", "attentive", "none")


class UnsupportedModeError(ValueError):
    """Conditional computation requested on a model that cannot skip experts."""


# -- layers -----------------------------------------------------------------
def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _uniform(rng, n_in, (n_in, n_out))
        self.bias = _uniform(rng, n_in, (n_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y if self.bias is None else y + self.bias

    def parameters(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def clone(self) -> "Linear":
        new = copy.copy(self)
        new.weight = Tensor(self.weight.data.copy(), requires_grad=True)
        if self.bias is not None:
            new.bias = Tensor(self.bias.data.copy(), requires_grad=True)
        return new


class Conv2d:
    """Single-input, single-output channel valid convolution.

    With ``responsive=True`` the (weight, bias) draw is negated when
    ``bias + weight.sum() <= 0``. Inputs are non-negative pixels, so such a
    filter followed by a ReLU is silent on bright strokes and often on the
    whole image, and a silent single channel never gets a gradient. The
    negation keeps the uniform law, now conditioned on a positive response
    to a saturated patch, and consumes the same random draws.
    """

    def __init__(self, kernel_size: int, rng: np.random.Generator, responsive: bool = False):
        fan_in = kernel_size * kernel_size
        self.weight = _uniform(rng, fan_in, (1, 1, kernel_size, kernel_size))
        self.bias = _uniform(rng, fan_in, (1,))
        if responsive and self.bias.data[0] + self.weight.data.sum() <= 0:
            self.weight.data *= -1.0
            self.bias.data *= -1.0

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d_valid(x, self.weight, self.bias)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def clone(self) -> "Conv2d":
        new = copy.copy(self)
        new.weight = Tensor(self.weight.data.copy(), requires_grad=True)
        new.bias = Tensor(self.bias.data.copy(), requires_grad=True)
        return new


def _pooled_size(image_size: Sequence[int], kernel_size: int) -> int:
    h, w = image_size
    return ((h - kernel_size + 1) // 2) * ((w - kernel_size + 1) // 2)


class _Net:
    layer_names: tuple[str, ...] = ()

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name in self.layer_names:
            for pname, p in getattr(self, name).parameters().items():
                out[f"{name}.{pname}"] = p
        return out

    def clone(self):
        new = copy.copy(self)
        for name in self.layer_names:
            setattr(new, name, getattr(self, name).clone())
        return new

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != tuple(self.image_size):
            raise DimensionError(
                f"expected N x 1 x {self.image_size[0]} x {self.image_size[1]} input, got {x.shape}"
            )

    def _trunk(self, x: Tensor) -> Tensor:
        # conv -> relu -> pool -> flatten -> fc1 -> relu -> fc2 (pre-activation)
        self._check_input(x)
        h = T.maxpool2(T.relu(self.conv(x)))
        h = h.reshape(h.shape[0], -1)
        return self.fc2(T.relu(self.fc1(h)))


# -- networks -----------------------------------------------------------------
class ExpertNet(_Net):
    """conv(1->1, k x k) -> pool -> fc1 -> fc2 -> out -> softmax.

    ``output_relu`` inserts a ReLU between the output layer and the softmax.
    """

    layer_names = ("conv", "fc1", "fc2", "out")

    def __init__(self, n_classes: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (5, 32), kernel_size: int = 3,
                 image_size: Sequence[int] = (28, 28), output_relu: bool = False,
                 responsive_conv: bool = False):
        self.n_classes = n_classes
        self.output_relu = output_relu
        self.image_size = tuple(image_size)
        self.hidden_width = hidden[1]
        self.conv = Conv2d(kernel_size, rng, responsive_conv)
        self.fc1 = Linear(_pooled_size(image_size, kernel_size), hidden[0], rng)
        self.fc2 = Linear(hidden[0], hidden[1], rng)
        self.out = Linear(hidden[1], n_classes, rng)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (hidden, class probabilities)."""
        hidden = T.relu(self._trunk(x))
        logits = self.out(hidden)
        if self.output_relu:
            logits = T.relu(logits)
        return hidden, T.row_softmax(logits)


class SoftmaxGate(_Net):
    """Same trunk shape as an expert, ending in M softmax outputs."""

    layer_names = ("conv", "fc1", "fc2", "out")

    def __init__(self, n_experts: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (128, 32), kernel_size: int = 3,
                 image_size: Sequence[int] = (28, 28), output_relu: bool = False,
                 responsive_conv: bool = False):
        self.n_experts = n_experts
        self.output_relu = output_relu
        self.image_size = tuple(image_size)
        self.conv = Conv2d(kernel_size, rng, responsive_conv)
        self.fc1 = Linear(_pooled_size(image_size, kernel_size), hidden[0], rng)
        self.fc2 = Linear(hidden[0], hidden[1], rng)
        self.out = Linear(hidden[1], n_experts, rng)

    def forward(self, x: Tensor) -> Tensor:
        logits = self.out(T.relu(self._trunk(x)))
        if self.output_relu:
            logits = T.relu(logits)
        return T.row_softmax(logits)


class AttentiveGate(_Net):
    """Gate trunk whose linear fc2 output is the attention query source.

    There is no output layer: gate probabilities come from
    :func:`attentive_scores` against the experts' hidden outputs.
    """

    layer_names = ("conv", "fc1", "fc2", "w_q", "w_k")

    def __init__(self, rng: np.random.Generator, hidden: Sequence[int] = (128, 32),
                 kernel_size: int = 3, image_size: Sequence[int] = (28, 28),
                 responsive_conv: bool = False):
        self.image_size = tuple(image_size)
        h = hidden[1]
        self.conv = Conv2d(kernel_size, rng, responsive_conv)
        self.fc1 = Linear(_pooled_size(image_size, kernel_size), hidden[0], rng)
        self.fc2 = Linear(hidden[0], h, rng)
        self.w_q = Linear(h, h, rng, bias=False)
        self.w_k = Linear(h, h, rng, bias=False)

    @property
    def width(self) -> int:
        return self.fc2.weight.shape[1]

    def query_source(self, x: Tensor) -> Tensor:
        return self._trunk(x)

    def forward(self, x: Tensor, expert_hidden: Sequence[Tensor]) -> Tensor:
        return attentive_scores(self.query_source(x), expert_hidden,
                                self.w_q.weight, self.w_k.weight)


def attentive_scores(g: Tensor, expert_hidden: Sequence[Tensor], w_q: Tensor, w_k: Tensor) -> Tensor:
    """softmax((G W_q)(E_i W_k)^T / sqrt(h)) per sample, over the M experts."""
    h = g.shape[1]
    if w_q.shape != (h, h) or w_k.shape != (h, h):
        raise DimensionError(f"projections must be {h} x {h}, got {w_q.shape} and {w_k.shape}")
    for i, e in enumerate(expert_hidden):
        if e.shape != g.shape:
            raise DimensionError(f"expert {i} hidden shape {e.shape} != gate hidden shape {g.shape}")
    q = g @ w_q
    logits = T.stack([(q * (e @ w_k)).sum(axis=1) for e in expert_hidden], axis=1)
    return T.row_softmax(logits * (1.0 / math.sqrt(h)))


# -- the mixture model --------------------------------------------------------
@dataclass
class Architecture:
    image_size: tuple[int, int] = (28, 28)
    expert_hidden: tuple[int, int] = (5, 32)
    gate_hidden: tuple[int, int] = (128, 32)
    expert_kernel: int = 3
    gate_kernel: int = 3
    expert_output_relu: bool = False
    gate_output_relu: bool = False
    responsive_conv: bool = False

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.expert_hidden = tuple(self.expert_hidden)
        self.gate_hidden = tuple(self.gate_hidden)


@dataclass
class MoEModel:
    """M experts combined by a gate; ``gate=None`` means a single model (M = 1)."""

    experts: list[ExpertNet]
    gate: SoftmaxGate | AttentiveGate | None
    arch: Architecture = field(default_factory=Architecture)
    frozen: set[str] = field(default_factory=set)

    def __post_init__(self):
        if not self.experts:
            raise ValueError("a mixture needs at least one expert")
        if self.gate is None and len(self.experts) != 1:
            raise ValueError("a gate-less model must have exactly one expert")
        if len({e.n_classes for e in self.experts}) != 1:
            raise ValueError("all experts must share the output dimension")
        if isinstance(self.gate, SoftmaxGate) and self.gate.n_experts != len(self.experts):
            raise ValueError(f"gate has {self.gate.n_experts} outputs for {len(self.experts)} experts")
        if isinstance(self.gate, AttentiveGate):
            for e in self.experts:
                if e.hidden_width != self.gate.width:
                    raise DimensionError(
                        f"expert hidden width {e.hidden_width} != attentive gate width {self.gate.width}"
                    )

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def n_classes(self) -> int:
        return self.experts[0].n_classes

    @property
    def gate_kind(self) -> str:
        if self.gate is None:
            return "none"
        return "attentive" if isinstance(self.gate, AttentiveGate) else "softmax"

    def components(self) -> dict[str, dict[str, Tensor]]:
        out = {f"expert.{i}": e.parameters() for i, e in enumerate(self.experts)}
        if self.gate is not None:
            out["gate"] = self.gate.parameters()
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{comp}.{name}": p
                for comp, params in self.components().items()
                for name, p in params.items()}

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {f"{comp}.{name}": p
                for comp, params in self.components().items() if comp not in self.frozen
                for name, p in params.items()}

    def clone(self) -> "MoEModel":
        return MoEModel([e.clone() for e in self.experts],
                        None if self.gate is None else self.gate.clone(),
                        copy.deepcopy(self.arch), set(self.frozen))


def build_model(n_experts: int, n_classes: int, gate: str = "softmax", seed: int = 0,
                arch: Architecture | None = None, stream: str = "init") -> MoEModel:
    """Freshly initialised model; parameters drawn from the ``(seed, stream)`` generator."""
    arch = arch or Architecture()
    if gate not in GATE_KINDS:
        raise ValueError(f"gate must be one of {GATE_KINDS}, got {gate!r}")
    if n_experts < 1:
        raise ValueError("n_experts must be >= 1")
    rng = make_rng(seed, stream)
    experts = [ExpertNet(n_classes, rng, arch.expert_hidden, arch.expert_kernel, arch.image_size,
                         arch.expert_output_relu, arch.responsive_conv)
               for _ in range(n_experts)]
    if gate == "softmax":
        g = SoftmaxGate(n_experts, rng, arch.gate_hidden, arch.gate_kernel, arch.image_size,
                        arch.gate_output_relu, arch.responsive_conv)
    elif gate == "attentive":
        g = AttentiveGate(rng, arch.gate_hidden, arch.gate_kernel, arch.image_size, arch.responsive_conv)
    else:
        g = None
    return MoEModel(experts, g, arch)


def fresh_experts(model: MoEModel, seed: int, stream: str = "fresh-experts") -> list[ExpertNet]:
    rng = make_rng(seed, stream)
    a = model.arch
    return [ExpertNet(model.n_classes, rng, a.expert_hidden, a.expert_kernel, a.image_size,
                      a.expert_output_relu, a.responsive_conv)
            for _ in range(model.n_experts)]


# -- freezing -------------------------------------------------------------------
def _resolve(model: MoEModel, components: Iterable[str]) -> set[str]:
    known = set(model.components())
    out = set()
    for c in components:
        if c == "experts":
            out |= {k for k in known if k.startswith("expert.")}
        elif c in known:
            out.add(c)
        else:
            raise KeyError(f"unknown component {c!r}; known: {sorted(known | {'experts'})}")
    return out


def freeze(model: MoEModel, components: Iterable[str]) -> None:
    """Stop updating the named components ('gate', 'experts', 'expert.<i>')."""
    names = _resolve(model, [components] if isinstance(components, str) else components)
    model.frozen |= names
    parts = model.components()
    for c in names:
        for p in parts[c].values():
            p.requires_grad = False
            p.grad = None


def unfreeze(model: MoEModel, components: Iterable[str]) -> None:
    names = _resolve(model, [components] if isinstance(components, str) else components)
    model.frozen -= names
    parts = model.components()
    for c in names:
        for p in parts[c].values():
            p.requires_grad = True


# -- forward passes -------------------------------------------------------------
def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def expert_forward(expert: ExpertNet, x) -> tuple[Tensor, Tensor]:
    return expert.forward(_as_input(x))


def softmax_gate_forward(gate: SoftmaxGate, x) -> Tensor:
    return gate.forward(_as_input(x))


def combine(p: Tensor, expert_probs: Sequence[Tensor]) -> Tensor:
    """sum_i p[:, i] * o_i, accumulated in fixed expert order."""
    y = None
    for i, o in enumerate(expert_probs):
        term = p[:, i:i + 1] * o
        y = term if y is None else y + term
    return y


def mixture_forward(model: MoEModel, x) -> tuple[Tensor, Tensor, list[Tensor]]:
    """Return (mixture prediction, gate probabilities, per-expert class probabilities)."""
    x = _as_input(x)
    outs = [e.forward(x) for e in model.experts]
    hidden = [h for h, _ in outs]
    probs = [o for _, o in outs]
    if model.gate is None:
        p = Tensor(np.ones((x.shape[0], 1)))
    elif isinstance(model.gate, AttentiveGate):
        p = model.gate.forward(x, hidden)
    else:
        p = model.gate.forward(x)
    return combine(p, probs), p, probs


def gate_probabilities(model: MoEModel, x) -> Tensor:
    if isinstance(model.gate, SoftmaxGate):
        return model.gate.forward(_as_input(x))
    return mixture_forward(model, x)[1]


def conditional_forward(model: MoEModel, x, top_k: int | None = None,
                        threshold: float | None = None) -> tuple[np.ndarray, int]:
    """Mixture prediction evaluating only the experts each sample selects.

    Exactly one of ``top_k`` (keep the k largest gate weights; ties go to the
    lower expert index) or ``threshold`` (keep weights >= threshold, falling
    back to the argmax expert when none qualify) must be given. Kept weights
    are renormalised to sum to one. Returns the prediction and the number of
    (sample, expert) evaluations performed.
    """
    if model.gate_kind != "softmax":
        raise UnsupportedModeError(
            f"conditional computation needs a softmax gate, model has {model.gate_kind!r}"
        )
    if (top_k is None) == (threshold is None):
        raise ValueError("pass exactly one of top_k or threshold")
    m = model.n_experts
    if top_k is not None and not 1 <= top_k <= m:
        raise ValueError(f"top_k must be in [1, {m}], got {top_k}")
    if threshold is not None and not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    x = _as_input(x)
    with T.no_grad():
        p = model.gate.forward(x).data
        n = p.shape[0]
        keep = np.zeros_like(p, dtype=bool)
        if top_k is not None:
            order = np.argsort(-p, axis=1, kind="stable")[:, :top_k]
            np.put_along_axis(keep, order, True, axis=1)
        else:
            keep = p >= threshold
            none = ~keep.any(axis=1)
            keep[none, np.argmax(p[none], axis=1)] = True
        w = np.where(keep, p, 0.0)
        w = w / w.sum(axis=1, keepdims=True)
        y = np.zeros((n, model.n_classes))
        evals = 0
        for i, expert in enumerate(model.experts):
            rows = np.flatnonzero(keep[:, i])
            if rows.size == 0:
                continue
            _, probs = expert.forward(Tensor(x.data[rows]))
            y[rows] += w[rows, i:i + 1] * probs.data
            evals += rows.size
    return y, evals


def mixture_nll(y_hat: Tensor, labels) -> Tensor:
    """Mean of -ln(max(y_hat[n, label_n], 1e-12)) over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or len(labels) != y_hat.shape[0]:
        raise DimensionError(f"{len(labels)} labels for predictions of shape {y_hat.shape}")
    if labels.min() < 0 or labels.max() >= y_hat.shape[1]:
        raise ValueError(f"labels must lie in [0, {y_hat.shape[1]})")
    picked = y_hat[np.arange(len(labels)), labels]
    return -T.log(T.clamp_min(picked, 1e-12)).mean()


# -- checkpoints ------------------------------------------------------------------
# An .npz archive: one little-endian float64 array per named parameter, plus a
# "__topology__" uint8 array holding UTF-8 JSON with n_experts, n_classes,
# gate kind, hidden width, architecture and frozen components.
TOPOLOGY_KEY = "__topology__"


def save_checkpoint(model: MoEModel, path) -> None:
    topo = {
        "format": "moe_lab.checkpoint/1",
        "n_experts": model.n_experts,
        "n_classes": model.n_classes,
        "gate": model.gate_kind,
        "h": model.experts[0].hidden_width,
        "arch": asdict(model.arch),
        "frozen": sorted(model.frozen),
    }
    arrays = {name: np.ascontiguousarray(p.data, dtype="<f8")
              for name, p in model.named_parameters().items()}
    arrays[TOPOLOGY_KEY] = np.frombuffer(json.dumps(topo, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> MoEModel:
    with np.load(path, allow_pickle=False) as z:
        topo = json.loads(bytes(z[TOPOLOGY_KEY]).decode())
        arch = Architecture(**topo["arch"])
        model = build_model(topo["n_experts"], topo["n_classes"], topo["gate"], 0, arch)
        params = model.named_parameters()
        missing = set(params) - set(z.files)
        if missing:
            raise ValueError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, p in params.items():
            arr = z[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr
    if topo["frozen"]:
        freeze(model, topo["frozen"])
    return model
