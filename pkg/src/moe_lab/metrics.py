"""Routing diagnostics in bits: gating entropy, utilisation entropy, I(E;Y)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


def _check_distribution(p: np.ndarray, tol: float = 1e-6) -> None:
    if np.any(p < 0):
        raise ValueError("probabilities must be nonnegative")
    s = p.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > tol):
        raise ValueError(f"probabilities must sum to 1 (+/- {tol}), got sums up to {s.max()!r}")


def _plogp(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p, dtype=np.float64)
    nz = p > 0
    out[nz] = p[nz] * np.log2(p[nz])
    return out


def entropy(p) -> float:
    """Shannon entropy of a probability vector in bits, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    _check_distribution(p)
    return float(0.0 - _plogp(p).sum())  # never -0.0


def _as_gate_matrix(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"gate probabilities must be N x M, got shape {p.shape}")
    _check_distribution(p)
    return p


def h_s(p) -> float:
    """Mean per-sample gate entropy (low = sparse gating)."""
    p = _as_gate_matrix(p)
    return float(np.mean(-_plogp(p).sum(axis=1)))


def h_u(p) -> float:
    """Entropy of the mean gate vector (high = even expert utilisation)."""
    p = _as_gate_matrix(p)
    return entropy(p.mean(axis=0))


@dataclass
class SelectionTable:
    """M x K counts of argmax-routed samples per (expert, class)."""

    counts: np.ndarray
    expert_names: list[str] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or np.any(self.counts < 0):
            raise ValueError("counts must be a nonnegative M x K integer matrix")
        m, k = self.counts.shape
        if not self.expert_names:
            self.expert_names = [f"expert {i}" for i in range(m)]
        if not self.class_names:
            self.class_names = [str(j) for j in range(k)]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> dict:
        return {"experts": list(self.expert_names), "classes": list(self.class_names),
                "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionTable":
        return cls(np.array(d["counts"], dtype=np.int64), list(d["experts"]), list(d["classes"]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["expert", *self.class_names])
        for name, row in zip(self.expert_names, self.counts):
            w.writerow([name, *map(int, row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SelectionTable":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        return cls(np.array([[int(c) for c in r[1:]] for r in body], dtype=np.int64),
                   [r[0] for r in body], header[1:])

    def to_pgm(self, cell: int = 16) -> bytes:
        """Binary greyscale (P5) heatmap: count / max count mapped to 0..255, darker = more."""
        m, k = self.counts.shape
        peak = self.counts.max()
        level = np.zeros((m, k)) if peak == 0 else self.counts / peak
        gray = (255 - np.rint(level * 255)).astype(np.uint8)
        img = np.kron(gray, np.ones((cell, cell), dtype=np.uint8))
        return f"P5\n{k * cell} {m * cell}\n255\n".encode() + img.tobytes()

    def save(self, csv_path, pgm_path=None) -> None:
        Path(csv_path).write_text(self.to_csv())
        if pgm_path is not None:
            Path(pgm_path).write_bytes(self.to_pgm())


def selection_table(p, labels, n_classes: int, class_names: Sequence[str] | None = None) -> SelectionTable:
    """Count samples by (argmax expert, label); argmax ties go to the lowest index."""
    p = np.asarray(p, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or len(labels) != p.shape[0]:
        raise ValueError(f"{len(labels)} labels for gate matrix of shape {p.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    m = p.shape[1]
    chosen = np.argmax(p, axis=1)
    counts = np.zeros((m, n_classes), dtype=np.int64)
    np.add.at(counts, (chosen, labels), 1)
    return SelectionTable(counts, class_names=list(class_names) if class_names else [])


def mutual_information(table: SelectionTable | np.ndarray) -> float:
    """I(E;Y) = H(E) + H(Y) - H(E,Y) in bits from a count table."""
    counts = table.counts if isinstance(table, SelectionTable) else np.asarray(table)
    n = counts.sum()
    if n <= 0:
        raise ValueError("selection table is empty")
    joint = counts / n
    h_e = -_plogp(joint.sum(axis=1)).sum()
    h_y = -_plogp(joint.sum(axis=0)).sum()
    h_ey = -_plogp(joint).sum()
    mi = float(h_e + h_y - h_ey)
    if -1e-12 < mi < 0:
        mi = 0.0
    return mi


def classification_error(y_hat, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) differs from the label."""
    y_hat = np.asarray(y_hat)
    labels = np.asarray(labels)
    if y_hat.ndim != 2 or len(labels) != y_hat.shape[0]:
        raise ValueError(f"{len(labels)} labels for predictions of shape {y_hat.shape}")
    return float(np.mean(np.argmax(y_hat, axis=1) != labels))


def active_experts(table: SelectionTable, threshold: float) -> int:
    """Number of experts receiving at least ``threshold`` of all routed samples."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    share = table.counts.sum(axis=1) / max(table.total, 1)
    return int(np.sum(share >= threshold))


@dataclass
class MetricsReport:
    error: float
    h_s: float | None
    h_u: float | None
    i_ey: float | None
    table: SelectionTable | None
    n: int


def evaluate_routing(y_hat, p, labels, n_classes: int, class_names=None,
                     with_routing: bool = True) -> MetricsReport:
    err = classification_error(y_hat, labels)
    if not with_routing:
        return MetricsReport(err, None, None, None, None, len(labels))
    table = selection_table(p, labels, n_classes, class_names)
    return MetricsReport(err, h_s(p), h_u(p), mutual_information(table), table, len(labels))
