"""AUC / AUPRC / Brier, per-pattern reports, and probes of the missingness embedding."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .kernel import AdamW, Tape, Tensor, ops


class UndefinedMetric(ValueError):
    """The metric is undefined for these labels (e.g. a single class)."""


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    return scores, labels


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # boundaries of runs of equal values
    starts = np.r_[0, np.flatnonzero(np.diff(xs)) + 1]
    ends = np.r_[starts[1:], len(xs)]
    avg = (starts + ends + 1) / 2.0  # 1-based average rank of each run
    ranks = np.empty(len(x))
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: (concordant pairs + 0.5 * tied pairs) / (P * N)."""
    scores, labels = _check(scores, labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC undefined: labels contain a single class")
    ranks = _average_ranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision over positives, ranking by descending score.

    Tied scores keep their input order (stable sort), so results are
    deterministic but order-dependent within ties.
    """
    scores, labels = _check(scores, labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise UndefinedMetric("AUPRC undefined: no positive labels")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] == 1
    precision_at = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision_at[hits].sum() / n_pos)


def brier(probs, labels) -> float:
    probs, labels = _check(probs, labels)
    if np.any(probs < 0) or np.any(probs > 1):
        raise ValueError("Brier score needs probabilities in [0, 1]")
    return float(np.mean((probs - labels) ** 2))


# ------------------------------------------------------------------ reports

@dataclass
class TaskMetrics:
    auc: float | None
    auprc: float | None
    brier: float
    support: int
    notes: list[str] = field(default_factory=list)


def task_metrics(probs, labels) -> TaskMetrics:
    notes = []
    try:
        a = auc(probs, labels)
    except UndefinedMetric as exc:
        a = None
        notes.append(str(exc))
    try:
        ap = auprc(probs, labels)
    except UndefinedMetric as exc:
        ap = None
        notes.append(str(exc))
    return TaskMetrics(a, ap, brier(probs, labels), int(len(labels)), notes)


def pattern_strata(patterns, floor: int = 30) -> np.ndarray:
    """Pattern labels with rare patterns (support < floor) pooled into 'other'."""
    patterns = np.asarray(patterns).astype(str)
    uniq, counts = np.unique(patterns, return_counts=True)
    rare = set(uniq[counts < floor])
    return np.array([("other" if p in rare else p) for p in patterns])


@dataclass
class MetricsReport:
    tasks: tuple[str, ...]
    overall: dict[str, TaskMetrics]
    per_pattern: dict[str, dict[str, TaskMetrics]]
    rectified: bool = False
    meta: dict = field(default_factory=dict)

    def summary(self) -> dict[str, float]:
        aucs = [m.auc for m in self.overall.values() if m.auc is not None]
        return {"mean_auc": float(np.mean(aucs)) if aucs else float("nan"),
                "mean_brier": float(np.mean([m.brier for m in self.overall.values()]))}

    def csv_rows(self, seed) -> list[dict]:
        rows = []
        blocks = [("all", self.overall)] + sorted(self.per_pattern.items())
        for pattern, block in blocks:
            for task in self.tasks:
                m = block[task]
                rows.append({"seed": seed, "task": task, "pattern": pattern,
                             "auc": "" if m.auc is None else repr(m.auc),
                             "auprc": "" if m.auprc is None else repr(m.auprc),
                             "brier": repr(m.brier), "rectified": str(self.rectified).lower()})
        return rows

    def to_json(self) -> str:
        return json.dumps({"tasks": list(self.tasks), "rectified": self.rectified, "meta": self.meta,
                           "summary": self.summary(),
                           "overall": {t: asdict(m) for t, m in self.overall.items()},
                           "per_pattern": {p: {t: asdict(m) for t, m in b.items()}
                                           for p, b in sorted(self.per_pattern.items())}},
                          indent=2, sort_keys=True)


CSV_COLUMNS = ["seed", "task", "pattern", "auc", "auprc", "brier", "rectified"]


def reports_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def evaluate(probs: np.ndarray, labels: np.ndarray, patterns, tasks, rectified: bool = False,
             support_floor: int = 30, meta: dict | None = None) -> MetricsReport:
    """Overall and per-pattern metrics from one pass over the same rows."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    overall = {t: task_metrics(probs[:, j], labels[:, j]) for j, t in enumerate(tasks)}
    strata = pattern_strata(patterns, support_floor)
    per = {}
    for s in np.unique(strata):
        rows = strata == s
        per[str(s)] = {t: task_metrics(probs[rows, j], labels[rows, j]) for j, t in enumerate(tasks)}
    return MetricsReport(tuple(tasks), overall, per, rectified, dict(meta or {}))


def pattern_report(probs, labels, patterns, tasks, support_floor: int = 30) -> dict[str, dict[str, TaskMetrics]]:
    return evaluate(probs, labels, patterns, tasks, support_floor=support_floor).per_pattern


# ------------------------------------------------------------------ probes

@dataclass
class ProbeReport:
    accuracy: float
    majority_rate: float
    n_patterns: int
    degenerate: bool
    norm_label_corr: dict[str, float | None]
    notes: list[str] = field(default_factory=list)


def linear_probe_accuracy(features: np.ndarray, classes: np.ndarray, seed: int = 0,
                          steps: int = 300, lr: float = 0.05) -> float:
    """Held-out accuracy of a softmax-regression probe (seeded 50/50 split)."""
    x = np.asarray(features, dtype=np.float64)
    uniq, y = np.unique(np.asarray(classes), return_inverse=True)
    n = len(y)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    perm = rng.permutation(n)
    fit, held = perm[: n // 2], perm[n // 2:]
    mu, sd = x[fit].mean(axis=0), x[fit].std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    xs = (x - mu) / sd
    onehot = np.eye(len(uniq))[y]
    w = Tensor(np.zeros((x.shape[1], len(uniq))), requires_grad=True, name="probe.w")
    b = Tensor(np.zeros(len(uniq)), requires_grad=True, name="probe.b")
    opt = AdamW(learning_rate=lr, weight_decay=0.0)
    xf, tf = Tensor(xs[fit]), Tensor(onehot[fit])
    for _ in range(steps):
        with Tape() as tape:
            logp = ops.log_softmax(ops.add(ops.matmul(xf, w), b), axis=1)
            loss = ops.scale(ops.sum(ops.mul(logp, tf)), -1.0 / len(fit))
        opt.step(tape.backward(loss, [w, b]))
    pred = np.argmax(xs[held] @ w.data + b.data, axis=1)
    return float(np.mean(pred == y[held]))


def embedding_probes(z: np.ndarray, patterns, labels: np.ndarray, tasks, seed: int = 0) -> ProbeReport:
    """Pattern decodability of ``z`` and the link between embedding norm and outcome rate."""
    z = np.asarray(z, dtype=np.float64)
    patterns = np.asarray(patterns).astype(str)
    labels = np.asarray(labels, dtype=np.float64)
    uniq, counts = np.unique(patterns, return_counts=True)
    notes = []
    majority = float(counts.max() / counts.sum())
    if len(uniq) == 1:
        notes.append("single pattern: probe accuracy is trivially 1.0")
        acc, degenerate = 1.0, True
    else:
        acc, degenerate = linear_probe_accuracy(z, patterns, seed), False
    corr: dict[str, float | None] = {}
    if len(uniq) < 3:
        notes.append("fewer than 3 distinct patterns: norm/outcome correlation undefined")
        corr = {t: None for t in tasks}
    else:
        norms = np.linalg.norm(z, axis=1)
        mean_norm = np.array([norms[patterns == p].mean() for p in uniq])
        for j, t in enumerate(tasks):
            rate = np.array([labels[patterns == p, j].mean() for p in uniq])
            if np.std(mean_norm) == 0 or np.std(rate) == 0:
                corr[t] = None
                notes.append(f"{t}: constant per-pattern norm or rate; correlation undefined")
            else:
                corr[t] = float(np.corrcoef(mean_norm, rate)[0, 1])
    return ProbeReport(acc, majority, int(len(uniq)), degenerate, corr, notes)
