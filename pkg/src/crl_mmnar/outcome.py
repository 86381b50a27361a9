"""Multitask heads, the weighted prediction loss, and the cross-fitted pattern rectifier."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .kernel import MLP, Module, Tensor, ops
from .kernel.checkpoint import atomic_write_bytes
from .kernel.ops import sigmoid_array

log = logging.getLogger(__name__)

DEFAULT_TASK_WEIGHTS = {"readmission": 1.2, "icu": 1.0, "mortality": 1.5}
DEFAULT_KAPPA_GRID = (0.01, 0.02, 0.03, 0.05)
FALLBACK_KAPPA = 0.05


class TaskHeads(Module):
    """Independent ``d -> hidden -> 1`` networks, one per task."""

    def __init__(self, tasks, embed_dim: int, rng: np.random.Generator, hidden: int = 64,
                 dropout: float = 0.2, zero_init: bool = False):
        super().__init__()
        self.tasks = tuple(tasks)
        self.nets = [self.add_child(t, MLP(embed_dim, hidden, 1, rng, dropout=dropout, zero_last=zero_init))
                     for t in self.tasks]

    def logits(self, h: Tensor, rng=None, training: bool = False) -> Tensor:
        return ops.concat([net(h, rng, training) for net in self.nets], axis=1)

    def predict(self, h: Tensor) -> np.ndarray:
        return sigmoid_array(self.logits(h).data)


def pred_loss(logits: Tensor, labels: np.ndarray, weights, focal_gamma: float = 0.0) -> Tensor:
    """``sum_t w_t * mean_i CE(logit_it, y_it)``; focal loss when ``focal_gamma > 0``."""
    labels = np.asarray(labels, dtype=np.float64)
    per = ops.focal_bce_with_logits(logits, labels, focal_gamma)
    per_task = ops.mean(per, axis=0)
    return ops.sum(ops.mul(per_task, Tensor(np.asarray(weights, dtype=np.float64))))


# ------------------------------------------------------------------ rectifier

@dataclass
class RectifierCell:
    tau: tuple[float, float]
    support: tuple[int, int]
    applied: tuple[bool, bool]

    def test_time_correction(self) -> float:
        used = [t for t, a in zip(self.tau, self.applied) if a]
        return float(np.mean(used)) if used else 0.0


@dataclass
class RectifierTable:
    tasks: tuple[str, ...]
    kappa: float
    min_support: int
    cells: dict[tuple[str, str], RectifierCell] = field(default_factory=dict)
    unseen: int = 0

    def fraction_applied(self) -> float:
        flags = [a for c in self.cells.values() for a in c.applied]
        return float(np.mean(flags)) if flags else 0.0

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# kappa={self.kappa!r}\n# min_support={self.min_support}\n")
        buf.write("pattern\ttask\ttau_1\ttau_2\tn_1\tn_2\tapplied_1\tapplied_2\tkappa\n")
        for (pat, task), c in sorted(self.cells.items()):
            buf.write(f"{pat}\t{task}\t{c.tau[0]!r}\t{c.tau[1]!r}\t{c.support[0]}\t{c.support[1]}\t"
                      f"{int(c.applied[0])}\t{int(c.applied[1])}\t{self.kappa!r}\n")
        return buf.getvalue()

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_tsv().encode("utf-8"))

    @classmethod
    def from_tsv(cls, text: str, tasks) -> "RectifierTable":
        kappa, min_support, cells = FALLBACK_KAPPA, 0, {}
        for line in text.splitlines():
            if line.startswith("# kappa="):
                kappa = float(line.split("=", 1)[1])
            elif line.startswith("# min_support="):
                min_support = int(line.split("=", 1)[1])
            elif line and not line.startswith("#") and not line.startswith("pattern\t"):
                pat, task, t1, t2, n1, n2, a1, a2, _ = line.split("\t")
                cells[(pat, task)] = RectifierCell((float(t1), float(t2)), (int(n1), int(n2)),
                                                   (a1 == "1", a2 == "1"))
        return cls(tuple(tasks), kappa, min_support, cells)

    @classmethod
    def load(cls, path, tasks) -> "RectifierTable":
        with open(path) as fh:
            return cls.from_tsv(fh.read(), tasks)


def assign_folds(patterns: np.ndarray, seed: int = 0) -> np.ndarray:
    """Split each pattern's members into two disjoint folds (0/1) of near-equal size."""
    patterns = np.asarray(patterns)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    folds = np.empty(len(patterns), dtype=np.int8)
    for pat in np.unique(patterns):
        rows = np.flatnonzero(patterns == pat)
        perm = rows[rng.permutation(len(rows))]
        half = (len(rows) + 1) // 2
        folds[perm[:half]] = 0
        folds[perm[half:]] = 1
    return folds


def fit_rectifier(preds: np.ndarray, labels: np.ndarray, patterns: np.ndarray, tasks,
                  kappa: float, min_support: int = 20, folds: np.ndarray | None = None,
                  seed: int = 0) -> tuple[RectifierTable, np.ndarray]:
    """Fold-wise mean probability-scale residual per (pattern, task).

    ``preds`` must come from a model that never saw these labels.  Returns the
    table and the fold of each row.
    """
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    patterns = np.asarray(patterns)
    if folds is None:
        folds = assign_folds(patterns, seed)
    table = RectifierTable(tuple(tasks), float(kappa), int(min_support))
    resid = labels - preds
    for pat in np.unique(patterns):
        rows = patterns == pat
        for j, task in enumerate(tasks):
            taus, sup, app = [], [], []
            for k in (0, 1):
                sel = rows & (folds == k)
                n_k = int(sel.sum())
                tau = float(resid[sel, j].mean()) if n_k else 0.0
                taus.append(tau)
                sup.append(n_k)
                app.append(bool(n_k >= min_support and abs(tau) > kappa))
            table.cells[(str(pat), task)] = RectifierCell(tuple(taus), tuple(sup), tuple(app))
    return table, folds


def rectify(pred: float, pattern: str, task: str, table: RectifierTable, fold: int | None = None) -> float:
    """Corrected probability for one prediction.

    ``fold`` is the fold the patient belongs to (the complementary fold's
    estimate is used); ``None`` means an outside patient, who gets the mean of
    the applied fold estimates.
    """
    cell = table.cells.get((pattern, task))
    if cell is None:
        table.unseen += 1
        return pred
    if fold is None:
        corr = cell.test_time_correction()
    else:
        other = 1 - int(fold)
        corr = cell.tau[other] if cell.applied[other] else 0.0
    if corr == 0.0:
        return pred
    return min(1.0, max(0.0, pred + corr))


def rectify_array(preds: np.ndarray, patterns: np.ndarray, table: RectifierTable,
                  folds: np.ndarray | None = None) -> np.ndarray:
    """Vectorised :func:`rectify` over an ``(n, T)`` prediction matrix."""
    preds = np.asarray(preds, dtype=np.float64)
    patterns = np.asarray(patterns)
    out = preds.copy()
    for pat in np.unique(patterns):
        rows = patterns == pat
        for j, task in enumerate(table.tasks):
            cell = table.cells.get((str(pat), task))
            if cell is None:
                table.unseen += int(rows.sum())
                continue
            if folds is None:
                corr = np.full(rows.sum(), cell.test_time_correction())
            else:
                f = np.asarray(folds)[rows]
                other = 1 - f
                tau = np.where(other == 0, cell.tau[0], cell.tau[1])
                app = np.where(other == 0, cell.applied[0], cell.applied[1])
                corr = np.where(app, tau, 0.0)
            sel = np.flatnonzero(rows)
            shifted = np.clip(preds[sel, j] + corr, 0.0, 1.0)
            out[sel, j] = np.where(corr != 0.0, shifted, preds[sel, j])
    return out


def _mean_brier(preds, labels) -> float:
    return float(np.mean((preds - labels) ** 2, axis=0).mean())


def select_kappa(preds: np.ndarray, labels: np.ndarray, patterns: np.ndarray, tasks,
                 grid=DEFAULT_KAPPA_GRID, min_support: int = 20, seed: int = 0) -> tuple[float, dict]:
    """Threshold minimising cross-fitted mean Brier over tasks on the validation set.

    Every validation row is scored with the correction estimated on the other
    half of its pattern.  Ties go to the larger threshold.  Returns ``(kappa,
    {kappa: brier})``.
    """
    grid = [float(k) for k in grid] if grid is not None else []
    if not grid or any(not np.isfinite(k) or k < 0 for k in grid):
        log.warning("degenerate kappa grid %r; using %s", grid, FALLBACK_KAPPA)
        return FALLBACK_KAPPA, {}
    folds = assign_folds(patterns, seed)
    scores = {}
    best, best_score = None, np.inf
    for kappa in sorted(set(grid), reverse=True):
        table, _ = fit_rectifier(preds, labels, patterns, tasks, kappa, min_support, folds)
        score = _mean_brier(rectify_array(preds, patterns, table, folds), labels)
        scores[kappa] = score
        if score < best_score:
            best, best_score = kappa, score
    return best, scores
