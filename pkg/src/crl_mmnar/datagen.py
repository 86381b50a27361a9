"""Synthetic multimodal patient simulator with informative modality missingness.

Causal structure: a latent health state ``h`` drives modality contents ``x``,
the observation pattern ``delta`` (directly through severity ``h[0]`` and
through a readout of each modality's own content), and outcomes ``y``; the
pattern additionally shifts outcome probabilities by a planted effect
``tau[pattern][task]`` on the probability scale.

Structured data ("S") is always observed.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .kernel.checkpoint import atomic_write_bytes
from .kernel.ops import sigmoid_array

log = logging.getLogger(__name__)

MODALITIES = ("S", "I", "T", "R")
TASKS = ("readmission", "icu", "mortality")
ALWAYS_OBSERVED = "S"
CHUNK = 1024


class ConfigError(ValueError):
    pass


def _default_dims():
    return {"S": 32, "I": 64, "T": 48, "R": 40}


def _default_intercepts():
    # baseline availability roughly 26% imaging, 75% notes, 85% radiology reports
    return {"I": -1.05, "T": 1.10, "R": 1.73}


def _default_severity():
    return {"I": 1.0, "T": 0.8, "R": 0.6}


def _default_content():
    return {"I": 0.5, "T": 0.5, "R": 0.5}


def _default_effects():
    return {"1101": {"readmission": 0.08}}


def _default_outcome_intercepts():
    return {"readmission": -1.2, "icu": -1.8, "mortality": -2.2}


@dataclass(frozen=True)
class GenConfig:
    n_patients: int = 5000
    latent_dim: int = 8
    modalities: tuple[str, ...] = MODALITIES
    feature_dims: dict = field(default_factory=_default_dims)
    tasks: tuple[str, ...] = TASKS
    miss_intercept: dict = field(default_factory=_default_intercepts)
    miss_severity: dict = field(default_factory=_default_severity)
    miss_content: dict = field(default_factory=_default_content)
    pattern_effects: dict = field(default_factory=_default_effects)
    outcome_intercept: dict = field(default_factory=_default_outcome_intercepts)
    severity_weight: float = 1.0
    outcome_weight_scale: float = 0.5
    feature_noise: float = 0.5
    mode: str = "MNAR"
    seed: int = 0

    def effective(self) -> "GenConfig":
        """The config actually simulated: MCAR zeroes every arrow into and out of delta."""
        if self.mode == "MCAR":
            zero = {m: 0.0 for m in self.miss_severity}
            return replace(self, miss_severity=zero,
                           miss_content={m: 0.0 for m in self.miss_content},
                           pattern_effects={})
        return self

    def validate(self) -> None:
        if self.mode not in ("MNAR", "MCAR"):
            raise ConfigError(f"mode must be MNAR or MCAR, got {self.mode!r}")
        if len(self.tasks) < 2:
            raise ConfigError("at least 2 tasks are required")
        if self.n_patients < 1 or self.latent_dim < 1:
            raise ConfigError("n_patients and latent_dim must be positive")
        if ALWAYS_OBSERVED not in self.modalities:
            raise ConfigError(f"modality {ALWAYS_OBSERVED!r} must be present")
        for m in self.modalities:
            if m not in self.feature_dims:
                raise ConfigError(f"no feature dimension for modality {m!r}")
            if m != ALWAYS_OBSERVED:
                for table in ("miss_intercept", "miss_severity", "miss_content"):
                    if m not in getattr(self, table):
                        raise ConfigError(f"{table} lacks modality {m!r}")
        for t in self.tasks:
            if t not in self.outcome_intercept:
                raise ConfigError(f"outcome_intercept lacks task {t!r}")
        for pat, effects in self.pattern_effects.items():
            if len(pat) != len(self.modalities) or set(pat) - {"0", "1"}:
                raise ConfigError(f"bad pattern {pat!r}")
            if pat[self.modalities.index(ALWAYS_OBSERVED)] != "1":
                raise ConfigError(f"pattern {pat!r} has {ALWAYS_OBSERVED} missing")
            for t in effects:
                if t not in self.tasks:
                    raise ConfigError(f"pattern effect for unknown task {t!r}")


@dataclass
class Structure:
    """Per-seed generator parameters (loadings, readouts, outcome weights)."""

    loadings: dict[str, np.ndarray]
    readouts: dict[str, np.ndarray]
    outcome_weights: np.ndarray  # (tasks, latent_dim)


@dataclass
class HiddenTruth:
    latent: np.ndarray          # (n, k)
    p_base: np.ndarray          # (n, T) sigmoid(b + v.h), before the pattern effect
    p_true: np.ndarray          # (n, T) after effect and clamping
    effect: np.ndarray          # (n, T) planted effect applied to each patient


@dataclass
class Dataset:
    modalities: tuple[str, ...]
    tasks: tuple[str, ...]
    ids: np.ndarray
    features: dict[str, np.ndarray]  # (n, D_m); rows of missing modalities are NaN
    mask: np.ndarray                 # (n, M) int8
    labels: np.ndarray               # (n, T) float64 in {0, 1}
    hidden: HiddenTruth | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def patterns(self) -> np.ndarray:
        return np.array(["".join(map(str, row)) for row in self.mask])

    def pattern_codes(self) -> np.ndarray:
        """Integer code of each row's pattern (bit i = modality i)."""
        return (self.mask.astype(np.int64) << np.arange(self.mask.shape[1])).sum(axis=1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        hidden = None
        if self.hidden is not None:
            h = self.hidden
            hidden = HiddenTruth(h.latent[idx], h.p_base[idx], h.p_true[idx], h.effect[idx])
        return Dataset(self.modalities, self.tasks, self.ids[idx],
                       {m: x[idx] for m, x in self.features.items()},
                       self.mask[idx], self.labels[idx], hidden)

    def public(self) -> "Dataset":
        """Copy without the ground-truth block; the only view training code receives."""
        return replace(self, hidden=None)

    def records(self) -> Iterator[dict]:
        for i in range(len(self)):
            rec = {"id": int(self.ids[i]), "x": {}, "mask": [int(b) for b in self.mask[i]],
                   "labels": {t: int(self.labels[i, j]) for j, t in enumerate(self.tasks)}}
            for k, m in enumerate(self.modalities):
                rec["x"][m] = self.features[m][i].tolist() if self.mask[i, k] else None
            if self.hidden is not None:
                h = self.hidden
                rec["hidden"] = {
                    "latent": h.latent[i].tolist(),
                    "p_base": {t: float(h.p_base[i, j]) for j, t in enumerate(self.tasks)},
                    "p_true": {t: float(h.p_true[i, j]) for j, t in enumerate(self.tasks)},
                    "effect": {t: float(h.effect[i, j]) for j, t in enumerate(self.tasks)},
                }
            yield rec


def make_structure(config: GenConfig) -> Structure:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    k = config.latent_dim
    loadings, readouts = {}, {}
    for m in config.modalities:
        d = config.feature_dims[m]
        loadings[m] = rng.normal(0.0, 1.0 / np.sqrt(k), size=(d, k))
        r = rng.normal(size=d)
        readouts[m] = r / np.linalg.norm(r)
    w = rng.normal(0.0, config.outcome_weight_scale, size=(len(config.tasks), k))
    w[:, 0] = config.severity_weight
    return Structure(loadings, readouts, w)


def _effect_matrix(config: GenConfig, mask: np.ndarray) -> np.ndarray:
    pats = np.array(["".join(map(str, row)) for row in mask])
    eff = np.zeros((len(mask), len(config.tasks)))
    for pat, effects in config.pattern_effects.items():
        rows = pats == pat
        for t, val in effects.items():
            eff[rows, config.tasks.index(t)] = val
    return eff


def generate(config: GenConfig) -> Dataset:
    """Simulate ``config.n_patients`` records, ground truth attached as ``hidden``.

    Patients are drawn in fixed-size chunks, each from its own seed stream, so
    the result does not depend on how chunks are scheduled.
    """
    config.validate()
    cfg = config.effective()
    st = make_structure(cfg)
    n, k, M = cfg.n_patients, cfg.latent_dim, len(cfg.modalities)
    latent = np.empty((n, k))
    feats = {m: np.empty((n, cfg.feature_dims[m])) for m in cfg.modalities}
    mask = np.ones((n, M), dtype=np.int8)
    u_outcome = np.empty((n, len(cfg.tasks)))
    for c, start in enumerate(range(0, n, CHUNK)):
        stop = min(n, start + CHUNK)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, c]))
        h = rng.normal(size=(stop - start, k))
        latent[start:stop] = h
        for j, m in enumerate(cfg.modalities):
            x = h @ st.loadings[m].T + cfg.feature_noise * rng.normal(size=(stop - start, cfg.feature_dims[m]))
            feats[m][start:stop] = x
            if m == ALWAYS_OBSERVED:
                continue
            logit = (cfg.miss_intercept[m] + cfg.miss_severity[m] * h[:, 0]
                     + cfg.miss_content[m] * (x @ st.readouts[m]))
            mask[start:stop, j] = rng.random(stop - start) < sigmoid_array(logit)
        u_outcome[start:stop] = rng.random((stop - start, len(cfg.tasks)))

    b = np.array([cfg.outcome_intercept[t] for t in cfg.tasks])
    p_base = sigmoid_array(b + latent @ st.outcome_weights.T)
    effect = _effect_matrix(cfg, mask)
    raw = p_base + effect
    worst = max(float(np.max(raw - 1.0, initial=0.0)), float(np.max(-raw, initial=0.0)))
    if worst > 0.2:
        raise ConfigError(f"pattern effects push outcome probabilities {worst:.3f} outside "
                          "[0, 1]; reduce the effect or adjust outcome intercepts")
    p_true = np.clip(raw, 0.0, 1.0)
    labels = (u_outcome < p_true).astype(np.float64)
    for j, m in enumerate(cfg.modalities):
        feats[m][mask[:, j] == 0] = np.nan
    return Dataset(tuple(cfg.modalities), tuple(cfg.tasks), np.arange(n), feats, mask, labels,
                   HiddenTruth(latent, p_base, p_true, effect))


# ------------------------------------------------------------------ splitting

@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def _even_sequence(n: int, sizes: list[int]) -> np.ndarray:
    """Assign n slots to groups with exact ``sizes``, spread as evenly as possible."""
    seq = np.empty(n, dtype=np.intp)
    given = np.zeros(len(sizes))
    sizes_arr = np.asarray(sizes, dtype=float)
    for p in range(n):
        j = int(np.argmax((p + 1) * sizes_arr / n - given))
        seq[p] = j
        given[j] += 1
    return seq


def _sizes(n: int, ratios) -> list[int]:
    raw = np.asarray(ratios, dtype=float) * n
    sizes = np.floor(raw).astype(int)
    order = np.argsort(-(raw - sizes), kind="stable")
    for j in order[: n - sizes.sum()]:
        sizes[j] += 1
    return sizes.tolist()


def split(dataset: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Split:
    """Train/val/test partition stratified by (first-task label x pattern).

    Strata are laid out contiguously (grouped by pattern) in a seeded random
    order and dealt into the partitions by an evenly spread sequence, so each
    stratum lands in every partition roughly in proportion.  Strata with a
    single member are pooled into their label-only stratum.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(dataset)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    label = dataset.labels[:, 0].astype(np.int64)
    pattern = dataset.pattern_codes()
    key = pattern * 2 + label
    uniq, counts = np.unique(key, return_counts=True)
    tiny = uniq[counts < 2]
    if len(tiny):
        log.warning("split: %d empty-or-singleton strata; pooling them into label-only strata",
                    len(tiny))
        pooled = np.isin(key, tiny)
        key = np.where(pooled, -1 - label, key)
    tiebreak = rng.permutation(n)
    order = np.lexsort((tiebreak, key))
    seq = _even_sequence(n, _sizes(n, ratios))
    assign = np.empty(n, dtype=np.intp)
    assign[order] = seq
    _ensure_val_coverage(assign, pattern, label)
    parts = [np.sort(np.flatnonzero(assign == j)) for j in range(3)]
    return Split(*parts)


def _ensure_val_coverage(assign: np.ndarray, pattern: np.ndarray, label: np.ndarray) -> None:
    """Move one train member into val for any pattern with support >= 10 absent from val."""
    pats, counts = np.unique(pattern, return_counts=True)
    for pat, cnt in zip(pats, counts):
        rows = pattern == pat
        if cnt < 10 or np.any(assign[rows] == 1) or not np.any(assign[rows] == 0):
            continue
        mover = np.flatnonzero(rows & (assign == 0))[0]
        # swap with a val member of the same label from the most common pattern
        donors = np.flatnonzero((assign == 1) & (label == label[mover]) & ~rows)
        if len(donors) == 0:
            donors = np.flatnonzero((assign == 1) & ~rows)
        if len(donors) == 0:
            continue
        dpat = pattern[donors]
        vals, dcounts = np.unique(dpat, return_counts=True)
        donor = donors[dpat == vals[np.argmax(dcounts)]][0]
        assign[mover], assign[donor] = 1, 0


def kfold(dataset: Dataset, k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold (first-task label x pattern); returns (train, held_out) pairs."""
    if k < 2:
        raise ValueError("k must be at least 2")
    n = len(dataset)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    key = dataset.pattern_codes() * 2 + dataset.labels[:, 0].astype(np.int64)
    order = np.lexsort((rng.permutation(n), key))
    fold = np.empty(n, dtype=np.intp)
    fold[order] = np.arange(n) % k
    return [(np.flatnonzero(fold != f), np.flatnonzero(fold == f)) for f in range(k)]


# ------------------------------------------------------------------ file I/O

def write_jsonl(dataset: Dataset, path, with_oracle: bool = False) -> None:
    ds = dataset if with_oracle else dataset.public()
    lines = [json.dumps(rec, separators=(",", ":")) for rec in ds.records()]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_jsonl(path) -> Dataset:
    recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not recs:
        raise ValueError(f"{path}: no records")
    modalities = tuple(recs[0]["x"])
    tasks = tuple(recs[0]["labels"])
    n = len(recs)
    dims = {}
    for m in modalities:
        for r in recs:
            if r["x"][m] is not None:
                dims[m] = len(r["x"][m])
                break
        else:
            raise ValueError(f"{path}: modality {m!r} never observed; dimension unknown")
    feats = {m: np.full((n, dims[m]), np.nan) for m in modalities}
    mask = np.zeros((n, len(modalities)), dtype=np.int8)
    labels = np.zeros((n, len(tasks)))
    ids = np.zeros(n, dtype=np.int64)
    has_hidden = all("hidden" in r for r in recs)
    if has_hidden:
        k = len(recs[0]["hidden"]["latent"])
        latent, pb, pt, ef = (np.zeros((n, k)), np.zeros((n, len(tasks))),
                              np.zeros((n, len(tasks))), np.zeros((n, len(tasks))))
    for i, r in enumerate(recs):
        ids[i] = r["id"]
        mask[i] = r["mask"]
        for j, m in enumerate(modalities):
            present = r["x"][m] is not None
            if present != bool(mask[i, j]):
                raise ValueError(f"record {r['id']}: modality {m} presence disagrees with mask")
            if present:
                feats[m][i] = r["x"][m]
        labels[i] = [r["labels"][t] for t in tasks]
        if has_hidden:
            hd = r["hidden"]
            latent[i] = hd["latent"]
            pb[i] = [hd["p_base"][t] for t in tasks]
            pt[i] = [hd["p_true"][t] for t in tasks]
            ef[i] = [hd["effect"][t] for t in tasks]
    hidden = HiddenTruth(latent, pb, pt, ef) if has_hidden else None
    return Dataset(modalities, tasks, ids, feats, mask, labels, hidden)
