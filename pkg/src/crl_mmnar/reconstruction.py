"""Masked cross-modality reconstruction and InfoNCE alignment losses."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .kernel import MLP, Module, Tensor, ops

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReconLossConfig:
    rec_weight: float = 1.0
    cont_weight: float = 0.3
    temperature: float = 0.15

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("contrastive temperature must be positive")


class DecoderBank(Module):
    def __init__(self, modalities, embed_dim: int, rng: np.random.Generator):
        super().__init__()
        self.modalities = tuple(modalities)
        self.nets = {m: self.add_child(m, MLP(embed_dim, embed_dim, embed_dim, rng))
                     for m in self.modalities}

    def __call__(self, m: str, h_loo: Tensor) -> Tensor:
        return self.nets[m](h_loo)


def choose_masked(mask: np.ndarray, rng: np.random.Generator, always_observed: int = 0) -> np.ndarray:
    """Pick one modality per patient to hide; -1 where nothing can be hidden.

    Uniform over the observed modalities other than ``always_observed`` when any
    exist, else that modality itself; a patient with a single observed modality
    has no remaining input to reconstruct from and is skipped.
    """
    mask = np.asarray(mask, dtype=bool)
    n, M = mask.shape
    u = rng.random(n)
    choice = np.full(n, -1, dtype=np.intp)
    others = mask.copy()
    others[:, always_observed] = False
    n_other = others.sum(axis=1)
    for i in range(n):
        if mask[i].sum() < 2:
            continue
        cands = np.flatnonzero(others[i]) if n_other[i] else np.array([always_observed])
        choice[i] = cands[int(u[i] * len(cands))]
    skipped = int((choice < 0).sum())
    if skipped:
        log.debug("leave-one-out skipped for %d single-modality patients", skipped)
    return choice


def leave_one_out_mask(mask: np.ndarray, choice: np.ndarray) -> np.ndarray:
    """Mask with each patient's chosen modality removed (rows with choice -1 unchanged)."""
    loo = np.array(mask, dtype=np.int8, copy=True)
    rows = np.flatnonzero(choice >= 0)
    loo[rows, choice[rows]] = 0
    return loo


def reconstruction_loss(targets: Tensor, recons: Tensor) -> Tensor:
    """Sum over patients of squared L2 reconstruction error."""
    diff = ops.sub(targets, recons)
    return ops.sum(ops.mul(diff, diff))


def contrastive_loss(targets: Tensor, recons: Tensor, temperature: float) -> Tensor:
    """InfoNCE with in-batch negatives: mean over i of -log softmax_j(sim(e_i, rec_j)/tau)[i]."""
    n = targets.shape[0]
    logits = ops.scale(ops.pairwise_cosine(targets, recons), 1.0 / temperature)
    logp = ops.log_softmax(logits, axis=1)
    return ops.scale(ops.sum(ops.mul(logp, Tensor(np.eye(n)))), -1.0 / n)


@dataclass
class RepLoss:
    total: Tensor
    rec: dict[str, Tensor] = field(default_factory=dict)
    cont: dict[str, Tensor] = field(default_factory=dict)
    weighted_rec: dict[str, float] = field(default_factory=dict)
    weighted_cont: dict[str, float] = field(default_factory=dict)


def rep_loss(rec: dict[str, Tensor], cont: dict[str, Tensor], cfg: ReconLossConfig) -> RepLoss:
    terms = []
    out = RepLoss(Tensor(0.0), rec, cont)
    for m in sorted(set(rec) | set(cont)):
        if m in rec:
            terms.append(ops.scale(rec[m], cfg.rec_weight))
            out.weighted_rec[m] = cfg.rec_weight * rec[m].item()
        if m in cont:
            terms.append(ops.scale(cont[m], cfg.cont_weight))
            out.weighted_cont[m] = cfg.cont_weight * cont[m].item()
    if terms:
        total = terms[0]
        for t in terms[1:]:
            total = ops.add(total, t)
        out.total = total
    return out


def modality_losses(modalities, choice: np.ndarray, h_loo: Tensor,
                    encoded: dict[str, tuple[np.ndarray, Tensor]], decoders: DecoderBank,
                    cfg: ReconLossConfig) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    """Per-modality reconstruction and contrastive terms for one batch.

    For modality m, the pairs are the patients whose hidden modality was m;
    targets are their (ungated) embeddings of m.
    """
    rec, cont = {}, {}
    for j, m in enumerate(modalities):
        rows = np.flatnonzero(choice == j)
        if len(rows) == 0 or m not in encoded:
            continue
        enc_rows, e = encoded[m]
        pos = np.searchsorted(enc_rows, rows)
        target = ops.take_rows(e, pos)
        recon = decoders(m, ops.take_rows(h_loo, rows))
        rec[m] = reconstruction_loss(target, recon)
        cont[m] = contrastive_loss(target, recon, cfg.temperature)
    return rec, cont
