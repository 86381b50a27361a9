"""The full network (encoders, fusion, reconstruction decoders, task heads) and the imputation baselines."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset
from .encoders import EncoderSet, slot_embeddings
from .fusion import ConcatFusion, FusionCore, GateBank, MissingnessNet
from .kernel import MLP, Module, Tensor, ops
from .kernel.ops import sigmoid_array
from .outcome import TaskHeads, pred_loss
from .reconstruction import (DecoderBank, ReconLossConfig, choose_masked, leave_one_out_mask,
                             modality_losses, rep_loss)


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 128
    encoder_hidden: int = 128
    z_dim: int = 32
    miss_hidden: int = 32
    heads: int = 4
    head_hidden: int = 64
    dropout: float = 0.2
    mmnar_fusion: bool = True
    reconstruction: bool = True
    miss_weight: float = 0.5
    rec_weight: float = 1.0
    cont_weight: float = 0.3
    temperature: float = 0.15
    task_weights: tuple[float, ...] = (1.2, 1.0, 1.5)
    focal_gamma: float = 0.0


@dataclass
class Batch:
    features: dict[str, np.ndarray]
    mask: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_dataset(cls, ds: Dataset, idx=None) -> "Batch":
        if idx is None:
            return cls(ds.features, ds.mask, ds.labels)
        idx = np.asarray(idx, dtype=np.intp)
        return cls({m: x[idx] for m, x in ds.features.items()}, ds.mask[idx], ds.labels[idx])

    def __len__(self) -> int:
        return len(self.mask)


@dataclass
class ForwardOutput:
    h: Tensor
    logits: Tensor
    z: Tensor | None
    losses: dict[str, Tensor] = field(default_factory=dict)
    rep_breakdown: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def total(self) -> Tensor:
        terms = list(self.losses.values())
        out = terms[0]
        for t in terms[1:]:
            out = ops.add(out, t)
        return out


class FusionModel(Module):
    """Encoders -> (missingness-aware | concatenation) fusion -> task heads.

    With ``mmnar_fusion`` off the pattern embedding, gates and attention are
    replaced by a zero-filled concatenation; with ``reconstruction`` off the
    decoders and their losses are dropped.
    """

    def __init__(self, feature_dims: dict[str, int], modalities, tasks, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 10]))
        self.cfg = cfg
        self.modalities = tuple(modalities)
        self.tasks = tuple(tasks)
        if len(cfg.task_weights) != len(self.tasks):
            raise ValueError(f"{len(cfg.task_weights)} task weights for {len(self.tasks)} tasks")
        M, d = len(self.modalities), cfg.embed_dim
        self.encoders = self.add_child("encoders", EncoderSet(feature_dims, self.modalities, rng, d,
                                                              cfg.encoder_hidden))
        if cfg.mmnar_fusion:
            self.miss = self.add_child("miss", MissingnessNet(M, rng, cfg.z_dim, cfg.miss_hidden,
                                                              cfg.miss_weight))
            self.gates = self.add_child("gates", GateBank(self.modalities, cfg.z_dim, d, rng))
            self.fuser = self.add_child("fusion", FusionCore(M, d, rng, cfg.heads, cfg.dropout))
        else:
            self.miss = self.gates = None
            self.fuser = self.add_child("fusion", ConcatFusion(M, d, rng, cfg.dropout))
        self.decoders = (self.add_child("decoders", DecoderBank(self.modalities, d, rng))
                         if cfg.reconstruction else None)
        self.heads = self.add_child("heads", TaskHeads(self.tasks, d, rng, cfg.head_hidden, cfg.dropout))
        self.recon_cfg = ReconLossConfig(cfg.rec_weight, cfg.cont_weight, cfg.temperature)

    def _gated_slots(self, batch: Batch):
        n = len(batch)
        encoded = self.encoders.encode(batch.features, batch.mask)
        slots = slot_embeddings(encoded, self.modalities, n)
        z = miss_loss = None
        if self.miss is not None:
            z, _, miss_loss = self.miss(batch.mask)
            slots = self.gates(slots, z, batch.mask)
        return encoded, slots, z, miss_loss

    def forward(self, batch: Batch, rng: np.random.Generator | None = None, training: bool = False,
                with_aux: bool = True) -> ForwardOutput:
        """Full forward pass.

        ``with_aux`` adds the missingness and representation losses; the
        reconstruction target per patient is drawn from ``rng`` (seed 0 if absent).
        """
        encoded, slots, z, miss_loss = self._gated_slots(batch)
        h = self.fuser(slots, batch.mask, rng, training)
        logits = self.heads.logits(h, rng, training)
        out = ForwardOutput(h, logits, z)
        out.losses["pred"] = pred_loss(logits, batch.labels, self.cfg.task_weights, self.cfg.focal_gamma)
        if not with_aux:
            return out
        if miss_loss is not None:
            out.losses["miss"] = miss_loss
        if self.decoders is not None:
            if rng is None:
                rng = np.random.default_rng(0)
            choice = choose_masked(batch.mask, rng)
            valid = np.flatnonzero(choice >= 0)
            if len(valid):
                loo = leave_one_out_mask(batch.mask, choice)[valid]
                sub = [ops.take_rows(s, valid) for s in slots]
                h_loo = ops.scatter_rows(self.fuser(sub, loo, rng, training), valid, len(batch))
                rec, cont = modality_losses(self.modalities, choice, h_loo, encoded, self.decoders,
                                            self.recon_cfg)
                rep = rep_loss(rec, cont, self.recon_cfg)
                if rec or cont:
                    out.losses["rep"] = rep.total
                    out.rep_breakdown = {"rec": rep.weighted_rec, "cont": rep.weighted_cont}
        return out

    def leave_one_out(self, batch: Batch, m: str) -> Tensor:
        """Fused representation with modality ``m`` masked for every patient observing it.

        Patients for whom ``m`` is their only observed modality are excluded; the
        returned rows correspond to ``np.flatnonzero(eligible)``.
        """
        j = self.modalities.index(m)
        eligible = (batch.mask[:, j] == 1) & (batch.mask.sum(axis=1) >= 2)
        rows = np.flatnonzero(eligible)
        _, slots, _, _ = self._gated_slots(batch)
        loo = np.array(batch.mask[rows], copy=True)
        loo[:, j] = 0
        return self.fuser([ops.take_rows(s, rows) for s in slots], loo)

    # inference helpers --------------------------------------------------

    def predict_proba(self, ds: Dataset, batch_size: int = 1024) -> np.ndarray:
        out = []
        for start in range(0, len(ds), batch_size):
            b = Batch.from_dataset(ds, np.arange(start, min(len(ds), start + batch_size)))
            out.append(sigmoid_array(self.forward(b, with_aux=False).logits.data))
        return np.concatenate(out)

    def pred_loss_on(self, ds: Dataset, batch_size: int = 1024) -> float:
        """Mean of the weighted prediction loss over ``ds`` (dropout off)."""
        total = 0.0
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(len(ds), start + batch_size))
            out = self.forward(Batch.from_dataset(ds, idx), with_aux=False)
            total += out.losses["pred"].item() * len(idx)
        return total / len(ds)

    def embeddings(self, ds: Dataset, batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray | None]:
        """``(h, z)`` for every row; ``z`` is None without MMNAR fusion."""
        hs, zs = [], []
        for start in range(0, len(ds), batch_size):
            b = Batch.from_dataset(ds, np.arange(start, min(len(ds), start + batch_size)))
            out = self.forward(b, with_aux=False)
            hs.append(out.h.data)
            if out.z is not None:
                zs.append(out.z.data)
        return np.concatenate(hs), (np.concatenate(zs) if zs else None)


class ImputationBaseline(Module):
    """Raw features with missing blocks imputed, concatenated, fed to an MLP trunk and task heads.

    ``kind='zero_fill'`` fills zeros and appends the mask bits;
    ``kind='mean_impute'`` fills training-set feature means.
    """

    KINDS = ("zero_fill", "mean_impute")

    def __init__(self, feature_dims: dict[str, int], modalities, tasks, cfg: ModelConfig, kind: str,
                 seed: int = 0):
        super().__init__()
        if kind not in self.KINDS:
            raise ValueError(f"unknown baseline kind {kind!r}; expected one of {self.KINDS}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        self.kind, self.cfg = kind, cfg
        self.modalities, self.tasks = tuple(modalities), tuple(tasks)
        self.feature_dims = {m: int(feature_dims[m]) for m in self.modalities}
        width = sum(self.feature_dims.values()) + (len(self.modalities) if kind == "zero_fill" else 0)
        self.trunk = self.add_child("trunk", MLP(width, cfg.encoder_hidden, cfg.embed_dim, rng,
                                                 dropout=cfg.dropout))
        self.heads = self.add_child("heads", TaskHeads(self.tasks, cfg.embed_dim, rng, cfg.head_hidden,
                                                       cfg.dropout))
        self.means = {m: np.zeros(d) for m, d in self.feature_dims.items()}

    def fit_imputer(self, ds: Dataset) -> None:
        for j, m in enumerate(self.modalities):
            rows = ds.mask[:, j] == 1
            if rows.any():
                self.means[m] = ds.features[m][rows].mean(axis=0)

    def design(self, batch: Batch) -> np.ndarray:
        cols = []
        for j, m in enumerate(self.modalities):
            x = np.array(batch.features[m], copy=True)
            missing = batch.mask[:, j] == 0
            x[missing] = 0.0 if self.kind == "zero_fill" else self.means[m]
            cols.append(x)
        if self.kind == "zero_fill":
            cols.append(batch.mask.astype(np.float64))
        return np.concatenate(cols, axis=1)

    def forward(self, batch: Batch, rng=None, training: bool = False, with_aux: bool = True) -> ForwardOutput:
        h = ops.relu(self.trunk(Tensor(self.design(batch)), rng, training))
        h = ops.dropout(h, self.cfg.dropout, rng, training)
        logits = self.heads.logits(h, rng, training)
        out = ForwardOutput(h, logits, None)
        out.losses["pred"] = pred_loss(logits, batch.labels, self.cfg.task_weights, self.cfg.focal_gamma)
        return out

    predict_proba = FusionModel.predict_proba
    pred_loss_on = FusionModel.pred_loss_on
