"""Modality-specific feed-forward encoders producing d-dimensional embeddings."""
from __future__ import annotations

import numpy as np

from .kernel import MLP, Module, Tensor, ops
from .kernel.tape import ShapeError


class EncoderSet(Module):
    """One ``D_m -> hidden -> d`` ReLU network per modality."""

    def __init__(self, feature_dims: dict[str, int], modalities, rng: np.random.Generator,
                 embed_dim: int = 128, hidden: int = 128):
        super().__init__()
        self.modalities = tuple(modalities)
        self.feature_dims = {m: int(feature_dims[m]) for m in self.modalities}
        self.embed_dim = embed_dim
        self.nets = {m: self.add_child(m, MLP(self.feature_dims[m], hidden, embed_dim, rng))
                     for m in self.modalities}

    def encode_modality(self, m: str, x: np.ndarray) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.feature_dims[m]:
            raise ShapeError(f"encoder {m}: expected features of width {self.feature_dims[m]}, "
                             f"got shape {x.shape}")
        return self.nets[m](Tensor(x))

    def encode(self, features: dict[str, np.ndarray], mask: np.ndarray) -> dict[str, tuple[np.ndarray, Tensor]]:
        """Embed observed rows only.

        Returns ``m -> (row indices, (n_obs, d) embeddings)`` for every modality
        observed in at least one row; rows with ``mask[:, m] == 0`` are never read.
        """
        out = {}
        for j, m in enumerate(self.modalities):
            rows = np.flatnonzero(mask[:, j])
            if len(rows) == 0:
                continue
            out[m] = (rows, self.encode_modality(m, features[m][rows]))
        return out

    def encode_record(self, x: dict[str, np.ndarray | None], mask) -> dict[str, Tensor]:
        """Single-patient form: ``m -> (d,)`` embedding for each observed modality."""
        mask = np.asarray(mask)
        out = {}
        for j, m in enumerate(self.modalities):
            if not mask[j]:
                continue
            if x.get(m) is None:
                raise ValueError(f"modality {m} marked observed but has no features")
            e = self.encode_modality(m, np.asarray(x[m], dtype=np.float64)[None, :])
            out[m] = ops.reshape(e, (self.embed_dim,))
        return out


def slot_embeddings(encoded: dict[str, tuple[np.ndarray, Tensor]], modalities, n: int) -> list[Tensor]:
    """Per-modality ``(n, d)`` tensors with zero placeholder rows for missing entries."""
    d = next(iter(encoded.values()))[1].shape[1]
    slots = []
    for m in modalities:
        if m in encoded:
            rows, e = encoded[m]
            slots.append(ops.scatter_rows(e, rows, n))
        else:
            slots.append(Tensor(np.zeros((n, d))))
    return slots
