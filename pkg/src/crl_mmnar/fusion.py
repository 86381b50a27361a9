"""Missingness-aware fusion: pattern embedding, per-modality gates, masked attention."""
from __future__ import annotations

import numpy as np

from .kernel import MLP, Linear, Module, Tensor, ops


class MissingnessNet(Module):
    """``delta -> z`` encoder with a linear decoder back to per-modality logits."""

    def __init__(self, n_modalities: int, rng: np.random.Generator, z_dim: int = 32,
                 hidden: int = 32, weight: float = 0.5):
        super().__init__()
        self.encoder = self.add_child("encoder", MLP(n_modalities, hidden, z_dim, rng))
        self.decoder = self.add_child("decoder", Linear(z_dim, n_modalities, rng))
        self.weight = weight

    def embed(self, mask: np.ndarray) -> Tensor:
        return self.encoder(Tensor(np.asarray(mask, dtype=np.float64)))

    def __call__(self, mask: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(z, decoded logits, L_miss)``.

        ``L_miss`` is the weight times the per-modality binary cross-entropy summed
        over modalities and averaged over patients.
        """
        z = self.embed(mask)
        logits = self.decoder(z)
        return z, logits, miss_loss(logits, mask, self.weight)


def miss_loss(logits: Tensor, mask: np.ndarray, weight: float) -> Tensor:
    bce = ops.bce_with_logits(logits, np.asarray(mask, dtype=np.float64))
    return ops.scale(ops.mean(ops.sum(bce, axis=1)), weight)


class GateBank(Module):
    def __init__(self, modalities, z_dim: int, embed_dim: int, rng: np.random.Generator):
        super().__init__()
        self.modalities = tuple(modalities)
        self.maps = [self.add_child(m, Linear(z_dim, embed_dim, rng)) for m in self.modalities]

    def gate_values(self, z: Tensor, j: int) -> Tensor:
        return ops.sigmoid(self.maps[j](z))

    def __call__(self, slots: list[Tensor], z: Tensor, mask: np.ndarray) -> list[Tensor]:
        """``delta_m * sigmoid(W_m z + b_m) * e_m`` for each modality slot."""
        out = []
        for j, e in enumerate(slots):
            present = np.asarray(mask[:, j:j + 1], dtype=np.float64)
            out.append(ops.mul(ops.mul(self.gate_values(z, j), e), Tensor(present)))
        return out


def gate(e: Tensor, gate_logits: Tensor, present: float) -> Tensor:
    """Single-vector form of the gate, for direct inspection."""
    return ops.scale(ops.mul(ops.sigmoid(gate_logits), e), float(present))


class FusionCore(Module):
    """One multi-head self-attention layer over modality slots, then a masked mean-pool.

    Each slot gets a learned per-modality embedding added before attention.
    Keys of missing slots are masked out and only observed rows are pooled, so
    missing slots cannot influence the result.
    """

    def __init__(self, n_modalities: int, embed_dim: int, rng: np.random.Generator,
                 heads: int = 4, dropout: float = 0.2):
        super().__init__()
        if embed_dim % heads:
            raise ValueError(f"embed_dim {embed_dim} not divisible by {heads} heads")
        self.heads, self.head_dim, self.dropout = heads, embed_dim // heads, dropout
        limit = np.sqrt(6.0 / (n_modalities + embed_dim))
        self.slot = self.add_param("slot", rng.uniform(-limit, limit, size=(n_modalities, embed_dim)))
        self.q = self.add_child("q", Linear(embed_dim, embed_dim, rng))
        self.k = self.add_child("k", Linear(embed_dim, embed_dim, rng))
        self.v = self.add_child("v", Linear(embed_dim, embed_dim, rng))
        self.o = self.add_child("o", Linear(embed_dim, embed_dim, rng))

    def _split_heads(self, x: Tensor) -> Tensor:
        b, m, _ = x.shape
        return ops.transpose(ops.reshape(x, (b, m, self.heads, self.head_dim)), (0, 2, 1, 3))

    def attend(self, tokens: Tensor, mask: np.ndarray, rng=None, training: bool = False):
        """Return ``(H, attention weights)`` for a ``(B, M, d)`` token stack."""
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise ValueError("no observed modalities")
        x = ops.add(tokens, self.slot)
        q, k, v = (self._split_heads(f(x)) for f in (self.q, self.k, self.v))
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        attn = ops.softmax(scores, axis=-1, mask=mask[:, None, None, :])
        ctx = ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3))
        b, m, _ = tokens.shape
        out = self.o(ops.reshape(ctx, (b, m, self.heads * self.head_dim)))
        out = ops.dropout(out, self.dropout, rng, training)
        return ops.add(x, out), attn

    def __call__(self, slots: list[Tensor], mask: np.ndarray, rng=None, training: bool = False) -> Tensor:
        tokens = ops.stack(slots, axis=1)
        hidden, _ = self.attend(tokens, mask, rng, training)
        return ops.masked_mean_pool(hidden, mask)


class ConcatFusion(Module):
    """Plain zero-filled concatenation projected to ``d`` (the no-MMNAR ablation)."""

    def __init__(self, n_modalities: int, embed_dim: int, rng: np.random.Generator, dropout: float = 0.2):
        super().__init__()
        self.proj = self.add_child("proj", Linear(n_modalities * embed_dim, embed_dim, rng))
        self.dropout = dropout

    def __call__(self, slots: list[Tensor], mask: np.ndarray, rng=None, training: bool = False) -> Tensor:
        mask = np.asarray(mask, dtype=np.float64)
        if not mask.any(axis=1).all():
            raise ValueError("no observed modalities")
        kept = [ops.mul(s, Tensor(mask[:, j:j + 1])) for j, s in enumerate(slots)]
        return ops.dropout(self.proj(ops.concat(kept, axis=1)), self.dropout, rng, training)
