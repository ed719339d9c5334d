"""Item tower: weighted factor merge and the two item projections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import EmptyItemError, ShapeError

N_FACTORS = 9
FACTOR_NAMES = ("name", "usage", "size", "shape", "color", "material", "style", "pattern", "other")


@dataclass
class ItemRecord:
    item_id: str
    category: str
    factors: np.ndarray  # (F, dim)
    factor_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.factors = np.asarray(self.factors, dtype=np.float64)
        if self.factors.ndim != 2:
            raise ShapeError(f"item {self.item_id}: factors must be (F, dim), got {self.factors.shape}")
        if self.factor_mask is None:
            self.factor_mask = np.ones(self.factors.shape[0], dtype=bool)
        self.factor_mask = np.asarray(self.factor_mask, dtype=bool)
        if self.factor_mask.shape != (self.factors.shape[0],):
            raise ShapeError(f"item {self.item_id}: mask length != factor count")


def merge_factors(factors, weights, mask=None) -> nx.Tensor:
    """s_i = sum_j w_j f_ij over unmasked factors.

    ``factors`` is (F, dim) for a single item or (N, F, dim) for a batch.
    """
    factors = np.asarray(factors, dtype=np.float64)
    weights = nx.as_tensor(weights)
    n_f = factors.shape[-2]
    if weights.shape != (n_f,):
        raise ShapeError(f"factor weights {weights.shape} do not match {n_f} factors")
    mask = np.ones(n_f, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyItemError("every factor is masked out")
    masked = factors * mask[:, None]
    if factors.ndim == 2:
        return nx.einsum("fd,f->d", masked, weights)
    return nx.einsum("nfd,f->nd", masked, weights)


@dataclass
class ItemEmbedding:
    e_i: nx.Tensor  # (..., K*d)
    e_ic: nx.Tensor  # (..., d)


class ItemEncoder:
    def __init__(self, rng: np.random.Generator, factor_dim: int, embed_dim: int = 256, proto_dim: int = 64,
                 n_factors: int = N_FACTORS):
        self.factor_dim = factor_dim
        self.n_factors = n_factors
        scale = np.sqrt(1.0 / factor_dim)
        self.w = nx.Parameter("item.w", np.full(n_factors, 1.0 / n_factors))
        self.w2 = nx.Parameter("item.w2", rng.normal(0.0, scale, size=(factor_dim, embed_dim)))
        self.b2 = nx.Parameter("item.b2", np.zeros(embed_dim))
        self.w3 = nx.Parameter("item.w3", rng.normal(0.0, scale, size=(factor_dim, proto_dim)))
        self.b3 = nx.Parameter("item.b3", np.zeros(proto_dim))

    def parameters(self) -> list[nx.Parameter]:
        return [self.w, self.w2, self.b2, self.w3, self.b3]

    def project(self, s) -> ItemEmbedding:
        s = nx.as_tensor(s)
        return ItemEmbedding(nx.matmul(_as_matrix(s), self.w2) + self.b2, nx.matmul(_as_matrix(s), self.w3) + self.b3)

    def encode(self, factors, mask=None) -> ItemEmbedding:
        """(N, F, dim) factor stacks (or one (F, dim) item) -> e_i, e_ic."""
        factors = np.asarray(factors, dtype=np.float64)
        if factors.shape[-1] != self.factor_dim or factors.shape[-2] != self.n_factors:
            raise ShapeError(f"factors {factors.shape} do not match ({self.n_factors}, {self.factor_dim})")
        emb = self.project(merge_factors(factors, self.w, mask))
        if factors.ndim == 2:
            return ItemEmbedding(nx.reshape(emb.e_i, emb.e_i.shape[-1:]), nx.reshape(emb.e_ic, emb.e_ic.shape[-1:]))
        return emb

    def encode_item(self, item: ItemRecord) -> ItemEmbedding:
        return self.encode(item.factors, item.factor_mask)


def _as_matrix(s: nx.Tensor) -> nx.Tensor:
    return nx.reshape(s, (1, s.shape[0])) if s.ndim == 1 else s
