"""The full two-tower model with its prototype bank."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .item_encoder import ItemEncoder, ItemEmbedding
from .pose_encoder import PoseEncoder, chunks
from .prototypes import PrototypeBank, contribution_weights, score_matrix


@dataclass(frozen=True)
class ModelShape:
    factor_dim: int = 768
    n_factors: int = 9
    k: int = 4
    chunk_dim: int = 64
    window_len: int = 10
    channels: tuple = (64, 128, 256)
    strides: tuple = (1, 2, 1)
    temporal_kernel: int = 3
    temporal_mixing: str = "depthwise"
    temperature: float = 1.0

    @property
    def embed_dim(self) -> int:
        return self.k * self.chunk_dim


class PoseRec:
    def __init__(self, shape: ModelShape, rng: np.random.Generator, edges=None):
        self.shape = shape
        self.pose = PoseEncoder(
            rng,
            embed_dim=shape.embed_dim,
            window_len=shape.window_len,
            channels=tuple(shape.channels),
            strides=tuple(shape.strides),
            temporal_kernel=shape.temporal_kernel,
            temporal_mixing=shape.temporal_mixing,
            edges=edges,
        )
        self.items = ItemEncoder(rng, shape.factor_dim, shape.embed_dim, shape.chunk_dim, shape.n_factors)
        self.bank = PrototypeBank(rng, shape.k, shape.chunk_dim)

    def parameters(self) -> list[nx.Parameter]:
        return self.pose.parameters() + self.items.parameters() + self.bank.parameters()

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def encode_videos(self, windows) -> nx.Tensor:
        return self.pose.encode(windows)

    def encode_items(self, factors, mask=None) -> ItemEmbedding:
        return self.items.encode(factors, mask)

    def omega(self, e_ic) -> nx.Tensor:
        return contribution_weights(e_ic, self.bank, self.shape.temperature)

    def scores(self, e_v, item_emb: ItemEmbedding) -> nx.Tensor:
        """(B, E) video embeddings x N items -> (B, N) prototype scores."""
        k = self.shape.k
        return score_matrix(chunks(e_v, k), chunks(item_emb.e_i, k), self.omega(item_emb.e_ic))
