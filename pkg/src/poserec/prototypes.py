"""Implicit prototypes: contribution weights, chunked scores, separation loss."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import ShapeError

MAX_INIT_COSINE = 0.5


class PrototypeBank:
    """K learnable d-dimensional prototypes, stored as parameters proto.r0 ... proto.r{K-1}."""

    def __init__(self, rng: np.random.Generator, k: int = 4, dim: int = 64, max_tries: int = 1000):
        if k < 1 or dim < 1:
            raise ShapeError(f"prototype bank needs K >= 1 and d >= 1, got K={k}, d={dim}")
        self.k, self.dim = k, dim
        for _ in range(max_tries):
            r = rng.normal(size=(k, dim))
            r /= np.linalg.norm(r, axis=1, keepdims=True)
            gram = r @ r.T
            if k == 1 or np.max(np.abs(gram[np.triu_indices(k, 1)])) < MAX_INIT_COSINE:
                break
        else:
            raise ShapeError(f"could not draw {k} prototypes in {dim} dims with pairwise cosine < {MAX_INIT_COSINE}")
        self.rows = [nx.Parameter(f"proto.r{j}", r[j]) for j in range(k)]

    def parameters(self) -> list[nx.Parameter]:
        return list(self.rows)

    def matrix(self) -> nx.Tensor:
        return nx.stack(self.rows, axis=0)


def contribution_weights(e_ic, prototypes, temperature: float = 1.0) -> nx.Tensor:
    """omega = softmax_k(cos(e_ic, r_k) / temperature); e_ic is (..., d), result (..., K)."""
    e_ic = nx.as_tensor(e_ic)
    r = prototypes.matrix() if isinstance(prototypes, PrototypeBank) else nx.as_tensor(prototypes)
    if e_ic.shape[-1] != r.shape[-1]:
        raise ShapeError(f"e_ic dim {e_ic.shape[-1]} != prototype dim {r.shape[-1]}")
    q = nx.reshape(e_ic, e_ic.shape[:-1] + (1, e_ic.shape[-1]))
    cos = nx.cosine_sim(q, r)
    if temperature != 1.0:
        cos = cos * (1.0 / temperature)
    return nx.softmax(cos, axis=-1)


def prototype_score(item_chunks, video_chunks, omega) -> nx.Tensor:
    """y = sum_k omega_k cos(e_i^(k), e_v^(k)).

    Chunk arrays are (..., K, d) and broadcast against each other; ``omega``
    is (..., K) and broadcasts against the per-chunk cosines.
    """
    item_chunks, video_chunks, omega = nx.as_tensor(item_chunks), nx.as_tensor(video_chunks), nx.as_tensor(omega)
    if item_chunks.shape[-2:] != video_chunks.shape[-2:] or omega.shape[-1] != item_chunks.shape[-2]:
        raise ShapeError(
            f"chunk shapes item {item_chunks.shape}, video {video_chunks.shape}, omega {omega.shape} disagree"
        )
    return nx.tsum(nx.cosine_sim(item_chunks, video_chunks) * omega, axis=-1)


def score_matrix(video_chunks, item_chunks, omega) -> nx.Tensor:
    """All-pairs scores: (B, K, d) videos x (N, K, d) items -> (B, N)."""
    v = nx.as_tensor(video_chunks)
    i = nx.as_tensor(item_chunks)
    v = nx.reshape(v, (v.shape[0], 1) + v.shape[1:])
    i = nx.reshape(i, (1,) + i.shape)
    return prototype_score(i, v, omega)


def prototype_separation_loss(prototypes) -> nx.Tensor:
    """Sum of cosines over unordered prototype pairs; zero when K = 1."""
    r = prototypes.matrix() if isinstance(prototypes, PrototypeBank) else nx.as_tensor(prototypes)
    k = r.shape[0]
    if k < 2:
        return nx.mul(nx.tsum(r), 0.0)
    rows, cols = np.triu_indices(k, 1)
    return nx.tsum(nx.cosine_sim(nx.getitem(r, rows), nx.getitem(r, cols)))
