"""Video tower: skeleton graph, spatio-temporal graph convolutions, projection."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import GraphError, ShapeError, WindowError

N_LANDMARKS = 33
N_CHANNELS = 4  # x, y, z, visibility

LEFT_SHOULDER, RIGHT_SHOULDER = 11, 12
LEFT_HIP, RIGHT_HIP = 23, 24


def load_edges(path: str | Path | None = None) -> list[tuple[int, int]]:
    """Read an ``i j`` per line edge list; the bundled BlazePose skeleton by default."""
    if path is None:
        text = resources.files("poserec.data").joinpath("blazepose_edges.txt").read_text()
    else:
        text = Path(path).read_text()
    edges = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphError(f"edge file line {lineno}: expected 'i j', got {line!r}")
        try:
            edges.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise GraphError(f"edge file line {lineno}: non-integer index in {line!r}") from None
    return edges


def build_adjacency(edges, n_nodes: int = N_LANDMARKS, symmetric: bool = True) -> np.ndarray:
    """D^{-1/2}(E+I)D^{-1/2} for the undirected edge set (D^{-1}(E+I) if not symmetric)."""
    e = np.zeros((n_nodes, n_nodes))
    seen = set()
    for i, j in edges:
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise GraphError(f"edge ({i}, {j}) out of range for {n_nodes} nodes")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise GraphError(f"duplicate edge {key}")
        seen.add(key)
        if i != j:
            e[i, j] = e[j, i] = 1.0
    a = e + np.eye(n_nodes)
    deg = a.sum(axis=1)
    if symmetric:
        inv_sqrt = 1.0 / np.sqrt(deg)
        return inv_sqrt[:, None] * a * inv_sqrt[None, :]
    return a / deg[:, None]


def normalize_pose(window: np.ndarray) -> np.ndarray:
    """Root-centre and scale a (T, 33, C) window; returns (T, 33, 4).

    Coordinates are shifted by the per-frame mid-hip position and divided by
    the mean mid-hip to mid-shoulder distance over the window. Visibility is
    passed through. Three-channel input (x, y, visibility) gets z = 0.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 3 or window.shape[1] != N_LANDMARKS or window.shape[2] not in (3, 4):
        raise ShapeError(f"pose window must be (T, 33, 4) or (T, 33, 3), got {window.shape}")
    if window.shape[2] == 3:
        window = np.concatenate([window[..., :2], np.zeros(window.shape[:2] + (1,)), window[..., 2:]], axis=-1)
    xyz = window[..., :3]
    hip = 0.5 * (xyz[:, LEFT_HIP] + xyz[:, RIGHT_HIP])
    shoulder = 0.5 * (xyz[:, LEFT_SHOULDER] + xyz[:, RIGHT_SHOULDER])
    torso = np.linalg.norm(shoulder - hip, axis=-1).mean()
    scale = torso if torso > 1e-8 else 1.0
    out = window.copy()
    out[..., :3] = (xyz - hip[:, None, :]) / scale
    return out


@dataclass(frozen=True)
class StgcnLayerSpec:
    in_channels: int
    out_channels: int
    temporal_kernel: int = 3
    temporal_stride: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1 or self.temporal_stride < 1:
            raise ShapeError(f"invalid layer spec {self}")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ShapeError(f"temporal kernel must be odd and positive, got {self.temporal_kernel}")

    def out_time(self, t_in: int) -> int:
        return -(-t_in // self.temporal_stride)


def default_layer_specs(
    channels=(64, 128, 256), strides=(1, 2, 1), kernel: int = 3, in_channels: int = N_CHANNELS
) -> list[StgcnLayerSpec]:
    if len(channels) != len(strides):
        raise ShapeError("channels and strides must have the same length")
    specs, c_in = [], in_channels
    for c_out, s in zip(channels, strides):
        specs.append(StgcnLayerSpec(c_in, c_out, kernel, s))
        c_in = c_out
    return specs


def stgcn_layer(x, adjacency, spec: StgcnLayerSpec, spatial, temporal, bias=None, activation: bool = True):
    """One layer on (batch, T, V, C_in) input -> (batch, ceil(T/stride), V, C_out).

    Spatial step: mix nodes with the adjacency and map channels with
    ``spatial`` (C_in, C_out). Temporal step: per-node convolution along time
    with ``temporal`` of shape (C_out, k) or (C_out, C_out, k), plus bias and
    max(0, .) unless ``activation`` is off. Tensors are channels-last.
    """
    x = nx.as_tensor(x)
    if x.ndim != 4 or x.shape[3] != spec.in_channels:
        raise ShapeError(f"layer expects (B, T, V, {spec.in_channels}) input, got {x.shape}")
    if spatial.shape != (spec.in_channels, spec.out_channels):
        raise ShapeError(f"spatial weight {spatial.shape} does not match {spec}")
    if temporal.shape[-1] != spec.temporal_kernel or temporal.shape[0] != spec.out_channels:
        raise ShapeError(f"temporal weight {temporal.shape} does not match {spec}")
    adjacency = nx.as_tensor(adjacency)
    if spec.in_channels <= spec.out_channels:
        h = nx.linear(nx.matmul(adjacency, x), spatial)
    else:
        h = nx.matmul(adjacency, nx.linear(x, spatial))
    h = nx.temporal_conv(h, temporal, stride=spec.temporal_stride)
    if bias is not None:
        h = h + bias
    return nx.relu(h) if activation else h


class PoseEncoder:
    """Stacked graph convolutions, average pooling and the W_1 projection.

    ``temporal_mixing`` picks channel-wise ("depthwise") or full channel
    mixing ("full") temporal kernels.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        embed_dim: int = 256,
        window_len: int = 10,
        channels=(64, 128, 256),
        strides=(1, 2, 1),
        temporal_kernel: int = 3,
        temporal_mixing: str = "depthwise",
        edges=None,
    ):
        if temporal_mixing not in ("depthwise", "full"):
            raise ValueError(f"unknown temporal_mixing {temporal_mixing!r}")
        self.window_len = window_len
        self.embed_dim = embed_dim
        self.specs = default_layer_specs(channels, strides, temporal_kernel)
        self.adjacency = build_adjacency(load_edges() if edges is None else edges)
        self.layers = []
        k = temporal_kernel
        for l, spec in enumerate(self.specs):
            c_in, c_out = spec.in_channels, spec.out_channels
            spatial = rng.normal(0.0, np.sqrt(2.0 / c_in), size=(c_in, c_out))
            if temporal_mixing == "depthwise":
                temporal = rng.normal(0.0, 0.1, size=(c_out, k))
                temporal[:, k // 2] += 1.0
            else:
                temporal = rng.normal(0.0, np.sqrt(1.0 / (c_out * k)), size=(c_out, c_out, k))
                temporal[np.arange(c_out), np.arange(c_out), k // 2] += 1.0
            self.layers.append(
                (
                    nx.Parameter(f"pose.l{l}.spatial", spatial),
                    nx.Parameter(f"pose.l{l}.temporal", temporal),
                    nx.Parameter(f"pose.l{l}.bias", np.zeros(c_out)),
                )
            )
        c_last = self.specs[-1].out_channels
        self.w1 = nx.Parameter("pose.w1", rng.normal(0.0, np.sqrt(1.0 / c_last), size=(c_last, embed_dim)))
        self.b1 = nx.Parameter("pose.b1", np.zeros(embed_dim))

    def parameters(self) -> list[nx.Parameter]:
        return [p for layer in self.layers for p in layer] + [self.w1, self.b1]

    def prepare(self, windows) -> np.ndarray:
        """Normalise a batch of raw (B, T, 33, C) windows into (B, T, 33, 4) input."""
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim == 3:
            windows = windows[None]
        if windows.ndim != 4:
            raise ShapeError(f"expected (B, T, 33, C) windows, got {windows.shape}")
        if windows.shape[1] != self.window_len:
            raise WindowError(f"window length {windows.shape[1]} != configured {self.window_len}")
        return np.stack([normalize_pose(w) for w in windows])

    def pooled(self, windows) -> nx.Tensor:
        h = nx.Tensor(self.prepare(windows))
        for spec, (spatial, temporal, bias) in zip(self.specs, self.layers):
            h = stgcn_layer(h, self.adjacency, spec, spatial, temporal, bias)
        return nx.mean(h, axis=(1, 2))

    def encode(self, windows) -> nx.Tensor:
        """(B, T, 33, C) windows -> (B, embed_dim) video embeddings e_v."""
        return nx.matmul(self.pooled(windows), self.w1) + self.b1


def chunks(e, k: int):
    """View (..., K*d) embeddings as (..., K, d)."""
    e = nx.as_tensor(e)
    if e.shape[-1] % k:
        raise ShapeError(f"embedding size {e.shape[-1]} not divisible into {k} chunks")
    return nx.reshape(e, e.shape[:-1] + (k, e.shape[-1] // k))
