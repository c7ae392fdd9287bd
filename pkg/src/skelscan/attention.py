"""Spatial multi-head self-attention over joints with hop-distance position bias.

Per frame and head the logits are ``(Q K^T + Q R^T) / sqrt(d_head)`` where
``R[i, j]`` is a learned per-head vector looked up by the shortest-path
distance between joints i and j in the skeleton graph.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, TopologyError
from .nn import LayerNorm, Linear, Module, Parameter
from .tensor import Tensor, matmul, softmax

SHIPPED_TOPOLOGIES = ("ntu25", "ucla20")


def hop_distance(edges, n_joints: int) -> np.ndarray:
    """All-pairs shortest path lengths of an undirected graph by BFS."""
    adj = [[] for _ in range(n_joints)]
    for i, j in edges:
        if not (0 <= i < n_joints and 0 <= j < n_joints):
            raise TopologyError(f"edge ({i}, {j}) out of range for {n_joints} joints")
        adj[i].append(j)
        adj[j].append(i)
    hop = np.full((n_joints, n_joints), -1, dtype=np.int64)
    for src in range(n_joints):
        hop[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if hop[src, v] < 0:
                    hop[src, v] = hop[src, u] + 1
                    queue.append(v)
        if src == 0 and np.any(hop[0] < 0):
            orphans = np.flatnonzero(hop[0] < 0).tolist()
            raise TopologyError(f"skeleton graph is disconnected; joints {orphans} unreachable from joint 0")
    return hop


@dataclass
class SkeletonTopology:
    n_joints: int
    edges: list
    root: int = 0
    name: str = "custom"
    hop: np.ndarray = field(init=False, repr=False)
    parent: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.edges = [tuple(map(int, e)) for e in self.edges]
        self.hop = hop_distance(self.edges, self.n_joints)
        self.parent = _parents(self.edges, self.n_joints, self.root)

    @classmethod
    def load(cls, name_or_path: str) -> "SkeletonTopology":
        if name_or_path in SHIPPED_TOPOLOGIES:
            text = resources.files("skelscan").joinpath(f"topologies/{name_or_path}.txt").read_text()
            return cls.from_text(text, name=name_or_path)
        path = Path(name_or_path)
        return cls.from_text(path.read_text(), name=path.stem)

    @classmethod
    def from_text(cls, text: str, name: str = "custom") -> "SkeletonTopology":
        lines = [ln.split("#")[0].strip() for ln in text.splitlines()]
        lines = [ln for ln in lines if ln]
        if not lines:
            raise TopologyError("empty topology file")
        try:
            n = int(lines[0])
            edges = [tuple(int(v) for v in ln.split()) for ln in lines[1:]]
        except ValueError as exc:
            raise TopologyError(f"malformed topology file: {exc}") from None
        if any(len(e) != 2 for e in edges):
            raise TopologyError("every edge line needs exactly two joint indices")
        return cls(n, edges, name=name)

    def to_text(self) -> str:
        return f"{self.n_joints}\n" + "".join(f"{i} {j}\n" for i, j in self.edges)

    def permuted(self, perm: np.ndarray) -> "SkeletonTopology":
        """Topology after relabelling joint ``perm[k]`` as ``k``."""
        inv = np.argsort(perm)
        edges = [(int(inv[i]), int(inv[j])) for i, j in self.edges]
        return SkeletonTopology(self.n_joints, edges, root=int(inv[self.root]), name=self.name + "-perm")


def _parents(edges, n: int, root: int) -> np.ndarray:
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    parent = np.full(n, -1, dtype=np.int64)
    parent[root] = root
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if parent[v] < 0:
                parent[v] = u
                queue.append(v)
    return parent


def attention_weights(q: Tensor, k: Tensor, r_logits: Tensor | None = None, scale: bool = True) -> Tensor:
    """Row-stochastic attention from per-head queries/keys (..., N, d)."""
    logits = matmul(q, k.transpose(-1, -2))
    if r_logits is not None:
        logits = logits + r_logits
    if scale:
        logits = logits * (1.0 / math.sqrt(q.shape[-1]))
    return softmax(logits, axis=-1)


class SpatialAttnLayer(Module):
    """Pre-norm multi-head self-attention across joints, applied per frame, with residual.

    ``rpe`` selects the relative position term: ``"hop"`` (table indexed by
    clamped hop distance), ``"free"`` (an unconstrained N x N x d_head tensor
    per head) or ``"none"``.  ``ffn_ratio > 0`` appends a ReLU feed-forward
    sublayer of hidden width ``ffn_ratio * C``.
    """

    def __init__(self, channels: int, heads: int, topology: SkeletonTopology, rng: np.random.Generator,
                 max_hop: int = 8, rpe: str = "hop", scale: bool = True, ffn_ratio: int = 0):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"channels ({channels}) must be divisible by heads ({heads})")
        if rpe not in ("hop", "free", "none"):
            raise ConfigError(f"unknown relative position mode {rpe!r}")
        self.channels, self.heads, self.d_head = channels, heads, channels // heads
        self.rpe, self.scale, self.max_hop = rpe, scale, max_hop
        self.n_joints = topology.n_joints
        self.norm = LayerNorm(channels)
        self.q = Linear(channels, channels, rng)
        self.k = Linear(channels, channels, rng)
        self.v = Linear(channels, channels, rng)
        self.out = Linear(channels, channels, rng)
        if rpe == "hop":
            self.rel = Parameter(rng.normal(0.0, 0.02, (heads, max_hop + 1, self.d_head)))
        elif rpe == "free":
            N = topology.n_joints
            self.rel = Parameter(rng.normal(0.0, 0.02, (heads, N, N, self.d_head)))
        self.ffn_ratio = ffn_ratio
        if ffn_ratio:
            self.ffn_norm = LayerNorm(channels)
            self.ffn_in = Linear(channels, ffn_ratio * channels, rng)
            self.ffn_out = Linear(ffn_ratio * channels, channels, rng)

    def relative_logits(self, q: Tensor, topology: SkeletonTopology) -> Tensor | None:
        """``Q R^T`` term, shape (..., heads, N, N), for q of shape (..., heads, N, d_head)."""
        if self.rpe == "none":
            return None
        N = topology.n_joints
        lead = q.shape[:-2]
        if self.rpe == "free":
            rT = self.rel.transpose(-1, -2)                       # h, N, d, N
            out = matmul(q.reshape(*lead, N, 1, self.d_head), rT)  # ..., h, N, 1, N
            return out.reshape(*lead, N, N)
        buckets = np.minimum(topology.hop, self.max_hop)
        M = self.max_hop + 1
        onehot = np.zeros((N, M, N), dtype=q.dtype)
        onehot[np.arange(N)[:, None], buckets, np.arange(N)[None, :]] = 1.0
        qe = matmul(q, self.rel.transpose(-1, -2))                 # ..., h, N, M
        out = matmul(qe.reshape(*lead, N, 1, M), Tensor(onehot, dtype=q.dtype))
        return out.reshape(*lead, N, N)

    def forward(self, H: Tensor, topology: SkeletonTopology, return_attention: bool = False):
        return spatial_attention(H, self, topology, return_attention)


def spatial_attention(H: Tensor, layer: SpatialAttnLayer, topology: SkeletonTopology,
                      return_attention: bool = False):
    """Attention over joints for each frame of H (B, C, T, N); shape preserved."""
    B, C, T, N = H.shape
    if C != layer.channels:
        raise ShapeError(f"layer expects C={layer.channels}, got {C}")
    if N != topology.n_joints:
        raise ShapeError(f"input has {N} joints, topology {topology.n_joints}")
    h, dh = layer.heads, layer.d_head
    x = H.permute(0, 2, 3, 1)  # B, T, N, C
    y = layer.norm(x)

    def split(t):
        return t.reshape(B, T, N, h, dh).permute(0, 1, 3, 2, 4)

    q, k, v = split(layer.q(y)), split(layer.k(y)), split(layer.v(y))
    attn = attention_weights(q, k, layer.relative_logits(q, topology), layer.scale)
    ctx = matmul(attn, v).permute(0, 1, 3, 2, 4).reshape(B, T, N, C)
    x = x + layer.out(ctx)
    if layer.ffn_ratio:
        x = x + layer.ffn_out(layer.ffn_in(layer.ffn_norm(x)).relu())
    out = x.permute(0, 3, 1, 2)
    return (out, attn) if return_attention else out


def spatial_attn_param_count(channels: int, heads: int, n_joints: int, max_hop: int = 8, rpe: str = "hop",
                             ffn_ratio: int = 0) -> int:
    """4 (C^2 + C) projections + 2C norm + the relative position table (+ FFN)."""
    C = channels
    total = 4 * (C * C + C) + 2 * C
    if rpe == "hop":
        total += (max_hop + 1) * C
    elif rpe == "free":
        total += n_joints * n_joints * C
    if ffn_ratio:
        Hd = ffn_ratio * C
        total += 2 * C + C * Hd + Hd + Hd * C + C
    return total
