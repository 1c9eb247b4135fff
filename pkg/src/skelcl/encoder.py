"""Graph encoder, projection head, and momentum-twin parameter maintenance.

The encoder stacks blocks of joint-graph convolution followed by temporal
convolution, pools over frames, joints, and persons, and a two-layer head
projects the pooled feature into the embedding space. A state object holds
the query network and its momentum-updated key twin.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .augment import GraphPerturbation
from .data import SkeletonGraph, SkeletonSequence, graph_for_joints
from .errors import ConfigError

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class EncoderConfig:
    """Sizes of the desk-scale encoder; `micro` is small enough for
    finite-difference gradient checks."""
    num_joints: int = 11
    num_persons: int = 1
    in_channels: int = 3
    block_channels: tuple[int, ...] = (16, 32, 64)
    temporal_strides: tuple[int, ...] = (1, 2, 2)
    temporal_kernel: int = 5
    embed_dim: int = 128
    dtype: str = "float32"

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ConfigError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if not self.block_channels:
            raise ConfigError("block_channels must be non-empty")
        if len(self.temporal_strides) != len(self.block_channels):
            raise ConfigError("temporal_strides must match block_channels length")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError("temporal_kernel must be odd and >= 1")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def feature_dim(self) -> int:
        return self.block_channels[-1]

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    @classmethod
    def micro(cls, num_joints: int = 5, embed_dim: int = 8) -> "EncoderConfig":
        return cls(num_joints=num_joints, block_channels=(4, 8),
                   temporal_strides=(1, 1), temporal_kernel=3,
                   embed_dim=embed_dim, dtype="float64")


def normalized_adjacency(adj: np.ndarray) -> np.ndarray:
    """Symmetric degree normalization D^-1/2 (A) D^-1/2; A carries self-loops."""
    deg = adj.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return adj * inv_sqrt[:, None] * inv_sqrt[None, :]


class SpatialTemporalBlock(nn.Module):
    """1x1 graph convolution mixed through the adjacency, then temporal conv.

    A stride > 1 downsamples time in both the temporal conv and the residual.
    """

    def __init__(self, c_in: int, c_out: int, temporal_kernel: int, stride: int = 1):
        super().__init__()
        pad = temporal_kernel // 2
        self.gcn = nn.Conv2d(c_in, c_out, kernel_size=1)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.tcn = nn.Conv2d(c_out, c_out, kernel_size=(temporal_kernel, 1),
                             padding=(pad, 0), stride=(stride, 1))
        self.bn2 = nn.BatchNorm2d(c_out)
        self.residual = (nn.Identity() if c_in == c_out and stride == 1
                         else nn.Conv2d(c_in, c_out, kernel_size=1, stride=(stride, 1)))
        self.relu = nn.ReLU()

    def forward(self, x, adj):
        # x: (N, C, T, V); adj: (V, V) shared or (N, V, V) per sample
        res = self.residual(x)
        y = self.gcn(x)
        if adj.dim() == 2:
            y = torch.einsum("nctv,vw->nctw", y, adj)
        else:
            y = torch.einsum("nctv,nvw->nctw", y, adj)
        y = self.relu(self.bn1(y))
        y = self.bn2(self.tcn(y))
        return self.relu(y + res)


class SkeletonEncoder(nn.Module):
    """Stacked spatial-temporal blocks with global pooling; outputs (N, feature_dim)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.data_bn = nn.BatchNorm1d(config.in_channels * config.num_joints)
        channels = (config.in_channels,) + tuple(config.block_channels)
        self.blocks = nn.ModuleList([
            SpatialTemporalBlock(channels[i], channels[i + 1], config.temporal_kernel,
                                 stride=config.temporal_strides[i])
            for i in range(len(config.block_channels))])

    def forward(self, x, adjacencies):
        # x: (B, C, T, V, P); adjacencies: one tensor per block
        b, c, t, v, p = x.shape
        x = x.permute(0, 4, 1, 2, 3).reshape(b * p, c, t, v)
        x = self.data_bn(x.permute(0, 1, 3, 2).reshape(b * p, c * v, t))
        x = x.reshape(b * p, c, v, t).permute(0, 1, 3, 2).contiguous()
        for block, adj in zip(self.blocks, adjacencies):
            x = block(x, adj)
        x = x.mean(dim=(2, 3))              # pool frames and joints
        return x.reshape(b, p, -1).mean(dim=1)  # pool persons


class ProjectionHead(nn.Module):
    """Two-layer perceptron mapping pooled features to the embedding space."""

    def __init__(self, feature_dim: int, embed_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(feature_dim, feature_dim), nn.ReLU(),
            nn.Linear(feature_dim, embed_dim))

    def forward(self, x):
        return self.net(x)


@dataclass
class EncoderState:
    """Query network, its momentum key twin, and the graph they encode over."""
    config: EncoderConfig
    graph: SkeletonGraph
    query_encoder: SkeletonEncoder
    query_head: ProjectionHead
    key_encoder: SkeletonEncoder
    key_head: ProjectionHead
    base_adjacency: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.base_adjacency = torch.as_tensor(
            normalized_adjacency(self.graph.adjacency), dtype=self.config.torch_dtype)

    def query_parameters(self):
        yield from self.query_encoder.parameters()
        yield from self.query_head.parameters()

    def key_parameters(self):
        yield from self.key_encoder.parameters()
        yield from self.key_head.parameters()

    def train_mode(self, on: bool = True) -> None:
        for module in (self.query_encoder, self.query_head,
                       self.key_encoder, self.key_head):
            module.train(on)


def _init_module(module: nn.Module, gen: torch.Generator) -> None:
    """Uniform fan-in init for convs and linears, drawn from an owned generator."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (m.weight[0][0].numel()
                                          if isinstance(m, nn.Conv2d) else 1)
            bound = 1.0 / np.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)


def init_state(config: EncoderConfig, seed: int,
               graph: SkeletonGraph | None = None) -> EncoderState:
    """Build both twins; the key starts as an exact copy of the query."""
    graph = graph if graph is not None else graph_for_joints(config.num_joints)
    if graph.num_joints != config.num_joints:
        raise ConfigError(f"graph has {graph.num_joints} joints, config expects "
                          f"{config.num_joints}")
    gen = torch.Generator().manual_seed(int(seed))
    query_encoder = SkeletonEncoder(config).to(config.torch_dtype)
    query_head = ProjectionHead(config.feature_dim, config.embed_dim).to(config.torch_dtype)
    _init_module(query_encoder, gen)
    _init_module(query_head, gen)
    key_encoder = copy.deepcopy(query_encoder)
    key_head = copy.deepcopy(query_head)
    for p in key_encoder.parameters():
        p.requires_grad_(False)
    for p in key_head.parameters():
        p.requires_grad_(False)
    return EncoderState(config=config, graph=graph,
                        query_encoder=query_encoder, query_head=query_head,
                        key_encoder=key_encoder, key_head=key_head)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _as_batch(views, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(views, SkeletonSequence):
        views = views.data[None]
    elif isinstance(views, (list, tuple)):
        views = np.stack([v.data if isinstance(v, SkeletonSequence) else v for v in views])
    if isinstance(views, np.ndarray):
        views = torch.as_tensor(views)
    if views.dim() == 4:
        views = views[None]
    return views.to(dtype)


def _layer_adjacencies(state: EncoderState,
                       perturbations: list[GraphPerturbation | None] | None,
                       batch_size: int) -> list[torch.Tensor]:
    """One adjacency tensor per block: shared (V, V) without perturbations,
    per-sample (B, V, V) otherwise."""
    num_blocks = len(state.query_encoder.blocks)
    if perturbations is None or all(p is None for p in perturbations):
        return [state.base_adjacency] * num_blocks
    if len(perturbations) != batch_size:
        raise ValueError(f"{len(perturbations)} perturbations for batch of {batch_size}")
    base = state.base_adjacency.numpy()
    out = []
    for layer in range(num_blocks):
        stack = np.stack([
            normalized_adjacency(p.effective_adjacency(layer)) if p is not None else base
            for p in perturbations])
        out.append(torch.as_tensor(stack, dtype=state.config.torch_dtype))
    return out


def encode_query(state: EncoderState, views,
                 perturbations: list[GraphPerturbation | None] | None = None
                 ) -> torch.Tensor:
    """L2-normalized query embeddings (B, D); participates in gradients."""
    x = _as_batch(views, state.config.torch_dtype)
    adjacencies = _layer_adjacencies(state, perturbations, x.shape[0])
    z = state.query_head(state.query_encoder(x, adjacencies))
    return nn.functional.normalize(z, dim=1)


def encode_key(state: EncoderState, views,
               perturbations: list[GraphPerturbation | None] | None = None
               ) -> torch.Tensor:
    """L2-normalized key embeddings (B, D); never contributes gradients."""
    x = _as_batch(views, state.config.torch_dtype)
    adjacencies = _layer_adjacencies(state, perturbations, x.shape[0])
    with torch.no_grad():
        z = state.key_head(state.key_encoder(x, adjacencies))
        return nn.functional.normalize(z, dim=1)


def extract_latents(state: EncoderState, views) -> torch.Tensor:
    """Pre-projector pooled features from the query encoder, eval mode, no grad."""
    x = _as_batch(views, state.config.torch_dtype)
    adjacencies = [state.base_adjacency] * len(state.query_encoder.blocks)
    was_training = state.query_encoder.training
    state.query_encoder.eval()
    try:
        with torch.no_grad():
            return state.query_encoder(x, adjacencies)
    finally:
        state.query_encoder.train(was_training)


def momentum_update(state: EncoderState, m: float) -> EncoderState:
    """theta_k <- m * theta_k + (1 - m) * theta_q over all parameters."""
    if not 0.0 <= m < 1.0:
        raise ConfigError(f"momentum must be in [0, 1), got {m}")
    with torch.no_grad():
        for p_q, p_k in zip(state.query_parameters(), state.key_parameters()):
            p_k.mul_(m).add_(p_q, alpha=1.0 - m)
    return state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(state: EncoderState, path, step: int = 0,
                    optimizer_state: dict | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "encoder_config": asdict(state.config),
        "graph": {"num_joints": state.graph.num_joints,
                  "edges": list(state.graph.edges),
                  "root": state.graph.root,
                  "flip_pairs": list(state.graph.flip_pairs)},
        "query_encoder": state.query_encoder.state_dict(),
        "query_head": state.query_head.state_dict(),
        "key_encoder": state.key_encoder.state_dict(),
        "key_head": state.key_head.state_dict(),
        "optimizer_state": optimizer_state,
        "step": step,
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, str(path))


def load_checkpoint(path) -> dict:
    payload = torch.load(str(path), weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version!r}")
    cfg = payload["encoder_config"]
    cfg["block_channels"] = tuple(cfg["block_channels"])
    cfg["temporal_strides"] = tuple(cfg["temporal_strides"])
    config = EncoderConfig(**cfg)
    g = payload["graph"]
    graph = SkeletonGraph(num_joints=g["num_joints"],
                          edges=tuple(tuple(e) for e in g["edges"]),
                          root=g["root"],
                          flip_pairs=tuple(tuple(f) for f in g["flip_pairs"]))
    state = init_state(config, seed=0, graph=graph)
    state.query_encoder.load_state_dict(payload["query_encoder"])
    state.query_head.load_state_dict(payload["query_head"])
    state.key_encoder.load_state_dict(payload["key_encoder"])
    state.key_head.load_state_dict(payload["key_head"])
    payload["state"] = state
    return payload
