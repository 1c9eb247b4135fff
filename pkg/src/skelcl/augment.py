"""Augmentation strategies, instance sampling, and the growing augmentation policy.

A sampled AugmentationInstance pins every random choice of a transform, so
applying the same instance to the same input twice is bit-identical. Sets
are ordered lists of instances; a chain of sets grows by one strategy group
per set, with every group's instances freshly re-sampled in every set.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import ndimage

from .data import SkeletonGraph, SkeletonSequence, resample_array
from .errors import ConfigError

# Strategy groups: basic (BA), normal (NA), and one strong strategy per group.
STRATEGY_GROUPS: dict[str, tuple[str, ...]] = {
    "BA": ("shear", "crop"),
    "NA": ("spatial_flip", "rotation", "gaussian_noise", "gaussian_blur", "channel_mask"),
    "Mask": ("random_mask",),
    "DAE": ("drop_add_edges",),
    "AdaIN": ("skele_adain",),
}

ALL_STRATEGIES = tuple(s for group in STRATEGY_GROUPS.values() for s in group)

# Declared default parameter ranges (the sampling distributions).
SHEAR_RANGE = 0.5
CROP_MIN_SPAN = 0.5
ROTATION_MAX_RAD = np.deg2rad(30.0)
FLIP_PROB = 0.5
NOISE_SIGMA = 0.01
BLUR_SIGMA_RANGE = (0.1, 2.0)
CHANNEL_MASK_PROB = 0.5
MASK_PROB_RANGE = (0.2, 0.5)
DAE_DROP_PROB = 0.1
DAE_ADD_PROB = 0.1
ADAIN_EPS = 1e-5


@dataclass(frozen=True)
class AugmentationInstance:
    """One fully-sampled transform: strategy name, pinned params, pinned seed."""
    strategy_id: str
    params: dict[str, Any]
    rng_seed: int


@dataclass(frozen=True)
class AugmentationSet:
    """Ordered instances applied left to right; set_index is the chain position."""
    instances: tuple[AugmentationInstance, ...]
    set_index: int
    group_names: tuple[str, ...] = ()


@dataclass(frozen=True)
class AugmentationSetChain:
    """Growing chain: set j holds fresh instances for arrangement groups 0..j."""
    sets: tuple[AugmentationSet, ...]
    strategy_arrangement: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.sets)


@dataclass(frozen=True)
class GraphPerturbation:
    """Structural edge drop/add derived deterministically from a seed.

    When per_layer is set, each encoder aggregation layer derives a fresh
    edge pattern from (rng_seed, layer); otherwise layer 0's pattern is
    reused everywhere. Self-loops are never touched.
    """
    graph: SkeletonGraph
    p_drop: float
    p_add: float
    per_layer: bool
    rng_seed: int

    def layer_edges(self, layer: int) -> tuple[frozenset, frozenset]:
        """(dropped, added) undirected edge sets for one aggregation layer."""
        rng = np.random.default_rng([self.rng_seed, layer if self.per_layer else 0])
        v = self.graph.num_joints
        existing = {tuple(sorted(e)) for e in self.graph.edges}
        dropped = frozenset(e for e in sorted(existing) if rng.random() < self.p_drop)
        absent = [(i, j) for i in range(v) for j in range(i + 1, v)
                  if (i, j) not in existing]
        added = frozenset(e for e in absent if rng.random() < self.p_add)
        return dropped, added

    @property
    def dropped_edges(self) -> frozenset:
        return self.layer_edges(0)[0]

    @property
    def added_edges(self) -> frozenset:
        return self.layer_edges(0)[1]

    def effective_adjacency(self, layer: int = 0) -> np.ndarray:
        """Perturbed symmetric adjacency with self-loops preserved."""
        adj = self.graph.adjacency
        dropped, added = self.layer_edges(layer)
        for i, j in dropped:
            adj[i, j] = adj[j, i] = 0.0
        for i, j in added:
            adj[i, j] = adj[j, i] = 1.0
        return adj


# ---------------------------------------------------------------------------
# Instance sampling
# ---------------------------------------------------------------------------

def _check_prob(name: str, value: float) -> float:
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{name} must be in [0, 1], got {value}")
    return float(value)


def sample_instance(strategy_id: str, rng: np.random.Generator,
                    overrides: dict[str, Any] | None = None) -> AugmentationInstance:
    """Draw one instance from the strategy's declared parameter distribution.

    `overrides` replaces sampled or fixed params by name (used by experiment
    configs to pin e.g. mask probability).
    """
    if strategy_id == "shear":
        mat = np.eye(3)
        off = rng.uniform(-SHEAR_RANGE, SHEAR_RANGE, size=6)
        mat[0, 1], mat[0, 2], mat[1, 0], mat[1, 2], mat[2, 0], mat[2, 1] = off
        params: dict[str, Any] = {"matrix": mat.tolist()}
    elif strategy_id == "crop":
        span = rng.uniform(CROP_MIN_SPAN, 1.0)
        start = rng.uniform(0.0, 1.0 - span)
        params = {"start": float(start), "span": float(span)}
    elif strategy_id == "spatial_flip":
        params = {"apply": bool(rng.random() < FLIP_PROB)}
    elif strategy_id == "rotation":
        params = {"angles": rng.uniform(-ROTATION_MAX_RAD, ROTATION_MAX_RAD, size=3).tolist()}
    elif strategy_id == "gaussian_noise":
        params = {"sigma": NOISE_SIGMA}
    elif strategy_id == "gaussian_blur":
        params = {"sigma": float(rng.uniform(*BLUR_SIGMA_RANGE))}
    elif strategy_id == "channel_mask":
        params = {"apply": bool(rng.random() < CHANNEL_MASK_PROB),
                  "channel": int(rng.integers(3))}
    elif strategy_id == "random_mask":
        params = {"p_mask": float(rng.uniform(*MASK_PROB_RANGE)), "fill": 0.0}
    elif strategy_id == "drop_add_edges":
        params = {"p_drop": DAE_DROP_PROB, "p_add": DAE_ADD_PROB, "per_layer": True}
    elif strategy_id == "skele_adain":
        params = {"style_u": float(rng.random()), "eps": ADAIN_EPS}
    else:
        raise ConfigError(f"unknown augmentation strategy {strategy_id!r}, "
                          f"expected one of {ALL_STRATEGIES}")
    if overrides:
        params.update(overrides)
    return AugmentationInstance(strategy_id=strategy_id, params=params,
                                rng_seed=int(rng.integers(0, 2 ** 63)))


def group_strategies(group_name: str) -> tuple[str, ...]:
    """Strategies of one arrangement entry; '+' merges groups in order."""
    names = group_name.split("+")
    for name in names:
        if name not in STRATEGY_GROUPS:
            raise ConfigError(f"unknown augmentation group {name!r}, "
                              f"valid groups: {sorted(STRATEGY_GROUPS)}")
    return tuple(s for name in names for s in STRATEGY_GROUPS[name])


def sample_group_set(groups: list[str] | tuple[str, ...], rng: np.random.Generator,
                     set_index: int = 0,
                     overrides: dict[str, dict[str, Any]] | None = None) -> AugmentationSet:
    """Freshly sample one set holding instances for the given groups, in order."""
    overrides = overrides or {}
    instances = tuple(
        sample_instance(strategy, rng, overrides.get(strategy))
        for group in groups for strategy in group_strategies(group))
    return AugmentationSet(instances=instances, set_index=set_index,
                           group_names=tuple(groups))


def build_growing_policy(arrangement: list[str] | tuple[str, ...],
                         rng: np.random.Generator,
                         overrides: dict[str, dict[str, Any]] | None = None
                         ) -> AugmentationSetChain:
    """Build the growing chain: set j spans arrangement groups 0..j.

    Every set re-samples all of its instances, so the same strategy position
    carries different instances in different sets.
    """
    if not arrangement:
        raise ConfigError("arrangement must contain at least one augmentation group")
    sets = tuple(
        sample_group_set(arrangement[:j + 1], rng, set_index=j, overrides=overrides)
        for j in range(len(arrangement)))
    return AugmentationSetChain(sets=sets, strategy_arrangement=tuple(arrangement))


# ---------------------------------------------------------------------------
# Transform application
# ---------------------------------------------------------------------------

def _apply_shear(data: np.ndarray, inst: AugmentationInstance) -> np.ndarray:
    mat = np.asarray(inst.params["matrix"], dtype=np.float64)
    return np.einsum("ij,jtvp->itvp", mat, data).astype(data.dtype, copy=False)


def _apply_crop(data: np.ndarray, inst: AugmentationInstance) -> np.ndarray:
    t = data.shape[1]
    t0 = int(round(inst.params["start"] * t))
    t1 = int(round((inst.params["start"] + inst.params["span"]) * t))
    t0 = min(max(t0, 0), t - 1)
    t1 = max(min(t1, t), t0 + 1)
    return resample_array(data[:, t0:t1], t)


def _apply_flip(data: np.ndarray, inst: AugmentationInstance,
                graph: SkeletonGraph) -> np.ndarray:
    if not inst.params["apply"]:
        return data.copy()
    return data[:, :, graph.flip_permutation()].copy()


def _rotation_matrix(angles) -> np.ndarray:
    ax, ay, az = angles
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _apply_rotation(data: np.ndarray, inst: AugmentationInstance) -> np.ndarray:
    rot = _rotation_matrix(inst.params["angles"])
    return np.einsum("ij,jtvp->itvp", rot, data).astype(data.dtype, copy=False)


def _apply_noise(data: np.ndarray, inst: AugmentationInstance) -> np.ndarray:
    rng = np.random.default_rng(inst.rng_seed)
    noise = inst.params["sigma"] * rng.standard_normal(data.shape)
    return (data + noise).astype(data.dtype, copy=False)


def _apply_blur(data: np.ndarray, inst: AugmentationInstance) -> np.ndarray:
    return ndimage.gaussian_filter1d(
        data.astype(np.float64), sigma=inst.params["sigma"], axis=1,
        mode="nearest").astype(data.dtype, copy=False)


def _apply_channel_mask(data: np.ndarray, inst: AugmentationInstance) -> np.ndarray:
    out = data.copy()
    if inst.params["apply"]:
        out[inst.params["channel"]] = 0.0
    return out


def random_mask(seq: SkeletonSequence, instance: AugmentationInstance) -> SkeletonSequence:
    """Zero out (frame, joint, person) cells independently with probability p_mask.

    A masked cell drops all coordinate channels at once; unmasked cells are
    bit-identical to the input.
    """
    p_mask = _check_prob("p_mask", instance.params["p_mask"])
    fill = instance.params.get("fill", 0.0)
    rng = np.random.default_rng(instance.rng_seed)
    c, t, v, p = seq.data.shape
    cells = rng.random((t, v, p)) < p_mask
    out = seq.data.copy()
    out[:, cells] = fill
    return SkeletonSequence(data=out, label=seq.label, subject_id=seq.subject_id,
                            view_id=seq.view_id)


def drop_add_edges(graph: SkeletonGraph, instance: AugmentationInstance) -> GraphPerturbation:
    """Build the structural perturbation carried to the encoder."""
    p_drop = _check_prob("p_drop", instance.params["p_drop"])
    p_add = _check_prob("p_add", instance.params["p_add"])
    return GraphPerturbation(graph=graph, p_drop=p_drop, p_add=p_add,
                             per_layer=bool(instance.params.get("per_layer", True)),
                             rng_seed=instance.rng_seed)


def skele_adain(content: SkeletonSequence, style: SkeletonSequence,
                instance: AugmentationInstance) -> SkeletonSequence:
    """Transfer per-channel mean/std of the style sequence onto the content.

    Statistics are taken over (T, V, P) per coordinate channel; the map is a
    per-channel affine with nonnegative slope, so within-channel value order
    is preserved.
    """
    if content.data.shape != style.data.shape:
        raise ValueError(f"content shape {content.data.shape} != style shape {style.data.shape}")
    eps = float(instance.params.get("eps", ADAIN_EPS))
    c_data = content.data.astype(np.float64)
    s_data = style.data.astype(np.float64)
    mu_c = c_data.mean(axis=(1, 2, 3), keepdims=True)
    sd_c = c_data.std(axis=(1, 2, 3), keepdims=True)
    mu_s = s_data.mean(axis=(1, 2, 3), keepdims=True)
    sd_s = s_data.std(axis=(1, 2, 3), keepdims=True)
    out = sd_s * (c_data - mu_c) / (sd_c + eps) + mu_s
    return SkeletonSequence(data=out.astype(content.data.dtype, copy=False),
                            label=content.label, subject_id=content.subject_id,
                            view_id=content.view_id)


def apply_set(aug_set: AugmentationSet, seq: SkeletonSequence,
              graph: SkeletonGraph | None = None,
              style_pool: list[SkeletonSequence] | None = None
              ) -> tuple[SkeletonSequence, GraphPerturbation | None]:
    """Apply a set's instances in order.

    Coordinate-space strategies transform the data; drop_add_edges leaves the
    coordinates alone and is returned as a GraphPerturbation for the encoder.
    skele_adain picks its style sample out of `style_pool` via the instance's
    pinned style_u.
    """
    data = seq.data.copy()
    perturbation = None
    for inst in aug_set.instances:
        sid = inst.strategy_id
        if sid == "shear":
            data = _apply_shear(data, inst)
        elif sid == "crop":
            data = _apply_crop(data, inst)
        elif sid == "spatial_flip":
            if graph is None:
                raise ConfigError("spatial_flip requires the skeleton graph")
            data = _apply_flip(data, inst, graph)
        elif sid == "rotation":
            data = _apply_rotation(data, inst)
        elif sid == "gaussian_noise":
            data = _apply_noise(data, inst)
        elif sid == "gaussian_blur":
            data = _apply_blur(data, inst)
        elif sid == "channel_mask":
            data = _apply_channel_mask(data, inst)
        elif sid == "random_mask":
            data = random_mask(SkeletonSequence(data=data), inst).data
        elif sid == "drop_add_edges":
            if graph is None:
                raise ConfigError("drop_add_edges requires the skeleton graph")
            if perturbation is not None:
                raise ValueError("at most one structural perturbation per set")
            perturbation = drop_add_edges(graph, inst)
        elif sid == "skele_adain":
            if not style_pool:
                raise ConfigError("skele_adain requires a non-empty style pool")
            style = style_pool[int(inst.params["style_u"] * len(style_pool))]
            data = skele_adain(SkeletonSequence(data=data), style, inst).data
        else:
            raise ConfigError(f"unknown augmentation strategy {sid!r}")
        if data.shape != seq.data.shape:
            raise RuntimeError(f"{sid} changed shape {seq.data.shape} -> {data.shape}")
    out = SkeletonSequence(data=data, label=seq.label, subject_id=seq.subject_id,
                           view_id=seq.view_id)
    return out, perturbation
