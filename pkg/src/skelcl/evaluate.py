"""Evaluation protocols over a trained encoder and multi-stream score fusion.

All protocols consume pre-projector pooled features. The probe freezes the
encoder; the semi-supervised and supervised protocols fine-tune a copy of
it together with a linear classifier head.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import Dataset, derive_stream_dataset, preprocess_dataset
from .encoder import EncoderState, extract_latents
from .errors import ConfigError

PROTOCOLS = ("knn", "linear", "semi", "finetune")


@dataclass
class FeatureBank:
    """Extracted features (N, D) with aligned labels."""
    features: np.ndarray
    labels: np.ndarray
    split_tag: str

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on N")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("feature bank contains NaN or Inf")


@dataclass
class EvalReport:
    """Accuracy record of one protocol run; scores enable later fusion."""
    protocol: str
    top1_accuracy: float
    per_class_accuracy: list[float]
    config: dict
    scores: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if not 0.0 <= self.top1_accuracy <= 1.0:
            raise ValueError(f"accuracy {self.top1_accuracy} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"protocol": self.protocol,
                "top1_accuracy": self.top1_accuracy,
                "per_class_accuracy": list(self.per_class_accuracy),
                "config": self.config}

    def save(self, path) -> None:
        with open(str(path), "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def _report(protocol: str, predictions: np.ndarray, labels: np.ndarray,
            config: dict, scores: np.ndarray | None = None) -> EvalReport:
    classes = sorted(set(int(label) for label in labels))
    per_class = [float(np.mean(predictions[labels == c] == c)) for c in classes]
    return EvalReport(protocol=protocol,
                      top1_accuracy=float(np.mean(predictions == labels)),
                      per_class_accuracy=per_class, config=config,
                      scores=scores, labels=labels.copy())


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

def extract_features(state: EncoderState, dataset: Dataset, stream: str = "joint",
                     target_frames: int = 50, batch_size: int = 64) -> FeatureBank:
    """Deterministic eval-mode features; preprocessing only, no augmentation."""
    prepared = derive_stream_dataset(preprocess_dataset(dataset, target_frames), stream)
    chunks = []
    for lo in range(0, len(prepared), batch_size):
        batch = np.stack([s.data for s in prepared.sequences[lo:lo + batch_size]])
        chunks.append(extract_latents(state, batch).numpy())
    return FeatureBank(features=np.concatenate(chunks, axis=0),
                       labels=prepared.labels(), split_tag=prepared.split_tag)


# ---------------------------------------------------------------------------
# KNN protocol
# ---------------------------------------------------------------------------

def knn_eval(train_bank: FeatureBank, test_bank: FeatureBank,
             k_neighbors: int = 20) -> EvalReport:
    """Cosine-similarity majority vote among the k nearest training features.

    Ties go to the larger summed similarity, then to the lowest class id.
    """
    if k_neighbors < 1:
        raise ConfigError(f"k_neighbors must be >= 1, got {k_neighbors}")
    if len(train_bank.labels) == 0 or len(test_bank.labels) == 0:
        raise ValueError("empty feature bank")
    k = min(k_neighbors, len(train_bank.labels))

    def normalize(x):
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        return x / np.maximum(norms, 1e-12)

    train = normalize(train_bank.features.astype(np.float64))
    test = normalize(test_bank.features.astype(np.float64))
    sims = test @ train.T  # (N_test, N_train)
    num_classes = int(max(train_bank.labels.max(), test_bank.labels.max())) + 1

    predictions = np.zeros(len(test_bank.labels), dtype=np.int64)
    scores = np.zeros((len(test_bank.labels), num_classes))
    for i in range(sims.shape[0]):
        top = np.argpartition(-sims[i], k - 1)[:k]
        votes = np.zeros(num_classes, dtype=np.int64)
        sim_sum = np.zeros(num_classes)
        for j in top:
            cls = train_bank.labels[j]
            votes[cls] += 1
            sim_sum[cls] += sims[i, j]
        best = np.flatnonzero(votes == votes.max())
        if len(best) > 1:
            strongest = sim_sum[best].max()
            best = best[np.isclose(sim_sum[best], strongest) | (sim_sum[best] == strongest)]
        predictions[i] = best.min()
        scores[i] = sim_sum
    return _report("knn", predictions, test_bank.labels,
                   {"k_neighbors": k_neighbors}, scores=scores)


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    """Linear probe on frozen features: step-decay SGD on cross-entropy."""
    epochs: int = 80
    batch_size: int = 128
    learning_rate: float = 0.5
    momentum: float = 0.9
    lr_drops: tuple[int, ...] = (50, 70)
    lr_decay: float = 0.1


def _train_linear_head(features: torch.Tensor, labels: torch.Tensor,
                       num_classes: int, cfg: ProbeConfig, seed: int) -> nn.Linear:
    torch_gen = torch.Generator().manual_seed(seed)
    head = nn.Linear(features.shape[1], num_classes)
    with torch.no_grad():
        bound = 1.0 / np.sqrt(features.shape[1])
        head.weight.uniform_(-bound, bound, generator=torch_gen)
        head.bias.zero_()
    optimizer = torch.optim.SGD(head.parameters(), lr=cfg.learning_rate,
                                momentum=cfg.momentum)
    n = features.shape[0]
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay ** sum(epoch >= d for d in cfg.lr_drops)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = np.random.default_rng([seed, epoch]).permutation(n)
        for lo in range(0, n, cfg.batch_size):
            rows = order[lo:lo + cfg.batch_size]
            logits = head(features[rows])
            loss = nn.functional.cross_entropy(logits, labels[rows])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    return head


def linear_eval(state: EncoderState, train_ds: Dataset, test_ds: Dataset,
                probe: ProbeConfig = ProbeConfig(), stream: str = "joint",
                target_frames: int = 50, seed: int = 0) -> EvalReport:
    """Train a linear classifier on frozen encoder features; encoder untouched."""
    train_bank = extract_features(state, train_ds, stream, target_frames)
    test_bank = extract_features(state, test_ds, stream, target_frames)
    features = torch.as_tensor(train_bank.features, dtype=torch.float32)
    labels = torch.as_tensor(train_bank.labels, dtype=torch.long)
    head = _train_linear_head(features, labels, train_ds.class_count, probe, seed)
    with torch.no_grad():
        logits = head(torch.as_tensor(test_bank.features, dtype=torch.float32))
    scores = logits.numpy()
    return _report("linear", scores.argmax(axis=1), test_bank.labels,
                   {"probe_epochs": probe.epochs, "stream": stream, "seed": seed},
                   scores=scores)


# ---------------------------------------------------------------------------
# Fine-tuning protocols
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneConfig:
    """Whole-model fine-tuning on labeled data."""
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4


def stratified_indices(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Per-class sample of round(fraction * class size) indices, sorted.

    fraction 1.0 selects everything; a class rounding to zero samples is an
    error naming the class.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return np.arange(len(labels))
    rng = np.random.default_rng([seed, 7])
    picks = []
    for cls in sorted(set(int(label) for label in labels)):
        rows = np.flatnonzero(labels == cls)
        n = int(round(fraction * len(rows)))
        if n < 1:
            raise ValueError(f"fraction {fraction} yields no samples for class {cls}")
        picks.append(rng.choice(rows, size=n, replace=False))
    return np.sort(np.concatenate(picks))


def _finetune(state: EncoderState, train_ds: Dataset, indices: np.ndarray,
              test_ds: Dataset, cfg: FinetuneConfig, stream: str,
              target_frames: int, seed: int, protocol: str,
              extra_config: dict | None = None) -> EvalReport:
    """Shared trainer: fine-tunes a copy of the encoder plus a linear head."""
    work = copy.deepcopy(state)
    work.train_mode(True)
    train_prepared = derive_stream_dataset(
        preprocess_dataset(train_ds, target_frames), stream)
    data = np.stack([train_prepared.sequences[i].data for i in indices])
    labels = torch.as_tensor(
        np.array([train_prepared.sequences[i].label for i in indices]), dtype=torch.long)

    torch_gen = torch.Generator().manual_seed(seed)
    head = nn.Linear(work.config.feature_dim, train_ds.class_count)
    with torch.no_grad():
        bound = 1.0 / np.sqrt(work.config.feature_dim)
        head.weight.uniform_(-bound, bound, generator=torch_gen)
        head.bias.zero_()

    params = list(work.query_encoder.parameters()) + list(head.parameters())
    optimizer = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    adjacencies = [work.base_adjacency] * len(work.query_encoder.blocks)
    n = data.shape[0]
    loss_per_epoch = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([seed, 5, epoch]).permutation(n)
        epoch_losses = []
        for lo in range(0, n, cfg.batch_size):
            rows = order[lo:lo + cfg.batch_size]
            if len(rows) < 2:
                continue  # batch statistics need at least two samples
            x = torch.as_tensor(data[rows], dtype=work.config.torch_dtype)
            latents = work.query_encoder(x, adjacencies)
            loss = nn.functional.cross_entropy(head(latents), labels[rows])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())
        loss_per_epoch.append(float(np.mean(epoch_losses)))

    test_bank = extract_features(work, test_ds, stream, target_frames)
    work.query_encoder.eval()
    with torch.no_grad():
        logits = head(torch.as_tensor(test_bank.features, dtype=torch.float32))
    scores = logits.numpy()
    config = {"epochs": cfg.epochs, "stream": stream, "seed": seed,
              "train_size": int(n), "loss_per_epoch": loss_per_epoch}
    config.update(extra_config or {})
    return _report(protocol, scores.argmax(axis=1), test_bank.labels, config,
                   scores=scores)


def semi_supervised_eval(state: EncoderState, train_ds: Dataset, fraction: float,
                         test_ds: Dataset, cfg: FinetuneConfig = FinetuneConfig(),
                         stream: str = "joint", target_frames: int = 50,
                         seed: int = 0) -> EvalReport:
    """Fine-tune on a stratified labeled subset (e.g. 1% or 10%)."""
    labels = derive_stream_dataset(
        preprocess_dataset(train_ds, target_frames), stream).labels()
    indices = stratified_indices(labels, fraction, seed)
    return _finetune(state, train_ds, indices, test_ds, cfg, stream, target_frames,
                     seed, protocol="semi", extra_config={"fraction": fraction})


def supervised_eval(state: EncoderState, train_ds: Dataset, test_ds: Dataset,
                    cfg: FinetuneConfig = FinetuneConfig(), stream: str = "joint",
                    target_frames: int = 50, seed: int = 0) -> EvalReport:
    """Fine-tune the whole model on all labeled training data."""
    indices = np.arange(len(train_ds))
    return _finetune(state, train_ds, indices, test_ds, cfg, stream, target_frames,
                     seed, protocol="finetune")


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def ensemble_fuse(reports: list[EvalReport], weights: list[float]) -> EvalReport:
    """Weighted sum of per-stream softmax scores, argmax per sample."""
    if not reports:
        raise ConfigError("ensemble_fuse needs at least one report")
    if len(weights) != len(reports):
        raise ConfigError(f"{len(weights)} weights for {len(reports)} reports")
    if any(w < 0 for w in weights):
        raise ConfigError("fusion weights must be nonnegative")
    labels = reports[0].labels
    for r in reports[1:]:
        if r.labels is None or not np.array_equal(r.labels, labels):
            raise ValueError("reports evaluate different test orders")
    if any(r.scores is None for r in reports):
        raise ValueError("all reports must carry score matrices for fusion")
    fused = sum(w * _softmax(r.scores) for w, r in zip(weights, reports))
    predictions = fused.argmax(axis=1)
    return _report(reports[0].protocol, predictions, labels,
                   {"fusion_weights": list(weights),
                    "fused": [r.config for r in reports]}, scores=fused)


DEFAULT_FUSION_WEIGHTS = {"joint": 0.6, "bone": 0.6, "motion": 0.4}
