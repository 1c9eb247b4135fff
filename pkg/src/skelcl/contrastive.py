"""Memory queue, contrastive losses, branch-consistency objective, and pretraining.

The query branches encode a growing chain of augmented views; the key twin
encodes a lightly augmented view whose embedding is the positive for the
noise-contrastive loss and the anchor of every branch's conditional
distribution over {positive, queue negatives}. Adjacent branches are pulled
together one-way: the stronger branch moves toward a stop-gradient copy of
the weaker one.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
import torch
from torch import nn

from .augment import build_growing_policy, sample_group_set, apply_set, group_strategies
from .data import (
    Dataset,
    derive_stream_dataset,
    preprocess_dataset,
)
from .encoder import (
    EncoderConfig,
    EncoderState,
    encode_key,
    encode_query,
    init_state,
    load_checkpoint,
    momentum_update,
    save_checkpoint,
)
from .errors import ConfigError

SIM_FUNCTIONS = ("kl", "cosine", "l1")


@dataclass(frozen=True)
class TrainConfig:
    """All pretraining scalars; defaults follow the full-scale reference setup."""
    temperature: float = 0.07
    momentum: float = 0.999
    lambda_hier: float = 0.5
    queue_size: int = 32768
    arrangement: tuple[str, ...] = ("BA", "NA", "Mask")
    sim_function: str = "kl"
    epochs: int = 300
    batch_size: int = 128
    learning_rate: float = 0.1
    lr_schedule: str = "cosine"
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    stream: str = "joint"
    target_frames: int = 50
    aug_overrides: dict[str, dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lambda_hier < 0:
            raise ConfigError(f"lambda_hier must be >= 0, got {self.lambda_hier}")
        if self.batch_size > self.queue_size:
            raise ConfigError(f"batch_size {self.batch_size} exceeds queue size "
                              f"{self.queue_size}")
        if self.sim_function not in SIM_FUNCTIONS:
            raise ConfigError(f"sim_function must be one of {SIM_FUNCTIONS}, "
                              f"got {self.sim_function!r}")
        if not self.arrangement:
            raise ConfigError("arrangement must contain at least one group")
        for name in self.arrangement:
            group_strategies(name)
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"lr_schedule must be 'cosine' or 'constant'")

    @property
    def branch_count(self) -> int:
        return len(self.arrangement)


@dataclass(frozen=True)
class LossBreakdown:
    """Float record of one step's objective terms."""
    info_nce: float
    hierarchical: float
    total: float
    per_branch: tuple[float, ...]

    @classmethod
    def build(cls, info_nce: float, hierarchical: float, lambda_hier: float,
              per_branch: tuple[float, ...] = ()) -> "LossBreakdown":
        if lambda_hier < 0:
            raise ConfigError(f"lambda_hier must be >= 0, got {lambda_hier}")
        return cls(info_nce=float(info_nce), hierarchical=float(hierarchical),
                   total=float(info_nce) + lambda_hier * float(hierarchical),
                   per_branch=tuple(float(t) for t in per_branch))


class MemoryQueue:
    """Fixed-capacity FIFO of L2-normalized key embeddings."""

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise ConfigError(f"queue capacity must be >= 1, got {capacity}")
        self.buffer = torch.zeros(capacity, dim, dtype=dtype)
        self.cursor = 0
        self.total_enqueued = 0

    @classmethod
    def random_init(cls, capacity: int, dim: int, seed: int,
                    dtype: torch.dtype = torch.float32) -> "MemoryQueue":
        queue = cls(capacity, dim, dtype)
        rng = np.random.default_rng([seed, 3])
        vecs = rng.standard_normal((capacity, dim))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        queue.buffer = torch.as_tensor(vecs, dtype=dtype)
        return queue

    @property
    def capacity(self) -> int:
        return self.buffer.shape[0]

    @property
    def filled(self) -> bool:
        return self.total_enqueued >= self.capacity

    def enqueue(self, keys: torch.Tensor) -> "MemoryQueue":
        keys = keys.detach().to(self.buffer.dtype)
        if keys.dim() == 1:
            keys = keys[None]
        n = keys.shape[0]
        if n > self.capacity:
            raise ValueError(f"batch of {n} exceeds queue capacity {self.capacity}")
        first = min(n, self.capacity - self.cursor)
        self.buffer[self.cursor:self.cursor + first] = keys[:first]
        if first < n:
            self.buffer[:n - first] = keys[first:]
        self.cursor = (self.cursor + n) % self.capacity
        self.total_enqueued += n
        return self


def enqueue_batch(queue: MemoryQueue, key_embeddings: torch.Tensor) -> MemoryQueue:
    """FIFO write of a batch of key embeddings; oldest rows are overwritten."""
    return queue.enqueue(key_embeddings)


def _negatives(queue) -> torch.Tensor:
    if isinstance(queue, MemoryQueue):
        return queue.buffer
    return torch.as_tensor(queue)


def _pair_logits(z: torch.Tensor, z_anchor: torch.Tensor, negatives: torch.Tensor,
                 temperature: float) -> torch.Tensor:
    """(B, M+1) logits: column 0 is the positive, the rest the queue."""
    pos = (z * z_anchor).sum(dim=-1, keepdim=True)
    neg = z @ negatives.to(z.dtype).T
    return torch.cat([pos, neg], dim=1) / temperature


def info_nce(z: torch.Tensor, z_pos: torch.Tensor, queue, temperature: float
             ) -> torch.Tensor:
    """Noise-contrastive loss of the positive pair against the queue.

    -log(exp(z.z_pos / t) / (exp(z.z_pos / t) + sum_i exp(z.m_i / t))),
    averaged over the batch.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if z.dim() == 1:
        z, z_pos = z[None], z_pos[None]
    logits = _pair_logits(z, z_pos, _negatives(queue), temperature)
    targets = torch.zeros(logits.shape[0], dtype=torch.long)
    return nn.functional.cross_entropy(logits, targets)


def conditional_distribution(z_i: torch.Tensor, z_key: torch.Tensor, queue,
                             temperature: float) -> torch.Tensor:
    """Softmax similarity of z_i against [key positive, queue negatives].

    Returns (B, M+1) rows summing to one; entry 0 is the positive.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    squeeze = z_i.dim() == 1
    if squeeze:
        z_i, z_key = z_i[None], z_key[None]
    probs = torch.softmax(
        _pair_logits(z_i, z_key, _negatives(queue), temperature), dim=1)
    return probs[0] if squeeze else probs


def hierarchical_loss(z_list: list[torch.Tensor], z_key: torch.Tensor, queue,
                      temperature: float, sim_function: str = "kl"
                      ) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Adjacent-branch consistency with stop-gradient on the weaker branch.

    kl:     sum_i D_KL(stopgrad(p(.|z_{i-1})) || p(.|z_i)) over the
            (M+1)-way distributions from `conditional_distribution`
    cosine: sum_i -(z_i . stopgrad(z_{i-1}))
    l1:     sum_i ||z_i - stopgrad(z_{i-1})||_1
    Gradients flow only into the stronger branch z_i of each pair.
    Returns the batch-mean total and the per-pair terms.
    """
    if sim_function not in SIM_FUNCTIONS:
        raise ConfigError(f"sim_function must be one of {SIM_FUNCTIONS}, "
                          f"got {sim_function!r}")
    if len(z_list) <= 1:
        zero = torch.zeros((), dtype=z_key.dtype)
        return zero, []
    negatives = _negatives(queue)
    terms = []
    for i in range(1, len(z_list)):
        weak, strong = z_list[i - 1], z_list[i]
        if sim_function == "kl":
            target = torch.softmax(
                _pair_logits(weak, z_key, negatives, temperature), dim=1).detach()
            log_q = torch.log_softmax(
                _pair_logits(strong, z_key, negatives, temperature), dim=1)
            term = (target * (target.log() - log_q)).sum(dim=1).mean()
        elif sim_function == "cosine":
            term = -(strong * weak.detach()).sum(dim=1).mean()
        else:  # l1
            term = (strong - weak.detach()).abs().sum(dim=1).mean()
        terms.append(term)
    return sum(terms), terms


def total_loss(info: torch.Tensor, hierarchical: torch.Tensor, lambda_hier: float
               ) -> torch.Tensor:
    if lambda_hier < 0:
        raise ConfigError(f"lambda_hier must be >= 0, got {lambda_hier}")
    return info + lambda_hier * hierarchical


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Deterministic per-epoch sample order."""
    return np.random.default_rng([seed, 0, epoch]).permutation(n)


def step_rng(seed: int, global_step: int) -> np.random.Generator:
    """Owned generator for one step's augmentation sampling."""
    return np.random.default_rng([seed, 1, global_step])


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * step / max(total_steps, 1)))


def train_step(state: EncoderState, batch: list, queue: MemoryQueue,
               config: TrainConfig, optimizer: torch.optim.Optimizer,
               rng: np.random.Generator) -> tuple[EncoderState, MemoryQueue, LossBreakdown]:
    """One optimization step over a batch of preprocessed stream sequences.

    Per sample: build the growing chain plus a fresh basic set for the key
    view, encode all branches, take the contrastive loss on the basic pair
    and the branch-consistency loss across adjacent branches, then step the
    query, momentum-update the key twin, and enqueue the key embeddings.
    """
    graph = state.graph
    k = config.branch_count
    branch_views = [[] for _ in range(k)]
    branch_perts = [[] for _ in range(k)]
    key_views, key_perts = [], []
    style_pool = list(batch)
    for seq in batch:
        chain = build_growing_policy(config.arrangement, rng, config.aug_overrides)
        for i, aug_set in enumerate(chain.sets):
            view, pert = apply_set(aug_set, seq, graph, style_pool)
            branch_views[i].append(view.data)
            branch_perts[i].append(pert)
        key_set = sample_group_set(config.arrangement[:1], rng,
                                   overrides=config.aug_overrides)
        key_view, key_pert = apply_set(key_set, seq, graph, style_pool)
        key_views.append(key_view.data)
        key_perts.append(key_pert)

    z_list = [
        encode_query(state, np.stack(branch_views[i]),
                     branch_perts[i] if any(p is not None for p in branch_perts[i]) else None)
        for i in range(k)]
    z_key = encode_key(state, np.stack(key_views),
                       key_perts if any(p is not None for p in key_perts) else None)

    info = info_nce(z_list[0], z_key, queue, config.temperature)
    hier, terms = hierarchical_loss(z_list, z_key, queue, config.temperature,
                                    config.sim_function)
    loss = total_loss(info, hier, config.lambda_hier)

    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    momentum_update(state, config.momentum)
    enqueue_batch(queue, z_key)

    breakdown = LossBreakdown.build(info.item(), hier.item(), config.lambda_hier,
                                    tuple(t.item() for t in terms))
    return state, queue, breakdown


@dataclass
class PretrainResult:
    state: EncoderState
    queue: MemoryQueue
    log: list[dict]
    config: TrainConfig


def _make_optimizer(state: EncoderState, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(list(state.query_parameters()), lr=config.learning_rate,
                           momentum=config.sgd_momentum,
                           weight_decay=config.weight_decay)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def prepare_training_data(dataset: Dataset, config: TrainConfig) -> Dataset:
    """Center, resample to the target length, and derive the selected stream."""
    return derive_stream_dataset(
        preprocess_dataset(dataset, config.target_frames), config.stream)


def pretrain(dataset: Dataset, config: TrainConfig, seed: int,
             encoder_config: EncoderConfig | None = None,
             out_dir=None, checkpoint_every: int | None = None,
             resume_from=None, log_hook=None) -> PretrainResult:
    """Full pretraining loop; deterministic for a fixed seed and data order.

    Incomplete final batches are dropped. Checkpoints carry the queue and
    optimizer state, so resuming reproduces the uninterrupted run exactly.
    """
    prepared = prepare_training_data(dataset, config)
    sample = prepared.sequences[0]
    if encoder_config is None:
        encoder_config = EncoderConfig(num_joints=sample.num_joints,
                                       num_persons=sample.num_persons)

    n = len(prepared)
    if config.batch_size > n:
        raise ConfigError(f"batch_size {config.batch_size} exceeds dataset size {n}")
    steps_per_epoch = n // config.batch_size
    total_steps = config.epochs * steps_per_epoch

    start_step = 0
    log: list[dict] = []
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        state = payload["state"]
        encoder_config = state.config
        optimizer = _make_optimizer(state, config)
        optimizer.load_state_dict(payload["optimizer_state"])
        start_step = payload["step"]
        extra = payload["extra"]
        queue = MemoryQueue(config.queue_size, encoder_config.embed_dim,
                            dtype=encoder_config.torch_dtype)
        queue.buffer = extra["queue_buffer"].clone()
        queue.cursor = extra["queue_cursor"]
        queue.total_enqueued = extra["queue_total"]
    else:
        state = init_state(encoder_config, seed)
        optimizer = _make_optimizer(state, config)
        queue = MemoryQueue.random_init(config.queue_size, encoder_config.embed_dim,
                                        seed, dtype=encoder_config.torch_dtype)

    state.train_mode(True)

    def checkpoint(path, step):
        save_checkpoint(state, path, step=step, optimizer_state=optimizer.state_dict(),
                        extra={"train_config": asdict(config),
                               "seed": seed,
                               "queue_buffer": queue.buffer,
                               "queue_cursor": queue.cursor,
                               "queue_total": queue.total_enqueued})

    for step in range(start_step, total_steps):
        epoch = step // steps_per_epoch
        idx_in_epoch = step % steps_per_epoch
        order = epoch_order(seed, epoch, n)
        rows = order[idx_in_epoch * config.batch_size:(idx_in_epoch + 1) * config.batch_size]
        batch = [prepared.sequences[i] for i in rows]

        lr = (cosine_lr(config.learning_rate, step, total_steps)
              if config.lr_schedule == "cosine" else config.learning_rate)
        _set_lr(optimizer, lr)
        _, _, breakdown = train_step(state, batch, queue, config, optimizer,
                                     step_rng(seed, step))
        record = {"step": step, "epoch": epoch, "lr": lr,
                  "info_nce": breakdown.info_nce,
                  "hierarchical": breakdown.hierarchical,
                  "total": breakdown.total,
                  "per_branch": list(breakdown.per_branch),
                  "queue_filled": queue.filled}
        log.append(record)
        if log_hook is not None:
            log_hook(record)

        if out_dir is not None and checkpoint_every is not None:
            if (step + 1) % (checkpoint_every * steps_per_epoch) == 0:
                checkpoint(f"{out_dir}/checkpoint_step{step + 1}.pt", step + 1)

    if out_dir is not None:
        checkpoint(f"{out_dir}/checkpoint.pt", total_steps)
    return PretrainResult(state=state, queue=queue, log=log, config=config)
