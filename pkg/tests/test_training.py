import numpy as np
import pytest
import torch

import skelcl.contrastive as contrastive
from skelcl.contrastive import (
    MemoryQueue,
    TrainConfig,
    _make_optimizer,
    info_nce,
    prepare_training_data,
    pretrain,
    step_rng,
    train_step,
)
from skelcl.data import SynthSpec, synth_generate
from skelcl.encoder import EncoderConfig, encode_key, encode_query, init_state, load_checkpoint
from skelcl.errors import ConfigError

SMALL_ENC = EncoderConfig(num_joints=11, block_channels=(8, 16),
                          temporal_strides=(1, 2), embed_dim=32)


@pytest.fixture(scope="module")
def small_dataset():
    spec = SynthSpec(class_count=4, sequences_per_class=8, num_joints=11,
                     raw_frames=24, noise_scale=0.02)
    return synth_generate(spec, seed=2)


def small_config(**kw):
    defaults = dict(epochs=2, batch_size=8, queue_size=64,
                    arrangement=("BA", "NA", "Mask"), learning_rate=0.05,
                    target_frames=24)
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_pretrain_deterministic(small_dataset):
    cfg = small_config()
    r1 = pretrain(small_dataset, cfg, seed=11, encoder_config=SMALL_ENC)
    r2 = pretrain(small_dataset, cfg, seed=11, encoder_config=SMALL_ENC)
    assert len(r1.log) == len(r2.log) == 8
    for a, b in zip(r1.log, r2.log):
        assert a == b


def test_pretrain_loss_decomposition_identity(small_dataset):
    cfg = small_config(lambda_hier=0.5)
    result = pretrain(small_dataset, cfg, seed=3, encoder_config=SMALL_ENC)
    for record in result.log:
        expected = record["info_nce"] + cfg.lambda_hier * record["hierarchical"]
        assert abs(record["total"] - expected) < 1e-7
        assert len(record["per_branch"]) == cfg.branch_count - 1


def test_pretrain_checkpoint_echoes_config(tmp_path, small_dataset):
    cfg = small_config()
    pretrain(small_dataset, cfg, seed=5, encoder_config=SMALL_ENC,
             out_dir=str(tmp_path))
    payload = load_checkpoint(tmp_path / "checkpoint.pt")
    from dataclasses import asdict
    echoed = payload["extra"]["train_config"]
    expected = asdict(cfg)
    echoed["arrangement"] = tuple(echoed["arrangement"])
    assert echoed == expected
    assert payload["extra"]["seed"] == 5


def test_pretrain_resume_matches_uninterrupted(tmp_path, small_dataset):
    cfg = small_config(epochs=4)
    full = pretrain(small_dataset, cfg, seed=7, encoder_config=SMALL_ENC,
                    out_dir=str(tmp_path), checkpoint_every=2)
    resumed = pretrain(small_dataset, cfg, seed=7,
                       resume_from=tmp_path / "checkpoint_step8.pt")
    # resumed log covers steps 8..15; compare against the tail of the full run
    assert [r["step"] for r in resumed.log] == [r["step"] for r in full.log[8:]]
    for a, b in zip(resumed.log, full.log[8:]):
        assert abs(a["total"] - b["total"]) < 1e-6
        assert abs(a["info_nce"] - b["info_nce"]) < 1e-6


def test_train_step_enqueues_key_embeddings(small_dataset, monkeypatch):
    cfg = small_config()
    prepared = prepare_training_data(small_dataset, cfg)
    state = init_state(SMALL_ENC, seed=1)
    state.train_mode(True)
    queue = MemoryQueue.random_init(cfg.queue_size, SMALL_ENC.embed_dim, seed=1)
    optimizer = _make_optimizer(state, cfg)

    captured = {}
    original = contrastive.encode_key

    def capture(*args, **kwargs):
        out = original(*args, **kwargs)
        captured["z_key"] = out.detach().clone()
        return out

    monkeypatch.setattr(contrastive, "encode_key", capture)
    batch = prepared.sequences[:8]
    cursor_before = queue.cursor
    train_step(state, batch, queue, cfg, optimizer, step_rng(1, 0))
    newest = queue.buffer[cursor_before:cursor_before + 8]
    assert torch.allclose(newest, captured["z_key"].to(newest.dtype), atol=1e-7)
    assert queue.cursor == cursor_before + 8


def test_infonce_near_uniform_at_init(small_dataset):
    # With a fresh encoder and a random queue the logits are near-uniform:
    # positives at most 1, negatives concentrated at 0, so at temperature 1
    # the loss stays within 10% of ln(M+1) for the reference queue size.
    cfg = small_config(queue_size=32768, arrangement=("BA",), lambda_hier=0.0)
    prepared = prepare_training_data(small_dataset, cfg)
    enc = EncoderConfig(num_joints=11)
    state = init_state(enc, seed=0)
    state.train_mode(True)
    queue = MemoryQueue.random_init(32768, enc.embed_dim, seed=0)
    x = np.stack([s.data for s in prepared.sequences[:8]])
    loss = info_nce(encode_query(state, x), encode_key(state, x), queue,
                    temperature=1.0).item()
    target = np.log(32768 + 1)
    assert abs(loss - target) / target < 0.10


def test_smoke_descent_after_queue_warmup(small_dataset):
    # Loss statistics exclude the queue warm-up; once every negative is a real
    # key, continued training on the fixed batch lowers the objective.
    # Thresholds frozen from the first build: post-warmup mean ~4.27,
    # final-window mean ~3.8 at these settings.
    cfg = small_config(epochs=1, arrangement=("BA",), lambda_hier=0.0,
                       learning_rate=0.2, lr_schedule="constant")
    prepared = prepare_training_data(small_dataset, cfg)
    state = init_state(SMALL_ENC, seed=1)
    state.train_mode(True)
    queue = MemoryQueue.random_init(cfg.queue_size, SMALL_ENC.embed_dim, seed=1)
    optimizer = _make_optimizer(state, cfg)
    batch = prepared.sequences[:8]
    losses, filled_at = [], None
    for step in range(40):
        _, _, bd = train_step(state, batch, queue, cfg, optimizer, step_rng(1, step))
        losses.append(bd.total)
        if filled_at is None and queue.filled:
            filled_at = step
    post_warmup = np.mean(losses[filled_at + 1:filled_at + 6])
    final = np.mean(losses[-5:])
    assert final < post_warmup


def test_pretrain_rejects_oversized_batch(small_dataset):
    cfg = small_config(batch_size=64, queue_size=64)
    with pytest.raises(ConfigError):
        pretrain(small_dataset, cfg, seed=0, encoder_config=SMALL_ENC)


def test_queue_filled_flag_in_log(small_dataset):
    cfg = small_config(epochs=3, queue_size=64)
    result = pretrain(small_dataset, cfg, seed=9, encoder_config=SMALL_ENC)
    flags = [r["queue_filled"] for r in result.log]
    assert flags[0] is False
    assert flags[-1] is True
    assert flags == sorted(flags)  # once filled, stays filled
