import numpy as np
import pytest
import torch

from skelcl.contrastive import TrainConfig
from skelcl.data import SynthSpec, synth_generate
from skelcl.encoder import EncoderConfig, init_state
from skelcl.errors import ConfigError
from skelcl.evaluate import (
    EvalReport,
    FeatureBank,
    FinetuneConfig,
    ProbeConfig,
    _train_linear_head,
    ensemble_fuse,
    extract_features,
    knn_eval,
    linear_eval,
    semi_supervised_eval,
    stratified_indices,
    supervised_eval,
)

ENC = EncoderConfig(num_joints=11, block_channels=(4, 8), temporal_strides=(1, 2),
                    temporal_kernel=3, embed_dim=8)


@pytest.fixture(scope="module")
def state():
    return init_state(ENC, seed=3)


@pytest.fixture(scope="module")
def split_data():
    spec = SynthSpec(class_count=4, sequences_per_class=8, num_joints=11,
                     raw_frames=24, noise_scale=0.01)
    return (synth_generate(spec, seed=5, split="train"),
            synth_generate(spec, seed=5, split="test"))


def one_hot_bank(labels, split):
    n_cls = int(labels.max()) + 1
    feats = np.eye(n_cls)[labels].astype(np.float64)
    return FeatureBank(features=feats, labels=labels, split_tag=split)


def random_bank(rng, n, dim, n_classes, split):
    labels = np.repeat(np.arange(n_classes), n // n_classes)
    return FeatureBank(features=rng.normal(size=(n, dim)), labels=labels,
                       split_tag=split)


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

def test_extract_deterministic(state, split_data):
    train, _ = split_data
    b1 = extract_features(state, train, target_frames=24)
    b2 = extract_features(state, train, target_frames=24)
    assert np.array_equal(b1.features, b2.features)
    assert np.array_equal(b1.labels, b2.labels)


def test_extract_row_count(state, split_data):
    train, _ = split_data
    bank = extract_features(state, train, target_frames=24)
    assert bank.features.shape == (len(train), ENC.feature_dim)


def test_extract_features_finite_and_varying(state, split_data):
    train, _ = split_data
    bank = extract_features(state, train, target_frames=24)
    assert np.all(np.isfinite(bank.features))
    assert np.ptp(bank.features, axis=0).max() > 0


# ---------------------------------------------------------------------------
# KNN
# ---------------------------------------------------------------------------

def test_knn_self_test_is_perfect(rng):
    bank = random_bank(rng, 40, 16, 4, "train")
    report = knn_eval(bank, bank, k_neighbors=1)
    assert report.top1_accuracy == 1.0


def test_knn_one_hot_clusters(rng):
    labels = np.repeat(np.arange(4), 10)
    train = one_hot_bank(labels, "train")
    test = one_hot_bank(labels, "test")
    for k in (1, 5, 10):
        assert knn_eval(train, test, k_neighbors=k).top1_accuracy == 1.0


def test_knn_chance_band_for_random_features():
    accs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        train = random_bank(rng, 160, 24, 8, "train")
        test = random_bank(rng, 160, 24, 8, "test")
        accs.append(knn_eval(train, test, k_neighbors=20).top1_accuracy)
    assert 0.075 <= np.mean(accs) <= 0.18


def test_knn_orthogonal_rotation_invariance(rng):
    train = random_bank(rng, 60, 12, 3, "train")
    test = random_bank(rng, 30, 12, 3, "test")
    q, _ = np.linalg.qr(rng.normal(size=(12, 12)))
    r1 = knn_eval(train, test, k_neighbors=5)
    train_rot = FeatureBank(train.features @ q.T, train.labels, "train")
    test_rot = FeatureBank(test.features @ q.T, test.labels, "test")
    r2 = knn_eval(train_rot, test_rot, k_neighbors=5)
    assert r1.top1_accuracy == r2.top1_accuracy
    assert np.array_equal(r1.scores.argmax(axis=1), r2.scores.argmax(axis=1))


def test_knn_tie_breaks_by_similarity_then_class_id():
    # Two training points, one per class, equidistant vote count at k=2:
    # class 1 has the larger summed similarity.
    train = FeatureBank(np.array([[1.0, 0.0], [0.8, 0.6]]),
                        np.array([0, 1]), "train")
    test = FeatureBank(np.array([[0.8, 0.6]]), np.array([1]), "test")
    report = knn_eval(train, test, k_neighbors=2)
    assert report.top1_accuracy == 1.0
    # Exactly tied similarity: lowest class id wins.
    train2 = FeatureBank(np.array([[1.0, 0.0], [0.0, 1.0]]),
                         np.array([0, 1]), "train")
    test2 = FeatureBank(np.array([[1.0, 1.0]]), np.array([0]), "test")
    assert knn_eval(train2, test2, k_neighbors=2).top1_accuracy == 1.0


def test_knn_rejects_empty_bank(rng):
    bank = random_bank(rng, 10, 4, 2, "train")
    empty = FeatureBank(np.zeros((0, 4)), np.zeros(0, dtype=int), "test")
    with pytest.raises(ValueError):
        knn_eval(bank, empty)
    with pytest.raises(ConfigError):
        knn_eval(bank, bank, k_neighbors=0)


def test_report_per_class_weighted_average(rng):
    train = random_bank(rng, 40, 8, 4, "train")
    test = random_bank(rng, 40, 8, 4, "test")
    report = knn_eval(train, test, k_neighbors=3)
    counts = [np.sum(test.labels == c) for c in range(4)]
    weighted = sum(a * c for a, c in zip(report.per_class_accuracy, counts)) / sum(counts)
    assert abs(weighted - report.top1_accuracy) < 1e-12


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------

def test_probe_realizable_on_one_hot_features():
    labels = np.repeat(np.arange(4), 16)
    feats = torch.as_tensor(np.eye(4)[labels], dtype=torch.float32)
    head = _train_linear_head(feats, torch.as_tensor(labels), 4,
                              ProbeConfig(epochs=20, batch_size=16), seed=0)
    with torch.no_grad():
        pred = head(feats).argmax(dim=1).numpy()
    assert np.mean(pred == labels) == 1.0


def test_linear_eval_leaves_encoder_untouched(state, split_data):
    train, test = split_data
    before = [p.detach().clone() for p in state.query_parameters()]
    linear_eval(state, train, test, ProbeConfig(epochs=3), target_frames=24)
    after = list(state.query_parameters())
    assert all(torch.equal(a, b) for a, b in zip(before, after))


def test_linear_eval_report_shape(state, split_data):
    train, test = split_data
    report = linear_eval(state, train, test, ProbeConfig(epochs=3), target_frames=24)
    assert report.protocol == "linear"
    assert 0.0 <= report.top1_accuracy <= 1.0
    assert report.scores.shape == (len(test), train.class_count)


# ---------------------------------------------------------------------------
# Semi-supervised and supervised
# ---------------------------------------------------------------------------

def test_stratified_counts():
    labels = np.repeat(np.arange(4), 20)
    idx = stratified_indices(labels, 0.25, seed=0)
    assert len(idx) == 20
    for cls in range(4):
        assert np.sum(labels[idx] == cls) == 5
    assert np.array_equal(idx, np.sort(idx))


def test_stratified_full_fraction_is_identity():
    labels = np.repeat(np.arange(3), 5)
    assert np.array_equal(stratified_indices(labels, 1.0, seed=9), np.arange(15))


def test_stratified_errors_name_class():
    labels = np.repeat(np.arange(2), 6)
    with pytest.raises(ValueError) as err:
        stratified_indices(labels, 0.01, seed=0)
    assert "class 0" in str(err.value)


def test_semi_full_fraction_matches_supervised(state, split_data):
    train, test = split_data
    cfg = FinetuneConfig(epochs=2, batch_size=8, learning_rate=0.01)
    semi = semi_supervised_eval(state, train, 1.0, test, cfg, target_frames=24, seed=4)
    sup = supervised_eval(state, train, test, cfg, target_frames=24, seed=4)
    assert semi.top1_accuracy == sup.top1_accuracy
    assert np.allclose(semi.scores, sup.scores)


def test_finetune_does_not_mutate_input_state(state, split_data):
    train, test = split_data
    before = [p.detach().clone() for p in state.query_parameters()]
    supervised_eval(state, train, test, FinetuneConfig(epochs=2, batch_size=8),
                    target_frames=24)
    assert all(torch.equal(a, b) for a, b in zip(before, state.query_parameters()))


def test_finetune_loss_decreases(split_data):
    train, test = split_data
    fresh = init_state(ENC, seed=1)
    report = supervised_eval(fresh, train, test,
                             FinetuneConfig(epochs=8, batch_size=8,
                                            learning_rate=0.05),
                             target_frames=24, seed=2)
    losses = report.config["loss_per_epoch"]
    assert losses[-1] < losses[0]


def test_semi_subset_size(state, split_data):
    train, test = split_data
    cfg = FinetuneConfig(epochs=1, batch_size=4)
    report = semi_supervised_eval(state, train, 0.5, test, cfg,
                                  target_frames=24, seed=0)
    assert report.config["train_size"] == round(0.5 * len(train))


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def fused_report(scores, labels):
    preds = scores.argmax(axis=1)
    per_class = [float(np.mean(preds[labels == c] == c)) for c in sorted(set(labels))]
    return EvalReport(protocol="knn", top1_accuracy=float(np.mean(preds == labels)),
                      per_class_accuracy=per_class, config={}, scores=scores,
                      labels=np.asarray(labels))


def test_fuse_single_stream_identity(rng):
    labels = np.array([0, 1, 2, 0, 1, 2])
    scores = rng.normal(size=(6, 3))
    report = fused_report(scores, labels)
    fused = ensemble_fuse([report], [1.0])
    assert fused.top1_accuracy == report.top1_accuracy
    assert np.array_equal(fused.scores.argmax(axis=1), scores.argmax(axis=1))


def test_fuse_identical_streams_identical_predictions(rng):
    labels = np.array([0, 1, 0, 1])
    scores = rng.normal(size=(4, 2))
    r = fused_report(scores, labels)
    fused = ensemble_fuse([r, fused_report(scores.copy(), labels)], [0.3, 1.7])
    assert np.array_equal(fused.scores.argmax(axis=1), scores.argmax(axis=1))


def test_fuse_weight_scale_invariance(rng):
    labels = np.repeat(np.arange(3), 4)
    reports = [fused_report(rng.normal(size=(12, 3)), labels) for _ in range(3)]
    f1 = ensemble_fuse(reports, [0.6, 0.6, 0.4])
    f2 = ensemble_fuse(reports, [6.0, 6.0, 4.0])
    assert np.array_equal(f1.scores.argmax(axis=1), f2.scores.argmax(axis=1))


def test_fuse_disjoint_errors_beats_singles():
    # Nine samples, three streams; stream s is confidently right except on its
    # own third of the data, where it leans weakly to a wrong class.
    labels = np.array([0, 1, 2] * 3)
    n, k = 9, 3
    streams = []
    for s in range(3):
        scores = np.full((n, k), -3.0)
        for i in range(n):
            true = labels[i]
            if 3 * s <= i < 3 * (s + 1):  # this stream's error zone
                scores[i, (true + 1) % k] = 0.4
                scores[i, true] = 0.0
            else:
                scores[i, true] = 2.0
        streams.append(fused_report(scores, labels))
    singles = [r.top1_accuracy for r in streams]
    fused = ensemble_fuse(streams, [1.0, 1.0, 1.0])
    assert all(abs(a - 6 / 9) < 1e-12 for a in singles)
    assert fused.top1_accuracy == 1.0


def test_fuse_rejects_mismatched_orders(rng):
    r1 = fused_report(rng.normal(size=(4, 2)), np.array([0, 1, 0, 1]))
    r2 = fused_report(rng.normal(size=(4, 2)), np.array([1, 0, 1, 0]))
    with pytest.raises(ValueError):
        ensemble_fuse([r1, r2], [1.0, 1.0])


def test_fuse_rejects_negative_weight(rng):
    r = fused_report(rng.normal(size=(4, 2)), np.array([0, 1, 0, 1]))
    with pytest.raises(ConfigError):
        ensemble_fuse([r, r], [1.0, -0.5])


def test_report_save(tmp_path, rng):
    r = fused_report(rng.normal(size=(4, 2)), np.array([0, 1, 0, 1]))
    path = tmp_path / "report.json"
    r.save(path)
    import json
    loaded = json.loads(path.read_text())
    assert loaded["protocol"] == "knn"
    assert 0 <= loaded["top1_accuracy"] <= 1
