import math

import numpy as np
import pytest
import torch

from audio_jepa.dsp import AudioClip, MelConfig
from audio_jepa.jepa import init_model
from audio_jepa.probes import (
    EmbeddingSet,
    LinearProbe,
    ProbeConfig,
    embed_clip,
    knn_classify,
    knn_evaluate,
    knn_predict,
    linear_probe_evaluate,
    linear_probe_train,
    load_embeddings,
    save_embeddings,
)
from audio_jepa.vit import ViTConfig


def brute_force_knn(train_x, train_y, query, k, metric):
    """Independent reference: explicit distance loop, nearest-first vote with the documented tie-breaks."""
    dists = []
    for i, v in enumerate(train_x):
        if metric == "cosine":
            d = 1.0 - float(np.dot(v, query) / (math.sqrt(np.dot(v, v)) * math.sqrt(np.dot(query, query))))
        else:
            d = math.sqrt(float(np.sum((v - query) ** 2)))
        dists.append((d, i))
    dists.sort()
    neighbors = [int(train_y[i]) for _, i in dists[:k]]
    votes = {}
    for label in neighbors:
        votes[label] = votes.get(label, 0) + 1
    best = max(votes.values())
    for label in neighbors:
        if votes[label] == best:
            return label


class TestKnn:
    def test_exact_match_k1(self):
        rng = np.random.default_rng(0)
        train = EmbeddingSet(rng.standard_normal((20, 6)), rng.integers(0, 4, 20))
        for i in range(20):
            assert knn_classify(train, train.vectors[i], ProbeConfig(k=1)) == train.labels[i]

    def test_majority_when_k_is_everything(self):
        rng = np.random.default_rng(1)
        train = EmbeddingSet(rng.standard_normal((4, 3)), [0, 0, 0, 1])
        for _ in range(10):
            assert knn_classify(train, rng.standard_normal(3), ProbeConfig(k=4)) == 0

    def test_tie_goes_to_nearest(self):
        train = EmbeddingSet(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.1], [0.1, 1.0]]), [2, 1, 2, 1])
        assert knn_classify(train, np.array([0.2, 1.0]), ProbeConfig(k=4)) == 1
        assert knn_classify(train, np.array([1.0, 0.2]), ProbeConfig(k=4)) == 2

    @pytest.mark.parametrize("metric", ["cosine", "euclidean"])
    def test_brute_force_equivalence(self, metric):
        rng = np.random.default_rng(7)
        train = EmbeddingSet(rng.standard_normal((200, 8)), rng.integers(0, 5, 200))
        queries = rng.standard_normal((20, 8))
        cfg = ProbeConfig(k=5, metric=metric)
        got = knn_predict(train, queries, cfg)
        expected = [brute_force_knn(train.vectors, train.labels, q, 5, metric) for q in queries]
        assert got.tolist() == expected

    def test_cosine_scale_invariance(self):
        rng = np.random.default_rng(3)
        train = EmbeddingSet(rng.standard_normal((100, 8)), rng.integers(0, 3, 100))
        queries = rng.standard_normal((30, 8))
        base = knn_predict(train, queries, ProbeConfig())
        scaled = EmbeddingSet(train.vectors * 17.5, train.labels)
        assert np.array_equal(knn_predict(scaled, queries * 0.01, ProbeConfig()), base)

    def test_zero_vector_rejected_under_cosine(self):
        train = EmbeddingSet(np.eye(3), [0, 1, 2])
        with pytest.raises(ValueError, match="zero-norm"):
            knn_classify(train, np.zeros(3), ProbeConfig(k=1))

    def test_k_too_large(self):
        with pytest.raises(ValueError, match="exceeds"):
            knn_classify(EmbeddingSet(np.eye(3), [0, 1, 2]), np.ones(3), ProbeConfig(k=4))


class TestKnnEvaluate:
    def test_train_equals_test(self):
        rng = np.random.default_rng(0)
        s = EmbeddingSet(rng.standard_normal((50, 4)), rng.integers(0, 3, 50))
        assert knn_evaluate(s, s, ProbeConfig(k=1)).accuracy == 1.0

    def test_separable_clusters(self):
        rng = np.random.default_rng(1)
        centers = np.array([[5.0, 0, 0], [0, 5.0, 0]])
        def make(n):
            y = np.repeat([0, 1], n)
            return EmbeddingSet(centers[y] + 0.3 * rng.standard_normal((2 * n, 3)), y)
        assert knn_evaluate(make(50), make(25), ProbeConfig()).accuracy == 1.0

    def test_chance_level_with_shuffled_labels(self):
        rng = np.random.default_rng(2)
        c, n_train, n_test = 5, 2000, 2000
        train = EmbeddingSet(rng.standard_normal((n_train, 16)), np.tile(np.arange(c), n_train // c))
        test = EmbeddingSet(rng.standard_normal((n_test, 16)), np.tile(np.arange(c), n_test // c))
        acc = knn_evaluate(train, test, ProbeConfig()).accuracy
        sigma = math.sqrt(0.2 * 0.8 / n_test)
        assert abs(acc - 0.2) < 3 * sigma

    def test_per_class_weighted_average(self):
        rng = np.random.default_rng(3)
        train = EmbeddingSet(rng.standard_normal((60, 4)), rng.integers(0, 3, 60))
        test = EmbeddingSet(rng.standard_normal((40, 4)), rng.integers(0, 3, 40))
        r = knn_evaluate(train, test, ProbeConfig())
        weighted = sum(r.per_class[c] * r.counts[c] for c in r.per_class) / len(test)
        assert 0 <= r.accuracy <= 1
        assert weighted == pytest.approx(r.accuracy)

    def test_label_space_mismatch(self):
        train = EmbeddingSet(np.eye(3), [0, 1, 1])
        with pytest.raises(ValueError, match="never occur"):
            knn_evaluate(train, EmbeddingSet(np.eye(3), [0, 1, 2]), ProbeConfig(k=1))


class TestLinearProbe:
    def separable(self, n=100, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, (n, 2))
        y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
        margin = np.abs(x[:, 0] + 0.5 * x[:, 1]) > 0.1
        return EmbeddingSet(x[margin], y[margin])

    def test_fits_separable(self):
        data = self.separable()
        probe = linear_probe_train(data, ProbeConfig(epochs=300, lr=0.05))
        assert linear_probe_evaluate(probe, data).accuracy == 1.0

    def test_zero_epochs_returns_init(self):
        data = self.separable()
        a = linear_probe_train(data, ProbeConfig(epochs=0, seed=4))
        b = linear_probe_train(data, ProbeConfig(epochs=0, seed=4))
        assert np.array_equal(a.weight, b.weight) and not a.losses
        assert np.all(a.bias == 0)

    def test_loss_non_increasing(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((128, 6))
        y = np.argmax(x[:, :3], axis=1)
        probe = linear_probe_train(EmbeddingSet(x, y), ProbeConfig(epochs=50))
        assert all(b <= a + 1e-3 for a, b in zip(probe.losses, probe.losses[1:]))

    def test_deterministic(self):
        data = self.separable()
        a = linear_probe_train(data, ProbeConfig(epochs=5))
        b = linear_probe_train(data, ProbeConfig(epochs=5))
        assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="two classes"):
            linear_probe_train(EmbeddingSet(np.eye(3), [1, 1, 1]), ProbeConfig())

    def test_identity_on_one_hot(self):
        probe = LinearProbe(np.eye(4), np.zeros(4))
        assert linear_probe_evaluate(probe, EmbeddingSet(np.eye(4), [0, 1, 2, 3])).accuracy == 1.0

    def test_zero_weights_predict_class_zero(self):
        probe = LinearProbe(np.zeros((3, 5)), np.zeros(3))
        r = linear_probe_evaluate(probe, EmbeddingSet(np.random.default_rng(0).standard_normal((7, 5)), [0, 1, 2, 0, 1, 2, 0]))
        assert np.all(r.predictions == 0)

    def test_matches_brute_force_logits(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            w, b = rng.standard_normal((4, 5)), rng.standard_normal(4)
            x = rng.standard_normal((1, 5))
            logits = [sum(w[c, i] * x[0, i] for i in range(5)) + b[c] for c in range(4)]
            expected = max(range(4), key=lambda c: (logits[c], -c))
            got = linear_probe_evaluate(LinearProbe(w, b), EmbeddingSet(x, [0])).predictions[0]
            assert got == expected

    def test_width_mismatch(self):
        with pytest.raises(ValueError, match="width"):
            linear_probe_evaluate(LinearProbe(np.eye(3), np.zeros(3)), EmbeddingSet(np.eye(4), [0, 1, 2, 0]))


class TestEmbedClip:
    MEL = MelConfig(n_mels=32, n_time_bins=32, hop=250, fft_size=1024, sample_rate=8000)

    def model(self, depth=1):
        enc = ViTConfig(input_dim=256, embed_dim=8, depth=depth, num_heads=2)
        pred = ViTConfig(input_dim=8, embed_dim=8, depth=1, num_heads=2, output_dim=8)
        return init_model(enc, pred, (2, 2), np.random.default_rng(0))

    def clip(self, seed=0):
        return AudioClip(np.random.default_rng(seed).uniform(-0.5, 0.5, 8000), 8000)

    def test_width_and_determinism(self):
        m = self.model()
        a = embed_clip(m, self.clip(), self.MEL)
        b = embed_clip(m, self.clip(), self.MEL)
        assert a.shape == (8,)
        assert np.array_equal(a, b)

    def test_constant_tokens_give_that_token(self):
        m = self.model(depth=0)
        # zero input projection: every token is LN(position) scaled by zero + bias
        m.tgt = dict(m.tgt)
        m.tgt["norm.weight"] = torch.zeros(8)
        m.tgt["norm.bias"] = torch.arange(8, dtype=torch.float32)
        out = embed_clip(m, self.clip(), self.MEL)
        assert np.allclose(out, np.arange(8))

    def test_resamples_and_fits_duration(self):
        m = self.model()
        long_clip = AudioClip(np.random.default_rng(1).uniform(-0.5, 0.5, 3 * 16000), 16000)
        assert embed_clip(m, long_clip, self.MEL).shape == (8,)


def test_embedding_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    s = EmbeddingSet(rng.standard_normal((5, 7)).astype(np.float32), [0, 1, -1, 3, 2], [f"c{i}.wav" for i in range(5)])
    save_embeddings(tmp_path / "e.bin", s)
    back = load_embeddings(tmp_path / "e.bin")
    assert back.ids == s.ids
    assert np.array_equal(back.labels, s.labels)
    assert np.array_equal(back.vectors, s.vectors)


def test_embedding_file_truncated(tmp_path):
    s = EmbeddingSet(np.ones((2, 3)), [0, 1], ["a", "b"])
    save_embeddings(tmp_path / "e.bin", s)
    raw = (tmp_path / "e.bin").read_bytes()
    (tmp_path / "e.bin").write_bytes(raw[:-2])
    with pytest.raises(ValueError, match="truncated"):
        load_embeddings(tmp_path / "e.bin")
