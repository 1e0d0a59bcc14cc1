import os
import csv
import math
import unittest
import tempfile
import numpy as np
from pylime.model import LimeModel, RouterBank
from pylime.tasks import task_vocab
from pylime.diagnostics import (ProbeDataset, renyi_entropy, entropy_profile, collect_representations, probe_patterns,
                                linear_probe_cv, probe_profile, router_heatmap, per_head_router_report, export_embeddings)
from pylime.exceptions import ProbeError

from .common import *

__all__ = ["TestRenyiEntropy", "TestCollect", "TestLinearProbe", "TestRouterHeatmap", "TestExport"]

TEXT = [" it is what it was and they are what they were ", " she is here, we were there, you are late, he was on time "]

def byte_model(**kwargs):
    return LimeModel(tiny_config(vocab_size=260, max_seq=64, **kwargs), seed=0)

def encoded_text():
    vocab = task_vocab("bytes")
    return [vocab.encode(t) for t in TEXT * 3]

class TestRenyiEntropy(unittest.TestCase):
    def test_orthonormal_rows(self):
        self.assertAlmostEqual(renyi_entropy(np.eye(6)), math.log(6))
        self.assertAlmostEqual(renyi_entropy(np.eye(6), alpha=0.5), math.log(6))

    def test_rank_one(self):
        z = np.tile(np.array([[1.0, -2.0, 0.5]]), (5, 1))
        self.assertAlmostEqual(renyi_entropy(z), 0.0, places=9)

    def test_closed_form(self):
        z = np.diag([1.0, 2.0, 3.0])
        p = np.array([1.0, 4.0, 9.0]) / 14.0
        self.assertAlmostEqual(renyi_entropy(z, 2.0), -math.log(np.sum(p ** 2)))
        self.assertAlmostEqual(renyi_entropy(z, 3.0), math.log(np.sum(p ** 3)) / -2.0)

    def test_invariances(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(7, 4))
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        reference = renyi_entropy(z)
        self.assertAlmostEqual(renyi_entropy(3.5 * z), reference)
        self.assertAlmostEqual(renyi_entropy(z @ q), reference)
        self.assertAlmostEqual(renyi_entropy(z[rng.permutation(7)]), reference)

    def test_bounds(self):
        rng = np.random.default_rng(1)
        for t in (2, 5, 30):
            value = renyi_entropy(rng.normal(size=(t, 8)))
            self.assertGreaterEqual(value, 0.0)
            self.assertLessEqual(value, math.log(t))

    def test_invalid(self):
        with self.assertRaises(ValueError):
            renyi_entropy(np.ones((1, 3)))
        with self.assertRaises(ValueError):
            renyi_entropy(np.eye(3), alpha=1.0)
        with self.assertRaises(ValueError):
            renyi_entropy(np.eye(3), alpha=0.0)
        with self.assertRaises(ValueError):
            renyi_entropy(np.zeros((3, 3)))


class TestCollect(unittest.TestCase):
    def test_dump_layout(self):
        model = byte_model(num_layers=3)
        sequences = encoded_text()
        dump, probe = collect_representations(model, sequences, include_routed=True)
        self.assertIsNone(probe)
        self.assertEqual(len(dump), sum(len(s) for s in sequences))
        self.assertEqual(dump.num_layers, 3)
        self.assertEqual(dump.layer_states(2, "values").shape, (len(dump), 8))
        self.assertEqual(dump.layer_states(3, "routed").shape, (len(dump), 8))
        np.testing.assert_array_equal(dump.token_ids[dump.sequence == 1], sequences[1])
        with self.assertRaises(ValueError):
            dump.layer_states(4)

    def test_batching_does_not_matter(self):
        model = byte_model()
        a, _ = collect_representations(model, encoded_text(), batch_size=1)
        b, _ = collect_representations(model, encoded_text(), batch_size=6)
        for layer in (1, 2):
            np.testing.assert_allclose(a.hiddens[layer], b.hiddens[layer], atol=1e-5)

    def test_probe_anchors(self):
        vocab = task_vocab("bytes")
        dump, probe = collect_representations(byte_model(), encoded_text(), probe_patterns(vocab))
        self.assertEqual(probe.classes, ["is", "are", "was", "were"])
        counts = probe.class_counts
        self.assertEqual(len(set(counts)), 1)
        self.assertEqual(counts[0], 6)
        for label, word in enumerate(probe.classes):
            anchors = dump.token_ids[probe.rows[probe.labels == label]]
            self.assertTrue(np.all(anchors == vocab.encode(word[-1])[0]))
        self.assertEqual(probe.layer_features(2).shape, (24, 8))

    def test_class_cap(self):
        _, probe = collect_representations(byte_model(), encoded_text(), probe_patterns(task_vocab("bytes")), max_per_class=4)
        self.assertEqual(probe.class_counts, [4, 4, 4, 4])

    def test_missing_word(self):
        vocab = task_vocab("bytes")
        with self.assertRaises(ProbeError):
            collect_representations(byte_model(), [vocab.encode(" it is here ")], probe_patterns(vocab))

    def test_entropy_profile(self):
        dump, _ = collect_representations(byte_model(), encoded_text())
        profile = entropy_profile(dump)
        self.assertEqual(sorted(profile), ["hiddens", "values"])
        for kind in profile:
            self.assertEqual(sorted(profile[kind]), [1, 2])
            for value in profile[kind].values():
                self.assertTrue(0.0 <= value <= math.log(max(len(s) for s in encoded_text())))


class TestLinearProbe(unittest.TestCase):
    def probe(self, x, labels, classes):
        return ProbeDataset(classes, np.asarray(labels), np.arange(len(labels)), {"hiddens": {1: x}})

    def test_separable(self):
        rng = np.random.default_rng(0)
        centers = np.array([[5.0, 0, 0], [0, 5.0, 0], [0, 0, 5.0]])
        labels = np.repeat(np.arange(3), 40)
        x = centers[labels] + rng.normal(scale=0.5, size=(120, 3))
        mean, std = linear_probe_cv(self.probe(x, labels, ["a", "b", "c"]), 1)
        self.assertEqual(mean, 1.0)
        self.assertEqual(std, 0.0)

    def test_shuffled_labels_are_near_chance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(200, 4))
        labels = rng.permutation(np.repeat([0, 1], 100))
        mean, _ = linear_probe_cv(self.probe(x, labels, ["a", "b"]), 1)
        self.assertLess(mean, 0.7)

    def test_shifted_gaussians(self):
        rng = np.random.default_rng(2)
        labels = np.repeat([0, 1], 150)
        x = rng.normal(size=(300, 5))
        x[:, 2] += 4.0 * labels
        mean, _ = linear_probe_cv(self.probe(x, labels, ["a", "b"]), 1)
        self.assertGreater(mean, 0.9)

    def test_deterministic_folds(self):
        rng = np.random.default_rng(3)
        labels = np.repeat([0, 1], 30)
        x = rng.normal(size=(60, 3)) + labels[:, None]
        probe = self.probe(x, labels, ["a", "b"])
        self.assertEqual(linear_probe_cv(probe, 1, seed=5), linear_probe_cv(probe, 1, seed=5))

    def test_too_few_occurrences(self):
        probe = self.probe(np.eye(6), [0, 0, 0, 1, 1, 1], ["a", "b"])
        with self.assertRaises(ProbeError):
            linear_probe_cv(probe, 1, folds=5)

    def test_profile(self):
        labels = np.repeat([0, 1], 10)
        x = np.stack([labels * 3.0, np.zeros(20)], axis=1) + np.random.default_rng(4).normal(scale=0.1, size=(20, 2))
        probe = ProbeDataset(["a", "b"], labels, np.arange(20), {"hiddens": {1: x, 2: x}})
        profile = probe_profile(probe)
        self.assertEqual(sorted(profile), [1, 2])
        self.assertEqual(profile[1][0], 1.0)


class TestRouterHeatmap(unittest.TestCase):
    def test_identity_router_is_diagonal(self):
        model = LimeModel(tiny_config(num_layers=4), seed=0)
        for w in model.router.weights.values():
            w.data[:] = 0.0
            w.data[:, -2:] = np.eye(2)
        heatmap = router_heatmap(model.router)
        self.assertEqual(heatmap.layers, [2, 3, 4])
        for layer in heatmap.layers:
            expected = np.zeros(4)
            expected[layer - 1] = 1.0
            np.testing.assert_allclose(heatmap.row(layer), expected)

    def test_baseline_is_diagonal(self):
        cfg = tiny_config(num_layers=3, routing_variant="baseline")
        heatmap = router_heatmap(RouterBank.initialize(cfg, 0))
        np.testing.assert_allclose(heatmap.matrix, [[0, 1, 0], [0, 0, 1]])

    def test_average_is_uniform(self):
        cfg = tiny_config(num_layers=4, routing_variant="average")
        heatmap = router_heatmap(RouterBank.initialize(cfg, 0))
        for layer in heatmap.layers:
            np.testing.assert_allclose(heatmap.row(layer)[:layer], 1.0 / layer)
            np.testing.assert_array_equal(heatmap.row(layer)[layer:], 0.0)

    def test_brute_force(self):
        cfg = tiny_config(num_layers=3, num_heads=4, num_kv_heads=2)
        bank = RouterBank.initialize(cfg, 9)
        heatmap = router_heatmap(bank)
        for layer in (2, 3):
            w = np.abs(bank.dense(layer).astype(np.float64))
            m = [np.mean(w[:, 2 * (j - 1):2 * j]) for j in range(1, layer + 1)]
            expected = np.zeros(3)
            expected[:layer] = np.array(m) / np.sum(m)
            np.testing.assert_allclose(heatmap.row(layer), expected, rtol=1e-6)

    def test_per_head_marginalizes_to_heatmap(self):
        bank = RouterBank.initialize(tiny_config(num_layers=4), 2)
        report = per_head_router_report(bank)
        self.assertEqual(report.magnitudes.shape, (3, 2, 4))
        np.testing.assert_allclose(report.normalized.sum(axis=-1), 1.0)
        marginal = report.magnitudes.mean(axis=1)
        np.testing.assert_allclose(marginal / marginal.sum(axis=-1, keepdims=True), router_heatmap(bank).matrix)

    def test_single_layer(self):
        bank = RouterBank.initialize(tiny_config(num_layers=1), 0)
        self.assertEqual(router_heatmap(bank).matrix.shape, (0, 1))


class TestExport(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_csv(self):
        dump, _ = collect_representations(byte_model(), encoded_text()[:2])
        path = os.path.join(self.tmp.name, "emb.csv")
        count = export_embeddings(dump, 2, "values", path, labels={0: "first"})
        self.assertEqual(count, len(dump))
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0][:4], ["token", "label", "layer", "v0"])
        self.assertEqual(len(rows[0]), 3 + 8)
        self.assertEqual(len(rows), count + 1)
        self.assertEqual(rows[1][1], "first")
        self.assertEqual(int(rows[1][0]), dump.token_ids[0])
        parsed = np.array([float(v) for v in rows[2][3:]], dtype=np.float32)
        np.testing.assert_array_equal(parsed, dump.values[2][1])
