import unittest
import numpy as np
from pylime import tensor as T
from pylime.model import KvBuffer, RouterBank, LimeModel, make_variant_mask, route_kv, attend, causal_mask, apply_rope
from pylime.exceptions import ConfigError, KvBufferError, ShapeError, VocabularyError

from .common import *

__all__ = ["TestVariantMask", "TestKvBuffer", "TestRouting", "TestLimeModel", "TestLayerReference", "TestGradients"]

def blocks(mask, h):
    '''Buffered layers enabled in a router mask.'''
    return [k + 1 for k in range(mask.shape[1] // h) if mask[:, k * h:(k + 1) * h].all()]

class Capture(object):
    def __init__(self):
        self.records = {}

    def record(self, kind, layer, array):
        self.records[(kind, layer)] = np.array(array)


def reference_rope(x, positions, theta=10000.0):
    hd = x.shape[-1]
    out = np.empty_like(x)
    for i, pos in enumerate(positions):
        for pair in range(hd // 2):
            angle = pos * theta ** (-2.0 * pair / hd)
            even, odd = x[..., i, 2 * pair], x[..., i, 2 * pair + 1]
            out[..., i, 2 * pair] = even * np.cos(angle) - odd * np.sin(angle)
            out[..., i, 2 * pair + 1] = even * np.sin(angle) + odd * np.cos(angle)
    return out

def reference_attention(q, k, v):
    heads, b, t, hd = q.shape
    group = heads // k.shape[0]
    out = np.zeros((b, t, heads * hd))
    for head in range(heads):
        kv = head // group
        for batch in range(b):
            for i in range(t):
                scores = np.array([q[head, batch, i] @ k[kv, batch, j] for j in range(i + 1)]) / np.sqrt(hd)
                weights = np.exp(scores - scores.max())
                weights /= weights.sum()
                out[batch, i, head * hd:(head + 1) * hd] = weights @ v[kv, batch, :i + 1]
    return out

def reference_rmsnorm(x, gain):
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + T.RMSNORM_EPS) * gain

def split_heads(y, heads):
    b, t, width = y.shape
    return y.reshape(b, t, heads, width // heads).transpose(2, 0, 1, 3)

def reference_block(model, x, layer, keys, values, positions):
    '''Decoder layer in plain numpy; keys and values collect buffered heads.'''
    cfg = model.cfg
    w = lambda name: model.params.layer(layer, name).data
    h = reference_rmsnorm(x, w("attn_norm"))
    q = reference_rope(split_heads(h @ w("wq"), cfg.num_heads), positions, cfg.rope_theta)
    keys.append(reference_rope(split_heads(h @ w("wk"), cfg.num_kv_heads), positions, cfg.rope_theta))
    values.append(split_heads(h @ w("wv"), cfg.num_kv_heads))
    if layer == 1:
        k, v = keys[-1], values[-1]
    else:
        router = model.router.dense(layer)
        k = np.einsum("hl,lbtd->hbtd", router, np.concatenate(keys))
        v = np.einsum("hl,lbtd->hbtd", router, np.concatenate(values))
    x = x + reference_attention(q, k, v) @ w("wo")
    h = reference_rmsnorm(x, w("mlp_norm"))
    gate = h @ w("w_gate")
    return x + (gate / (1.0 + np.exp(-gate)) * (h @ w("w_up"))) @ w("w_down")


class TestVariantMask(unittest.TestCase):
    def test_full(self):
        mask = make_variant_mask("full", 3, 2)
        self.assertEqual(mask.shape, (2, 6))
        self.assertTrue(np.all(mask == 1.0))

    def test_baseline(self):
        self.assertEqual(blocks(make_variant_mask("baseline", 4, 2), 2), [4])

    def test_last_j(self):
        self.assertEqual(blocks(make_variant_mask("last-j", 5, 2, j=2), 2), [4, 5])
        self.assertEqual(blocks(make_variant_mask("last_j", 2, 2, j=4), 2), [1, 2])

    def test_first_j(self):
        self.assertEqual(blocks(make_variant_mask("first_j", 5, 2, j=2), 2), [1, 2, 4, 5])
        self.assertEqual(blocks(make_variant_mask("first_j", 3, 2, j=2), 2), [1, 2, 3])

    def test_missing_j(self):
        with self.assertRaises(ConfigError):
            make_variant_mask("last_j", 3, 2)
        with self.assertRaises(ConfigError):
            make_variant_mask("first_j", 3, 2, j=0)

    def test_unknown(self):
        with self.assertRaises(ConfigError):
            make_variant_mask("sideways", 3, 2)

    def test_config_requires_j(self):
        with self.assertRaises(ConfigError):
            tiny_config(routing_variant="last-j")


class TestKvBuffer(unittest.TestCase):
    def setUp(self):
        self.kv = T.constant(np.zeros((2, 1, 3, 4)))

    def test_fill_in_order(self):
        buf = KvBuffer(2)
        buf.append(1, self.kv, self.kv)
        buf.append(2, self.kv, self.kv)
        self.assertEqual(buf.filled_layers, 2)
        keys, values = buf.stacked(2)
        self.assertEqual(keys.shape, (4, 1, 3, 4))

    def test_out_of_order(self):
        buf = KvBuffer(3)
        with self.assertRaises(KvBufferError):
            buf.append(2, self.kv, self.kv)

    def test_duplicate_layer(self):
        buf = KvBuffer(3)
        buf.append(1, self.kv, self.kv)
        with self.assertRaises(KvBufferError):
            buf.append(1, self.kv, self.kv)

    def test_capacity(self):
        buf = KvBuffer(1)
        buf.append(1, self.kv, self.kv)
        with self.assertRaises(KvBufferError):
            buf.append(2, self.kv, self.kv)

    def test_partial_read(self):
        buf = KvBuffer(3)
        buf.append(1, self.kv, self.kv)
        with self.assertRaises(KvBufferError):
            buf.stacked(2)

    def test_mismatched_shapes(self):
        buf = KvBuffer(2)
        with self.assertRaises(ShapeError):
            buf.append(1, self.kv, T.constant(np.zeros((2, 1, 3, 2))))


class TestRouting(unittest.TestCase):
    def test_brute_force_mixture(self):
        rng = np.random.default_rng(0)
        h, layer = 2, 3
        buf = KvBuffer(layer)
        raw = [(rng.normal(size=(h, 1, 4, 2)), rng.normal(size=(h, 1, 4, 2))) for _ in range(layer)]
        for l, (k, v) in enumerate(raw, start=1):
            buf.append(l, T.constant(k, dtype=np.float64), T.constant(v, dtype=np.float64))
        router = rng.normal(size=(h, layer * h))
        keys, values = route_kv(buf, T.constant(router, dtype=np.float64), layer)
        for out in range(h):
            expected_k = np.zeros((1, 4, 2))
            expected_v = np.zeros((1, 4, 2))
            for l in range(layer):
                for src in range(h):
                    expected_k += router[out, l * h + src] * raw[l][0][src]
                    expected_v += router[out, l * h + src] * raw[l][1][src]
            np.testing.assert_allclose(keys.data[out], expected_k, atol=1e-12)
            np.testing.assert_allclose(values.data[out], expected_v, atol=1e-12)

    def test_routing_commutes_with_rotation(self):
        rng = np.random.default_rng(4)
        positions = np.arange(5)
        buf = KvBuffer(3)
        for layer in (1, 2, 3):
            raw = T.constant(rng.normal(size=(2, 1, 5, 4)), dtype=np.float64)
            buf.append(layer, apply_rope(raw, positions), raw)
        router = T.constant(rng.normal(size=(2, 6)), dtype=np.float64)
        keys, values = route_kv(buf, router, 3)
        np.testing.assert_allclose(keys.data, apply_rope(values, positions).data, atol=1e-12)

    def test_routed_scores_depend_on_offset_only(self):
        rng = np.random.default_rng(5)
        raw = [T.constant(rng.normal(size=(2, 1, 1, 8)), dtype=np.float64) for _ in range(2)]
        q = T.constant(rng.normal(size=(2, 1, 1, 8)), dtype=np.float64)
        router = T.constant(rng.normal(size=(2, 4)), dtype=np.float64)

        def score(m, n):
            buf = KvBuffer(2)
            for layer, k in enumerate(raw, start=1):
                buf.append(layer, apply_rope(k, [n]), k)
            keys, _ = route_kv(buf, router, 2)
            return np.sum(apply_rope(q, [m]).data * keys.data, axis=-1).ravel()

        np.testing.assert_allclose(score(7, 3), score(12, 8), atol=1e-10)
        np.testing.assert_allclose(score(0, 0), score(9, 9), atol=1e-10)

    def test_router_shape_mismatch(self):
        buf = KvBuffer(2)
        kv = T.constant(np.zeros((2, 1, 3, 2)))
        buf.append(1, kv, kv)
        buf.append(2, kv, kv)
        with self.assertRaises(ShapeError):
            route_kv(buf, T.constant(np.zeros((2, 6))), 2)

    def test_identity_initialization(self):
        cfg = tiny_config(num_layers=3, routing_variant="full")
        bank = RouterBank.initialize(cfg, seed=5)
        self.assertEqual(sorted(bank.weights), [2, 3])
        for layer in (2, 3):
            np.testing.assert_array_equal(bank.dense(layer)[:, -2:], np.eye(2))
            self.assertLessEqual(np.abs(bank.dense(layer)[:, :-2]).max(), np.sqrt(3.0 / layer * 2) + 1e-6)

    def test_initialization_range_grows_with_kv_heads(self):
        cfg = tiny_config(hidden_size=32, num_heads=8, num_kv_heads=8, routing_variant="full")
        bank = RouterBank.initialize(cfg, seed=1)
        bound = np.sqrt(3.0 / 2 * 8)
        spread = np.abs(bank.dense(2)[:, :-8]).max()
        self.assertLessEqual(spread, bound + 1e-6)
        self.assertGreater(spread, 0.5 * bound)

    def test_masked_entries_zero(self):
        cfg = tiny_config(num_layers=4, routing_variant="last_j", routing_j=1)
        bank = RouterBank.initialize(cfg, seed=0)
        np.testing.assert_array_equal(bank.dense(4)[:, :6], 0.0)
        self.assertEqual(len(bank.named_parameters()), 3)

    def test_average_is_frozen(self):
        bank = RouterBank.initialize(tiny_config(num_layers=3, routing_variant="average"), seed=0)
        self.assertEqual(bank.named_parameters(), {})
        np.testing.assert_allclose(bank.dense(3), 1.0 / 6)
        self.assertFalse(bank.weights[3].requires_grad)

    def test_baseline_has_no_router(self):
        bank = RouterBank.initialize(tiny_config(routing_variant="baseline"), seed=0)
        self.assertEqual(bank.weights, {})

    def test_router_stream_is_separate(self):
        full = LimeModel(tiny_config(routing_variant="full"), seed=3)
        base = LimeModel(tiny_config(routing_variant="baseline"), seed=3)
        for name, p in base.params.items():
            np.testing.assert_array_equal(p.data, full.params[name].data)


class TestLimeModel(unittest.TestCase):
    def test_logit_shapes(self):
        model = LimeModel(tiny_config(), seed=0)
        self.assertEqual(model.forward([1, 2, 3]).shape, (3, 11))
        self.assertEqual(model.forward([[1, 2, 3], [4, 5, 6]]).shape, (2, 3, 11))

    def test_identity_router_matches_baseline(self):
        cfg = tiny_config(num_layers=3, num_heads=4, num_kv_heads=2)
        full = LimeModel(cfg, seed=7, dtype=np.float64)
        for layer, w in full.router.weights.items():
            w.data[:] = 0.0
            w.data[:, -2:] = np.eye(2)
        base_cfg = cfg.with_variant("baseline")
        base = LimeModel(base_cfg, params=full.params, router=RouterBank.initialize(base_cfg, 7))
        ids = [[1, 4, 2, 9, 3], [5, 5, 0, 10, 1]]
        np.testing.assert_allclose(full.forward(ids).data, base.forward(ids).data, atol=1e-12)

    def test_causality(self):
        model = LimeModel(tiny_config(), seed=1, dtype=np.float64)
        a = model.forward([1, 2, 3, 4]).data
        b = model.forward([1, 2, 3, 9]).data
        np.testing.assert_allclose(a[:3], b[:3], atol=1e-12)
        self.assertFalse(np.allclose(a[3], b[3]))

    def test_sequence_limits(self):
        model = LimeModel(tiny_config(max_seq=4), seed=0)
        with self.assertRaises(ShapeError):
            model.forward([1, 2, 3, 4, 5])
        with self.assertRaises(VocabularyError):
            model.forward([1, 11])

    def test_untied_head(self):
        model = LimeModel(tiny_config(tie_embeddings=False), seed=0)
        self.assertIn("lm_head", model.params)
        self.assertEqual(model.forward([1, 2]).shape, (2, 11))

    def test_parameter_names(self):
        model = LimeModel(tiny_config(num_layers=3), seed=0)
        names = list(model.named_parameters())
        self.assertEqual(names[0], "embed")
        self.assertEqual(names[-2:], ["router.2", "router.3"])
        self.assertEqual(model.num_parameters(), sum(p.size for p in model.named_parameters().values()))

    def test_value_capture(self):
        model = LimeModel(tiny_config(), seed=2, dtype=np.float64)
        capture = Capture()
        ids = np.array([[3, 1, 4, 1]])
        model.forward(ids, capture=capture)
        embedded = model.params["embed"].data[ids]
        h = T.rmsnorm(T.constant(embedded), model.params.layer(1, "attn_norm")).data
        np.testing.assert_allclose(capture.records[("values", 1)], h @ model.params.layer(1, "wv").data, atol=1e-12)
        self.assertEqual(capture.records[("hiddens", 2)].shape, (1, 4, 8))
        self.assertEqual(capture.records[("routed", 2)].shape, (1, 4, 8))
        np.testing.assert_allclose(capture.records[("routed", 1)], capture.records[("values", 1)], atol=1e-12)

    def test_generate_is_deterministic(self):
        model = LimeModel(tiny_config(), seed=4)
        prompts = [[1, 5, 6], [1, 7]]
        first = model.generate(prompts, max_new_tokens=5, eos_id=2)
        second = model.generate(prompts, max_new_tokens=5, eos_id=2)
        self.assertEqual(first, second)
        for out in first:
            self.assertLessEqual(len(out), 5)
            if 2 in out:
                self.assertEqual(out.index(2), len(out) - 1)

    def test_generate_respects_max_seq(self):
        model = LimeModel(tiny_config(max_seq=6), seed=4)
        out = model.generate([[1, 2, 3, 4]], max_new_tokens=10, eos_id=-1)
        self.assertEqual(len(out[0]), 2)

    def test_generate_matches_forward(self):
        model = LimeModel(tiny_config(), seed=6)
        out = model.generate([[1, 3, 5]], max_new_tokens=1, eos_id=2)
        logits = model.forward([1, 3, 5]).data
        self.assertEqual(out[0], [int(np.argmax(logits[-1]))])

    def test_attend_rejects_head_mismatch(self):
        q = T.constant(np.zeros((3, 1, 2, 2)))
        k = T.constant(np.zeros((2, 1, 2, 2)))
        with self.assertRaises(ShapeError):
            attend(q, k, k, causal_mask(2))

    def test_rope_preserves_norm(self):
        x = T.constant(np.random.default_rng(0).normal(size=(2, 1, 5, 4)), dtype=np.float64)
        y = apply_rope(x, np.arange(5))
        np.testing.assert_allclose(np.linalg.norm(y.data, axis=-1), np.linalg.norm(x.data, axis=-1))
        np.testing.assert_allclose(y.data[:, :, 0], x.data[:, :, 0])
        with self.assertRaises(ShapeError):
            apply_rope(T.constant(np.zeros((1, 1, 2, 3))), np.arange(2))


class TestLayerReference(unittest.TestCase):
    def setUp(self):
        self.cfg = tiny_config(hidden_size=16, num_heads=4, num_kv_heads=2, routing_variant="full")
        self.model = LimeModel(self.cfg, seed=8, dtype=np.float64)
        self.rng = np.random.default_rng(9)

    def test_project_and_buffer(self):
        x = self.rng.normal(size=(2, 3, 16))
        positions = np.arange(3)
        buf = KvBuffer(self.cfg.num_layers)
        q, v_flat = self.model.project_and_buffer(T.constant(x, dtype=np.float64), 1, buf, positions)
        w = lambda name: self.model.params.layer(1, name).data
        self.assertEqual(buf.filled_layers, 1)
        np.testing.assert_allclose(q.data, reference_rope(split_heads(x @ w("wq"), 4), positions), atol=1e-12)
        np.testing.assert_allclose(buf.keys[0].data, reference_rope(split_heads(x @ w("wk"), 2), positions), atol=1e-12)
        np.testing.assert_allclose(buf.values[0].data, split_heads(x @ w("wv"), 2), atol=1e-12)
        np.testing.assert_allclose(v_flat.data, x @ w("wv"), atol=1e-12)

    def test_attend(self):
        q = self.rng.normal(size=(4, 2, 5, 3))
        k = self.rng.normal(size=(2, 2, 5, 3))
        v = self.rng.normal(size=(2, 2, 5, 3))
        out = attend(T.constant(q, dtype=np.float64), T.constant(k, dtype=np.float64), T.constant(v, dtype=np.float64))
        np.testing.assert_allclose(out.data, reference_attention(q, k, v), atol=1e-12)

    def test_decoder_layers(self):
        x = self.rng.normal(size=(1, 2, 16))
        positions = np.arange(2)
        buf = KvBuffer(self.cfg.num_layers)
        keys, values = [], []
        out, expected = T.constant(x, dtype=np.float64), x
        for layer in (1, 2):
            out = self.model.decoder_layer(out, layer, buf, positions)
            expected = reference_block(self.model, expected, layer, keys, values, positions)
            np.testing.assert_allclose(out.data, expected, atol=1e-10)


class TestGradients(unittest.TestCase):
    def check(self, cfg, names):
        model = LimeModel(cfg, seed=11, dtype=np.float64)
        ids = np.array([[1, 4, 2, 9, 3], [5, 6, 0, 10, 1]])
        targets = np.array([[4, 2, 9, 3, -100], [6, 0, 10, 1, 2]])
        params = model.named_parameters()
        T.backward(model.loss(ids, targets))
        for name in names:
            p = params[name]
            expected = numeric_grad(lambda: model.loss(ids, targets).item(), p.data, eps=1e-5)
            self.assertLess(relative_error(p.grad, expected), 1e-4, name)
        return params

    def test_full_router(self):
        cfg = tiny_config(num_layers=3, num_heads=4, num_kv_heads=2)
        self.check(cfg, ["embed", "layers.1.wk", "layers.1.wv", "layers.2.wq", "layers.3.w_gate", "final_norm", "router.2", "router.3"])

    def test_masked_router(self):
        cfg = tiny_config(num_layers=3, routing_variant="last_j", routing_j=1)
        params = self.check(cfg, ["layers.1.wv", "router.3"])
        np.testing.assert_array_equal(params["router.3"].grad[:, :4], 0.0)
