import os
import json
import unittest
import tempfile
from unittest import mock
from pylime.config import LimeConfig, TrainConfig, PRESETS, load_config, split_config_dict, resolve_seed
from pylime.exceptions import ConfigError

__all__ = ["TestLimeConfig", "TestTrainConfig", "TestConfigFiles", "TestSeed"]

class TestLimeConfig(unittest.TestCase):
    def test_defaults(self):
        cfg = LimeConfig()
        self.assertEqual(cfg.head_dim, 8)
        self.assertTrue(cfg.has_router)
        self.assertEqual(LimeConfig.from_dict(cfg.to_dict()), cfg)

    def test_variant_spelling(self):
        for name in ("last-j", "LAST_J", " Last-J "):
            self.assertEqual(LimeConfig(routing_variant=name, routing_j=2).routing_variant, "last_j")
        self.assertFalse(LimeConfig(routing_variant="average").has_router)
        self.assertFalse(LimeConfig(routing_variant="baseline").has_router)

    def test_window_variants_need_j(self):
        with self.assertRaises(ConfigError):
            LimeConfig(routing_variant="first-j")
        with self.assertRaises(ConfigError):
            LimeConfig(routing_variant="last_j", routing_j=0)
        cfg = LimeConfig().with_variant("first-j", 3)
        self.assertEqual((cfg.routing_variant, cfg.routing_j), ("first_j", 3))

    def test_invalid_shapes(self):
        invalid = [dict(num_layers=0), dict(vocab_size=-1), dict(hidden_size=30, num_heads=4),
                   dict(num_heads=4, num_kv_heads=3), dict(hidden_size=12, num_heads=4, num_kv_heads=4),
                   dict(rope_theta=0.0), dict(routing_variant="diagonal")]
        for values in invalid:
            with self.assertRaises(ConfigError, msg=str(values)):
                LimeConfig(**values)

    def test_unknown_key(self):
        with self.assertRaises(ConfigError):
            LimeConfig.from_dict({"hidden_size": 32, "depth": 4})


class TestTrainConfig(unittest.TestCase):
    def test_needs_length(self):
        with self.assertRaises(ConfigError):
            TrainConfig()
        self.assertEqual(TrainConfig(epochs=2, warmup_steps=-1).epochs, 2)

    def test_invalid_values(self):
        invalid = [dict(schedule="step"), dict(mode="chat"), dict(lr=0.0), dict(router_lr=-1e-3),
                   dict(lr=1e-4, min_lr=1e-3), dict(router_weight_decay=0.1), dict(max_steps=0),
                   dict(max_steps=None, epochs=0), dict(warmup_steps=20, max_steps=10), dict(warmup_steps=-2),
                   dict(batch_size=0), dict(grad_accum=0), dict(seq_len=1), dict(clip_norm=0.0), dict(prefetch=0)]
        for values in invalid:
            values = dict(dict(max_steps=100, warmup_steps=0), **values)
            with self.assertRaises(ConfigError, msg=str(values)):
                TrainConfig(**values)

    def test_round_trip(self):
        cfg = TrainConfig(max_steps=50, warmup_steps=5, schedule="linear")
        self.assertEqual(TrainConfig.from_dict(cfg.to_dict()), cfg)


class TestConfigFiles(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, text):
        path = os.path.join(self.tmp.name, "config.json")
        with open(path, "w") as f:
            f.write(text)
        return path

    def test_split_routes_keys(self):
        model, train = split_config_dict({"num_layers": 6, "lr": 3e-4, "routing_variant": "full"})
        self.assertEqual(model, {"num_layers": 6, "routing_variant": "full"})
        self.assertEqual(train, {"lr": 3e-4})

    def test_preset_then_overrides(self):
        model, train = split_config_dict({"preset": "aet", "num_layers": 8, "lr": 5e-4})
        self.assertEqual(model["num_layers"], 8)
        self.assertEqual(model["hidden_size"], PRESETS["aet"][0]["hidden_size"])
        self.assertEqual(train["lr"], 5e-4)
        self.assertEqual(train["epochs"], 60)
        self.assertEqual(PRESETS["aet"][0]["num_layers"], 4)

    def test_unknown_key_and_preset(self):
        with self.assertRaises(ConfigError):
            split_config_dict({"layers": 4})
        with self.assertRaises(ConfigError):
            split_config_dict({"preset": "giant"})

    def test_load_with_overrides(self):
        path = self.write(json.dumps({"preset": "prosqa", "routing_variant": "last-j", "routing_j": 2}))
        model, train = load_config(path, {"num_layers": 6, "seed": 9})
        self.assertEqual((model.num_layers, model.hidden_size), (6, 128))
        self.assertEqual((model.routing_variant, model.routing_j), ("last_j", 2))
        self.assertEqual((train.seed, train.grad_accum, train.warmup_steps), (9, 4, -1))

    def test_load_without_length(self):
        model, train = load_config(self.write(json.dumps({"hidden_size": 16, "num_heads": 2, "num_kv_heads": 2})))
        self.assertEqual(model.head_dim, 8)
        self.assertEqual((train.max_steps, train.warmup_steps), (1, 0))

    def test_load_errors(self):
        with self.assertRaises(ConfigError):
            load_config(self.write("{\"lr\": "))
        with self.assertRaises(ConfigError):
            load_config(self.write("[1, 2]"))
        with self.assertRaises(ConfigError):
            load_config(self.write(json.dumps({"routing_variant": "last_j"})))
        with self.assertRaises(ConfigError):
            load_config(self.write(json.dumps({"learning_rate": 1e-3})))


class TestSeed(unittest.TestCase):
    def test_precedence(self):
        with mock.patch.dict(os.environ, {"LIME_SEED": "17"}):
            self.assertEqual(resolve_seed(3, 5), 3)
            self.assertEqual(resolve_seed(0, 5), 0)
            self.assertEqual(resolve_seed(None, 5), 5)
            self.assertEqual(resolve_seed(), 17)

    def test_unset_environment(self):
        with mock.patch.dict(os.environ, {}, clear=True):
            self.assertEqual(resolve_seed(), 0)
        with mock.patch.dict(os.environ, {"LIME_SEED": ""}):
            self.assertEqual(resolve_seed(), 0)

    def test_invalid_environment(self):
        with mock.patch.dict(os.environ, {"LIME_SEED": "seven"}):
            with self.assertRaises(ConfigError):
                resolve_seed()
            self.assertEqual(resolve_seed(2), 2)
