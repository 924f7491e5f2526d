# pylint: disable="missing-class-docstring", "missing-function-docstring"
import json
import pathlib
import tempfile
import unittest

from TsfLab.config import (
    SEEDED_SECTIONS,
    ModelSpec,
    config_from_mapping,
    derive_seed,
    parse_config,
    splitmix64,
)
from TsfLab.defense import DefenseConfig
from TsfLab.errors import ConfigError
from TsfLab.forecaster import TrainConfig


class TestDefaults(unittest.TestCase):
    def test_empty_object(self) -> None:
        config = config_from_mapping({})
        self.assertIsNone(config.data)
        self.assertEqual((config.window.l_in, config.window.l_out), (12, 12))
        self.assertEqual(config.defense.alpha, 0.2)
        self.assertEqual(config.defense.beta, 0.5)
        self.assertEqual(config.defense.pi, 1.25)
        self.assertEqual(config.defense.k, 20)
        self.assertEqual(config.model.architecture, "mlp")
        self.assertEqual(config.train.learning_rate, 1e-4)

    def test_attack_is_fitted_to_the_window(self) -> None:
        config = config_from_mapping({"window": {"l_in": 6, "l_out": 4}})
        self.assertEqual((config.attack.l_tgr, config.attack.l_ptn), (5, 4))

    def test_override(self) -> None:
        config = config_from_mapping({"defense": {"alpha": 0.3}})
        self.assertEqual(config.defense.alpha, 0.3)
        self.assertEqual(config.defense.beta, 0.5)


class TestValidation(unittest.TestCase):
    def test_unknown_key_suggests_the_closest(self) -> None:
        with self.assertRaises(ConfigError) as context:
            config_from_mapping({"defense": {"alhpa": 0.3}})
        self.assertEqual(context.exception.field, "defense.alhpa")
        self.assertIn("did you mean 'alpha'?", str(context.exception))

    def test_unknown_section(self) -> None:
        with self.assertRaises(ConfigError) as context:
            config_from_mapping({"defence": {}})
        self.assertIn("did you mean 'defense'?", str(context.exception))

    def test_invalid_value_names_the_field(self) -> None:
        with self.assertRaises(ConfigError) as context:
            config_from_mapping({"defense": {"alpha": 0.7, "beta": 0.5}})
        self.assertEqual(context.exception.field, "defense.alpha")
        with self.assertRaises(ConfigError) as context:
            config_from_mapping({"train": {"batch_size": 0}})
        self.assertEqual(context.exception.field, "train.batch_size")
        self.assertEqual(str(context.exception), "train.batch_size: must be >= 1, got 0")

    def test_wrong_type_names_the_section(self) -> None:
        with self.assertRaises(ConfigError) as context:
            config_from_mapping({"window": {"l_in": "twelve"}})
        self.assertEqual(context.exception.field, "window")

    def test_section_types_raise_config_errors(self) -> None:
        cases = [
            (lambda: ModelSpec(architecture="rnn"), "architecture"),
            (lambda: ModelSpec(hidden=0), "hidden"),
            (lambda: TrainConfig(learning_rate=-1.0), "learning_rate"),
            (lambda: TrainConfig(optimizer="rmsprop"), "optimizer"),
            (lambda: TrainConfig(loss="mse"), "loss"),
            (lambda: DefenseConfig(alpha=0.7, beta=0.5), "alpha"),
            (lambda: DefenseConfig(pi=0.5), "pi"),
            (lambda: DefenseConfig(k=4, k_max=3), "k_max"),
            (lambda: DefenseConfig(t2=-1), "t2"),
            (lambda: DefenseConfig(t_b=0), "t_b"),
            (lambda: DefenseConfig(sigma=0.0), "sigma"),
        ]
        for build, name in cases:
            with self.subTest(field=name):
                with self.assertRaises(ConfigError) as context:
                    build()
                self.assertEqual(context.exception.field, name)

    def test_boolean_is_not_a_seed(self) -> None:
        self.assertRaises(ConfigError, config_from_mapping, {"seed": True})

    def test_unknown_ablation(self) -> None:
        self.assertRaises(ConfigError, config_from_mapping, {"ablations": ["no_ndf", "no_rfc"]})

    def test_require_data(self) -> None:
        with self.assertRaises(ConfigError) as context:
            config_from_mapping({}).require_data()
        self.assertEqual(context.exception.field, "data")
        self.assertEqual(config_from_mapping({"data": "synthetic"}).require_data(), "synthetic")


class TestSeeds(unittest.TestCase):
    def test_derived_seeds_are_deterministic(self) -> None:
        self.assertEqual(derive_seed(7, "attack"), derive_seed(7, "attack"))
        seeds = {derive_seed(7, section) for section in SEEDED_SECTIONS}
        self.assertEqual(len(seeds), len(SEEDED_SECTIONS))
        self.assertNotEqual(derive_seed(7, "attack"), derive_seed(8, "attack"))

    def test_splitmix64_reference_output(self) -> None:
        self.assertEqual(splitmix64(0), 0xE220A8397B1DCDAF)

    def test_sections_get_derived_seeds(self) -> None:
        config = config_from_mapping({"seed": 3})
        for section in SEEDED_SECTIONS:
            self.assertEqual(getattr(config, section).seed, derive_seed(3, section))

    def test_explicit_seed_wins(self) -> None:
        config = config_from_mapping({"seed": 3, "attack": {"seed": 99}})
        self.assertEqual(config.attack.seed, 99)
        self.assertEqual(config.defense.seed, derive_seed(3, "defense"))

    def test_changing_one_section_keeps_the_others(self) -> None:
        first = config_from_mapping({"seed": 1})
        second = config_from_mapping({"seed": 1, "defense": {"alpha": 0.1}})
        self.assertEqual(first.seeds(), second.seeds())


class TestConfigHash(unittest.TestCase):
    def test_hash_is_stable(self) -> None:
        first = config_from_mapping({"data": "synthetic", "seed": 4})
        second = config_from_mapping({"seed": 4, "data": "synthetic"})
        self.assertEqual(first.config_hash(), second.config_hash())
        self.assertEqual(len(first.config_hash()), 64)

    def test_hash_follows_values(self) -> None:
        self.assertNotEqual(
            config_from_mapping({}).config_hash(),
            config_from_mapping({"defense": {"alpha": 0.3}}).config_hash(),
        )


class TestParseConfig(unittest.TestCase):
    def test_file(self) -> None:
        with tempfile.TemporaryDirectory() as folder:
            path = pathlib.Path(folder) / "experiment.json"
            path.write_text(json.dumps({"data": "synthetic", "defense": {"k": 5}}), encoding="utf-8")
            config = parse_config(path)
        self.assertEqual(config.defense.k, 5)
        self.assertTrue(config.uses_synthetic_data)

    def test_invalid_json(self) -> None:
        with tempfile.TemporaryDirectory() as folder:
            path = pathlib.Path(folder) / "broken.json"
            path.write_text('{"seed": 1,\n  "data": }', encoding="utf-8")
            with self.assertRaises(ConfigError) as context:
                parse_config(path)
        self.assertIn("line 2", str(context.exception))

    def test_missing_file(self) -> None:
        self.assertRaises(ConfigError, parse_config, "/nonexistent/experiment.json")


if __name__ == "__main__":
    unittest.main()
