# pylint: disable="missing-class-docstring", "missing-function-docstring"
import tempfile
import unittest
from dataclasses import replace
from typing import Any, Dict, List

import numpy as np

from TsfLab import pipeline
from TsfLab.config import ExperimentConfig, config_from_mapping
from TsfLab.series_core import split

SEEDS = (0, 1, 2)

EXPERIMENT: Dict[str, Any] = {
    "data": "synthetic",
    "undefended_epochs": 100,
    "ablations": ["no_drls"],
    "diagnostics": False,
    "window": {"l_in": 12, "l_out": 12},
    "attack": {
        "shape": "cone",
        "trigger_kind": "random",
        "eta_t": 0.03,
        "eta_s": 0.3,
        "l_tgr": 12,
        "l_ptn": 12,
        "delta_tgr": 1.0,
    },
    "model": {"architecture": "mlp"},
    "train": {"learning_rate": 1e-3},
    "synthetic": {"n_steps": 4000, "n_channels": 8},
}


def experiment(seed: int, out: str) -> ExperimentConfig:
    config = config_from_mapping({**EXPERIMENT, "seed": seed, "out": out})
    train, _, _ = split(pipeline.load_dataset(config), config.split, config.window)
    amplitude = 3.0 * float(np.mean(train.values.std(axis=0)))
    return replace(config, attack=replace(config.attack, amplitude=amplitude))


class TestDeskScaleDefense(unittest.TestCase):
    reports: List[Dict[str, Any]] = []
    amplitudes: List[float] = []

    @classmethod
    def setUpClass(cls) -> None:
        cls.reports = []
        cls.amplitudes = []
        for seed in SEEDS:
            with tempfile.TemporaryDirectory() as folder:
                config = experiment(seed, folder)
                cls.amplitudes.append(config.attack.amplitude)
                cls.reports.append(pipeline.run_pipeline(config))

    def mean(self, section: str, key: str) -> float:
        return float(np.mean([report[section][key] for report in self.reports]))

    def variant_fder(self, name: str) -> float:
        return float(
            np.mean(
                [
                    next(row["fder"] for row in report["variants"] if row["variant"] == name)
                    for report in self.reports
                ]
            )
        )

    def test_undefended_model_learns_the_backdoor(self) -> None:
        self.assertLess(self.mean("undefended", "mae_p"), 0.6 * float(np.mean(self.amplitudes)))

    def test_defense_rating(self) -> None:
        self.assertGreaterEqual(self.mean("defended", "fder"), 0.60)

    def test_clean_accuracy_is_kept(self) -> None:
        self.assertLessEqual(self.mean("defended", "mae_c"), 1.10 * self.mean("undefended", "mae_c"))

    def test_reliable_pool_avoids_poisoned_windows(self) -> None:
        self.assertLess(
            self.mean("defended", "poisoned_in_pool"),
            0.5 * self.mean("defended", "poisoned_base_rate"),
        )

    def test_dynamic_selection_matters(self) -> None:
        self.assertLessEqual(self.variant_fder("no_drls"), self.variant_fder("timeguard") - 0.05)


if __name__ == "__main__":
    unittest.main()
