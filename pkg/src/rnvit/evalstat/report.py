"""JSON evaluation report: per-arm metrics, test results, config and seeds."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

POSITIVE_CLASS_NOTE = "positive class = necrosis (label 1); score >= 0.5 predicts necrosis"
DISPERSION_NOTE = "mean ± sample SD across the 5 fold models evaluated on the same test set"


def _plain(obj):
    """Recursively convert numpy scalars/arrays so ``json`` can serialize them."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if hasattr(obj, "to_dict"):
        return _plain(obj.to_dict())
    return obj


@dataclass
class EvalReport:
    config: dict
    seed: int
    arms: dict = field(default_factory=dict)
    tests: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    def add_arm(self, name: str, metrics: dict) -> None:
        self.arms[name] = metrics

    def add_test(self, label: str, result) -> None:
        self.tests.append({"comparison": label, **_plain(result)})

    def add_failure(self, arm: str, error: BaseException) -> None:
        self.failures[arm] = {"type": type(error).__name__, "message": str(error)}

    def to_dict(self) -> dict:
        return _plain({
            "positive_class": POSITIVE_CLASS_NOTE,
            "dispersion": DISPERSION_NOTE,
            "seed": self.seed,
            "derived_seeds": self.seeds,
            "config": self.config,
            "arms": self.arms,
            "tests": self.tests,
            "failures": self.failures,
        })

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path
