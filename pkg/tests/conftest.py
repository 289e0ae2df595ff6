import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "deidkit", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("deidkit")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_world():
    from deidkit.world import WorldConfig, generate_world

    return generate_world(WorldConfig(n_identities=60, samples_per_identity=6, seed=3))


@pytest.fixture(scope="session")
def small_experts(small_world):
    from deidkit.world import train_expert

    ident = [train_expert(small_world, "identity", 16, arch=(32,), epochs=15, seed=s, quality_gate=0.0) for s in (1, 2)]
    held = [train_expert(small_world, "identity", 16, arch=(32,), epochs=15, seed=s, quality_gate=0.0) for s in (11,)]
    util = [train_expert(small_world, "utility", 8, arch=(16,), epochs=10, seed=s) for s in (21, 22)]
    return ident, held, util


@pytest.fixture(scope="session")
def runner():
    """Memoising stage runner shared by every test that needs the default world."""
    from deidkit.experiment import Runner

    return Runner()


@pytest.fixture(scope="session")
def default_cfg():
    from deidkit.config import default_config

    return default_config()


class TrendRuns:
    """Lazily computed de-id / inversion / drift numbers per (seed, setting).

    Settings are the default config with an obfuscator or weight override;
    the pipeline for each setting is trained once and reused.
    """

    SETTINGS = {
        "ved": {"obfuscator": {"variant": "ved"}},
        "opp": {"obfuscator": {"variant": "opp"}},
        "mlp0": {"obfuscator": {"variant": "mlp", "beta": 0.0}},
        "mlp0.5": {"obfuscator": {"variant": "mlp", "beta": 0.5}},
        "mlp0.9": {"obfuscator": {"variant": "mlp", "beta": 0.9}},
        "ved_no_uti": {"obfuscator": {"variant": "ved"}, "weights": {"lambda_uti": [0.0, 0.0]}},
    }

    def __init__(self, runner, base):
        self.runner = runner
        self.base = base
        self._cache = {}

    def config(self, seed, setting):
        return self.base.with_seed(seed).replace(**self.SETTINGS[setting])

    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def deid(self, seed, setting):
        from deidkit import experiment

        def go():
            cfg = self.config(seed, setting)
            r = self.runner
            return experiment.evaluate(cfg, r.pipeline(cfg), r.world(cfg), r.experts(cfg).heldout)

        return self._memo(("deid", seed, setting), go)

    def inverted_tpr(self, seed, setting, **overrides):
        from deidkit import experiment

        def go():
            cfg = self.config(seed, setting)
            r = self.runner
            rep = experiment.attack(cfg, r.pipeline(cfg), r.world(cfg), r.experts(cfg).heldout, **overrides)
            return rep["average"]["tpr_at_fpr"]

        return self._memo(("attack", seed, setting, tuple(sorted(overrides.items()))), go)

    def utility_mae(self, seed, setting):
        return float(np.mean([r["prediction_mae"] for r in self.deid(seed, setting)["utility_drift"]]))


@pytest.fixture(scope="session")
def trends(runner, default_cfg):
    return TrendRuns(runner, default_cfg)
