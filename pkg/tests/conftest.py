"""Shared fixtures: trained selection-rule checkpoints.

Training the rules dominates the acceptance suite's runtime, so checkpoints
are cached under ``tests/.cache`` and reused across runs.  Training is
deterministic end to end (fixed net seed, fixed draw seed, deterministic
problem synthesis), so a cached checkpoint is byte-identical to a freshly
trained one; delete the cache directory to force a retrain.
"""

import pathlib
import time

import pytest

from devopt.harness import ExperimentConfig, train_from_config

CACHE = pathlib.Path(__file__).parent / ".cache"

ABLATION_EPS = (0.5, 0.9, 0.999)
ABLATION_STEPS = 2000

# Wall seconds spent training each checkpoint in this run (0 when it came
# from the cache); the effectiveness criterion counts these against its cap.
TRAIN_SECONDS: dict[str, float] = {}


def _smooth_config(eps: float, steps: int) -> ExperimentConfig:
    return ExperimentConfig(
        problem="huber_tv",
        size=32,
        eps=eps,
        train_steps=steps,
        checkpoint=str(CACHE / f"smooth_eps{eps}_steps{steps}.ckpt"),
    )


def _trained(config: ExperimentConfig) -> pathlib.Path:
    path = pathlib.Path(config.checkpoint)
    if not path.exists():
        CACHE.mkdir(exist_ok=True)
        start = time.perf_counter()
        train_from_config(config)
        TRAIN_SECONDS[str(path)] = time.perf_counter() - start
    return path


@pytest.fixture(scope="session")
def smooth_rule_checkpoint():
    """Rule for the 32x32 deblurring objective: eps = 0.9, 2000 steps."""
    return _trained(_smooth_config(0.9, 2000))


@pytest.fixture(scope="session")
def fb_rule_checkpoint():
    """Rule pair for the 32x32 wavelet objective: kappas 0.5, 2000 steps."""
    config = ExperimentConfig(
        problem="wavelet_l1",
        size=32,
        train_steps=2000,
        checkpoint=str(CACHE / "fb_kappa0.5_steps2000.ckpt"),
    )
    return _trained(config)


@pytest.fixture(scope="session")
def ablation_checkpoints():
    """eps -> checkpoint path for the deviation-budget sweep."""
    return {eps: _trained(_smooth_config(eps, ABLATION_STEPS)) for eps in ABLATION_EPS}
