import numpy as np
import pytest
import torch

from trajstream.config import ModelConfig
from trajstream.generator import GeneratorSpec, generate_synthetic
from trajstream.model import StreamingPredictor
from trajstream.scenario import extract_window
from trajstream.tensorization import tensorize


def tiny_config(**overrides) -> ModelConfig:
    base = dict(D=32, n_heads=4, blocks_fA=1, blocks_fS=1, blocks_fT=1,
                decoder_stages=2, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return tiny_config()


@pytest.fixture
def tiny_model(tiny_cfg) -> StreamingPredictor:
    torch.manual_seed(0)
    return StreamingPredictor(tiny_cfg).eval()


@pytest.fixture
def scenario():
    return generate_synthetic(11, GeneratorSpec(template="intersection", n_agents=4))


@pytest.fixture
def ped_scenario():
    return generate_synthetic(5, GeneratorSpec(template="pedestrian_crossing", n_agents=4))


def window_of(scenario, t_now=30, T_h=30, T_f=60, T_a=20):
    return extract_window(scenario, t_now, T_h, T_f, T_a)


def bundle_of(scenario, cfg: ModelConfig, t_now=30, focal=None):
    window = window_of(scenario, t_now, cfg.T_h, cfg.T_f, cfg.T_a)
    return window, tensorize(window, cfg.P_l, cfg.context_radius_m, focal)


def random_polyline(rng: np.random.Generator, n: int = 12, scale: float = 30.0) -> np.ndarray:
    steps = rng.normal(0.0, 1.0, (n - 1, 2)).cumsum(axis=0)
    line = np.concatenate([[[0.0, 0.0]], steps]) * scale / max(n, 1)
    # nudge any repeated consecutive points apart
    d = np.linalg.norm(np.diff(line, axis=0), axis=1)
    for i in np.flatnonzero(d < 1e-9):
        line[i + 1] += 1e-3
    return line
