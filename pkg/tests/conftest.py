"""Shared fixtures: a small config so unit tests stay fast on CPU."""

import numpy as np
import pytest
import torch

from beliefbench.config import RunConfig


@pytest.fixture(scope="session", autouse=True)
def _torch_threads():
    torch.set_num_threads(max(1, torch.get_num_threads()))
    yield


@pytest.fixture()
def tiny_cfg() -> RunConfig:
    """Reduced model dims; env/DDPM semantics unchanged."""
    return RunConfig.from_overrides(
        {
            "d_f": 16,
            "d_b": 16,
            "d_z": 8,
            "d_i": 16,
            "d_s": 16,
            "d_vlm": 32,
            "den_dim": 32,
            "enc_blocks": 1,
            "bel_blocks": 1,
            "vlm_blocks": 1,
            "den_blocks": 1,
            "enc_heads": 2,
            "bel_heads": 2,
            "vlm_heads": 2,
            "den_heads": 2,
            "ddpm_steps": 20,
            "s_warm": 5,
            "augment": False,
        }
    )


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
