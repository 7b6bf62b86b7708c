import numpy as np
import pytest

from layerdiff.unet import ModelConfig, build_model


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        resolutions=(16, 8), hidden_dims=(8, 16), inner_dims=(16, 16),
        blocks_per_level=1, embed_dim=16, groups=4)
    base.update(overrides)
    return ModelConfig(**base)


def randomize_out_convs(model, seed=0):
    """Give the zero-initialized output convolutions nonzero weights so the
    loss actually depends on every parameter."""
    rng = np.random.Generator(np.random.PCG64(seed))
    for name, p in model.params.items():
        if ".out_conv." in name:
            p.data = rng.normal(0.0, 0.05, size=p.data.shape).astype(
                model.params.dtype)


@pytest.fixture
def tiny_model():
    return build_model(tiny_config(), seed=0)
