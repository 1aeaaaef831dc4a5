import numpy as np
import pytest

from coreinfer import synth
from coreinfer.model import Model

TINY_SEED = 3  # qualified: every FFN neuron fires in 96-token uniform prompts


@pytest.fixture(scope="session")
def tiny_model() -> Model:
    return synth.make_tiny_model(seed=TINY_SEED)


@pytest.fixture(scope="session")
def tiny_silu_model() -> Model:
    return synth.make_tiny_model(seed=TINY_SEED, activation_kind="silu_gated_ffn")


@pytest.fixture(scope="session")
def tiny_bundle(tiny_model, tmp_path_factory):
    path = tmp_path_factory.mktemp("bundle") / "tiny"
    synth.write_model_bundle(tiny_model, path)
    return path


@pytest.fixture(scope="session")
def prompts(tiny_model) -> list[np.ndarray]:
    rng = np.random.default_rng(503)
    return [
        rng.integers(0, tiny_model.config.vocab_size, size=48).astype(np.int64)
        for _ in range(6)
    ]
