# Pytest Configuration and Fixtures for the ugt_rec test suite
# Shared toy datasets, splits and small configs used across unit and
# integration tests

import numpy as np
import pytest

from ugt_rec import data as data_mod
from ugt_rec import tensor as T
from ugt_rec.encoder import EncoderConfig, ItemInputs, init_encoder
from ugt_rec.fusion import FusionConfig, build_graph, init_fusion
from ugt_rec.train import TrainConfig

# =============================================================================
# ENVIRONMENT FIXTURES
# =============================================================================

@pytest.fixture
def mock_env_vars():
    """
    Runtime environment for tests

    Keeps grid search single-threaded and the debug guard on so any
    non-finite value fails loudly
    """
    return {
        "UGT_THREADS": "1",
        "UGT_LOG_LEVEL": "WARNING",
        "UGT_DEBUG": "1",
    }


@pytest.fixture
def mock_environment(mock_env_vars, monkeypatch):
    """Apply the runtime variables to the test process"""
    for key, value in mock_env_vars.items():
        monkeypatch.setenv(key, value)
    return mock_env_vars


@pytest.fixture(autouse=True)
def reset_debug_guard():
    """Every test starts and ends with the NaN guard off"""
    T.set_debug(False)
    yield
    T.set_debug(False)


# =============================================================================
# DATA FIXTURES
# =============================================================================

@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset():
    """
    Hand-built dataset: 3 users, 4 items, 4×4×3 images, vocab 6

    Small enough to reason about every interaction by eye
    """
    images = np.linspace(0.0, 1.0, 4 * 4 * 4 * 3, dtype=np.float32).astype(np.float64).reshape(4, 4, 4, 3)
    return data_mod.Dataset(
        num_users=3,
        num_items=4,
        vocab_size=6,
        interactions=np.array([[0, 0], [0, 1], [1, 1], [1, 2], [2, 3]]),
        item_images=images,
        item_texts=[np.array([1, 2, 3]), np.array([4]), np.array([5, 0]), np.array([], dtype=np.int64)],
    )


@pytest.fixture
def toy_dataset():
    """Synthetic 12×10 dataset with 8×8 images and short texts"""
    return data_mod.generate_synthetic(12, 10, latent_dim=2, density=0.3, seed=7,
                                       image_size=8, channels=3, vocab_size=16, max_text_len=6)


@pytest.fixture
def toy_split(toy_dataset):
    return data_mod.split(toy_dataset, seed=7)


@pytest.fixture
def desk_dataset():
    """The 50×30, density 0.1 dataset from the acceptance runs"""
    return data_mod.generate_synthetic(50, 30, latent_dim=4, density=0.1, seed=0,
                                       image_size=8, channels=3, vocab_size=32, max_text_len=8)


@pytest.fixture
def dataset_dir(tmp_path, toy_dataset):
    """The toy dataset written to disk in the directory format"""
    return data_mod.save(toy_dataset, tmp_path / "data")


# =============================================================================
# MODEL FIXTURES
# =============================================================================

@pytest.fixture
def small_config():
    """A TrainConfig small enough to train in a second or two"""
    return TrainConfig(d=8, n_heads=2, d_ff=16, d_itc=4, encoder_layers=1, graph_layers=1,
                       patch_size=4, lr=0.02, batch_size=32, max_epochs=3, patience=5,
                       itc_temperature=0.2, seed=0)


@pytest.fixture
def encoder_setup(toy_dataset, rng):
    """(params, inputs) for a 1-layer encoder over the toy dataset"""
    config = EncoderConfig(d=8, n_heads=2, d_ff=16, d_itc=4, num_layers=1, patch_size=4)
    inputs = ItemInputs.from_dataset(toy_dataset, config.patch_size)
    params = init_encoder(config, inputs.patch_dim, inputs.num_patches, toy_dataset.vocab_size,
                          toy_dataset.max_text_len, rng)
    return params, inputs


@pytest.fixture
def toy_graph(toy_split):
    return build_graph(toy_split)


@pytest.fixture
def fusion_params(toy_split, rng):
    return init_fusion(FusionConfig(d=8, epsilon=0.3, num_layers=2), toy_split.num_users, toy_split.num_items, rng)
