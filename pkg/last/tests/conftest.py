import numpy as np
import pytest

from last.side_tuning.backbone import Backbone, BackboneConfig
from last.side_tuning.datasets import make_synth
from last.side_tuning.feature_cache import extract
from last.side_tuning.side_network import SideConfig


@pytest.fixture(scope="session")
def toy_config():
    return BackboneConfig.preset("toy")


@pytest.fixture(scope="session")
def backbone(toy_config):
    return Backbone(toy_config, seed=0)


@pytest.fixture(scope="session")
def dataset():
    return make_synth(num_classes=4, seed=0, n_train=24, n_eval=8)


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory, dataset, backbone):
    path = str(tmp_path_factory.mktemp("cache"))
    extract(dataset, backbone, 1, path)
    return path


@pytest.fixture
def cache(cache_dir):
    from last.side_tuning.feature_cache import open_cache

    return open_cache(cache_dir)


@pytest.fixture
def side_config(toy_config):
    return SideConfig.for_backbone(toy_config, gap=2, stack=2, rank=8, n_head=2, num_classes=4)


@pytest.fixture
def random_taps():
    """Five float32-valued taps [L=17, d=32] for a toy side-network at gap 1."""
    rng = np.random.default_rng(3)
    return [rng.standard_normal((17, 32)).astype(np.float32).astype(np.float64) for _ in range(5)]
