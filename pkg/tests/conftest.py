import numpy as np
import pytest

from poserec.dataio import SynthSpec, split_dataset, synthesize
from poserec.trainer import TrainConfig

TINY_SPEC = dict(
    n_classes=3, videos_per_class=8, items_per_class=6, names_per_class=2, shared_items=2, factor_dim=8, frames=20
)


@pytest.fixture(scope="session")
def tiny_data():
    return synthesize(SynthSpec(**TINY_SPEC))


@pytest.fixture(scope="session")
def tiny_splits(tiny_data):
    ds = tiny_data.dataset()
    return tuple(ds.subset(ids) for ids in split_dataset(ds.videos, seed=0))


@pytest.fixture
def tiny_config():
    return TrainConfig(epochs=2, batch_size=8, channels=(8, 16), strides=(1, 2), n_neg=4)


def random_windows(rng, b, t=10):
    w = rng.normal(size=(b, t, 33, 4))
    w[..., 3] = rng.uniform(size=(b, t, 33))
    return w


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- planted benchmark runs (shared, slow)

SWEEP_KS = (1, 2, 4, 8)


@pytest.fixture(scope="session")
def planted_splits():
    data = synthesize(SynthSpec())
    ds = data.dataset()
    return tuple(ds.subset(ids) for ids in split_dataset(ds.videos, seed=0))


@pytest.fixture(scope="session")
def planted_sweep(planted_splits, tmp_path_factory):
    from poserec.evaluator import sweep

    out = tmp_path_factory.mktemp("k-sweep")
    points = sweep("K", SWEEP_KS, *planted_splits, TrainConfig(), out_dir=out)
    return out, points


@pytest.fixture(scope="session")
def planted_full_point(planted_sweep):
    _, points = planted_sweep
    return next(p for p in points if p.value == 4)


@pytest.fixture(scope="session")
def planted_full(planted_full_point):
    return planted_full_point.result
