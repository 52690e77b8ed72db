import pytest

from dakd.core import Domain
from dakd.data import (DEFAULT_TARGET_SHIFT, IDENTITY_SHIFT, SceneSpec, Split,
                       write_dataset)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small 32x32 two-domain dataset shared across training tests."""
    root = tmp_path_factory.mktemp("shapescenes")
    spec = SceneSpec(image_size=(32, 32), seed=7)
    manifests = write_dataset(spec, IDENTITY_SHIFT, DEFAULT_TARGET_SHIFT,
                              {"train": 24, "val": 8}, root)
    return manifests


@pytest.fixture(scope="session")
def src_train(tiny_dataset):
    return tiny_dataset[(Domain.SOURCE, Split.TRAIN)]


@pytest.fixture(scope="session")
def tgt_train(tiny_dataset):
    return tiny_dataset[(Domain.TARGET, Split.TRAIN)]


@pytest.fixture(scope="session")
def tgt_val(tiny_dataset):
    return tiny_dataset[(Domain.TARGET, Split.VAL)]


def rand_probs(rng, h=4, w=4, c=3):
    p = rng.uniform(0.01, 1.0, size=(h, w, c))
    return p / p.sum(axis=2, keepdims=True)
