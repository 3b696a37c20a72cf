"""Desk-scale models shared by the acceptance and trend suites.

Trained checkpoints are cached under the pytest cache directory, keyed by the
training settings and the source of the modules that shape training, so
reruns skip training.
"""

import hashlib
import json
from pathlib import Path

import pytest

import patchfool
from patchfool.harness import make_shapes_dataset, train_model
from patchfool.models import TinyCNNConfig, TinyViTConfig, load_checkpoint

VIT_TRAIN = dict(count=4000, epochs=30, lr=1e-3, batch_size=32, seed=0)
CNN_TRAIN = dict(count=4000, epochs=8, lr=1e-3, batch_size=64, seed=0)


def _source_digest():
    src = Path(patchfool.__file__).parent
    h = hashlib.sha256()
    for name in ("tensor.py", "models.py", "harness.py"):
        h.update((src / name).read_bytes())
    return h.hexdigest()[:16]


def _cached_model(request, config, settings):
    key = hashlib.sha256(json.dumps({**settings, "kind": type(config).__name__, "src": _source_digest()},
                                    sort_keys=True).encode()).hexdigest()[:16]
    path = Path(request.config.cache.mkdir("patchfool-models")) / f"{key}.pfml"
    if path.exists():
        return load_checkpoint(path)
    train = make_shapes_dataset(settings["count"], seed=0, split="train")
    return train_model(config, train, epochs=settings["epochs"], lr=settings["lr"], seed=settings["seed"],
                       batch_size=settings["batch_size"], out=path)


@pytest.fixture(scope="session")
def test_set():
    return make_shapes_dataset(500, seed=0, split="test")


@pytest.fixture(scope="session")
def desk_vit(request):
    return _cached_model(request, TinyViTConfig(seed=VIT_TRAIN["seed"]), VIT_TRAIN)


@pytest.fixture(scope="session")
def desk_cnn(request):
    return _cached_model(request, TinyCNNConfig(seed=CNN_TRAIN["seed"]), CNN_TRAIN)
