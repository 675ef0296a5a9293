import numpy as np
import pytest
import torch


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_nets():
    """A double-precision network small enough for exhaustive checks, rows independent."""
    from triclust.model import BackboneSpec, HeadSpec, init_params

    spec = BackboneSpec(resolution=8, feature_dim=8, channels=(4, 4, 8))
    heads = HeadSpec(hidden=16, out=8, cluster_hidden=16, norm="layer")
    return init_params(spec, 3, seed=7, heads=heads, dtype=torch.float64)


@pytest.fixture
def tiny_views():
    from triclust.augment import AugmentPolicy, make_views

    x = torch.rand(4, 3, 8, 8, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    return make_views(x, AugmentPolicy(output_size=8), np.random.default_rng(3))


def small_config(**sections):
    """A run configuration small enough to train for a few epochs in well under a second each."""
    from triclust.config import from_dict

    base = {
        "data": {"synthetic": {"n_clusters": 2, "per_cluster": 8, "resolution": 8}},
        "model": {
            "resolution": 8, "feature_dim": 8, "channels": [4, 8], "hidden": 16, "out": 8,
            "cluster_hidden": 16, "n_clusters": 2,
        },
        "augment": {"output_size": 8},
        "optim": {"batch_size": 8, "epochs": 2},
        "run": {"checkpoint_every": 1, "dtype": "float64"},
    }
    for name, value in sections.items():
        base[name] = {**base.get(name, {}), **value}
    return from_dict(base)


@pytest.fixture
def small_dataset():
    from triclust.data import make_synthetic

    return make_synthetic(small_config().data.synthetic)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run."""
    import sys

    module = sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
