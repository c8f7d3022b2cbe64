import numpy as np
import pytest

from mtlscvae.leaksim import PermeabilityModel


def uniform_model(h=8, w=8, perm=1.0, poro=0.5, inactive=()):
    mask = np.ones((h, w), dtype=bool)
    for cell in inactive:
        mask[cell] = False
    return PermeabilityModel(np.full((h, w), perm), np.full((h, w), poro), mask)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def toy_network(h=8, w=8, r=2, n_wells=2, latent_dim=2, filters=(3, 4), dense_units=5,
                class_units=(6, 5, 4)):
    from mtlscvae.scvae import Architecture, SCVAENetwork
    return SCVAENetwork(Architecture((h, w), r, n_wells, latent_dim, filters, dense_units,
                                     class_units))


def toy_batch(rng, net, n=3):
    h, w = net.arch.grid_shape
    r = net.arch.n_classes
    x = rng.standard_normal((n, h, w))
    y = np.eye(r)[rng.integers(0, r, size=n)]
    m = rng.standard_normal((n, net.arch.n_wells))
    return x, y, m


def random_params(net, rng, dtype=np.float64, scale=0.4):
    store = net.init_params(rng, dtype)
    for name in store:
        store.values[name][...] = scale * rng.standard_normal(store[name].shape)
    return store


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
