import numpy as np
import pytest

from livingcircles import data_model as dm
from livingcircles.synthetic import SynthSpec, generate_synthetic_city


def fd_gradcheck(build_loss, params, h=1e-4):
    """Max relative error between analytic gradients and central finite
    differences over every entry of ``params``.

    ``build_loss`` must recompute the scalar loss from the params' current
    values each call.
    """
    loss = build_loss()
    for p in params:
        p.zero_grad()
    loss.backward()
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy()
                for p in params]
    worst = 0.0
    for p, grads in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = grads.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = build_loss().item()
            flat[i] = orig - h
            down = build_loss().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            rel = abs(gflat[i] - fd) / max(abs(gflat[i]) + abs(fd), 1e-4)
            worst = max(worst, rel)
    return worst


def tiny_spec(n=6, dim=12):
    return SynthSpec(n_circles=n, dim=dim, images_per_circle=(2, 3),
                     pois_per_circle=(1, 3), reviews_per_poi=(1, 2))


def tiny_config(**overrides):
    defaults = dict(embed_dim=8, epochs=3, batch_size=8, top_k=3, cv_folds=3)
    defaults.update(overrides)
    return dm.RunConfig(**defaults).validate()


@pytest.fixture(scope="session")
def small_city(tmp_path_factory):
    root = tmp_path_factory.mktemp("city")
    generate_synthetic_city(tiny_spec(), seed=11, out_dir=root)
    return root


@pytest.fixture(scope="session")
def small_dataset(small_city):
    return dm.load_dataset(small_city)
