import json
import pathlib

import numpy as np
import pytest

from tactforce import geometry, pipeline, synth

GOLDEN_DIR = pathlib.Path(__file__).parent / "golden"


def load_or_freeze(name: str, value):
    """Golden-file helper: first verified run freezes the value, later runs load it.

    Returns the stored value (lists/floats as stored in JSON).
    """
    GOLDEN_DIR.mkdir(exist_ok=True)
    path = GOLDEN_DIR / f"{name}.json"
    if not path.exists():
        with open(path, "w") as fh:
            json.dump(value, fh)
        return value
    with open(path) as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def fingertip():
    return geometry.fingertip_layout()


@pytest.fixture(scope="session")
def phalanx():
    return geometry.phalanx_layout()


@pytest.fixture(scope="session")
def chain():
    return geometry.default_chain()


@pytest.fixture(scope="session")
def curved_recording(fingertip, chain):
    """Medium-length curved-regime recording shared across tests."""
    params = synth.default_params(fingertip, "curved", seed=0)
    script = synth.press_script(fingertip, duration=40.0, seed=0)
    return synth.generate_recording(script, fingertip, params, chain)


@pytest.fixture(scope="session")
def curved_dataset(curved_recording):
    return pipeline.preprocess(curved_recording)


def random_dataset(n_rows: int, n_taxels: int, seed: int = 0,
                   noise: float = 0.0, theta=None):
    """Dataset generated exactly by a known raw-linear (m3-style) truth model.

    Returns (dataset, A, b) with forces F = X A^T + b before standardization
    scales (scales are set to one so units coincide).
    """
    rng = np.random.default_rng(seed)
    threen = 3 * n_taxels
    x = rng.normal(size=(n_rows, threen))
    if theta is None:
        a = rng.normal(size=(3, threen)) * 0.3
        b = rng.normal(size=3)
    else:
        a, b = theta
    f = x @ a.T + b
    x_obs = x + rng.normal(0.0, noise, x.shape) if noise > 0.0 else x
    h = {30: (6, 5), 16: (4, 4), 24: (6, 4)}.get(n_taxels, (1, n_taxels))
    ds = pipeline.Dataset(
        X=x_obs, F=f, x_scale=np.ones(threen), f_scale=np.ones(3),
        x_offset=np.zeros(threen), f_offset=np.zeros(3),
        array_id={30: "fingertip", 16: "phalanx", 24: "rect"}.get(n_taxels, "custom"),
        n=n_taxels, grid=h)
    return ds, a, b
