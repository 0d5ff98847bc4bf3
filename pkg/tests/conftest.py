import numpy as np
import pytest
from PIL import Image

from genphase import generator as gen


@pytest.fixture(scope="session")
def model_file(tmp_path_factory):
    """Small saved generator shared by harness and CLI tests: k=3, 8x8 gray."""
    path = tmp_path_factory.mktemp("models") / "toy.prgw"
    model = gen.make_synthetic_generator(3, (8, 8, 1), seed=5, hidden=32)
    gen.save_generator(model, path)
    return path


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    """Two valid 8x8 grayscale PNGs plus one unreadable .png."""
    root = tmp_path_factory.mktemp("images")
    ramp = np.linspace(0, 255, 64, dtype=np.uint8).reshape(8, 8)
    Image.fromarray(ramp, mode="L").save(root / "a_ramp.png")
    rng = np.random.default_rng(3)
    blob = (rng.uniform(0, 255, (8, 8))).astype(np.uint8)
    Image.fromarray(blob, mode="L").save(root / "b_blob.png")
    (root / "c_broken.png").write_bytes(b"this is not an image")
    return root


@pytest.fixture
def config_factory(model_file, dataset_dir, tmp_path):
    """Writes fast-running sweep TOMLs; keyword overrides patch whole lines."""

    def make(name="exp.toml", out_name="bundle", **overrides):
        values = {
            "generator": str(model_file),
            "out_dir": str(tmp_path / out_name),
            "master_seed": 7,
            "dataset_dir": str(dataset_dir),
            "target_shape": "[8, 8, 1]",
            "family": "gaussian",
            "extra_operator": "",
            "m_values": "[16, 32]",
            "noise_percents": "[0.0, 50.0]",
            "trials": 1,
            "restarts": 2,
            "iterations": 40,
        }
        values.update(overrides)
        text = f"""
[experiment]
generator = "{values['generator']}"
out_dir = "{values['out_dir']}"
master_seed = {values['master_seed']}

[dataset]
dir = "{values['dataset_dir']}"
target_shape = {values['target_shape']}

[operator]
family = "{values['family']}"
{values['extra_operator']}

[sweep]
m_values = {values['m_values']}
noise_percents = {values['noise_percents']}
trials = {values['trials']}

[solver]
restarts = {values['restarts']}
iterations = {values['iterations']}
step_size = 0.1
stop_tol = 1e-9

[projection]
restarts = 2
iterations = 150
step_size = 0.1
stop_tol = 1e-10
"""
        path = tmp_path / name
        path.write_text(text)
        return path

    return make
