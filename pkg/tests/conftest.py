import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bcpnn.config import NetworkConfig

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

MNIST_DIR = Path(os.environ.get("BCPNN_MNIST_DIR", "/root/data/mnist"))
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def mnist_paths():
    paths = {k: MNIST_DIR / v for k, v in MNIST_FILES.items()}
    if not all(p.is_file() for p in paths.values()):
        return None
    return paths


@pytest.fixture(scope="session")
def mnist():
    paths = mnist_paths()
    if paths is None:
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR} (set BCPNN_MNIST_DIR)")
    from bcpnn.encoding import load_idx

    train = load_idx(paths["train_images"], paths["train_labels"])
    test = load_idx(paths["test_images"], paths["test_labels"], split="test")
    return train, test


def tiny_config(**kw) -> NetworkConfig:
    """A small network on 6x6 images that trains in milliseconds."""
    base = dict(
        n_input_hcu=36,
        n_hidden_hcu=3,
        hidden_mcu_per_hcu=8,
        n_classes=3,
        n_act=8,
        n_sil=4,
        epochs_unsup=2,
        epochs_sup=2,
    )
    base.update(kw)
    return NetworkConfig(**base)


def random_images(n, side=6, seed=0):
    return np.random.default_rng(seed).random((n, side, side))


def random_net(cfg=None, seed=1, scale=1.0):
    from bcpnn.network import build_network

    cfg = cfg or tiny_config()
    net = build_network(cfg)
    rng = np.random.default_rng(seed)
    net.input_hidden.weights[...] = rng.normal(0, scale, net.input_hidden.weights.shape)
    net.input_hidden.biases[...] = rng.normal(-2, 0.5, net.input_hidden.biases.shape)
    net.hidden_output.weights[...] = rng.normal(0, scale, net.hidden_output.weights.shape)
    net.hidden_output.biases[...] = rng.normal(-1, 0.5, net.hidden_output.biases.shape)
    return net


def write_idx(tmp_path, images_u8, labels, name="d"):
    """Write IDX image and label files; returns their paths."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, h, w = images_u8.shape
    ip = tmp_path / f"{name}-images"
    lp = tmp_path / f"{name}-labels"
    ip.write_bytes(np.array([0x803, n, h, w], dtype=">u4").tobytes() + images_u8.tobytes())
    lp.write_bytes(np.array([0x801, n], dtype=">u4").tobytes() + np.asarray(labels, dtype=np.uint8).tobytes())
    return ip, lp


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
