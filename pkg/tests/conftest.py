import os
from pathlib import Path

import numpy as np
import pytest

from fisherform.netcore import NetworkSpec

MNIST_DIR = Path(os.environ.get("FISHERFORM_MNIST_DIR", "/root/data/mnist"))
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

_acceptance_lines: list[str] = []


def report(number: int, title: str, ok: bool, detail: str = "") -> None:
    """Record one acceptance verdict for the end-of-run summary."""
    status = "PASS" if ok else "FAIL"
    _acceptance_lines.append(f"[{status}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


def random_net(rng: np.random.Generator, widths, scale: float = 0.8):
    """Spec plus Gaussian parameters scaled by 1/sqrt(fan_in)."""
    spec = NetworkSpec.from_widths(widths)
    parts = []
    for layer in spec.layers:
        parts.append(rng.normal(0, scale / np.sqrt(layer.in_width), layer.in_width * layer.out_width))
        parts.append(rng.normal(0, 0.1, layer.out_width))
    return spec, np.concatenate(parts)


def random_widths(rng: np.random.Generator, max_params: int = 10_000):
    while True:
        depth = int(rng.integers(1, 4))
        widths = [int(rng.integers(2, 40))] + [int(rng.integers(2, 60)) for _ in range(depth - 1)] + [int(rng.integers(2, 11))]
        spec = NetworkSpec.from_widths(widths)
        if spec.param_count <= max_params:
            return widths


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_net(rng):
    return random_net(rng, [5, 7, 6, 4])


@pytest.fixture(scope="session")
def mnist_paths():
    paths = {k: MNIST_DIR / v for k, v in MNIST_FILES.items()}
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        pytest.skip(f"MNIST IDX files not found: {missing}; set FISHERFORM_MNIST_DIR")
    return paths
