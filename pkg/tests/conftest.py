import struct

import numpy as np
import pytest


def write_idx(directory, split, images, labels):
    prefix = "train" if split == "train" else "t10k"
    images = np.asarray(images, dtype=np.uint8)
    (directory / f"{prefix}-images-idx3-ubyte").write_bytes(
        struct.pack(">4I", 2051, *images.shape) + images.tobytes())
    (directory / f"{prefix}-labels-idx1-ubyte").write_bytes(
        struct.pack(">2I", 2049, len(labels)) + bytes(int(v) for v in labels))


def synthetic_digits(n, seed):
    """Class-dependent bar patterns plus speckle, 28x28 uint8."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, n)
    images = rng.integers(0, 40, size=(n, 28, 28)).astype(np.uint8)
    for i, y in enumerate(labels):
        images[i, 2 * y + 2:2 * y + 6, 4:24] = 230
    return images, labels


@pytest.fixture
def mnist_dir(tmp_path):
    directory = tmp_path / "mnist"
    directory.mkdir()
    write_idx(directory, "train", *synthetic_digits(48, 0))
    write_idx(directory, "test", *synthetic_digits(16, 1))
    return directory


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
