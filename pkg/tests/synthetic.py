"""Synthetic CIFAR-format files for tests that need a dataset root."""

import numpy as np

from gunn.data import write_records


def fake_cifar(root, n_train=60, n_test=20, classes=10, seed=0):
    rng = np.random.default_rng(seed)
    files = {10: ([f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"]),
             100: (["train.bin"], ["test.bin"])}[classes]
    per = n_train // len(files[0])
    for name in files[0]:
        write_records(root / name, rng.integers(0, 256, (per, 3, 32, 32)), rng.integers(0, classes, per), classes)
    for name in files[1]:
        write_records(root / name, rng.integers(0, 256, (n_test, 3, 32, 32)), rng.integers(0, classes, n_test), classes)
    return root
