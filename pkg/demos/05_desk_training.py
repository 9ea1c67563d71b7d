"""
Training the tiny twins
=======================

Trains the desk-scale GUNN and its simultaneous twin with the compressed
schedule. With CIFAR-10 binaries under GUNN_DATA_ROOT a 2,000-image subset
is used; otherwise random images with a learnable labelling stand in so the
script still runs end to end (the numbers then mean nothing about CIFAR).
"""

import os

import numpy as np

from gunn.arch import build_tiny_pair
from gunn.data import DatasetSource, load_cifar, train_stats
from gunn.train import TrainConfig, epoch_means, evaluate, train

EPOCHS = 4
gunn, sunn = build_tiny_pair("1/20", partitions=(4, 5, 6))

root = os.environ.get("GUNN_DATA_ROOT")
if root:
    mean, std = train_stats(root)
    tr = load_cifar(DatasetSource(root, "train", subset_size=2000), mean, std, np.float32)
    te = load_cifar(DatasetSource(root, "test", subset_size=500), mean, std, np.float32)
else:
    rng = np.random.default_rng(0)
    images = rng.standard_normal((640, 3, 32, 32)).astype(np.float32)
    # label by the sign pattern of channel means so there is something to fit
    labels = (images.mean(axis=(2, 3)) > 0) @ np.array([1, 2, 4]) % 10
    tr, te = (images[:512], labels[:512]), (images[512:], labels[512:])

for name, spec in (("GUNN", gunn), ("SUNN", sunn)):
    res = train(spec, tr, TrainConfig.desk(EPOCHS, precision="f32"), test_data=te)
    losses = ", ".join(f"{v:.3f}" for v in epoch_means(res.rows))
    print(f"{name}: epoch losses [{losses}], test error {evaluate(res.network, *te)['top1']:.3f}")
