import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gunn.arch import build_tiny_pair, convert_mode
from gunn.checkpoint import (Checkpoint, convert_checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes)
from gunn.data import (DataError, DatasetSource, apply_augment, augment, channel_stats, load_cifar, normalize,
                       read_records, write_records)
from gunn.engine import SIMULTANEOUS
from gunn.network import Network
from gunn.tensor import FormatError
from gunn.train import (MetricRow, TrainConfig, dataset_loss, decays, evaluate, evaluate_checkpoint, metrics_csv,
                        metrics_digest, network_from_checkpoint, sgd_step, train)
from synthetic import fake_cifar


def tiny(residual=True):
    return build_tiny_pair(0.05, partitions=(4, 5, 6), residual=residual)


# ----------------------------------------------------------------------------
# ingestion


def test_single_white_record_normalizes_per_channel(tmp_path):
    path = tmp_path / "one.bin"
    write_records(path, np.full((1, 3, 32, 32), 255), [3])
    images, labels = read_records(path, 10)
    assert labels.tolist() == [3] and images.shape == (1, 3, 32, 32)
    mean, std = np.array([0.49, 0.48, 0.45]), np.array([0.25, 0.24, 0.26])
    x = normalize(images, mean, std)
    for c in range(3):
        assert np.allclose(x[0, c], (1 - mean[c]) / std[c], rtol=0, atol=1e-15)


def test_record_layout_is_channel_major(tmp_path):
    img = np.zeros((1, 3, 32, 32), np.uint8)
    img[0, 1, 2, 5] = 7
    path = tmp_path / "r.bin"
    write_records(path, img, [9])
    raw = path.read_bytes()
    assert raw[0] == 9 and raw[1 + 1024 + 2 * 32 + 5] == 7
    write_records(tmp_path / "c100.bin", img, [42], classes=100, coarse=[4])
    raw = (tmp_path / "c100.bin").read_bytes()
    assert raw[:2] == bytes([4, 42]) and read_records(tmp_path / "c100.bin", 100)[1].tolist() == [42]


def test_truncated_file_reports_offset(tmp_path):
    path = tmp_path / "t.bin"
    write_records(path, np.zeros((2, 3, 32, 32)), [1, 2])
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(DataError, match="byte offset 3073"):
        read_records(path, 10)


def test_bad_label_reports_offset(tmp_path):
    path = tmp_path / "b.bin"
    write_records(path, np.zeros((2, 3, 32, 32)), [1, 2])
    data = bytearray(path.read_bytes())
    data[3073] = 11
    path.write_bytes(bytes(data))
    with pytest.raises(DataError, match="offset 3073"):
        read_records(path, 10)


def test_missing_split_files(tmp_path):
    with pytest.raises(DataError):
        load_cifar(DatasetSource(str(tmp_path)))


def test_subset_is_seeded_and_exact(tmp_path):
    fake_cifar(tmp_path, n_train=100)
    a = load_cifar(DatasetSource(str(tmp_path), subset_size=37, seed=3))
    b = load_cifar(DatasetSource(str(tmp_path), subset_size=37, seed=3))
    c = load_cifar(DatasetSource(str(tmp_path), subset_size=37, seed=4))
    assert len(a[1]) == 37 and np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])
    with pytest.raises(DataError):
        load_cifar(DatasetSource(str(tmp_path), subset_size=101))


def test_test_split_uses_training_statistics(tmp_path):
    fake_cifar(tmp_path, n_train=50, n_test=10)
    raw_train = np.concatenate([read_records(tmp_path / f"data_batch_{i}.bin", 10)[0] for i in range(1, 6)])
    mean, std = channel_stats(raw_train)
    x, _ = load_cifar(DatasetSource(str(tmp_path), "test"))
    raw_test, _ = read_records(tmp_path / "test_batch.bin", 10)
    assert np.allclose(x, normalize(raw_test, mean, std), atol=1e-15)


def test_cifar100_reads_fine_labels(tmp_path):
    fake_cifar(tmp_path, n_train=10, n_test=5, classes=100)
    _, labels = load_cifar(DatasetSource(str(tmp_path), "train", classes=100))
    assert labels.max() < 100 and len(labels) == 10


# ----------------------------------------------------------------------------
# augmentation


def test_augment_identity_with_no_flip_no_shift():
    x = np.random.default_rng(0).standard_normal((4, 3, 32, 32))
    out = apply_augment(x, np.zeros(4, bool), np.zeros((4, 2), int))
    assert np.array_equal(out, x)


def test_flip_twice_is_identity_and_keeps_channel_sums():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 3, 8, 8))
    mask = rng.random(6) < 0.5
    zero = np.zeros((6, 2), int)
    once = apply_augment(x, mask, zero)
    assert np.array_equal(apply_augment(once, mask, zero), x)
    assert np.allclose(once.sum(axis=(2, 3)), x.sum(axis=(2, 3)), rtol=0, atol=1e-12)


def test_shift_moves_content_with_zero_fill():
    x = np.arange(16.0).reshape(1, 1, 4, 4) + 1
    out = apply_augment(x, np.zeros(1, bool), np.array([[1, -2]]))
    assert out[0, 0, 0].tolist() == [0, 0, 5, 6] and out[0, 0, 3].tolist() == [0, 0, 0, 0]


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 8), st.integers(0, 1000))
def test_augment_keeps_shape_and_range(b, seed):
    x = np.random.default_rng(seed).random((b, 3, 32, 32))
    out = augment(x, np.random.default_rng(seed))
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= x.max()


# ----------------------------------------------------------------------------
# optimizer


def test_sgd_zero_gradient_no_decay_is_noop():
    p = {"a.weight": np.array([1.0, -2.0])}
    cfg = TrainConfig(weight_decay=0.0, epochs=10, milestones=(5,))
    sgd_step(p, {"a.weight": np.zeros(2)}, {}, cfg, 0)
    assert p["a.weight"].tolist() == [1.0, -2.0]


def test_sgd_scalar_step():
    p = {"w.weight": np.array([1.0])}
    cfg = TrainConfig(weight_decay=0.0, momentum=0.0, epochs=10, milestones=(5,))
    sgd_step(p, {"w.weight": np.array([1.0])}, {}, cfg, 0)
    assert p["w.weight"].item() == pytest.approx(0.9, abs=1e-15)


def test_sgd_momentum_and_decay_policy():
    cfg = TrainConfig(epochs=10, milestones=(5,))
    p = {"c.weight": np.array([2.0]), "bn.scale": np.array([2.0])}
    state = {}
    g = {"c.weight": np.array([1.0]), "bn.scale": np.array([1.0])}
    sgd_step(p, g, state, cfg, 0)
    assert state["c.weight"].item() == pytest.approx(1.0 + 1e-4 * 2.0)
    assert state["bn.scale"].item() == 1.0
    sgd_step(p, g, state, cfg, 0)
    assert state["bn.scale"].item() == pytest.approx(0.9 * 1.0 + 1.0)
    assert decays("head.weight") and not decays("head.bias") and not decays("x.bn1.shift")


def test_schedule_steps():
    cfg = TrainConfig()
    assert cfg.lr(0) == 0.1 and cfg.lr(149) == 0.1
    assert cfg.lr(150) == pytest.approx(0.01) and cfg.lr(160) == pytest.approx(0.01)
    assert cfg.lr(225) == pytest.approx(0.001) and cfg.lr(230) == pytest.approx(0.001)


def test_schedule_validation():
    with pytest.raises(ValueError):
        TrainConfig(milestones=(150, 150))
    with pytest.raises(ValueError):
        TrainConfig(epochs=100, milestones=(50, 100))
    with pytest.raises(ValueError):
        TrainConfig(batch=1)
    d = TrainConfig.desk(20)
    assert d.milestones == (10, 15)


def test_sgd_rejects_non_finite_gradient():
    from gunn.train import NumericalError

    with pytest.raises(NumericalError):
        sgd_step({"a.weight": np.zeros(1)}, {"a.weight": np.array([np.nan])}, {}, TrainConfig(), 0)


# ----------------------------------------------------------------------------
# network gradients end to end


def test_network_gradient_finite_differences():
    from oracles import central_diff, rel_err
    from gunn.layers import softmax_cross_entropy

    spec, _ = build_tiny_pair(0.05, partitions=(4, 5, 6))
    net = Network(spec, seed=1)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 3, 8, 8))
    labels = np.array([1, 7, 3])
    logits, caches = net.forward(x, training=True, update_stats=False)
    _, gl = softmax_cross_entropy(logits, labels)
    grads = net.backward(caches, gl)
    f = lambda: softmax_cross_entropy(net.forward(x, training=True, update_stats=False)[0], labels)[0]
    params = net.parameters()
    for name in ("stem.conv.weight", "stages.0.units.2.blocks.0.conv2.weight", "stages.3.units.1.blocks.0.bn3.scale",
                 "head.weight", "head.bias"):
        arr = params[name]
        idx = sorted(rng.choice(arr.size, min(arr.size, 5), replace=False))
        assert rel_err(grads[name].reshape(-1)[idx], central_diff(f, arr, h=1e-6, indices=idx)) < 1e-5, name


# ----------------------------------------------------------------------------
# training loop


def test_smoke_one_epoch_one_row_per_step():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 3, 32, 32))
    y = rng.integers(0, 10, 64)
    res = train(tiny()[0], (x, y), TrainConfig.desk(4, batch=16), max_epochs=1)
    assert len(res.rows) == 4 and [r.step for r in res.rows] == [0, 1, 2, 3]
    assert all(np.isfinite(r.train_loss) for r in res.rows) and not res.diverged


def test_training_is_deterministic():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((48, 3, 32, 32)), rng.integers(0, 10, 48)
    cfg = TrainConfig.desk(4, batch=16, precision="f32")
    a = train(tiny()[0], (x, y), cfg, max_epochs=2)
    b = train(tiny()[0], (x, y), cfg, max_epochs=2)
    assert metrics_digest(a.rows) == metrics_digest(b.rows)
    assert to_bytes(a.checkpoint) == to_bytes(b.checkpoint)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((48, 3, 32, 32)), rng.integers(0, 10, 48)
    cfg = TrainConfig.desk(4, batch=16)
    full = train(tiny()[0], (x, y), cfg, max_epochs=3)
    path = tmp_path / "ck.gckp"
    train(tiny()[0], (x, y), cfg, max_epochs=2, checkpoint_path=path, norm=(np.zeros(3), np.ones(3)))
    ck = load_checkpoint(path)
    assert ck.epoch == 2 and "norm.mean" in ck.tensors
    rest = train(tiny()[0], (x, y), cfg, resume=ck, max_epochs=1)
    tail = [r for r in full.rows if r.epoch == 2]
    assert [r.train_loss for r in rest.rows] == [r.train_loss for r in tail]
    assert all(np.array_equal(rest.checkpoint.tensors[k], full.checkpoint.tensors[k])
               for k in full.checkpoint.tensors)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_last_good_checkpoint(tmp_path):
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((32, 3, 32, 32)), rng.integers(0, 10, 32)
    x[5] = np.inf
    path = tmp_path / "last.gckp"
    res = train(tiny()[0], (x, y), TrainConfig.desk(4, batch=32, augment=False), checkpoint_path=path)
    assert res.diverged and res.checkpoint.epoch == 0
    assert load_checkpoint(path).epoch == 0


def test_train_rejects_mismatched_data():
    with pytest.raises(ValueError):
        train(tiny()[0], (np.zeros((4, 1, 32, 32)), np.zeros(4, int)), TrainConfig.desk(4))
    with pytest.raises(ValueError):
        train(tiny()[0], (np.zeros((4, 3, 32, 32)), np.array([0, 1, 2, 10])), TrainConfig.desk(4))


def test_metrics_csv_layout():
    rows = [MetricRow(0, 0, 1.5, 0.5, None, 0.1, 0.25), MetricRow(0, 1, 1.25, 0.25, 0.75, 0.1, 0.5)]
    text = metrics_csv(rows, header="seed=0")
    lines = text.splitlines()
    assert lines[0] == "# seed=0"
    assert lines[1] == "epoch,step,train_loss,train_err,test_err,lr,wall_seconds"
    assert lines[2] == "0,0,1.5,0.5,,0.1,0.25"
    slower = [MetricRow(**{**r.__dict__, "wall_seconds": 9.0}) for r in rows]
    assert metrics_digest(rows) == metrics_digest(slower)


# ----------------------------------------------------------------------------
# evaluation and checkpoints


def test_memorized_toy_set_has_zero_error():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((16, 3, 32, 32))
    y = np.arange(16) % 4
    spec, _ = build_tiny_pair(0.05, classes=4, partitions=(4, 5, 6))
    net = Network(spec, seed=0)
    cfg = TrainConfig(lr0=0.05, epochs=60, milestones=(50,), batch=16, augment=False)
    res = train(spec, (x, y), cfg)
    assert evaluate(res.network, x, y)["top1"] == 0.0
    assert net.num_parameters() == res.network.num_parameters()


def test_untrained_network_is_near_chance():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((600, 3, 32, 32))
    y = rng.integers(0, 10, 600)
    err = evaluate(Network(tiny()[0], seed=0, precision="f32"), x, y)["top1"]
    assert 0.8 <= err <= 0.97


def test_top5_reported_for_many_classes():
    rng = np.random.default_rng(6)
    spec, _ = build_tiny_pair(0.05, classes=100, partitions=(4, 5, 6))
    res = evaluate(Network(spec, seed=0), rng.standard_normal((8, 3, 32, 32)), rng.integers(0, 100, 8))
    assert set(res) == {"top1", "top5"} and res["top5"] <= res["top1"]
    with pytest.raises(ValueError):
        evaluate(Network(spec, seed=0), rng.standard_normal((2, 3, 32, 32)), np.array([0, 100]))


def test_inference_is_repeatable():
    rng = np.random.default_rng(7)
    x, y = rng.standard_normal((40, 3, 32, 32)), rng.integers(0, 10, 40)
    res = train(tiny()[0], (x, y), TrainConfig.desk(4, batch=20), max_epochs=1)
    assert dataset_loss(res.network, x, y) == dataset_loss(res.network, x, y)


def test_gradual_checkpoint_differs_when_evaluated_simultaneously():
    rng = np.random.default_rng(8)
    x, y = rng.standard_normal((64, 3, 32, 32)), rng.integers(0, 10, 64)
    res = train(tiny()[0], (x, y), TrainConfig.desk(4, batch=32), max_epochs=2)
    a = network_from_checkpoint(res.checkpoint).predict(x)
    net = network_from_checkpoint(res.checkpoint)
    net.set_mode(SIMULTANEOUS)
    assert np.abs(net.predict(x) - a).max() > 1e-6
    evaluate_checkpoint(res.checkpoint, x, y, mode=SIMULTANEOUS)


def test_checkpoint_round_trip_and_conversion(tmp_path):
    rng = np.random.default_rng(9)
    x, y = rng.standard_normal((32, 3, 32, 32)), rng.integers(0, 10, 32)
    ck = train(tiny()[0], (x, y), TrainConfig.desk(4, batch=16), max_epochs=1).checkpoint
    blob = to_bytes(ck)
    assert to_bytes(from_bytes(blob)) == blob
    there = convert_checkpoint(ck, SIMULTANEOUS)
    assert there.spec == convert_mode(ck.spec, SIMULTANEOUS)
    back = convert_checkpoint(from_bytes(to_bytes(there)), "gradual")
    assert to_bytes(back) == blob
    Network(there.spec).load_state_dict(there.model_state())
    with pytest.raises(FormatError):
        from_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        from_bytes(blob + b"\x00")
