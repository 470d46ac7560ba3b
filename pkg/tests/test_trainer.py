import numpy as np
import pytest
from hypothesis import given, strategies as st

from _gradcheck import numeric_grad
from scdcf.actions import LabeledDataset
from scdcf.errors import ConfigurationError, FormatError
from scdcf.network import NetworkSpec, build_network
from scdcf.trainer import (SGD, Adam, DivergenceError, TrainConfig, cross_entropy, desk_splits, evaluate,
                           load_checkpoint, make_optimizer, match_cnn_widths, predict, save_checkpoint,
                           scheduled_lr, train)


def small_spec(**kw):
    d = dict(widths=(4, 4), K=6, K_alpha=2, L=5, N_s=3, hidden=(16,), input_hw=(12, 12))
    d.update(kw)
    return NetworkSpec(**d)


def toy_data(n, seed=0, size=12, classes=10):
    """Class-dependent bar images, learnable by a small net."""
    r = np.random.default_rng(seed)
    labels = r.integers(0, classes, n)
    imgs = 0.1 * r.uniform(0, 1, (n, 1, size, size))
    for i, y in enumerate(labels):
        imgs[i, 0, y % size, :] += 0.8
        imgs[i, 0, :, (3 * y) % size] += 0.5
    return LabeledDataset(np.clip(imgs, 0, 1), labels)


# ---------------------------------------------------------------- loss

def test_uniform_logits():
    loss, _ = cross_entropy(np.zeros((4, 10)), [0, 3, 9, 2])
    assert loss == pytest.approx(np.log(10))


def test_confident_logits_loss_vanishes():
    logits = np.zeros((1, 10))
    logits[0, 4] = 50.0
    assert cross_entropy(logits, [4])[0] < 1e-20


def test_cross_entropy_gradient(rng):
    logits = rng.standard_normal((5, 10))
    labels = rng.integers(0, 10, 5)
    _, g = cross_entropy(logits, labels)
    num = numeric_grad(lambda: cross_entropy(logits, labels)[0], logits, h=1e-6)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-10)


# ---------------------------------------------------------------- optimizers

@given(w=st.floats(-10, 10), g=st.floats(-10, 10), lr=st.floats(1e-4, 1.0))
def test_sgd_step_exact(w, g, lr):
    p = {"w": np.array([w])}
    SGD(lr).step(p, {"w": np.array([g])})
    assert p["w"][0] == w - lr * g


@given(g=st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3), lr=st.floats(1e-4, 0.1))
def test_adam_first_step_moves_by_lr(g, lr):
    p = {"w": np.array([1.0])}
    opt = Adam(lr)
    opt.step(p, {"w": np.array([g])})
    step = 1.0 - p["w"][0]
    assert np.sign(step) == np.sign(g)
    assert abs(step) == pytest.approx(lr * abs(g) / (abs(g) + 1e-8), rel=1e-9)
    assert opt.t == 1


def test_optimizer_step_count():
    opt = make_optimizer("adam", 0.1)
    p = {"w": np.zeros(3)}
    for _ in range(4):
        opt.step(p, {"w": np.ones(3)})
    assert opt.t == 4
    with pytest.raises(ConfigurationError):
        make_optimizer("rmsprop", 0.1)


def test_schedule():
    rates = [scheduled_lr(e, 0.01, (5, 10), 0.1) for e in (1, 5, 6, 10, 11)]
    np.testing.assert_allclose(rates, [0.01, 0.01, 0.001, 0.001, 0.0001])


# ---------------------------------------------------------------- loop

def test_zero_epochs_logs_initial_evaluation():
    net = build_network(small_spec(), 0)
    rows = train(net, toy_data(8), toy_data(8, 1), TrainConfig(epochs=0))
    assert len(rows) == 1 and rows[0]["epoch"] == 0


def test_training_is_deterministic(tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=8, seed=3)
    logs = []
    for i in range(2):
        net = build_network(small_spec(), 1)
        train(net, toy_data(24), toy_data(8, 1), cfg, checkpoint_path=tmp_path / f"c{i}.bin",
              log_path=tmp_path / f"l{i}.csv")
        logs.append((tmp_path / f"l{i}.csv").read_bytes())
    assert logs[0] == logs[1]
    assert (tmp_path / "c0.bin").read_bytes() == (tmp_path / "c1.bin").read_bytes()


def test_overfits_small_set():
    data = toy_data(64, 5)
    net = build_network(small_spec(), 2)
    rows = train(net, data, data, TrainConfig(epochs=200, batch_size=64, lr=0.01, decay_epochs=()))
    losses = [r["train_loss"] for r in rows[1:6]]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert evaluate(net, data) == 1.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts():
    net = build_network(small_spec(batchnorm=False), 0)
    with pytest.raises(DivergenceError):
        # one step puts the weights near 1e200, so the next logits overflow
        train(net, toy_data(8), toy_data(4), TrainConfig(epochs=3, batch_size=8, optimizer="sgd", lr=1e200))


def test_empty_training_set_rejected():
    empty = LabeledDataset(np.zeros((0, 1, 12, 12)), np.zeros(0))
    with pytest.raises(ConfigurationError):
        train(build_network(small_spec(), 0), empty, toy_data(2), TrainConfig(epochs=1))


# ---------------------------------------------------------------- evaluation

def test_untrained_net_is_at_chance():
    r = np.random.default_rng(0)
    data = LabeledDataset(r.uniform(0, 1, (1000, 1, 12, 12)), r.integers(0, 10, 1000))
    acc = evaluate(build_network(small_spec(), 0), data)
    assert abs(acc - 0.1) <= 0.05


def test_single_correct_item():
    net = build_network(small_spec(), 0)
    x = toy_data(1).images
    pred = int(np.argmax(predict(net, x)))
    assert evaluate(net, LabeledDataset(x, [pred])) == 1.0


def test_predict_batching_agrees():
    # BLAS may round differently for different batch shapes, so only to round-off
    net = build_network(small_spec(), 0)
    x = toy_data(7).images
    a, b = predict(net, x, batch_size=3), predict(net, x, batch_size=7)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(a.argmax(axis=1), b.argmax(axis=1))


# ---------------------------------------------------------------- checkpoints

@pytest.mark.parametrize("kind,opt", [("scdcf", "adam"), ("cnn", "sgd")])
def test_checkpoint_round_trip(tmp_path, kind, opt):
    net = build_network(small_spec(kind=kind, L=5 if kind == "scdcf" else 3), 4)
    cfg = TrainConfig(epochs=1, batch_size=8, optimizer=opt)
    optimizer = make_optimizer(opt, cfg.lr)
    rng = np.random.default_rng(9)
    train(net, toy_data(16), toy_data(8, 1), cfg, optimizer=optimizer, rng=rng)
    save_checkpoint(tmp_path / "c.bin", net, optimizer, rng, epoch=1)
    net2, opt2, rng2, epoch = load_checkpoint(tmp_path / "c.bin")
    assert epoch == 1 and opt2.t == optimizer.t and rng2.random() == rng.random()
    for k, v in net.parameters().items():
        np.testing.assert_array_equal(net2.parameters()[k], v)
    for k, v in net.buffers().items():
        np.testing.assert_array_equal(net2.buffers()[k], v)
    for k, v in optimizer.state().items():
        np.testing.assert_array_equal(opt2.state()[k], v)
    x = toy_data(10, 2)
    np.testing.assert_array_equal(predict(net2, x.images), predict(net, x.images))
    assert evaluate(net2, x) == evaluate(net, x)


def test_resumed_training_matches_uninterrupted(tmp_path):
    cfg = TrainConfig(epochs=3, batch_size=8, decay_epochs=(1,))
    tr, ev = toy_data(16), toy_data(8, 1)
    full = build_network(small_spec(), 0)
    train(full, tr, ev, cfg)
    # the checkpoint after the decay epoch resumes to the same final weights
    first = build_network(small_spec(), 0)
    train(first, tr, ev, TrainConfig(epochs=1, batch_size=8, decay_epochs=(1,)), checkpoint_path=tmp_path / "e1.bin")
    net, opt, rng, epoch = load_checkpoint(tmp_path / "e1.bin")
    train(net, tr, ev, cfg, optimizer=opt, rng=rng, start_epoch=epoch)
    for k, v in full.parameters().items():
        np.testing.assert_array_equal(net.parameters()[k], v)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "c.bin").write_bytes(b"not a checkpoint\nend\n")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "c.bin")
    net = build_network(small_spec(), 0)
    save_checkpoint(tmp_path / "d.bin", net)
    raw = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "e.bin").write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(tmp_path / "e.bin")


# ---------------------------------------------------------------- protocol helpers

def test_matched_cnn_within_five_percent():
    spec = NetworkSpec()
    cnn = match_cnn_widths(spec)
    a, b = build_network(spec, 0).num_params(), build_network(cnn, 0).num_params()
    assert cnn.kind == "cnn" and abs(a - b) / a <= 0.05


def test_desk_splits_disjoint_and_deterministic():
    src = toy_data(30, size=28)
    src.labels = np.arange(30)   # unique tags to check disjointness
    a = desk_splits(src, 1, sizes=(10, 5, 10))
    b = desk_splits(src, 1, sizes=(10, 5, 10))
    tags = np.concatenate([s.labels for s in a])
    assert len(set(tags.tolist())) == 25
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.images, y.images)
    with pytest.raises(ConfigurationError):
        desk_splits(src, 1, sizes=(20, 20, 20))
