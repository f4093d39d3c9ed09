import copy
import math
import re

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from noduleseg import trainer as tr
from noduleseg.boundary_sampler import SamplerConfig, plan_dataset
from noduleseg.dbresnet import NetworkConfig, build
from noduleseg.patch_engine import PatchSource
from noduleseg.phantom_gen import generate_dataset
from noduleseg.trainer import (
    NonFiniteError,
    TrainConfig,
    TrainState,
    cross_entropy,
    format_log_line,
    lr_at,
    make_optimizer,
    sgd_momentum_step,
    split_volumes,
    train,
)
from noduleseg.volume_store import normalize_hu

TINY = NetworkConfig(channel_divisor=16, cip_placement=1)


@pytest.fixture(scope="module")
def toy_data():
    cases = generate_dataset(6, seed=1)
    vols = {c.case_id: normalize_hu(c.volume) for c in cases}
    manifest = plan_dataset(
        [(c.case_id, c.true_mask, c.record.diameter_mm) for c in cases], SamplerConfig(seed=0, max_samples=240)
    )
    return manifest, PatchSource(vols)


# -- loss --------------------------------------------------------------------------


def test_cross_entropy_values():
    assert abs(cross_entropy([1], [0.5]) - math.log(2)) < 1e-9
    assert cross_entropy([1, 0], [1.0, 0.0]) <= -math.log(1 - 1e-7) + 1e-12
    p = 0.8
    assert cross_entropy([1, 0], [p, 1 - p]) == pytest.approx(cross_entropy([1], [p]))
    with pytest.raises(ValueError):
        cross_entropy([], [])


def test_cross_entropy_tensor_is_differentiable():
    p = torch.tensor([0.3, 0.6], dtype=torch.float64, requires_grad=True)
    loss = cross_entropy(torch.tensor([1.0, 0.0]), p)
    loss.backward()
    assert p.grad[0] == pytest.approx(-1 / 0.3 / 2)
    assert p.grad[1] == pytest.approx(1 / 0.4 / 2)


@given(st.lists(st.tuples(st.integers(0, 1), st.floats(0, 1)), min_size=1, max_size=30))
def test_cross_entropy_is_non_negative(pairs):
    y, p = zip(*pairs)
    loss = cross_entropy(list(y), list(p))
    assert loss >= 0
    if all(abs(a - b) == 0 for a, b in pairs):
        assert loss < 1e-6


# -- schedule and optimizer ------------------------------------------------------------


def test_lr_schedule():
    assert [lr_at(e) for e in range(5)] == [0.001] * 5
    assert lr_at(5) == pytest.approx(0.0009)
    assert lr_at(12) == pytest.approx(0.001 * 0.81)
    flat = TrainConfig(lr_decay=1.0)
    assert all(lr_at(e, flat) == 0.001 for e in range(30))
    tenfold = TrainConfig(lr_decay=0.1)
    assert lr_at(5, tenfold) == pytest.approx(1e-4)
    with pytest.raises(ValueError):
        lr_at(-1)


@given(st.integers(0, 200), st.integers(0, 200))
def test_lr_is_non_increasing(a, b):
    lo, hi = sorted((a, b))
    assert lr_at(hi) <= lr_at(lo)
    assert lr_at(a) == pytest.approx(0.001 * 0.9 ** (a // 5))


def _param(value, grad):
    p = torch.nn.Parameter(torch.tensor([float(value)], dtype=torch.float64))
    p.grad = torch.tensor([float(grad)], dtype=torch.float64)
    return p


def _sgd(*params, momentum=0.9):
    return make_optimizer(list(params), TrainConfig(momentum=momentum))


def test_momentum_hand_iteration():
    p = _param(0.0, 1.0)
    opt = _sgd(p)
    sgd_momentum_step([("w", p)], opt, lr=1.0)
    assert p.item() == pytest.approx(-1.0)
    sgd_momentum_step([("w", p)], opt, lr=1.0)
    assert p.item() == pytest.approx(-2.9)


def test_zero_gradient_and_plain_sgd():
    p = _param(2.0, 0.0)
    opt = _sgd(p)
    for _ in range(3):
        sgd_momentum_step([("w", p)], opt, lr=0.1)
    assert p.item() == 2.0
    q = _param(1.0, 0.5)
    opt = _sgd(q, momentum=0.0)
    for _ in range(4):
        sgd_momentum_step([("q", q)], opt, lr=0.1)
    assert q.item() == pytest.approx(1.0 - 4 * 0.1 * 0.5)


def test_step_uses_the_scheduled_rate():
    p = _param(0.0, 1.0)
    opt = _sgd(p, momentum=0.0)
    sgd_momentum_step([("w", p)], opt, lr=lr_at(5))
    assert p.item() == pytest.approx(-0.0009)


def test_non_finite_gradient_aborts_without_update():
    good, bad = _param(1.0, 1.0), _param(1.0, float("nan"))
    with pytest.raises(NonFiniteError, match="bad"):
        sgd_momentum_step([("good", good), ("bad", bad)], _sgd(good, bad), lr=0.1)
    assert good.item() == 1.0


def test_train_state_counters():
    s = TrainState()
    assert s.record(1.0) and s.epochs_since_improvement == 0
    assert not s.record(1.0) and s.epochs_since_improvement == 1
    assert not s.record(2.0) and s.epochs_since_improvement == 2
    assert s.record(0.5) and s.epochs_since_improvement == 0
    assert s.best_val_loss == 0.5


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=0)
    d = TrainConfig()
    assert (d.lr, d.momentum, d.batch_size, d.max_epochs, d.patience) == (0.001, 0.9, 32, 20, 10)


def test_split_volumes_is_disjoint_and_seeded():
    ids = [f"v{i}" for i in range(20)]
    a_train, a_val = split_volumes(ids, 0.1, 3)
    assert len(a_val) == 2 and not set(a_train) & set(a_val)
    assert sorted(a_train + a_val) == sorted(ids)
    assert split_volumes(ids, 0.1, 3) == (a_train, a_val)
    with pytest.raises(ValueError):
        split_volumes(["only"], 0.5, 0)


def test_log_line_is_parseable():
    line = format_log_line(3, 0.0009, 0.5, 0.25, 1.5)
    fields = dict(kv.split("=") for kv in line.split())
    assert fields == {"epoch": "3", "lr": "0.0009", "train_loss": "0.500000", "val_loss": "0.250000", "seconds": "1.50"}


# -- training loop --------------------------------------------------------------------------


def _scripted(monkeypatch, losses):
    it = iter(losses)
    monkeypatch.setattr(tr, "evaluate_loss", lambda *a, **k: next(it))


def test_early_stopping_returns_best_checkpoint(monkeypatch, toy_data):
    manifest, source = toy_data
    _scripted(monkeypatch, [0.6, 0.4, 0.5, 0.45, 0.7, 0.1])
    net = build(TINY)
    snapshots = []
    ckpt = train(net, manifest, source, TrainConfig(max_epochs=6, patience=3), on_epoch=lambda _: snapshots.append(copy.deepcopy(net.state_dict())))
    assert len(ckpt.history) == 5  # stops after three epochs without improvement
    assert ckpt.epoch == 1 and ckpt.val_loss == 0.4
    assert all(ckpt.val_loss <= h["val_loss"] for h in ckpt.history)
    assert all(torch.equal(ckpt.state[k], snapshots[1][k]) for k in ckpt.state)
    assert all(torch.equal(net.state_dict()[k], snapshots[1][k]) for k in ckpt.state)
    assert net.is_trained


def test_zero_patience_stops_at_first_non_improvement(monkeypatch, toy_data):
    manifest, source = toy_data
    _scripted(monkeypatch, [0.6, 0.5, 0.55, 0.1])
    ckpt = train(build(TINY), manifest, source, TrainConfig(max_epochs=4, patience=0))
    assert len(ckpt.history) == 3 and ckpt.epoch == 1


def test_training_is_deterministic(toy_data):
    manifest, source = toy_data
    cfg = TrainConfig(max_epochs=2, patience=2, seed=4)
    a = train(build(TINY), manifest, source, cfg)
    b = train(build(TINY), manifest, source, cfg)
    assert [h["train_loss"] for h in a.history] == [h["train_loss"] for h in b.history]
    assert [h["val_loss"] for h in a.history] == [h["val_loss"] for h in b.history]
    assert [h["lr"] for h in a.history] == [0.001, 0.001]


def test_training_reduces_loss(toy_data):
    manifest, source = toy_data
    ckpt = train(build(TINY), manifest, source, TrainConfig(max_epochs=3, patience=3, lr=0.01))
    losses = [h["train_loss"] for h in ckpt.history]
    assert losses[-1] < losses[0]


def test_log_callback_lines(toy_data):
    manifest, source = toy_data
    lines = []
    train(build(TINY), manifest, source, TrainConfig(max_epochs=1, patience=1), on_epoch=lines.append)
    assert len(lines) == 1
    assert re.fullmatch(r"epoch=0 lr=0.001 train_loss=\S+ val_loss=\S+ seconds=\S+", lines[0])


def test_validation_must_be_disjoint(toy_data):
    manifest, source = toy_data
    with pytest.raises(ValueError, match="share"):
        train(build(TINY), manifest, source, TrainConfig(max_epochs=1), val_manifest=manifest)
    empty = manifest.subset([])
    with pytest.raises(ValueError):
        train(build(TINY), manifest, source, TrainConfig(max_epochs=1), val_manifest=empty)


def test_non_finite_loss_aborts(toy_data):
    manifest, source = toy_data
    net = build(TINY)
    with torch.no_grad():
        net.head.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteError):
        train(net, manifest, source, TrainConfig(max_epochs=1))
