import numpy as np
import pytest

from decm import autodiff as ad
from decm.autodiff import DualValue
from decm.network import (
    CheckpointError,
    EmaShadow,
    VelocityNet,
    ema_update,
    eval_F,
    flow_map,
    load_checkpoint,
    save_checkpoint,
)


def small_net(**kw):
    kw.setdefault("hidden_dim", 16)
    kw.setdefault("n_hidden", 2)
    return VelocityNet(**kw)


def randomize(net, seed=0):
    rng = np.random.default_rng(seed)
    net.params = [rng.normal(0.0, 0.4, p.shape) for p in net.params]
    return net


def test_fresh_net_outputs_zero():
    net = small_net()
    x = np.random.default_rng(0).normal(size=(5, 2))
    out = eval_F(net, x, 0.3, 0.9)
    assert np.array_equal(out, np.zeros_like(x))


def test_eval_is_deterministic():
    net = randomize(small_net(), 1)
    x = np.random.default_rng(2).normal(size=(4, 2))
    a = eval_F(net, x, 0.25, 0.75)
    b = eval_F(net, x, 0.25, 0.75)
    assert a.tobytes() == b.tobytes()


def test_time_bounds_rejected():
    net = small_net()
    x = np.zeros((1, 2))
    with pytest.raises(ValueError):
        eval_F(net, x, -0.1, 0.5)
    with pytest.raises(ValueError):
        eval_F(net, x, 0.5, 1.2)


def test_boundary_identity_bit_exact():
    net = randomize(small_net(), 3)
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = rng.normal(size=(50, 2)) * 3
        t = rng.random(50)
        assert flow_map(net, x, t, t).tobytes() == x.tobytes()


def test_flow_map_rejects_backward_transport():
    net = small_net()
    with pytest.raises(ValueError, match="s >= t"):
        flow_map(net, np.zeros((1, 2)), 0.5, 0.4)


def test_constant_field_flow_map():
    net = small_net()
    net.params[-1] = np.array([1.5, -2.0])  # output bias: F == c everywhere
    x = np.random.default_rng(5).normal(size=(3, 2))
    out = flow_map(net, x, 0.0, 1.0)
    assert np.allclose(out, x + np.array([1.5, -2.0]))


def test_conditional_outputs_differ_across_labels():
    net = randomize(small_net(n_classes=3), 6)
    x = np.random.default_rng(7).normal(size=(4, 2))
    a = eval_F(net, x, 0.5, 0.5, labels=np.zeros(4, dtype=int))
    b = eval_F(net, x, 0.5, 0.5, labels=np.ones(4, dtype=int))
    assert np.max(np.abs(a - b)) > 1e-6


def test_label_out_of_range_rejected():
    net = small_net(n_classes=2)
    with pytest.raises(ValueError):
        net.onehot(np.array([5]))


def test_student_matches_teacher_for_every_s():
    teacher = randomize(small_net(n_classes=2, with_s=False), 8)
    student = small_net(n_classes=2, with_s=True)
    student.init_from_teacher(teacher)
    x = np.random.default_rng(9).normal(size=(6, 2))
    labels = np.array([0, 1, 0, 1, 0, 1])
    ref = eval_F(teacher, x, 0.3, 0.3, labels)
    for s in (0.0, 0.31, 0.7, 1.0):
        got = eval_F(student, x, 0.3, s, labels)
        assert np.max(np.abs(got - ref)) < 1e-14


def test_teacher_has_zero_s_sensitivity():
    teacher = randomize(small_net(with_s=False), 10)
    x = np.random.default_rng(11).normal(size=(3, 2))
    t = np.full(3, 0.4)
    out = ad.jvp(
        lambda xd, td, sd: teacher.apply(teacher.params, xd, td, sd, None),
        [DualValue(x, np.zeros_like(x)), DualValue(t, np.zeros_like(t)), DualValue(t, np.ones_like(t))],
    )
    assert np.array_equal(out.tangent, np.zeros_like(x))


# -- EMA ------------------------------------------------------------------


def test_ema_decay_zero_tracks_current():
    net = randomize(small_net(), 12)
    ema = EmaShadow(net, decay=0.0)
    randomize(net, 13)
    ema_update(ema, net)
    for s, p in zip(ema.shadow, net.params):
        assert np.array_equal(s, p)


def test_ema_decay_one_never_moves():
    net = randomize(small_net(), 14)
    ema = EmaShadow(net, decay=1.0)
    before = [s.copy() for s in ema.shadow]
    randomize(net, 15)
    ema_update(ema, net)
    for s, b in zip(ema.shadow, before):
        assert np.array_equal(s, b)


def test_ema_geometric_closed_form():
    net = randomize(small_net(), 16)
    target = [p.copy() for p in net.params]
    for p in net.params:
        p[...] = 0.0
    ema = EmaShadow(net, decay=0.999)  # shadow starts at 0
    for p, w in zip(net.params, target):
        p[...] = w
    for _ in range(100):
        ema.update(net)
    factor = 1.0 - 0.999**100
    for s, w in zip(ema.shadow, target):
        assert np.allclose(s, factor * w, rtol=1e-12, atol=1e-12)


def test_ema_contraction_bound():
    net = randomize(small_net(), 17)
    ema = EmaShadow(net, decay=0.97)
    for s in ema.shadow:
        s += np.random.default_rng(18).normal(0, 1, s.shape)
    gap0 = np.sqrt(sum(np.sum((s - p) ** 2) for s, p in zip(ema.shadow, net.params)))
    for k in range(1, 30):
        ema.update(net)
        gap = np.sqrt(sum(np.sum((s - p) ** 2) for s, p in zip(ema.shadow, net.params)))
        assert gap <= 0.97**k * gap0 * (1 + 1e-12)


# -- checkpoints -----------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = randomize(small_net(n_classes=2), 19)
    ema = EmaShadow(net, decay=0.995)
    for s in ema.shadow:
        s *= 0.5
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, net, ema, step=1234, digest=b"\x01" * 32)
    net2, ema2, step, digest = load_checkpoint(path)
    assert step == 1234
    assert digest == b"\x01" * 32
    assert ema2.decay == 0.995
    for a, b in zip(net.params, net2.params):
        assert a.tobytes() == b.tobytes()
    for a, b in zip(ema.shadow, ema2.shadow):
        assert a.tobytes() == b.tobytes()


def test_truncated_checkpoint_names_lengths(tmp_path):
    net = randomize(small_net(), 20)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, net, EmaShadow(net), step=1)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match=r"expected \d+ bytes, got \d+"):
        load_checkpoint(path)


def test_bad_magic_rejected_with_offset(tmp_path):
    path = tmp_path / "ckpt.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="offset 0"):
        load_checkpoint(path)


def test_version_mismatch_names_versions(tmp_path):
    net = randomize(small_net(), 21)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, net, EmaShadow(net), step=1)
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(path)


def test_replay_from_checkpoint_is_identical(tmp_path):
    # same weights reloaded into a fresh process-like context give the same
    # evaluation, so the next-step loss is reproducible
    net = randomize(small_net(n_classes=2), 22)
    ema = EmaShadow(net)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, net, ema, step=7)
    net2, _, _, _ = load_checkpoint(path)
    x = np.random.default_rng(23).normal(size=(8, 2))
    labels = np.arange(8) % 2
    a = eval_F(net, x, 0.2, 0.9, labels)
    b = eval_F(net2, x, 0.2, 0.9, labels)
    assert a.tobytes() == b.tobytes()
