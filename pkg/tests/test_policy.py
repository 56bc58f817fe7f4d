import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from somtp.objective import ProblemInstance
from somtp.policy import (
    CheckpointError,
    NetworkConfig,
    PolicyNetwork,
    encode_instance,
    load,
    loss_gradient,
    save,
)
from somtp.vehicle import PlannerConfig


def small_net(seed=0, N=3, layers=2, hidden=8, dropout=0.0, **planner):
    cfg = PlannerConfig(N=N, **planner)
    return PolicyNetwork(NetworkConfig(6, 2 * N, layers, hidden, dropout), cfg, seed=seed)


def test_encoding_examples():
    assert np.array_equal(encode_instance(ProblemInstance([1, 2, 0.5])), [1, 2, 0.5])
    inst = ProblemInstance(np.zeros(3), [[2, 0, 0.5]])
    assert np.array_equal(encode_instance(inst), [0, 0, 0, 2, 0, 0.5])
    inst3 = ProblemInstance(np.zeros(3), np.ones((3, 3)))
    assert encode_instance(inst3).shape == (12,)
    with pytest.raises(ValueError):
        encode_instance(inst3, n_obs=2)


def test_zero_head_maps_to_box_midpoint():
    net = small_net()
    net.weights[-1][:] = 0
    net.biases[-1][:] = 0
    u = net.forward(np.ones(6))
    assert np.allclose(u, (net.planner.lo + net.planner.hi) / 2)


def test_symmetric_unit_box_returns_tanh():
    net = small_net(u_min=(-1.0, -1.0), u_max=(1.0, 1.0))
    x = np.linspace(-1, 1, 6)
    u = net.forward(x)
    assert np.allclose(u.reshape(-1), net._cache[2][0], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 100.0))
def test_outputs_inside_box(seed, scale):
    net = small_net(seed=seed % 1000)
    x = np.random.default_rng(seed).normal(size=(5, 6)) * scale
    u = net.forward(x)
    assert np.all(u >= net.planner.lo) and np.all(u <= net.planner.hi)


def test_zero_downstream_gives_zero_gradients():
    net = small_net()
    x = np.ones(6)
    net.forward(x)
    assert all(np.all(g == 0) for g in loss_gradient(net, x, np.zeros((3, 2))))


def test_single_layer_linear_case():
    # a linear head seen through the tanh-and-box map: W gradient is an outer product
    net = PolicyNetwork(NetworkConfig(6, 6, 1, 4, 0.0), PlannerConfig(N=3), seed=1)
    x = np.random.default_rng(0).normal(size=6)
    net.forward(x)
    grads = net.backward(np.ones((3, 2)))
    # first-layer output feeds ReLU then the head; check the head weight gradient
    _, half = net._scale()
    t = net._cache[2][0]
    delta = half * (1 - t * t)
    h = net._cache[0][1][0]
    assert np.allclose(grads[2], np.outer(h, delta))


def test_weight_gradients_match_fd():
    net = small_net(seed=3)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(4, 3, 2))
    net.forward(x)
    grads = net.backward(w)
    for k, p in enumerate(net.params):
        def f(val, k=k):
            old = net.params[k].copy()
            net.params[k][...] = val
            out = float((net.forward(x) * w).sum())
            net.params[k][...] = old
            return out
        assert rel_err(grads[k], central_diff(f, p.copy())) < 1e-5


def test_dropout_backward_uses_same_mask():
    net = small_net(seed=4, dropout=0.3)
    net.training = True
    x = np.random.default_rng(1).normal(size=(3, 6))
    w = np.random.default_rng(2).normal(size=(3, 3, 2))
    net.forward(x, np.random.default_rng(7))
    grads = net.backward(w)

    def f(val):
        old = net.weights[0].copy()
        net.weights[0][...] = val
        out = float((net.forward(x, np.random.default_rng(7)) * w).sum())
        net.weights[0][...] = old
        return out

    assert rel_err(grads[0], central_diff(f, net.weights[0].copy())) < 1e-5
    with pytest.raises(ValueError):
        net.forward(x)


def test_loss_gradient_requires_matching_forward():
    net = small_net()
    with pytest.raises(RuntimeError):
        loss_gradient(net, np.ones(6), np.zeros((3, 2)))
    net.forward(np.ones(6))
    with pytest.raises(RuntimeError):
        loss_gradient(net, np.zeros(6), np.zeros((3, 2)))


def test_checkpoint_round_trip(tmp_path):
    net = small_net(seed=5)
    path = tmp_path / "n.bin"
    save(net, path)
    back = load(path)
    x = np.random.default_rng(0).normal(size=(2, 6))
    assert np.array_equal(net.forward(x), back.forward(x))
    assert back.planner == net.planner and back.config == net.config


def test_checkpoint_truncated_and_corrupt(tmp_path):
    net = small_net()
    path = tmp_path / "n.bin"
    save(net, path)
    blob = path.read_bytes()
    (tmp_path / "t.bin").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load(tmp_path / "t.bin")
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 1
    (tmp_path / "f.bin").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        load(tmp_path / "f.bin")
    (tmp_path / "m.bin").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load(tmp_path / "m.bin")


def test_checkpoint_output_dim_mismatch(tmp_path):
    net = small_net(N=3)
    save(net, tmp_path / "n.bin")
    with pytest.raises(CheckpointError):
        load(tmp_path / "n.bin", expect_output_dim=40)


def test_network_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(6, 5)
    with pytest.raises(ValueError):
        NetworkConfig(6, 6, dropout_rate=1.0)
    with pytest.raises(ValueError):
        PolicyNetwork(NetworkConfig(6, 8), PlannerConfig(N=3))
