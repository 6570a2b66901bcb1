import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wrndereverb.nn.checkpoint import (Checkpoint, CheckpointError, from_bytes, load_checkpoint,
                                       save_checkpoint, to_bytes)
from wrndereverb.nn.layers import BatchNorm, Conv1dTime, PReLU, ReLU, mse_loss
from wrndereverb.nn.network import ResidualBlock, WideResNet, WrbConfig
from wrndereverb.nn.optim import AdamW
from wrndereverb.nn.train import TrainConfig, Trainer

H = 1e-6


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


def numeric_grad(f, x):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + H
        fp = f()
        x[i] = old - H
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * H)
    return g


def check_layer(layer, x, rng):
    """Checks input and parameter gradients of sum(R * layer(x))."""
    R = rng.standard_normal(layer.forward(x, cache=False).shape)

    def f():
        return float(np.sum(R * layer.forward(x, cache=False)))

    for _, p in layer.params():
        p.zero_grad()
    layer.forward(x)
    dx = layer.backward(R)
    assert rel_err(numeric_grad(f, x), dx) < 1e-5
    for name, p in layer.params():
        assert rel_err(numeric_grad(f, p.value), p.grad) < 1e-5, name


def away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return x + 0.1 * np.sign(x)


# -- gradient checks ----------------------------------------------------------

@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_gradients(k):
    rng = np.random.default_rng(k)
    layer = Conv1dTime(3, 4, k, rng)
    layer.bias.value[:] = rng.standard_normal(4)
    check_layer(layer, rng.standard_normal((2, 3, 3, 2)), rng)


def test_projection_gradients():
    rng = np.random.default_rng(1)
    check_layer(Conv1dTime(8, 4, 1, rng), rng.standard_normal((2, 8, 3, 1)), rng)


def test_batchnorm_gradients_training():
    rng = np.random.default_rng(2)
    bn = BatchNorm(3)
    bn.gamma.value[:] = rng.uniform(0.5, 2, 3)
    bn.beta.value[:] = rng.standard_normal(3)
    check_layer(bn, rng.standard_normal((2, 3, 3, 2)), rng)


def test_batchnorm_gradients_eval():
    rng = np.random.default_rng(3)
    bn = BatchNorm(4)
    bn.running_mean[:] = rng.standard_normal(4)
    bn.running_var[:] = rng.uniform(0.5, 2, 4)
    bn.training = False
    check_layer(bn, rng.standard_normal((2, 4, 3, 1)), rng)


def test_prelu_gradients():
    rng = np.random.default_rng(4)
    act = PReLU(8)
    act.slope.value[:] = rng.uniform(-0.5, 0.5, 8)
    check_layer(act, away_from_zero(rng, (2, 8, 3, 1)), rng)


def test_relu_gradients():
    rng = np.random.default_rng(5)
    check_layer(ReLU(), away_from_zero(rng, (2, 4, 3, 2)), rng)


def test_loss_gradient():
    rng = np.random.default_rng(6)
    y = rng.standard_normal((2, 1, 3, 4))
    x = rng.standard_normal((2, 1, 3, 4))
    _, g = mse_loss(y, x)
    assert rel_err(numeric_grad(lambda: mse_loss(y, x)[0], x), g) < 1e-5


def test_residual_block_gradients():
    rng = np.random.default_rng(7)
    blk = ResidualBlock(2, 3, 3, rng)
    x = rng.standard_normal((2, 2, 3, 2))
    R = rng.standard_normal((2, 3, 3, 2))

    def f():
        return float(np.sum(R * blk.forward(x, cache=False)))

    blk.forward(x)
    dx = blk.backward(R)
    assert rel_err(numeric_grad(f, x), dx) < 1e-5


def test_network_input_gradient():
    rng = np.random.default_rng(8)
    net = WideResNet(WrbConfig(n_wrb=2, blocks_per_wrb=1, base_channels=2, widths=(3, 4)),
                     n_features=2)
    x = rng.uniform(0.5, 2, (2, 1, 3, 2))
    # keep the output ReLU away from its kink
    net.head.bias.value[:] = 5.0
    R = rng.standard_normal(x.shape)

    def f():
        return float(np.sum(R * net.forward(x, cache=False)))

    net.zero_grad()
    net.forward(x)
    dx = net.backward(R)
    assert rel_err(numeric_grad(f, x), dx) < 1e-5
    for name, p in net.parameters():
        num = numeric_grad(f, p.value)
        # biases feeding a training-mode BN have an exactly zero true gradient
        if max(np.linalg.norm(num), np.linalg.norm(p.grad)) < 1e-8:
            continue
        assert rel_err(num, p.grad) < 1e-5, name


# -- residual identity and shapes --------------------------------------------------

def zero_block(blk):
    for _, layer in blk.layers():
        for _, p in layer.params():
            if layer in (blk.conv1, blk.conv2):
                p.value[...] = 0.0


def test_zero_residual_is_identity():
    rng = np.random.default_rng(0)
    blk = ResidualBlock(4, 4, 3, rng)
    zero_block(blk)
    x = rng.standard_normal((2, 4, 5, 3))
    assert np.array_equal(blk.forward(x), x)


def test_zero_residual_widened_is_projection():
    rng = np.random.default_rng(1)
    blk = ResidualBlock(3, 5, 3, rng)
    zero_block(blk)
    x = rng.standard_normal((2, 3, 5, 3))
    W = blk.shortcut.weight.value[:, :, 0]
    b = blk.shortcut.bias.value
    expected = np.einsum("oc,bctf->botf", W, x) + b[None, :, None, None]
    np.testing.assert_allclose(blk.forward(x), expected, rtol=0, atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 2), st.integers(1, 9), st.integers(1, 7))
def test_network_preserves_shape(B, T, F):
    net = WideResNet(WrbConfig(n_wrb=2, blocks_per_wrb=1, base_channels=2, widths=(2, 3)),
                     n_features=F)
    x = np.random.default_rng(T).random((B, 1, T, F))
    out = net.forward(x)
    assert out.shape == x.shape
    assert np.all(out >= 0)
    assert net.forward(x[0]).shape == x[0].shape


def test_network_rejects_wrong_features():
    net = WideResNet(WrbConfig.desk())
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 1, 4, 620)))


def test_infer_matches_eval_forward():
    net = WideResNet(WrbConfig(n_wrb=2, blocks_per_wrb=1, base_channels=2, widths=(2, 3)),
                     n_features=10)
    x = np.random.default_rng(0).random((6, 10))
    net.eval()
    direct = net.forward(x[None, None], cache=False)[0, 0]
    net.train()
    np.testing.assert_allclose(net.infer(x, chunk=3), direct, atol=1e-13)
    assert net.bn.training


def test_desk_and_full_presets():
    assert WrbConfig.desk().widths == (8, 16, 24, 32)
    assert WrbConfig().widths == (32, 64, 128, 256)
    with pytest.raises(ValueError):
        WrbConfig(kernel=4)
    with pytest.raises(ValueError):
        WrbConfig(n_wrb=3)


# -- loss oracle ------------------------------------------------------------------

def loop_mse(y, x):
    total = 0.0
    T, F = y.shape
    for t in range(T):
        for f in range(F):
            total += (y[t, f] - x[t, f]) ** 2
    return total / (T * F)


def test_mse_matches_double_loop():
    rng = np.random.default_rng(0)
    for _ in range(100):
        T, F = rng.integers(1, 30, 2)
        y, x = rng.standard_normal((2, T, F))
        assert abs(mse_loss(y, x)[0] - loop_mse(y, x)) < 1e-12


@given(st.floats(-100, 100, allow_nan=False), st.integers(1, 50), st.integers(1, 50))
def test_mse_uniform_offset(delta, T, F):
    y = np.full((T, F), 7.0)
    x = y + delta
    d = x[0, 0] - y[0, 0]
    assert mse_loss(y, x)[0] == d * d


@given(st.floats(1e-3, 100), st.integers(1, 50), st.integers(1, 50))
def test_mse_offset_of_random_target(delta, T, F):
    y = np.random.default_rng(T * F).standard_normal((T, F))
    assert mse_loss(y, y + delta)[0] == pytest.approx(delta ** 2, rel=1e-9)


def test_mse_exact_for_representable_offsets():
    y = np.zeros((200, 621))
    for d in (0.5, 0.25, 3.0):
        assert mse_loss(y, y + d)[0] == d * d


def test_mse_shape_mismatch():
    with pytest.raises(ValueError):
        mse_loss(np.zeros((2, 3)), np.zeros((3, 2)))


# -- optimizer ----------------------------------------------------------------------

class P:
    def __init__(self, v, g):
        self.value = np.array(v, dtype=float)
        self.grad = np.array(g, dtype=float)

    def zero_grad(self):
        self.grad[...] = 0


def test_adamw_first_step():
    p = P([1.0, -2.0], [0.5, -0.1])
    AdamW([p], lr=0.1, weight_decay=0.0).step()
    # bias-corrected first step moves every coordinate by ~lr against the gradient
    np.testing.assert_allclose(p.value, [0.9, -1.9], atol=1e-6)


def test_adamw_decoupled_decay():
    p = P([2.0], [0.0])
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    opt.step()
    assert p.value[0] == pytest.approx(2.0 * (1 - 0.05))


def test_adamw_two_steps_by_hand():
    p = P([1.0], [1.0])
    opt = AdamW([p], lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    opt.step()
    p.grad[:] = 2.0
    opt.step()
    w = 1.0
    w -= 0.01 * 0.01 * w
    w -= 0.01 * 1.0 / (1.0 + 1e-8)
    m = 0.9 * 0.1 + 0.1 * 2.0
    v = 0.999 * 0.001 + 0.001 * 4.0
    w -= 0.01 * 0.01 * w
    w -= 0.01 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert p.value[0] == pytest.approx(w, rel=1e-12)


# -- checkpoints ----------------------------------------------------------------------

def small_trainer():
    cfg = WrbConfig(n_wrb=2, blocks_per_wrb=1, base_channels=2, widths=(2, 3), seed=4)
    return Trainer(WideResNet(cfg, n_features=621), TrainConfig(lr=1e-3, batch_size=1))


class Blk:
    def __init__(self, rng):
        self.corrupted = rng.random((8, 621))
        self.clean = rng.random((8, 621))
        self.source, self.offset = "x", 0


def test_checkpoint_round_trip_bytes(tmp_path):
    tr = small_trainer()
    tr.train_step([Blk(np.random.default_rng(0))])
    data = to_bytes(tr.checkpoint({"epoch": 1}))
    ck = from_bytes(data)
    assert ck.step == 1 and ck.extra == {"epoch": 1}
    assert to_bytes(ck) == data
    save_checkpoint(tmp_path / "a.wrnc", ck)
    assert (tmp_path / "a.wrnc").read_bytes() == data
    assert to_bytes(load_checkpoint(tmp_path / "a.wrnc")) == data


def test_checkpoint_rejects_damage():
    data = to_bytes(small_trainer().checkpoint())
    for cut in (3, 10, len(data) // 2, len(data) - 1):
        with pytest.raises(CheckpointError):
            from_bytes(data[:cut])
    with pytest.raises(CheckpointError):
        from_bytes(data + b"\0")
    with pytest.raises(CheckpointError):
        from_bytes(b"XXXX" + data[4:])


def test_resume_matches_uninterrupted():
    rng = np.random.default_rng(1)
    batches = [[Blk(rng)] for _ in range(4)]
    a = small_trainer()
    losses_a = [a.train_step(b) for b in batches]
    b = small_trainer()
    losses_b = [b.train_step(x) for x in batches[:2]]
    resumed = Trainer.from_checkpoint(from_bytes(to_bytes(b.checkpoint())))
    losses_b += [resumed.train_step(x) for x in batches[2:]]
    assert losses_a == losses_b
    assert to_bytes(a.checkpoint()) == to_bytes(resumed.checkpoint())


def test_checkpoint_layout_mismatch():
    ck = small_trainer().checkpoint()
    other = WideResNet(WrbConfig(n_wrb=2, blocks_per_wrb=2, base_channels=2, widths=(2, 3)))
    with pytest.raises(CheckpointError):
        ck.load_into(other)


def test_captured_checkpoint_is_a_copy():
    tr = small_trainer()
    ck = Checkpoint.capture(tr.net)
    tr.net.parameters()[0][1].value[...] += 1.0
    assert not np.array_equal(ck.params[0][1], tr.net.parameters()[0][1].value)
