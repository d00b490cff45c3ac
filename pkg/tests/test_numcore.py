import numpy as np
import pytest

from mprlab.errors import ConfigError, NumericError, UsageError
from mprlab.numcore import (
    MLP,
    AdamW,
    Tape,
    Tensor,
    add,
    concat,
    exp,
    gather_rows,
    gelu,
    layernorm,
    load_checkpoint,
    log,
    matmul,
    mean,
    mse,
    mul,
    orthogonal_init,
    relu,
    save_checkpoint,
    softmax,
    tanh,
    zero_init,
)
from mprlab.numcore import sum as tsum
from mprlab.numcore.gradcheck import analytic_grads, check_gradients, numerical_grads, relative_error


def param(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


# --- forward examples -------------------------------------------------------

def test_matmul_identity():
    a = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(matmul(Tensor(a), Tensor(np.eye(4))).data, a)


def test_layernorm_constant_row_is_zero():
    out = layernorm(Tensor([[2.5, 2.5, 2.5]]))
    assert np.array_equal(out.data, np.zeros((1, 3)))


def test_softmax_symmetric():
    assert np.allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_shape_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ConfigError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))
    with pytest.raises(ConfigError):
        layernorm(Tensor(np.ones((4, 1))))


def test_nonfinite_output_names_op():
    with pytest.raises(NumericError, match="log"):
        log(Tensor([-1.0]))
    with pytest.raises(NumericError, match="exp"):
        exp(Tensor([1e4]))


# --- backward examples ------------------------------------------------------

def test_square_gradient():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = tsum(mul(x, x))
    tape.backward(loss)
    assert x.grad[0] == pytest.approx(6.0)


def test_mse_gradient_hand_derived():
    w = Tensor([[1.0]], requires_grad=True)
    with Tape() as tape:
        loss = mse(matmul(Tensor([[2.0]]), w), np.zeros((1, 1)))
    tape.backward(loss)
    assert w.grad[0, 0] == pytest.approx(8.0)


def test_backward_rejects_non_scalar_and_reuse():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = mul(x, 2.0)
    with pytest.raises(UsageError):
        tape.backward(y)
    with Tape() as tape:
        loss = tsum(mul(x, 2.0))
    tape.backward(loss)
    with pytest.raises(UsageError):
        tape.backward(loss)


def test_nothing_recorded_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = mul(x, 2.0)
    assert not y.requires_grad


def test_unused_leaf_gets_zero_grad():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        _ = mul(b, 3.0)
        loss = tsum(mul(a, 2.0))
    tape.backward(loss)
    assert np.array_equal(a.grad, [2.0, 2.0])
    assert np.array_equal(b.grad, [0.0, 0.0])


def test_random_mlp_matches_finite_differences():
    rng = np.random.default_rng(7)
    net = MLP([4, 8, 2], rng)
    x = Tensor(rng.standard_normal((6, 4)))
    y = rng.standard_normal((6, 2))
    assert check_gradients(lambda: mse(net(x), y), net.parameters()) < 1e-4


# --- per-primitive gradient checks over 100 seeds ---------------------------

def _cases(rng):
    """(name, params, loss_fn) triples, one per primitive."""
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    ab, bb = param(rng, 2, 3, 4), param(rng, 2, 5, 4)
    u, v = param(rng, 3, 4), param(rng, 3, 4)
    bias = param(rng, 4)
    ens_bias = param(rng, 2, 1, 4)
    ens_w = param(rng, 2, 4, 3)
    eg, eb = param(rng, 2, 1, 4), param(rng, 2, 1, 4)
    g, be = param(rng, 4), param(rng, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    w = rng.standard_normal((3, 4))
    target = rng.standard_normal((3, 4))
    idx = rng.integers(0, 3, size=5)
    bidx = rng.integers(0, 3, size=(2, 6))

    def weighted(t):
        return tsum(mul(t, Tensor(rng_fixed[: t.size].reshape(t.shape))))

    rng_fixed = rng.standard_normal(64)
    return [
        ("matmul", [a, b], lambda: weighted(matmul(a, b))),
        ("matmul_bt", [ab, bb], lambda: weighted(matmul(ab, bb, transpose_b=True))),
        ("add_bias", [u, bias], lambda: weighted(add(u, bias))),
        ("matmul_shared_input", [u, ens_w], lambda: weighted(matmul(u, ens_w))),
        ("add_member_bias", [bb, ens_bias], lambda: weighted(add(bb, ens_bias))),
        ("mul", [u, v], lambda: weighted(mul(u, v))),
        ("relu", [u], lambda: weighted(relu(u))),
        ("gelu", [u], lambda: weighted(gelu(u))),
        ("tanh", [u], lambda: weighted(tanh(u))),
        ("exp", [u], lambda: weighted(exp(u))),
        ("log", [pos], lambda: weighted(log(pos))),
        ("softmax", [u], lambda: weighted(softmax(u))),
        ("layernorm", [u, g, be], lambda: weighted(layernorm(u, g, be))),
        ("layernorm_members", [bb, eg, eb], lambda: weighted(layernorm(bb, eg, eb))),
        ("mean", [u], lambda: weighted(mean(u, axis=0))),
        ("sum", [u], lambda: weighted(tsum(u, axis=-1))),
        ("mse", [u], lambda: mse(u, target)),
        ("mse_weighted", [u], lambda: mse(u, target, weights=np.abs(w))),
        ("gather_rows", [u], lambda: weighted(gather_rows(u, idx))),
        ("gather_rows_batched", [ab], lambda: weighted(gather_rows(ab, bidx))),
        ("concat", [u, v], lambda: weighted(concat([u, v], axis=-1))),
    ]


@pytest.mark.parametrize("name", [c[0] for c in _cases(np.random.default_rng(0))])
def test_primitive_gradients_100_seeds(name):
    worst = 0.0
    for seed in range(100):
        case = {c[0]: c for c in _cases(np.random.default_rng(seed))}[name]
        _, params, fn = case
        worst = max(worst, check_gradients(fn, params))
    assert worst < 1e-4, f"{name}: {worst:.2e}"


# --- optimizer --------------------------------------------------------------

def _adam_one_step(p0, g, **kw):
    p = Tensor(np.array([p0]), requires_grad=True)
    opt = AdamW([p], **kw)
    p.grad = np.array([g])
    opt.step()
    return p.data[0], opt


def test_adam_first_step():
    p, opt = _adam_one_step(0.0, 1.0, lr=1e-3, weight_decay=0.0)
    assert p == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
    assert opt.step_count == 1
    assert opt.m[0].shape == (1,)


def test_adam_zero_grad_no_decay_is_noop():
    p, _ = _adam_one_step(0.37, 0.0, lr=1e-3, weight_decay=0.0)
    assert p == 0.37


def test_adamw_decoupled_decay():
    p, _ = _adam_one_step(1.0, 0.0, lr=1e-3, weight_decay=0.01)
    assert p == pytest.approx(1 - 1e-5, abs=1e-15)


def test_adam_nonfinite_policy():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = AdamW([p])
    p.grad = np.array([np.nan, 1.0])
    with pytest.raises(NumericError):
        opt.step()
    skip = AdamW([p], on_nonfinite="skip")
    assert skip.step() is False
    assert skip.skipped == 1 and skip.step_count == 0
    assert np.array_equal(p.data, [0.0, 0.0])


# --- initializers -----------------------------------------------------------

def test_orthogonal_square_and_wide():
    rng = np.random.default_rng(1)
    w = orthogonal_init(4, 4, 1.0, rng).data
    assert np.abs(w.T @ w - np.eye(4)).max() < 1e-8
    w = orthogonal_init(2, 6, 1.0, rng).data
    assert np.abs(w @ w.T - np.eye(2)).max() < 1e-8
    w = orthogonal_init(7, 3, 2.0, rng).data
    assert np.abs(w.T @ w - 4.0 * np.eye(3)).max() < 1e-8


def test_zero_init():
    assert np.array_equal(zero_init([8]).data, np.zeros(8))


# --- invariants -------------------------------------------------------------

def test_layernorm_rows_standardized():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((50, 16)) * rng.uniform(0.01, 10, size=(50, 1))
    y = layernorm(Tensor(x)).data
    var = x.var(axis=-1)
    assert np.abs(y.mean(axis=-1)).max() < 1e-6
    assert np.abs(y.var(axis=-1) - var / (var + 1e-5)).max() < 1e-6


def test_forward_replay_is_pure():
    rng = np.random.default_rng(4)
    net = MLP([3, 5, 5, 2], rng, layernorm=True)
    x = Tensor(rng.standard_normal((4, 3)))
    assert np.array_equal(net(x).data, net(x).data)


def _trajectory(seed):
    rng = np.random.default_rng(seed)
    net = MLP([3, 16, 1], rng)
    opt = AdamW(net.parameters(), lr=1e-2)
    x = Tensor(rng.standard_normal((32, 3)))
    y = rng.standard_normal((32, 1))
    for _ in range(100):
        opt.zero_grad()
        with Tape() as tape:
            loss = mse(net(x), y)
        tape.backward(loss)
        opt.step()
    return net.state_dict()


def test_determinism_bit_identical():
    a, b = _trajectory(11), _trajectory(11)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_gradcheck_oracle_independent_of_tape():
    # the numeric oracle runs the forward without recording anything
    x = Tensor(np.array([1.5, -0.5]), requires_grad=True)
    num = numerical_grads(lambda: tsum(mul(x, mul(x, x))), [x])[0]
    ana = analytic_grads(lambda: tsum(mul(x, mul(x, x))), [x])[0]
    assert relative_error(ana, num) < 1e-8
    assert np.allclose(num, 3 * x.data**2)


# --- checkpoint -------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    tensors = {
        "w": rng.standard_normal((3, 4)),
        "scalar": np.array(np.pi),
        "τ-emb": rng.standard_normal((2, 1, 5)),
        "tiny": np.array([5e-324, -0.0, 1e308]),
    }
    path = save_checkpoint(tmp_path / "x.ckpt", tensors)
    assert path.read_bytes()[:8] == b"MPRCKPT1"
    back = load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == np.asarray(tensors[k], dtype="<f8").tobytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(ConfigError):
        load_checkpoint(p)
