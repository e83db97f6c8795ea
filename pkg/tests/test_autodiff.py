import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynbackdoor import autodiff as ad
from dynbackdoor.autodiff import Adam, LSTMParams, Tape, Tensor

from .conftest import fd_grad, rel_err

RNG = np.random.default_rng(0)


def _param(*shape, scale=1.0, rng=RNG):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def check_op(build, *params, tol=1e-4):
    """FD-check ``sum(build(*params) * R)`` with respect to every parameter."""
    with Tape():
        probe = build(*params)
    R = np.random.default_rng(1).normal(size=probe.shape)

    def value():
        return float((build(*params).data * R).sum())

    with Tape() as tape:
        loss = ad.sum_all(ad.mul(build(*params), R))
    grads = tape.backward(loss)
    for p in params:
        num = fd_grad(value, p.data)
        assert rel_err(grads[p], num) <= tol, build


# Values kept away from the relu kink so central differences stay valid.
def _away_from_zero(*shape):
    x = RNG.normal(size=shape)
    return Tensor(np.where(np.abs(x) < 0.05, 0.3, x), requires_grad=True)


@pytest.mark.parametrize("name,build,shapes", [
    ("add", ad.add, [(3, 4), (3, 4)]),
    ("add_broadcast", ad.add, [(3, 4), (4,)]),
    ("sub", ad.sub, [(3, 4), (1, 4)]),
    ("mul", ad.mul, [(3, 4), (3, 4)]),
    ("neg", ad.neg, [(2, 5)]),
    ("sigmoid", ad.sigmoid, [(3, 3)]),
    ("tanh", ad.tanh, [(3, 3)]),
    ("matmul", ad.matmul, [(3, 4), (4, 2)]),
    ("reshape", lambda a: ad.reshape(a, (6, 2)), [(3, 4)]),
    ("transpose", lambda a: ad.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    ("getitem_slice", lambda a: ad.getitem(a, (slice(1, 3), 2)), [(4, 5)]),
    ("getitem_fancy", lambda a: ad.getitem(a, (np.array([0, 2, 0]), np.array([1, 1, 1]))), [(3, 3)]),
    ("concat", lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    ("stack", lambda a, b: ad.stack([a, b], axis=1), [(2, 3), (2, 3)]),
    ("gather", lambda a: ad.gather(a, (np.array([0, 1, 1]), np.array([2, 0, 0]))), [(2, 3)]),
    ("sum", ad.sum_all, [(3, 2)]),
    ("mean", ad.mean_all, [(3, 2)]),
    ("mse", ad.mse_loss, [(3, 2), (3, 2)]),
    ("linear_sigmoid", lambda W, B, X: ad.linear_forward(W, B, X, "sigmoid"), [(4, 3), (3,), (5, 4)]),
    ("linear_tanh", lambda W, B, X: ad.linear_forward(W, B, X, "tanh"), [(4, 3), (3,), (5, 4)]),
])
def test_fd_every_op(name, build, shapes):
    check_op(build, *[_param(*s) for s in shapes])


def test_fd_relu():
    check_op(lambda W, B, X: ad.linear_forward(W, B, X, "relu"), _away_from_zero(3, 3), _away_from_zero(3),
             _away_from_zero(4, 3))
    check_op(ad.relu, _away_from_zero(4, 4))


def test_fd_inject_shared_values():
    base = RNG.normal(size=(3, 4))
    idx = (np.array([0, 1, 2, 2]), np.array([0, 3, 1, 2]))
    check_op(lambda v: ad.mul(ad.inject(base, idx, v, np.array([0, 1, 0, 1])), base + 1.0), _param(2))


@pytest.mark.parametrize("T", [1, 2, 5])
def test_fd_lstm(T):
    cell = LSTMParams(_param(3, 8, scale=0.5), _param(2, 8, scale=0.5), _param(8, scale=0.5))
    x = _param(T, 4, 3)
    check_op(lambda x, a, b, c: ad.lstm_forward(LSTMParams(a, b, c), x), x, cell.W_x, cell.W_h, cell.b)


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def test_lstm_matches_scalar_loop():
    rng = np.random.default_rng(5)
    T, B, d, H = 4, 3, 2, 3
    Wx, Wh, b = rng.normal(size=(d, 4 * H)), rng.normal(size=(H, 4 * H)), rng.normal(size=4 * H)
    X = rng.normal(size=(T, B, d))
    out = ad.lstm_forward(LSTMParams(Tensor(Wx), Tensor(Wh), Tensor(b)), Tensor(X)).data
    for n in range(B):
        h = [0.0] * H
        c = [0.0] * H
        for t in range(T):
            z = [b[j] + sum(X[t, n, k] * Wx[k, j] for k in range(d)) + sum(h[k] * Wh[k, j] for k in range(H))
                 for j in range(4 * H)]
            new_h = []
            for u in range(H):
                i, f = _sig(z[u]), _sig(z[H + u])
                g, o = math.tanh(z[2 * H + u]), _sig(z[3 * H + u])
                c[u] = f * c[u] + i * g
                new_h.append(o * math.tanh(c[u]))
            h = new_h
            assert np.allclose(out[t, n], h, atol=1e-10, rtol=0)


def test_matmul_matches_loop():
    a, b = RNG.normal(size=(4, 3)), RNG.normal(size=(3, 5))
    out = ad.matmul(a, b).data
    for i in range(4):
        for j in range(5):
            assert abs(out[i, j] - sum(a[i, k] * b[k, j] for k in range(3))) <= 1e-12


def test_adam_minimizes_square():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam({"x": x}, lr=0.1)
    for _ in range(500):
        with Tape() as tape:
            loss = ad.sum_all(ad.mul(x, x))
        opt.step({"x": tape.backward(loss)[x]})
    assert np.abs(x.data).max() < 1e-3


def test_adam_first_step_and_weight_decay():
    x = Tensor(np.array([2.0]), requires_grad=True)
    opt = Adam({"x": x}, lr=0.01, weight_decay=0.5)
    opt.step({"x": np.array([1.0])})
    # bias-corrected first step moves by lr * sign(g + wd * x)
    assert x.data[0] == pytest.approx(2.0 - 0.01 * 2.0 / (2.0 + 1e-8), abs=1e-12)


def test_adam_rejects_nonfinite_gradient():
    x = Tensor(np.ones(2), requires_grad=True)
    opt = Adam({"x": x}, lr=0.1)
    with pytest.raises(ad.NonFiniteError, match="'x'"):
        opt.step({"x": np.array([1.0, np.nan])})
    assert np.array_equal(x.data, np.ones(2))


def test_tape_visits_each_node_once():
    a, b = _param(3, 3), _param(3, 3)
    with Tape() as tape:
        h = ad.tanh(ad.matmul(a, b))
        loss = ad.mean_all(ad.add(h, h))
    grads = tape.backward(loss)
    assert grads.visits == len(tape) == 4
    assert tape.ops == ["matmul", "tanh", "add", "mean"]


def test_shared_input_accumulates():
    a = _param(2, 2)
    with Tape() as tape:
        loss = ad.sum_all(ad.add(a, a))
    assert np.allclose(tape.backward(loss)[a], 2.0)


def test_detached_lookup_raises():
    a, b = _param(2), _param(2)
    with Tape() as tape:
        loss = ad.sum_all(a)
    grads = tape.backward(loss)
    with pytest.raises(ad.DetachedError):
        grads[b]
    with pytest.raises(ad.DetachedError):
        Tape().backward(loss)


def test_nested_tapes_record_innermost_only():
    a = _param(2)
    with Tape() as outer:
        with Tape() as inner:
            ad.sum_all(a)
    assert len(inner) == 1 and len(outer) == 0


def test_no_tape_no_record():
    a = _param(2)
    out = ad.sum_all(a)
    assert not out.requires_grad


def test_nonfinite_trapped():
    with pytest.raises(ad.NonFiniteError):
        Tensor([1.0, np.inf])
    big = Tensor(np.array([1e300]))
    with np.errstate(over="ignore"), pytest.raises(ad.NonFiniteError, match="mul"):
        ad.mul(big, big)


def test_dimension_errors():
    with pytest.raises(ad.DimensionError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ad.DimensionError):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ad.DimensionError):
        ad.mse_loss(np.ones(3), np.ones(4))
    with pytest.raises(ad.DimensionError):
        ad.lstm_forward(LSTMParams(_param(3, 8), _param(2, 8), _param(8)), np.ones((2, 1, 4)))
    with pytest.raises(ValueError):
        ad.activate(Tensor([1.0]), "softplus")


@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=5), st.integers(0, 1000))
def test_checkpoint_roundtrip(tmp_path_factory, shapes, seed):
    rng = np.random.default_rng(seed)
    params = {f"p{i}": rng.normal(size=s) for i, s in enumerate(shapes)}
    params["scalar"] = np.array(rng.normal())
    path = tmp_path_factory.mktemp("ck") / "m.ckpt"
    ad.save_checkpoint(path, params, {"family": "x", "seed": seed})
    back, header = ad.load_checkpoint(path)
    assert header == {"family": "x", "seed": seed}
    assert set(back) == set(params)
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == params[k].astype("<f8").tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "junk"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError):
        ad.load_checkpoint(p)


def test_checksum_changes_with_values():
    a = {"w": Tensor(np.ones(3))}
    b = {"w": Tensor(np.array([1.0, 1.0, 1.0 + 1e-15]))}
    assert ad.parameter_checksum(a) == ad.parameter_checksum({"w": Tensor(np.ones(3))})
    assert ad.parameter_checksum(a) != ad.parameter_checksum(b)
