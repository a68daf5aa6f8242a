import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mechdis import diffengine as de
from mechdis.errors import ContractError, DimensionError, NumericError
from mechdis.gradcheck import check_gradients

TOL = 1e-5


def test_identity_forward_and_gradient():
    out, tape = de.forward(lambda x: x, x=3.0)
    assert out.item() == 3.0
    assert len(tape.nodes) == 1
    x = de.parameter(3.0)
    assert de.backward(x)[x] == 1.0


def test_constant_has_zero_gradient():
    x = de.parameter(2.0)
    c = de.constant(5.0)
    grads = de.backward(c, wrt=[x])
    assert grads[x] == 0.0


def test_sum_of_sines():
    out, _ = de.forward(lambda x: de.sum_(de.sin(x)), x=np.array([0.0, math.pi / 2]))
    assert out.item() == pytest.approx(1.0, abs=1e-15)


def test_two_layer_network_matches_hand_rolled():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(7, 4))
    w1, b1 = rng.normal(size=(4, 6)), rng.normal(size=6)
    w2, b2 = rng.normal(size=(6, 2)), rng.normal(size=2)
    h = de.leaky_relu(de.matmul(x, w1) + b1, 0.2)
    out = de.matmul(h, w2) + b2

    expected = np.zeros((7, 2))
    for n in range(7):
        hid = [sum(x[n, i] * w1[i, j] for i in range(4)) + b1[j] for j in range(6)]
        hid = [v if v > 0 else 0.2 * v for v in hid]
        for k in range(2):
            expected[n, k] = sum(hid[j] * w2[j, k] for j in range(6)) + b2[k]
    np.testing.assert_allclose(out.value, expected, rtol=1e-13, atol=1e-13)


def test_non_scalar_seed_rejected():
    x = de.parameter(np.ones(3))
    with pytest.raises(ContractError):
        de.backward(x * 2.0)


def test_shape_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        de.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        de.add(np.ones(3), np.ones(4))


def test_non_finite_intermediate_reports_node():
    x = de.parameter(np.array([-1.0]))
    with pytest.raises(NumericError) as info:
        de.log(x)
    assert info.value.node_id is not None


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


# each entry: name, builder, input sampler
PRIMITIVES = [
    ("matmul", lambda a, b: de.sum_(de.sin(de.matmul(a, b))), lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(4, 2))}),
    ("bmm", lambda a, b: de.sum_(de.sin(de.matmul(a, b))), lambda r: {"a": r.normal(size=(2, 3, 4)), "b": r.normal(size=(2, 4, 2))}),
    ("add", lambda a, b: de.sum_(de.sin(a + b)), lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=4)}),
    ("subtract", lambda a, b: de.sum_(de.sin(a - b)), lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(3, 1))}),
    ("multiply", lambda a, b: de.sum_(a * b), lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(3, 4))}),
    ("divide", lambda a, b: de.sum_(a / b), lambda r: {"a": r.normal(size=5), "b": _pos(r, 5)}),
    ("negate", lambda a: de.sum_(de.sin(-a)), lambda r: {"a": r.normal(size=5)}),
    ("sin", lambda a: de.sum_(de.sin(a)), lambda r: {"a": r.normal(size=5)}),
    ("exp", lambda a: de.sum_(de.exp(a)), lambda r: {"a": r.normal(size=5)}),
    ("log", lambda a: de.sum_(de.log(a)), lambda r: {"a": _pos(r, 5)}),
    ("sqrt", lambda a: de.sum_(de.sqrt(a)), lambda r: {"a": _pos(r, 5)}),
    ("sigmoid", lambda a: de.sum_(de.sigmoid(a)), lambda r: {"a": 3 * r.normal(size=5)}),
    ("leaky_relu", lambda a: de.sum_(de.sin(de.leaky_relu(a, 0.2))), lambda r: {"a": r.normal(size=6)}),
    ("clip", lambda a: de.sum_(de.sin(de.clip(a, -0.5, 0.5))), lambda r: {"a": r.normal(size=6)}),
    ("mean", lambda a: de.sum_(de.mean(de.sin(a), axis=0)), lambda r: {"a": r.normal(size=(4, 3))}),
    ("l1_norm", lambda a: de.l1_norm(a), lambda r: {"a": r.normal(size=6)}),
    ("concatenate", lambda a, b: de.sum_(de.sin(de.concatenate([a, b], axis=1)) * np.arange(7.0)), lambda r: {"a": r.normal(size=(2, 3)), "b": r.normal(size=(2, 4))}),
    ("slice", lambda a: de.sum_(de.sin(a[:, 1:3])), lambda r: {"a": r.normal(size=(3, 4))}),
    ("reshape_transpose", lambda a: de.sum_(de.transpose(de.reshape(a, (2, 6))) * np.arange(12.0).reshape(6, 2)), lambda r: {"a": r.normal(size=(3, 4))}),
    ("mask_multiply", lambda a: de.sum_(de.sin(de.mask_multiply(a, np.array([1.0, 0.0, 1.0])))), lambda r: {"a": r.normal(size=3)}),
]


@pytest.mark.parametrize("name,build,sample", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_gradients_match_finite_differences(name, build, sample):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(20):
        errors = check_gradients(build, sample(rng))
        worst = max(worst, *errors.values())
    assert worst < TOL, f"{name}: {worst}"


def test_random_mlp_loss_gradient():
    rng = np.random.default_rng(0)

    def loss(x, w1, w2):
        h = de.leaky_relu(de.matmul(x, w1), 0.2)
        out = de.matmul(h, w2)
        return de.mean(out * out)

    errs = check_gradients(loss, {"x": rng.normal(size=(5, 3)), "w1": rng.normal(size=(3, 8)), "w2": rng.normal(size=(8, 2))})
    assert max(errs.values()) < TOL


def test_backward_is_linear_in_losses():
    rng = np.random.default_rng(1)
    w = de.parameter(rng.normal(size=(3, 3)))
    f = lambda: de.sum_(de.sin(w))
    g = lambda: de.sum_(de.exp(w) * 0.3)
    both = de.backward(f() + g())[w]
    separate = de.backward(f())[w] + de.backward(g())[w]
    np.testing.assert_allclose(both, separate, rtol=1e-14)


def test_shared_subexpression_visited_once():
    x = de.parameter(2.0)
    y = x * x
    out = y + y
    assert de.backward(out)[x] == pytest.approx(8.0)


def test_repeated_evaluation_is_byte_identical():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(4, 4))
    runs = []
    for _ in range(2):
        t = de.parameter(w)
        runs.append(de.backward(de.sum_(de.sigmoid(de.matmul(t, t))))[t].tobytes())
    assert runs[0] == runs[1]


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    new, state = de.adam_step(params, {"w": np.zeros(2)}, de.AdamState())
    np.testing.assert_array_equal(new["w"], params["w"])
    assert state.step == 1


def _scripted_adam(theta, steps, lr, b1, b2, eps):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2.0 * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adam_single_step_matches_scripted_trace():
    expected = _scripted_adam(1.0, 1, 0.1, 0.9, 0.999, 1e-8)
    # first bias-corrected step moves by lr * sign(g) up to eps
    assert expected == pytest.approx(0.9, abs=1e-8)
    state = de.AdamState(lr=0.1)
    new, _ = de.adam_step({"t": np.array(1.0)}, {"t": np.array(2.0)}, state)
    assert abs(float(new["t"]) - expected) < 1e-12


def test_adam_multi_step_trace():
    state = de.AdamState(lr=0.1)
    theta = {"t": np.array(1.0)}
    for _ in range(5):
        theta, state = de.adam_step(theta, {"t": 2.0 * theta["t"]}, state)
    assert abs(float(theta["t"]) - _scripted_adam(1.0, 5, 0.1, 0.9, 0.999, 1e-8)) < 1e-12


def test_adam_default_lr():
    assert de.AdamState().lr == 0.0005


def test_adam_rejects_nan_gradient_without_mutation():
    state = de.AdamState()
    params = {"w": np.ones(2)}
    with pytest.raises(NumericError):
        de.adam_step(params, {"w": np.array([np.nan, 0.0])}, state)
    assert state.step == 0 and not state.m


def test_adam_determinism():
    def run():
        rng = de.Rng(11)
        params = {"w": rng.normal(3)}
        state = de.AdamState(lr=0.01)
        for _ in range(10):
            params, state = de.adam_step(params, {"w": np.sin(params["w"]) + rng.normal(3)}, state)
        return params["w"].tobytes()

    assert run() == run()


# ---------------------------------------------------------------- RNG


def test_rng_reproducible():
    a, b = de.seeded_rng(42), de.seeded_rng(42)
    np.testing.assert_array_equal(a.normal(1000), b.normal(1000))
    np.testing.assert_array_equal(a.gumbel(1000), b.gumbel(1000))


def test_rng_normal_moments():
    x = de.Rng(0).normal(10 ** 6)
    assert abs(x.mean()) < 0.01
    assert abs(x.var() - 1.0) < 0.02


def test_rng_gumbel_mean_is_euler_gamma():
    g = de.Rng(1).gumbel(10 ** 6)
    assert abs(g.mean() - 0.5772156649) < 0.02
    assert np.all(np.isfinite(g))


def test_rng_open_uniform_bounds():
    u = de.Rng(3).open_uniform(10 ** 5)
    assert u.min() > 0 and u.max() < 1


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 63))
def test_spawned_streams_are_deterministic(seed):
    a = [r.normal(3).tobytes() for r in de.Rng(seed).spawn(3)]
    b = [r.normal(3).tobytes() for r in de.Rng(seed).spawn(3)]
    assert a == b
    assert len(set(a)) == 3
