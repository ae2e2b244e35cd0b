import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from phlab.diffcore import (
    AdamState,
    Node,
    ParamVector,
    ScalarNet,
    StructureError,
    absolute,
    adam_step,
    concat,
    forward,
    grad_input,
    lincomb,
    relu,
    scatter,
    tanh,
    total,
    value_and_grad,
    vjp_params,
)
from phlab.integrators import DISCRETIZATIONS, phi


def small_net(d_in=3, d_out=1, seed=0, hidden=(7, 6)):
    return ScalarNet.create(d_in, d_out, seed=seed, hidden=hidden)


def away_from_kinks(net, x, margin=1e-8):
    p = net.params
    h1 = np.tanh(np.atleast_2d(x) @ p["W1"].T + p["b1"])
    z2 = h1 @ p["W2"].T + p["b2"]
    return np.min(np.abs(z2)) > margin


def directional_check(expr, params, rng, h=1e-5):
    """Compare grad . v with a central difference of ``expr`` along a random unit direction."""
    _, grad = value_and_grad(expr, params)
    v = rng.normal(size=len(params))
    v /= np.linalg.norm(v)
    base = params.data.copy()

    def at(s):
        params.assign(base + s * v)
        return float(np.sum(expr(params.views())))

    fd = (at(h) - at(-h)) / (2 * h)
    params.assign(base)
    return rel_err(grad @ v, fd)


# -- forward ------------------------------------------------------------------


def test_zero_network_outputs_zero():
    net = small_net(4, 2)
    net.params.assign(np.zeros(len(net.params)))
    assert np.array_equal(forward(net, np.array([1.0, -2.0, 3.0, 0.5])), np.zeros(2))


def test_constant_path_through_output_bias():
    net = ScalarNet.create(1, 1, seed=0)
    p = net.params
    p.assign(np.zeros(len(p)))
    p["W3"][:] = 1.0
    p["b3"][:] = 5.0
    for x in (-3.0, 0.0, 7.5):
        assert forward(net, np.array([x]))[0] == 5.0


def test_forward_matches_closed_form(rng):
    net = ScalarNet.create(3, 2, seed=1)
    p = net.params
    x = rng.normal(size=3)
    expected = p["W3"] @ np.maximum(p["W2"] @ np.tanh(p["W1"] @ x + p["b1"]) + p["b2"], 0) + p["b3"]
    assert np.allclose(forward(net, x), expected, rtol=1e-14, atol=1e-14)


def test_forward_is_continuous_at_origin():
    net = ScalarNet.create(4, 1, seed=3)
    a = forward(net, np.zeros(4))
    b = forward(net, 1e-12 * np.ones(4))
    assert np.max(np.abs(a - b)) <= 1e-6


def test_forward_batch_matches_single(rng):
    net = small_net(3, 2)
    xs = rng.normal(size=(5, 3))
    batch = forward(net, xs)
    assert batch.shape == (5, 2)
    for i in range(5):
        assert np.allclose(batch[i], forward(net, xs[i]), rtol=0, atol=1e-15)


def test_dimension_mismatch_is_structural():
    net = small_net(3, 1)
    with pytest.raises(StructureError):
        forward(net, np.zeros(4))
    with pytest.raises(StructureError):
        forward(net, np.zeros((2, 2)))


def test_default_architecture_and_init_bounds():
    net = ScalarNet.create(2, 1, seed=0)
    p = net.params
    assert p["W1"].shape == (100, 2) and p["W2"].shape == (100, 100) and p["W3"].shape == (1, 100)
    for name, (fi, fo) in {"W1": (2, 100), "W2": (100, 100), "W3": (100, 1)}.items():
        assert np.max(np.abs(p[name])) <= np.sqrt(6 / (fi + fo))
    for b in ("b1", "b2", "b3"):
        assert not p[b].any()
    assert p.data.dtype == np.float64


@given(st.integers(0, 2**32 - 1))
def test_initialization_is_bit_reproducible(seed):
    a = ScalarNet.create(3, 2, seed=seed, hidden=(5, 4))
    b = ScalarNet.create(3, 2, seed=seed, hidden=(5, 4))
    assert a.params.data.tobytes() == b.params.data.tobytes()


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_forward_is_finite(x):
    net = small_net(3, 2)
    assert np.all(np.isfinite(forward(net, np.array(x))))


# -- grad_input ---------------------------------------------------------------


def test_grad_input_of_zero_network_is_zero():
    net = small_net(3, 1)
    net.params.assign(np.zeros(len(net.params)))
    assert np.array_equal(grad_input(net, np.ones(3)), np.zeros(3))


def test_grad_input_of_locally_linear_network():
    # tiny first-layer weights keep tanh in its linear range; positive hidden
    # pre-activations keep the relu open, so forward(x) ~ c * x0 near the origin
    net = ScalarNet.create(3, 1, seed=0, hidden=(2, 2))
    p = net.params
    p.assign(np.zeros(len(p)))
    eps, c = 1e-4, 2.5
    p["W1"][0, 0] = eps
    p["W2"][0, 0] = 1.0
    p["b2"][0] = 1.0
    p["W3"][0, 0] = c / eps
    x = np.array([0.01, -0.3, 0.7])
    g = grad_input(net, x)
    fd = central_diff(lambda z: forward(net, z)[0], x)
    assert np.allclose(g, [c, 0.0, 0.0], atol=1e-7)
    assert rel_err(g, fd) <= 1e-6


def test_grad_input_matches_finite_differences_on_100_cases():
    rng = np.random.default_rng(2024)
    checked = 0
    for case in range(100):
        d = int(rng.integers(1, 10))
        net = ScalarNet.create(d, 1, seed=int(rng.integers(2**31)))
        x = rng.uniform(-2, 2, size=d)
        if not away_from_kinks(net, x):
            continue
        fd = central_diff(lambda z: forward(net, z)[0], x, h=1e-5)
        assert rel_err(grad_input(net, x), fd) <= 1e-6, case
        checked += 1
    assert checked >= 95


def test_grad_input_requires_scalar_output():
    with pytest.raises(StructureError):
        grad_input(small_net(3, 2), np.zeros(3))


def test_grad_input_batch_shape(rng):
    net = small_net(4, 1)
    assert grad_input(net, rng.normal(size=(6, 4))).shape == (6, 4)
    assert grad_input(net, rng.normal(size=4)).shape == (4,)


# -- vjp_params ---------------------------------------------------------------


def test_theta_independent_expression_has_zero_gradient():
    net = small_net()
    g = vjp_params(lambda p: np.ones(3) * 2.0, net.params)
    assert np.array_equal(g, np.zeros(len(net.params)))


def test_output_bias_gradient_is_one(rng):
    net = small_net(3, 1)
    g = vjp_params(lambda p: net.forward(rng.normal(size=3), p), net.params)
    assert g[net.params.slice("b3")][0] == pytest.approx(1.0, abs=1e-15)


def test_vjp_through_grad_input_full_finite_differences(rng):
    net = small_net(3, 1, hidden=(5, 4))
    x, v = rng.normal(size=3), rng.normal(size=3)
    assert away_from_kinks(net, x)
    expr = lambda p: (net.grad_input(x, p) * v).sum()
    g = vjp_params(expr, net.params)

    def f(theta):
        q = net.params.copy()
        q.assign(theta)
        return float(expr(q.views()))

    assert rel_err(g, central_diff(f, net.params.data)) <= 1e-5


def test_vjp_matches_finite_differences_on_100_cases():
    rng = np.random.default_rng(99)
    kinds = ["forward", "grad_input"] + [f"phi_{k}" for k in DISCRETIZATIONS]
    for case in range(100):
        kind = kinds[case % len(kinds)]
        d = int(rng.integers(1, 5))
        net = ScalarNet.create(d, 1, seed=case, hidden=(12, 10))
        x = rng.uniform(-1, 1, size=(3, d))
        w = rng.normal(size=(3, d))
        if kind == "forward":
            expr = lambda p: (net.forward(x, p) * w[:, :1]).sum()
        elif kind == "grad_input":
            expr = lambda p: (net.grad_input(x, p) * w).sum()
        else:
            x1 = x + 0.1 * rng.normal(size=x.shape)
            dt = 0.1
            g = lambda y, t, p: net.grad_input(y, p) * 0.5 + t * 0.1
            expr = lambda p, disc=kind[4:]: (phi(disc, lambda y, t: g(y, t, p), x, x1, 0.3, dt) * w).sum()
        assert directional_check(expr, net.params, rng) <= 1e-5, (case, kind)


def test_foreign_parameters_are_rejected():
    a, b = small_net(seed=1), small_net(seed=2)
    x = np.ones(3)
    with pytest.raises(StructureError):
        vjp_params(lambda p: a.forward(x, p) + b.forward(x, {k: Node(v, key=(id(b.params), k))
                                                         for k, v in b.params.views().items()}), a.params)


def test_tape_primitives_against_finite_differences(rng):
    pv = ParamVector.from_arrays({"a": rng.normal(size=(4, 3)), "b": rng.normal(size=3)})

    def expr(p):
        y = lincomb((0.5, -2.0), (tanh(p["a"]), relu(p["a"] * p["b"])))
        z = concat([absolute(y), scatter(y[:, :2], [0, 2], 5)], axis=-1)
        return total(z * z) + (p["a"] @ p["b"].reshape(3, 1)).mean() - (p["b"] ** 2).sum() / 3.0

    assert directional_check(expr, pv, rng) <= 1e-6


# -- Adam ---------------------------------------------------------------------


def test_adam_zero_gradient_leaves_theta_unchanged():
    theta = np.array([1.0, -2.0, 3.0])
    new, state = adam_step(theta, np.zeros(3), AdamState.zeros(3))
    assert np.array_equal(new, theta)
    assert state.step == 1


def test_adam_first_step_moves_by_lr():
    theta = np.zeros(4)
    g = np.array([0.3, -5.0, 2e-3, 100.0])
    new, _ = adam_step(theta, g, AdamState.zeros(4), lr=1e-3)
    expected = -1e-3 * g / (np.abs(g) + 1e-8)
    assert np.allclose(new, expected, rtol=1e-12, atol=0)


def test_adam_matches_reference_two_steps():
    theta = np.array([1.0, 2.0])
    g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.2])
    t1, s = adam_step(theta, g1, AdamState.zeros(2), lr=0.01)
    t2, s = adam_step(t1, g2, s, lr=0.01)
    m = 0.9 * (0.1 * g1) + 0.1 * g2
    v = 0.999 * (0.001 * g1**2) + 0.001 * g2**2
    ref = t1 - 0.01 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert np.allclose(t2, ref, rtol=1e-15, atol=1e-15)
    assert s.step == 2


def test_adam_is_deterministic(rng):
    grads = rng.normal(size=(20, 5))
    runs = []
    for _ in range(2):
        theta, state = np.ones(5), AdamState.zeros(5)
        for g in grads:
            theta, state = adam_step(theta, g, state)
        runs.append(theta.tobytes())
    assert runs[0] == runs[1]


# -- ParamVector --------------------------------------------------------------


@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=5))
def test_index_map_is_a_partition(shapes):
    arrays = {f"c{i}": np.arange(a * b, dtype=float).reshape(a, b) for i, (a, b) in enumerate(shapes)}
    pv = ParamVector.from_arrays(arrays)
    assert len(pv) == sum(a * b for a, b in shapes)
    covered = np.zeros(len(pv), dtype=int)
    for name in pv.names():
        covered[pv.slice(name)] += 1
    assert np.all(covered == 1)
    for name, arr in arrays.items():
        assert np.array_equal(pv[name], arr)


def test_flatten_unflatten_round_trip(rng):
    net = ScalarNet.create(3, 2, seed=4)
    flat = net.params.flatten()
    parts = net.params.unflatten(flat)
    rebuilt = ParamVector.from_arrays({k: parts[k] for k in net.params.names()})
    assert rebuilt.data.tobytes() == flat.tobytes()


def test_assign_updates_views_in_place():
    pv = ParamVector.from_arrays({"w": np.zeros((2, 2)), "b": np.zeros(3)})
    view = pv["w"]
    pv.assign(np.arange(7.0))
    assert np.array_equal(view, [[0.0, 1.0], [2.0, 3.0]])
    assert np.array_equal(pv["b"], [4.0, 5.0, 6.0])


def test_serialization_round_trip(tmp_path):
    net = ScalarNet.create(5, 3, seed=8)
    path = tmp_path / "p.bin"
    net.params.save(path)
    loaded = ParamVector.load(path)
    assert loaded.names() == net.params.names()
    assert loaded.data.tobytes() == net.params.data.tobytes()
    assert ParamVector.from_bytes(net.params.to_bytes()).index == net.params.index


def test_serialized_header_is_json_with_offsets():
    import json
    import struct

    pv = ParamVector.from_arrays({"a": np.ones(2), "b": np.full((1, 3), 2.0)})
    blob = pv.to_bytes()
    (n,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8 : 8 + n])
    assert header["a"]["offset"] == 0 and header["a"]["length"] == 2
    assert header["b"]["offset"] == 2 and header["b"]["length"] == 3
    assert np.array_equal(np.frombuffer(blob[8 + n :], dtype="<f8"), [1, 1, 2, 2, 2])


def test_corrupt_header_is_rejected():
    pv = ParamVector.from_arrays({"a": np.ones(2)})
    blob = pv.to_bytes()
    with pytest.raises(ValueError):
        ParamVector.from_bytes(blob + b"\x00" * 8)
