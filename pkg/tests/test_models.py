import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phlab.diffcore import ParamVector, ScalarNet, StructureError, vjp_params
from phlab.models import (
    KnownForce,
    PseudoHamiltonianModel,
    QuadraticHamiltonian,
    adjusted_force,
    adjusted_hamiltonian,
    baseline_eval,
    build_model,
    canonical_structure,
    check_skew,
    load_checkpoint,
    make_baseline,
    make_phnn,
    model_descriptor,
    phnn_eval,
    planted_model,
    remove_force,
    replace_force,
    save_checkpoint,
)
from phlab.systems import MassSpringSpec, TankNetworkSpec

S2 = canonical_structure()
SMALL = (8, 8)


def quadratic_phnn(c=0.3, force=None):
    params = ParamVector.from_arrays({"R": np.array([c])})
    return PseudoHamiltonianModel(S2, [1], QuadraticHamiltonian([1.0, 1.0]), force, params)


def test_zero_hamiltonian_without_force_gives_zero():
    model = make_phnn(S2, [1], seed=0, hidden=SMALL)
    model.params.assign(np.zeros(len(model.params)))
    assert np.array_equal(phnn_eval(model, np.array([1.3, -0.2]), 0.0), np.zeros(2))


def test_hand_evaluated_damped_oscillator():
    out = phnn_eval(quadratic_phnn(0.3), np.array([1.0, 2.0]), 0.0)
    assert np.allclose(out, [2.0, -1.6], rtol=0, atol=1e-15)


def test_mask_places_constant_force():
    model = make_phnn(S2, [1], force_mode="state_time", force_mask=[1], seed=0, hidden=SMALL)
    p = model.params
    p.assign(np.zeros(len(p)))
    p["F.b3"][:] = 5.0
    assert np.array_equal(phnn_eval(model, np.array([0.4, -0.7]), 1.2), np.array([0.0, 5.0]))


@given(st.lists(st.floats(-5, 5), min_size=9, max_size=9), st.floats(0, 10))
def test_masked_components_are_exactly_zero(x, t):
    system = TankNetworkSpec()
    model = make_phnn(system.structure(), system.damped_indices, "state", [6, 8], seed=1, hidden=SMALL)
    f = model.assembled_force(np.array(x), t)
    keep = np.zeros(9, dtype=bool)
    keep[[6, 8]] = True
    assert np.all(f[~keep] == 0.0)


def test_damping_expands_to_diagonal_with_zeros_elsewhere():
    system = TankNetworkSpec()
    model = make_phnn(system.structure(), system.damped_indices, seed=0, hidden=SMALL)
    model.params["R"][:] = [1, 2, 3, 4, 5]
    diag = np.asarray(model.damping_diag())
    assert np.array_equal(diag, [1, 2, 3, 4, 5, 0, 0, 0, 0])


def test_damping_initialized_to_zero_and_admits_negative_values():
    model = make_phnn(S2, [1], seed=0, hidden=SMALL)
    assert np.array_equal(model.damping, [0.0])
    model.params["R"][:] = -0.59
    assert model.damping[0] == -0.59
    x = np.array([0.3, 1.0])
    gh = np.asarray(model.grad_hamiltonian(x))
    undamped = S2 @ gh
    assert np.allclose(phnn_eval(model, x, 0.0) - undamped, [0.0, 0.59 * gh[1]], atol=1e-15)


def test_structure_must_be_exactly_skew():
    S = S2.copy()
    S[0, 1] += 1e-15
    with pytest.raises(StructureError):
        check_skew(S)


def test_force_input_dimensions():
    for mode, d_in in (("state_time", 3), ("time", 1), ("state", 2)):
        model = make_phnn(S2, [1], mode, [1], seed=0, hidden=SMALL)
        assert model.force.net.d_in == d_in


@given(st.lists(st.floats(-3, 3), min_size=9, max_size=9))
def test_skew_identity(x):
    system = TankNetworkSpec()
    model = make_phnn(system.structure(), system.damped_indices, seed=3, hidden=SMALL)
    gh = np.asarray(model.grad_hamiltonian(np.array(x)))
    assert abs(gh @ model.S @ gh) <= 1e-13 * max(1.0, gh @ gh)


def test_energy_balance_pointwise(rng):
    system = TankNetworkSpec()
    model = make_phnn(system.structure(), system.damped_indices, "state", [8], seed=4, hidden=SMALL)
    model.params["R"][:] = rng.uniform(-0.1, 0.2, size=5)
    R = np.diag(np.asarray(model.damping_diag()))
    for _ in range(50):
        x, t = rng.uniform(-1, 1, size=9), rng.uniform(0, 5)
        gh = np.asarray(model.grad_hamiltonian(x))
        lhs = gh @ phnn_eval(model, x, t)
        rhs = -gh @ R @ gh + gh @ model.assembled_force(x, t)
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_adjusted_hamiltonian_examples():
    model = make_phnn(S2, [1], seed=0, hidden=SMALL)
    assert adjusted_hamiltonian(model, np.zeros(2)) == 0.0
    const = make_phnn(S2, [1], seed=0, hidden=SMALL)
    const.params.assign(np.zeros(len(const.params)))
    const.params["H.b3"][:] = 7.0
    assert np.all(adjusted_hamiltonian(const, np.random.default_rng(0).normal(size=(5, 2))) == 0.0)
    exact = planted_model(MassSpringSpec())
    assert adjusted_hamiltonian(exact, np.array([1.0, 1.0])) == pytest.approx(1.0, abs=1e-15)


def test_adjusted_force_examples():
    const = quadratic_phnn(force=KnownForce(lambda x, t: np.full((len(x), 1), 3.0), [1]))
    xs = np.random.default_rng(0).normal(size=(20, 2))
    assert np.all(adjusted_force(const, xs, np.zeros(20)) == 0.0)
    assert np.all(adjusted_force(const, xs[:1], 0.0) == 0.0)
    with pytest.raises(ValueError):
        adjusted_force(const, np.zeros((0, 2)), 0.0)


def test_adjusted_force_of_sine_over_whole_periods():
    model = quadratic_phnn(force=KnownForce(lambda x, t: np.sin(3 * np.asarray(t)), [1]))
    t = np.linspace(0, 2 * np.pi / 3 * 4, 4001)[:-1]
    adj = adjusted_force(model, np.zeros((t.size, 2)), t)[:, 0]
    assert np.max(np.abs(adj - np.sin(3 * t))) <= 1e-3


def test_baseline_shapes_and_zero_networks():
    for d in (2, 9):
        model = make_baseline("one-net", d, seed=0, hidden=SMALL)
        assert baseline_eval(model, np.zeros(d), 0.5).shape == (d,)
    one = make_baseline("one-net", 2, seed=0)
    assert one.nets["one"].hidden == (150, 150) and one.nets["one"].d_in == 3
    zero = make_baseline("two-net", 2, seed=0, hidden=SMALL)
    zero.params.assign(np.zeros(len(zero.params)))
    assert np.array_equal(baseline_eval(zero, np.ones(2), 1.0), np.zeros(2))


def test_two_net_with_zero_state_part_depends_on_time_only(rng):
    model = make_baseline("two-net", 2, seed=0, hidden=SMALL)
    for name in model.params.names():
        if name.startswith("X."):
            model.params[name][:] = 0.0
    a = baseline_eval(model, rng.normal(size=2), 0.7)
    b = baseline_eval(model, rng.normal(size=2), 0.7)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, baseline_eval(model, np.zeros(2), 1.7))


def test_vjp_through_model_reaches_every_component(rng):
    model = make_phnn(S2, [1], "state_time", [1], seed=0, hidden=SMALL)
    x = rng.normal(size=(4, 2))
    g = vjp_params(lambda p: (model.rhs(x, 0.5, p) ** 2).sum(), model.params)
    for name in ("H.W1", "F.W1", "R"):
        assert np.any(g[model.params.slice(name)] != 0.0), name


def test_clone_is_independent():
    model = make_phnn(S2, [1], "time", [1], seed=0, hidden=SMALL)
    twin = model.clone()
    twin.params["R"][:] = 9.0
    assert model.damping[0] == 0.0
    assert twin.force.net.params is twin.params
    assert twin.hamiltonian.params is twin.params


def test_force_replacement_and_removal(rng):
    model = make_phnn(S2, [1], "state_time", [1], seed=0, hidden=SMALL)
    x, t = rng.normal(size=2), 0.4
    stripped = remove_force(model)
    diff = phnn_eval(model, x, t) - phnn_eval(stripped, x, t)
    assert np.allclose(diff, model.assembled_force(x, t), rtol=0, atol=1e-15)
    assert diff[0] == 0.0
    swapped = replace_force(model, lambda x, t: np.sin(2 * np.asarray(t)))
    assert np.allclose(phnn_eval(swapped, x, t) - phnn_eval(stripped, x, t), [0.0, np.sin(0.8)], atol=1e-15)


def test_planted_model_matches_system(rng):
    spec = MassSpringSpec()
    model = planted_model(spec)
    x = rng.normal(size=(10, 2))
    t = rng.uniform(0, 10, size=10)
    assert np.max(np.abs(model.rhs(x, t) - spec.rhs(x, t))) <= 1e-14


@pytest.mark.parametrize("kind", ["phnn", "baseline-one", "baseline-two", "planted"])
def test_checkpoint_round_trip(tmp_path, kind, rng):
    if kind == "phnn":
        model = make_phnn(TankNetworkSpec().structure(), [0, 1, 2, 3, 4], "state", [8], seed=2, hidden=SMALL)
        model.params["R"][:] = rng.normal(size=5)
    elif kind == "planted":
        model = planted_model(TankNetworkSpec())
    else:
        model = make_baseline("one-net" if kind.endswith("one") else "two-net", 9, seed=1, hidden=SMALL)
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert model_descriptor(loaded) == model_descriptor(model)
    x, t = rng.normal(size=(3, 9)), 0.3
    assert np.array_equal(loaded.rhs(x, t), model.rhs(x, t))


def test_build_model_is_seed_reproducible():
    desc = model_descriptor(make_phnn(S2, [1], "time", [1], seed=0, hidden=SMALL))
    a, b = build_model(desc, seed=11), build_model(desc, seed=11)
    assert a.params.data.tobytes() == b.params.data.tobytes()
    assert build_model(desc, seed=12).params.data.tobytes() != a.params.data.tobytes()


def test_default_hidden_widths():
    model = make_phnn(S2, [1], "time", [1], seed=0)
    assert model.hamiltonian.hidden == (100, 100) and model.force.net.hidden == (100, 100)
    assert isinstance(model.hamiltonian, ScalarNet)
