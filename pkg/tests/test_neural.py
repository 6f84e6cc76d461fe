import numpy as np
import pytest

from garchlq.errors import DataError, NumericalError, UsageError
from garchlq.neural import (AdamState, CorrectionNetwork, MLPParams, adam_step, feature_stats, features, fit,
                            forward, init_params, default_layer_sizes as layer_sizes, load_model, loss_and_grad, output_scale, relax,
                            save_model)
from garchlq.verify import gradient_check_instance


def test_layer_sizes_eleven_assets():
    assert layer_sizes(11) == [143, 400, 400, 400, 400, 400, 11]


def test_init_deterministic_and_seed_sensitive():
    a = init_params(0, [4, 5, 2])
    b = init_params(0, [4, 5, 2])
    c = init_params(1, [4, 5, 2])
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), c.flat())


def test_init_standard_deviation():
    p = init_params(3, [1000, 100])
    w = p.weights[0].ravel()
    assert w.size == 100_000
    assert abs(w.std() / 0.01 - 1) < 0.02


def test_mismatched_shapes_rejected():
    with pytest.raises(UsageError):
        MLPParams([np.zeros((3, 2)), np.zeros((1, 4))], [np.zeros(3), np.zeros(1)])
    with pytest.raises(UsageError):
        forward(init_params(0, [3, 2]), np.zeros((1, 4)))


def test_zero_network_outputs_zero():
    p = init_params(0, [6, 8, 3]).with_flat(np.zeros(init_params(0, [6, 8, 3]).size))
    out = forward(p, np.random.default_rng(0).normal(size=(5, 6)), scale=7.0)
    assert np.all(out == 0.0)


def test_scalar_toy_net():
    p = MLPParams([np.array([[1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
    assert forward(p, [[0.5]])[0, 0] == pytest.approx(np.tanh(np.tanh(0.5)), abs=1e-15)
    assert forward(p, [[0.5]])[0, 0] == pytest.approx(0.4318082, abs=1e-7)


def test_raw_output_bounded():
    rng = np.random.default_rng(1)
    p = init_params(2, [5, 7, 4], std=3.0)
    out = forward(p, rng.normal(scale=10, size=(500, 5)))
    assert np.max(np.abs(out)) <= 1.0
    assert np.max(np.abs(forward(p, rng.normal(size=(50, 5)), scale=2.5))) <= 2.5


def test_perfect_fit_zero_loss_and_gradient():
    rng = np.random.default_rng(4)
    p = init_params(5, [3, 6, 2], std=0.5)
    X = rng.normal(size=(9, 3))
    loss, g = loss_and_grad(p, X, forward(p, X, 1.3), 1.3)
    assert loss == 0.0
    assert np.all(g.flat() == 0.0)


def test_one_parameter_gradient_closed_form():
    # one affine map followed by tanh; with tiny w the net is close to linear but we
    # compare against the exact chain rule through tanh
    w, x, y = 0.3, 0.7, 0.1
    p = MLPParams([np.array([[w]])], [np.zeros(1)])
    loss, g = loss_and_grad(p, [[x]], [[y]])
    out = np.tanh(w * x)
    assert loss == pytest.approx((out - y) ** 2, rel=1e-14)
    assert g.weights[0][0, 0] == pytest.approx(2 * (out - y) * (1 - out ** 2) * x, rel=1e-12)
    # small-argument limit tends to the linear-net gradient 2(wx - y)x
    w = 1e-5
    p = MLPParams([np.array([[w]])], [np.zeros(1)])
    _, g = loss_and_grad(p, [[x]], [[y]])
    assert g.weights[0][0, 0] == pytest.approx(2 * (w * x - y) * x, rel=1e-9)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    for _ in range(5):
        assert gradient_check_instance(rng) < 1e-5


def test_gradient_full_size_sampled_coordinates():
    rng = np.random.default_rng(2)
    sizes = [15, 400, 400, 3]
    p = init_params(0, sizes, std=0.05)
    X = rng.normal(size=(4, 15))
    Y = rng.normal(size=(4, 3)) * 0.3
    _, g = loss_and_grad(p, X, Y, 1.5)
    v, ga = p.flat(), g.flat()
    idx = np.argsort(-np.abs(ga))[:20]
    h = 1e-6
    for i in idx:
        e = np.zeros_like(v)
        e[i] = h
        lp, _ = loss_and_grad(p.with_flat(v + e), X, Y, 1.5)
        lm, _ = loss_and_grad(p.with_flat(v - e), X, Y, 1.5)
        assert abs((lp - lm) / (2 * h) - ga[i]) / abs(ga[i]) < 1e-5


def test_nonfinite_forward_names_layer():
    p = init_params(0, [2, 3, 1])
    p.weights[1][0, 0] = np.nan
    with pytest.raises(NumericalError, match="layer 1"):
        loss_and_grad(p, [[0.1, 0.2]], [[0.0]])


def test_adam_zero_gradient_is_null_update():
    p = init_params(0, [3, 2])
    st = AdamState.zeros_like(p)
    q, st2 = adam_step(p, p.with_flat(np.zeros(p.size)), st)
    assert np.array_equal(q.flat(), p.flat())
    assert st2.step == 1


def test_adam_first_step_is_lr_sign():
    p = init_params(0, [3, 2])
    g = p.with_flat(np.random.default_rng(0).normal(size=p.size))
    q, _ = adam_step(p, g, AdamState.zeros_like(p, lr=1e-3))
    np.testing.assert_allclose(q.flat() - p.flat(), -1e-3 * np.sign(g.flat()), rtol=1e-6)


def test_adam_scalar_recurrence():
    p = MLPParams([np.array([[0.5]])], [np.zeros(1)])
    st = AdamState.zeros_like(p, lr=0.01)
    theta, m, v = 0.5, 0.0, 0.0
    b1, b2 = 0.9, 0.999
    for t in range(1, 11):
        grad = 2 * theta - 0.3
        g = MLPParams([np.array([[grad]])], [np.zeros(1)])
        p, st = adam_step(p, g, st)
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        theta -= 0.01 * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + 1e-8)
        assert p.weights[0][0, 0] == pytest.approx(theta, abs=1e-15)


def test_fit_realizable_target():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(64, 3))
    teacher = init_params(9, [3, 2], std=0.3)
    Y = forward(teacher, X)
    best, trace = fit(init_params(1, [3, 2]), X, Y, epochs=2000, lr=1e-2)
    assert trace[-1] <= trace[0]
    assert min(trace) < 1e-6


def test_fit_zero_epochs_is_noop():
    p = init_params(0, [3, 4, 2])
    X = np.ones((5, 3))
    best, trace = fit(p, X, np.zeros((5, 2)), epochs=0)
    assert np.array_equal(best.flat(), p.flat())
    assert len(trace) == 1


def test_fit_deterministic():
    rng = np.random.default_rng(3)
    X, Y = rng.normal(size=(20, 4)), rng.normal(size=(20, 2)) * 0.3
    a, ta = fit(init_params(0, [4, 6, 2]), X, Y, epochs=5, batch_size=4, seed=2)
    b, tb = fit(init_params(0, [4, 6, 2]), X, Y, epochs=5, batch_size=4, seed=2)
    assert np.array_equal(a.flat(), b.flat()) and ta == tb


def test_fit_empty_dataset():
    with pytest.raises(UsageError):
        fit(init_params(0, [2, 1]), np.zeros((0, 2)), np.zeros((0, 1)), epochs=1)


def test_relax():
    a, b = init_params(0, [2, 2]), init_params(1, [2, 2])
    np.testing.assert_array_equal(relax(a, b, 1.0).flat(), a.flat())
    np.testing.assert_allclose(relax(a, b, 0.25).flat(), 0.25 * a.flat() + 0.75 * b.flat())
    with pytest.raises(UsageError):
        relax(a, b, 0.0)


def test_features_layout():
    F = features([1.0, 2.0], [[3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]], np.array([0.1, 0.2]))
    np.testing.assert_allclose(F, [[1, 2, 0.3, 0.8, 5, 6, 7, 8]])


def test_feature_stats_constant_column():
    mean, std = feature_stats([[1.0, 2.0], [1.0, 4.0]])
    np.testing.assert_allclose(mean, [1.0, 3.0])
    np.testing.assert_allclose(std, [1.0, 1.0])


def test_output_scale():
    assert output_scale(np.zeros(5)) == 1.0
    assert output_scale(np.arange(101.0), 99) == pytest.approx(99.0)


def test_model_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    p = init_params(4, [8, 5, 2], std=0.7)
    net = CorrectionNetwork(p, rng.normal(size=2), rng.normal(size=8), rng.uniform(1, 2, size=8), np.pi, 4,
                            {"note": "x"})
    path = tmp_path / "m.json"
    save_model(net, path)
    back = load_model(path)
    assert np.array_equal(back.params.flat(), p.flat())
    for a, b in [(back.mu, net.mu), (back.feat_mean, net.feat_mean), (back.feat_std, net.feat_std)]:
        assert np.array_equal(a, b)
    assert back.scale == net.scale and back.seed == 4 and back.meta == {"note": "x"}
    save_model(back, tmp_path / "m2.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()


def test_load_model_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(DataError):
        load_model(bad)
    with pytest.raises(DataError):
        load_model(tmp_path / "missing.json")
