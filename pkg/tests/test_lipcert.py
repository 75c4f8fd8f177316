import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neural_diss.lipcert import (
    LipSdpProblem,
    NotPositiveDefinite,
    WeibullFitConfig,
    build_lipsdp_matrix,
    certify_derivative_lipschitz,
    certify_network_lipschitz,
    estimate_lipschitz_black_box,
    lipsdp_vjp,
    logdet_psd,
    problem_for,
)
from neural_diss.net import ContractViolation, FeedforwardNet, forward, init_net, input_gradient


def test_degenerate_linear_map_psd_iff_bound_dominates():
    for c in (0.5, 2.0):
        for L in (1.0, 3.0):
            M = build_lipsdp_matrix(LipSdpProblem([np.array([[c]])], np.zeros(0), 0.0, 1.0, L))
            psd = np.linalg.eigvalsh(M).min() >= -1e-12
            assert psd == (L**2 >= c**2)


def test_zero_network_matrix():
    p = LipSdpProblem([np.zeros((3, 2)), np.zeros((1, 3))], np.zeros(3), 0.0, 1.0, 1.0)
    M = build_lipsdp_matrix(p)
    assert np.array_equal(M, M.T)
    assert np.linalg.eigvalsh(M).min() >= 0


def test_norm_product_sufficiency():
    rng = np.random.default_rng(0)
    w0, w1 = rng.normal(size=(6, 2)), rng.normal(size=(1, 6))
    L = 1.05 * np.linalg.norm(w0, 2) * np.linalg.norm(w1, 2)
    ok = False
    for lam in np.logspace(-3, 3, 61):
        M = build_lipsdp_matrix(LipSdpProblem([w0, w1], lam * np.ones(6), 0.0, 1.0, L))
        ok |= np.linalg.eigvalsh(M).min() >= -1e-12
    assert ok


def test_multiplier_checks():
    with pytest.raises(ContractViolation):
        LipSdpProblem([np.zeros((3, 2)), np.zeros((1, 3))], -np.ones(3), 0.0, 1.0, 1.0)
    with pytest.raises(ContractViolation):
        LipSdpProblem([np.zeros((3, 2)), np.zeros((1, 3))], np.ones(2), 0.0, 1.0, 1.0)


def test_logdet_examples():
    assert logdet_psd(np.eye(5)) == 0.0
    assert logdet_psd(np.diag([2.0, 3.0])) == pytest.approx(np.log(6.0), abs=1e-14)
    rng = np.random.default_rng(1)
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    d = rng.uniform(0.1, 5, size=6)
    assert logdet_psd(q.T @ np.diag(d) @ q) == pytest.approx(np.log(d).sum(), abs=1e-10)


def test_logdet_not_pd_carries_pivot():
    with pytest.raises(NotPositiveDefinite) as exc:
        logdet_psd(np.diag([1.0, -1.0, 2.0]))
    assert exc.value.pivot_index == 1


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0))
def test_logdet_scaling(k):
    rng = np.random.default_rng(2)
    a = rng.normal(size=(4, 4))
    m = a @ a.T + np.eye(4)
    assert logdet_psd(k * m) == pytest.approx(logdet_psd(m) + 4 * np.log(k), abs=1e-9)


def test_zero_network_certified_at_tiny_bound():
    net = FeedforwardNet([np.zeros((3, 2)), np.zeros((1, 3))], [np.zeros(3), np.zeros(1)], ["tanh"])
    assert certify_network_lipschitz(net, 1e-3, np.ones(3)).certified


def test_two_point_witness_blocks_certificate():
    rng = np.random.default_rng(3)
    net = init_net(1, (8,), 1, "tanh", rng, scale=1.0)
    a, b = np.array([-0.05]), np.array([0.05])
    net.weights[-1] *= 50.0
    slope = abs(forward(net, a)[0] - forward(net, b)[0]) / 0.1
    L = 0.9 * slope
    for lam in np.logspace(-3, 3, 25):
        assert not certify_network_lipschitz(net, L, lam * np.ones(8)).certified


def test_lipsdp_vjp_matches_fd():
    rng = np.random.default_rng(4)
    ws = [rng.normal(size=(4, 2)), rng.normal(size=(3, 4)), rng.normal(size=(1, 3))]
    lam = rng.uniform(0.5, 2, size=7)
    G = rng.normal(size=(10, 10))
    G = G + G.T
    p = LipSdpProblem(ws, lam, 0.0, 1.0, 2.0)
    gw, gl = lipsdp_vjp(p, G)
    f = lambda: float(np.sum(build_lipsdp_matrix(LipSdpProblem(ws, lam, 0.0, 1.0, 2.0)) * G))  # noqa: E731
    h = 1e-6
    for w, g in zip(ws, gw):
        idx = (0, 1)
        old = w[idx]
        w[idx] = old + h
        up = f()
        w[idx] = old - h
        dn = f()
        w[idx] = old
        assert g[idx] == pytest.approx((up - dn) / (2 * h), rel=1e-5, abs=1e-6)
    old = lam[2]
    lam[2] = old + h
    up = f()
    lam[2] = old - h
    dn = f()
    lam[2] = old
    assert gl[2] == pytest.approx((up - dn) / (2 * h), rel=1e-5, abs=1e-6)


def test_derivative_certificate_sound_on_one_layer():
    rng = np.random.default_rng(5)
    net = init_net(2, (6,), 1, "tanh", rng, scale=1.0)
    v = certify_derivative_lipschitz(net, 50.0, np.ones(6))
    assert v.certified
    X = rng.uniform(-1, 1, size=(2000, 2))
    Y = X + rng.normal(scale=0.05, size=X.shape)
    s = np.linalg.norm(input_gradient(net, X) - input_gradient(net, Y), axis=1) / np.linalg.norm(X - Y, axis=1)
    assert s.max() <= 50.0 * (1 + 1e-6)


def test_surrogate_flag_for_deep_nets():
    net = init_net(2, (4, 4), 1, "tanh", np.random.default_rng(6))
    assert "surrogate" in certify_derivative_lipschitz(net, 10.0, np.ones(8)).diagnostics


def test_estimator_linear_and_constant():
    est = estimate_lipschitz_black_box(lambda z: 2.0 * z, [-1.0], [1.0], WeibullFitConfig(), seed=0)
    assert 2.0 <= est.value <= 2.2
    const = estimate_lipschitz_black_box(lambda z: np.ones_like(z), [-1.0], [1.0], WeibullFitConfig(), seed=0)
    assert const.value <= 0.01


def test_estimator_dominates_sample_max():
    f = lambda z: np.sin(3 * z[:, :1]) + z[:, 1:] ** 2  # noqa: E731
    est = estimate_lipschitz_black_box(f, [-1, -1], [1, 1], WeibullFitConfig(n_batches=10, pairs_per_batch=200), 1)
    assert est.value >= est.sample_max


def test_weibull_config_validation():
    with pytest.raises(ContractViolation):
        WeibullFitConfig(n_batches=0)
    with pytest.raises(ContractViolation):
        WeibullFitConfig(pair_radius=0.0)


def test_problem_for_uses_loosest_slopes():
    net = init_net(2, (3, 3), 1, ["tanh", "tanh_prime"], np.random.default_rng(7))
    p = problem_for(net, 1.0, np.ones(6))
    assert p.slope_min < 0 < p.slope_max
