import json

import numpy as np
import pytest

from ntklab.activations import ActivationSpec
from ntklab.data import TeacherSpec, generate
from ntklab.margin import (MarginCertificate, certificate_from_directions, estimate_margin, min_width_for_margin,
                           per_example_margins, project_rows, verify_half_margin)
from ntklab.model import Dataset, InitDistribution, init_symmetric

from conftest import random_unit_rows
from oracles import linear_max_margin, max_margin_socp

IDENTITY = ActivationSpec("identity")
TANH = ActivationSpec("tanh")


def _init(m, d, act=TANH, seed=0):
    return init_symmetric(m, d, InitDistribution.gaussian(d), seed, 0.0, act)


def _teacher_instance(rng, n, d):
    u = rng.standard_normal(d)
    x = random_unit_rows(rng, n, d)
    y = np.where(x @ u >= 0, 1.0, -1.0)
    return Dataset(x, y)


def test_two_point_identity_example():
    data = Dataset(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([1.0, -1.0]))
    cert = estimate_margin(_init(6, 2, IDENTITY), data)
    assert cert.rho_hat == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(cert.v, np.tile([1.0, 0.0], (6, 1)), atol=1e-3)


def test_single_point_identity_example():
    data = Dataset(np.array([[0.6, 0.8]]), np.array([1.0]))
    cert = estimate_margin(_init(4, 2, IDENTITY), data)
    assert cert.rho_hat == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(cert.v, np.tile([0.6, 0.8], (4, 1)), atol=1e-9)


def test_conflicting_duplicate_is_not_separable():
    data = Dataset(np.array([[0.6, 0.8], [0.6, 0.8]]), np.array([1.0, -1.0]))
    cert = estimate_margin(_init(10, 2), data)
    assert cert.rho_hat <= 0
    assert not cert.separable


def test_identity_instances_match_linear_max_margin():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, d = int(rng.integers(2, 51)), int(rng.integers(2, 11))
        data = _teacher_instance(rng, n, d)
        cert = estimate_margin(_init(4, d, IDENTITY, seed=int(rng.integers(1000))), data)
        assert abs(cert.rho_hat - linear_max_margin(data.x, data.y)) <= 1e-3


def test_tanh_instances_match_conic_solver():
    rng = np.random.default_rng(1)
    for _ in range(5):
        n, d, m = int(rng.integers(5, 30)), int(rng.integers(2, 6)), 2 * int(rng.integers(2, 20))
        data = _teacher_instance(rng, n, d)
        params0 = _init(m, d, TANH, seed=int(rng.integers(1000)))
        W = TANH.d1(data.x @ params0.theta.T) * (data.y[:, None] / m)
        best, _ = max_margin_socp(W, data.x)
        cert = estimate_margin(params0, data)
        assert cert.rho_hat <= best + 1e-6
        assert cert.rho_hat >= best - 1e-3
        assert cert.rho_upper >= best - 1e-6


def test_certificate_invariants(reference_data, reference_certificate):
    params0, cert = reference_certificate
    assert cert.converged
    assert np.linalg.norm(cert.v, axis=1).max() <= 1 + 1e-9
    assert cert.rho_hat == pytest.approx(per_example_margins(params0, reference_data, cert.v).min(), abs=1e-9)
    assert cert.rho_hat <= cert.rho_upper
    assert cert.rho_upper - cert.rho_hat <= 1e-3 * cert.rho_hat


def test_working_set_matches_full_solve(reference_data):
    params0 = _init(200, reference_data.d)
    full = estimate_margin(params0, reference_data)
    ws = estimate_margin(params0, reference_data, working_set=40)
    assert ws.rho_hat == pytest.approx(full.rho_hat, abs=1e-4)
    assert ws.rho_hat <= full.rho_upper + 1e-12


def test_adding_an_example_never_increases_the_margin():
    rng = np.random.default_rng(3)
    for _ in range(20):
        d = int(rng.integers(2, 6))
        data = _teacher_instance(rng, int(rng.integers(3, 25)), d)
        params0 = _init(8, d, TANH, seed=int(rng.integers(1000)))
        smaller = estimate_margin(params0, data.subset(slice(0, data.n - 1)))
        full = estimate_margin(params0, data)
        # both are near-optimal; the larger problem's optimum cannot exceed the smaller's
        assert full.rho_hat <= smaller.rho_upper + 1e-9


def test_seed_stability():
    data = generate(TeacherSpec(margin_floor=0.5), 50, 10, 2)
    ref = estimate_margin(_init(400, 10, seed=0), data).rho_hat
    m = 4 * min_width_for_margin(ref, TANH.K1, data.n, 0.05)
    rhos = [estimate_margin(_init(m, 10, seed=s), data).rho_hat for s in range(10)]
    assert (max(rhos) - min(rhos)) / np.mean(rhos) <= 0.25


def test_projection_is_exact():
    v = np.array([[3.0, 4.0], [0.3, 0.4], [0.0, 0.0]])
    np.testing.assert_allclose(project_rows(v), [[0.6, 0.8], [0.3, 0.4], [0.0, 0.0]])


def test_half_margin_examples(reference_data, reference_certificate):
    params0, cert = reference_certificate
    rep = verify_half_margin(cert, params0, reference_data, cert.rho_hat)
    assert rep.all_pass and rep.min_value == pytest.approx(cert.rho_hat)
    rep = verify_half_margin(cert, params0, reference_data, 2 * cert.rho_hat + 1e-6)
    assert not rep.all_pass
    with pytest.raises(ValueError):
        verify_half_margin(cert, params0, reference_data, 0.0)


def test_half_margin_pass_rate_grows_with_width():
    # fixed witness field v(theta) = teacher direction; the population margin is estimated from
    # 4e5 draws, and finite-width margins concentrate around it as m grows
    data = generate(TeacherSpec(margin_floor=0.5), 100, 10, 4)
    e0 = np.zeros(10)
    e0[0] = 1.0
    big = InitDistribution.gaussian(10).sample(np.random.default_rng(99), 400_000)
    rho = float(np.min(data.y * TANH.d1(data.x @ big.T).mean(axis=1) * data.x[:, 0]))
    rates = []
    for m in (2, 8, 32, 128):
        passed = []
        for seed in range(30):
            params0 = _init(m, 10, seed=seed)
            cert = certificate_from_directions(params0, data, np.tile(e0, (m, 1)))
            passed.append(verify_half_margin(cert, params0, data, rho).all_pass)
        rates.append(np.mean(passed))
    assert rates[0] < rates[-1]
    assert all(b >= a - 0.1 for a, b in zip(rates, rates[1:]))
    assert rates[-1] == 1.0


def test_min_width_examples():
    assert min_width_for_margin(0.5, 1.0, 100, 0.01) == 634
    assert min_width_for_margin(1.0, 1.0, 100, 0.01) == 160
    assert min_width_for_margin(4.0, 1.0, 1, 1 - 1e-12) == 2
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            min_width_for_margin(bad, 1.0, 10, 0.1)
    with pytest.raises(ValueError):
        min_width_for_margin(0.5, 1.0, 10, 1.0)


def test_certificate_serialization(tmp_path):
    cert = MarginCertificate(np.array([[0.6, 0.8], [1.0, 0.0]]), 0.25, 12, True, 0.26)
    cert.to_json(tmp_path / "c.json")
    got = json.loads((tmp_path / "c.json").read_text())
    assert got == {"rho_hat": 0.25, "rho_upper": 0.26, "m": 2, "iterations": 12, "converged": True,
                   "v_norm_max": 1.0}
    cert.dump_v(tmp_path / "v.csv")
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "v.csv", delimiter=","), cert.v)
