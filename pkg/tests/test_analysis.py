import io

import numpy as np
import pytest

from rbsde.analysis import (SolverConfig, ValueFunction, check_covariation, check_lipschitz,
                            check_supersolution, dominant_direction, estimate_zeta, evaluate_u,
                            obstacle_monotonicity, solve_from, terminal_gap, value_field,
                            zeta_saturation)
from rbsde.backward import solve_bsde
from rbsde.forward import simulate
from rbsde.model import TimeGrid
from rbsde.presets import bermudan_put, frozen, linear
from rbsde.regression import BasisSpec

from conftest import brownian, frozen_model, problem

FAST = SolverConfig(n_steps=20, n_paths=4000)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(scheme="bogus")
    with pytest.raises(ValueError):
        SolverConfig(n_paths=0)
    assert FAST.replace(seed=3).seed == 3


@pytest.mark.parametrize("x", [0.0, 0.4, 1.0, 1.7])
def test_frozen_value_is_pointwise_max(x):
    pre = frozen()
    u, se = evaluate_u(pre.model, pre.problem, 0.0, [x], FAST.replace(basis=pre.basis))
    assert u == pytest.approx(max(x, 1 - abs(x - 1)), abs=2e-2)


def test_penalized_scheme_evaluates_too():
    pre = frozen("lift")
    cfg = FAST.replace(basis=pre.basis, scheme="penalized", n_steps=50)
    solved = solve_from(pre.model, pre.problem, 0.0, [0.0], cfg)
    assert solved.trace is not None
    assert abs(solved.solution.y0 - 1.0) <= 0.05


def test_terminal_limit():
    pre = bermudan_put()
    for x in (90.0, 110.0):
        gap = terminal_gap(pre.model, pre.problem, [x], SolverConfig(n_paths=4000,
                                                                      basis=pre.basis), 0.02)
        phi = max(100.0 - x, 0.0)
        assert gap <= 5e-2 * (1 + phi)


def test_value_field_dominates_obstacle():
    pre = bermudan_put()
    cfg = SolverConfig(n_paths=8000, basis=pre.basis)
    pts = [(0.0, [x]) for x in (80.0, 100.0, 120.0)]
    field = value_field(pre.model, pre.problem, pts, cfg)
    h = np.maximum(100.0 - np.array([80.0, 100.0, 120.0]), 0.0)
    assert np.all(np.isfinite(field.values)) and np.all(field.std_errors >= 0)
    assert np.all(field.values >= h - 3 * field.std_errors)
    buf = io.StringIO()
    field.to_csv(buf)
    assert buf.getvalue().splitlines()[0] == "time,x_1,u,se"


def test_zeta_vanishes_for_constant_terminal():
    p = simulate(brownian(2), TimeGrid(0, 1, 10), [0.0, 0.0], 5000, 0)
    sol = solve_bsde(p, lambda t, x, y, z: np.zeros(x.shape[0]), np.full(5000, 3.0),
                     BasisSpec(1, False))
    zeta = estimate_zeta(sol, p)
    for i in (0, 5, 9):
        x = p.states[:50, i]
        assert np.all(np.abs(zeta(i, x)) <= 3 * zeta.std_error(i, x) + 1e-12)
    assert check_covariation(sol, p, zeta, [1.0, 0.0]) == 0.0


def test_zeta_linear_model_is_constant_gradient():
    pre = linear()
    solved = solve_from(pre.model, pre.problem, 0.0, pre.x0,
                        SolverConfig(n_steps=100, n_paths=20_000, basis=pre.basis))
    zeta = estimate_zeta(solved.solution, solved.paths)
    rng = np.random.default_rng(0)
    for _ in range(10):
        i = int(rng.integers(0, 100))
        x = rng.standard_normal((1, 2)) * np.sqrt(i / 100 + 1e-9)
        err = np.abs(zeta(i, x)[0] - np.array([1.0, -0.5]))
        assert np.all(err <= 3 * zeta.std_error(i, x)[0])
    xi = dominant_direction(zeta, solved.paths)
    np.testing.assert_allclose(xi, np.array([1.0, -0.5]) / np.hypot(1.0, 0.5), atol=0.02)
    assert check_covariation(solved.solution, solved.paths, zeta, xi) <= 0.15


def test_zeta_deep_in_the_money_put():
    pre = bermudan_put()
    solved = solve_from(pre.model, pre.problem, 0.0, pre.x0,
                        SolverConfig(n_paths=20_000, basis=pre.basis))
    zeta = estimate_zeta(solved.solution, solved.paths)
    for i in (25, 40):
        z = zeta(i, [[70.0]])[0, 0]
        assert z == pytest.approx(-0.2 * 70.0, rel=0.10)


def test_zeta_to_csv():
    pre = linear(n_steps=4)
    solved = solve_from(pre.model, pre.problem, 0.0, pre.x0,
                        SolverConfig(n_steps=4, n_paths=500, basis=pre.basis))
    buf = io.StringIO()
    estimate_zeta(solved.solution, solved.paths).to_csv(buf, np.zeros((2, 2)))
    lines = buf.getvalue().splitlines()
    assert lines[0] == "step,time,x_1,x_2,zeta_1,zeta_2" and len(lines) == 1 + 4 * 2


def test_covariation_rejects_non_unit_direction():
    pre = linear(n_steps=4)
    solved = solve_from(pre.model, pre.problem, 0.0, pre.x0,
                        SolverConfig(n_steps=4, n_paths=500, basis=pre.basis))
    with pytest.raises(ValueError):
        check_covariation(solved.solution, solved.paths, lambda i, x: x, [1.0, 1.0])


def test_zeta_saturation_shapes():
    pre = linear(n_steps=5)
    solved = solve_from(pre.model, pre.problem, 0.0, pre.x0,
                        SolverConfig(n_steps=5, n_paths=2000, basis=pre.basis))
    a, b = zeta_saturation(solved.solution, solved.paths)
    assert a.shape == b.shape == (5,)
    assert np.all(b <= a + 1e-12)


def test_supersolution_martingale_case():
    pre = linear()
    rep = check_supersolution(pre.model, pre.problem, 0.0, 0.5, pre.x0,
                              SolverConfig(n_steps=50, n_paths=8000, basis=pre.basis))
    assert abs(rep.slack) <= 3 * rep.se


def test_supersolution_frozen_obstacle_charges():
    prob = problem(terminal=lambda x: np.zeros(x.shape[0]),
                   obstacle=lambda t, x: np.ones(x.shape[0]), fallback=True)
    rep = check_supersolution(frozen_model(), prob, 0.0, 1.0, [0.0],
                              SolverConfig(n_steps=20, n_paths=500, basis=BasisSpec(1, True)))
    assert rep.slack > 0 and rep.passed


def test_supersolution_enlarged_obstacle_candidate():
    pre = bermudan_put()
    bigger = pre.problem.replace(obstacle=lambda t, x: np.maximum(102.0 - x[:, 0], 0.0),
                                 terminal=lambda x: np.maximum(102.0 - x[:, 0], 0.0))
    cfg = SolverConfig(n_paths=8000, basis=pre.basis)
    rep = check_supersolution(pre.model, pre.problem, 0.0, 0.5, pre.x0, cfg, candidate=bigger)
    assert rep.passed
    with pytest.raises(ValueError):
        check_supersolution(pre.model, pre.problem, 0.5, 0.5, pre.x0, cfg)


def test_lipschitz_affine_and_frozen():
    a = np.array([1.0, -0.5])

    def affine(s, x):
        return float(a @ x + 3.0), 0.0

    rng = np.random.default_rng(1)
    pairs = [(rng.standard_normal(2), rng.standard_normal(2)) for _ in range(10)]
    rep = check_lipschitz(affine, 0.0, pairs, 0.0)
    assert rep.max_ratio <= np.linalg.norm(a) / 3 + 1e-12

    pre = frozen()
    cfg = SolverConfig(n_steps=10, n_paths=500, basis=pre.basis)
    u = lambda s, x: evaluate_u(pre.model, pre.problem, s, x, cfg)
    pairs = [([x1], [x2]) for x1, x2 in [(0.0, 0.5), (0.5, 1.5), (1.5, 2.0), (0.2, 1.9)]]
    assert check_lipschitz(u, 0.0, pairs, 0.0).max_ratio <= 1.0 / 3 + 1e-2
    with pytest.raises(ValueError):
        check_lipschitz(u, 0.0, [([1.0], [1.0])], 0.0)


def test_obstacle_monotonicity_is_paired():
    pre = bermudan_put()
    cfg = SolverConfig(n_paths=8000, basis=pre.basis)
    h2 = lambda t, x: np.maximum(103.0 - x[:, 0], 0.0)
    slack = obstacle_monotonicity(pre.model, pre.problem, [h2], [(0.0, [95.0]), (0.0, [105.0])], cfg)
    assert slack.shape == (1, 2) and np.all(slack >= -3.0)


def test_value_function_matches_solution_at_start():
    pre = bermudan_put()
    solved = solve_from(pre.model, pre.problem, 0.0, pre.x0,
                        SolverConfig(n_paths=8000, basis=pre.basis))
    vf = ValueFunction(solved.solution, pre.problem, solved.paths.grid)
    v = vf(0, pre.x0)[0]
    assert v == pytest.approx(solved.solution.y0, rel=0.02)
    np.testing.assert_array_equal(vf(50, [[90.0], [110.0]]), [10.0, 0.0])
