from __future__ import annotations

import numpy as np
import pytest

from marketclear.finite_market import (ClearingOperator, MarketContext,
                                       make_population, solve_full_equilibrium)
from marketclear.model import Dimensions, DiscreteLaw, MinorBundle, make_spec
from marketclear.optimality import (cost_major, cost_minor,
                                    hamiltonian_mfg, hamiltonian_minor,
                                    hamiltonian_system, minimizer_alpha,
                                    minimizer_beta, perturbation_test)
from marketclear.scenario import TimeGrid, build_lattice, constant_field

from conftest import homogeneous_study_spec, noiseless_unit_spec, scalar_market_spec


def tree(K=4, T=1.0):
    return build_lattice(TimeGrid(T, K), d0=1)


# -- cost functionals --------------------------------------------------------


def test_zero_model_zero_cost() -> None:
    dims = Dimensions(1, 1, 0, 1)
    spec = make_spec(dims, xi_law=DiscreteLaw.point([0.0]),
                     minor=MinorBundle.build(dims, cf=0.0, cg=0.0))
    lat = tree(3)
    J = cost_minor(spec, lat, constant_field(lat, np.zeros(1)),
                   np.zeros((lat.num_nodes, 1)))
    assert J == pytest.approx(0.0, abs=1e-15)


def test_pure_fee_cost_is_half() -> None:
    # phi = 0, unit fee, unit rate over [0, 1]: only the fee term remains
    dims = Dimensions(1, 1, 0, 1)
    spec = make_spec(dims, xi_law=DiscreteLaw.point([0.0]),
                     minor=MinorBundle.build(dims, cf=0.0, cg=0.0))
    lat = tree(4)
    J = cost_minor(spec, lat, constant_field(lat, np.zeros(1)),
                   np.ones((lat.num_nodes, 1)))
    assert J == pytest.approx(0.5)


def test_solved_minor_control_beats_perturbations() -> None:
    spec = noiseless_unit_spec()
    lat = build_lattice(TimeGrid(1.0, 16), d0=0)
    eq = solve_full_equilibrium(spec, lat)
    base = cost_minor(spec, lat, eq.price, eq.alpha_hat[0])
    rng = np.random.default_rng(5)
    for trial in range(10):
        eta = rng.standard_normal((lat.num_nodes, 1))
        eta[lat.terminal_slice] = 0.0
        bumped = cost_minor(spec, lat, eq.price, eq.alpha_hat[0] + 0.1 * eta)
        assert bumped > base


def hand_assembled_major_cost(K: int) -> float:
    """Literal transcription of the discrete cost chain at constant unit flow.

    Noiseless one-agent market, unit coefficients, zero discount: X carries
    drift -b, Y integrates X backward, the price is the pre-driver mean plus
    the fee, and the major cost accumulates <b, phi> + .5 lam0 b^2.
    """
    dt = 1.0 / K
    lam0 = 1.0
    b = 1.0
    X = [0.0] * (K + 1)
    X[0] = 1.0
    for k in range(K):
        X[k + 1] = X[k] + dt * (-b)
    Y = [0.0] * (K + 1)
    Y[K] = X[K]
    for k in range(K - 1, -1, -1):
        Y[k] = Y[k + 1] + dt * X[k]
    x0 = [0.0] * (K + 1)
    for k in range(K):
        x0[k + 1] = x0[k] + dt * b
    J = 0.0
    for k in range(K):
        phi = -Y[k + 1] + 1.0 * b   # pre-driver price at a noiseless node
        J += dt * (b * phi + 0.5 * lam0 * b * b)
    return J


def test_major_cost_matches_hand_assembly() -> None:
    dims = Dimensions(1, 0, 0, 1)
    from marketclear.model import QuadraticMajorCost
    spec = make_spec(dims, delta=0.0, xi_law=DiscreteLaw.point([1.0]),
                     major_cost=QuadraticMajorCost.build(dims, c0f=0.0, h0f=0.0,
                                                         c0g=0.0, h0g=0.0))
    K = 64
    lat = build_lattice(TimeGrid(1.0, K), d0=0)
    ctx = MarketContext(spec, lat)
    pop = make_population(spec, ctx.atoms)
    beta = constant_field(lat, np.ones(1))
    beta.values[lat.terminal_slice] = 0.0
    J = cost_major(spec, lat, pop, beta, ctx=ctx)
    assert J == pytest.approx(hand_assembled_major_cost(K), abs=1e-12)
    # continuous chain: X = 1-t, Y = (1-t)^2/2, phi = 1 - (1-t)^2/2, J = 4/3
    assert abs(J - 4.0 / 3.0) <= 5e-2


def test_cost_at_equilibrium_flow_matches_reports() -> None:
    spec = scalar_market_spec(delta=0.4)
    lat = tree(4)
    ctx = MarketContext(spec, lat)
    pop = make_population(spec, ctx.atoms, assignments=[0, 1])
    eq = solve_full_equilibrium(spec, lat, pop, ctx=ctx)
    op = ClearingOperator(spec, lat, pop, ctx=ctx)
    # the re-solve path must reproduce the coupled solve's own fields
    sol, phi = op.solve(eq.beta_norm.values)
    assert np.max(np.abs(phi - eq.price.values)) <= 1e-8
    for g in range(pop.size):
        assert np.max(np.abs(sol.field(f"Y{g}") - eq.group_field("Y", g))) <= 1e-8


# -- perturbation reports -----------------------------------------------------


def test_zero_amplitude_row_is_exactly_zero() -> None:
    spec = scalar_market_spec(delta=0.4)
    lat = tree(3)
    rep = perturbation_test(spec, lat, "major-N", directions=3, seed=1)
    zero_col = rep.eps_grid.index(0.0)
    assert np.all(rep.delta_j[:, zero_col] == 0.0)


def test_quadratic_symmetry_at_stationary_point() -> None:
    spec = scalar_market_spec(delta=0.4)
    lat = tree(3)
    rep = perturbation_test(spec, lat, "major-N", directions=5, seed=2)
    eps = np.asarray(rep.eps_grid)
    for j, e in enumerate(eps):
        if e <= 0:
            continue
        jneg = int(np.where(eps == -e)[0][0])
        assert np.max(np.abs(rep.delta_j[:, j] - rep.delta_j[:, jneg])) <= 1e-8


@pytest.mark.parametrize("level", ["minor", "major-N", "major-mfg"])
def test_optimality_gates(level) -> None:
    spec = homogeneous_study_spec(N=2, delta=0.4)
    lat = tree(4)
    rep = perturbation_test(spec, lat, level, directions=8, seed=3)
    assert not rep.failed
    assert rep.min_delta_j >= -1e-9
    assert rep.gradient_norm <= 1e-6
    assert rep.min_curvature > 0


def test_eps_grid_validation() -> None:
    spec = scalar_market_spec()
    lat = tree(2)
    with pytest.raises(Exception):
        perturbation_test(spec, lat, "major-N", eps_grid=(0.0, 0.1))
    with pytest.raises(Exception):
        perturbation_test(spec, lat, "major-N", eps_grid=(-0.1, 0.1))


# -- Hamiltonians ---------------------------------------------------------------


def test_minor_hamiltonian_zero_case() -> None:
    assert hamiltonian_minor(0.0, 0.0, 0.0, 1.0) == 0.0


def test_minor_hamiltonian_vertex_on_grid() -> None:
    # y = 1, phi = 1, unit fee: the minimizer -2 beats a fine control grid
    best = minimizer_alpha(1.0, 1.0, 1.0)
    assert best == pytest.approx(-2.0)
    h_best = hamiltonian_minor(1.0, best, 1.0, 1.0)
    grid = np.arange(-4.0, 0.0 + 1e-9, 0.01)
    values = [hamiltonian_minor(1.0, a, 1.0, 1.0) for a in grid]
    assert h_best <= min(values) + 1e-12
    assert min(values) == pytest.approx(h_best, abs=1e-4)


def test_system_hamiltonian_zero_case() -> None:
    dims = Dimensions(1, 1, 0, 2)
    from marketclear.model import QuadraticMajorCost
    spec = make_spec(dims, minor=MinorBundle.build(dims, cf=0.0, hf=0.0),
                     major_cost=QuadraticMajorCost.build(dims, c0f=0.0, h0f=0.0))
    val = hamiltonian_system(spec, 0.0, [0.0], [[0.0]] * 2, [[0.0]] * 2,
                             [0.0], [[0.0]] * 2, [[0.0]] * 2, [0.0])
    assert val == 0.0


def test_system_hamiltonian_minimized_by_flow_rule() -> None:
    spec = scalar_market_spec(N=2)
    rng = np.random.default_rng(17)
    x0, p0 = rng.normal(size=1), rng.normal(size=1)
    xs, ys = [rng.normal(size=1) for _ in range(2)], [rng.normal(size=1) for _ in range(2)]
    ps, rs = [rng.normal(size=1) for _ in range(2)], [rng.normal(size=1) for _ in range(2)]
    lam = spec.lambda_minor.value
    lam0 = spec.lambda_major.value
    best = minimizer_beta(p0, np.mean(ys, axis=0), np.mean(ps, axis=0),
                          lam0, lam, N=2)
    h0 = hamiltonian_system(spec, 0.0, x0, xs, ys, p0, ps, rs, best)
    for trial in range(100):
        v = rng.normal(size=1)
        assert h0 <= hamiltonian_system(spec, 0.0, x0, xs, ys, p0, ps, rs,
                                        best + v) + 1e-12


def test_mfg_hamiltonian_flow_rule_example() -> None:
    spec = homogeneous_study_spec()
    rng = np.random.default_rng(23)
    args = dict(x0=rng.normal(size=1), x1=rng.normal(size=1), y1=rng.normal(size=1),
                ybar=rng.normal(size=1), p0=rng.normal(size=1), p1=rng.normal(size=1),
                pbar=rng.normal(size=1), r1=rng.normal(size=1))
    best = minimizer_beta(args["p0"], args["ybar"], args["pbar"],
                          spec.lambda_major.value, spec.lambda_minor.value)
    h0 = hamiltonian_mfg(spec, 0.0, beta=best, **args)
    for trial in range(100):
        v = rng.normal(size=1)
        assert h0 <= hamiltonian_mfg(spec, 0.0, beta=best + v, **args) + 1e-12
