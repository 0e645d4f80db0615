"""Tests for guided simulation, weights, and the log-density tracking lemma."""

import math

import numpy as np
import pytest

from sdesmooth import (
    GuidedSimulationError,
    LinearGuide,
    ModelSpec,
    ObservationRecord,
    TerminalObservation,
    TimeGrid,
    draw_noise,
    eval_log_vtilde,
    lemma_tildev_residual,
    psi,
    simulate_forward,
    simulate_guided,
    simulate_observation,
    solve_backward,
)
from sdesmooth.guided import _simulate_guided_batch
from sdesmooth.models import build_guide, build_model, double_well_force
from sdesmooth.sde import NoiseDraw


def psi_reference(b_val, b_tilde_val, a, a_tilde, P_inv, nu, x):
    """Textbook form of the weight integrand, assembled term by term.

    rho is the gradient of log vtilde; the three contributions are the drift
    mismatch projected on rho, the trace correction, and the quadratic
    correction from the dispersion mismatch.
    """
    rho = P_inv @ (nu - x)
    term_drift = float((b_val - b_tilde_val) @ rho)
    term_trace = -0.5 * float(np.trace((a - a_tilde) @ P_inv))
    term_quad = 0.5 * float(rho @ (a - a_tilde) @ rho)
    return term_drift + term_trace + term_quad


def linear_setup(n_steps=200, seed=0, d=2):
    model = build_model("linear", d)
    guide = build_guide("linear", d)
    grid = TimeGrid(T=1.0, n_steps=n_steps)
    ss = np.random.SeedSequence(seed).generate_state(3)
    x = simulate_forward(model, grid, draw_noise(grid, d, int(ss[0])))
    obs = simulate_observation(model, x, draw_noise(grid, d, int(ss[1])), zeta_seed=int(ss[2]))
    sol = solve_backward(guide, model, obs, grid)
    return model, guide, grid, sol


def scalar_setup(n_steps, guide_B, guide_m=0.0, sigma=0.4, H=0.0, model_B=-2.0, seed=101):
    term = TerminalObservation(B=np.eye(1), Sigma=np.array([[0.5]]))
    model = ModelSpec(
        dim_x=1,
        dim_w=1,
        dim_y=1,
        drift=lambda t, x: model_B * x,
        dispersion=np.array([[sigma]]),
        obs_operator=np.array([[H]]),
        x0=np.array([0.3]),
        terminal_obs=term,
    )
    guide = LinearGuide(B=np.array([[guide_B]]), m=np.array([guide_m]), sigma=np.array([[sigma]]))
    grid = TimeGrid(T=1.0, n_steps=n_steps)
    ss = np.random.SeedSequence(seed).generate_state(4)
    x = simulate_forward(model, grid, draw_noise(grid, 1, int(ss[0])))
    obs = simulate_observation(model, x, draw_noise(grid, 1, int(ss[1])), zeta_seed=int(ss[2]))
    sol = solve_backward(guide, model, obs, grid)
    return model, guide, grid, sol, int(ss[3])


class TestPsi:
    def test_against_reference_at_random_points(self):
        # Mismatched drift and dispersion so every term of psi is active.
        d = 2
        B_model = np.array([[-1.0, 0.3], [-0.2, -1.5]])
        m_model = np.array([0.2, -0.4])
        sigma_model = np.array([[0.5, 0.0], [0.15, 0.35]])
        model = ModelSpec(
            dim_x=d,
            dim_w=d,
            dim_y=d,
            drift=lambda t, x: x @ B_model.T + m_model,
            dispersion=sigma_model,
            obs_operator=np.eye(d),
            x0=np.zeros(d),
            terminal_obs=TerminalObservation(B=np.eye(d), Sigma=0.2 * np.eye(d)),
        )
        B_g = np.array([[-0.8, 0.0], [0.0, -1.2]])
        m_g = np.array([0.0, 0.1])
        sigma_g = np.array([[0.45, 0.0], [0.1, 0.4]])
        guide = LinearGuide(B=B_g, m=m_g, sigma=sigma_g)
        grid = TimeGrid(T=1.0, n_steps=100)
        x_lat = simulate_forward(model, grid, draw_noise(grid, d, 1))
        obs = simulate_observation(model, x_lat, draw_noise(grid, d, 2), zeta_seed=3)
        sol = solve_backward(guide, model, obs, grid)

        rng = np.random.default_rng(17)
        a = sigma_model @ sigma_model.T
        a_tilde = sigma_g @ sigma_g.T
        for _ in range(20):
            k = int(rng.integers(0, grid.n_steps))
            x = rng.normal(size=d)
            t = grid.times[k]
            expected = psi_reference(
                x @ B_model.T + m_model, x @ B_g.T + m_g, a, a_tilde, sol.P_inv[k], sol.nu[k], x
            )
            got = psi(model, guide, sol, k, x)
            assert got == pytest.approx(expected, rel=1e-12, abs=1e-13)

    def test_reaction_diffusion_reduces_to_force_term(self):
        # Model and guide share the dispersion, so only the drift mismatch
        # F(x) survives: psi = F(x)' P^{-1} (nu - x).
        d = 4
        model = build_model("reaction_diffusion", d)
        guide = build_guide("reaction_diffusion", d)
        grid = TimeGrid(T=0.5, n_steps=100)
        x_lat = simulate_forward(model, grid, draw_noise(grid, d, 5))
        obs = simulate_observation(model, x_lat, draw_noise(grid, d, 6), zeta_seed=7)
        sol = solve_backward(guide, model, obs, grid)

        rng = np.random.default_rng(23)
        for _ in range(20):
            k = int(rng.integers(0, grid.n_steps))
            x = rng.normal(scale=0.8, size=d)
            expected = float(double_well_force(x) @ (sol.P_inv[k] @ (sol.nu[k] - x)))
            got = psi(model, guide, sol, k, x)
            assert got == pytest.approx(expected, rel=1e-12, abs=1e-13)

    def test_zero_when_guide_matches_model(self):
        model, guide, grid, sol = linear_setup()
        rng = np.random.default_rng(3)
        for _ in range(10):
            k = int(rng.integers(0, grid.n_steps))
            x = rng.normal(size=2)
            assert psi(model, guide, sol, k, x) == 0.0


class TestLinearExactness:
    def test_total_log_weight_identically_zero(self):
        model, guide, grid, sol = linear_setup()
        for seed in range(6):
            wp = simulate_guided(model, guide, sol, draw_noise(grid, 2, 100 + seed))
            assert wp.log_psi_integral == 0.0
            assert wp.log_terminal_correction == 0.0
            assert wp.total_log_weight == 0.0

    def test_weight_path_consistency(self):
        model, guide, grid, sol = linear_setup()
        wp = simulate_guided(model, guide, sol, draw_noise(grid, 2, 55))
        assert wp.x_path.values.shape == (grid.n_steps + 1, 2)
        np.testing.assert_array_equal(wp.x_path.values[0], model.x0)


class TestDispersionFree:
    def test_follows_ode_and_weight_quadrature(self):
        # sigma = 0 removes both the noise and the guiding pull, so the path
        # is the plain drift ODE; the weight reduces to the psi quadrature,
        # which we check against a fine trapezoid rule on closed forms.
        c = 0.6
        m_g, s_g, PT = 0.2, 0.5, 0.4
        model = ModelSpec(
            dim_x=1,
            dim_w=1,
            dim_y=1,
            drift=lambda t, x: np.full_like(x, c),
            dispersion=np.array([[0.0]]),
            obs_operator=np.array([[0.0]]),
            x0=np.array([0.1]),
            terminal_obs=TerminalObservation(B=np.eye(1), Sigma=np.array([[PT]])),
        )
        guide = LinearGuide(B=np.zeros((1, 1)), m=np.array([m_g]), sigma=np.array([[s_g]]))
        n = 2000
        grid = TimeGrid(T=1.0, n_steps=n)
        zeta = np.array([0.9])
        x_lat = simulate_forward(model, grid, draw_noise(grid, 1, 1))
        obs = simulate_observation(model, x_lat, draw_noise(grid, 1, 2), zeta_seed=3)
        obs = ObservationRecord(y_path=obs.y_path, zeta=zeta)
        sol = solve_backward(guide, model, obs, grid)

        w = draw_noise(grid, 1, 4)
        wp = simulate_guided(model, guide, sol, w)

        # ODE path: x(t) = x0 + c t, unaffected by the noise draw.
        np.testing.assert_allclose(
            wp.x_path.values[:, 0], model.x0[0] + c * grid.times, rtol=0, atol=1e-12
        )

        # Closed forms: nu(t) = zeta - m_g (T - t), P(t) = PT + s_g^2 (T - t);
        # psi = (c - m_g) rho - 1/2 (0 - s_g^2) P^{-1} + 1/2 rho^2 (0 - s_g^2).
        tt = np.linspace(0.0, 1.0, 20 * n + 1)
        nu_t = zeta[0] - m_g * (1.0 - tt)
        P_t = PT + s_g**2 * (1.0 - tt)
        x_t = model.x0[0] + c * tt
        rho_t = (nu_t - x_t) / P_t
        psi_t = (c - m_g) * rho_t + 0.5 * s_g**2 / P_t - 0.5 * rho_t**2 * s_g**2
        expected = np.trapezoid(psi_t, tt)
        assert wp.log_psi_integral == pytest.approx(expected, abs=5e-3)


class TestEndpointPull:
    def test_guided_paths_end_nearer_terminal_reading(self):
        d = 10
        model = build_model("reaction_diffusion", d)
        guide = build_guide("reaction_diffusion", d)
        grid = TimeGrid(T=1.0, n_steps=250)
        x_lat = simulate_forward(model, grid, draw_noise(grid, d, 900))
        obs = simulate_observation(model, x_lat, draw_noise(grid, d, 901), zeta_seed=902)
        sol = solve_backward(guide, model, obs, grid)

        guided_dist = 0.0
        forward_dist = 0.0
        for seed in range(100):
            w = draw_noise(grid, d, 1000 + seed)
            wp = simulate_guided(model, guide, sol, w)
            guided_dist += np.linalg.norm(wp.x_path.values[-1] - obs.zeta)
            xf = simulate_forward(model, grid, w)
            forward_dist += np.linalg.norm(xf.values[-1] - obs.zeta)
        assert guided_dist / 100 < forward_dist / 100


class TestLemmaResidual:
    def test_halving_residual(self):
        # Small dispersion keeps the quadratic-variation fluctuation far
        # below the deterministic O(h) part, so halving h halves the
        # residual.
        for seed in (101, 202, 303):
            r = []
            for n in (1000, 2000):
                model, guide, grid, sol, wseed = scalar_setup(
                    n, guide_B=1.0, sigma=0.05, seed=seed
                )
                r.append(lemma_tildev_residual(model, guide, sol, draw_noise(grid, 1, wseed)))
            factor = r[1] / r[0]
            assert 0.3 < factor < 0.7, f"seed {seed}: factor {factor}"

    def test_fine_grid_bound_matched_guide(self):
        model, guide, grid, sol, wseed = scalar_setup(10000, guide_B=-2.0, seed=101)
        res = lemma_tildev_residual(model, guide, sol, draw_noise(grid, 1, wseed))
        assert res <= 5e-3

    def test_residual_deterministic(self):
        model, guide, grid, sol, wseed = scalar_setup(500, guide_B=1.0, sigma=0.05)
        w = draw_noise(grid, 1, wseed)
        assert lemma_tildev_residual(model, guide, sol, w) == lemma_tildev_residual(
            model, guide, sol, w
        )


class TestWeightContinuity:
    def test_small_noise_perturbation_moves_weight_linearly(self):
        d = 3
        model = build_model("reaction_diffusion", d)
        guide = build_guide("reaction_diffusion", d)
        grid = TimeGrid(T=0.5, n_steps=200)
        x_lat = simulate_forward(model, grid, draw_noise(grid, d, 40))
        obs = simulate_observation(model, x_lat, draw_noise(grid, d, 41), zeta_seed=42)
        sol = solve_backward(guide, model, obs, grid)

        w = draw_noise(grid, d, 43)
        base = simulate_guided(model, guide, sol, w).total_log_weight
        deltas = []
        for eps in (1e-6, 2e-6):
            inc = w.increments.copy()
            inc[100, 1] += eps
            pert = simulate_guided(model, guide, sol, NoiseDraw(grid=grid, increments=inc))
            deltas.append(abs(pert.total_log_weight - base))
        assert deltas[0] < 1e-3
        # Doubling the perturbation roughly doubles the response.
        assert deltas[1] == pytest.approx(2.0 * deltas[0], rel=1e-2)


class TestBatchSimulation:
    def test_batch_matches_sequential(self):
        d = 3
        model = build_model("reaction_diffusion", d)
        guide = build_guide("reaction_diffusion", d)
        grid = TimeGrid(T=0.5, n_steps=150)
        x_lat = simulate_forward(model, grid, draw_noise(grid, d, 60))
        obs = simulate_observation(model, x_lat, draw_noise(grid, d, 61), zeta_seed=62)
        sol = solve_backward(guide, model, obs, grid)

        draws = [draw_noise(grid, d, 70 + i) for i in range(5)]
        increments = np.stack([w.increments for w in draws])
        values, log_psi, log_term = _simulate_guided_batch(model, guide, sol, increments)
        for i, w in enumerate(draws):
            wp = simulate_guided(model, guide, sol, w)
            np.testing.assert_allclose(values[i], wp.x_path.values, rtol=1e-12, atol=1e-12)
            assert log_psi[i] == pytest.approx(wp.log_psi_integral, rel=1e-12, abs=1e-12)
            assert log_term[i] == pytest.approx(
                wp.log_terminal_correction, rel=1e-12, abs=1e-12
            )


class TestErrorsAndBoundaries:
    def test_divergent_path_raises_with_step(self):
        model = ModelSpec(
            dim_x=1,
            dim_w=1,
            dim_y=1,
            drift=lambda t, x: x**3 * 1e120,
            dispersion=np.array([[0.1]]),
            obs_operator=np.array([[0.0]]),
            x0=np.array([3.0]),
            terminal_obs=TerminalObservation(B=np.eye(1), Sigma=np.eye(1)),
        )
        guide = LinearGuide(B=np.array([[-1.0]]), m=np.zeros(1), sigma=np.array([[0.1]]))
        grid = TimeGrid(T=1.0, n_steps=30)
        x_lat = ObservationRecord(
            y_path=simulate_forward(
                ModelSpec(
                    dim_x=1,
                    dim_w=1,
                    dim_y=1,
                    drift=lambda t, x: np.zeros(1),
                    dispersion=np.array([[1.0]]),
                    obs_operator=np.array([[0.0]]),
                    x0=np.array([0.0]),
                ),
                grid,
                draw_noise(grid, 1, 0),
            ),
            zeta=np.array([0.0]),
        )
        sol = solve_backward(guide, model, x_lat, grid)
        with np.errstate(over="ignore"), pytest.raises(GuidedSimulationError, match="step"):
            simulate_guided(model, guide, sol, draw_noise(grid, 1, 1))

    def test_grid_mismatch_rejected(self):
        model, guide, grid, sol = linear_setup(n_steps=50)
        other = TimeGrid(T=1.0, n_steps=60)
        with pytest.raises(ValueError):
            simulate_guided(model, guide, sol, draw_noise(other, 2, 0))

    def test_terminal_correction_formula(self):
        # With B_zeta != I the correction keeps the full density difference;
        # recompute it from scratch at the simulated endpoint.
        d = 2
        B_z = np.array([[1.0, 0.5], [0.0, 1.0]])
        Sigma_z = np.array([[0.3, 0.1], [0.1, 0.25]])
        model = ModelSpec(
            dim_x=d,
            dim_w=d,
            dim_y=d,
            drift=lambda t, x: -x,
            dispersion=0.5 * np.eye(d),
            obs_operator=np.eye(d),
            x0=np.array([0.4, -0.1]),
            terminal_obs=TerminalObservation(B=B_z, Sigma=Sigma_z),
        )
        guide = LinearGuide(B=-np.eye(d), m=np.zeros(d), sigma=0.5 * np.eye(d))
        grid = TimeGrid(T=1.0, n_steps=100)
        x_lat = simulate_forward(model, grid, draw_noise(grid, d, 80))
        obs = simulate_observation(model, x_lat, draw_noise(grid, d, 81), zeta_seed=82)
        sol = solve_backward(guide, model, obs, grid)
        wp = simulate_guided(model, guide, sol, draw_noise(grid, d, 83))

        x_T = wp.x_path.values[-1]
        resid = obs.zeta - B_z @ x_T
        log_pdf = -0.5 * (
            d * math.log(2 * math.pi)
            + math.log(np.linalg.det(Sigma_z))
            + resid @ np.linalg.solve(Sigma_z, resid)
        )
        expected = log_pdf - eval_log_vtilde(sol, grid.n_steps, x_T)
        assert wp.log_terminal_correction == pytest.approx(expected, rel=1e-10, abs=1e-12)
