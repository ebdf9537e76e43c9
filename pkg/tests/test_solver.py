"""Solver tests: holistic Hamiltonian, sweeps, value extraction, reduction."""

import numpy as np
import pytest

from hjplan import (
    IsotropicModel,
    Obstacle,
    Problem,
    QuadcopterModel,
    SaddleState,
    Scene,
    SimpleCarModel,
    SolverParams,
    holistic_hamiltonian,
    holistic_hamiltonian_agent_gradient,
    initialize,
    solve,
    value_of,
)
from hjplan.dynamics import CostateProxInput
from hjplan.solver import costate_sweep, state_descent


def two_car_problem(horizon=6.0, obstacles=()):
    cars = [SimpleCarModel(), SimpleCarModel()]
    starts = [np.array([0.0, 2.0, -np.pi / 2]), np.array([0.0, -2.0, np.pi / 2])]
    goals = [np.array([0.0, -2.0, -np.pi / 2]), np.array([0.0, 2.0, np.pi / 2])]
    scene = Scene(
        obstacles=list(obstacles),
        delta=0.4,
        goal=goals,
        spatial_projection=[np.arange(2), np.arange(2)],
    )
    return Problem(scene=scene, models=cars, starts=starts, horizon=horizon)


class TestHolisticHamiltonian:
    def setup_method(self):
        self.models = [SimpleCarModel(), SimpleCarModel(), SimpleCarModel()]
        self.goals = [np.array([5.0, 0.0, 0.0]), np.array([0.0, 5.0, 0.0]),
                      np.array([-5.0, 0.0, 0.0])]
        self.scene = Scene(
            obstacles=[Obstacle("disk", [20.0, 20.0], 1.0)],
            delta=0.2,
            goal=self.goals,
            spatial_projection=[np.arange(2)] * 3,
        )

    def test_zero_at_goal(self):
        ps = [np.ones(3)] * 3
        h = holistic_hamiltonian(self.scene, self.models, self.goals, ps)
        assert h == 0.0

    def test_minus_one_far_with_zero_costates(self):
        xs = [np.array([0.0, 0.0, 0.0]), np.array([3.0, -4.0, 1.0]),
              np.array([-3.0, 4.0, 2.0])]
        ps = [np.zeros(3)] * 3
        h = holistic_hamiltonian(self.scene, self.models, xs, ps)
        assert h == pytest.approx(-1.0, abs=1e-9)

    def test_touching_pair_still_minus_one(self):
        # the constant running cost sits outside the collision product
        xs = [np.array([0.0, 0.0, 0.0]), np.array([0.2, 0.0, 0.0]),
              np.array([-9.0, 4.0, 2.0])]
        ps = [np.zeros(3)] * 3
        h = holistic_hamiltonian(self.scene, self.models, xs, ps)
        assert h == pytest.approx(-1.0, abs=1e-9)

    def test_agent_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        scene = Scene(
            obstacles=[Obstacle("disk", [1.0, 0.5], 0.8)],
            delta=0.5,
            goal=[np.array([2.0, 1.0, 0.0]), np.array([-2.0, 0.0, 1.0])],
            spatial_projection=[np.arange(2)] * 2,
        )
        models = [SimpleCarModel(), SimpleCarModel()]
        checked = 0
        while checked < 200:
            xs = [rng.uniform(-2, 2, size=3), rng.uniform(-2, 2, size=3)]
            ps = [rng.normal(size=3), rng.normal(size=3)]
            agent = checked % 2
            # steer clear of the car Hamiltonian's kinks
            if abs(np.cos(xs[agent][2]) * ps[agent][0] + np.sin(xs[agent][2]) * ps[agent][1]) < 5e-2:
                continue
            if abs(ps[agent][2]) < 5e-2:
                continue
            d = scene.signed_distance(xs[agent][:2])
            if abs(d) < 5e-2:
                continue
            grad = holistic_hamiltonian_agent_gradient(
                scene, models, xs, ps, agent=agent
            )
            fd = np.zeros(3)
            for k in range(3):
                e = np.zeros(3)
                e[k] = 1e-6
                xs_hi = [x.copy() for x in xs]
                xs_lo = [x.copy() for x in xs]
                xs_hi[agent] = xs_hi[agent] + e
                xs_lo[agent] = xs_lo[agent] - e
                fd[k] = float(
                    holistic_hamiltonian(scene, models, xs_hi, ps)
                    - holistic_hamiltonian(scene, models, xs_lo, ps)
                ) / 2e-6
            assert np.linalg.norm(grad - fd) <= 1e-4 * max(1.0, np.linalg.norm(fd))
            checked += 1


class TestInitialize:
    def test_noise_free_straight_line(self):
        prob = two_car_problem()
        params = SolverParams(init_noise=0.0, seed=5)
        state = initialize(prob, params)
        for i in range(2):
            line = np.linspace(prob.scene.goal[i], prob.starts[i], state.J + 1)
            assert np.allclose(state.x[i], line, atol=0.0)

    def test_seed_determinism(self):
        prob = two_car_problem()
        a = initialize(prob, SolverParams(seed=9))
        b = initialize(prob, SolverParams(seed=9))
        for ai, bi in zip(a.x + a.p + a.z, b.x + b.p + b.z):
            assert np.array_equal(ai, bi)
        c = initialize(prob, SolverParams(seed=10))
        assert any(not np.array_equal(ai, ci) for ai, ci in zip(a.x, c.x))

    def test_endpoints_pinned_any_seed(self):
        prob = two_car_problem()
        for seed in range(5):
            st = initialize(prob, SolverParams(seed=seed))
            for i in range(2):
                assert np.array_equal(st.x[i][0], prob.scene.goal[i])
                assert np.array_equal(st.x[i][-1], prob.starts[i])
                assert np.all(st.p[i][0] == 0.0)
                assert np.array_equal(st.z[i], st.x[i])

    def test_horizon_rounding(self):
        prob = two_car_problem(horizon=0.97)
        st = initialize(prob, SolverParams())
        assert st.J == 10
        assert st.times[-1] == pytest.approx(1.0)

    def test_too_short_horizon_rejected(self):
        prob = two_car_problem(horizon=0.1)
        with pytest.raises(ValueError):
            initialize(prob, SolverParams())


class TestCostateSweep:
    def test_constant_z_zero_p_fixed_point(self):
        # models at rest: the prox of beta = 0 is 0 for every model
        cases = [
            (
                [IsotropicModel(V=1.0, dim=2), SimpleCarModel()],
                [np.full(2, 9.0), np.array([9.0, 9.0, 0.0])],
                2,
            ),
            ([QuadcopterModel()], [np.zeros(12)], 3),
        ]
        cases[1][1][0][:3] = 9.0
        for models, goals, dim in cases:
            scene = Scene(
                obstacles=[],
                delta=0.2,
                goal=goals,
                spatial_projection=[np.arange(dim)] * len(models),
            )
            J = 6
            xs = [np.tile(g * 0.1, (J + 1, 1)) for g in goals]  # constant, at rest
            ps = [np.zeros((J + 1, g.size)) for g in goals]
            state = SaddleState(
                x=xs, p=ps, z=[x.copy() for x in xs], times=0.1 * np.arange(J + 1)
            )
            out = costate_sweep(state, scene, models, SolverParams())
            for o in out:
                assert np.all(o == 0.0)

    def test_alpha_zero_inside_obstacle_returns_beta(self):
        model = SimpleCarModel()
        scene = Scene(
            obstacles=[Obstacle("disk", [0.0, 0.0], 2.0)],
            delta=0.2,
            goal=[np.array([9.0, 9.0, 0.0])],
            spatial_projection=[np.arange(2)],
            A3=1000.0,
        )
        J = 4
        rng = np.random.default_rng(0)
        x = np.zeros((J + 1, 3))  # deep inside the obstacle: alpha ~ 0
        p = rng.normal(size=(J + 1, 3))
        p[0] = 0.0
        z = rng.normal(size=(J + 1, 3))
        state = SaddleState(x=[x], p=[p], z=[z], times=0.1 * np.arange(J + 1))
        params = SolverParams()
        out = costate_sweep(state, scene, [model], params)
        beta = p[1:] + params.sigma * (z[1:] - z[:-1])
        assert np.allclose(out[0][1:], beta, atol=1e-12)

    def test_drone_sweep_matches_elementwise_prox(self):
        model = QuadcopterModel(g=0.1)
        goal = np.zeros(12)
        goal[:3] = 5.0
        scene = Scene(
            obstacles=[Obstacle("sphere", [2.0, 2.0, 2.0], 0.7)],
            delta=0.3,
            goal=[goal],
            spatial_projection=[np.arange(3)],
        )
        J = 8
        rng = np.random.default_rng(4)
        x = rng.normal(size=(J + 1, 12))
        p = rng.normal(scale=0.5, size=(J + 1, 12))
        p[0] = 0.0
        z = x + rng.normal(scale=0.1, size=x.shape)
        state = SaddleState(x=[x], p=[p], z=[z], times=0.1 * np.arange(J + 1))
        params = SolverParams()
        out = costate_sweep(state, scene, [model], params)
        for j in range(1, J + 1):
            chi, _ = scene.goal_indicator([x[j]])
            o, _ = scene.obstacle_indicator(x[j][:3])
            alpha = float(chi * o)
            beta = p[j] + params.sigma * (z[j] - z[j - 1])
            expect = model.costate_prox(
                CostateProxInput(
                    x=x[j], beta=beta, alpha=alpha, sigma=params.sigma, dt=params.dt
                )
            )
            assert np.allclose(out[0][j], expect, atol=1e-12)


class TestStateDescent:
    def test_pinned_rows_never_move(self):
        prob = two_car_problem()
        params = SolverParams(seed=1)
        state = initialize(prob, params)
        for it in range(3):
            p = costate_sweep(state, prob.scene, prob.models, params, it)
            x, z, _ = state_descent(state, p, prob.scene, prob.models, params, it)
            for i in range(2):
                assert np.array_equal(x[i][0], prob.scene.goal[i])
                assert np.array_equal(x[i][-1], prob.starts[i])
            state = SaddleState(x=x, p=p, z=z, times=state.times)

    def test_flat_objective_leaves_states(self):
        # far from goal/obstacles with zero costates the gradient vanishes,
        # so xi = x and the state is a fixed point of the descent
        model = IsotropicModel(V=1.0, dim=2)
        scene = Scene(
            obstacles=[],
            delta=0.2,
            goal=[np.array([500.0, 0.0])],
            spatial_projection=[np.arange(2)],
        )
        J = 5
        x = np.linspace(np.zeros(2), np.ones(2), J + 1)
        p = np.zeros((J + 1, 2))
        state = SaddleState(
            x=[x.copy()], p=[p], z=[x.copy()], times=0.1 * np.arange(J + 1)
        )
        new_x, _, residual = state_descent(
            state, [p], scene, [model], SolverParams()
        )
        assert residual < 1e-12
        assert np.allclose(new_x[0], x, atol=1e-12)

    def test_one_iteration_matches_handrolled_reference(self):
        """Full PDHG iteration against an independent plain-loop rewrite."""
        model = IsotropicModel(V=1.3, dim=2)
        obstacle = Obstacle("disk", [1.0, 1.0], 0.6)
        goal = np.array([3.0, 2.0])
        scene = Scene(
            obstacles=[obstacle],
            delta=0.25,
            goal=[goal],
            spatial_projection=[np.arange(2)],
            A2=100.0,
            A3=100.0,
        )
        start = np.zeros(2)
        prob = Problem(scene=scene, models=[model], starts=[start], horizon=0.5)
        params = SolverParams(seed=21)
        state = initialize(prob, params)
        J = state.J

        # --- reference: direct transcription with scalar loops ---
        sigma, tau, dt = params.sigma, params.tau, params.dt
        a1 = params.a1_at(0)
        rate = params.rate_at(0)
        x0 = [row.copy() for row in state.x[0]]
        p0 = [row.copy() for row in state.p[0]]
        z0 = [row.copy() for row in state.z[0]]

        def chi_of(q):
            return 1.0 - np.exp(-a1 * np.sum((q - goal) ** 2))

        def obs_of(q):
            d = np.linalg.norm(q - np.array([1.0, 1.0])) - 0.6
            return 0.5 * (1.0 + np.tanh(100.0 * np.sign(d) * d * d))

        # costate loop
        p_ref = [np.zeros(2)]
        for j in range(1, J + 1):
            alpha = chi_of(x0[j]) * obs_of(x0[j])
            beta = p0[j] + sigma * (z0[j] - z0[j - 1])
            thr = sigma * dt * alpha * 1.3
            nb = np.linalg.norm(beta)
            p_ref.append(np.zeros(2) if nb <= thr else (1 - thr / nb) * beta)
        # state loop (single gradient step from the anchor)
        x_ref = [row.copy() for row in x0]
        for j in range(1, J):
            xi = x0[j] - tau * (p_ref[j] - p_ref[j + 1])
            h = 1.3 * np.linalg.norm(p_ref[j])
            chi = chi_of(xi)
            grad_chi = 2.0 * a1 * (1.0 - chi) * (xi - goal)
            d = np.linalg.norm(xi - np.array([1.0, 1.0])) - 0.6
            o = obs_of(xi)
            tanh_arg = np.tanh(100.0 * np.sign(d) * d * d)
            grad_o = (
                100.0
                * abs(d)
                * (1.0 - tanh_arg**2)
                * (xi - np.array([1.0, 1.0]))
                / np.linalg.norm(xi - np.array([1.0, 1.0]))
            )
            grad = grad_chi * (o * h - 1.0) + chi * (grad_o * h)
            x_ref[j] = xi + rate * dt * grad
        z_ref = [2 * xn - xo for xn, xo in zip(x_ref, x0)]

        # --- implementation under test ---
        p_new = costate_sweep(state, scene, [model], params, 0)
        x_new, z_new, _ = state_descent(state, p_new, scene, [model], params, 0)

        assert np.allclose(p_new[0], np.stack(p_ref), atol=1e-12)
        assert np.allclose(x_new[0], np.stack(x_ref), atol=1e-12)
        assert np.allclose(z_new[0], np.stack(z_ref), atol=1e-12)


class TestStackedRaggedEquivalence:
    @pytest.mark.parametrize(
        "kind", ["cars", "drones"], ids=["three-cars", "two-drones"]
    )
    def test_paths_agree(self, kind):
        rng = np.random.default_rng(31)
        if kind == "cars":
            models = [SimpleCarModel() for _ in range(3)]
            obstacles = [Obstacle("disk", [0.5, 0.5], 0.4)]
            dim, n = 2, 3
        else:
            models = [QuadcopterModel() for _ in range(2)]
            obstacles = [Obstacle("sphere", [0.5, 0.5, 0.5], 0.4)]
            dim, n = 3, 12
        goals = []
        starts = []
        for i in range(len(models)):
            g = np.zeros(n)
            g[:dim] = rng.uniform(2, 3, size=dim)
            s = np.zeros(n)
            s[:dim] = rng.uniform(-3, -2, size=dim)
            goals.append(g)
            starts.append(s)
        scene = Scene(
            obstacles=obstacles,
            delta=0.3,
            goal=goals,
            spatial_projection=[np.arange(dim)] * len(models),
        )
        prob = Problem(scene=scene, models=models, starts=starts, horizon=2.0)
        params = SolverParams(seed=2)
        state_a = initialize(prob, params)
        state_b = SaddleState(
            x=[v.copy() for v in state_a.x],
            p=[v.copy() for v in state_a.p],
            z=[v.copy() for v in state_a.z],
            times=state_a.times.copy(),
        )
        for it in range(20):
            pa = costate_sweep(state_a, scene, models, params, it)
            pb = costate_sweep(state_b, scene, models, params, it, force_ragged=True)
            xa, za, ra = state_descent(state_a, pa, scene, models, params, it)
            xb, zb, rb = state_descent(
                state_b, pb, scene, models, params, it, force_ragged=True
            )
            for u, v in zip(pa + xa + za, pb + xb + zb):
                assert np.allclose(u, v, atol=1e-11)
            assert abs(ra - rb) < 1e-11
            state_a = SaddleState(x=xa, p=pa, z=za, times=state_a.times)
            state_b = SaddleState(x=xb, p=pb, z=zb, times=state_b.times)


class TestValue:
    def test_running_cost_only_when_far(self):
        # a state parked far from the goal with zero costates pays ~1 per unit time
        model = IsotropicModel(V=1.0, dim=2)
        scene = Scene(
            obstacles=[],
            delta=0.2,
            goal=[np.array([100.0, 0.0])],
            spatial_projection=[np.arange(2)],
        )
        J = 30
        x = np.tile(np.array([0.0, 0.0]), (J + 1, 1))
        p = np.zeros((J + 1, 2))
        state = SaddleState(x=[x], p=[p], z=[x.copy()], times=0.1 * np.arange(J + 1))
        params = SolverParams()
        v = value_of(state, scene, [model], params)
        assert v == pytest.approx(J * 0.1, rel=1e-9)

    def test_query_at_goal_is_zero(self):
        model = IsotropicModel(V=1.0, dim=2)
        goal = np.array([1.0, -1.0])
        scene = Scene(
            obstacles=[], delta=0.2, goal=[goal], spatial_projection=[np.arange(2)]
        )
        prob = Problem(scene=scene, models=[model], starts=[goal.copy()], horizon=1.0)
        plan = solve(prob, SolverParams(seed=0))
        assert abs(plan.value) < 0.05
        assert np.max(np.abs(plan.states[0] - goal)) < 0.05

    def test_free_space_value_matches_distance(self):
        model = IsotropicModel(V=1.0, dim=2)
        scene = Scene(
            obstacles=[],
            delta=0.2,
            goal=[np.array([3.0, 4.0])],
            spatial_projection=[np.arange(2)],
        )
        prob = Problem(scene=scene, models=[model], starts=[np.zeros(2)], horizon=6.0)
        plan = solve(prob, SolverParams(seed=0))
        assert plan.converged
        assert plan.value == pytest.approx(5.0, rel=0.05)


class TestClassicalReduction:
    def test_frozen_indicators_telescope(self):
        # at a horizon exactly matching the minimal time the feasible discrete
        # path is unique: a straight line with uniform steps and a costate
        # constant across time steps
        model = IsotropicModel(V=1.0, dim=2)
        goal = np.array([3.0, 4.0])
        scene = Scene(
            obstacles=[], delta=0.2, goal=[goal], spatial_projection=[np.arange(2)]
        )
        prob = Problem(scene=scene, models=[model], starts=[np.zeros(2)], horizon=5.0)
        params = SolverParams(seed=3, freeze_indicators=True, init_noise=0.05)
        plan = solve(prob, params)
        p = plan.saddle.p[0][1:]
        assert np.max(np.abs(p - p.mean(axis=0))) <= 1e-3
        # straight path: every point on the segment goal->start
        pts = plan.saddle.x[0]
        d = (prob.starts[0] - goal) / np.linalg.norm(prob.starts[0] - goal)
        along = (pts - goal) @ d
        offset = pts - goal - along[:, None] * d
        assert np.max(np.linalg.norm(offset, axis=1)) <= 1e-3


class TestSolveContract:
    def test_step_size_constraint(self):
        with pytest.raises(ValueError):
            SolverParams(sigma=1.0, tau=0.3)

    def test_determinism_bitwise(self):
        prob = two_car_problem()
        params = SolverParams(seed=7, max_iters=150)
        a = solve(prob, params)
        b = solve(prob, params)
        for u, v in zip(a.states + a.controls, b.states + b.controls):
            assert np.array_equal(u, v)
        assert a.value == b.value

    def test_seed_changes_plan(self):
        prob = two_car_problem()
        a = solve(prob, SolverParams(seed=7, max_iters=150))
        b = solve(prob, SolverParams(seed=8, max_iters=150))
        assert any(
            not np.array_equal(u, v) for u, v in zip(a.states, b.states)
        )

    def test_parallel_matches_sequential(self):
        prob = two_car_problem()
        a = solve(prob, SolverParams(seed=7, max_iters=60))
        b = solve(prob, SolverParams(seed=7, max_iters=60, parallel=True, workers=2))
        for u, v in zip(a.states, b.states):
            assert np.array_equal(u, v)

    def test_nonconvergence_surfaces_flag(self):
        prob = two_car_problem()
        plan = solve(prob, SolverParams(seed=7, max_iters=20))
        assert not plan.converged
        assert plan.diagnostics.iterations == 20

    def test_converged_diag_residual_below_tol(self):
        model = IsotropicModel(V=1.0, dim=2)
        scene = Scene(
            obstacles=[],
            delta=0.2,
            goal=[np.array([1.0, 0.0])],
            spatial_projection=[np.arange(2)],
        )
        prob = Problem(scene=scene, models=[model], starts=[np.zeros(2)], horizon=2.0)
        plan = solve(prob, SolverParams(seed=0))
        assert plan.converged
        assert plan.diagnostics.final_residual < SolverParams().conv_tol

    def test_forward_ordering_and_controls_shape(self):
        prob = two_car_problem()
        plan = solve(prob, SolverParams(seed=7, max_iters=50))
        J = plan.saddle.J
        for i in range(2):
            assert np.array_equal(plan.states[i][0], prob.starts[i])
            assert np.array_equal(plan.states[i][-1], prob.scene.goal[i])
            assert plan.controls[i].shape == (J, 2)

    def test_horizon_adjustment_reported(self):
        prob = two_car_problem(horizon=5.97)
        plan = solve(prob, SolverParams(seed=7, max_iters=10))
        assert plan.diagnostics.horizon == pytest.approx(6.0)
        assert plan.diagnostics.horizon_requested == pytest.approx(5.97)


class TestConvergedFeasibility:
    def test_two_car_plan_increments_admissible(self):
        prob = two_car_problem(
            obstacles=[Obstacle("disk", [1.0, 0.0], 0.6), Obstacle("disk", [-1.0, 0.0], 0.6)]
        )
        plan = solve(prob, SolverParams(seed=0))
        assert plan.converged
        scene = prob.scene
        for i, model in enumerate(prob.models):
            st = plan.states[i]
            steps = np.diff(st, axis=0) / 0.1
            chi, _ = scene.goal_indicator([st[:-1]], a1=1000.0)
            o, _ = scene.obstacle_indicator(st[:-1][:, :2])
            other = plan.states[1 - i][:-1][:, :2]
            c, _, _ = scene.pair_collision_indicator(st[:-1][:, :2], other)
            active = (chi * o * c) > 0.9
            speed = np.linalg.norm(steps[:, :2], axis=1)
            turn = np.abs(steps[:, 2])
            assert np.all(speed[active] <= model.V * 1.01)
            assert np.all(turn[active] <= model.W * 1.01)
