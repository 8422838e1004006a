import csv

import numpy as np
import pytest

from relstab import dynamics as dyn
from relstab.equilibria import characterize, group_act
from relstab.errors import IntegrationError
from relstab.liealg import abelian
from relstab.phasespace import ActionGenerator, make_system

from oracles import cayley_step, ex16_growth_rate, ex16_linear_matrix, rotation_about_e3

SO3_M = np.array([1.0, 0, 0, 0, 1.0, 0])


def pendulum():
    return make_system(["q", "p"], "p^2/2 - cos(q)", abelian(0), [])


class TestStep:
    @pytest.mark.parametrize("ptheta", [0.0, 1e-3, 0.2])
    def test_ex16_matches_cayley(self, ex16, rng, ptheta):
        z = np.append(rng.standard_normal(5), ptheta)
        out = dyn.step_implicit_midpoint(ex16, z, 0.05)
        lin = ex16_linear_matrix(ptheta)
        np.testing.assert_allclose(out[:4], cayley_step(lin, z[:4], 0.05), atol=1e-12)
        assert out[5] == ptheta

    def test_newton_and_cayley_paths_agree(self, so3_osc, rng):
        z = rng.standard_normal(6)
        exact = dyn.step_implicit_midpoint(so3_osc, z, 0.1)
        newton = dyn.step_implicit_midpoint(so3_osc, z, 0.1, exact_linear=False)
        np.testing.assert_allclose(newton, exact, atol=1e-13)

    def test_free_flight(self):
        sys = make_system(["q", "p"], "p^2/2", abelian(0), [])
        out = dyn.step_implicit_midpoint(sys, [0.3, 2.0], 0.25, exact_linear=False)
        np.testing.assert_allclose(out, [0.3 + 0.25 * 2.0, 2.0], atol=1e-15)

    def test_zero_step_is_identity(self, ex16):
        z = np.arange(6.0)
        np.testing.assert_array_equal(dyn.step_implicit_midpoint(ex16, z, 0.0), z)

    def test_negative_step_rejected(self, ex16):
        with pytest.raises(ValueError):
            dyn.MidpointStepper(ex16, -1.0)

    def test_batch_matches_single(self, ex16, rng):
        st = dyn.MidpointStepper(ex16, 0.01)
        zs = rng.standard_normal((6, 5))
        batch = st.step_batch(zs)
        for b in range(5):
            np.testing.assert_allclose(batch[:, b], st.step(zs[:, b]), atol=1e-14)

    def test_halving_then_failure(self):
        sys = make_system(["q", "p"], "p^4/4 + q^2/2", abelian(0), [])
        st = dyn.MidpointStepper(sys, 1.0)
        # a huge step from a large state cannot be solved even after halvings
        with pytest.raises(IntegrationError):
            st.step([0.0, 1e6])


class TestIntegrate:
    def test_ex16_pure_rotation(self, ex16):
        tr = dyn.integrate(ex16, [1, 0, 0, 1, 0, 0], 100.0, 1e-3, stride=50)
        assert np.ptp(np.hypot(tr.states[:, 0], tr.states[:, 1])) < 1e-9
        assert np.ptp(np.hypot(tr.states[:, 2], tr.states[:, 3])) < 1e-9
        assert tr.moment_drift[0] == 0.0
        # q(t) = R(t) q0: check the phase after T = 100
        np.testing.assert_allclose(tr.states[-1, :2], [np.cos(100.0), np.sin(100.0)], atol=1e-5)

    def test_so3_moment_conserved(self, so3_osc, rng):
        tr = dyn.integrate(so3_osc, rng.standard_normal(6), 100.0, 1e-3, stride=100)
        assert np.all(tr.moment_drift < 1e-10)
        assert tr.energy_drift < 1e-10

    def test_step_count_adjusts_dt(self, trivial):
        tr = dyn.integrate(trivial, [1, 0, 0, 0], 1.0, 0.3)
        assert tr.dt == pytest.approx(1.0 / 3) and tr.times[-1] == pytest.approx(1.0)

    def test_pendulum_second_order(self):
        sys = pendulum()
        drifts = [dyn.integrate(sys, [2.0, 0.0], 20.0, dt).energy_drift for dt in (0.02, 0.01)]
        assert 3.5 <= drifts[0] / drifts[1] <= 4.5

    def test_energy_bound_flag(self):
        tr = dyn.integrate(pendulum(), [2.0, 0.0], 5.0, 0.1, energy_drift_bound=1e-12)
        assert not tr.within_bound

    def test_projected_monitor_bounded_by_norm(self, so3_osc, rng):
        tr = dyn.integrate(so3_osc, SO3_M + 0.1 * rng.standard_normal(6), 5.0, 1e-2)
        sub = so3_osc.algebra.coadjoint_isotropy(so3_osc.moment_map(SO3_M))
        proj = dyn.projected_moment_norm_sq(so3_osc, tr, sub)
        assert np.all(tr.moment_norm_sq >= proj - 1e-14)

    @pytest.mark.parametrize("which,z0,horizon,dt", [
        ("so3_osc", [0.3, -0.2, 0.5, 0.1, 0.4, -0.6], 3.0, 1e-2),
        ("trivial", [0.3, -0.2, 0.5, 0.1], 3.0, 1e-2),
        ("ex16", [0.3, -0.2, 0.5, 0.1, 0.4, 0.05], 3.0, 1e-2),
    ])
    def test_flow_is_symplectic(self, request, which, z0, horizon, dt):
        sys = request.getfixturevalue(which)
        m = dyn.flow_jacobian_fd(sys, z0, horizon, dt)
        np.testing.assert_allclose(m.T @ sys.omega @ m, sys.omega, atol=1e-6)

    def test_linear_reference_flow(self, trivial):
        tr = dyn.integrate(trivial, [1, 0, 0, 0], 1.0, 1e-3)
        np.testing.assert_allclose(tr.states[-1], dyn.linear_flow(trivial, [1, 0, 0, 0], 1.0),
                                   atol=1e-6)

    def test_csv_export(self, so3_osc, tmp_path):
        tr = dyn.integrate(so3_osc, SO3_M, 0.1, 0.05)
        path = dyn.write_trajectory_csv(so3_osc, tr, tmp_path / "t.csv")
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["t", "q1", "q2", "q3", "p1", "p2", "p3", "h", "phi_1", "phi_2",
                           "phi_3", "phi_norm_sq"]
        assert len(rows) == 4
        assert float(rows[3][0]) == 0.1
        assert all(float(x) == v for x, v in zip(rows[2][1:7], tr.states[1]))


class TestOrbitDistance:
    def test_on_orbit_point(self, so3_osc):
        assert dyn.orbit_distance(so3_osc, SO3_M, SO3_M) == 0.0

    def test_ex16_ignores_theta(self, ex16):
        m = np.array([0, 0, 0, 0, 0.7, 0])
        assert dyn.orbit_distance(ex16, [0, 0, 0, 0, 3.1, 0], m) < 1e-3
        assert dyn.orbit_distance(ex16, [0, 0, 0, 0, -2.0, 0], m) < 1e-3
        assert dyn.orbit_distance(ex16, [0.1, 0, 0, 0, 2.0, 0], m) == pytest.approx(0.1, abs=1e-6)

    def test_so3_rotated_point(self, so3_osc):
        z = rotation_about_e3(0.3) @ SO3_M
        assert dyn.orbit_distance(so3_osc, z, SO3_M) < 1e-3

    def test_so3_off_orbit(self, so3_osc):
        # rotation about e1 leaves the e3 orbit: nearest point has the same distance as the
        # chord length to the circle through m
        z = group_act(so3_osc, [1, 0, 0], SO3_M, 0.4)
        d = dyn.orbit_distance(so3_osc, z, SO3_M)
        assert 0.05 < d < 0.4

    def test_grid_includes_identity_and_respects_budget(self, so3_osc):
        s = dyn.OrbitSampler(so3_osc, np.zeros(6), np.eye(3))
        assert len(s.points) <= 10_000 and not s.fallback
        assert np.any(np.all(s.params == 0.0, axis=1))

    def test_fallback_for_large_h(self):
        names = [f"q{i}" for i in range(4)] + [f"p{i}" for i in range(4)]
        gens = []
        for i in range(4):
            a = np.zeros((8, 8))
            a[i, i + 4], a[i + 4, i] = 1.0, -1.0
            gens.append(ActionGenerator(a, np.zeros(8)))
        h = " + ".join(f"q{i}^2 + p{i}^2" for i in range(4))
        sys = make_system(names, h, abelian(4), gens)
        m = np.ones(8)
        s = dyn.OrbitSampler(sys, m, np.eye(4))
        assert s.fallback and len(s.points) <= 10_000
        z = group_act(sys, np.eye(4)[2], m, 0.7)
        assert s.distance(z) < 1e-6


class TestProbe:
    def test_so3_short_horizon(self, so3_osc):
        re = characterize(so3_osc, SO3_M)
        res = dyn.stability_probe(so3_osc, re, [1e-3], horizon=10.0, samples_per_radius=4,
                                  dt=1e-2)
        assert res.verdict == "NO_ESCAPE_OBSERVED"
        assert res.outcomes[0].max_distance < 1e-2
        assert any("evidence" in n for n in res.notes)

    def test_deterministic(self, so3_osc):
        re = characterize(so3_osc, SO3_M)
        runs = [dyn.stability_probe(so3_osc, re, [1e-2], 5.0, 3, 1e-2, seed=7) for _ in range(2)]
        assert runs[0].outcomes[0].max_distance == runs[1].outcomes[0].max_distance
        assert runs[0].outcomes[0].initial_distance == runs[1].outcomes[0].initial_distance

    def test_threads_do_not_change_outcome(self, so3_osc):
        re = characterize(so3_osc, SO3_M)
        one = dyn.stability_probe(so3_osc, re, [1e-2], 5.0, 4, 1e-2, threads=1)
        two = dyn.stability_probe(so3_osc, re, [1e-2], 5.0, 4, 1e-2, threads=2)
        assert one.outcomes[0].max_distance == pytest.approx(two.outcomes[0].max_distance,
                                                             rel=1e-9)

    def test_empty_radii(self, so3_osc):
        re = characterize(so3_osc, SO3_M)
        res = dyn.stability_probe(so3_osc, re, [], 1.0, 4)
        assert res.outcomes == [] and res.verdict == "NO_ESCAPE_OBSERVED"

    def test_samples_on_sphere(self, ex16):
        re = characterize(ex16, [0, 0, 0, 0, 0.0, 0])
        res = dyn.stability_probe(ex16, re, [1e-2], 0.1, 6, 1e-2, perturb=[0, 1, 2, 3])
        np.testing.assert_allclose(res.outcomes[0].initial_distance, 1e-2, rtol=1e-12)

    def test_few_escapes_no_growth_rate(self, ex16):
        re = characterize(ex16, np.zeros(6))
        off = np.zeros(6)
        off[5] = 1e-2
        res = dyn.stability_probe(ex16, re, [1e-3], 1000.0, 4, 0.1, perturb=[0, 1, 2, 3, 4],
                                  offset=off)
        assert res.verdict == "ESCAPE_OBSERVED"
        assert res.growth_rate is None and any("need 10" in n for n in res.notes)

    def test_growth_rate_oracle(self):
        assert ex16_growth_rate(1e-3) == pytest.approx(2e-3, rel=1e-12)

    def test_csv_files(self, so3_osc, tmp_path):
        re = characterize(so3_osc, SO3_M)
        dyn.stability_probe(so3_osc, re, [1e-3, 1e-2], 0.5, 2, 1e-2, csv_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == [f"sample_{i}.csv" for i in range(4)]
