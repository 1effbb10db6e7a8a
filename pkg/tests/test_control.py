import dataclasses

import numpy as np
import pytest

from tactforce import control as ct
from tactforce import geometry as geo
from tactforce import models, pipeline, synth


def basic_cfg(**overrides):
    base = dict(k_i=np.full(3, 2.0), k_p=np.full(4, 0.5), k_d=np.full(4, 0.02),
                q_d=np.zeros(4), f_d=np.array([0.0, 0.0, -1.5]))
    base.update(overrides)
    return ct.ControllerConfig(**base)


class TestSaturation:
    def test_under_limit_unchanged(self):
        tau = np.array([0.1, -0.2, 0.0, 0.3])
        assert np.array_equal(ct.saturate_preserving_direction(tau, 0.35), tau)

    def test_proportional_scaling(self):
        out = ct.saturate_preserving_direction(np.array([0.7, 0.35, 0.0, 0.0]), 0.35)
        assert np.allclose(out, [0.35, 0.175, 0.0, 0.0])

    def test_direction_preserved_random(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            tau = rng.normal(0, 0.5, 4)
            out = ct.saturate_preserving_direction(tau, 0.35)
            assert np.max(np.abs(out)) <= 0.35 + 1e-15
            # componentwise ratios all equal => direction unchanged
            scale = np.max(np.abs(tau)) / max(np.max(np.abs(out)), 1e-300)
            assert np.max(np.abs(out * scale - tau)) < 1e-12 * max(1.0, np.max(np.abs(tau)))


class TestIntegrateError:
    def test_zero_error_no_change(self):
        cfg = basic_cfg()
        st = ct.ControllerState(integral=np.array([1.0, -0.5, 0.0]))
        out = ct.integrate_error(np.zeros(3), 0.01, cfg, st)
        assert np.array_equal(out, st.integral)

    def test_rate_limiter_caps_increment(self):
        cfg = basic_cfg(integral_rate_limit=5.0)
        st = ct.ControllerState()
        out = ct.integrate_error(np.array([1e9, 0.0, 0.0]), 0.01, cfg, st)
        assert out[0] == pytest.approx(5.0 * 0.01)

    def test_clamp_reached_and_held(self):
        cfg = basic_cfg(integral_clamp=2.0, integral_rate_limit=50.0)
        st = ct.ControllerState()
        for _ in range(2000):
            st.integral = ct.integrate_error(np.array([10.0, 0, 0]), 0.01, cfg, st)
        assert st.integral[0] == pytest.approx(2.0)

    def test_antiwindup_freezes_deepening_axis(self):
        # pressing at f_d - integral = -1.5 N while torque-saturated
        cfg = basic_cfg(f_d=np.array([0.0, 0.0, -1.0]))
        st = ct.ControllerState(integral=np.array([0.0, 0.0, 0.5]),
                                saturation_active=True)
        # positive error grows the integral, pushing the command deeper: frozen
        out = ct.integrate_error(np.array([0.0, 0.0, 2.0]), 0.01, cfg, st)
        assert out[2] == st.integral[2]
        # error of the opposite sign backs the command off: allowed
        out2 = ct.integrate_error(np.array([0.0, 0.0, -2.0]), 0.01, cfg, st)
        assert out2[2] < st.integral[2]
        # without saturation the same update passes through
        st_free = ct.ControllerState(integral=np.array([0.0, 0.0, 0.5]))
        out3 = ct.integrate_error(np.array([0.0, 0.0, 2.0]), 0.01, cfg, st_free)
        assert out3[2] > st_free.integral[2]


class TestControlLaw:
    def test_nominal_command_is_saturated_task_force(self, chain):
        cfg = basic_cfg()
        st = ct.ControllerState()
        jac = geo.jacobian(cfg.q_d, chain)
        tau, _ = ct.control_law(cfg.q_d, np.zeros(4), cfg.f_d, cfg, st, jac, np.zeros(4))
        expected = ct.saturate_preserving_direction(jac.T @ cfg.f_d, cfg.torque_limit)
        assert np.allclose(tau, expected, atol=1e-14)

    def test_integral_unchanged_at_setpoint(self, chain):
        cfg = basic_cfg()
        st = ct.ControllerState()
        jac = geo.jacobian(cfg.q_d, chain)
        for _ in range(100):
            _, st = ct.control_law(cfg.q_d, np.zeros(4), cfg.f_d, cfg, st, jac,
                                   np.zeros(4))
        assert np.array_equal(st.integral, np.zeros(3))

    def test_constant_shortfall_grows_command(self, chain):
        k = 2.0
        cfg = basic_cfg(k_i=np.full(3, k))
        st = ct.ControllerState()
        jac = geo.jacobian(cfg.q_d, chain)
        f_hat = cfg.f_d + np.array([0.0, 0.0, 0.5])  # 0.5 N short along -z
        for _ in range(100):  # one second at 100 Hz
            _, st = ct.control_law(cfg.q_d, np.zeros(4), f_hat, cfg, st, jac,
                                   np.zeros(4))
        # commanded force f_d - integral deepened by ~ k * 0.5 N in one second
        cmd_growth = -(cfg.f_d[2] - st.integral[2]) - (-cfg.f_d[2])
        assert cmd_growth == pytest.approx(k * 0.5, rel=1e-6)

    def test_non_finite_estimate_holds_and_faults(self, chain):
        cfg = basic_cfg()
        prev = np.array([0.1, 0.0, -0.05, 0.0])
        st = ct.ControllerState(integral=np.array([0.5, 0, 0]), prev_command=prev)
        jac = geo.jacobian(cfg.q_d, chain)
        tau, st2 = ct.control_law(cfg.q_d, np.zeros(4), np.array([np.nan, 0, 0]),
                                  cfg, st, jac, np.zeros(4))
        assert np.array_equal(tau, prev)
        assert st2.fault
        assert np.array_equal(st2.integral, st.integral)


class TestPlant:
    def test_equilibrium_without_forces(self, fingertip, chain):
        plant, _ = ct.build_rig("rigid", layout=fingertip)
        plant = dataclasses.replace(plant, gravity=np.zeros(3))
        far = dataclasses.replace(plant.contact, point=np.array([0.0, 0.0, -10.0]))
        plant = dataclasses.replace(plant, contact=far)
        ps = ct.PlantState(q=np.array([0.0, 0.4, 0.4, 0.4]), qd=np.zeros(4))
        ps2, f_f, x = ct.step_plant(ps, np.zeros(4), 1e-3, plant)
        assert np.array_equal(ps2.q, ps.q)
        assert np.array_equal(ps2.qd, ps.qd)
        assert np.array_equal(f_f, np.zeros(3))

    def test_static_penetration_penalty_law(self, fingertip, chain):
        plant, cfg = ct.build_rig("rigid", layout=fingertip)
        # place the surface so the resting tip penetrates by exactly delta
        delta = 1.0e-4
        tip = geo.forward_kinematics(cfg.q_d, plant.chain).pose.translation
        contact = dataclasses.replace(plant.contact,
                                      point=tip + delta * plant.contact.normal)
        plant = dataclasses.replace(plant, contact=contact)
        ps = ct.PlantState(q=cfg.q_d.copy(), qd=np.zeros(4))
        _, f_f, _ = ct.step_plant(ps, np.zeros(4), 1e-3, plant)
        expected = plant.contact.stiffness * delta * (-plant.contact.normal)
        assert np.allclose(f_f, expected, atol=1e-12)

    def test_energy_dissipates_without_actuation(self, fingertip):
        plant, _ = ct.build_rig("rigid", layout=fingertip)
        far = dataclasses.replace(plant.contact, point=np.array([0.0, 0.0, -10.0]))
        plant = dataclasses.replace(plant, contact=far, gravity=np.zeros(3))
        rng = np.random.default_rng(1)
        for _ in range(5):
            ps = ct.PlantState(q=rng.uniform(-0.5, 0.5, 4), qd=rng.uniform(-2, 2, 4))
            ke = 0.5 * np.sum(plant.inertia * ps.qd ** 2)
            for _ in range(200):
                ps, _, _ = ct.step_plant(ps, np.zeros(4), 1e-3, plant,
                                         sample_sensor=False)
                ke_next = 0.5 * np.sum(plant.inertia * ps.qd ** 2)
                assert ke_next <= ke + 1e-15
                ke = ke_next

    def test_non_finite_state_aborts(self, fingertip):
        plant, cfg = ct.build_rig("rigid", layout=fingertip)
        ps = ct.PlantState(q=cfg.q_d.copy(), qd=np.full(4, np.inf))
        with pytest.raises(RuntimeError), np.errstate(invalid="ignore"):
            ct.step_plant(ps, np.zeros(4), 1e-3, plant)

    def test_rigid_vs_soft_stiffness_ratio(self, fingertip):
        rigid, _ = ct.build_rig("rigid", layout=fingertip)
        soft, _ = ct.build_rig("soft", layout=fingertip)
        assert rigid.contact.stiffness >= 50.0 * soft.contact.stiffness


@pytest.fixture(scope="module")
def rig(fingertip):
    plant, cfg = ct.build_rig("rigid", layout=fingertip)
    return plant, cfg


class TestClosedLoop:
    def test_perfect_estimator_regulates(self, rig):
        plant, cfg = rig
        tr = ct.run_closed_loop(ct.Scenario(estimator="perfect", duration=6.0,
                                            step_time=1.0), plant, cfg)
        tail = tr.t >= 5.0
        assert tr.track_error()[tail].mean() < 0.01
        assert tr.real_error()[tail].mean() < 0.01

    def test_est_error_identically_zero_for_perfect(self, rig):
        plant, cfg = rig
        tr = ct.run_closed_loop(ct.Scenario(estimator="perfect", duration=3.0,
                                            step_time=1.0), plant, cfg)
        assert np.all(tr.est_error() == 0.0)

    def test_invariants_every_tick(self, rig):
        plant, cfg = rig
        tr = ct.run_closed_loop(ct.Scenario(estimator="perfect", duration=4.0,
                                            step_time=1.0), plant, cfg)
        assert np.all(np.abs(tr.tau) <= cfg.torque_limit + 1e-12)
        assert np.all(np.abs(tr.integral) <= cfg.integral_clamp + 1e-12)

    def test_determinism_bit_identical(self, rig):
        plant, cfg = rig
        sc = ct.Scenario(estimator="perfect", duration=2.0, step_time=0.5, seed=5)
        t1 = ct.run_closed_loop(sc, plant, cfg)
        t2 = ct.run_closed_loop(sc, plant, cfg)
        for name in ("q", "qd", "tau", "f_true", "f_hat", "integral"):
            assert np.array_equal(getattr(t1, name), getattr(t2, name))

    def test_open_loop_trace_independent_of_estimator(self, rig, fingertip):
        plant, cfg = rig
        cfg0 = dataclasses.replace(cfg, k_i=np.zeros(3))
        rng = np.random.default_rng(9)
        mk = lambda seed: models.ForceModel(
            kind="m3", theta=np.random.default_rng(seed).normal(size=273) * 0.01,
            layout_ref=models.LayoutRef.of(fingertip),
            x_scale=np.ones(90), f_scale=np.ones(3))
        traces = []
        for seed in (1, 2):
            sc = ct.Scenario(estimator=mk(seed), duration=2.0, step_time=0.5, seed=0)
            traces.append(ct.run_closed_loop(sc, plant, cfg0))
        # dynamics identical bit for bit; only the estimate column differs
        for name in ("q", "qd", "tau", "f_true", "integral"):
            assert np.array_equal(getattr(traces[0], name), getattr(traces[1], name))
        assert not np.array_equal(traces[0].f_hat, traces[1].f_hat)

    def test_biased_estimator_tracks_estimate_not_truth(self, rig):
        plant, cfg = rig
        beta = np.array([0.0, 0.0, 0.25])
        sc = ct.Scenario(estimator="perfect", duration=6.0, step_time=1.0,
                         estimator_bias=beta)
        tr = ct.run_closed_loop(sc, plant, cfg)
        tail = tr.t >= 5.0
        # regulation acts on the estimate: f_hat -> f_d while the real force
        # carries the bias
        assert tr.track_error()[tail].mean() < 0.01
        assert tr.real_error()[tail].mean() == pytest.approx(np.linalg.norm(beta),
                                                             abs=0.02)

    def test_openloop_logs_no_estimate(self, rig):
        plant, cfg = rig
        tr = ct.run_closed_loop(ct.Scenario(estimator="openloop", duration=2.0,
                                            step_time=0.5), plant, cfg)
        assert np.all(np.isnan(tr.f_hat))
        s = tr.summary(window=1.0)
        assert s["est_error"] is None and s["track_error"] is None
        assert s["real_error"] is not None

    def test_command_gain_mismatch_open_vs_closed(self, rig):
        plant, cfg = rig
        cfg_mm = dataclasses.replace(cfg, command_gain=0.7)
        open_tr = ct.run_closed_loop(ct.Scenario(estimator="openloop", duration=6.0,
                                                 step_time=1.0), plant, cfg_mm)
        closed_tr = ct.run_closed_loop(ct.Scenario(estimator="perfect", duration=6.0,
                                                   step_time=1.0), plant, cfg_mm)
        tail = open_tr.t >= 5.0
        e_open = open_tr.real_error()[tail].mean()
        e_closed = closed_tr.real_error()[tail].mean()
        assert e_open > 0.3  # ballpark 30% of 1.5 N
        assert e_closed <= 0.2 * e_open

    def test_trace_csv_columns(self, rig):
        plant, cfg = rig
        tr = ct.run_closed_loop(ct.Scenario(estimator="perfect", duration=1.0,
                                            step_time=0.2), plant, cfg)
        lines = tr.to_csv().splitlines()
        assert lines[0].split(",")[0] == "t"
        assert len(lines) == 1 + len(tr.t)

    def test_model_estimator_in_the_loop(self, fingertip, chain, rig):
        plant, cfg = rig
        params = plant.sensor_params
        script = synth.press_script(fingertip, duration=30.0, seed=0)
        rec = synth.generate_recording(script, fingertip, params, chain)
        ds = pipeline.preprocess(rec)
        model = models.fit_least_squares(ds, "m3l", fingertip, damping=33.0)
        sc = ct.Scenario(estimator=model, duration=6.0, step_time=1.0, seed=0)
        tr = ct.run_closed_loop(sc, plant, cfg)
        s = tr.summary(window=3.0)
        assert s["est_error"] < 0.2
        assert s["saturation_fraction"] <= 0.1
