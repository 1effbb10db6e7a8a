"""Closed-loop task-space force controller and the simulated finger plant.

The controller applies integral-only force feedback: the commanded task
force is the desired force minus the accumulated (rate-limited, clamped,
anti-windup) integral of the estimation error, mapped to joint torques
through the translation Jacobian, plus gravity compensation, joint
damping, and a proportional pull toward a nominal posture.  Torques are
saturated by scaling the whole vector so the applied direction never
changes.

The plant integrates diagonal-inertia joint dynamics at 1 kHz with a
penalty-law contact (stiffness times penetration plus damping times
penetration rate); the controller runs at 100 Hz with zero-order hold.
Frames: the plant lives in the hand base frame {B}; desired, estimated and
measured forces are expressed in the force-sensor frame {F}; the model
estimator works in the array frame S0 and its output is rotated into {F}.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import models as models_mod
from .geometry import (ArrayLayout, FingerChain, chain_frames, default_chain,
                       forward_kinematics, gravity_from_frames,
                       jacobian_from_frames)
from .synth import ContactState, SensorModelParams, default_params, sensor_response

RIGID_STIFFNESS = 2.0e4   # N/m
SOFT_STIFFNESS = 4.0e2    # N/m, 50x softer than rigid


@dataclass
class ControllerConfig:
    """Gains and limits of the force controller; diagonal gains as vectors."""

    k_i: np.ndarray                     # (3,) 1/s force-integral gain
    k_p: np.ndarray                     # (4,) N*m/rad joint position gain
    k_d: np.ndarray                     # (4,) N*m*s/rad joint damping gain
    q_d: np.ndarray                     # (4,) rad nominal posture
    f_d: np.ndarray                     # (3,) N desired force in {F}
    torque_limit: float = 0.35          # N*m
    integral_rate_limit: float = 5.0    # N/s per axis
    integral_clamp: float = 10.0        # N per axis
    control_rate: float = 100.0         # Hz
    command_gain: float = 1.0           # scales the task-force command path

    def __post_init__(self):
        for name in ("k_i", "k_p", "k_d", "q_d", "f_d"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.k_i < 0) or np.any(self.k_p < 0) or np.any(self.k_d < 0):
            raise ValueError("gains must be non-negative")
        if self.torque_limit <= 0 or self.integral_rate_limit <= 0 \
                or self.integral_clamp <= 0 or self.control_rate <= 0:
            raise ValueError("limits and rates must be positive")


@dataclass
class ControllerState:
    """Mutable controller memory between ticks."""

    integral: np.ndarray = field(default_factory=lambda: np.zeros(3))  # N, K_i-scaled
    prev_command: np.ndarray = field(default_factory=lambda: np.zeros(4))
    saturation_active: bool = False
    fault: bool = False


def saturate_preserving_direction(tau, limit: float) -> np.ndarray:
    """Scale the whole torque vector so its infinity norm stays below limit."""
    if limit <= 0.0:
        raise ValueError("torque limit must be positive")
    tau = np.asarray(tau, dtype=float)
    peak = float(np.max(np.abs(tau)))
    if peak <= limit:
        return tau.copy()
    return tau * (limit / peak)


def integrate_error(e_f, dt: float, cfg: ControllerConfig,
                    st: ControllerState) -> np.ndarray:
    """One rate-limited, clamped, anti-windup step of the error integral.

    The candidate increment ``k_i * e_f * dt`` is clipped per axis to the
    rate limit; while the torque command is saturated, axes whose update
    would push the commanded task force further from zero are frozen; the
    result is clamped to +/- integral_clamp.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    inc = cfg.k_i * np.asarray(e_f, dtype=float) * dt
    lim = cfg.integral_rate_limit * dt
    inc = np.clip(inc, -lim, lim)
    if st.saturation_active:
        current = np.abs(cfg.f_d - st.integral)
        proposed = np.abs(cfg.f_d - (st.integral + inc))
        inc = np.where(proposed > current, 0.0, inc)
    return np.clip(st.integral + inc, -cfg.integral_clamp, cfg.integral_clamp)


def control_law(q, qd, f_hat, cfg: ControllerConfig, st: ControllerState,
                jac: np.ndarray, tau_g: np.ndarray) -> tuple[np.ndarray, ControllerState]:
    """One controller tick; ``jac`` must be expressed in the frame of f_d.

    Returns the saturated torque command and the successor state.  The
    command uses the integral accumulated so far; the integral is then
    advanced with the current error so a zero-integral state commands
    exactly ``sat(J^T f_d)`` plus the posture terms.  A non-finite estimate
    holds the previous command and raises the fault flag.
    """
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    f_hat = np.asarray(f_hat, dtype=float)
    if not np.all(np.isfinite(f_hat)):
        return st.prev_command.copy(), replace(
            st, integral=st.integral.copy(), prev_command=st.prev_command.copy(), fault=True)

    u = cfg.command_gain * (cfg.f_d - st.integral)
    tau_raw = jac.T @ u + tau_g - cfg.k_d * qd - cfg.k_p * (q - cfg.q_d)
    tau = saturate_preserving_direction(tau_raw, cfg.torque_limit)
    saturated = bool(np.max(np.abs(tau_raw)) > cfg.torque_limit)

    probe = ControllerState(integral=st.integral, prev_command=tau,
                            saturation_active=saturated)
    integral = integrate_error(f_hat - cfg.f_d, 1.0 / cfg.control_rate, cfg, probe)
    return tau, ControllerState(integral=integral, prev_command=tau.copy(),
                                saturation_active=saturated, fault=False)


@dataclass
class ContactParams:
    """Penalty-contact surface: a plane with stiffness and damping."""

    point: np.ndarray          # (3,) m, a point on the plane, frame {B}
    normal: np.ndarray         # (3,) unit, pointing into free space
    stiffness: float           # N/m
    damping: float             # N*s/m along the normal
    tangential_damping: float  # N*s/m viscous drag in the plane
    regime: str = "rigid"

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        normal = np.asarray(self.normal, dtype=float)
        self.normal = normal / np.linalg.norm(normal)
        if self.stiffness <= 0.0:
            raise ValueError("contact stiffness must be positive")
        if self.regime not in ("rigid", "soft"):
            raise ValueError("contact regime must be 'rigid' or 'soft'")


@dataclass
class PlantModel:
    """Everything fixed about the simulated rig."""

    chain: FingerChain
    layout: ArrayLayout
    sensor_params: SensorModelParams
    contact: ContactParams
    inertia: np.ndarray            # (4,) kg*m^2 diagonal approximation
    joint_damping: np.ndarray      # (4,) N*m*s/rad
    gravity: np.ndarray            # (3,) m/s^2 in {B}
    x_c: np.ndarray                # (3,) m, contact point on the array in S0
    r_b_f: np.ndarray              # (3,3) rotation: {F} coordinates -> {B}


@dataclass
class PlantState:
    q: np.ndarray
    qd: np.ndarray
    f_contact: np.ndarray = field(default_factory=lambda: np.zeros(3))  # {B}, finger-on-surface


def _penalty_force(tip: np.ndarray, v_tip: np.ndarray, contact: ContactParams) -> np.ndarray:
    n = contact.normal
    gap = float((tip - contact.point) @ n)
    if gap >= 0.0:
        return np.zeros(3)
    pen_rate = -float(v_tip @ n)
    fn = contact.stiffness * (-gap) + contact.damping * pen_rate
    fn = max(fn, 0.0)  # the surface cannot pull
    v_tan = v_tip - (v_tip @ n) * n
    return fn * (-n) + contact.tangential_damping * v_tan


def contact_force(ps: PlantState, plant: PlantModel) -> np.ndarray:
    """Penalty-law force the fingertip applies on the surface, frame {B}."""
    frames = chain_frames(ps.q, plant.chain)
    tip = frames[4]
    v_tip = jacobian_from_frames(frames) @ ps.qd
    return _penalty_force(tip, v_tip, plant.contact)


def step_plant(ps: PlantState, tau_cmd, dt: float, plant: PlantModel,
               rng: np.random.Generator | None = None,
               sample_sensor: bool = True) -> tuple[PlantState, np.ndarray, np.ndarray | None]:
    """One semi-implicit Euler step of the joint dynamics.

    Returns the new state, the measured force in {F} (the force the finger
    applies on the surface), and the raw taxel activities for the contact,
    or None when ``sample_sensor`` is off.
    """
    tau_cmd = np.asarray(tau_cmd, dtype=float)
    frames = chain_frames(ps.q, plant.chain)
    jac = jacobian_from_frames(frames)
    f_b = _penalty_force(frames[4], jac @ ps.qd, plant.contact)
    tau_g = gravity_from_frames(frames, plant.chain.link_masses, plant.gravity)
    qdd = (tau_cmd - tau_g - plant.joint_damping * ps.qd - jac.T @ f_b) / plant.inertia
    qd_next = ps.qd + dt * qdd
    q_next = ps.q + dt * qd_next
    if not (np.all(np.isfinite(q_next)) and np.all(np.isfinite(qd_next))):
        raise RuntimeError("plant state became non-finite")
    ps_next = PlantState(q=q_next, qd=qd_next, f_contact=f_b)

    f_f = plant.r_b_f.T @ f_b
    x = None
    if sample_sensor:
        f_s0 = frames[3].T @ f_b  # tip rotation is the S0 orientation
        state = ContactState(f=f_s0, x_c=plant.x_c)
        x = sensor_response(state, plant.layout, plant.sensor_params, rng)
    return ps_next, f_f, x


def array_contact_point(layout: ArrayLayout, press_dir_s0) -> np.ndarray:
    """Taxel position whose outward normal best matches the measured force.

    The measured force (finger on surface) points out of the array face, so
    the contact sits at the taxel facing that direction.
    """
    u = np.asarray(press_dir_s0, dtype=float)
    u = u / np.linalg.norm(u)
    normals = layout.rotations[:, :, 2]
    return layout.taxel_positions[int(np.argmax(normals @ u))].copy()


def nominal_press_direction(chain: FingerChain, q_d, f_d_f, r_b_f) -> np.ndarray:
    """Direction (unit, S0) of the force the environment sees at posture q_d."""
    r_b_s0 = forward_kinematics(q_d, chain).pose.rotation
    f_b = np.asarray(r_b_f, dtype=float) @ np.asarray(f_d_f, dtype=float)
    d = r_b_s0.T @ f_b
    return d / np.linalg.norm(d)


def build_rig(regime: str = "rigid", layout: ArrayLayout | None = None,
              sensor_params: SensorModelParams | None = None,
              chain: FingerChain | None = None,
              q_d=None, f_d=(0.0, 0.0, -1.5), gap: float = 2.0e-4,
              seed: int = 0) -> tuple[PlantModel, ControllerConfig]:
    """Assemble the default simulated rig pressing down on a plane.

    The surface sits ``gap`` metres below the fingertip at the nominal
    posture, its normal along +z of {B}; frame {F} is aligned with {B}.
    """
    from .geometry import fingertip_layout

    chain = chain or default_chain()
    layout = layout or fingertip_layout()
    sensor_params = sensor_params or default_params(layout, "curved", seed=seed)
    q_d = np.array([0.0, 0.5, 0.6, 0.4]) if q_d is None else np.asarray(q_d, dtype=float)
    f_d = np.asarray(f_d, dtype=float)
    r_b_f = np.eye(3)

    tip = forward_kinematics(q_d, chain).pose.translation
    normal = np.array([0.0, 0.0, 1.0])
    if regime == "rigid":
        k = RIGID_STIFFNESS
    elif regime == "soft":
        k = SOFT_STIFFNESS
    else:
        raise ValueError("contact regime must be 'rigid' or 'soft'")
    contact = ContactParams(point=tip - gap * normal, normal=normal,
                            stiffness=k, damping=0.1 * np.sqrt(k),
                            tangential_damping=0.05 * np.sqrt(k), regime=regime)

    press_dir = nominal_press_direction(chain, q_d, f_d, r_b_f)
    plant = PlantModel(
        chain=chain, layout=layout, sensor_params=sensor_params, contact=contact,
        inertia=np.array([2.0e-3, 1.2e-3, 6.0e-4, 3.0e-4]),
        joint_damping=np.full(4, 0.02),
        gravity=np.array([0.0, 0.0, -9.81]),
        x_c=array_contact_point(layout, press_dir),
        r_b_f=r_b_f,
    )
    cfg = ControllerConfig(
        k_i=np.full(3, 4.0), k_p=np.full(4, 0.5), k_d=np.full(4, 0.02),
        q_d=q_d, f_d=f_d,
    )
    return plant, cfg


@dataclass
class SimTrace:
    """Per-control-tick log of one closed-loop run."""

    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    tau: np.ndarray
    f_true: np.ndarray      # {F}, plant truth read at tick start
    f_hat: np.ndarray       # {F}, NaN when no estimator ran
    f_d: np.ndarray
    integral: np.ndarray
    saturated: np.ndarray   # bool
    fault: np.ndarray       # bool

    def est_error(self) -> np.ndarray:
        """Absolute estimation error | ||f_true|| - ||f_hat|| | per tick."""
        return np.abs(np.linalg.norm(self.f_true, axis=1)
                      - np.linalg.norm(self.f_hat, axis=1))

    def track_error(self) -> np.ndarray:
        """Tracking error | ||f_d|| - ||f_hat|| | per tick."""
        return np.abs(np.linalg.norm(self.f_d, axis=1)
                      - np.linalg.norm(self.f_hat, axis=1))

    def real_error(self) -> np.ndarray:
        """Real error | ||f_d|| - ||f_true|| | per tick."""
        return np.abs(np.linalg.norm(self.f_d, axis=1)
                      - np.linalg.norm(self.f_true, axis=1))

    def _window_mask(self, window: float) -> np.ndarray:
        return self.t >= self.t[-1] - window + 1e-12

    def summary(self, window: float = 13.0) -> dict[str, float | None]:
        """Trailing-window means of the three errors; None where undefined."""
        m = self._window_mask(window)

        def mean_or_none(series: np.ndarray) -> float | None:
            vals = series[m]
            vals = vals[np.isfinite(vals)]
            return float(vals.mean()) if len(vals) else None

        return {
            "est_error": mean_or_none(self.est_error()),
            "track_error": mean_or_none(self.track_error()),
            "real_error": mean_or_none(self.real_error()),
            "saturation_fraction": float(np.mean(self.saturated[m])),
        }

    def to_csv(self) -> str:
        cols = (["t"]
                + [f"q{j}" for j in range(4)] + [f"qd{j}" for j in range(4)]
                + [f"tau{j}" for j in range(4)]
                + [f"f_true_{a}" for a in "xyz"] + [f"f_hat_{a}" for a in "xyz"]
                + [f"f_d_{a}" for a in "xyz"] + [f"integral_{a}" for a in "xyz"]
                + ["saturated", "fault"])
        out = io.StringIO()
        out.write(",".join(cols) + "\n")
        table = np.hstack([
            self.t[:, None], self.q, self.qd, self.tau, self.f_true, self.f_hat,
            self.f_d, self.integral,
            self.saturated[:, None].astype(float), self.fault[:, None].astype(float),
        ])
        for row in table:
            out.write(",".join(f"{v:.17g}" for v in row) + "\n")
        return out.getvalue()


@dataclass
class Scenario:
    """One closed-loop run: which estimator, which contact, which command."""

    estimator: str | models_mod.ForceModel   # 'perfect' | 'openloop' | model
    contact_regime: str = "rigid"
    f_d: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.5]))
    duration: float = 10.0
    step_time: float = 1.5     # s; before this f_d is zero and offsets are learned
    seed: int = 0
    estimator_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))  # added to f_hat

    def __post_init__(self):
        self.f_d = np.asarray(self.f_d, dtype=float)
        self.estimator_bias = np.asarray(self.estimator_bias, dtype=float)
        if isinstance(self.estimator, str) and self.estimator not in ("perfect", "openloop"):
            raise ValueError("string estimators must be 'perfect' or 'openloop'")


def run_closed_loop(scenario: Scenario, plant: PlantModel, cfg: ControllerConfig,
                    inner_dt: float = 1.0e-3) -> SimTrace:
    """100 Hz control loop over the 1 kHz plant with zero-order hold.

    Each tick reads the sensor state left by the previous tick, forms the
    estimate, runs the control law, then holds the torque for the inner
    steps.  Model estimators subtract activity offsets learned during the
    pre-step calibration window (desired force is zero there, the finger
    hovers just off the surface), standardize with the model's own scales,
    and rotate the S0 prediction into {F}.
    """
    steps_per_tick = int(round(1.0 / (cfg.control_rate * inner_dt)))
    if steps_per_tick < 1:
        raise ValueError("inner step must not exceed the control period")
    n_ticks = int(round(scenario.duration * cfg.control_rate))
    model = scenario.estimator if isinstance(scenario.estimator, models_mod.ForceModel) else None
    open_loop = scenario.estimator == "openloop"
    if open_loop:
        cfg = replace(cfg, k_i=np.zeros(3))
    if model is not None:
        model.layout_ref.check(plant.layout)

    rng = np.random.default_rng(scenario.seed)
    ps = PlantState(q=cfg.q_d.copy(), qd=np.zeros(4))
    st = ControllerState()

    # initial sensor read at the resting state
    x_last = sensor_response(ContactState(f=np.zeros(3), x_c=plant.x_c),
                             plant.layout, plant.sensor_params, rng)
    f_last = np.zeros(3)

    calib_sum = np.zeros_like(x_last)
    calib_count = 0
    offsets = np.zeros_like(x_last)

    tr = SimTrace(
        t=np.arange(n_ticks) / cfg.control_rate,
        q=np.empty((n_ticks, 4)), qd=np.empty((n_ticks, 4)), tau=np.empty((n_ticks, 4)),
        f_true=np.empty((n_ticks, 3)), f_hat=np.full((n_ticks, 3), np.nan),
        f_d=np.empty((n_ticks, 3)), integral=np.empty((n_ticks, 3)),
        saturated=np.zeros(n_ticks, dtype=bool), fault=np.zeros(n_ticks, dtype=bool),
    )

    for k in range(n_ticks):
        t = tr.t[k]
        calibrating = t < scenario.step_time
        if calibrating:
            calib_sum += x_last
            calib_count += 1
        elif calib_count > 0:
            offsets = calib_sum / calib_count
            calib_count = 0

        f_d_active = np.zeros(3) if calibrating else scenario.f_d
        cfg_tick = replace(cfg, f_d=f_d_active)

        frames = chain_frames(ps.q, plant.chain)
        if open_loop:
            f_hat = np.zeros(3)          # unused: k_i is zero
            f_hat_logged = np.full(3, np.nan)
        elif model is None:
            f_hat = f_last + scenario.estimator_bias   # perfect (optionally biased)
            f_hat_logged = f_hat
        elif calibrating:
            f_hat = np.zeros(3)          # no contact by construction
            f_hat_logged = f_hat
        else:
            x_std = (x_last - offsets) / model.x_scale
            f_s0 = models_mod.predict(model, x_std, plant.layout)
            r0f = frames[3].T @ plant.r_b_f
            f_hat = r0f.T @ f_s0 + scenario.estimator_bias
            f_hat_logged = f_hat

        jac_f = plant.r_b_f.T @ jacobian_from_frames(frames)
        tau_g = gravity_from_frames(frames, plant.chain.link_masses, plant.gravity)
        tau, st = control_law(ps.q, ps.qd, f_hat, cfg_tick, st, jac_f, tau_g)

        tr.q[k], tr.qd[k] = ps.q, ps.qd
        tr.tau[k] = tau
        tr.f_true[k] = f_last
        tr.f_hat[k] = f_hat_logged
        tr.f_d[k] = f_d_active
        tr.integral[k] = st.integral
        tr.saturated[k] = st.saturation_active
        tr.fault[k] = st.fault

        for i in range(steps_per_tick):
            last = i == steps_per_tick - 1
            ps, f_f, x = step_plant(ps, tau, inner_dt, plant, rng, sample_sensor=last)
            if last:
                f_last, x_last = f_f, x

    return tr
