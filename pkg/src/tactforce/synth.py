"""Configurable generative sensor model plus scripted press trajectories.

The sensor model turns a contact state (force, moment about the normal,
contact point, surface curvatures, temperature) into raw taxel
activities.  Its structure is a Gaussian spatial footprint times a
per-taxel linear gain, followed by a soft tanh saturation knee, neighbour
coupling, a force-proportional tilt of the effective taxel frame,
temperature drift, a per-channel baseline, and i.i.d. Gaussian noise.
Every nonlinearity can be switched off independently, which is what the
tests rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (ArrayLayout, FingerChain, forward_kinematics,
                       matrix_to_quat)
from .pipeline import Channel, Recording

FOOTPRINT_CUTOFF = 5.0   # response is exactly zero beyond this many sigmas
GAMMA_REF = 25.0         # degC, reference temperature of the drift term


@dataclass(frozen=True)
class ContactState:
    """Everything the array can react to at one instant."""

    f: np.ndarray          # (3,) N, resultant force on the array in S0
    tau_n: float = 0.0     # N*m, moment about the surface normal at x_c
    x_c: np.ndarray = field(default_factory=lambda: np.zeros(3))  # (3,) m in S0
    kappa: np.ndarray = field(default_factory=lambda: np.zeros(2))  # (2,) 1/m
    gamma: float = GAMMA_REF  # degC

    def __post_init__(self):
        object.__setattr__(self, "f", np.asarray(self.f, dtype=float))
        object.__setattr__(self, "x_c", np.asarray(self.x_c, dtype=float))
        object.__setattr__(self, "kappa", np.asarray(self.kappa, dtype=float))
        if not np.all(np.isfinite(self.kappa)):
            raise ValueError("surface curvatures must be finite")


@dataclass(frozen=True)
class SensorModelParams:
    """Knobs of the generative model; one instance describes one array."""

    gains: np.ndarray            # (n, 3, 3) activity units per N
    spatial_sigma: float         # m, Gaussian footprint of contact influence
    saturation_scale: float      # activity units; np.inf disables the knee
    coupling_eps: float          # unitless cross-taxel leakage
    deform_gain: float           # rad/N tilt of the effective taxel frame
    temp_drift: float            # activity units per degC
    noise_sigma: float           # activity units
    baseline: np.ndarray         # (3n,) activity units
    seed: int = 0
    gamma_ref: float = GAMMA_REF

    def __post_init__(self):
        object.__setattr__(self, "gains", np.asarray(self.gains, dtype=float))
        object.__setattr__(self, "baseline", np.asarray(self.baseline, dtype=float))
        if self.spatial_sigma <= 0.0:
            raise ValueError("spatial_sigma must be positive")
        if self.saturation_scale <= 0.0:
            raise ValueError("saturation_scale must be positive")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be non-negative")


def default_params(layout: ArrayLayout, regime: str = "curved", seed: int = 0) -> SensorModelParams:
    """Parameter presets for the two qualitative regimes plus a linear one.

    ``curved`` uses heterogeneous per-taxel gains and a force-dependent
    frame tilt; ``flat`` is homogeneous with the tilt off but a saturation
    knee that bites inside the usual force range; ``linear`` switches every
    nonlinearity off (for superposition-style checks).
    """
    rng = np.random.default_rng(seed)
    base_gain = 40.0  # activity units per N
    aligned = np.einsum("nji->nij", layout.rotations) * base_gain  # C_i = g * R_i^T
    if regime == "curved":
        jitter = 0.35 * rng.standard_normal((layout.n, 3, 3))
        gains = np.einsum("nij,njk->nik", np.eye(3) + jitter, aligned)
        return SensorModelParams(
            gains=gains, spatial_sigma=0.006, saturation_scale=260.0,
            coupling_eps=0.05, deform_gain=0.03, temp_drift=0.8,
            noise_sigma=0.6, baseline=rng.uniform(5.0, 15.0, 3 * layout.n), seed=seed)
    if regime == "flat":
        return SensorModelParams(
            gains=aligned, spatial_sigma=0.006, saturation_scale=40.0,
            coupling_eps=0.02, deform_gain=0.0, temp_drift=0.8,
            noise_sigma=0.6, baseline=rng.uniform(5.0, 15.0, 3 * layout.n), seed=seed)
    if regime == "linear":
        return SensorModelParams(
            gains=aligned, spatial_sigma=0.006, saturation_scale=np.inf,
            coupling_eps=0.0, deform_gain=0.0, temp_drift=0.0,
            noise_sigma=0.0, baseline=np.zeros(3 * layout.n), seed=seed)
    raise ValueError(f"unknown regime {regime!r}; choose curved, flat or linear")


def grid_neighbors(h: int, w: int) -> list[list[int]]:
    """4-neighbourhood index lists for a row-major h x w grid."""
    out = []
    for i in range(h * w):
        r, c = divmod(i, w)
        nbr = []
        if r > 0:
            nbr.append(i - w)
        if r < h - 1:
            nbr.append(i + w)
        if c > 0:
            nbr.append(i - 1)
        if c < w - 1:
            nbr.append(i + 1)
        out.append(nbr)
    return out


_COUPLING_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _coupling_matrix(h: int, w: int) -> np.ndarray:
    """Neighbour-averaging matrix M so that leakage = eps * M @ response."""
    key = (h, w)
    if key not in _COUPLING_CACHE:
        m = np.zeros((h * w, h * w))
        for i, nbr in enumerate(grid_neighbors(h, w)):
            m[i, nbr] = 1.0 / len(nbr)
        _COUPLING_CACHE[key] = m
    return _COUPLING_CACHE[key]


def _rodrigues_batch(axes: np.ndarray, angle: float) -> np.ndarray:
    """Stack of rotation matrices about per-row unit axes by a common angle."""
    n = len(axes)
    k = np.zeros((n, 3, 3))
    k[:, 0, 1] = -axes[:, 2]
    k[:, 0, 2] = axes[:, 1]
    k[:, 1, 0] = axes[:, 2]
    k[:, 1, 2] = -axes[:, 0]
    k[:, 2, 0] = -axes[:, 1]
    k[:, 2, 1] = axes[:, 0]
    kk = np.einsum("nij,njk->nik", k, k)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * kk


def soft_saturate(a: np.ndarray, scale: float) -> np.ndarray:
    """Odd soft knee with |sat(a)| <= |a|; identity when scale is infinite."""
    if not np.isfinite(scale):
        return np.asarray(a, dtype=float)
    return scale * np.tanh(np.asarray(a, dtype=float) / scale)


def _spatial_weights(layout: ArrayLayout, c: ContactState, sigma: float) -> np.ndarray:
    """Gaussian footprint around x_c, squeezed by positive surface curvature.

    Hard cutoff at FOOTPRINT_CUTOFF sigmas keeps far contacts exactly silent.
    """
    d = layout.taxel_positions - c.x_c
    s1 = 1.0 + max(c.kappa[0], 0.0) * sigma
    s2 = 1.0 + max(c.kappa[1], 0.0) * sigma
    q = (d[:, 0] ** 2 * s1 + d[:, 1] ** 2 * s2 + d[:, 2] ** 2) / sigma ** 2
    w = np.exp(-0.5 * q)
    w[q > FOOTPRINT_CUTOFF ** 2] = 0.0
    return w


def sensor_response(c: ContactState, layout: ArrayLayout, p: SensorModelParams,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Raw taxel activities (flat 3n vector) for one contact state.

    Deterministic given the generator state; pass ``rng=None`` to draw no
    noise regardless of ``noise_sigma``.
    """
    n = layout.n
    weights = _spatial_weights(layout, c, p.spatial_sigma)
    tilt_angle = p.deform_gain * float(np.linalg.norm(c.f))

    normals = layout.rotations[:, :, 2]              # taxel outward +z in S0
    radial = layout.taxel_positions - c.x_c
    swirl = np.cross(normals, radial)                # azimuthal direction about x_c
    swirl_norm = np.linalg.norm(swirl, axis=1)
    ok = swirl_norm > 1e-12
    swirl_unit = np.zeros_like(swirl)
    swirl_unit[ok] = swirl[ok] / swirl_norm[ok, None]

    f_local = np.broadcast_to(c.f, (n, 3)).copy()
    if c.tau_n != 0.0:
        f_local = f_local + (c.tau_n / p.spatial_sigma) * swirl_unit
    pre = np.einsum("nij,nj->ni", p.gains, f_local)
    if tilt_angle != 0.0:
        tilt = _rodrigues_batch(swirl_unit, tilt_angle)  # identity rows where degenerate
        pre = np.einsum("nja,nj->na", tilt, pre)         # apply tilt transposed
    resp = soft_saturate(weights[:, None] * pre, p.saturation_scale)

    if p.coupling_eps != 0.0:
        resp = resp + p.coupling_eps * (_coupling_matrix(*layout.grid) @ resp)

    x = p.baseline + resp.reshape(-1) + p.temp_drift * (c.gamma - p.gamma_ref)
    if rng is not None and p.noise_sigma > 0.0:
        x = x + rng.normal(0.0, p.noise_sigma, 3 * n)
    return x


# ---------------------------------------------------------------------------
# Press scripts


@dataclass(frozen=True)
class Segment:
    """One force-profile segment of a press script.

    ``hold`` keeps magnitude mag_hi, ``ramp`` sweeps mag_lo -> mag_hi
    linearly, ``sine`` oscillates between them at ``freq`` Hz.  The contact
    point moves linearly from ``contact_start`` to ``contact_end``.
    """

    kind: str                 # hold | ramp | sine
    duration: float           # s
    direction: np.ndarray     # unit 3-vector in S0 (force on the array)
    mag_lo: float = 0.0       # N
    mag_hi: float = 0.0       # N
    freq: float = 0.5         # Hz, sine only
    contact_start: np.ndarray = field(default_factory=lambda: np.zeros(3))
    contact_end: np.ndarray | None = None
    tau_n: float = 0.0
    kappa: tuple[float, float] = (0.0, 0.0)
    gamma: float = GAMMA_REF

    def __post_init__(self):
        if self.kind not in ("hold", "ramp", "sine"):
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if self.duration <= 0.0:
            raise ValueError("segment duration must be positive")
        if self.mag_lo < 0.0 or self.mag_hi < 0.0:
            raise ValueError("magnitudes must be non-negative")
        d = np.asarray(self.direction, dtype=float)
        norm = np.linalg.norm(d)
        object.__setattr__(self, "direction", d / norm if norm > 0.0 else d)
        object.__setattr__(self, "contact_start", np.asarray(self.contact_start, dtype=float))
        end = self.contact_end if self.contact_end is not None else self.contact_start
        object.__setattr__(self, "contact_end", np.asarray(end, dtype=float))

    def magnitude(self, u: float) -> float:
        """Force magnitude at normalised segment time u in [0, 1)."""
        if self.kind == "hold":
            return self.mag_hi
        if self.kind == "ramp":
            return self.mag_lo + (self.mag_hi - self.mag_lo) * u
        phase = 2.0 * np.pi * self.freq * (u * self.duration)
        return self.mag_lo + (self.mag_hi - self.mag_lo) * 0.5 * (1.0 - np.cos(phase))

    def contact(self, u: float) -> np.ndarray:
        return self.contact_start + (self.contact_end - self.contact_start) * u

    def is_zero_force(self) -> bool:
        return self.mag_lo == 0.0 and self.mag_hi == 0.0


def zero_hold(duration: float, contact=None) -> Segment:
    return Segment("hold", duration, np.array([0.0, 0.0, -1.0]),
                   contact_start=np.zeros(3) if contact is None else contact)


@dataclass(frozen=True)
class PressScript:
    """A sequence of segments sampled at a fixed rate."""

    segments: tuple[Segment, ...]
    sample_rate: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if self.sample_rate <= 0.0:
            raise ValueError("sample_rate must be positive")
        if not self.segments:
            raise ValueError("a press script needs at least one segment")

    @property
    def duration(self) -> float:
        return float(sum(seg.duration for seg in self.segments))

    def starts_with_static_lead(self, min_len: float = 2.0) -> bool:
        first = self.segments[0]
        return first.is_zero_force() and first.duration >= min_len

    def zero_force_spans(self) -> list[tuple[float, float]]:
        spans, t = [], 0.0
        for seg in self.segments:
            if seg.is_zero_force():
                if spans and abs(spans[-1][1] - t) < 1e-12:
                    spans[-1] = (spans[-1][0], t + seg.duration)
                else:
                    spans.append((t, t + seg.duration))
            t += seg.duration
        return spans

    def state_at(self, t: float) -> tuple[Segment, float]:
        """Segment active at time t plus normalised local time u in [0, 1)."""
        acc = 0.0
        for k, seg in enumerate(self.segments):
            if t < acc + seg.duration or k == len(self.segments) - 1:
                u = np.clip((t - acc) / seg.duration, 0.0, 1.0)
                return seg, float(u)
            acc += seg.duration
        raise RuntimeError("unreachable")


def press_directions(center: np.ndarray, tilt_deg: float = 30.0) -> list[np.ndarray]:
    """The centre direction plus four tilts around it (unit vectors)."""
    center = np.asarray(center, dtype=float)
    center = center / np.linalg.norm(center)
    helper = np.array([1.0, 0.0, 0.0])
    if abs(center @ helper) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    u = np.cross(center, helper)
    u /= np.linalg.norm(u)
    v = np.cross(center, u)
    out = [center]
    ang = np.deg2rad(tilt_deg)
    for axis in (u, v, -u, -v):
        out.append(np.cos(ang) * center + np.sin(ang) * axis)
    return out


def press_script(layout: ArrayLayout, duration: float = 150.0, peak_force: float = 5.0,
                 sites: int = 4, lead: float = 2.5, seed: int = 0,
                 sample_rate: float = 100.0) -> PressScript:
    """Scripted stand-in for a human operator pressing the array.

    Visits ``sites`` contact points spread over the array, pressing along
    the local inward normal and four tilted directions with ramp / hold /
    sine profiles.  Starts with a ``lead`` seconds static segment for
    offset estimation.
    """
    rng = np.random.default_rng(seed)
    idx = np.linspace(0, layout.n - 1, sites).round().astype(int)
    segments = [zero_hold(lead)]
    budget = duration - lead
    # per direction: ramp + sine + a half-length release; the release keeps
    # filtered transitions between directions below the exclusion threshold
    press_len = budget / (sites * 5 * 2.5)
    for i in idx:
        point = layout.taxel_positions[i]
        # the measured force (finger on plate) points out of the array face
        outward = layout.rotations[i, :, 2]
        for direction in press_directions(outward):
            lo = float(rng.uniform(0.6, 1.2))
            hi = float(rng.uniform(0.55, 1.0)) * peak_force
            freq = float(rng.uniform(0.2, 0.6))
            segments.append(Segment("ramp", press_len, direction, lo, hi,
                                    contact_start=point))
            segments.append(Segment("sine", press_len, direction, lo, hi, freq=freq,
                                    contact_start=point))
            segments.append(zero_hold(press_len * 0.5, contact=point))
    return PressScript(tuple(segments), sample_rate)


def ramp_script(direction, peak: float, duration: float = 10.0, lead: float = 2.5,
                contact=None, sample_rate: float = 100.0) -> PressScript:
    """Lead-in plus a single linear ramp 0 -> peak along ``direction``."""
    contact = np.zeros(3) if contact is None else np.asarray(contact, dtype=float)
    return PressScript((
        zero_hold(lead, contact=contact),
        Segment("ramp", duration - lead, direction, 0.0, peak, contact_start=contact),
    ), sample_rate)


def generate_recording(script: PressScript, layout: ArrayLayout, p: SensorModelParams,
                       chain: FingerChain, q0=None, wiggle: float = 0.04,
                       f_noise_sigma: float = 0.0) -> Recording:
    """Run a press script through the sensor model into a raw Recording.

    The finger holds a nominal pose ``q0`` with a small deterministic joint
    wiggle so the S0-to-{F} rotation varies in time; recorded forces are
    stored in frame {F} together with the quaternion needed to project them
    back.  A leading static segment of at least 2 s is guaranteed (one is
    prepended when the script lacks it).
    """
    if not script.segments:
        raise ValueError("empty press script")
    if not script.starts_with_static_lead():
        script = PressScript((zero_hold(2.5),) + script.segments, script.sample_rate)

    rate = script.sample_rate
    n_samples = int(round(script.duration * rate))
    t = np.arange(n_samples) / rate
    rng = np.random.default_rng(p.seed)

    q0 = np.array([0.0, 0.5, 0.6, 0.4]) if q0 is None else np.asarray(q0, dtype=float)
    wf = np.array([0.11, 0.17, 0.23, 0.29])          # Hz, incommensurate wiggles
    phases = rng.uniform(0.0, 2.0 * np.pi, 4)
    q_traj = q0 + wiggle * np.sin(2.0 * np.pi * wf * t[:, None] + phases)

    threen = 3 * layout.n
    x = np.empty((n_samples, threen))
    f_f = np.empty((n_samples, 3))
    quats = np.empty((n_samples, 4))
    joints = np.empty((n_samples, 4))

    for k in range(n_samples):
        seg, u = script.state_at(t[k])
        mag = seg.magnitude(u)
        f_s0 = seg.direction * mag
        contact = ContactState(f=f_s0, tau_n=seg.tau_n, x_c=seg.contact(u),
                               kappa=np.asarray(seg.kappa, dtype=float), gamma=seg.gamma)
        x[k] = sensor_response(contact, layout, p, rng)

        r_b_s0 = forward_kinematics(q_traj[k], chain).pose.rotation
        r0f = r_b_s0.T  # frame {F} aligned with the hand base
        f_meas = r0f.T @ f_s0
        if f_noise_sigma > 0.0:
            f_meas = f_meas + rng.normal(0.0, f_noise_sigma, 3)
        f_f[k] = f_meas
        quats[k] = matrix_to_quat(r0f)
        joints[k] = q_traj[k]

    # trim span edges so filter ring-in around presses stays out of the means
    static = [(a + 0.3, b - 0.3) for a, b in script.zero_force_spans()
              if (b - 0.3) - (a + 0.3) >= 0.5]
    channels = {
        "activities": Channel(t.copy(), x),
        "forces": Channel(t.copy(), f_f),
        "transform": Channel(t.copy(), quats),
        "joints": Channel(t.copy(), joints),
    }
    return Recording(channels=channels, array_id=layout.array_id, n=layout.n,
                     grid=layout.grid, rate=rate, static_segments=static)
