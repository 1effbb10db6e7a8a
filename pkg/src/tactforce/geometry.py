"""Sensor-array frame bookkeeping and the 4-DOF finger kinematic chain.

Conventions used throughout:

* ``S0`` is the common frame attached to the last rigid link of the finger;
  every taxel ``i`` reports a 3-axis activity in its own local frame and
  ``rotations[i]`` maps that local vector into ``S0``.
* The flat activity vector ``x`` stacks taxels consecutively,
  ``x = (x_0x, x_0y, x_0z, x_1x, ...)``, length ``3n``.
* The finger chain is a serial 4R arm: joint ``j`` rotates about
  ``joint_axes[j]`` (expressed in the frame reached so far), then the frame
  translates ``link_lengths[j]`` along its local +x axis.  Link ``j``'s
  centre of mass sits at ``link_coms[j]`` in that post-rotation frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-9
AXIS_TOL = 1e-12


class ShapeError(ValueError):
    """An input array does not have the dimensions the operation requires."""


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis and an angle in radians."""
    axis = np.asarray(axis, dtype=float)
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def check_rotation(r: np.ndarray, tol: float = ORTHO_TOL) -> None:
    """Raise if ``r`` is not a proper rotation (orthogonal, det +1)."""
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        raise ShapeError(f"rotation must be 3x3, got {r.shape}")
    err = np.max(np.abs(r.T @ r - np.eye(3)))
    if err >= tol:
        raise ValueError(f"matrix is not orthogonal (max |R^T R - I| = {err:.3e})")
    if np.linalg.det(r) < 0.0:
        raise ValueError("matrix has negative determinant (improper rotation)")


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion; normalised first."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(r) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a rotation matrix, w >= 0."""
    r = np.asarray(r, dtype=float)
    t = np.trace(r)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + r[i, i] - r[j, j] - r[k, k], 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation plus translation; maps points from the local frame out."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))
        check_rotation(self.rotation)
        if self.translation.shape != (3,):
            raise ShapeError(f"translation must be a 3-vector, got {self.translation.shape}")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, p) -> np.ndarray:
        return self.rotation @ np.asarray(p, dtype=float) + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class ArrayLayout:
    """Geometry of one tactile array: grid shape, taxel frames and positions."""

    array_id: str
    n: int
    grid: tuple[int, int]
    rotations: np.ndarray      # (n, 3, 3), taxel-local -> S0
    taxel_positions: np.ndarray  # (n, 3), metres in S0

    def __post_init__(self):
        object.__setattr__(self, "rotations", np.asarray(self.rotations, dtype=float))
        object.__setattr__(self, "taxel_positions",
                           np.asarray(self.taxel_positions, dtype=float))
        h, w = self.grid
        if h <= 0 or w <= 0 or h * w != self.n:
            raise ValueError(f"grid {self.grid} incompatible with n={self.n}")
        if self.rotations.shape != (self.n, 3, 3):
            raise ShapeError(f"rotations must be ({self.n}, 3, 3), got {self.rotations.shape}")
        if self.taxel_positions.shape != (self.n, 3):
            raise ShapeError(f"positions must be ({self.n}, 3), got {self.taxel_positions.shape}")
        for r in self.rotations:
            check_rotation(r)

    def grid_cell(self, i: int) -> tuple[int, int]:
        """Grid cell (row, col) of taxel ``i``: row-major, i.e. (i // w, i % w)."""
        return divmod(i, self.grid[1])

    def to_json(self) -> dict:
        return {
            "array_id": self.array_id,
            "n": self.n,
            "h": self.grid[0],
            "w": self.grid[1],
            "quaternions": [matrix_to_quat(r).tolist() for r in self.rotations],
            "positions": self.taxel_positions.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ArrayLayout":
        rots = np.array([quat_to_matrix(q) for q in obj["quaternions"]])
        return cls(array_id=obj["array_id"], n=int(obj["n"]),
                   grid=(int(obj["h"]), int(obj["w"])),
                   rotations=rots, taxel_positions=np.array(obj["positions"], dtype=float))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "ArrayLayout":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _flat_layout(array_id: str, h: int, w: int, pitch: float = 0.0047) -> ArrayLayout:
    n = h * w
    rows, cols = np.divmod(np.arange(n), w)
    pos = np.zeros((n, 3))
    pos[:, 0] = (rows - (h - 1) / 2.0) * pitch
    pos[:, 1] = (cols - (w - 1) / 2.0) * pitch
    return ArrayLayout(array_id, n, (h, w), np.tile(np.eye(3), (n, 1, 1)), pos)


def fingertip_layout() -> ArrayLayout:
    """Curved fingertip array: 30 taxels on a 6x5 grid wrapping a cap.

    Taxel frames are generated procedurally: rows pitch forward over the
    tip (0..70 deg about +y), columns roll around the finger axis
    (+/-36 deg about +x); each taxel's +z is the outward surface normal.
    """
    h, w = 6, 5
    n = h * w
    radius = 0.0085
    row_pitch = 0.0042
    rots = np.empty((n, 3, 3))
    pos = np.empty((n, 3))
    for i in range(n):
        r, c = divmod(i, w)
        wrap = np.deg2rad(70.0) * r / (h - 1)
        roll = np.deg2rad(18.0) * (c - (w - 1) / 2.0)
        rot = rotation_about([1.0, 0.0, 0.0], roll) @ rotation_about([0.0, 1.0, 0.0], wrap)
        rots[i] = rot
        normal = rot @ np.array([0.0, 0.0, 1.0])
        pos[i] = np.array([r * row_pitch, 0.0, 0.0]) + radius * normal
    return ArrayLayout("fingertip", n, (h, w), rots, pos)


def phalanx_layout() -> ArrayLayout:
    """Flat square phalanx array: 16 taxels on a 4x4 grid, common orientation."""
    return _flat_layout("phalanx", 4, 4)


def rect_layout() -> ArrayLayout:
    """Flat rectangular array: 24 taxels on a 6x4 grid, common orientation."""
    return _flat_layout("rect", 6, 4)


_PRESETS = {
    "fingertip": fingertip_layout,
    "phalanx": phalanx_layout,
    "rect": rect_layout,
}


def preset_layout(name: str) -> ArrayLayout:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown layout preset {name!r}; choose from {sorted(_PRESETS)}")


def project_to_common(x, layout: ArrayLayout) -> np.ndarray:
    """Sum of all taxel activities expressed in the common frame S0.

    ``x`` is the flat 3n activity vector; the result is
    ``sum_i rotations[i] @ x[3i:3i+3]``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (3 * layout.n,):
        raise ShapeError(f"expected a flat {3 * layout.n}-vector, got shape {x.shape}")
    triples = x.reshape(layout.n, 3)
    return np.einsum("nij,nj->i", layout.rotations, triples)


def project_to_common_batch(x_rows: np.ndarray, layout: ArrayLayout) -> np.ndarray:
    """Row-wise :func:`project_to_common` for an (N, 3n) matrix."""
    x_rows = np.asarray(x_rows, dtype=float)
    if x_rows.ndim != 2 or x_rows.shape[1] != 3 * layout.n:
        raise ShapeError(f"expected (N, {3 * layout.n}), got {x_rows.shape}")
    triples = x_rows.reshape(len(x_rows), layout.n, 3)
    return np.einsum("nij,bnj->bi", layout.rotations, triples)


@dataclass(frozen=True)
class FingerChain:
    """Serial 4R finger: geometry, masses and joint limits."""

    link_lengths: np.ndarray   # (4,) m
    link_masses: np.ndarray    # (4,) kg
    link_coms: np.ndarray      # (4, 3) m, local to each link frame
    joint_axes: np.ndarray     # (4, 3) unit vectors
    base_pose: RigidTransform
    joint_limits: np.ndarray   # (4, 2) rad

    def __post_init__(self):
        for name in ("link_lengths", "link_masses", "link_coms", "joint_axes", "joint_limits"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.link_lengths <= 0.0) or np.any(self.link_masses <= 0.0):
            raise ValueError("link lengths and masses must be strictly positive")
        norms = np.linalg.norm(self.joint_axes, axis=1)
        if np.any(np.abs(norms - 1.0) > AXIS_TOL):
            raise ValueError("joint axes must be unit length")
        if np.any(self.joint_limits[:, 0] > self.joint_limits[:, 1]):
            raise ValueError("joint limits must satisfy lo <= hi")
        # precomputed per-joint skew matrices; the frame walk runs at 1 kHz
        skew = np.zeros((4, 3, 3))
        skew[:, 0, 1] = -self.joint_axes[:, 2]
        skew[:, 0, 2] = self.joint_axes[:, 1]
        skew[:, 1, 0] = self.joint_axes[:, 2]
        skew[:, 1, 2] = -self.joint_axes[:, 0]
        skew[:, 2, 0] = -self.joint_axes[:, 1]
        skew[:, 2, 1] = self.joint_axes[:, 0]
        object.__setattr__(self, "_skew", skew)
        object.__setattr__(self, "_skew2", np.einsum("nij,njk->nik", skew, skew))
        offsets = np.zeros((4, 3))
        offsets[:, 0] = self.link_lengths
        object.__setattr__(self, "_link_offsets", offsets)

    @property
    def joint_count(self) -> int:
        return 4

    def clamp(self, q) -> tuple[np.ndarray, bool]:
        """Clamp joint angles to limits; also reports whether clamping occurred."""
        q = np.asarray(q, dtype=float)
        qc = np.clip(q, self.joint_limits[:, 0], self.joint_limits[:, 1])
        return qc, bool(np.any(qc != q))

    def to_json(self) -> dict:
        return {
            "link_lengths": self.link_lengths.tolist(),
            "link_masses": self.link_masses.tolist(),
            "link_coms": self.link_coms.tolist(),
            "joint_axes": self.joint_axes.tolist(),
            "base_quaternion": matrix_to_quat(self.base_pose.rotation).tolist(),
            "base_translation": self.base_pose.translation.tolist(),
            "joint_limits": self.joint_limits.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FingerChain":
        return cls(
            link_lengths=obj["link_lengths"],
            link_masses=obj["link_masses"],
            link_coms=obj["link_coms"],
            joint_axes=obj["joint_axes"],
            base_pose=RigidTransform(quat_to_matrix(obj["base_quaternion"]),
                                     np.array(obj["base_translation"], dtype=float)),
            joint_limits=obj["joint_limits"],
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "FingerChain":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def default_chain() -> FingerChain:
    """Index-finger-scale chain: one abduction joint (+z), three flexion (+y)."""
    lengths = np.array([0.055, 0.055, 0.045, 0.035])
    coms = np.column_stack([lengths / 2.0, np.zeros(4), np.zeros(4)])
    return FingerChain(
        link_lengths=lengths,
        link_masses=np.array([0.06, 0.06, 0.04, 0.03]),
        link_coms=coms,
        joint_axes=np.array([[0.0, 0.0, 1.0],
                             [0.0, 1.0, 0.0],
                             [0.0, 1.0, 0.0],
                             [0.0, 1.0, 0.0]]),
        base_pose=RigidTransform.identity(),
        joint_limits=np.array([[-2.5, 2.5]] * 4),
    )


@dataclass(frozen=True)
class FkResult:
    """Fingertip pose plus a flag set when the query exceeded joint limits."""

    pose: RigidTransform
    clamped: bool = False


def chain_frames(q, chain: FingerChain):
    """Joint origins/axes in the base frame plus link COMs and the tip pose.

    Returns ``(origins (4,3), axes (4,3), coms (4,3), tip_rot, tip_pos)``;
    out-of-limit angles are clamped silently.
    """
    q, _ = chain.clamp(q)
    sin, cos = np.sin(q), np.cos(q)
    local = (np.eye(3) + sin[:, None, None] * chain._skew
             + (1.0 - cos)[:, None, None] * chain._skew2)
    rot = chain.base_pose.rotation
    pos = chain.base_pose.translation
    origins = np.empty((4, 3))
    axes = np.empty((4, 3))
    coms = np.empty((4, 3))
    for j in range(4):
        origins[j] = pos
        axes[j] = rot @ chain.joint_axes[j]
        rot = rot @ local[j]
        coms[j] = pos + rot @ chain.link_coms[j]
        pos = pos + rot @ chain._link_offsets[j]
    return origins, axes, coms, rot, pos


def jacobian_from_frames(frames) -> np.ndarray:
    origins, axes, _, _, tip = frames
    return np.cross(axes, tip - origins).T


def gravity_from_frames(frames, masses: np.ndarray, g: np.ndarray) -> np.ndarray:
    origins, axes, coms, _, _ = frames
    weighted = masses[:, None] * coms
    tail_mc = np.cumsum(weighted[::-1], axis=0)[::-1]   # sum_{i>=j} m_i c_i
    tail_m = np.cumsum(masses[::-1])[::-1]
    arm = tail_mc - tail_m[:, None] * origins
    return np.cross(axes, arm) @ g


def forward_kinematics(q, chain: FingerChain) -> FkResult:
    """Fingertip pose in the hand base frame for joint angles ``q``."""
    _, clamped = chain.clamp(q)
    _, _, _, rot, pos = chain_frames(q, chain)
    return FkResult(RigidTransform(rot, pos), clamped)


def jacobian(q, chain: FingerChain) -> np.ndarray:
    """3x4 translation Jacobian of the fingertip, columns d(tip)/dq_j."""
    return jacobian_from_frames(chain_frames(q, chain))


def gravity_torque(q, chain: FingerChain, g) -> np.ndarray:
    """Joint torques from gravity: tau_j = sum_i m_i g . d(com_i)/dq_j.

    Equals the gradient of the potential-style scalar
    ``U(q) = sum_i m_i g . com_i(q)``; zero whenever ``g`` is zero.
    """
    g = np.asarray(g, dtype=float)
    return gravity_from_frames(chain_frames(q, chain), chain.link_masses, g)
