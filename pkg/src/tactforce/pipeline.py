"""Signal processing for raw recordings.

Processing order mirrors the data-collection workflow: (1) zero-phase
low-pass filtering, (2) resampling onto one shared time grid, (3) force
projection into the array frame S0, (4) offset removal from static
segments, (5) per-column standardization, then train/test splitting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal

from .geometry import ShapeError, check_rotation, quat_to_matrix

AXIS_NAMES = ("x", "y", "z")
MIN_STATIC_LEN = 0.5   # s, shortest usable static segment
MIN_FILTER_LEN = 12    # samples, filter warm-up


@dataclass
class Channel:
    """One named time series with its own timestamp vector."""

    t: np.ndarray        # (N,) seconds, strictly increasing
    values: np.ndarray   # (N, k)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.t.ndim != 1 or len(self.t) != len(self.values):
            raise ShapeError("timestamps and values must have matching length")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0.0):
            raise ValueError("timestamps must be strictly increasing")

    def copy(self) -> "Channel":
        return Channel(self.t.copy(), self.values.copy())


@dataclass
class Recording:
    """Raw or partially processed multi-channel recording.

    Standard channel names: ``activities`` (3n), ``forces`` (3),
    ``transform`` (4, quaternion w,x,y,z for the frame-F-to-S0 rotation)
    and ``joints`` (4).
    """

    channels: dict[str, Channel]
    array_id: str
    n: int
    grid: tuple[int, int]
    rate: float
    static_segments: list[tuple[float, float]]
    offsets: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.rate <= 0.0:
            raise ValueError("nominal rate must be positive")

    def aligned(self) -> bool:
        ts = [ch.t for ch in self.channels.values()]
        return all(len(t) == len(ts[0]) and np.array_equal(t, ts[0]) for t in ts)

    def copy(self) -> "Recording":
        return replace(self, channels={k: c.copy() for k, c in self.channels.items()},
                       static_segments=list(self.static_segments),
                       offsets={k: v.copy() for k, v in self.offsets.items()})


def lowpass_zero_phase(values, fc: float, fs: float) -> np.ndarray:
    """Forward-backward 2nd-order Butterworth low-pass (zero phase lag).

    Reflective edge padding makes the DC gain exact on constant signals;
    the effective magnitude response is the squared Butterworth response.
    """
    values = np.asarray(values, dtype=float)
    if fc <= 0.0 or fs <= 0.0:
        raise ValueError("cutoff and sampling frequencies must be positive")
    if fc >= fs / 2.0:
        raise ValueError(f"cutoff {fc} Hz must lie below the Nyquist rate {fs / 2.0} Hz")
    n = values.shape[0]
    if n < MIN_FILTER_LEN:
        raise ValueError(f"signal too short to filter ({n} < {MIN_FILTER_LEN} samples)")
    b, a = signal.butter(2, fc, fs=fs)
    padlen = min(3 * max(int(round(fs / fc)), 3), n - 1)
    return signal.filtfilt(b, a, values, axis=0, padtype="even", padlen=padlen)


def filter_recording(rec: Recording, fc: float = 10.0) -> Recording:
    """Low-pass the signal channels (activities, forces); leave poses alone."""
    out = rec.copy()
    for name in ("activities", "forces"):
        if name in out.channels:
            ch = out.channels[name]
            fs = 1.0 / float(np.median(np.diff(ch.t))) if len(ch.t) > 1 else rec.rate
            ch.values = lowpass_zero_phase(ch.values, fc, fs)
    return out


def _align_quaternion_signs(q: np.ndarray) -> np.ndarray:
    q = q.copy()
    for k in range(1, len(q)):
        if q[k] @ q[k - 1] < 0.0:
            q[k] = -q[k]
    return q


def resample_align(rec: Recording, rate: float | None = None) -> Recording:
    """Linearly interpolate every channel onto one shared uniform grid.

    The grid spans the intersection of all channel time ranges.  Quaternion
    channels are sign-aligned before interpolation and renormalised after.
    """
    rate = rec.rate if rate is None else float(rate)
    if rate <= 0.0:
        raise ValueError("resampling rate must be positive")
    t0 = max(ch.t[0] for ch in rec.channels.values())
    t1 = min(ch.t[-1] for ch in rec.channels.values())
    if t1 <= t0:
        raise ValueError("channels do not overlap in time")
    grid = t0 + np.arange(int(np.floor((t1 - t0) * rate)) + 1) / rate

    out = rec.copy()
    out.rate = rate
    for name, ch in rec.channels.items():
        vals = ch.values
        if name == "transform":
            vals = _align_quaternion_signs(vals)
        res = np.column_stack([np.interp(grid, ch.t, vals[:, j])
                               for j in range(vals.shape[1])])
        if name == "transform":
            res /= np.linalg.norm(res, axis=1, keepdims=True)
        out.channels[name] = Channel(grid.copy(), res)
    return out


def project_force(f_f, r0f) -> np.ndarray:
    """Express a frame-{F} force in the array frame S0: returns ``r0f @ f_f``."""
    check_rotation(r0f)
    f_f = np.asarray(f_f, dtype=float)
    if f_f.shape != (3,):
        raise ShapeError(f"force must be a 3-vector, got {f_f.shape}")
    return np.asarray(r0f, dtype=float) @ f_f


def project_recording(rec: Recording) -> Recording:
    """Rotate the force channel into S0 using the transform channel.

    The transform channel is consumed (dropped) so the projection cannot be
    applied twice by accident.
    """
    if "transform" not in rec.channels or "forces" not in rec.channels:
        raise ValueError("projection needs both 'forces' and 'transform' channels")
    fch, qch = rec.channels["forces"], rec.channels["transform"]
    if not np.array_equal(fch.t, qch.t):
        raise ValueError("forces and transform are not on the same grid; resample first")
    rots = np.stack([quat_to_matrix(q) for q in qch.values])
    out = rec.copy()
    out.channels["forces"] = Channel(fch.t.copy(), np.einsum("nij,nj->ni", rots, fch.values))
    del out.channels["transform"]
    return out


def remove_offsets(rec: Recording) -> Recording:
    """Subtract per-column means taken over the union of static segments.

    Applies to every channel except quaternion-valued ``transform``;
    subtracting a mean from a unit quaternion would corrupt it.
    """
    segs = [(a, b) for a, b in rec.static_segments if b - a >= MIN_STATIC_LEN]
    if not segs:
        raise ValueError(f"no static segment of at least {MIN_STATIC_LEN} s available")
    out = rec.copy()
    for name, ch in out.channels.items():
        if name == "transform":
            continue
        mask = np.zeros(len(ch.t), dtype=bool)
        for a, b in segs:
            mask |= (ch.t >= a) & (ch.t <= b)
        if not mask.any():
            raise ValueError(f"static segments contain no samples of channel {name!r}")
        mean = ch.values[mask].mean(axis=0)
        ch.values = ch.values - mean
        out.offsets[name] = mean
    return out


def _activity_column_name(j: int) -> str:
    return f"x_{j // 3}_{AXIS_NAMES[j % 3]}"


@dataclass
class Dataset:
    """Standardized, model-ready data plus the scales to undo it."""

    X: np.ndarray          # (N, 3n) standardized activities
    F: np.ndarray          # (N, 3)  standardized forces
    x_scale: np.ndarray    # (3n,) activity units
    f_scale: np.ndarray    # (3,)  N
    x_offset: np.ndarray   # (3n,) activity units, from static segments
    f_offset: np.ndarray   # (3,)  N
    array_id: str
    n: int
    grid: tuple[int, int]

    def __post_init__(self):
        if len(self.X) != len(self.F) or len(self.X) == 0:
            raise ValueError("X and F must be non-empty with matching row counts")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.F))):
            raise ValueError("dataset contains non-finite entries")
        if np.any(self.x_scale <= 0.0) or np.any(self.f_scale <= 0.0):
            raise ValueError("scales must be strictly positive")

    def __len__(self) -> int:
        return len(self.X)

    def forces_physical(self) -> np.ndarray:
        return self.F * self.f_scale

    def activities_physical(self) -> np.ndarray:
        return self.X * self.x_scale

    def take(self, idx) -> "Dataset":
        return replace(self, X=self.X[idx], F=self.F[idx])

    def save(self, path_base: str, extra_meta: dict | None = None) -> None:
        header = ",".join([_activity_column_name(j) for j in range(self.X.shape[1])]
                          + [f"f_{a}" for a in AXIS_NAMES])
        np.savetxt(path_base + ".csv", np.hstack([self.X, self.F]),
                   delimiter=",", header=header, comments="", fmt="%.17g")
        meta = {
            "array_id": self.array_id, "n": self.n,
            "h": self.grid[0], "w": self.grid[1],
            "x_scale": self.x_scale.tolist(), "f_scale": self.f_scale.tolist(),
            "x_offset": self.x_offset.tolist(), "f_offset": self.f_offset.tolist(),
        }
        if extra_meta:
            meta.update(extra_meta)
        with open(path_base + ".meta.json", "w") as fh:
            json.dump(meta, fh, indent=1)

    @classmethod
    def load(cls, path_base: str) -> "Dataset":
        data = np.loadtxt(path_base + ".csv", delimiter=",", skiprows=1, ndmin=2)
        with open(path_base + ".meta.json") as fh:
            meta = json.load(fh)
        k = 3 * meta["n"]
        return cls(X=data[:, :k], F=data[:, k:k + 3],
                   x_scale=np.array(meta["x_scale"]), f_scale=np.array(meta["f_scale"]),
                   x_offset=np.array(meta["x_offset"]), f_offset=np.array(meta["f_offset"]),
                   array_id=meta["array_id"], n=meta["n"], grid=(meta["h"], meta["w"]))


def standardize(rec: Recording) -> Dataset:
    """Divide each activity/force column by its standard deviation.

    Means are not touched here; offset removal owns that step.  The scales
    are kept so predictions can always be mapped back to physical units.
    """
    for name in ("activities", "forces"):
        if name not in rec.channels:
            raise ValueError(f"standardize needs channel {name!r}")
    act, frc = rec.channels["activities"], rec.channels["forces"]
    if not np.array_equal(act.t, frc.t):
        raise ValueError("activities and forces are not aligned; resample first")

    x_scale = act.values.std(axis=0)
    f_scale = frc.values.std(axis=0)
    for j in np.flatnonzero(x_scale <= 1e-12):
        raise ValueError(f"zero-variance column {_activity_column_name(int(j))}")
    for j in np.flatnonzero(f_scale <= 1e-12):
        raise ValueError(f"zero-variance column f_{AXIS_NAMES[int(j)]}")

    threen = 3 * rec.n
    return Dataset(
        X=act.values / x_scale, F=frc.values / f_scale,
        x_scale=x_scale, f_scale=f_scale,
        x_offset=rec.offsets.get("activities", np.zeros(threen)),
        f_offset=rec.offsets.get("forces", np.zeros(3)),
        array_id=rec.array_id, n=rec.n, grid=rec.grid,
    )


def destandardize(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Physical-unit (X, F) for a standardized dataset (inverse of the scales)."""
    return ds.activities_physical(), ds.forces_physical()


def split(ds: Dataset, train_fraction: float = 0.7, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded uniformly-random row split; first ``floor(f*N)`` rows train."""
    if len(ds) < 10:
        raise ValueError("need at least 10 rows to split")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_train = int(np.floor(train_fraction * len(ds)))
    return ds.take(perm[:n_train]), ds.take(perm[n_train:])


def preprocess(rec: Recording, fc: float = 10.0, rate: float | None = None) -> Dataset:
    """Full chain: filter, resample, project forces, remove offsets, standardize."""
    out = filter_recording(rec, fc)
    out = resample_align(out, rate)
    if "transform" in out.channels:
        out = project_recording(out)
    out = remove_offsets(out)
    return standardize(out)


# ---------------------------------------------------------------------------
# Recording file pair: <name>.csv + <name>.meta.json


def recording_header(n: int) -> str:
    cols = ["t"]
    cols += [_activity_column_name(j) for j in range(3 * n)]
    cols += [f"f_{a}" for a in AXIS_NAMES]
    cols += ["q_w", "q_x", "q_y", "q_z"]
    cols += [f"q{j}" for j in range(4)]
    return ",".join(cols)


def write_recording(rec: Recording, path_base: str, extra_meta: dict | None = None) -> None:
    """Write the CSV + meta.json pair.  Channels must share one time grid."""
    if not rec.aligned():
        raise ValueError("recording channels are not aligned; resample_align first")
    required = ("activities", "forces", "transform", "joints")
    for name in required:
        if name not in rec.channels:
            raise ValueError(f"recording is missing channel {name!r}")
    t = rec.channels["activities"].t
    table = np.hstack([t[:, None]] + [rec.channels[name].values for name in required])
    np.savetxt(path_base + ".csv", table, delimiter=",",
               header=recording_header(rec.n), comments="", fmt="%.17g")
    meta = {
        "array_id": rec.array_id, "n": rec.n,
        "h": rec.grid[0], "w": rec.grid[1],
        "rate": rec.rate,
        "static_segments": [list(s) for s in rec.static_segments],
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(path_base + ".meta.json", "w") as fh:
        json.dump(meta, fh, indent=1)


def read_recording(path_base: str) -> Recording:
    with open(path_base + ".meta.json") as fh:
        meta = json.load(fh)
    data = np.loadtxt(path_base + ".csv", delimiter=",", skiprows=1, ndmin=2)
    n = int(meta["n"])
    t = data[:, 0]
    k = 1
    channels = {}
    for name, width in (("activities", 3 * n), ("forces", 3), ("transform", 4), ("joints", 4)):
        channels[name] = Channel(t.copy(), data[:, k:k + width])
        k += width
    return Recording(
        channels=channels, array_id=meta["array_id"], n=n,
        grid=(int(meta["h"]), int(meta["w"])), rate=float(meta["rate"]),
        static_segments=[tuple(s) for s in meta["static_segments"]],
    )


def recording_path_base(path: str) -> str:
    """Strip a trailing .csv/.meta.json so either file name addresses the pair."""
    for suffix in (".meta.json", ".csv"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path
