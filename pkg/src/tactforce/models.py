"""The five force estimators: prediction, fitting, training, serialization.

Kinds:

* ``m1``  linear in the common-frame activity sum z (12 parameters)
* ``m2``  linear in the quadratic extension of z (30 parameters)
* ``m3``  linear in the raw 3n activities (9n + 3 parameters)
* ``m3l`` same as m3 but fitted with damped least squares
* ``m4``  one-hidden-layer perceptron, 3n -> 16 -> 3 (48n + 67 parameters;
  the count follows from the layer shapes, published tallies differ)
* ``m5``  convolutional grid model (2479 parameters on the 6x5 grid)

Models consume standardized activities and store the standardization
scales, so ``predict`` always reports forces in newtons.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import nets
from .geometry import ArrayLayout, project_to_common_batch
from .pipeline import Dataset

KINDS = ("m1", "m2", "m3", "m3l", "m4", "m5")
LINEAR_KINDS = ("m1", "m2", "m3", "m3l")
NET_KINDS = ("m4", "m5")


class InsufficientData(ValueError):
    """Too few samples for the requested fit or training run."""


@dataclass(frozen=True)
class LayoutRef:
    array_id: str
    n: int
    h: int
    w: int

    @classmethod
    def of(cls, layout: ArrayLayout) -> "LayoutRef":
        return cls(layout.array_id, layout.n, layout.grid[0], layout.grid[1])

    def check(self, layout: ArrayLayout) -> None:
        if layout.n != self.n or layout.grid != (self.h, self.w):
            raise ValueError(
                f"model was built for n={self.n} grid=({self.h},{self.w}), "
                f"got n={layout.n} grid={layout.grid}")


@dataclass
class TrainSpec:
    """Optimiser settings for the network models."""

    batch_size: int = 256
    learning_rate: float = 2.5e-4
    epochs: int = 80
    seed: int = 0

    def __post_init__(self):
        if self.batch_size <= 0 or self.learning_rate <= 0.0 or self.epochs <= 0:
            raise ValueError("batch size, learning rate and epochs must be positive")


@dataclass
class ForceModel:
    """One fitted estimator: kind tag, flat parameters, scales."""

    kind: str
    theta: np.ndarray
    layout_ref: LayoutRef
    x_scale: np.ndarray
    f_scale: np.ndarray
    damping: float = 0.0
    buffers: dict = field(default_factory=dict)  # m5 batch-norm running stats
    _net: nets.Sequential | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; choose from {KINDS}")
        self.theta = np.asarray(self.theta, dtype=float)
        self.x_scale = np.asarray(self.x_scale, dtype=float)
        self.f_scale = np.asarray(self.f_scale, dtype=float)
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("model parameters contain non-finite values")
        expected = param_count(self.kind, self.layout_ref.n)
        if self.theta.shape != (expected,):
            raise ValueError(f"{self.kind} expects {expected} parameters, "
                             f"got {self.theta.shape}")

    def net(self) -> nets.Sequential:
        """The underlying network (m4/m5 only), rebuilt lazily and cached."""
        if self.kind not in NET_KINDS:
            raise ValueError(f"{self.kind} has no network form")
        if self._net is None:
            rng = np.random.default_rng(0)
            if self.kind == "m4":
                net = nets.build_mlp(self.layout_ref.n, rng)
            else:
                net = nets.build_cnn(self.layout_ref.n, self.layout_ref.h,
                                     self.layout_ref.w, rng)
            net.set_flat(self.theta)
            if self.buffers:
                net.set_buffers(self.buffers)
            self._net = net
        return self._net


def param_count(kind: str, n: int) -> int:
    """Number of trainable parameters of a model kind on an n-taxel array."""
    if kind == "m1":
        return 12
    if kind == "m2":
        return 30
    if kind in ("m3", "m3l"):
        return 9 * n + 3
    if kind == "m4":
        return 48 * n + 67
    if kind == "m5":
        # 168 + 660 + 24 + 1176 + 400 + 51 on any grid >= 2x2
        return 2479
    raise ValueError(f"unknown model kind {kind!r}")


def featurize_m2(z) -> np.ndarray:
    """Quadratic extension [z1, z2, z3, z1^2, z2^2, z3^2, z1z2, z2z3, z1z3]."""
    z1, z2, z3 = np.asarray(z, dtype=float)
    return np.array([z1, z2, z3, z1 * z1, z2 * z2, z3 * z3, z1 * z2, z2 * z3, z1 * z3])


def _featurize_m2_batch(z: np.ndarray) -> np.ndarray:
    z1, z2, z3 = z[:, 0], z[:, 1], z[:, 2]
    return np.column_stack([z1, z2, z3, z1 * z1, z2 * z2, z3 * z3,
                            z1 * z2, z2 * z3, z1 * z3])


def regressors(kind: str, x_rows: np.ndarray, layout: ArrayLayout) -> np.ndarray:
    """Feature matrix (without the constant column) for the linear kinds."""
    if kind == "m1":
        return project_to_common_batch(x_rows, layout)
    if kind == "m2":
        return _featurize_m2_batch(project_to_common_batch(x_rows, layout))
    if kind in ("m3", "m3l"):
        return np.asarray(x_rows, dtype=float)
    raise ValueError(f"{kind} is not a linear-regression kind")


def _split_linear_theta(model: ForceModel) -> tuple[np.ndarray, np.ndarray]:
    p_feat = {"m1": 3, "m2": 9}.get(model.kind, 3 * model.layout_ref.n)
    a = model.theta[: 3 * p_feat].reshape(3, p_feat)
    b = model.theta[3 * p_feat:]
    return a, b


def predict(model: ForceModel, x, layout: ArrayLayout) -> np.ndarray:
    """Estimated force (N) for one standardized activity vector."""
    return predict_batch(model, np.asarray(x, dtype=float)[None, :], layout)[0]


def predict_batch(model: ForceModel, x_rows: np.ndarray, layout: ArrayLayout) -> np.ndarray:
    """Row-wise prediction; input standardized activities, output newtons."""
    model.layout_ref.check(layout)
    x_rows = np.asarray(x_rows, dtype=float)
    if x_rows.ndim != 2 or x_rows.shape[1] != 3 * layout.n:
        raise ValueError(f"expected (N, {3 * layout.n}) activities, got {x_rows.shape}")
    if model.kind in LINEAR_KINDS:
        a, b = _split_linear_theta(model)
        feats = regressors(model.kind, x_rows, layout)
        std_pred = feats @ a.T + b
    else:
        std_pred = model.net().forward(x_rows, train=False)
    return std_pred * model.f_scale


def fit_least_squares(train: Dataset, kind: str, layout: ArrayLayout,
                      damping: float = 0.0) -> ForceModel:
    """Least-squares / ridge fit of a linear kind.

    Solves (Phi^T Phi + damping * I) theta = Phi^T F per output axis via a
    numerically stable route: plain SVD least squares when damping is zero,
    otherwise the square-root-augmented system.  The constant column is
    damped like every other one.
    """
    if kind not in LINEAR_KINDS:
        raise ValueError(f"{kind} is not fitted by least squares")
    if damping < 0.0:
        raise ValueError("damping must be non-negative")
    feats = regressors(kind, train.X, layout)
    phi = np.hstack([feats, np.ones((len(feats), 1))])
    n_rows, p = phi.shape
    if n_rows < p + 1:
        raise InsufficientData(f"{kind} needs at least {p + 1} samples, got {n_rows}")

    if damping == 0.0:
        sol, _, rank, _ = scipy.linalg.lstsq(phi, train.F)
        if rank < p:
            raise ValueError(
                f"regressor matrix is rank deficient ({rank} < {p}); "
                "fit with damping > 0")
    else:
        phi_aug = np.vstack([phi, np.sqrt(damping) * np.eye(p)])
        rhs = np.vstack([train.F, np.zeros((p, 3))])
        sol, _, _, _ = scipy.linalg.lstsq(phi_aug, rhs)

    a = sol[:-1].T          # (3, p-1)
    b = sol[-1]             # (3,)
    return ForceModel(kind=kind, theta=np.concatenate([a.ravel(), b]),
                      layout_ref=LayoutRef.of(layout),
                      x_scale=train.x_scale.copy(), f_scale=train.f_scale.copy(),
                      damping=damping)


def train_adam(train: Dataset, kind: str, layout: ArrayLayout,
               spec: TrainSpec | None = None) -> tuple[ForceModel, list[float]]:
    """Mini-batch Adam training of m4/m5; returns the model and loss curve."""
    if kind not in NET_KINDS:
        raise ValueError(f"{kind} is not trained with Adam")
    spec = spec or TrainSpec()
    if len(train) < spec.batch_size:
        raise InsufficientData(
            f"need at least one full batch ({spec.batch_size}), got {len(train)}")
    rng = np.random.default_rng(spec.seed)
    if kind == "m4":
        net = nets.build_mlp(layout.n, rng)
    else:
        net = nets.build_cnn(layout.n, layout.grid[0], layout.grid[1], rng)
    curve = nets.train_minibatch(net, train.X, train.F, epochs=spec.epochs,
                                 batch_size=spec.batch_size,
                                 learning_rate=spec.learning_rate, seed=spec.seed)
    model = ForceModel(kind=kind, theta=net.get_flat(), layout_ref=LayoutRef.of(layout),
                       x_scale=train.x_scale.copy(), f_scale=train.f_scale.copy(),
                       buffers=net.get_buffers())
    model._net = net
    return model, curve


def save_model(model: ForceModel, path: str, extra_meta: dict | None = None) -> None:
    obj = {
        "kind": model.kind,
        "layout_ref": {"array_id": model.layout_ref.array_id, "n": model.layout_ref.n,
                       "h": model.layout_ref.h, "w": model.layout_ref.w},
        "damping": model.damping,
        "x_scale": model.x_scale.tolist(),
        "f_scale": model.f_scale.tolist(),
        "theta": model.theta.tolist(),
        "buffers": model.buffers,
    }
    if model.kind in NET_KINDS:
        obj["shapes"] = model.net().shape_manifest()
    if extra_meta:
        obj["meta"] = extra_meta
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)


def load_model(path: str) -> ForceModel:
    with open(path) as fh:
        obj = json.load(fh)
    ref = obj["layout_ref"]
    return ForceModel(
        kind=obj["kind"], theta=np.array(obj["theta"], dtype=float),
        layout_ref=LayoutRef(ref["array_id"], int(ref["n"]), int(ref["h"]), int(ref["w"])),
        x_scale=np.array(obj["x_scale"], dtype=float),
        f_scale=np.array(obj["f_scale"], dtype=float),
        damping=float(obj.get("damping", 0.0)),
        buffers=obj.get("buffers", {}),
    )
