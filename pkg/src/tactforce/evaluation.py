"""Error metrics, the 8-subset offline benchmark, and streaming evaluation."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import models as models_mod
from .geometry import ArrayLayout
from .pipeline import Dataset, Recording, split

EXCLUSION_NORM = 0.5   # N; samples with a smaller reference norm are excluded
AXIS_EPS = 1e-3        # N; per-axis cutoff below which an axis is skipped
ANGLE_EPS = 1e-6       # N; angular error undefined below this norm


@dataclass
class ErrorReport:
    """Aggregated estimation errors over one evaluation pass."""

    e_r_mean: float       # percent
    e_r_std: float        # percent
    mag_err_mean: float   # N
    ang_err_mean: float   # degrees
    n_used: int
    n_excluded: int


def relative_error(f_true, f_pred) -> float | None:
    """Per-axis relative error in percent, or None when the sample is excluded.

    Samples with a reference norm below 0.5 N are excluded.  Axes whose
    reference component is below 1e-3 N are skipped and the mean is taken
    over the remaining axes, which sidesteps the per-axis singularity.
    """
    f_true = np.asarray(f_true, dtype=float)
    f_pred = np.asarray(f_pred, dtype=float)
    if np.linalg.norm(f_true) < EXCLUSION_NORM:
        return None
    keep = np.abs(f_true) >= AXIS_EPS
    ratios = np.abs((f_true[keep] - f_pred[keep]) / f_true[keep])
    return float(ratios.mean() * 100.0)


def error_metrics(f_true, f_pred) -> tuple[float, float | None]:
    """(magnitude error in N, angular error in degrees or None if undefined).

    The angle uses atan2(|a x b|, a . b), which is exact for identical
    vectors and well conditioned near 0 and 180 degrees.
    """
    f_true = np.asarray(f_true, dtype=float)
    f_pred = np.asarray(f_pred, dtype=float)
    nt, np_ = np.linalg.norm(f_true), np.linalg.norm(f_pred)
    mag = float(abs(nt - np_))
    if nt < ANGLE_EPS or np_ < ANGLE_EPS:
        return mag, None
    angle = np.arctan2(np.linalg.norm(np.cross(f_true, f_pred)), f_true @ f_pred)
    return mag, float(np.degrees(angle))


def evaluate_predictions(f_true: np.ndarray, f_pred: np.ndarray) -> ErrorReport:
    """Aggregate the three metrics over matched rows of physical forces."""
    f_true = np.atleast_2d(np.asarray(f_true, dtype=float))
    f_pred = np.atleast_2d(np.asarray(f_pred, dtype=float))
    if f_true.shape != f_pred.shape:
        raise ValueError("prediction and reference shapes differ")
    rel, mags, angs = [], [], []
    for ft, fp in zip(f_true, f_pred):
        r = relative_error(ft, fp)
        if r is None:
            continue
        rel.append(r)
        mag, ang = error_metrics(ft, fp)
        mags.append(mag)
        if ang is not None:
            angs.append(ang)
    n_used = len(rel)
    return ErrorReport(
        e_r_mean=float(np.mean(rel)) if rel else 0.0,
        e_r_std=float(np.std(rel)) if rel else 0.0,
        mag_err_mean=float(np.mean(mags)) if mags else 0.0,
        ang_err_mean=float(np.mean(angs)) if angs else 0.0,
        n_used=n_used,
        n_excluded=len(f_true) - n_used,
    )


@dataclass
class BenchRow:
    """One benchmark line: a model kind averaged over the split seeds."""

    kind: str
    params: int
    e_r_mean: float
    e_r_std: float
    mag_err_mean: float
    ang_err_mean: float
    per_seed: list[float]


def _fit_for_kind(kind: str, train: Dataset, layout: ArrayLayout,
                  damping: float, spec: models_mod.TrainSpec | None):
    if kind == "m3l":
        return models_mod.fit_least_squares(train, kind, layout, damping=damping)
    if kind in models_mod.LINEAR_KINDS:
        return models_mod.fit_least_squares(train, kind, layout)
    model, _ = models_mod.train_adam(train, kind, layout, spec)
    return model


def benchmark(dataset: Dataset, kinds: list[str], layout: ArrayLayout,
              seeds, damping: float = 33.0,
              train_spec: models_mod.TrainSpec | None = None,
              train_fraction: float = 0.7) -> list[BenchRow]:
    """Refit every kind on each seeded 70/30 split and average the errors.

    ``kinds`` may include the diagnostic pseudo-kind ``perfect`` whose
    prediction is the reference force itself (a zero-error control row).
    """
    seeds = list(seeds)
    rows = []
    for kind in kinds:
        per_seed, mag_all, ang_all = [], [], []
        for seed in seeds:
            train, test = split(dataset, train_fraction, seed)
            f_true = test.forces_physical()
            if kind == "perfect":
                f_pred = f_true.copy()
            else:
                model = _fit_for_kind(kind, train, layout, damping, train_spec)
                f_pred = models_mod.predict_batch(model, test.X, layout)
            rep = evaluate_predictions(f_true, f_pred)
            per_seed.append(rep.e_r_mean)
            mag_all.append(rep.mag_err_mean)
            ang_all.append(rep.ang_err_mean)
        n_params = 0 if kind == "perfect" else models_mod.param_count(kind, dataset.n)
        rows.append(BenchRow(
            kind=kind, params=n_params,
            e_r_mean=float(np.mean(per_seed)), e_r_std=float(np.std(per_seed)),
            mag_err_mean=float(np.mean(mag_all)), ang_err_mean=float(np.mean(ang_all)),
            per_seed=per_seed,
        ))
    return rows


def bench_csv(rows: list[BenchRow]) -> str:
    out = io.StringIO()
    out.write("kind,params,e_r_mean_pct,e_r_std_pct,mag_err_mean_N,ang_err_mean_deg\n")
    for r in rows:
        out.write(f"{r.kind},{r.params},{r.e_r_mean:.17g},{r.e_r_std:.17g},"
                  f"{r.mag_err_mean:.17g},{r.ang_err_mean:.17g}\n")
    return out.getvalue()


def bench_table(rows: list[BenchRow]) -> str:
    lines = [f"{'model':<8}{'params':>8}{'e_r [%]':>16}{'mag [N]':>10}{'ang [deg]':>11}"]
    lines.append("-" * len(lines[0]))
    for r in rows:
        lines.append(f"{r.kind:<8}{r.params:>8}"
                     f"{r.e_r_mean:>9.2f} +/- {r.e_r_std:<5.2f}"
                     f"{r.mag_err_mean:>8.3f}{r.ang_err_mean:>11.2f}")
    return "\n".join(lines)


def trace_csv(trace: dict[str, np.ndarray]) -> str:
    """Per-sample trace (truth vs prediction) as CSV for external plotting."""
    out = io.StringIO()
    out.write("t,f_true_x,f_true_y,f_true_z,f_pred_x,f_pred_y,f_pred_z\n")
    for t, ft, fp in zip(trace["t"], trace["f_true"], trace["f_pred"]):
        row = np.concatenate([[t], ft, fp])
        out.write(",".join(f"{v:.17g}" for v in row) + "\n")
    return out.getvalue()


def stream_eval(model: models_mod.ForceModel, rec: Recording,
                layout: ArrayLayout) -> tuple[ErrorReport, dict[str, np.ndarray]]:
    """Sample-by-sample prediction over a preprocessed recording.

    The recording must already be offset-removed with forces in S0 and in
    physical units; activities are standardized on the fly with the model's
    own scales.  Returns the aggregate report and a per-sample trace.
    """
    model.layout_ref.check(layout)
    if "activities" not in rec.channels or "forces" not in rec.channels:
        raise ValueError("stream evaluation needs activities and forces channels")
    act, frc = rec.channels["activities"], rec.channels["forces"]
    if act.values.shape[1] != len(model.x_scale):
        raise ValueError(
            f"model scales cover {len(model.x_scale)} activity columns, "
            f"recording has {act.values.shape[1]}")
    x_std = act.values / model.x_scale
    preds = np.empty((len(x_std), 3))
    for k in range(len(x_std)):  # arrival order, no lookahead
        preds[k] = models_mod.predict(model, x_std[k], layout)
    report = evaluate_predictions(frc.values, preds)
    trace = {"t": act.t.copy(), "f_true": frc.values.copy(), "f_pred": preds}
    return report, trace
