"""Command-line front end: synth | preprocess | train | eval | bench | sim.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every output file records the toolkit version and the config hash, either
in its .meta.json or as a leading comment line.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from . import __version__, evaluation, models, pipeline, synth
from .config import ConfigError, ToolConfig
from .control import Scenario, build_rig, run_closed_loop

CONTROLLER_CHOICES = ("openloop", "perfect") + models.KINDS


def _meta_line(cfg: ToolConfig) -> str:
    return f"# tactforce {__version__} config={cfg.source_hash}\n"


def cmd_synth(cfg: ToolConfig, args) -> int:
    layout = cfg.layout()
    chain = cfg.chain()
    params = cfg.sensor_params(layout, seed=args.seed)
    script = cfg.script(args.script, layout, seed=args.seed)
    rec = synth.generate_recording(script, layout, params, chain)
    base = pipeline.recording_path_base(args.out)
    pipeline.write_recording(rec, base, extra_meta=cfg.meta())
    n = len(rec.channels["activities"].t)
    print(f"wrote {base}.csv ({n} samples) and {base}.meta.json")
    return 0


def cmd_preprocess(cfg: ToolConfig, args) -> int:
    base = pipeline.recording_path_base(args.rec)
    rec = pipeline.read_recording(base)
    ds = pipeline.preprocess(rec, fc=cfg.cutoff_hz())
    ds.save(args.out, extra_meta=cfg.meta())
    print(f"wrote {args.out}.csv ({len(ds)} rows, {ds.X.shape[1]} activity columns)")
    return 0


def _load_dataset(path: str) -> pipeline.Dataset:
    base = pipeline.recording_path_base(path)
    return pipeline.Dataset.load(base)


def cmd_train(cfg: ToolConfig, args) -> int:
    ds = _load_dataset(args.data)
    layout = cfg.layout_for(ds.array_id)
    kind = args.model
    if kind in models.LINEAR_KINDS:
        damping = args.damping if args.damping is not None else (
            cfg.damping() if kind == "m3l" else 0.0)
        model = models.fit_least_squares(ds, kind, layout, damping=damping)
        curve = None
    else:
        spec = cfg.train_spec(seed=args.seed, epochs=args.epochs)
        model, curve = models.train_adam(ds, kind, layout, spec)
    models.save_model(model, args.out, extra_meta=cfg.meta())

    preds = models.predict_batch(model, ds.X, layout)
    report = evaluation.evaluate_predictions(ds.forces_physical(), preds)
    print(f"model {kind} ({models.param_count(kind, ds.n)} parameters) -> {args.out}")
    if curve is not None:
        print(f"training loss {curve[0]:.6f} -> {curve[-1]:.6f} over {len(curve)} epochs")
    print(f"training-set e_r {report.e_r_mean:.2f} % "
          f"({report.n_used} used, {report.n_excluded} excluded)")
    return 0


def cmd_eval(cfg: ToolConfig, args) -> int:
    model = models.load_model(args.model)
    if (args.data is None) == (args.rec is None):
        raise ConfigError("pass exactly one of --data (offline) or --rec (streaming)")
    if args.data:
        ds = _load_dataset(args.data)
        layout = cfg.layout_for(ds.array_id)
        preds = models.predict_batch(model, ds.X, layout)
        report = evaluation.evaluate_predictions(ds.forces_physical(), preds)
    else:
        rec = pipeline.read_recording(pipeline.recording_path_base(args.rec))
        layout = cfg.layout_for(rec.array_id)
        rec = pipeline.filter_recording(rec, cfg.cutoff_hz())
        rec = pipeline.resample_align(rec)
        rec = pipeline.project_recording(rec)
        rec = pipeline.remove_offsets(rec)
        report, trace = evaluation.stream_eval(model, rec, layout)
        if args.trace:
            with open(args.trace, "w") as fh:
                fh.write(_meta_line(cfg))
                fh.write(evaluation.trace_csv(trace))
    print(f"e_r {report.e_r_mean:.2f} +/- {report.e_r_std:.2f} %  "
          f"magnitude {report.mag_err_mean:.3f} N  angle {report.ang_err_mean:.2f} deg  "
          f"({report.n_used} used, {report.n_excluded} excluded)")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(_meta_line(cfg))
            fh.write("e_r_mean_pct,e_r_std_pct,mag_err_mean_N,ang_err_mean_deg,"
                     "n_used,n_excluded\n")
            fh.write(f"{report.e_r_mean:.17g},{report.e_r_std:.17g},"
                     f"{report.mag_err_mean:.17g},{report.ang_err_mean:.17g},"
                     f"{report.n_used},{report.n_excluded}\n")
    return 0


def cmd_bench(cfg: ToolConfig, args) -> int:
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    valid = models.KINDS + ("perfect",)
    for kind in kinds:
        if kind not in valid:
            raise ConfigError(f"unknown model kind {kind!r}; valid kinds: {', '.join(valid)}")
    ds = _load_dataset(args.data)
    layout = cfg.layout_for(ds.array_id)
    seed0 = args.seed if args.seed is not None else cfg.split_seed()
    seeds = range(seed0, seed0 + 8)
    spec = cfg.train_spec()
    rows = evaluation.benchmark(ds, kinds, layout, seeds,
                                damping=cfg.damping(), train_spec=spec)
    print(evaluation.bench_table(rows))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(_meta_line(cfg))
            fh.write(evaluation.bench_csv(rows))
        print(f"wrote {args.out}")
    return 0


def _sim_model(cfg: ToolConfig, args, kind: str) -> models.ForceModel:
    """Load the estimator, or train one on rigid-regime data end to end."""
    if args.model:
        return models.load_model(args.model)
    sim = cfg.sim_section()
    layout = cfg.layout()
    chain = cfg.chain()
    params = cfg.sensor_params(layout)
    script = cfg.script(sim.get("train_script", "default"), layout)
    rec = synth.generate_recording(script, layout, params, chain)
    ds = pipeline.preprocess(rec, fc=cfg.cutoff_hz())
    if kind in models.LINEAR_KINDS:
        damping = cfg.damping() if kind == "m3l" else 0.0
        return models.fit_least_squares(ds, kind, layout, damping=damping)
    model, _ = models.train_adam(ds, kind, layout, cfg.train_spec())
    return model


def cmd_sim(cfg: ToolConfig, args) -> int:
    sim = cfg.sim_section()
    contact = args.contact or sim.get("contact", "rigid")
    layout = cfg.layout()
    plant, ctrl = build_rig(contact, layout=layout,
                            sensor_params=cfg.sensor_params(layout),
                            chain=cfg.chain())
    ctrl = dataclasses.replace(ctrl, **cfg.controller_overrides())

    estimator: str | models.ForceModel
    if args.controller in ("openloop", "perfect"):
        estimator = args.controller
    else:
        estimator = _sim_model(cfg, args, args.controller)

    scenario = Scenario(
        estimator=estimator, contact_regime=contact, f_d=ctrl.f_d,
        duration=float(sim.get("duration", 16.0)),
        step_time=float(sim.get("step_time", 1.5)),
        seed=args.seed if args.seed is not None else int(sim.get("seed", 0)),
    )
    trace = run_closed_loop(scenario, plant, ctrl)
    with open(args.out, "w") as fh:
        fh.write(_meta_line(cfg))
        fh.write(trace.to_csv())

    summary = trace.summary(window=float(sim.get("window", 13.0)))
    if args.controller == "openloop":
        print(f"real_error {summary['real_error']:.4f} N  "
              f"(est_error n/a, track_error n/a)")
    else:
        print(f"est_error {summary['est_error']:.4f} N  "
              f"track_error {summary['track_error']:.4f} N  "
              f"real_error {summary['real_error']:.4f} N")
    print(f"saturation fraction {summary['saturation_fraction']:.3f}; wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tactforce",
        description="Tactile-array force estimation and closed-loop control toolkit")
    parser.add_argument("--version", action="version", version=f"tactforce {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic recording")
    p.add_argument("--config", default=None)
    p.add_argument("--script", default="default")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="recording -> standardized dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--rec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="fit or train one model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, choices=models.KINDS)
    p.add_argument("--damping", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model: offline (--data) or streaming (--rec)")
    p.add_argument("--config", default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--rec", default=None)
    p.add_argument("--trace", default=None, help="per-sample trace CSV (streaming mode)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="8-split benchmark table")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--kinds", default="m1,m2,m3,m3l,m4,m5")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sim", help="closed-loop simulation")
    p.add_argument("--config", default=None)
    p.add_argument("--controller", required=True, choices=CONTROLLER_CHOICES)
    p.add_argument("--contact", choices=("rigid", "soft"), default=None)
    p.add_argument("--model", default=None, help="trained model file (else train one)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sim)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = ToolConfig.load(args.config)
        return args.func(cfg, args)
    except (ConfigError, models.InsufficientData, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
