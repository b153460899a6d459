"""Command-line entry point: ``geoproto <subcommand>``.

Exit codes: 0 success, 2 config error, 3 data error, 4 training divergence,
5 model/spec incompatibility.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .archive import read_header, save_model
from .config import RunConfig, load_config
from .errors import GeoProtoError
from .explain import render_report
from .grid import GridSpec, SynthPattern, save_dataset, synth_generate
from .pipeline import Run, ablation, parse_sample_id, run_from_model, run_pipeline

log = logging.getLogger("geoproto")


def _cfg(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "data", None):
        cfg.data = str(args.data)
    if args.seed is not None:
        cfg.model = dataclasses.replace(cfg.model, seed=args.seed)
    return cfg


def _workdir(args, default: str = ".") -> Path:
    return Path(getattr(args, "workdir", None) or default)


def cmd_synth(args) -> int:
    spec = GridSpec(m=args.rows, n=args.cols, T=args.intervals,
                    f_t=args.f_t, f_s=args.f_s, f_st=args.f_st)
    pattern = SynthPattern(name=args.pattern, background_rate=args.background_rate,
                           hotspot_multiplier=args.hotspot_multiplier, hotspot_prob=args.hotspot_prob)
    ds = synth_generate(args.seed if args.seed is not None else 0, spec, pattern)
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: {spec.m}x{spec.n}x{spec.T}, label prevalence {ds.Y[1:].mean():.4f}")
    return 0


def cmd_baseline(args) -> int:
    run = Run(_cfg(args), _workdir(args), threads=args.threads)
    path = run.stage_baseline()
    if args.out:
        Path(args.out).write_bytes(path.read_bytes())
    print(f"fitted {len(run.baselines)} global baselines -> {args.out or path}")
    return 0


def cmd_encode(args) -> int:
    run = Run(_cfg(args), _workdir(args), cache_dir=args.cache, threads=args.threads)
    info = run.stage_encode()
    note = " (cache hit, skipped)" if info["cache_hits"] == info["samples"] else ""
    print(f"encoded {info['samples']} samples into {run.cache_dir}{note}")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    run = Run(_cfg(args), _workdir(args, str(out.parent)), cache_dir=args.cache, threads=args.threads)
    model = run.stage_train(out)
    metrics = run.stage_eval(model, out=out.with_name(out.stem + ".metrics.json"))
    print(f"model -> {out} (best epoch {model.meta.get('epoch')}); "
          f"val acc {metrics['val']['accuracy']:.4f} f1 {metrics['val']['f1']:.4f}")
    return 0


def _from_model(args) -> Run:
    expect = load_config(args.config) if getattr(args, "config", None) else None
    return run_from_model(args.model, data=getattr(args, "data", None),
                          workdir=getattr(args, "workdir", None), cache_dir=getattr(args, "cache", None),
                          threads=args.threads, expect_config=expect)


def cmd_eval(args) -> int:
    run = _from_model(args)
    metrics = run.stage_eval(out=Path(args.out) if args.out else False)
    for split, m in metrics.items():
        print(f"{split:5s} " + " ".join(f"{k}={v:.4f}" for k, v in m.items()))
    return 0


def cmd_explain(args) -> int:
    run = _from_model(args)
    sample = run.find_sample(parse_sample_id(args.sample)) if args.sample else run.default_case()
    fmt = "json" if args.format in ("json", "json-like", "structured") else "text"
    body = render_report([run.explain(sample, top_n=args.top)], fmt)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_bytes(body)
    sys.stdout.write(body.decode())
    return 0


def cmd_project(args) -> int:
    run = _from_model(args)
    res = run.stage_project(hard=args.hard, out_dir=args.out)
    sys.stdout.write(render_report(res["projections"], "text").decode())
    if args.hard:
        delta = res["metric_delta"]
        print("hard projection validation delta: " + " ".join(f"{k}={v:+.4f}" for k, v in delta.items()))
        if args.save:
            save_model(res["model"], args.save)
    return 0


def cmd_maps(args) -> int:
    run = _from_model(args)
    maps = run.stage_maps(percentile=args.percentile, out_dir=args.out)
    print(f"wrote {len(maps)} similarity maps to {args.out or run.workdir / 'maps'}")
    return 0


def cmd_ablation(args) -> int:
    cfg = _cfg(args)
    rows = ablation(cfg, _workdir(args, "runs/ablation"), modes=args.modes.split(","),
                    runs=args.runs, threads=args.threads)
    print("mode      crs_ent  acc     prec    recall  f1")
    for r in rows:
        print(f"{r['mode']:8s}  {r['cross_entropy']:.4f}  {r['accuracy']:.4f}  {r['precision']:.4f}  "
              f"{r['recall']:.4f}  {r['f1']:.4f}")
    return 0


def cmd_all(args) -> int:
    cfg = _cfg(args)
    manifest = run_pipeline(cfg, _workdir(args, "runs/default"), threads=args.threads)
    test = manifest.get("metrics", {}).get("test", {})
    print(f"pipeline complete in {_workdir(args, 'runs/default')}; test "
          + " ".join(f"{k}={v:.4f}" for k, v in test.items()))
    return 0


def cmd_inspect(args) -> int:
    h = read_header(args.model)
    print(f"K={h['K']} D={h['D']} pooling={h['plan']['mode']} epoch={h['meta'].get('epoch')} "
          f"spec={h['concept_spec_hash'][:12]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config, or 'default'")
    common.add_argument("--seed", type=int, help="override the model / generator seed")
    common.add_argument("--threads", type=int, default=1, help="encoding workers")
    common.add_argument("--verbose", "-v", action="store_true")
    common.add_argument("--workdir", help="directory for run artifacts")

    p = argparse.ArgumentParser(prog="geoproto", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--rows", type=int, default=32)
    s.add_argument("--cols", type=int, default=32)
    s.add_argument("--intervals", type=int, default=40)
    s.add_argument("--pattern", default="hotspot", choices=["hotspot", "heterogeneous"])
    s.add_argument("--f-t", type=int, default=1)
    s.add_argument("--f-s", type=int, default=1)
    s.add_argument("--f-st", type=int, default=2)
    s.add_argument("--background-rate", type=float, default=2.0)
    s.add_argument("--hotspot-multiplier", type=float, default=5.0)
    s.add_argument("--hotspot-prob", type=float, default=0.01)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("baseline", parents=[common], help="fit global baselines")
    s.add_argument("--data")
    s.add_argument("--out")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("encode", parents=[common], help="encode samples into the concept cache")
    s.add_argument("--data")
    s.add_argument("--cache")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("train", parents=[common], help="train a prototype model")
    s.add_argument("--data")
    s.add_argument("--cache")
    s.add_argument("--out", default="model.gpn")
    s.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a model"),
                              ("explain", cmd_explain, "explain one case"),
                              ("project", cmd_project, "project prototypes onto training cases"),
                              ("maps", cmd_maps, "prototype similarity maps")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--model", required=True)
        s.add_argument("--data")
        s.add_argument("--cache")
        s.add_argument("--out")
        if name == "explain":
            s.add_argument("--sample", help="test-split index or 't,row,col'")
            s.add_argument("--top", type=int, default=10)
            s.add_argument("--format", default="text", choices=["text", "json", "json-like", "structured"])
        if name == "project":
            s.add_argument("--hard", action="store_true", help="overwrite prototypes with their projections")
            s.add_argument("--save", help="write the hard-projected model here")
        if name == "maps":
            s.add_argument("--percentile", type=float, default=1.0)
        s.set_defaults(func=func)

    s = sub.add_parser("ablation", parents=[common], help="compare pooling modes")
    s.add_argument("--data")
    s.add_argument("--modes", default="spatial,max,none")
    s.add_argument("--runs", type=int, default=1)
    s.set_defaults(func=cmd_ablation)

    s = sub.add_parser("all", parents=[common], help="run every stage")
    s.add_argument("--data")
    s.set_defaults(func=cmd_all)

    s = sub.add_parser("inspect", parents=[common], help="print a model archive summary")
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GeoProtoError as exc:
        stage = getattr(exc, "stage", args.command)
        print(f"geoproto {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
