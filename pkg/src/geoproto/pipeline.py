"""Stage orchestration: synth -> baseline -> encode -> train -> eval -> project/explain/maps."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .aggregation import build_plan, stack_concepts
from .archive import load_model, save_model
from .config import RunConfig, config_from_dict
from .encoder import Encoder, counters, encode_corpus, fit_globals
from .errors import DataError, GeoProtoError, IncompatibleError
from .explain import (explain_case, project, render_report, similarity_maps, write_map)
from .grid import (GridDataset, extract_samples, load_dataset, save_dataset, split_samples,
                   synth_generate, window_at)
from .model import EncodedSet, PrototypeModel, evaluate, train
from .stats import feature_refs

log = logging.getLogger(__name__)

CACHE_ENV = "GEOPROTO_CACHE_ROOT"
SPLITS = ("train", "val", "test")


def dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def dataset_fingerprint(ds: GridDataset) -> str:
    h = hashlib.sha256()
    h.update(json.dumps([ds.spec.__dict__, [f.__dict__ for f in ds.features]], sort_keys=True).encode())
    for arr in (ds.F_T, ds.F_S, ds.F_ST, ds.Y):
        h.update(arr.tobytes())
    return h.hexdigest()


def parse_sample_id(text: str) -> tuple[int, int, int] | int:
    parts = [p for p in text.replace(":", ",").split(",") if p.strip()]
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise DataError(f"sample id must be an index or 't,row,col', got {text!r}") from None
    if len(vals) == 1:
        return vals[0]
    if len(vals) != 3:
        raise DataError(f"sample id must be an index or 't,row,col', got {text!r}")
    return tuple(vals)  # type: ignore[return-value]


class Run:
    """Lazily materialized pipeline state for one config and work directory."""

    def __init__(self, cfg: RunConfig, workdir, cache_dir=None, threads: int = 1,
                 model: PrototypeModel | None = None):
        self.cfg = cfg
        self.workdir = Path(workdir)
        env_root = os.environ.get(CACHE_ENV)
        self.cache_dir = Path(cache_dir) if cache_dir else (
            Path(env_root) if env_root else self.workdir / "cache")
        self.threads = threads
        self.model = model
        self._encoded: dict[str, EncodedSet] = {}

    # -------------------------------------------------- data

    @cached_property
    def dataset(self) -> GridDataset:
        if self.cfg.data:
            return load_dataset(self.cfg.data)
        path = self.workdir / "data"
        want = self.cfg.digest("synth")
        stamp = path / "synth.hash"
        if stamp.exists() and stamp.read_text().strip() == want:
            log.info("synth: dataset up to date, skipped")
            return load_dataset(path)
        s = self.cfg.synth
        ds = synth_generate(s.seed, s.grid_spec(), s.synth_pattern())
        save_dataset(ds, path)
        stamp.write_text(want + "\n")
        return ds

    @cached_property
    def refs(self):
        return feature_refs(self.dataset.features)

    @cached_property
    def samples(self):
        s = self.cfg.samples
        return extract_samples(self.dataset, d=s.d, t_in=s.t_in, stride=s.stride,
                               balance=s.balance, seed=s.seed)

    @cached_property
    def splits(self) -> dict[str, list]:
        s = self.cfg.samples
        parts = split_samples(self.samples, s.split, by=s.split_by, seed=s.seed)
        return dict(zip(SPLITS, parts))

    @cached_property
    def baselines(self):
        if self.model is not None and self.model.baselines:
            return self.model.baselines
        return fit_globals(self.splits["train"], self.refs, self.cfg.concept)

    @cached_property
    def encoder(self) -> Encoder:
        s = self.cfg.samples
        tag = hashlib.sha256(
            (dataset_fingerprint(self.dataset) + self.cfg.digest("samples", "concept")).encode()
        ).hexdigest()
        return Encoder(self.cfg.concept, self.refs, self.baselines, s.d, s.t_in, data_tag=tag)

    def encode_samples(self, samples: Sequence) -> EncodedSet:
        cts = encode_corpus(samples, self.encoder, self.cache_dir, workers=self.threads)
        S, Tt = stack_concepts(cts) if cts else (np.empty((0,)), np.empty((0,)))
        return EncodedSet(S, Tt, np.array([s.label for s in samples], dtype=np.int64),
                          [s.sample_id for s in samples])

    def encoded(self, name: str) -> EncodedSet:
        if name not in self._encoded:
            self._encoded[name] = self.encode_samples(self.splits[name])
        return self._encoded[name]

    def all_encoded(self) -> EncodedSet:
        parts = [self.encoded(n) for n in SPLITS if len(self.splits[n])]
        return EncodedSet(np.concatenate([p.S for p in parts]), np.concatenate([p.Tt for p in parts]),
                          np.concatenate([p.y for p in parts]), sum((p.ids for p in parts), []))

    # -------------------------------------------------- stages

    def stage_baseline(self) -> Path:
        out = {name: {"scope": b.scope, "kind": b.kind, "mean": b.mean, "n_obs": b.n_obs,
                      "values": None if b.values is None else b.values.tolist()}
               for name, b in sorted(self.baselines.items())}
        path = self.workdir / "baselines.json"
        dump_json(path, out)
        return path

    def stage_encode(self) -> dict[str, int]:
        hits = counters["cache_hits"]
        for name in SPLITS:
            self.encoded(name)
        total = sum(len(self.splits[n]) for n in SPLITS)
        hit = counters["cache_hits"] - hits
        if hit == total:
            log.info("encode: cache hit for all %d samples, stage skipped", total)
        else:
            log.info("encode: %d of %d samples encoded, %d from cache", total - hit, total, hit)
        return {"samples": total, "cache_hits": hit}

    def train_model(self, pooling_mode: str | None = None, seed: int | None = None):
        cfg = self.cfg
        model_cfg = cfg.model if seed is None else dataclasses.replace(cfg.model, seed=seed)
        p = cfg.pooling
        plan = build_plan(cfg.samples.d, pooling_mode or p.mode, p.near, p.middle)
        enc = self.encoder
        res = train(self.encoded("train"), self.encoded("val"), plan, model_cfg,
                    [r.name for r in enc.spatial_refs], [r.name for r in enc.temporal_refs])
        m = res.model
        m.concept_spec = cfg.concept
        m.baselines = dict(self.baselines)
        m.meta.update({
            "config": cfg.to_dict(),
            "config_hash": cfg.digest(),
            "encoding_hash": enc.key(),
            "package_version": __version__,
        })
        return res

    def stage_train(self, out: Path | None = None) -> PrototypeModel:
        out = Path(out) if out else self.workdir / "model.gpn"
        if out.exists():
            try:
                existing = load_model(out, expect_spec_hash=self.cfg.concept.digest())
                if existing.meta.get("config_hash") == self.cfg.digest() \
                        and existing.meta.get("encoding_hash") == self.encoder.key():
                    log.info("train: %s up to date, stage skipped", out)
                    self.model = existing
                    return existing
            except IncompatibleError:
                pass
        res = self.train_model()
        save_model(res.model, out)
        dump_json(out.with_name(out.stem + ".history.json"), res.history)
        self.model = res.model
        return res.model

    def stage_eval(self, model: PrototypeModel | None = None, out: Path | None = None) -> dict:
        model = model or self.model
        metrics = {name: evaluate(model, self.encoded(name)) for name in SPLITS if len(self.splits[name])}
        if out is not False:
            dump_json(Path(out) if out else self.workdir / "metrics.json", metrics)
        return metrics

    def stage_project(self, model: PrototypeModel | None = None, hard: bool = False,
                      out_dir: Path | None = None) -> dict:
        model = model or self.model
        top_n = self.cfg.explain.top_n
        tr = self.encoded("train")
        X = model.pool(tr.S, tr.Tt)
        target = copy.deepcopy(model) if hard else model
        projections = project(target, X, tr.ids, top_n=top_n, hard=hard)
        result = {"projections": projections}
        if hard:
            before = evaluate(model, self.encoded("val"))
            after = evaluate(target, self.encoded("val"))
            result["metrics_before"] = before
            result["metrics_after"] = after
            result["metric_delta"] = {k: after[k] - before[k] for k in before}
            result["model"] = target
        out_dir = Path(out_dir) if out_dir else self.workdir / "reports"
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "projection.txt").write_bytes(render_report(projections, "text"))
        (out_dir / "projection.json").write_bytes(render_report(projections, "json"))
        if hard:
            dump_json(out_dir / "projection_metrics.json",
                      {k: result[k] for k in ("metrics_before", "metrics_after", "metric_delta")})
        return result

    def find_sample(self, sid) -> tuple:
        """Resolve an index into the test split or a (t, row, col) id to a sample window."""
        if isinstance(sid, int):
            test = self.splits["test"]
            if not 0 <= sid < len(test):
                raise DataError(f"sample index {sid} outside the test split (size {len(test)})")
            return test[sid]
        for s in self.samples:
            if s.sample_id == tuple(sid):
                return s
        s = self.cfg.samples
        return window_at(self.dataset, sid[0], sid[1], sid[2], d=s.d, t_in=s.t_in)

    def default_case(self):
        test = self.splits["test"] or self.samples
        return next((s for s in test if s.label == 1), test[0])

    def explain(self, sample, model: PrototypeModel | None = None, top_n: int | None = None):
        model = model or self.model
        enc = self.encode_samples([sample])
        x = model.pool(enc.S, enc.Tt)[0]
        return explain_case(model, x, top_n or self.cfg.explain.top_n,
                            sample_id=sample.sample_id, label=sample.label)

    def stage_explain(self, sample=None, model=None, fmt: str = "text", out_dir=None) -> bytes:
        sample = sample or self.default_case()
        rep = self.explain(sample, model)
        body = render_report([rep], fmt)
        out_dir = Path(out_dir) if out_dir else self.workdir / "reports"
        out_dir.mkdir(parents=True, exist_ok=True)
        t, r, c = sample.sample_id
        (out_dir / f"case_{t}_{r}_{c}.{'json' if fmt != 'text' else 'txt'}").write_bytes(body)
        return body

    def stage_maps(self, model=None, percentile: float | None = None, out_dir=None) -> list:
        model = model or self.model
        data = self.all_encoded()
        X = model.pool(data.S, data.Tt)
        spec = self.dataset.spec
        maps = similarity_maps(model, X, data.ids, (spec.m, spec.n),
                               percentile or self.cfg.explain.percentile, self.dataset.epoch_weekday)
        out_dir = Path(out_dir) if out_dir else self.workdir / "maps"
        for sm in maps:
            write_map(sm, out_dir)
        dump_json(out_dir / "weekday.json",
                  {f"proto_{sm.k}": sm.weekday_counts.sum(axis=(1, 2)).tolist() for sm in maps})
        return maps


def run_from_model(model_path, data: str | None = None, workdir=None, cache_dir=None,
                   threads: int = 1, expect_config: RunConfig | None = None) -> Run:
    """Rebuild pipeline state from the config embedded in a model archive."""
    expect = expect_config.concept.digest() if expect_config else None
    model = load_model(model_path, expect_spec_hash=expect)
    raw = dict(model.meta.get("config") or {})
    if data:
        raw["data"] = str(data)
    cfg = config_from_dict(raw)
    workdir = Path(workdir) if workdir else Path(model_path).resolve().parent
    return Run(cfg, workdir, cache_dir=cache_dir, threads=threads, model=model)


def run_pipeline(cfg: RunConfig, workdir, stages: Sequence[str] = ("all",), cache_dir=None,
                 threads: int = 1) -> dict:
    """Run the requested stages and write ``run_manifest.json``. Returns the manifest."""
    run = Run(cfg, workdir, cache_dir=cache_dir, threads=threads)
    order = ["synth", "baseline", "encode", "train", "eval", "project", "explain", "maps"]
    wanted = order if "all" in stages else [s for s in order if s in stages]
    manifest: dict = {"package_version": __version__, "config_hash": cfg.digest(),
                      "seeds": {"synth": cfg.synth.seed, "samples": cfg.samples.seed,
                                "model": cfg.model.seed},
                      "stages": {}}
    for stage in wanted:
        try:
            if stage == "synth":
                run.dataset
                manifest["stages"]["synth"] = {"dataset": dataset_fingerprint(run.dataset)}
            elif stage == "baseline":
                run.stage_baseline()
                manifest["stages"]["baseline"] = {"features": sorted(run.baselines)}
            elif stage == "encode":
                info = run.stage_encode()
                manifest["stages"]["encode"] = {"encoding_hash": run.encoder.key(), **info}
            elif stage == "train":
                model = run.stage_train()
                manifest["stages"]["train"] = {"epoch": model.meta.get("epoch")}
            elif stage == "eval":
                manifest["metrics"] = run.stage_eval()
            elif stage == "project":
                run.stage_project()
            elif stage == "explain":
                run.stage_explain()
            elif stage == "maps":
                run.stage_maps()
        except GeoProtoError as exc:
            exc.stage = stage  # type: ignore[attr-defined]
            raise
    dump_json(run.workdir / "run_manifest.json", manifest)
    return manifest


METRIC_COLUMNS = ("cross_entropy", "accuracy", "precision", "recall", "f1")


def ablation(cfg: RunConfig, workdir, modes: Sequence[str] = ("spatial", "max", "none"),
             runs: int = 1, cache_dir=None, threads: int = 1, split: str = "test") -> list[dict]:
    """Train one model per pooling mode on shared data and seeds; return metric rows.

    With ``runs > 1`` each row reports the mean and sample standard deviation
    over seeds ``model.seed .. model.seed + runs - 1``.
    """
    run = Run(cfg, workdir, cache_dir=cache_dir, threads=threads)
    rows = []
    for mode in modes:
        per_seed = []
        for r in range(runs):
            res = run.train_model(pooling_mode=mode, seed=cfg.model.seed + r)
            per_seed.append(evaluate(res.model, run.encoded(split)))
        row = {"mode": mode}
        for k in METRIC_COLUMNS:
            vals = np.array([m[k] for m in per_seed])
            row[k] = float(vals.mean())
            if runs > 1:
                row[k + "_std"] = float(vals.std(ddof=1))
        rows.append(row)
    dump_json(Path(workdir) / "ablation.json", rows)
    lines = ["mode," + ",".join(METRIC_COLUMNS)]
    lines += [row["mode"] + "," + ",".join(f"{row[k]:.6f}" for k in METRIC_COLUMNS) for row in rows]
    (Path(workdir) / "ablation.csv").write_text("\n".join(lines) + "\n")
    return rows
