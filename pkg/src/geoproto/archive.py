"""Single-file model archive.

Layout: ``b"GPNARCH\\0"``, little-endian u64 header length, UTF-8 JSON header
(sorted keys), then raw little-endian blocks at the offsets listed in the
header. Parameters are float32; baseline samples are float64 so encodings
reproduce exactly after reload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .aggregation import FusionWeights, build_plan
from .encoder import ConceptSpec
from .errors import IncompatibleError
from .model import ModelConfig, PrototypeModel
from .stats import BaselineDist

MAGIC = b"GPNARCH\0"
VERSION = 1

_PARAM_BLOCKS = ("prototypes", "head_W", "head_b", "fusion_spatial", "fusion_temporal")


def _blocks(model: PrototypeModel) -> list[tuple[str, str, np.ndarray]]:
    p = model.params()
    out = [(name, "<f4", p[name]) for name in _PARAM_BLOCKS]
    out.append(("class_of", "<i4", model.class_of))
    for name in sorted(model.baselines):
        b = model.baselines[name]
        if b.values is not None:
            out.append((f"baseline:{name}", "<f8", b.values))
    return out


def to_bytes(model: PrototypeModel) -> bytes:
    table, chunks, offset = [], [], 0
    for name, dtype, arr in _blocks(model):
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        table.append({"name": name, "dtype": dtype, "shape": list(np.shape(arr)),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    spec = model.concept_spec
    header = {
        "format": "geoproto-model",
        "version": VERSION,
        "K": model.K,
        "D": model.D,
        "config": model.config.__dict__,
        "plan": model.plan.to_dict(),
        "spatial_names": list(model.spatial_names),
        "temporal_names": list(model.temporal_names),
        "concept_spec": spec.to_dict() if spec else None,
        "concept_spec_hash": spec.digest() if spec else None,
        "baselines": {name: {"scope": b.scope, "kind": b.kind, "mean": b.mean, "n_obs": b.n_obs}
                      for name, b in sorted(model.baselines.items())},
        "meta": model.meta,
        "blocks": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def save_model(model: PrototypeModel, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(to_bytes(model))


def read_header(path) -> dict:
    raw = Path(path).read_bytes()
    return _parse(raw)[0]


def _parse(raw: bytes) -> tuple[dict, bytes]:
    if raw[:8] != MAGIC:
        raise IncompatibleError("not a model archive")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    if header.get("version") != VERSION:
        raise IncompatibleError(f"archive version {header.get('version')} != supported {VERSION}")
    return header, raw[16 + hlen:]


def from_bytes(raw: bytes, expect_spec_hash: str | None = None) -> PrototypeModel:
    header, body = _parse(raw)
    if expect_spec_hash is not None and header["concept_spec_hash"] != expect_spec_hash:
        raise IncompatibleError("model was trained with a different concept encoding spec")
    blocks = {}
    for b in header["blocks"]:
        arr = np.frombuffer(body[b["offset"]:b["offset"] + b["nbytes"]], dtype=b["dtype"])
        blocks[b["name"]] = arr.reshape(b["shape"])
    baselines = {}
    for name, info in header["baselines"].items():
        values = blocks.get(f"baseline:{name}")
        baselines[name] = BaselineDist(
            name, info["scope"], info["kind"], info["mean"],
            None if values is None else values.astype(np.float64), info["n_obs"])
    plan_info = header["plan"]
    plan = build_plan(plan_info["d"], plan_info["mode"], plan_info["near"], plan_info["middle"])
    spec = header["concept_spec"]
    if spec is not None:
        spec = ConceptSpec(**spec)

    def f64(name):
        return blocks[name].astype(np.float64)

    return PrototypeModel(
        prototypes=f64("prototypes"),
        class_of=blocks["class_of"].astype(np.int64),
        head_W=f64("head_W"),
        head_b=f64("head_b"),
        fusion=FusionWeights(f64("fusion_spatial"), f64("fusion_temporal")),
        plan=plan,
        config=ModelConfig(**header["config"]),
        spatial_names=tuple(header["spatial_names"]),
        temporal_names=tuple(header["temporal_names"]),
        concept_spec=spec,
        baselines=baselines,
        meta=header["meta"],
    )


def load_model(path, expect_spec_hash: str | None = None) -> PrototypeModel:
    return from_bytes(Path(path).read_bytes(), expect_spec_hash)
