"""Concept convolution: scan windows, run the four test channels, emit binary concept maps."""

from __future__ import annotations

import hashlib
import json
import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CacheCorruptError, ConfigError, DataError, InsufficientDataError
from .stats import (HIGHER, BaselineDist, FeatureRef, feature_map, fit_global_baseline,
                    fit_local_baseline, run_test)

CHANNELS = ("global-higher", "global-lower", "local-higher", "local-lower")
CACHE_MAGIC = b"GPC1"

# observable work counters; tests and the pipeline read these
counters: Counter = Counter()


@dataclass(frozen=True)
class ConceptSpec:
    window_sizes: tuple[int, ...] = (3, 5)
    alpha: float = 0.05
    test_kinds: dict[str, str] = field(default_factory=dict)
    temporal_window_sizes: tuple[int, ...] | None = None
    temporal_collapse: str = "any"
    literal_padding: bool = False

    def __post_init__(self):
        object.__setattr__(self, "window_sizes", tuple(int(w) for w in self.window_sizes))
        if self.temporal_window_sizes is not None:
            object.__setattr__(self, "temporal_window_sizes",
                               tuple(int(w) for w in self.temporal_window_sizes))
        if not self.window_sizes:
            raise ConfigError("need at least one window size")
        for w in self.window_sizes:
            if w < 1 or w % 2 == 0:
                raise ConfigError(f"window sizes must be odd and positive, got {w}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.temporal_collapse not in ("any", "mean"):
            raise ConfigError(f"unknown temporal collapse {self.temporal_collapse!r}")
        for name, kind in self.test_kinds.items():
            if kind not in ("poisson", "empirical"):
                raise ConfigError(f"{name}: unknown test kind {kind!r}")
        if (self.temporal_window_sizes is not None
                and len(self.temporal_window_sizes) != len(self.window_sizes)):
            raise ConfigError("temporal_window_sizes must pair one-to-one with window_sizes")

    @property
    def omega(self) -> int:
        return len(self.window_sizes)

    def kind_for(self, ref: FeatureRef) -> str:
        return self.test_kinds.get(ref.name, ref.test_kind)

    def temporal_sizes(self, t_in: int) -> tuple[int, ...]:
        if self.temporal_window_sizes is None:
            return tuple(min(w, t_in) for w in self.window_sizes)
        return self.temporal_window_sizes

    def to_dict(self) -> dict:
        out = asdict(self)
        out["window_sizes"] = list(self.window_sizes)
        if self.temporal_window_sizes is not None:
            out["temporal_window_sizes"] = list(self.temporal_window_sizes)
        out["test_kinds"] = dict(sorted(self.test_kinds.items()))
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class ConceptTensor:
    spatial: np.ndarray   # uint8 [d, d, F_sp, omega, 4]
    temporal: np.ndarray  # float32 [f_t, omega, 4]; binary unless temporal_collapse="mean"
    spatial_names: tuple[str, ...]
    temporal_names: tuple[str, ...]
    window_sizes: tuple[int, ...]

    def index_map(self) -> dict[tuple[str, int, str], int]:
        """(feature, window size, channel) -> flat offset into the per-cell slice / temporal part."""
        out = {}
        for names in (self.spatial_names, self.temporal_names):
            for f, name in enumerate(names):
                for w, size in enumerate(self.window_sizes):
                    for c, ch in enumerate(CHANNELS):
                        out[(name, size, ch)] = (f * len(self.window_sizes) + w) * 4 + c
        return out


def baselines_digest(baselines: dict[str, BaselineDist]) -> str:
    h = hashlib.sha256()
    for name in sorted(baselines):
        b = baselines[name]
        h.update(json.dumps([b.feature, b.scope, b.kind, repr(b.mean), b.n_obs]).encode())
        if b.values is not None:
            h.update(np.ascontiguousarray(b.values, dtype="<f8").tobytes())
    return h.hexdigest()


def fit_globals(train: Sequence, refs: Sequence[FeatureRef], spec: ConceptSpec) -> dict[str, BaselineDist]:
    """Global baseline per feature over the training samples."""
    if not train:
        raise InsufficientDataError("cannot fit global baselines on an empty training set")
    return {ref.name: fit_global_baseline(train, ref, spec.kind_for(ref), literal=spec.literal_padding)
            for ref in refs}


class Encoder:
    """Concept convolution for one (spec, feature layout, baselines, d, t_in) combination."""

    def __init__(self, spec: ConceptSpec, refs: Sequence[FeatureRef],
                 baselines: dict[str, BaselineDist], d: int, t_in: int, data_tag: str = ""):
        self.spec = spec
        self.refs = list(refs)
        self.spatial_refs = ([r for r in refs if r.kind == "spatial"]
                             + [r for r in refs if r.kind == "spatiotemporal"])
        self.temporal_refs = [r for r in refs if r.kind == "temporal"]
        self.baselines = baselines
        self.d = d
        self.t_in = t_in
        self.data_tag = data_tag
        for ref in refs:
            if ref.name not in baselines:
                raise DataError(f"missing global baseline for feature {ref.name!r}")
        for w in spec.window_sizes:
            if w > d:
                raise DataError(f"window size {w} larger than sample size {d}")
        for L in spec.temporal_sizes(t_in):
            if L < 1 or L > t_in:
                raise DataError(f"temporal window {L} does not fit a history of {t_in}")

    def key(self) -> str:
        payload = json.dumps({
            "spec": self.spec.to_dict(),
            "features": [[r.name, r.kind, r.dist_hint, r.index] for r in self.refs],
            "baselines": baselines_digest(self.baselines),
            "d": self.d, "t_in": self.t_in, "data": self.data_tag,
        }, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return (self.d, self.d, len(self.spatial_refs), self.spec.omega, 4)

    @property
    def temporal_shape(self) -> tuple[int, ...]:
        return (len(self.temporal_refs), self.spec.omega, 4)

    def _spatial_block(self, sample, ref: FeatureRef, out: np.ndarray) -> None:
        spec, d = self.spec, self.d
        kind = spec.kind_for(ref)
        X = feature_map(sample, ref)
        literal = spec.literal_padding
        V = np.ones((d, d), dtype=bool) if literal else sample.mask
        scopes = [(0, self.baselines[ref.name])]
        try:
            scopes.append((2, fit_local_baseline(sample, ref, kind, literal=literal)))
        except InsufficientDataError:
            pass
        for wi, w in enumerate(spec.window_sizes):
            r = w // 2
            Xw = sliding_window_view(np.pad(X, r), (w, w))
            Vw = sliding_window_view(np.pad(V, r, constant_values=literal), (w, w))
            for i in range(d):
                for j in range(d):
                    if not V[i, j]:
                        continue
                    vals = Xw[i, j][Vw[i, j]]
                    if vals.size == 0:
                        continue
                    for offset, base in scopes:
                        res = run_test(kind, vals, base, spec.alpha)
                        counters["tests"] += 1
                        if res.significant:
                            out[i, j, wi, offset + (0 if res.direction == HIGHER else 1)] = 1

    def _temporal_block(self, sample, ref: FeatureRef, out: np.ndarray) -> None:
        spec = self.spec
        kind = spec.kind_for(ref)
        vals = feature_map(sample, ref)
        scopes = [(0, self.baselines[ref.name])]
        try:
            scopes.append((2, fit_local_baseline(sample, ref, kind)))
        except InsufficientDataError:
            pass
        for wi, L in enumerate(spec.temporal_sizes(self.t_in)):
            positions = vals.size - L + 1
            hits = np.zeros(4)
            for p in range(positions):
                for offset, base in scopes:
                    res = run_test(kind, vals[p:p + L], base, spec.alpha)
                    counters["tests"] += 1
                    if res.significant:
                        hits[offset + (0 if res.direction == HIGHER else 1)] += 1
            if spec.temporal_collapse == "any":
                out[wi] = hits > 0
            else:
                out[wi] = hits / positions

    def encode(self, sample) -> ConceptTensor:
        if sample.mask.shape != (self.d, self.d) or sample.x_temporal.shape[0] != self.t_in:
            raise DataError(f"sample shape does not match encoder (d={self.d}, t_in={self.t_in})")
        spatial = np.zeros(self.spatial_shape, dtype=np.uint8)
        for f, ref in enumerate(self.spatial_refs):
            self._spatial_block(sample, ref, spatial[:, :, f])
        temporal = np.zeros(self.temporal_shape, dtype=np.float32)
        for f, ref in enumerate(self.temporal_refs):
            self._temporal_block(sample, ref, temporal[f])
        counters["samples_encoded"] += 1
        return ConceptTensor(spatial, temporal,
                             tuple(r.name for r in self.spatial_refs),
                             tuple(r.name for r in self.temporal_refs),
                             self.spec.window_sizes)

    # ------------------------------------------------------------ cache

    def _cache_path(self, cache_dir: Path, sample) -> Path:
        t, i, j = sample.sample_id
        return cache_dir / self.key()[:16] / f"{t}_{i}_{j}.gpc"

    def _write_cache(self, path: Path, ct: ConceptTensor) -> None:
        payload = np.packbits(ct.spatial.ravel()).tobytes() + ct.temporal.astype("<f4").tobytes()
        header = json.dumps({
            "spatial_shape": list(ct.spatial.shape),
            "temporal_shape": list(ct.temporal.shape),
            "spec_hash": self.key(),
            "sha256": hashlib.sha256(payload).hexdigest(),
        }, sort_keys=True).encode()
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(CACHE_MAGIC + struct.pack("<I", len(header)) + header + payload)
        tmp.replace(path)

    def _read_cache(self, path: Path) -> ConceptTensor:
        raw = path.read_bytes()
        try:
            if raw[:4] != CACHE_MAGIC:
                raise ValueError("bad magic")
            (hlen,) = struct.unpack("<I", raw[4:8])
            header = json.loads(raw[8:8 + hlen])
            payload = raw[8 + hlen:]
        except (ValueError, struct.error) as exc:
            raise CacheCorruptError(f"{path}: unreadable cache file ({exc})") from None
        if header.get("spec_hash") != self.key():
            raise CacheCorruptError(f"{path}: cache written for a different encoding spec")
        if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
            raise CacheCorruptError(f"{path}: checksum mismatch")
        sshape = tuple(header["spatial_shape"])
        tshape = tuple(header["temporal_shape"])
        if sshape != self.spatial_shape or tshape != self.temporal_shape:
            raise CacheCorruptError(f"{path}: shape mismatch")
        nbits = int(np.prod(sshape))
        nbytes = (nbits + 7) // 8
        spatial = np.unpackbits(np.frombuffer(payload[:nbytes], dtype=np.uint8))[:nbits].reshape(sshape)
        temporal = np.frombuffer(payload[nbytes:], dtype="<f4").astype(np.float32).reshape(tshape)
        return ConceptTensor(spatial, temporal,
                             tuple(r.name for r in self.spatial_refs),
                             tuple(r.name for r in self.temporal_refs),
                             self.spec.window_sizes)

    def encode_cached(self, sample, cache_dir: Path | None) -> ConceptTensor:
        if cache_dir is None:
            return self.encode(sample)
        path = self._cache_path(Path(cache_dir), sample)
        if path.exists():
            counters["cache_hits"] += 1
            return self._read_cache(path)
        ct = self.encode(sample)
        self._write_cache(path, ct)
        return ct


def concept_conv(sample, spec: ConceptSpec, globals_: dict[str, BaselineDist],
                 refs: Sequence[FeatureRef]) -> ConceptTensor:
    enc = Encoder(spec, refs, globals_, d=sample.d, t_in=sample.x_temporal.shape[0])
    return enc.encode(sample)


def encode_corpus(samples: Sequence, encoder: Encoder, cache_dir=None, workers: int = 1) -> list[ConceptTensor]:
    """Encode every sample, reusing cached tensors. Output order follows ``samples``."""
    cache_dir = Path(cache_dir) if cache_dir is not None else None
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda s: encoder.encode_cached(s, cache_dir), samples))
    return [encoder.encode_cached(s, cache_dir) for s in samples]
