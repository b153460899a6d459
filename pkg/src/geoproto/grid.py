"""Grid dataset model, on-disk format, sample windows and a synthetic generator.

A dataset directory holds ``manifest.json`` plus one raw little-endian array
per tensor: ``F_T.bin`` (T x f_t), ``F_S.bin`` (m x n x f_s),
``F_ST.bin`` (T x m x n x f_st) as float32 and ``Y.u8`` (T x m x n) as uint8,
all row-major with the last index fastest.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

KINDS = ("temporal", "spatial", "spatiotemporal")
DIST_HINTS = ("count", "continuous")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class FeatureInfo:
    name: str
    kind: str
    dist_hint: str = "continuous"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.dist_hint not in DIST_HINTS:
            raise DataError(f"feature {self.name!r}: unknown dist_hint {self.dist_hint!r}")


@dataclass(frozen=True)
class GridSpec:
    m: int
    n: int
    T: int
    f_t: int = 0
    f_s: int = 0
    f_st: int = 0
    interval_label: str = "1 day"
    cell_size_label: str = ""

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise DataError(f"grid must be at least 1x1, got {self.m}x{self.n}")
        if self.T < 2:
            raise DataError(f"need T >= 2 intervals, got {self.T}")
        if min(self.f_t, self.f_s, self.f_st) < 0 or self.f < 1:
            raise DataError("need at least one feature and no negative feature counts")

    @property
    def f(self) -> int:
        return self.f_t + self.f_s + self.f_st


@dataclass
class GridDataset:
    spec: GridSpec
    F_T: np.ndarray
    F_S: np.ndarray
    F_ST: np.ndarray
    Y: np.ndarray
    features: list[FeatureInfo]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = self.spec
        self.F_T = np.ascontiguousarray(self.F_T, dtype=np.float32)
        self.F_S = np.ascontiguousarray(self.F_S, dtype=np.float32)
        self.F_ST = np.ascontiguousarray(self.F_ST, dtype=np.float32)
        self.Y = np.ascontiguousarray(self.Y, dtype=np.uint8)
        expected = {
            "F_T": (s.T, s.f_t),
            "F_S": (s.m, s.n, s.f_s),
            "F_ST": (s.T, s.m, s.n, s.f_st),
            "Y": (s.T, s.m, s.n),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DataError(f"{name}: shape {arr.shape} does not match manifest {shape}")
        for name in ("F_T", "F_S", "F_ST"):
            arr = getattr(self, name)
            bad = np.flatnonzero(~np.isfinite(arr))
            if bad.size:
                raise DataError(f"{name}: non-finite value at flat index {int(bad[0])}")
        if self.Y.size and self.Y.max() > 1:
            raise DataError("Y: labels must be 0 or 1")
        if len(self.features) != s.f:
            raise DataError(f"features: expected {s.f} entries, got {len(self.features)}")
        counts = {k: sum(fi.kind == k for fi in self.features) for k in KINDS}
        if (counts["temporal"], counts["spatial"], counts["spatiotemporal"]) != (s.f_t, s.f_s, s.f_st):
            raise DataError(f"features: kinds {counts} do not match f_t/f_s/f_st")
        if len({fi.name for fi in self.features}) != len(self.features):
            raise DataError("features: names must be unique")

    def features_of(self, kind: str) -> list[FeatureInfo]:
        return [fi for fi in self.features if fi.kind == kind]

    @property
    def epoch_weekday(self) -> int:
        return int(self.meta.get("epoch_weekday", 0))


@dataclass
class SampleWindow:
    """One classification instance: a d x d window around ``center`` at time ``t``.

    ``x_st`` and ``x_temporal`` cover times ``t - t_in + 1 .. t``; ``label`` is Y at ``t + 1``.
    ``mask`` is True for cells inside the study area.
    """

    center: tuple[int, int]
    t: int
    x_spatial: np.ndarray
    x_st: np.ndarray
    x_temporal: np.ndarray
    mask: np.ndarray
    label: int

    @property
    def d(self) -> int:
        return self.mask.shape[0]

    @property
    def sample_id(self) -> tuple[int, int, int]:
        return (self.t, self.center[0], self.center[1])


# ---------------------------------------------------------------- disk format


def _manifest(ds: GridDataset) -> dict:
    s = ds.spec
    return {
        "format_version": FORMAT_VERSION,
        "m": s.m,
        "n": s.n,
        "T": s.T,
        "f_t": s.f_t,
        "f_s": s.f_s,
        "f_st": s.f_st,
        "interval_label": s.interval_label,
        "cell_size_label": s.cell_size_label,
        "features": [asdict(fi) for fi in ds.features],
        "endianness": "little",
        "dtype": "f32",
        "meta": ds.meta,
    }


def save_dataset(ds: GridDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_manifest(ds), indent=2, sort_keys=True) + "\n"
    (path / "manifest.json").write_text(text)
    for name in ("F_T", "F_S", "F_ST"):
        getattr(ds, name).astype("<f4").tofile(path / f"{name}.bin")
    ds.Y.astype(np.uint8).tofile(path / "Y.u8")


def _read_raw(path: Path, dtype, shape, name) -> np.ndarray:
    if not path.exists():
        raise DataError(f"{name}: missing file {path}")
    raw = np.fromfile(path, dtype=dtype)
    want = int(np.prod(shape))
    if raw.size != want:
        raise DataError(f"{name}: file holds {raw.size} values, manifest shape {shape} needs {want}")
    return raw.reshape(shape)


def load_dataset(path) -> GridDataset:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise DataError(f"missing manifest {mf}")
    man = json.loads(mf.read_text())
    if man.get("endianness", "little") != "little" or man.get("dtype", "f32") != "f32":
        raise DataError("only little-endian f32 datasets are supported")
    try:
        spec = GridSpec(
            m=man["m"], n=man["n"], T=man["T"],
            f_t=man["f_t"], f_s=man["f_s"], f_st=man["f_st"],
            interval_label=man.get("interval_label", ""),
            cell_size_label=man.get("cell_size_label", ""),
        )
        features = [FeatureInfo(**fi) for fi in man["features"]]
    except KeyError as exc:
        raise DataError(f"manifest missing field {exc}") from None
    m, n, T = spec.m, spec.n, spec.T
    return GridDataset(
        spec=spec,
        F_T=_read_raw(path / "F_T.bin", "<f4", (T, spec.f_t), "F_T"),
        F_S=_read_raw(path / "F_S.bin", "<f4", (m, n, spec.f_s), "F_S"),
        F_ST=_read_raw(path / "F_ST.bin", "<f4", (T, m, n, spec.f_st), "F_ST"),
        Y=_read_raw(path / "Y.u8", np.uint8, (T, m, n), "Y"),
        features=features,
        meta=man.get("meta", {}),
    )


# ---------------------------------------------------------------- samples


def _check_window(ds: GridDataset, d: int, t_in: int) -> None:
    s = ds.spec
    if d < 1 or d % 2 == 0:
        raise DataError(f"window size d must be odd and positive, got {d}")
    if d >= 2 * min(s.m, s.n) + 1:
        raise DataError(f"window size d={d} too large for a {s.m}x{s.n} grid")
    if not 1 <= t_in <= s.T - 1:
        raise DataError(f"t_in must be in [1, {s.T - 1}], got {t_in}")


def window_at(ds: GridDataset, t: int, row: int, col: int, d: int = 9, t_in: int = 1) -> SampleWindow:
    """Cut the sample centered at (row, col) using history ending at ``t``."""
    _check_window(ds, d, t_in)
    if not t_in - 1 <= t <= ds.spec.T - 2:
        raise DataError(f"time index {t} has no history of {t_in} or no label interval")
    r = d // 2
    m, n = ds.spec.m, ds.spec.n
    r0, c0 = row - r, col - r
    rs, re = max(r0, 0), min(r0 + d, m)
    cs, ce = max(c0, 0), min(c0 + d, n)
    mask = np.zeros((d, d), dtype=bool)
    mask[rs - r0:re - r0, cs - c0:ce - c0] = True
    xs = np.zeros((d, d, ds.spec.f_s), dtype=np.float32)
    xs[rs - r0:re - r0, cs - c0:ce - c0] = ds.F_S[rs:re, cs:ce]
    xst = np.zeros((t_in, d, d, ds.spec.f_st), dtype=np.float32)
    xst[:, rs - r0:re - r0, cs - c0:ce - c0] = ds.F_ST[t - t_in + 1:t + 1, rs:re, cs:ce]
    xt = ds.F_T[t - t_in + 1:t + 1].copy()
    return SampleWindow(
        center=(row, col), t=t, x_spatial=xs, x_st=xst, x_temporal=xt,
        mask=mask, label=int(ds.Y[t + 1, row, col]),
    )


def extract_samples(
    ds: GridDataset,
    d: int = 9,
    t_in: int = 1,
    stride: int = 1,
    balance: float | None = None,
    seed: int = 0,
) -> list[SampleWindow]:
    """All sample windows on the stride lattice, optionally class-balanced.

    With ``balance`` set, negatives are subsampled (seeded) to
    ``balance`` negatives per positive; output stays in (t, row, col) order.
    """
    _check_window(ds, d, t_in)
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    s = ds.spec
    rows = range(0, s.m, stride)
    cols = range(0, s.n, stride)
    keys = [(t, i, j) for t in range(t_in - 1, s.T - 1) for i in rows for j in cols]
    if balance is not None:
        if balance <= 0:
            raise DataError(f"balance ratio must be positive, got {balance}")
        labels = np.array([ds.Y[t + 1, i, j] for t, i, j in keys], dtype=np.uint8)
        pos = np.flatnonzero(labels == 1)
        neg = np.flatnonzero(labels == 0)
        if pos.size == 0:
            raise DataError("cannot balance: no positive samples")
        want = min(neg.size, int(round(balance * pos.size)))
        rng = np.random.default_rng(seed)
        keep_neg = rng.choice(neg, size=want, replace=False) if want < neg.size else neg
        keep = np.sort(np.concatenate([pos, keep_neg]))
        keys = [keys[k] for k in keep]
    return [window_at(ds, t, i, j, d=d, t_in=t_in) for t, i, j in keys]


def split_samples(
    samples: Sequence[SampleWindow],
    fractions: Sequence[float] = (0.7, 0.15, 0.15),
    by: str = "time",
    seed: int = 0,
) -> tuple[list[SampleWindow], list[SampleWindow], list[SampleWindow]]:
    """Split into train/validation/test.

    ``by="time"`` assigns whole time indices in chronological order so later
    intervals never leak into training; ``by="random"`` shuffles samples.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise DataError(f"split fractions must be 3 non-negative values summing to 1, got {fractions}")
    n = len(samples)
    if by == "random":
        order = np.random.default_rng(seed).permutation(n)
        a = int(round(fractions[0] * n))
        b = a + int(round(fractions[1] * n))
        parts = (order[:a], order[a:b], order[b:])
        return tuple([samples[k] for k in sorted(p)] for p in parts)  # type: ignore[return-value]
    if by != "time":
        raise DataError(f"unknown split mode {by!r}")
    times = sorted({s.t for s in samples})
    per_time = {t: 0 for t in times}
    for s in samples:
        per_time[s.t] += 1
    cut1, cut2 = fractions[0] * n, (fractions[0] + fractions[1]) * n
    which, seen = {}, 0
    for t in times:
        mid = seen + per_time[t] / 2
        which[t] = 0 if mid <= cut1 else (1 if mid <= cut2 else 2)
        seen += per_time[t]
    out: tuple[list, list, list] = ([], [], [])
    for s in samples:
        out[which[s.t]].append(s)
    return out


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthPattern:
    """Planted rule for synthetic data.

    ``hotspot``: each cell independently becomes a hotspot center at time t
    with probability ``hotspot_prob``; the (2*radius+1)^2 block around it has
    its count rate multiplied by ``hotspot_multiplier`` in the driver feature.
    The label at (t+1, cell) is 1 iff the cell was a hotspot center at t.

    ``heterogeneous``: as ``hotspot`` but centers only occur in the left half
    of the grid while the right half runs at ``right_background_factor`` times
    the background rate and never produces events.
    """

    name: str = "hotspot"
    background_rate: float = 2.0
    hotspot_multiplier: float = 5.0
    hotspot_prob: float = 0.1
    radius: int = 1
    right_background_factor: float = 2.0

    def __post_init__(self):
        if self.name not in ("hotspot", "heterogeneous"):
            raise DataError(f"unknown synthetic pattern {self.name!r}")
        if self.background_rate < 0 or self.hotspot_multiplier < 0:
            raise DataError("rates must be non-negative")
        if not 0 <= self.hotspot_prob <= 1:
            raise DataError("hotspot_prob must be in [0, 1]")


def synth_features(spec: GridSpec) -> list[FeatureInfo]:
    feats = [FeatureInfo(f"temperature_{k}" if k else "temperature", "temporal", "continuous")
             for k in range(spec.f_t)]
    feats += [FeatureInfo(f"poi_density_{k}" if k else "poi_density", "spatial", "continuous")
              for k in range(spec.f_s)]
    feats += [FeatureInfo("event_driver" if k == 0 else f"traffic_{k}", "spatiotemporal", "count")
              for k in range(spec.f_st)]
    return feats


def synth_generate(seed: int, spec: GridSpec, pattern: SynthPattern | None = None) -> GridDataset:
    """Deterministic synthetic dataset with a planted hotspot rule.

    Labels follow the rule exactly (no label noise); the rule is recorded in
    ``meta["truth"]``. Feature 0 of F_ST drives the events, so ``f_st >= 1``.
    """
    pattern = pattern or SynthPattern()
    if spec.f_st < 1:
        raise DataError("synthetic data needs at least one spatiotemporal count feature")
    rng = np.random.default_rng(seed)
    m, n, T = spec.m, spec.n, spec.T

    active = np.ones((m, n), dtype=bool)
    base = np.full((m, n), pattern.background_rate)
    if pattern.name == "heterogeneous":
        active[:, n // 2:] = False
        base[:, n // 2:] *= pattern.right_background_factor

    draws = rng.random((T, m, n))
    centers = (draws < pattern.hotspot_prob) & active[None]
    if pattern.hotspot_multiplier == 1.0:
        centers[:] = False
    rate = np.broadcast_to(base, (T, m, n)).copy()
    r = pattern.radius
    hot = np.zeros((T, m, n), dtype=bool)
    for t, i, j in zip(*np.nonzero(centers)):
        hot[t, max(i - r, 0):i + r + 1, max(j - r, 0):j + r + 1] = True
    rate[hot] *= pattern.hotspot_multiplier

    F_ST = np.empty((T, m, n, spec.f_st), dtype=np.float32)
    F_ST[..., 0] = rng.poisson(rate)
    for k in range(1, spec.f_st):
        F_ST[..., k] = rng.poisson(np.broadcast_to(base, (T, m, n)))
    F_S = rng.lognormal(mean=0.0, sigma=0.5, size=(m, n, spec.f_s)).astype(np.float32)
    F_T = rng.normal(loc=15.0, scale=5.0, size=(T, spec.f_t)).astype(np.float32)

    Y = np.zeros((T, m, n), dtype=np.uint8)
    Y[1:] = centers[:-1]
    meta = {
        "epoch_weekday": 0,
        "truth": {
            "rule": "Y[t+1, cell] = 1 iff cell is a planted hotspot center at t "
                    "(block rate of F_ST[..., 0] multiplied by hotspot_multiplier)",
            "seed": int(seed),
            "pattern": asdict(pattern),
            "hotspot_frequency": float(centers[:-1].mean()),
        },
    }
    return GridDataset(spec=spec, F_T=F_T, F_S=F_S, F_ST=F_ST, Y=Y,
                       features=synth_features(spec), meta=meta)
