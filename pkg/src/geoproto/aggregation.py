"""Channel fusion across window sizes and ring/sector pooling of fused concept maps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import CHANNELS, ConceptTensor
from .errors import ConfigError, DataError

POOLING_MODES = ("mean", "max", "none")
SECTORS = ("NE", "NW", "SW", "SE")


@dataclass(frozen=True)
class PoolingPlan:
    """A partition of the d x d window into named regions."""

    d: int
    mode: str
    regions: tuple[tuple[str, tuple[int, ...]], ...]
    near: float = 2.0
    middle: float = 3.5

    @property
    def q(self) -> int:
        return len(self.regions)

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.regions]

    def membership(self) -> np.ndarray:
        """Row-normalized region/cell matrix: [q, d*d], row k averages region k."""
        A = np.zeros((self.q, self.d * self.d))
        for k, (_, cells) in enumerate(self.regions):
            A[k, list(cells)] = 1.0 / len(cells)
        return A

    def to_dict(self) -> dict:
        return {"d": self.d, "mode": self.mode, "near": self.near, "middle": self.middle}


def ring_sector(i: int, j: int, d: int, near: float, middle: float) -> str:
    c = d // 2
    dy, dx = c - i, j - c  # north is up (smaller row index)
    dist = math.hypot(dx, dy)
    if dist == 0:
        return "center"
    ring = "near" if dist <= near else ("middle" if dist <= middle else "far")
    angle = math.degrees(math.atan2(dy, dx)) % 360.0
    return f"{ring}-{SECTORS[int(angle // 90) % 4]}"


def build_plan(d: int = 9, mode: str = "mean", near: float = 2.0, middle: float = 3.5) -> PoolingPlan:
    """Center cell plus {near, middle, far} x {NE, NW, SW, SE}; empty regions are dropped.

    ``mode="none"`` keeps every cell as its own region (no pooling).
    Accepts ``"spatial"`` as an alias for ``"mean"``.
    """
    if mode == "spatial":
        mode = "mean"
    if mode not in POOLING_MODES:
        raise ConfigError(f"unknown pooling mode {mode!r}")
    if d < 1 or d % 2 == 0:
        raise ConfigError(f"pooling window must be odd, got {d}")
    if not 0 < near < middle:
        raise ConfigError("ring radii must satisfy 0 < near < middle")
    if mode == "none":
        regions = tuple((f"cell({i},{j})", (i * d + j,)) for i in range(d) for j in range(d))
        return PoolingPlan(d, mode, regions, near, middle)
    order = ["center"] + [f"{ring}-{s}" for ring in ("near", "middle", "far") for s in SECTORS]
    cells: dict[str, list[int]] = {name: [] for name in order}
    for i in range(d):
        for j in range(d):
            cells[ring_sector(i, j, d, near, middle)].append(i * d + j)
    regions = tuple((name, tuple(cells[name])) for name in order if cells[name])
    return PoolingPlan(d, mode, regions, near, middle)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class FusionWeights:
    """Unconstrained logits; realized weights are the softmax over the window-size axis.

    ``spatial`` is [d, d, omega] (shared across features) or [F_sp, d, d, omega];
    ``temporal`` is [omega] or [f_t, omega].
    """

    spatial: np.ndarray
    temporal: np.ndarray

    @classmethod
    def zeros(cls, d: int, omega: int, n_spatial: int = 0, n_temporal: int = 0,
              per_feature: bool = False) -> "FusionWeights":
        if per_feature:
            return cls(np.zeros((n_spatial, d, d, omega)), np.zeros((n_temporal, omega)))
        return cls(np.zeros((d, d, omega)), np.zeros(omega))

    @property
    def per_feature(self) -> bool:
        return self.spatial.ndim == 4

    def realized(self) -> tuple[np.ndarray, np.ndarray]:
        return softmax(self.spatial), softmax(self.temporal)


def fuse_channels(c: ConceptTensor, w: FusionWeights) -> tuple[np.ndarray, np.ndarray]:
    """Weighted sum over window sizes. Returns spatial [d, d, F, 4] and temporal [f_t, 4]."""
    ws, wt = w.realized()
    S = c.spatial.astype(np.float64)
    Tt = c.temporal.astype(np.float64)
    if S.shape[3] != ws.shape[-1] or Tt.shape[1] != wt.shape[-1]:
        raise DataError("fusion weights and concept tensor disagree on the number of window sizes")
    if w.per_feature:
        if ws.shape[0] != S.shape[2] or ws.shape[1:3] != S.shape[:2] or wt.shape[0] != Tt.shape[0]:
            raise DataError("per-feature fusion weights do not match the concept tensor")
        return np.einsum("rcfwk,frcw->rcfk", S, ws), np.einsum("fwk,fw->fk", Tt, wt)
    if ws.shape[:2] != S.shape[:2]:
        raise DataError("fusion weights and concept tensor disagree on window size d")
    return np.einsum("rcfwk,rcw->rcfk", S, ws), np.einsum("fwk,w->fk", Tt, wt)


@dataclass
class PooledConceptVector:
    values: np.ndarray
    index: list[tuple[str, str, str]]
    label: int | None = None


def vector_index(plan: PoolingPlan, spatial_names, temporal_names) -> list[tuple[str, str, str]]:
    """Flat index -> (feature, region or "temporal", channel)."""
    idx = [(f, region, ch) for f in spatial_names for region in plan.names for ch in CHANNELS]
    idx += [(f, "temporal", ch) for f in temporal_names for ch in CHANNELS]
    return idx


def pool(fused_spatial: np.ndarray, fused_temporal: np.ndarray, plan: PoolingPlan,
         spatial_names=(), temporal_names=(), label=None) -> PooledConceptVector:
    """Pool one fused sample; layout is (feature, region, channel) then temporal (feature, channel)."""
    d, _, F, _ = fused_spatial.shape
    if d != plan.d:
        raise DataError(f"pooling plan built for d={plan.d}, got d={d}")
    flat = fused_spatial.reshape(d * d, F, 4)
    if plan.mode == "max":
        pooled = np.stack([flat[list(cells)].max(axis=0) for _, cells in plan.regions], axis=1)
    else:
        pooled = np.einsum("qc,cfk->fqk", plan.membership(), flat)
    values = np.concatenate([pooled.ravel(), fused_temporal.ravel()])
    names_s = spatial_names or [f"s{k}" for k in range(F)]
    names_t = temporal_names or [f"t{k}" for k in range(fused_temporal.shape[0])]
    return PooledConceptVector(values, vector_index(plan, names_s, names_t), label)


class Aggregator:
    """Batched fusion + pooling with a recorded forward pass for back-propagation."""

    def __init__(self, plan: PoolingPlan, n_spatial: int, n_temporal: int, omega: int):
        self.plan = plan
        self.n_spatial = n_spatial
        self.n_temporal = n_temporal
        self.omega = omega
        self.A = plan.membership()
        self._cells = [np.asarray(cells) for _, cells in plan.regions]
        self._record = None

    @property
    def dim(self) -> int:
        return self.n_spatial * self.plan.q * 4 + self.n_temporal * 4

    def forward(self, S: np.ndarray, Tt: np.ndarray, w: FusionWeights, record: bool = True) -> np.ndarray:
        """S: [N, d, d, F, omega, 4], Tt: [N, f_t, omega, 4] -> pooled vectors [N, D]."""
        N, d = S.shape[0], self.plan.d
        ws, wt = w.realized()
        if w.per_feature:
            fused = np.einsum("nrcfwk,frcw->nrcfk", S, ws, optimize=True)
            tf = np.einsum("nfwk,fw->nfk", Tt, wt)
        else:
            fused = np.einsum("nrcfwk,rcw->nrcfk", S, ws, optimize=True)
            tf = np.einsum("nfwk,w->nfk", Tt, wt)
        flat = fused.reshape(N, d * d, self.n_spatial, 4)
        argmax = None
        if self.plan.mode == "max":
            parts, argmax = [], []
            for cells in self._cells:
                sub = flat[:, cells]                  # [N, |R|, F, 4]
                am = sub.argmax(axis=1)               # first index on ties
                argmax.append(cells[am])
                parts.append(np.take_along_axis(sub, am[:, None], axis=1)[:, 0])
            pooled = np.stack(parts, axis=2)          # [N, F, q, 4]
            argmax = np.stack(argmax, axis=2)         # [N, F, q, 4] -> flat cell id
        else:
            pooled = np.einsum("qc,ncfk->nfqk", self.A, flat, optimize=True)
        out = np.concatenate([pooled.reshape(N, -1), tf.reshape(N, -1)], axis=1)
        if record:
            self._record = (S, Tt, ws, wt, w.per_feature, argmax)
        return out

    def backward(self, upstream: np.ndarray) -> FusionWeights:
        """Gradient of sum(upstream * forward_output) with respect to the fusion logits."""
        if self._record is None:
            raise RuntimeError("backward called without a recorded forward pass")
        S, Tt, ws, wt, per_feature, argmax = self._record
        N, d, F, q = S.shape[0], self.plan.d, self.n_spatial, self.plan.q
        G = np.asarray(upstream)
        Gp = G[:, :F * q * 4].reshape(N, F, q, 4)
        Gt = G[:, F * q * 4:].reshape(N, self.n_temporal, 4)
        if self.plan.mode == "max":
            Gf = np.zeros((N, d * d, F, 4))
            n_idx, f_idx, _, k_idx = np.indices(Gp.shape)
            np.add.at(Gf, (n_idx, argmax, f_idx, k_idx), Gp)
        else:
            Gf = np.einsum("qc,nfqk->ncfk", self.A, Gp, optimize=True)
        Gf = Gf.reshape(N, d, d, F, 4)
        if per_feature:
            gw = np.einsum("nrcfk,nrcfwk->frcw", Gf, S, optimize=True)
            gwt = np.einsum("nfk,nfwk->fw", Gt, Tt)
        else:
            gw = np.einsum("nrcfk,nrcfwk->rcw", Gf, S, optimize=True)
            gwt = np.einsum("nfk,nfwk->w", Gt, Tt)
        return FusionWeights(softmax_backward(ws, gw), softmax_backward(wt, gwt))


def softmax_backward(w: np.ndarray, g: np.ndarray) -> np.ndarray:
    return w * (g - (w * g).sum(axis=-1, keepdims=True))


def stack_concepts(tensors) -> tuple[np.ndarray, np.ndarray]:
    S = np.stack([c.spatial for c in tensors]).astype(np.float64)
    Tt = np.stack([c.temporal for c in tensors]).astype(np.float64)
    return S, Tt
