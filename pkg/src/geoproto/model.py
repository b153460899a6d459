"""Concept prototype layer, linear head, regularized loss with analytic gradients, and training."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .aggregation import Aggregator, FusionWeights, PoolingPlan
from .encoder import ConceptSpec
from .errors import ConfigError, DataError, TrainingDivergedError
from .stats import BaselineDist

log = logging.getLogger(__name__)

NEGATIVE, POSITIVE = 0, 1


@dataclass(frozen=True)
class ModelConfig:
    K: int = 8
    eps_sim: float = 1e-4
    lambda_div: float = 0.05
    lambda_sep: float = 0.08
    lambda_clst: float = 0.8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 64
    patience: int = 5
    max_epochs: int = 50
    seed: int = 0
    diversity: str = "maxmin"
    per_feature_fusion: bool = False

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError("need at least 2 prototypes (one per class)")
        if self.eps_sim <= 0:
            raise ConfigError("eps_sim must be positive")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size, patience and max_epochs must be positive")
        if self.diversity not in ("maxmin", "literal"):
            raise ConfigError(f"unknown diversity variant {self.diversity!r}")
        if min(self.lambda_div, self.lambda_sep, self.lambda_clst) < 0:
            raise ConfigError("regularizer weights must be non-negative")


@dataclass
class PrototypeModel:
    prototypes: np.ndarray        # [K, D]
    class_of: np.ndarray          # [K] in {0, 1}
    head_W: np.ndarray            # [2, K]
    head_b: np.ndarray            # [2]
    fusion: FusionWeights
    plan: PoolingPlan
    config: ModelConfig
    spatial_names: tuple[str, ...] = ()
    temporal_names: tuple[str, ...] = ()
    concept_spec: ConceptSpec | None = None
    baselines: dict[str, BaselineDist] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.prototypes.shape[0]

    @property
    def D(self) -> int:
        return self.prototypes.shape[1]

    def aggregator(self) -> Aggregator:
        omega = self.fusion.spatial.shape[-1]
        return Aggregator(self.plan, len(self.spatial_names), len(self.temporal_names), omega)

    def pool(self, S: np.ndarray, Tt: np.ndarray) -> np.ndarray:
        return self.aggregator().forward(S, Tt, self.fusion, record=False)

    def params(self) -> dict[str, np.ndarray]:
        return {
            "prototypes": self.prototypes,
            "head_W": self.head_W,
            "head_b": self.head_b,
            "fusion_spatial": self.fusion.spatial,
            "fusion_temporal": self.fusion.temporal,
        }


@dataclass
class Prediction:
    similarities: np.ndarray
    logits: np.ndarray
    probabilities: np.ndarray
    predicted: int


def similarity(c: np.ndarray, p: np.ndarray, eps: float = 1e-4) -> float:
    c, p = np.asarray(c, dtype=np.float64), np.asarray(p, dtype=np.float64)
    if c.shape != p.shape:
        raise DataError(f"dimension mismatch: {c.shape} vs {p.shape}")
    return float(1.0 / (np.sum((c - p) ** 2) + eps))


def similarity_grad(c: np.ndarray, p: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """d sim / d p."""
    diff = np.asarray(c, dtype=np.float64) - np.asarray(p, dtype=np.float64)
    return 2.0 * diff / (np.sum(diff**2) + eps) ** 2


def similarities(X: np.ndarray, P: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Returns (sims [n, K], squared distances [n, K])."""
    diff = X[:, None, :] - P[None, :, :]
    dist2 = np.einsum("nkd,nkd->nk", diff, diff)
    return 1.0 / (dist2 + eps), dist2


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def predict_batch(X: np.ndarray, model: PrototypeModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(sims, logits, probabilities) for pooled vectors X [n, D]."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.D:
        raise DataError(f"dimension mismatch: vectors have {X.shape[1]}, model expects {model.D}")
    sims, _ = similarities(X, model.prototypes, model.config.eps_sim)
    logits = sims @ model.head_W.T + model.head_b
    return sims, logits, np.exp(log_softmax(logits))


def forward(c, model: PrototypeModel) -> Prediction:
    values = getattr(c, "values", c)
    sims, logits, probs = predict_batch(np.asarray(values)[None], model)
    return Prediction(sims[0], logits[0], probs[0], int(np.argmax(probs[0])))


# ---------------------------------------------------------------- loss


@dataclass
class LossParts:
    total: float
    crs_ent: float
    dlv: float
    sep: float
    clst: float


def _diversity(P: np.ndarray, variant: str) -> tuple[float, np.ndarray]:
    K = P.shape[0]
    diff = P[:, None, :] - P[None, :, :]
    pd = np.einsum("ijd,ijd->ij", diff, diff)
    iu, ju = np.triu_indices(K, k=1)
    pairs = pd[iu, ju]
    pick = int(np.argmin(pairs)) if variant == "maxmin" else int(np.argmax(pairs))
    i, j = iu[pick], ju[pick]
    value = -pairs[pick] / K**2
    grad = np.zeros_like(P)
    g = -2.0 / K**2 * (P[i] - P[j])
    grad[i] += g
    grad[j] -= g
    return float(value), grad


def prototype_terms(dist2: np.ndarray, y: np.ndarray, class_of: np.ndarray):
    """Per-sample own-class and other-class nearest prototype (first index on ties)."""
    own = class_of[None, :] == y[:, None]
    own_k = np.argmin(np.where(own, dist2, np.inf), axis=1)
    other_k = np.argmin(np.where(~own, dist2, np.inf), axis=1)
    return own_k, other_k


def loss_and_grads(X: np.ndarray, y: np.ndarray, model: PrototypeModel,
                   ) -> tuple[LossParts, dict[str, np.ndarray], np.ndarray]:
    """Total loss, parameter gradients (prototypes, head) and d loss / d X."""
    cfg = model.config
    y = np.asarray(y)
    if y.size == 0:
        raise DataError("empty batch")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    y = y.astype(np.int64)
    n = y.size
    P, W, b = model.prototypes, model.head_W, model.head_b
    diff = X[:, None, :] - P[None, :, :]
    dist2 = np.einsum("nkd,nkd->nk", diff, diff)
    sims = 1.0 / (dist2 + cfg.eps_sim)
    logits = sims @ W.T + b
    logp = log_softmax(logits)
    crs = -logp[np.arange(n), y].mean()

    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    gW = dz.T @ sims
    gb = dz.sum(axis=0)
    g_dist = (dz @ W) * (-sims**2)

    own_k, other_k = prototype_terms(dist2, y, model.class_of)
    rows = np.arange(n)
    sep = -dist2[rows, other_k].mean()
    clst = dist2[rows, own_k].mean()
    np.add.at(g_dist, (rows, other_k), -cfg.lambda_sep / n)
    np.add.at(g_dist, (rows, own_k), cfg.lambda_clst / n)

    gP = -2.0 * np.einsum("nk,nkd->kd", g_dist, diff)
    gX = 2.0 * np.einsum("nk,nkd->nd", g_dist, diff)

    dlv, gP_div = _diversity(P, cfg.diversity)
    gP += cfg.lambda_div * gP_div

    total = crs + cfg.lambda_div * dlv + cfg.lambda_sep * sep + cfg.lambda_clst * clst
    parts = LossParts(float(total), float(crs), dlv, float(sep), float(clst))
    return parts, {"prototypes": gP, "head_W": gW, "head_b": gb}, gX


def full_loss_and_grads(S: np.ndarray, Tt: np.ndarray, y: np.ndarray, model: PrototypeModel,
                        agg: Aggregator | None = None) -> tuple[LossParts, dict[str, np.ndarray]]:
    """Loss from concept tensors through fusion and pooling, with gradients for every parameter group."""
    agg = agg or model.aggregator()
    X = agg.forward(S, Tt, model.fusion, record=True)
    parts, grads, gX = loss_and_grads(X, y, model)
    gfuse = agg.backward(gX)
    grads["fusion_spatial"] = gfuse.spatial
    grads["fusion_temporal"] = gfuse.temporal
    return parts, grads


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


# ---------------------------------------------------------------- training


@dataclass
class EncodedSet:
    """Stacked concept tensors and labels, the training-time view of a corpus."""

    S: np.ndarray
    Tt: np.ndarray
    y: np.ndarray
    ids: list[tuple[int, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.y.size)

    def subset(self, idx) -> "EncodedSet":
        idx = np.asarray(idx, dtype=np.intp)
        return EncodedSet(self.S[idx], self.Tt[idx], self.y[idx],
                          [self.ids[k] for k in idx] if self.ids else [])


def init_model(train: EncodedSet, plan: PoolingPlan, cfg: ModelConfig,
               spatial_names: Sequence[str], temporal_names: Sequence[str],
               rng: np.random.Generator) -> PrototypeModel:
    y = train.y
    for cls in (NEGATIVE, POSITIVE):
        if not (y == cls).any():
            raise DataError(f"training labels contain no samples of class {cls}")
    omega = train.S.shape[4]
    d = train.S.shape[1]
    fusion = FusionWeights.zeros(d, omega, len(spatial_names), len(temporal_names),
                                 per_feature=cfg.per_feature_fusion)
    agg = Aggregator(plan, len(spatial_names), len(temporal_names), omega)
    X = agg.forward(train.S, train.Tt, fusion, record=False)
    n_pos = cfg.K // 2
    class_of = np.array([NEGATIVE] * (cfg.K - n_pos) + [POSITIVE] * n_pos)
    protos = np.empty((cfg.K, X.shape[1]))
    for cls in (NEGATIVE, POSITIVE):
        slots = np.flatnonzero(class_of == cls)
        members = np.flatnonzero(y == cls)
        _, first = np.unique(X[members], axis=0, return_index=True)
        distinct = members[np.sort(first)]
        pool = distinct if distinct.size >= slots.size else members
        pick = rng.choice(pool, size=slots.size, replace=pool.size < slots.size)
        protos[slots] = X[pick]
    W = np.where(class_of[None, :] == np.arange(2)[:, None], 1.0, -0.5)
    return PrototypeModel(protos, class_of, W, np.zeros(2), fusion, plan, cfg,
                          tuple(spatial_names), tuple(temporal_names))


def _round_f32(model: PrototypeModel) -> None:
    for k, p in model.params().items():
        p[...] = p.astype(np.float32).astype(np.float64)


@dataclass
class TrainResult:
    model: PrototypeModel
    history: list[dict]
    best_epoch: int


def eval_loss(data: EncodedSet, model: PrototypeModel) -> float:
    X = model.pool(data.S, data.Tt)
    _, logits, _ = predict_batch(X, model)
    return float(-log_softmax(logits)[np.arange(len(data)), data.y.astype(int)].mean())


def train(train_set: EncodedSet, val_set: EncodedSet, plan: PoolingPlan, cfg: ModelConfig,
          spatial_names: Sequence[str], temporal_names: Sequence[str] = (),
          on_step: Callable[[PrototypeModel, int], None] | None = None) -> TrainResult:
    """Mini-batch Adam with early stopping on validation cross-entropy.

    Returns the best-validation snapshot (epoch 0 is the initialization) with
    parameters rounded to float32 so the archived model equals the returned one.
    """
    if len(val_set) == 0:
        raise DataError("validation set is empty")
    rng = np.random.default_rng(cfg.seed)
    model = init_model(train_set, plan, cfg, spatial_names, temporal_names, rng)
    agg = model.aggregator()
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
    params = model.params()

    best_loss = eval_loss(val_set, model)
    best = copy.deepcopy(model)
    best_epoch, stale, step = 0, 0, 0
    history = [{"epoch": 0, "train_loss": None, "val_loss": best_loss}]
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            parts, grads = full_loss_and_grads(train_set.S[idx], train_set.Tt[idx],
                                               train_set.y[idx], model, agg)
            if not np.isfinite(parts.total):
                raise TrainingDivergedError(epoch)
            opt.step(params, grads)
            step += 1
            if not all(np.isfinite(p).all() for p in params.values()):
                raise TrainingDivergedError(epoch, f"non-finite parameters at epoch {epoch}")
            if on_step is not None:
                on_step(model, step)
            losses.append(parts.total * idx.size)
        val_loss = eval_loss(val_set, model)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch, f"non-finite validation loss at epoch {epoch}")
        train_loss = float(sum(losses) / len(train_set))
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if val_loss < best_loss:
            best_loss, best, best_epoch, stale = val_loss, copy.deepcopy(model), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    _round_f32(best)
    best.meta["epoch"] = best_epoch
    best.meta["seed"] = cfg.seed
    return TrainResult(best, history, best_epoch)


# ---------------------------------------------------------------- evaluation


def metrics_from_predictions(y_true, y_pred, probs=None) -> dict[str, float]:
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    tp = int(((y_pred == 1) & (y_true == 1)).sum())
    fp = int(((y_pred == 1) & (y_true == 0)).sum())
    fn = int(((y_pred == 0) & (y_true == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    out = {
        "accuracy": float((y_true == y_pred).mean()) if y_true.size else 0.0,
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }
    if probs is not None:
        p = np.clip(np.asarray(probs)[np.arange(y_true.size), y_true], 1e-300, None)
        out["cross_entropy"] = float(-np.log(p).mean())
    return out


def evaluate(model: PrototypeModel, data: EncodedSet) -> dict[str, float]:
    X = model.pool(data.S, data.Tt)
    _, logits, probs = predict_batch(X, model)
    out = metrics_from_predictions(data.y, probs.argmax(axis=1))
    out["cross_entropy"] = float(-log_softmax(logits)[np.arange(len(data)), data.y.astype(int)].mean())
    return out


def min_prototype_distance(model: PrototypeModel) -> float:
    P = model.prototypes
    diff = P[:, None, :] - P[None, :, :]
    pd = np.einsum("ijd,ijd->ij", diff, diff)
    iu, ju = np.triu_indices(model.K, k=1)
    return float(pd[iu, ju].min())


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
