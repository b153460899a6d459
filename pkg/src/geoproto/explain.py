"""Prototype projection, case explanations, similarity maps and report rendering."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .aggregation import vector_index
from .errors import DataError
from .model import PrototypeModel, predict_batch, similarities

CLASS_NAMES = ("no-event", "event")


@dataclass
class Concept:
    feature: str
    region: str
    channel: str
    strength: float

    def label(self) -> str:
        return f"{self.feature}: {self.channel}, {self.region}, strength {self.strength:.3f}"


@dataclass
class ProjectedPrototype:
    k: int
    cls: int
    source_index: int
    source_id: tuple[int, int, int] | None
    similarity: float
    top_concepts: list[Concept]
    head_coefficients: list[float]


def top_concepts(x: np.ndarray, index: Sequence[tuple[str, str, str]], top_n: int = 10) -> list[Concept]:
    """Nonzero entries ranked by value (descending, lowest index first on ties)."""
    x = np.asarray(x)
    nz = np.flatnonzero(x > 0)
    order = nz[np.argsort(-x[nz], kind="stable")][:top_n]
    return [Concept(*index[i], strength=float(x[i])) for i in order]


def model_index(model: PrototypeModel) -> list[tuple[str, str, str]]:
    return vector_index(model.plan, model.spatial_names, model.temporal_names)


def project(model: PrototypeModel, X_train: np.ndarray, ids: Sequence | None = None,
            top_n: int = 10, hard: bool = False) -> list[ProjectedPrototype]:
    """Map each prototype to its most similar training encoding.

    Ties go to the lowest sample id (or lowest row when ids are absent). With
    ``hard=True`` the prototype vectors are overwritten in place.
    """
    X = np.atleast_2d(np.asarray(X_train, dtype=np.float64))
    if X.shape[0] == 0:
        raise DataError("cannot project onto an empty training set")
    ids = list(ids) if ids is not None else None
    sims, _ = similarities(X, model.prototypes, model.config.eps_sim)
    index = model_index(model)
    out = []
    for k in range(model.K):
        col = sims[:, k]
        cands = np.flatnonzero(col == col.max())
        src = int(min(cands, key=lambda i: ids[i])) if ids else int(cands[0])
        out.append(ProjectedPrototype(
            k=k, cls=int(model.class_of[k]), source_index=src,
            source_id=tuple(ids[src]) if ids else None,
            similarity=float(col[src]),
            top_concepts=top_concepts(X[src], index, top_n),
            head_coefficients=[float(v) for v in model.head_W[:, k]],
        ))
    if hard:
        for p in out:
            model.prototypes[p.k] = X[p.source_index]
    return out


@dataclass
class PrototypeContribution:
    k: int
    cls: int
    similarity: float
    coefficients: list[float]
    contributions: list[float]


@dataclass
class CaseReport:
    sample_id: tuple[int, int, int] | None
    label: int | None
    predicted: int
    probabilities: list[float]
    logits: list[float]
    bias: list[float]
    concepts: list[Concept]
    prototypes: list[PrototypeContribution] = field(default_factory=list)

    def reconstructed_logits(self) -> np.ndarray:
        total = np.array(self.bias, dtype=np.float64)
        for p in self.prototypes:
            total += np.array(p.contributions)
        return total


def explain_case(model: PrototypeModel, x: np.ndarray, top_n: int = 10,
                 sample_id=None, label=None) -> CaseReport:
    """Decompose a prediction: logit_c = bias_c + sum_k sim_k * W[c, k].

    Prototypes are ranked by their contribution toward the event class.
    """
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    sims, logits, probs = predict_batch(x[None], model)
    sims, logits, probs = sims[0], logits[0], probs[0]
    protos = [PrototypeContribution(
        k=k, cls=int(model.class_of[k]), similarity=float(sims[k]),
        coefficients=[float(v) for v in model.head_W[:, k]],
        contributions=[float(sims[k] * model.head_W[c, k]) for c in range(2)],
    ) for k in range(model.K)]
    protos.sort(key=lambda p: -p.contributions[1])
    return CaseReport(
        sample_id=tuple(sample_id) if sample_id is not None else None,
        label=None if label is None else int(label),
        predicted=int(np.argmax(probs)),
        probabilities=[float(v) for v in probs],
        logits=[float(v) for v in logits],
        bias=[float(v) for v in model.head_b],
        concepts=top_concepts(x, model_index(model), top_n),
        prototypes=protos,
    )


@dataclass
class SimilarityMap:
    k: int
    cls: int
    counts: np.ndarray          # [m, n]
    weekday_counts: np.ndarray  # [7, m, n]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def cutoff_count(n: int, percentile: float) -> int:
    return max(1, math.ceil(n * percentile / 100.0))


def similarity_maps(model: PrototypeModel, X: np.ndarray, ids: Sequence[tuple[int, int, int]],
                    shape: tuple[int, int], percentile: float = 1.0,
                    epoch_weekday: int = 0) -> list[SimilarityMap]:
    """Per prototype, count where its top-``percentile`` most similar samples sit.

    Samples are ranked by (similarity desc, sample id asc), so results do not
    depend on input order. Weekday is that of the forecast interval t + 1.
    """
    if not 0 < percentile <= 100:
        raise DataError(f"percentile must be in (0, 100], got {percentile}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(ids) != X.shape[0]:
        raise DataError("need one sample id per encoding")
    sims, _ = similarities(X, model.prototypes, model.config.eps_sim)
    keep = cutoff_count(X.shape[0], percentile)
    t = np.array([i[0] for i in ids])
    r = np.array([i[1] for i in ids])
    c = np.array([i[2] for i in ids])
    out = []
    for k in range(model.K):
        order = np.lexsort((c, r, t, -sims[:, k]))[:keep]
        counts = np.zeros(shape, dtype=np.int64)
        wk = np.zeros((7,) + tuple(shape), dtype=np.int64)
        np.add.at(counts, (r[order], c[order]), 1)
        np.add.at(wk, ((t[order] + 1 + epoch_weekday) % 7, r[order], c[order]), 1)
        out.append(SimilarityMap(k, int(model.class_of[k]), counts, wk))
    return out


# ---------------------------------------------------------------- rendering


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    if isinstance(obj, list):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if hasattr(obj, "__dataclass_fields__"):
        return _plain(asdict(obj))
    return obj


def _text_case(rep: CaseReport) -> list[str]:
    lines = [f"CASE {rep.sample_id if rep.sample_id is not None else ''}".rstrip()]
    if rep.label is not None:
        lines.append(f"  observed: {CLASS_NAMES[rep.label]}")
    lines.append(f"  predicted: {CLASS_NAMES[rep.predicted]} "
                 f"(p_event={rep.probabilities[1]:.4f}, logits={rep.logits[0]:.6g}/{rep.logits[1]:.6g})")
    lines.append("  [grey] case concepts:")
    if rep.concepts:
        lines += [f"    - {c.label()}" for c in rep.concepts]
    else:
        lines.append("    no significant concepts")
    for cls, colour in ((1, "red"), (0, "blue")):
        lines.append(f"  [{colour}] {CLASS_NAMES[cls]} prototypes:")
        for p in rep.prototypes:
            if p.cls == cls:
                lines.append(f"    P{p.k}: similarity {p.similarity:.6g}, coef(event) {p.coefficients[1]:+.4f}, "
                             f"contribution(event) {p.contributions[1]:+.6g}")
    lines.append(f"  bias: {rep.bias[0]:+.6g}/{rep.bias[1]:+.6g}")
    return lines


def _text_projection(p: ProjectedPrototype) -> list[str]:
    colour = "red" if p.cls == 1 else "blue"
    lines = [f"[{colour}] P{p.k} ({CLASS_NAMES[p.cls]}) <- sample {p.source_id}, similarity {p.similarity:.6g}, "
             f"coef(event) {p.head_coefficients[1]:+.4f}"]
    lines += [f"    - {c.label()}" for c in p.top_concepts] or ["    no significant concepts"]
    return lines


def render_report(reports: Sequence, fmt: str = "text") -> bytes:
    """Render case reports and/or projected prototypes as text or JSON."""
    if fmt in ("json", "structured"):
        return (json.dumps([{"type": type(r).__name__, **_plain(r)} for r in reports],
                           indent=2, sort_keys=True) + "\n").encode()
    if fmt != "text":
        raise DataError(f"unknown report format {fmt!r}")
    lines: list[str] = []
    for r in reports:
        lines += _text_case(r) if isinstance(r, CaseReport) else _text_projection(r)
        lines.append("")
    return "\n".join(lines).encode()


def write_map(sm: SimilarityMap, out_dir) -> tuple[Path, Path]:
    """Write ``proto_k.csv`` (counts) and ``proto_k.pgm`` (max-normalized 8-bit grayscale)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"proto_{sm.k}.csv"
    np.savetxt(csv_path, sm.counts, fmt="%d", delimiter=",")
    peak = sm.counts.max()
    pix = np.zeros_like(sm.counts, dtype=np.uint8) if peak == 0 else \
        np.rint(255.0 * sm.counts / peak).astype(np.uint8)
    m, n = sm.counts.shape
    pgm_path = out_dir / f"proto_{sm.k}.pgm"
    pgm_path.write_bytes(f"P5\n{n} {m}\n255\n".encode() + pix.tobytes())
    return csv_path, pgm_path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    n, m = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(m, n)
