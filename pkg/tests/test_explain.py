import json

import numpy as np
import pytest

from oracles import brute_argmax_similarity
from toys import random_model

from geoproto.config import RunConfig, SynthConfig
from geoproto.errors import DataError
from geoproto.explain import (explain_case, project, read_pgm, render_report, similarity_maps,
                              top_concepts, write_map)
from geoproto.model import ModelConfig, predict_batch
from geoproto.pipeline import Run


def grid_ids(n_rows, n_cols, t=0):
    return [(t, r, c) for r in range(n_rows) for c in range(n_cols)]


def test_single_prototype_projects_onto_itself(rng):
    m = random_model(rng, K=2)
    X = rng.random((10, m.D))
    X[6] = m.prototypes[0]
    p = project(m, X)[0]
    assert p.source_index == 6 and p.similarity == pytest.approx(1 / m.config.eps_sim, rel=1e-12)


def test_projection_matches_linear_scan(rng):
    m = random_model(rng, K=4)
    X = np.round(rng.random((162, m.D)), 1)
    X[40] = X[7]                  # duplicate rows tie; lowest id wins
    for p in project(m, X, grid_ids(18, 9)):
        best, rows = brute_argmax_similarity(X, m.prototypes[p.k], m.config.eps_sim)
        # selection is exact; the value may differ in the last bit since the scan sums with fsum
        assert p.source_index == min(rows)
        assert p.similarity == pytest.approx(best, rel=1e-14)


def test_hard_projection_overwrites_prototypes(rng):
    m = random_model(rng, K=4)
    X = rng.random((30, m.D))
    out = project(m, X, hard=True)
    for p in out:
        np.testing.assert_array_equal(m.prototypes[p.k], X[p.source_index])


def test_empty_projection_set(rng):
    with pytest.raises(DataError):
        project(random_model(rng), np.zeros((0, 3)))


def test_top_concepts_ranking():
    idx = [("f", "center", "global-higher"), ("f", "center", "global-lower"), ("f", "near-NE", "global-higher")]
    got = top_concepts(np.array([0.4, 0.0, 0.9]), idx, top_n=5)
    assert [c.region for c in got] == ["near-NE", "center"]
    assert got[1].label() == "f: global-higher, center, strength 0.400"


def test_contributions_rebuild_logits(rng):
    m = random_model(rng, K=8)
    for x in rng.random((20, m.D)):
        rep = explain_case(m, x)
        _, logits, _ = predict_batch(x[None], m)
        np.testing.assert_allclose(rep.reconstructed_logits(), logits[0], atol=1e-6)
        assert rep.logits == pytest.approx(list(logits[0]), abs=0)


def test_all_zero_case_has_no_concepts(rng):
    m = random_model(rng, K=4)
    rep = explain_case(m, np.zeros(m.D))
    assert rep.concepts == []
    assert "no significant concepts" in render_report([rep]).decode()
    d2 = (m.prototypes**2).sum(axis=1)
    for p in rep.prototypes:
        assert p.similarity == pytest.approx(1 / (d2[p.k] + m.config.eps_sim))


def test_case_equal_to_positive_prototype_ranks_first(rng):
    m = random_model(rng, K=4)
    k = int(np.flatnonzero(m.class_of == 1)[0])
    m.head_W[1, k] = abs(m.head_W[1, k]) + 0.1
    rep = explain_case(m, m.prototypes[k].copy())
    assert rep.prototypes[0].k == k


def test_explain_dimension_mismatch(rng):
    m = random_model(rng)
    with pytest.raises(DataError, match="dimension"):
        explain_case(m, np.zeros(m.D + 2))


def test_text_report_sections(rng):
    m = random_model(rng, K=4)
    rep = explain_case(m, rng.random(m.D), sample_id=(3, 1, 2), label=1)
    text = render_report([rep, *project(m, rng.random((5, m.D)))]).decode()
    for needle in ("CASE (3, 1, 2)", "[grey] case concepts", "[red] event prototypes",
                   "[blue] no-event prototypes", "bias:"):
        assert needle in text


def test_structured_round_trip(rng):
    m = random_model(rng, K=4)
    rep = explain_case(m, rng.random(m.D), sample_id=(1, 2, 3), label=0)
    back = json.loads(render_report([rep], "structured"))[0]
    assert back["type"] == "CaseReport"
    assert back["logits"] == rep.logits and back["probabilities"] == rep.probabilities
    for p, q in zip(back["prototypes"], rep.prototypes):
        assert p["similarity"] == q.similarity and p["contributions"] == q.contributions
    assert [c["strength"] for c in back["concepts"]] == [c.strength for c in rep.concepts]


def test_unknown_format(rng):
    with pytest.raises(DataError):
        render_report([], "yaml")


def test_full_percentile_counts_every_sample(rng):
    m = random_model(rng, K=3)
    ids = grid_ids(4, 5)
    maps = similarity_maps(m, rng.random((20, m.D)), ids, (4, 5), percentile=100)
    assert all(sm.total == 20 for sm in maps)
    assert all(sm.weekday_counts.sum() == 20 for sm in maps)


def test_identical_prototypes_identical_maps(rng):
    m = random_model(rng, K=4)
    m.prototypes[3] = m.prototypes[1]
    maps = similarity_maps(m, rng.random((40, m.D)), grid_ids(5, 8), (5, 8), percentile=10)
    np.testing.assert_array_equal(maps[1].counts, maps[3].counts)


def test_maps_ignore_sample_order(rng):
    m = random_model(rng, K=3)
    X = np.round(rng.random((60, m.D)), 1)
    X[10:20] = X[0]                # many ties at the cutoff
    ids = [(t, r, c) for t in range(3) for r in range(4) for c in range(5)]
    perm = rng.permutation(60)
    a = similarity_maps(m, X, ids, (4, 5), percentile=15)
    b = similarity_maps(m, X[perm], [ids[i] for i in perm], (4, 5), percentile=15)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.counts, y.counts)
        np.testing.assert_array_equal(x.weekday_counts, y.weekday_counts)


@pytest.mark.parametrize("pct", [0, -1, 100.5])
def test_percentile_range(rng, pct):
    m = random_model(rng)
    with pytest.raises(DataError, match="percentile"):
        similarity_maps(m, np.zeros((1, m.D)), [(0, 0, 0)], (1, 1), pct)


def test_weekday_follows_forecast_interval(rng):
    m = random_model(rng, K=2)
    ids = [(t, 0, 0) for t in range(7)]
    sm = similarity_maps(m, rng.random((7, m.D)), ids, (1, 1), percentile=100, epoch_weekday=2)[0]
    assert sm.weekday_counts[:, 0, 0].tolist() == [1] * 7
    one = similarity_maps(m, rng.random((1, m.D)), [(4, 0, 0)], (1, 1), 100, epoch_weekday=2)[0]
    assert one.weekday_counts[(4 + 1 + 2) % 7, 0, 0] == 1


def test_map_files(rng, tmp_path):
    m = random_model(rng, K=2)
    sm = similarity_maps(m, rng.random((48, m.D)), grid_ids(6, 8), (6, 8), percentile=30)[0]
    csv, pgm = write_map(sm, tmp_path / "maps")
    counts = np.loadtxt(csv, delimiter=",", dtype=np.int64, ndmin=2)
    assert counts.shape == (6, 8)
    np.testing.assert_array_equal(counts, sm.counts)
    pix = read_pgm(pgm)
    assert pix.shape == (6, 8) and pix.max() == 255
    assert np.unravel_index(pix.argmax(), pix.shape) == np.unravel_index(counts.argmax(), counts.shape)


@pytest.mark.slow
def test_left_half_regime_dominates_positive_maps(tmp_path):
    cfg = RunConfig(synth=SynthConfig(pattern="heterogeneous", hotspot_prob=0.02),
                    model=ModelConfig(max_epochs=20)).validate()
    run = Run(cfg, tmp_path)
    run.stage_train()
    maps = run.stage_maps()
    half = cfg.synth.cols // 2
    pos = [sm for sm in maps if sm.cls == 1]
    left = sum(int(sm.counts[:, :half].sum()) for sm in pos)
    total = sum(sm.total for sm in pos)
    assert left / total >= 0.70, f"left share {left / total:.3f}"
