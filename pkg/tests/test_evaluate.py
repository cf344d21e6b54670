import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcp.cloze import DESK_CLOZE
from vcp.errors import RetrievalError, SpanError, ValidationError
from vcp.evaluate import (ASSESSMENT_HEADER, RETRIEVAL_HEADER, RetrievalIndex, assessment_from_log,
                          build_index, emit_assessment, hit_rates, rank_gallery, retrieve,
                          topk_hit_rate, video_feature)
from vcp.model import BackboneConfig, ClozeNetwork
from vcp.train import EpochRecord, TrainLog

from conftest import random_video

OPS = ["O", "SR", "SP", "TR", "TA"]


def probe_log(epochs=30, every=5, seed=0):
    rng = np.random.default_rng(seed)
    log = TrainLog(meta={"mode": "probe"})
    for e in range(1, epochs + 1):
        rec = EpochRecord(e, 1.0, 0.5)
        if e % every == 0:
            rec.test_accuracy = float(rng.uniform())
            rec.per_class_accuracy = {k: float(rng.uniform()) for k in OPS}
        log.append(rec)
    return log


class TestAssessment:
    def test_six_rows_seven_columns(self, tmp_path):
        log = probe_log()
        reps = emit_assessment({"vcp": log}, tmp_path)
        rows = list(csv.reader((tmp_path / "vcp_assessment.csv").open()))
        assert rows[0] == ASSESSMENT_HEADER == ["epoch", "overall", "O", "SR", "SP", "TR", "TA"]
        body = rows[1:]
        assert len(body) == 6 and all(len(r) == 7 for r in body)
        assert [int(r[0]) for r in body] == [5, 10, 15, 20, 25, 30]
        assert all(len(v.split(".")[1]) == 4 for r in body for v in r[1:])
        assert reps["vcp"].epochs == [5, 10, 15, 20, 25, 30]
        meta = json.loads((tmp_path / "vcp_assessment.csv.meta.json").read_text())
        assert meta["method"] == "vcp"

    def test_values_echo_log(self):
        log = probe_log(seed=3)
        rep = assessment_from_log(log, "vcp")
        for rec in log.evaluated():
            assert dict(rep.overall)[rec.epoch] == rec.test_accuracy
            for k in OPS:
                assert dict(rep.operations[k])[rec.epoch] == rec.per_class_accuracy[k]

    def test_epochs_align(self):
        rep = assessment_from_log(probe_log(), "x")
        assert all([e for e, _ in s] == rep.epochs for s in rep.operations.values())

    def test_cadence_mismatch(self):
        with pytest.raises(ValidationError, match="cadence"):
            assessment_from_log(probe_log(every=3), "vcp")
        with pytest.raises(ValidationError):
            assessment_from_log(probe_log(epochs=25), "vcp")

    def test_missing_operation_and_range(self):
        log = probe_log()
        del log.evaluated()[0].per_class_accuracy["TA"]
        with pytest.raises(ValidationError, match="TA"):
            assessment_from_log(log, "vcp")
        log = probe_log()
        log.evaluated()[1].per_class_accuracy["O"] = 1.5
        with pytest.raises(ValidationError, match=r"\[0, 1\]"):
            assessment_from_log(log, "vcp")

    def test_no_logs(self, tmp_path):
        with pytest.raises(ValidationError):
            emit_assessment({}, tmp_path)

    def test_two_methods(self, tmp_path):
        emit_assessment({"vcp": probe_log(seed=1), "random": probe_log(seed=2)}, tmp_path)
        assert (tmp_path / "vcp_assessment.csv").exists() and (tmp_path / "random_assessment.csv").exists()


def index_of(vectors, labels=None, ids=None):
    n = len(vectors)
    return RetrievalIndex(ids or [f"g{i}" for i in range(n)], labels or list(range(n)), np.array(vectors, float))


class TestRetrieve:
    def test_hand_vectors(self):
        idx = index_of([[0, 1, 0], [1, 0, 0], [1, 1, 0]])
        out = retrieve(np.array([1.0, 0, 0]), idx, 3)
        assert [r[0] for r in out] == ["g1", "g2", "g0"]
        np.testing.assert_allclose([r[2] for r in out], [1.0, np.sqrt(0.5), 0.0], atol=1e-12)

    def test_exact_match_first(self, rng):
        feats = rng.standard_normal((6, 5))
        out = retrieve(feats[4], index_of(list(feats)), 1)
        assert out[0][0] == "g4" and abs(out[0][2] - 1.0) < 1e-12

    def test_full_gallery_is_permutation(self, rng):
        idx = index_of(list(rng.standard_normal((7, 4))))
        out = retrieve(rng.standard_normal(4), idx, 7)
        assert sorted(r[0] for r in out) == sorted(idx.video_ids)
        sims = [r[2] for r in out]
        assert sims == sorted(sims, reverse=True)

    def test_ties_by_video_id(self):
        idx = index_of([[1, 0], [2, 0], [3, 0]], ids=["c", "a", "b"])
        assert [r[0] for r in retrieve(np.array([1.0, 0]), idx, 3)] == ["a", "b", "c"]

    def test_k_bounds(self, rng):
        idx = index_of(list(rng.standard_normal((3, 2))))
        for k in (0, 4):
            with pytest.raises(ValidationError):
                retrieve(np.ones(2), idx, k)

    def test_empty_gallery(self):
        idx = RetrievalIndex([], [], np.zeros((0, 4)))
        with pytest.raises(RetrievalError):
            retrieve(np.ones(4), idx, 1)
        with pytest.raises(RetrievalError):
            rank_gallery(np.ones(4), idx)

    def test_index_validation(self):
        with pytest.raises(ValidationError, match="unique"):
            index_of([[1, 0], [0, 1]], ids=["a", "a"])
        with pytest.raises(ValidationError, match="finite"):
            index_of([[np.nan, 0]])
        with pytest.raises(ValidationError):
            RetrievalIndex(["a"], [0], np.ones((1, 2)), distance="l2")

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
    def test_scaling_invariance(self, seed, c):
        r = np.random.default_rng(seed)
        feats = r.standard_normal((8, 5))
        q = r.standard_normal(5)
        a, _ = rank_gallery(q, index_of(list(feats)))
        b, _ = rank_gallery(q * c, index_of(list(feats * c)))
        assert a == b


class TestHitRate:
    def test_k1_example(self):
        assert hit_rates(["a"], [["a", "b", "a"]], [1]) == {1: 1.0}
        assert hit_rates(["b"], [["a", "b", "a"]], [1, 2]) == {1: 0.0, 2: 1.0}

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_monotone_and_full_coverage(self, seed):
        r = np.random.default_rng(seed)
        n, classes = 12, 4
        labels = [int(c) for c in r.permutation(np.arange(n) % classes)]
        idx = index_of(list(r.standard_normal((n, 3))), labels=labels)
        queries = [(f"q{i}", int(r.integers(classes)), r.standard_normal(3)) for i in range(6)]
        rates = topk_hit_rate(queries, idx, range(1, n + 1)).rates
        vals = [rates[k] for k in range(1, n + 1)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        assert rates[n] == 1.0

    def test_unlabelled_query(self, rng):
        idx = index_of(list(rng.standard_normal((3, 2))))
        with pytest.raises(ValidationError, match="label"):
            topk_hit_rate([("q", None, np.ones(2))], idx, [1])
        video = random_video(rng, frames=20, size=20, label=None)
        with pytest.raises(ValidationError, match="label"):
            topk_hit_rate([video], idx, [1])

    def test_k_exceeds_gallery(self, rng):
        idx = index_of(list(rng.standard_normal((3, 2))))
        with pytest.raises(ValidationError):
            topk_hit_rate([("q", 0, np.ones(2))], idx, [1, 4])

    def test_csv(self, rng, tmp_path):
        idx = index_of(list(rng.standard_normal((4, 3))), labels=[0, 1, 0, 1])
        res = topk_hit_rate([("q0", 0, rng.standard_normal(3)), ("q1", 1, rng.standard_normal(3))], idx, [1, 3])
        res.write_csv(tmp_path / "r.csv")
        rows = list(csv.reader((tmp_path / "r.csv").open()))
        assert rows[0] == RETRIEVAL_HEADER
        assert len(rows) == 1 + 2 * 3
        assert [r[1] for r in rows[1:4]] == ["1", "2", "3"]


@pytest.fixture(scope="module")
def net():
    return ClozeNetwork(BackboneConfig(), seed=0)


class TestIndex:
    def test_size_determinism_and_identical_videos(self, net):
        r = np.random.default_rng(0)
        vids = [random_video(r, frames=24, size=20, video_id=f"v{i}", label=i % 2) for i in range(3)]
        twin = random_video(np.random.default_rng(9), frames=24, size=20, video_id="t", label=0)
        twin2 = type(twin)(twin.frames.copy(), "t2", 0)
        a = build_index(vids + [twin, twin2], net, DESK_CLOZE)
        b = build_index(vids + [twin, twin2], net, DESK_CLOZE)
        assert len(a) == 5 and a.video_ids == ["v0", "v1", "v2", "t", "t2"]
        assert a.features.tobytes() == b.features.tobytes()
        assert a.features[3].tobytes() == a.features[4].tobytes()
        assert a.labels == [0, 1, 0, 0, 0]

    def test_short_video_names_id(self, net, rng):
        short = random_video(rng, frames=5, size=20, video_id="tiny")
        with pytest.raises(SpanError, match="tiny"):
            video_feature(short, net, DESK_CLOZE)
