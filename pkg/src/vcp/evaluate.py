"""Model assessment reports and nearest-neighbour retrieval on conv5 features."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clipdata import DatasetManifest, VideoTensor
from .cloze import ClozeConfig, OperationKind
from .errors import RetrievalError, SpanError, ValidationError
from .model import ClozeNetwork
from .train import TrainLog, test_clips

OPERATION_COLUMNS = [k.short for k in OperationKind]
ASSESSMENT_HEADER = ["epoch", "overall", *OPERATION_COLUMNS]
RETRIEVAL_HEADER = ["query_id", "rank", "gallery_id", "label", "similarity"]
PROBE_EPOCHS = tuple(range(5, 31, 5))


@dataclass
class AssessmentReport:
    method: str
    operations: dict  # short name -> [(epoch, accuracy)]
    overall: list

    @property
    def epochs(self):
        return [e for e, _ in self.overall]

    def rows(self):
        per = {k: dict(v) for k, v in self.operations.items()}
        return [[e, acc, *(per[k][e] for k in OPERATION_COLUMNS)] for e, acc in self.overall]

    def write_csv(self, path, meta=None):
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ASSESSMENT_HEADER)
            for epoch, *vals in self.rows():
                w.writerow([epoch, *(f"{v:.4f}" for v in vals)])
        _write_meta(path, {"method": self.method, **(meta or {})})
        return path


def _write_meta(csv_path, meta):
    # CSV stays header-exact; the producing config travels in a sidecar
    Path(str(csv_path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1), encoding="utf-8")


def assessment_from_log(log: TrainLog, method: str, epochs=PROBE_EPOCHS) -> AssessmentReport:
    recs = log.evaluated()
    found = [r.epoch for r in recs]
    if epochs is not None and found != list(epochs):
        raise ValidationError(f"{method}: evaluated epochs {found} do not follow the cadence {list(epochs)}")
    ops = {k: [] for k in OPERATION_COLUMNS}
    overall = []
    for r in recs:
        per = r.per_class_accuracy or {}
        missing = [k for k in OPERATION_COLUMNS if k not in per]
        if missing:
            raise ValidationError(f"{method}: epoch {r.epoch} lacks accuracies for {missing}")
        for k in OPERATION_COLUMNS:
            ops[k].append((r.epoch, float(per[k])))
        overall.append((r.epoch, float(r.test_accuracy)))
    for series in [overall, *ops.values()]:
        if any(not 0.0 <= a <= 1.0 for _, a in series):
            raise ValidationError(f"{method}: accuracy outside [0, 1]")
    return AssessmentReport(method, ops, overall)


def emit_assessment(logs: dict, out_dir, epochs=PROBE_EPOCHS, meta=None):
    """Write ``<method>_assessment.csv`` per probe log; returns ``{method: report}``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not logs:
        raise ValidationError("no probe logs given")
    reports = {}
    for method, log in logs.items():
        rep = assessment_from_log(log, method, epochs)
        rep.write_csv(out_dir / f"{method}_assessment.csv", {**(meta or {}), "log_meta": log.meta})
        reports[method] = rep
    return reports


# -- retrieval ---------------------------------------------------------------


@dataclass
class RetrievalIndex:
    video_ids: list
    labels: list
    features: np.ndarray  # [N, F] float64
    distance: str = "cosine"
    _unit: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.video_ids) != self.features.shape[0]:
            raise ValidationError("features must be [gallery, dim] with one id per row")
        if len(set(self.video_ids)) != len(self.video_ids):
            raise ValidationError("gallery video ids must be unique")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("gallery features must be finite")
        if self.distance != "cosine":
            raise ValidationError(f"unsupported distance {self.distance!r}")
        self._unit = _unit_rows(self.features)

    def __len__(self):
        return len(self.video_ids)


def _unit_rows(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, 1e-300)


def video_feature(video: VideoTensor, network: ClozeNetwork, config: ClozeConfig, n_clips=10):
    try:
        clips = test_clips(video, config, n_clips)
    except SpanError as exc:
        raise SpanError(exc.required, exc.actual, video.video_id) from None
    return network.extract_conv5(clips).astype(np.float64).mean(axis=0)


def build_index(videos, network: ClozeNetwork, config: ClozeConfig, n_clips=10) -> RetrievalIndex:
    """One averaged conv5 vector per gallery video, in input order."""
    if isinstance(videos, DatasetManifest):
        videos = videos.load_all()
    feats = [video_feature(v, network, config, n_clips) for v in videos]
    dim = network.config.feature_dim
    return RetrievalIndex([v.video_id for v in videos], [v.class_label for v in videos],
                          np.array(feats).reshape(len(feats), dim))


def rank_gallery(query, index: RetrievalIndex):
    """All gallery positions ordered by descending cosine, ties by ascending video_id."""
    if len(index) == 0:
        raise RetrievalError("gallery is empty")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.features.shape[1],) or not np.all(np.isfinite(q)):
        raise ValidationError(f"query must be a finite vector of length {index.features.shape[1]}")
    sims = index._unit @ _unit_rows(q)
    order = sorted(range(len(index)), key=lambda i: (-sims[i], index.video_ids[i]))
    return order, sims


def retrieve(query, index: RetrievalIndex, k):
    """Top ``k`` as ``[(video_id, label, similarity)]``; ``query`` is a feature vector."""
    if len(index) == 0:
        raise RetrievalError("gallery is empty")
    if not 1 <= k <= len(index):
        raise ValidationError(f"k must be in [1, {len(index)}], got {k}")
    order, sims = rank_gallery(query, index)
    return [(index.video_ids[i], index.labels[i], float(sims[i])) for i in order[:k]]


def retrieve_video(video: VideoTensor, index, network, config, k, n_clips=10):
    return retrieve(video_feature(video, network, config, n_clips), index, k)


def hit_rates(query_labels, ranked_labels, ks):
    """Fraction of queries whose first ``k`` ranked labels contain their own label."""
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValidationError("k values must be >= 1")
    q = len(query_labels)
    first_hit = []
    for lab, ranked in zip(query_labels, ranked_labels):
        pos = next((i for i, r in enumerate(ranked) if r == lab), None)
        first_hit.append(np.inf if pos is None else pos + 1)
    first_hit = np.array(first_hit, dtype=np.float64)
    return {k: float((first_hit <= k).sum() / q) if q else 0.0 for k in ks}


@dataclass
class RetrievalResult:
    rates: dict
    rows: list  # (query_id, rank, gallery_id, label, similarity)

    def write_csv(self, path, meta=None):
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RETRIEVAL_HEADER)
            for qid, rank, gid, lab, sim in self.rows:
                w.writerow([qid, rank, gid, "" if lab is None else lab, f"{sim:.6f}"])
        _write_meta(path, {"hit_rates": {str(k): v for k, v in self.rates.items()}, **(meta or {})})
        return path


def topk_hit_rate(queries, index: RetrievalIndex, ks, network=None, config=None, n_clips=10):
    """Hit rate per k for labelled query videos (or ``(id, label, feature)`` triples)."""
    if isinstance(queries, DatasetManifest):
        queries = queries.load_all()
    triples = []
    for q in queries:
        if isinstance(q, VideoTensor):
            if q.class_label is None:
                raise ValidationError(f"query {q.video_id} has no class label")
            triples.append((q.video_id, q.class_label, video_feature(q, network, config, n_clips)))
        else:
            qid, lab, feat = q
            if lab is None:
                raise ValidationError(f"query {qid} has no class label")
            triples.append((qid, lab, feat))
    ks = sorted(set(int(k) for k in ks))
    if ks and ks[-1] > len(index):
        raise ValidationError(f"k={ks[-1]} exceeds gallery size {len(index)}")
    rows, ranked_labels = [], []
    kmax = ks[-1] if ks else 0
    for qid, _, feat in triples:
        order, sims = rank_gallery(feat, index)
        ranked_labels.append([index.labels[i] for i in order])
        rows += [(qid, r + 1, index.video_ids[i], index.labels[i], float(sims[i]))
                 for r, i in enumerate(order[:kmax])]
    return RetrievalResult(hit_rates([t[1] for t in triples], ranked_labels, ks), rows)
