"""Training procedures: cloze pre-training, action fine-tuning and frozen probing.

Randomness is fully derived from ``TrainConfig.seed``:

* the per-epoch visiting order comes from one ``numpy`` generator whose
  state is stored in every checkpoint;
* every training item is assembled from ``item_seed(seed, epoch, video_index)``;
* evaluation items use ``item_seed(eval_seed, video_index, repeat)`` and are
  therefore identical across epochs and across methods.

Given one BLAS thread, two runs with equal inputs produce equal logs and
checkpoints byte for byte, and a run resumed from a checkpoint continues
the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import json
import math
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .clipdata import DatasetManifest, VideoTensor, normalize_clip
from .cloze import ClozeConfig, OperationKind, apply_crop, assemble_item, item_seed, sample_crop_window
from .errors import CheckpointError, ConfigError, SpanError
from .model import (NUM_OPERATIONS, BackboneConfig, Checkpoint, ClozeNetwork, init_head,
                    network_from_checkpoint, save_checkpoint)

log = logging.getLogger(__name__)

MODES = ("pretrain_vcp", "finetune_action", "probe")
DEFAULT_EPOCHS = {"pretrain_vcp": 300, "finetune_action": 150, "probe": 30}
OPERATION_NAMES = [k.short for k in OperationKind]


@dataclass
class TrainConfig:
    mode: str = "pretrain_vcp"
    epochs: int | None = None
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 42
    init: str | None = None  # None / "random" / checkpoint path
    freeze_backbone: bool = False
    eval_every: int | None = None
    eval_seed: int = 1234
    eval_repeats: int = 1
    test_clips: int = 10
    checkpoint_every: int = 0
    grad_clip: float | None = None  # global L2 norm over the trainable tensors

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.mode]
        if self.eval_every is None:
            self.eval_every = 5 if self.mode == "probe" else 1
        if self.mode == "probe":
            self.freeze_backbone = True
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and eval_every >= 1 required")
        if not self.learning_rate > 0 or not 0 <= self.momentum < 1:
            raise ConfigError("learning_rate > 0 and momentum in [0, 1) required")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive when set")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float | None = None
    per_class_accuracy: dict | None = None
    backbone_hash: str | None = None
    rng_checkpoint: dict | None = None
    wall_time: float = 0.0

    def to_json(self, include_timing=False):
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time")
        return d


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, rec: EpochRecord):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError(f"epoch {rec.epoch} not after {self.records[-1].epoch}")
        self.records.append(rec)

    def evaluated(self):
        return [r for r in self.records if r.test_accuracy is not None]

    def to_jsonl(self, include_timing=False):
        lines = [json.dumps({"meta": self.meta}, sort_keys=True)]
        lines += [json.dumps(r.to_json(include_timing), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path, include_timing=False):
        Path(path).write_text(self.to_jsonl(include_timing), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, text):
        out = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            if "meta" in d:
                out.meta = d["meta"]
            else:
                out.records.append(EpochRecord(**d))
        return out

    @classmethod
    def read(cls, path):
        return cls.from_jsonl(Path(path).read_text(encoding="utf-8"))


@dataclass
class TrainResult:
    network: ClozeNetwork
    log: TrainLog
    checkpoint: Checkpoint


# -- batching ----------------------------------------------------------------


def cloze_batch(items):
    """Stack items into ``([B, m, C, k, h, w] float32, labels)``."""
    x = np.stack([np.stack([normalize_clip(c) for c in it.clips()]) for it in items])
    y = np.array([it.class_index for it in items], dtype=np.int64)
    return x, y


def sample_action_clip(video: VideoTensor, config: ClozeConfig, rng):
    k = config.clip_len
    if video.frame_count < k:
        raise SpanError(k, video.frame_count, video.video_id)
    s = int(rng.integers(0, video.frame_count - k + 1))
    window = sample_crop_window(config, rng)
    return apply_crop(video.frames[s : s + k], window, config)


def center_window(config: ClozeConfig):
    (rh, rw), (ch, cw) = config.resize, config.crop
    return (rh - ch) // 2, (rw - cw) // 2


def test_clips(video: VideoTensor, config: ClozeConfig, n_clips=10):
    """Up to ``n_clips`` clips at uniformly spaced starts, center-cropped (``[n, C, k, h, w]``)."""
    k = config.clip_len
    if video.frame_count < k:
        raise SpanError(k, video.frame_count, video.video_id)
    n = max(1, min(n_clips, video.frame_count - k + 1))
    starts = np.unique(np.rint(np.linspace(0, video.frame_count - k, n)).astype(int))
    window = center_window(config)
    return np.stack([normalize_clip(apply_crop(video.frames[s : s + k], window, config)) for s in starts])


def predict_video(video, network: ClozeNetwork, config: ClozeConfig, n_clips=10):
    """Average of per-clip softmax outputs of the action head."""
    logits, _ = network.action_forward(test_clips(video, config, n_clips))
    probs = tc.softmax(logits.astype(np.float64))
    return probs.mean(axis=0)


# -- shared loop -------------------------------------------------------------


def _rng_state(rng):
    return rng.bit_generator.state


def _restore_rng(state):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def _load_videos(manifest, split):
    if isinstance(manifest, DatasetManifest):
        return manifest.split(split).load_all()
    return [v for v, s in manifest if s == split]


def _trainable(network, cfg, head):
    names = [] if cfg.freeze_backbone else network.backbone_names()
    return names + network.head_names(head)


def _step(network, grads, names, optim, clip=None):
    if clip is not None:
        norm = math.sqrt(sum(float(np.vdot(grads[n], grads[n])) for n in names))
        if norm > clip:
            scale = np.float32(clip / norm)
            grads = {n: grads[n] * scale for n in names}
    for name in names:
        tc.sgd_momentum_step(network.params[name], grads[name], optim, name)


def _checkpoint(network, optim, epoch, rng, snapshot, log_):
    return Checkpoint(
        params=network.params,
        velocity=optim.velocity,
        epoch=epoch,
        config={**snapshot, "network": network.snapshot(),
                "train_log": [r.to_json() for r in log_.records]},
        rng_state=_rng_state(rng),
        optimizer={"learning_rate": optim.learning_rate, "momentum": optim.momentum},
    )


def _run(network, cfg, head, train_videos, make_batch, evaluate, snapshot, resume=None,
         checkpoint_dir=None, check_items=None):
    names = _trainable(network, cfg, head)
    optim = tc.OptimState(cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    log_ = TrainLog(meta=snapshot)
    start_epoch = 1
    if resume is not None:
        network.params = {k: v.copy() for k, v in resume.params.items()}
        optim.velocity = {k: v.copy() for k, v in resume.velocity.items()}
        rng = _restore_rng(resume.rng_state)
        for d in resume.config.get("train_log", []):
            log_.append(EpochRecord(**d))
        start_epoch = resume.epoch + 1
    frozen_hash = network.backbone_hash() if cfg.freeze_backbone else None

    for epoch in range(start_epoch, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_videos))
        total_loss = 0.0
        correct = 0
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            x, y = make_batch(epoch, idx)
            loss, logits, grads = network_step(network, head, x, y, not cfg.freeze_backbone)
            _step(network, grads, names, optim, cfg.grad_clip)
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y).sum())
        n = max(len(order), 1)
        rec = EpochRecord(epoch, total_loss / n, correct / n)
        if frozen_hash is not None:
            rec.backbone_hash = network.backbone_hash()
            if rec.backbone_hash != frozen_hash:
                raise RuntimeError("backbone changed during frozen training")
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            rec.test_accuracy, rec.per_class_accuracy = evaluate(network)
        rec.rng_checkpoint = {"epoch": epoch, "order_rng": _rng_state(rng)["state"]}
        rec.wall_time = time.perf_counter() - t0
        log_.append(rec)
        log.info("[%s] epoch %d loss %.4f acc %.3f test %s", cfg.mode, epoch, rec.train_loss,
                 rec.train_accuracy, rec.test_accuracy)
        if checkpoint_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch:04d}.vcpc",
                            _checkpoint(network, optim, epoch, rng, snapshot, log_))
    final_epoch = max(cfg.epochs, start_epoch - 1)
    return TrainResult(network, log_, _checkpoint(network, optim, final_epoch, rng, snapshot, log_))


def network_step(network, head, x, y, train_backbone=True):
    """One forward/backward pass; returns ``(loss, logits, grads)``."""
    if head == "head_action":
        logits, cache = network.action_forward(x)
        loss, g = tc.softmax_cross_entropy(logits, y)
        grads = network.action_backward(g, cache, train_backbone)
    else:
        logits, cache = network.cloze_forward(x, head)
        loss, g = tc.softmax_cross_entropy(logits, y)
        grads = network.cloze_backward(g, cache, train_backbone)
    return loss, logits, grads


def operation_accuracy(network, items, head="head_vcp", batch_size=32):
    """Overall and per-operation accuracy of ``head`` on fixed cloze items."""
    preds, labels = [], []
    for b in range(0, len(items), batch_size):
        x, y = cloze_batch(items[b : b + batch_size])
        logits, _ = network.cloze_forward(x, head)
        preds.append(logits.argmax(axis=1))
        labels.append(y)
    preds = np.concatenate(preds) if preds else np.zeros(0, int)
    labels = np.concatenate(labels) if labels else np.zeros(0, int)
    per = {}
    for k in OperationKind:
        mask = labels == int(k)
        per[k.short] = float((preds[mask] == k).mean()) if mask.any() else 0.0
    overall = float((preds == labels).mean()) if labels.size else 0.0
    return overall, per


def evaluation_items(videos, config: ClozeConfig, eval_seed, repeats=1, kinds=None):
    return [assemble_item(v, config, item_seed(eval_seed, i, r), kinds)
            for i, v in enumerate(videos) for r in range(repeats)]


def _snapshot(cfg, cloze, backbone, extra=None):
    return {
        "train": asdict(cfg),
        "cloze": asdict(cloze),
        "backbone": backbone.to_dict(),
        "seed": cfg.seed,
        **(extra or {}),
    }


def _check_span(videos, config):
    usable = [v for v in videos if v.frame_count >= config.span]
    if not usable:
        raise ConfigError(f"no training video has the {config.span} frames a cloze item needs")
    for v in videos:
        if v.frame_count < config.span:
            raise SpanError(config.span, v.frame_count, v.video_id)


# -- procedures --------------------------------------------------------------


def pretrain_vcp(manifest, cloze: ClozeConfig, cfg: TrainConfig, backbone: BackboneConfig | None = None,
                 num_action_classes=None, resume: Checkpoint | None = None, checkpoint_dir=None,
                 kinds=None):
    """Train backbone and ``head_vcp`` end to end on the 5-way operation task.

    ``manifest`` is a :class:`DatasetManifest` (its ``train``/``test`` splits
    are used) or an iterable of ``(VideoTensor, split)`` pairs.
    """
    if cfg.mode != "pretrain_vcp":
        cfg = replace(cfg, mode="pretrain_vcp")
    train_videos = _load_videos(manifest, "train")
    test_videos = _load_videos(manifest, "test")
    _check_span(train_videos, cloze)
    backbone = backbone or _desk_backbone(cloze, train_videos[0].channels)
    if num_action_classes is None:
        num_action_classes = _num_classes(train_videos + test_videos)
    network = ClozeNetwork(backbone, cloze.clips_per_item, num_action_classes, seed=cfg.seed)
    eval_items = evaluation_items(test_videos, cloze, cfg.eval_seed, cfg.eval_repeats, kinds)

    def make_batch(epoch, idx):
        return cloze_batch([assemble_item(train_videos[i], cloze, item_seed(cfg.seed, epoch, int(i)), kinds)
                            for i in idx])

    def evaluate(net):
        return operation_accuracy(net, eval_items, "head_vcp")

    snapshot = _snapshot(cfg, cloze, backbone, {"kinds": [int(k) for k in kinds] if kinds else None})
    return _run(network, cfg, "head_vcp", train_videos, make_batch, evaluate, snapshot, resume,
                checkpoint_dir)


def finetune_action(manifest, cloze: ClozeConfig, cfg: TrainConfig, backbone: BackboneConfig | None = None,
                    init: Checkpoint | None = None, resume: Checkpoint | None = None, checkpoint_dir=None):
    """Supervised action recognition with all layers trainable.

    The backbone comes from ``init`` (a pre-trained checkpoint) or is drawn
    from ``cfg.seed``; ``head_action`` is always freshly drawn.
    """
    if cfg.mode != "finetune_action":
        cfg = replace(cfg, mode="finetune_action")
    train_videos = _load_videos(manifest, "train")
    test_videos = _load_videos(manifest, "test")
    num_classes = _num_classes(train_videos + test_videos)
    if init is not None:
        network = network_from_checkpoint(init)
        if backbone is not None and network.config != backbone:
            raise CheckpointError("checkpoint backbone does not match the configured backbone",
                                  section="params")
        if network.num_action_classes != num_classes:
            network = _with_action_classes(network, num_classes)
        backbone = network.config
    else:
        backbone = backbone or _desk_backbone(cloze, train_videos[0].channels)
        network = ClozeNetwork(backbone, cloze.clips_per_item, num_classes, seed=cfg.seed)
    init_head(network.params, "head_action", item_seed(cfg.seed, 0xAC7))

    def make_batch(epoch, idx):
        clips, labels = [], []
        for i in idx:
            rng = np.random.default_rng(item_seed(cfg.seed, epoch, int(i)))
            clips.append(normalize_clip(sample_action_clip(train_videos[i], cloze, rng)))
            labels.append(train_videos[i].class_label)
        return np.stack(clips), np.array(labels, dtype=np.int64)

    def evaluate(net):
        return action_accuracy(net, test_videos, cloze, cfg.test_clips)

    snapshot = _snapshot(cfg, cloze, backbone, {"init": cfg.init or "random"})
    return _run(network, cfg, "head_action", train_videos, make_batch, evaluate, snapshot, resume,
                checkpoint_dir)


def action_accuracy(network, videos, config, n_clips=10):
    preds = np.array([int(np.argmax(predict_video(v, network, config, n_clips))) for v in videos])
    labels = np.array([v.class_label for v in videos])
    per = {str(c): float((preds[labels == c] == c).mean()) for c in sorted(set(labels.tolist()))}
    return (float((preds == labels).mean()) if len(videos) else 0.0), per


def probe_train(manifest, cloze: ClozeConfig, cfg: TrainConfig, init: Checkpoint | None, kinds=None):
    """Train only ``head_probe`` on top of a frozen backbone (model assessment).

    Test accuracy per operation is recorded every ``cfg.eval_every`` epochs
    (5 by default) on fixed evaluation items.
    """
    if init is None:
        raise ConfigError("probe training requires an init checkpoint")
    if cfg.mode != "probe":
        cfg = replace(cfg, mode="probe")
    network = network_from_checkpoint(init)
    init_head(network.params, "head_probe", item_seed(cfg.seed, 0x9B0BE))
    train_videos = _load_videos(manifest, "train")
    test_videos = _load_videos(manifest, "test")
    _check_span(train_videos, cloze)
    eval_items = evaluation_items(test_videos, cloze, cfg.eval_seed, cfg.eval_repeats, kinds)

    def make_batch(epoch, idx):
        return cloze_batch([assemble_item(train_videos[i], cloze, item_seed(cfg.seed, epoch, int(i)), kinds)
                            for i in idx])

    def evaluate(net):
        return operation_accuracy(net, eval_items, "head_probe")

    snapshot = _snapshot(cfg, cloze, network.config, {"init": cfg.init})
    return _run(network, cfg, "head_probe", train_videos, make_batch, evaluate, snapshot)


def _num_classes(videos):
    labels = [v.class_label for v in videos if v.class_label is not None]
    return max(labels) + 1 if labels else 1


def _with_action_classes(network, num_classes):
    from .model import init_parameters

    fresh = init_parameters(network.config, 0, network.clips_per_item, num_classes)
    params = dict(network.params)
    params["head_action.weight"] = fresh["head_action.weight"]
    params["head_action.bias"] = fresh["head_action.bias"]
    return ClozeNetwork(network.config, network.clips_per_item, num_classes, params=params)


def _desk_backbone(cloze: ClozeConfig, channels=3):
    return BackboneConfig(input_shape=(channels, cloze.clip_len) + tuple(cloze.crop))
