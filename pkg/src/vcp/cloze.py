"""Cloze item construction: blank generation, option creation, labeling.

An item is ``m`` equally spaced clips of ``k`` frames with gaps of ``l``
frames. One clip is withheld and replaced by an *option*: the clip itself
(``O``), a rotated copy (``S_R``), a copy with two spatial tiles swapped
(``S_P``), a clip from far away in the same video (``T_R``), or a copy with
two of its four sub-clips swapped (``T_A``). The model learns to name the
operation.

All clips here are uint8 ``[k, H, W, C]`` arrays; normalization into the
compute layout happens at batching time.
"""

from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .clipdata import VideoTensor
from .errors import RemoteInfeasibleError, SpanError, ValidationError

log = logging.getLogger(__name__)

SUBCLIPS = 4
TILE_GRID = (2, 2, 1)


class OperationKind(enum.IntEnum):
    O = 0
    S_R = 1
    S_P = 2
    T_R = 3
    T_A = 4

    @property
    def short(self):
        return self.name.replace("_", "")


ROTATION_ANGLES = (90, 180, 270)
PAIRS = tuple(itertools.combinations(range(4), 2))


@dataclass(frozen=True)
class OperationVariant:
    kind: OperationKind
    detail: object = None  # angle | (i, j) | signed remote offset | None

    @property
    def class_index(self):
        return int(self.kind)

    def to_json(self):
        d = self.detail
        return {"kind": self.kind.name, "detail": list(d) if isinstance(d, tuple) else d}


def enumerate_variants(kind, config=None):
    """All within-class variants with a finite detail space.

    ``T_R`` is parameterized by the item's geometry, so it has none here.
    """
    kind = OperationKind(kind)
    angles = config.rotation_angles if config is not None else ROTATION_ANGLES
    if kind is OperationKind.O:
        return [OperationVariant(kind)]
    if kind is OperationKind.S_R:
        return [OperationVariant(kind, a) for a in angles]
    if kind in (OperationKind.S_P, OperationKind.T_A):
        return [OperationVariant(kind, p) for p in PAIRS]
    raise ValidationError("T_R variants depend on the video; use feasible_remote_starts")


@dataclass(frozen=True)
class ClozeConfig:
    clip_len: int = 16
    interval: int = 8
    clips_per_item: int = 3
    crop: tuple = (112, 112)
    resize: tuple = (128, 171)
    remote_dist: int = 16
    rotation_angles: tuple = ROTATION_ANGLES

    def __post_init__(self):
        object.__setattr__(self, "crop", tuple(int(v) for v in self.crop))
        object.__setattr__(self, "resize", tuple(int(v) for v in self.resize))
        object.__setattr__(self, "rotation_angles", tuple(int(a) for a in self.rotation_angles))
        if self.clip_len < SUBCLIPS or self.clip_len % SUBCLIPS:
            raise ValidationError(f"clip_len {self.clip_len} must be a positive multiple of {SUBCLIPS}")
        if self.interval < 0 or self.remote_dist < 0:
            raise ValidationError("interval and remote_dist must be >= 0")
        if self.clips_per_item < 2:
            raise ValidationError("clips_per_item must be >= 2")
        if self.crop[0] != self.crop[1]:
            raise ValidationError(f"crop must be square so rotation keeps extents, got {self.crop}")
        if self.crop[0] > self.resize[0] or self.crop[1] > self.resize[1]:
            raise ValidationError(f"crop {self.crop} larger than resize {self.resize}")
        if not self.rotation_angles or not set(self.rotation_angles) <= set(ROTATION_ANGLES):
            raise ValidationError(f"rotation_angles must be a subset of {ROTATION_ANGLES}")

    @property
    def span(self):
        """Frames covered by one item: ``m*k + (m-1)*l``."""
        m, k, l = self.clips_per_item, self.clip_len, self.interval
        return m * k + (m - 1) * l

    @property
    def stride(self):
        return self.clip_len + self.interval

    def clip_starts(self, start):
        return [start + i * self.stride for i in range(self.clips_per_item)]


DESK_CLOZE = ClozeConfig(clip_len=8, interval=4, clips_per_item=3, crop=(16, 16),
                         resize=(20, 20), remote_dist=4)


@dataclass
class ClozeItem:
    context_clips: list
    blank_position: int
    filled_clip: np.ndarray
    label: OperationVariant
    provenance: dict = field(default_factory=dict)

    def clips(self):
        """All ``m`` clips in raw-video order with the option in the blank."""
        out = list(self.context_clips)
        out.insert(self.blank_position, self.filled_clip)
        return out

    @property
    def class_index(self):
        return self.label.class_index


# -- blank generation --------------------------------------------------------


def sample_cloze_span(video: VideoTensor, config: ClozeConfig, rng):
    """Pick a start frame uniformly and cut the ``m`` raw clips."""
    span = config.span
    if video.frame_count < span:
        raise SpanError(span, video.frame_count, video.video_id)
    start = int(rng.integers(0, video.frame_count - span + 1))
    k = config.clip_len
    clips = [video.frames[s : s + k] for s in config.clip_starts(start)]
    return start, clips


def _bilinear_matrix(n_in, n_out):
    """Row-stochastic [n_out, n_in] interpolation matrix, half-pixel centers."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def bilinear_resize(frames, size):
    """Resize uint8 ``[T, H, W, C]`` frames to ``size = (h, w)``."""
    t, h, w, c = frames.shape
    if (h, w) == tuple(size):
        return frames
    ry = _bilinear_matrix(h, size[0])
    rx = _bilinear_matrix(w, size[1])
    out = np.einsum("yh,thwc,xw->tyxc", ry, frames.astype(np.float64), rx)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def sample_crop_window(config: ClozeConfig, rng):
    rh, rw = config.resize
    ch, cw = config.crop
    return int(rng.integers(0, rh - ch + 1)), int(rng.integers(0, rw - cw + 1))


def apply_crop(clip, window, config: ClozeConfig):
    y, x = window
    ch, cw = config.crop
    return np.ascontiguousarray(bilinear_resize(clip, config.resize)[:, y : y + ch, x : x + cw])


def resize_and_crop(clips, config: ClozeConfig, rng):
    """Resize every clip and cut one shared random crop window from all of them."""
    window = sample_crop_window(config, rng)
    return [apply_crop(c, window, config) for c in clips], window


def delete_clip(clips, rng):
    """Withhold one clip uniformly at random; returns (context, withheld, position)."""
    pos = int(rng.integers(0, len(clips)))
    context = [c for i, c in enumerate(clips) if i != pos]
    return context, clips[pos], pos


# -- options -----------------------------------------------------------------


def op_spatial_rotation(clip, angle):
    """Rotate every frame clockwise by ``angle`` degrees."""
    if angle not in ROTATION_ANGLES:
        raise ValidationError(f"rotation angle must be one of {ROTATION_ANGLES}, got {angle}")
    if clip.shape[1] != clip.shape[2]:
        raise ValidationError(f"rotation needs square frames, got {clip.shape[1]}x{clip.shape[2]}")
    return np.ascontiguousarray(np.rot90(clip, k=-(angle // 90), axes=(1, 2)))


def _check_pair(pair):
    i, j = pair
    if not 0 <= i < j <= 3:
        raise ValidationError(f"pair must satisfy 0 <= i < j <= 3, got {pair}")
    return i, j


def op_spatial_permutation(clip, pair):
    """Swap two of the four quadrant tiles (row-major 0..3) in every frame."""
    i, j = _check_pair(pair)
    _, h, w, _ = clip.shape
    if h % 2 or w % 2:
        raise ValidationError(f"tile permutation needs even extents, got {h}x{w}")
    th, tw = h // 2, w // 2

    def sl(idx):
        r, c = divmod(idx, 2)
        return np.s_[:, r * th : (r + 1) * th, c * tw : (c + 1) * tw]

    out = clip.copy()
    out[sl(i)] = clip[sl(j)]
    out[sl(j)] = clip[sl(i)]
    return out


def op_temporal_adjacent(clip, pair):
    """Swap two of the four equal-length sub-clips."""
    i, j = _check_pair(pair)
    k = clip.shape[0]
    if k % SUBCLIPS:
        raise ValidationError(f"clip length {k} not divisible by {SUBCLIPS}")
    q = k // SUBCLIPS
    out = clip.copy()
    out[i * q : (i + 1) * q] = clip[j * q : (j + 1) * q]
    out[j * q : (j + 1) * q] = clip[i * q : (i + 1) * q]
    return out


def feasible_remote_starts(frame_count, span_start, span_end, clip_len, remote_dist):
    """Every start frame of a ``clip_len`` clip separated from ``[span_start, span_end)``
    by at least ``remote_dist`` frames, before or after."""
    before = np.arange(0, span_start - clip_len - remote_dist + 1)
    after = np.arange(span_end + remote_dist, frame_count - clip_len + 1)
    return np.concatenate([before, after]).astype(int)


def op_temporal_remote(video: VideoTensor, span_start, config: ClozeConfig, rng):
    """Draw a remote raw clip; returns (clip, start frame)."""
    starts = feasible_remote_starts(video.frame_count, span_start, span_start + config.span,
                                    config.clip_len, config.remote_dist)
    if starts.size == 0:
        raise RemoteInfeasibleError(
            f"{video.video_id or 'video'}: no clip at >= {config.remote_dist} frames "
            f"from span [{span_start}, {span_start + config.span}) in {video.frame_count} frames"
        )
    s = int(starts[int(rng.integers(starts.size))])
    return video.frames[s : s + config.clip_len], s


def create_option(video, span_start, withheld, kind, config: ClozeConfig, rng,
                  window=None, blank_position=0):
    """Fill the blank with an option of the given ``kind``.

    ``window`` is the item's crop window, needed only for ``T_R`` because the
    remote clip is cut from the raw video after the others were cropped.
    """
    kind = OperationKind(kind)
    if kind is OperationKind.O:
        return withheld, OperationVariant(kind)
    if kind is OperationKind.S_R:
        angle = config.rotation_angles[int(rng.integers(len(config.rotation_angles)))]
        return op_spatial_rotation(withheld, angle), OperationVariant(kind, angle)
    if kind is OperationKind.S_P:
        pair = PAIRS[int(rng.integers(len(PAIRS)))]
        return op_spatial_permutation(withheld, pair), OperationVariant(kind, pair)
    if kind is OperationKind.T_A:
        pair = PAIRS[int(rng.integers(len(PAIRS)))]
        return op_temporal_adjacent(withheld, pair), OperationVariant(kind, pair)
    raw, start = op_temporal_remote(video, span_start, config, rng)
    clip = apply_crop(raw, window if window is not None else (0, 0), config)
    offset = start - config.clip_starts(span_start)[blank_position]
    return clip, OperationVariant(kind, int(offset))


def item_seed(global_seed, *index):
    """Stable 63-bit per-item seed from a global seed and an index path."""
    ss = np.random.SeedSequence([int(global_seed) & (2**64 - 1), *map(int, index)])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


def assemble_item(video: VideoTensor, config: ClozeConfig, seed: int, kinds=None) -> ClozeItem:
    """Full pipeline for one labeled item, a pure function of (video, config, seed).

    ``kinds`` restricts the operation classes that may be drawn (all five by
    default). If ``T_R`` is drawn but the video has no remote region, another
    kind is drawn uniformly from the rest.
    """
    rng = np.random.default_rng(seed)
    start, raw = sample_cloze_span(video, config, rng)
    clips, window = resize_and_crop(raw, config, rng)
    context, withheld, pos = delete_clip(clips, rng)
    pool = [OperationKind(k) for k in (kinds if kinds is not None else OperationKind)]
    kind = pool[int(rng.integers(len(pool)))]
    resampled = False
    try:
        filled, variant = create_option(video, start, withheld, kind, config, rng, window, pos)
    except RemoteInfeasibleError:
        log.debug("remote-infeasible: video=%s start=%d seed=%d; resampling kind",
                 video.video_id, start, seed)
        rest = [k for k in pool if k is not OperationKind.T_R]
        kind = rest[int(rng.integers(len(rest)))]
        resampled = True
        filled, variant = create_option(video, start, withheld, kind, config, rng, window, pos)
    provenance = {
        "video_id": video.video_id,
        "start_frame": start,
        "crop_window": list(window),
        "seed": int(seed),
    }
    if resampled:
        provenance["resampled_from"] = "T_R"
    return ClozeItem(context, pos, filled, variant, provenance)
