"""Video containers, the raw ``VCPV`` file format, manifests and a
synthetic moving-pattern corpus.

On disk a video is channel-last ``T x H x W x C`` bytes. The compute core
wants channel-first floats, which :func:`normalize_clip` produces.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ValidationError

MAGIC = b"VCPV"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_MAX_EXTENT = 1 << 16


@dataclass
class VideoTensor:
    frames: np.ndarray  # uint8, [T, H, W, C]
    video_id: str = ""
    class_label: int | None = None

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4:
            raise ValidationError(f"frames must be [T,H,W,C], got shape {f.shape}")
        if f.dtype != np.uint8:
            raise ValidationError(f"frames must be uint8, got {f.dtype}")
        if f.shape[3] not in (1, 3):
            raise ValidationError(f"channels must be 1 or 3, got {f.shape[3]}")
        self.frames = np.ascontiguousarray(f)

    @property
    def frame_count(self):
        return self.frames.shape[0]

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]

    @property
    def channels(self):
        return self.frames.shape[3]


def encode_video(video: VideoTensor) -> bytes:
    t, h, w, c = video.frames.shape
    return _HEADER.pack(MAGIC, FORMAT_VERSION, t, h, w, c) + video.frames.tobytes()


def decode_video(buf: bytes, video_id="", class_label=None) -> VideoTensor:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", offset=0)
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes", offset=len(buf))
    _, version, t, h, w, c = _HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    for i, (name, n) in enumerate(zip("THWC", (t, h, w, c))):
        if n < 1 or n > _MAX_EXTENT:
            raise FormatError(f"extent {name}={n} out of range", offset=8 + 4 * i)
    if c not in (1, 3):
        raise FormatError(f"channel count {c} not in (1, 3)", offset=20)
    size = t * h * w * c
    payload = len(buf) - _HEADER.size
    if payload < size:
        raise FormatError(
            f"truncated payload: header declares {size} bytes, found {payload}", offset=len(buf)
        )
    if payload > size:
        raise FormatError(f"{payload - size} trailing bytes after payload", offset=_HEADER.size + size)
    frames = np.frombuffer(buf, dtype=np.uint8, count=size, offset=_HEADER.size)
    return VideoTensor(frames.reshape(t, h, w, c).copy(), video_id, class_label)


def write_video(path, video: VideoTensor):
    Path(path).write_bytes(encode_video(video))


def read_video(path, video_id="", class_label=None) -> VideoTensor:
    return decode_video(Path(path).read_bytes(), video_id, class_label)


def normalize_clip(frames):
    """uint8 ``[T, H, W, C]`` -> float32 ``[C, T, H, W]`` in [0, 1]."""
    x = np.asarray(frames, dtype=np.float32) / np.float32(255.0)
    return np.ascontiguousarray(np.moveaxis(x, -1, 0))


# -- manifests ---------------------------------------------------------------


@dataclass
class ManifestEntry:
    video_id: str
    file_path: str
    class_label: int | None
    frame_count: int
    height: int
    width: int
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValidationError(f"{self.video_id}: split must be train or test, got {self.split!r}")


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    root: Path = Path(".")

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.video_id in seen:
                raise DataError(f"duplicate video_id {e.video_id!r} in manifest")
            seen.add(e.video_id)
        self.root = Path(self.root)

    def __len__(self):
        return len(self.entries)

    def split(self, name):
        return DatasetManifest([e for e in self.entries if e.split == name], self.root)

    def path_of(self, entry):
        p = Path(entry.file_path)
        return p if p.is_absolute() else self.root / p

    def load(self, entry) -> VideoTensor:
        video = read_video(self.path_of(entry), entry.video_id, entry.class_label)
        if (video.frame_count, video.height, video.width) != (entry.frame_count, entry.height, entry.width):
            raise DataError(f"{entry.video_id}: file extents disagree with manifest")
        return video

    def load_all(self):
        return [self.load(e) for e in self.entries]

    @property
    def num_classes(self):
        labels = [e.class_label for e in self.entries if e.class_label is not None]
        return max(labels) + 1 if labels else 0


def write_manifest(path, manifest: DatasetManifest):
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")


def read_manifest(path, verify=True) -> DatasetManifest:
    path = Path(path)
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad manifest entry: {exc}") from exc
    manifest = DatasetManifest(entries, path.parent)
    if verify:
        for e in manifest.entries:
            if not manifest.path_of(e).is_file():
                raise DataError(f"{e.video_id}: missing video file {manifest.path_of(e)}")
    return manifest


# -- synthetic corpus --------------------------------------------------------

SHAPES = ("square", "disk", "cross")
SPEEDS = (1.0, 1.5)
LIGHT_RANGE = 0.4
# colour videos carry the clock alone in the last channel: a level sweeping CLOCK_RANGE over the
# video (read against the other channels once clips are centred), a fixed tilt (x, y) so
# rotations and tile swaps break it, and a faint diagonal grating whose phase follows the level.
# The grating advances about 34 degrees per frame, so normal clips only ever step forward while
# every sub-clip swap contains a backward step of 100-170 degrees, below the aliasing limit.
CLOCK_RANGE = (0.3, 0.7)
CLOCK_TILT = (0.2, 0.15)
GRATING = (0.1, 16.0, 236.0)  # amplitude, period px, shift px per unit level


@dataclass(frozen=True)
class MotionProfile:
    direction: float  # degrees, 0 = rightward, counter-clockwise positive (y up)
    speed: float  # pixels per frame
    rotation_rate: float  # degrees per frame of sprite spin

    def velocity(self):
        """(vx, vy) in pixels per frame; image rows grow downward.

        Opposite directions give exactly negated velocities, which keeps
        time-mirrored renders bitwise equal.
        """
        d = self.direction % 360.0
        a = math.radians(d % 180.0)
        vx, vy = self.speed * math.cos(a), -self.speed * math.sin(a)
        return (-vx, -vy) if d >= 180.0 else (vx, vy)


def default_profiles(num_classes):
    """Pairs of mirror classes: class ``2j+1`` reverses class ``2j`` in time."""
    axes = max(1, math.ceil(num_classes / 2))
    out = []
    for c in range(num_classes):
        j, flip = divmod(c, 2)
        direction = (180.0 / axes) * j + (180.0 if flip else 0.0)
        speed = SPEEDS[j % 2]
        spin = 6.0 * (1 if j % 2 == 0 else -1) * (-1 if flip else 1)
        out.append(MotionProfile(direction % 360.0, speed, spin))
    return out


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    videos_per_class: int = 50
    frame_count: int = 64
    height: int = 20
    width: int = 20
    channels: int = 3
    seed: int = 42
    test_fraction: float = 0.2
    num_sprites: int = 3
    num_backgrounds: int = 8
    motion_profiles: list | None = None
    min_frames: int = 1

    def profiles(self):
        return self.motion_profiles if self.motion_profiles is not None else default_profiles(self.num_classes)

    def validate(self):
        if self.height < 16 or self.width < 16:
            raise ValidationError(f"synthetic frames must be >= 16x16, got {self.height}x{self.width}")
        if self.frame_count < self.min_frames:
            raise ValidationError(
                f"frame_count {self.frame_count} below minimum cloze span {self.min_frames}"
            )
        if self.num_classes < 1 or self.videos_per_class < 1:
            raise ValidationError("need at least one class and one video per class")
        if self.channels not in (1, 3):
            raise ValidationError("channels must be 1 or 3")
        profiles = self.profiles()
        if len(profiles) != self.num_classes:
            raise ValidationError(f"{len(profiles)} motion profiles for {self.num_classes} classes")
        if len(set(profiles)) != len(profiles):
            raise ValidationError("motion profiles must be distinct per class")


@dataclass
class SceneState:
    """Everything needed to render one synthetic video deterministically."""

    background: np.ndarray  # float32 [H, W, C] in [0, 1]
    sprites: list  # of (shape, y, x, angle_deg, rgb tuple) at time_origin
    profile: MotionProfile
    light: float  # additive lighting (grayscale) or clock level (colour) at time_origin
    light_slope: float  # per frame
    time_origin: float = 0.0


def _smooth_texture(rng, h, w, c):
    noise = rng.standard_normal((h, w, c))
    # cheap periodic low-pass in the frequency domain
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    mask = np.exp(-((fy**2 + fx**2) / 0.01))[..., None]
    smooth = np.real(np.fft.ifft2(np.fft.fft2(noise, axes=(0, 1)) * mask, axes=(0, 1)))
    smooth /= np.abs(smooth).max() + 1e-12
    return smooth


def make_backgrounds(rng, count, h, w, c):
    """Shared pool of oriented backgrounds.

    Each is a "lit from above" sawtooth shading (slow ramp down each band,
    sharp edge back up) with a weaker sawtooth across columns, a global
    diagonal ramp and smooth random texture. The sawtooth makes orientation
    and tile seams visible to small local filters.
    """
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ramp = 0.25 * (yy / (h - 1)) + 0.1 * (xx / (w - 1))
    out = []
    for _ in range(count):
        py, px = rng.uniform(0, 5), rng.uniform(0, 7)
        saw = 0.22 * (((yy + py) % 5) / 4) + 0.1 * (((xx + px) % 7) / 6)
        tex = _smooth_texture(rng, h, w, c)
        bg = 0.1 + ramp[..., None] + saw[..., None] + 0.08 * tex
        out.append(np.clip(bg, 0.0, 1.0).astype(np.float32))
    return out


def _sprite_mask(shape, yy, xx, cy, cx, angle_deg, radius=2.2):
    a = math.radians(angle_deg)
    dy, dx = yy - cy, xx - cx
    u = math.cos(a) * dx + math.sin(a) * dy
    v = -math.sin(a) * dx + math.cos(a) * dy
    if shape == "square":
        d = np.maximum(np.abs(u), np.abs(v)) - radius * 0.85
    elif shape == "disk":
        d = np.sqrt(u * u + v * v) - radius
    elif shape == "cross":
        arm = np.minimum(np.maximum(np.abs(u) - radius * 1.2, np.abs(v) - radius * 0.45),
                         np.maximum(np.abs(v) - radius * 1.2, np.abs(u) - radius * 0.45))
        d = arm
    else:
        raise ValidationError(f"unknown sprite shape {shape!r}")
    # one-pixel antialiased edge
    return np.clip(0.5 - d, 0.0, 1.0)


_REACH = 4.0  # sprite extent incl. antialiasing, in pixels


def render_scene(state: SceneState, frame_count: int) -> np.ndarray:
    """Render ``frame_count`` uint8 frames; sprites translate on a torus."""
    h, w, c = state.background.shape
    vx, vy = state.profile.velocity()
    frames = np.empty((frame_count, h, w, c), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    tilt = CLOCK_TILT[0] * (xx / max(w - 1, 1) - 0.5) + CLOCK_TILT[1] * (yy / max(h - 1, 1) - 0.5)
    amp, period, shift = GRATING
    for t in range(frame_count):
        dt = t - state.time_origin
        level = state.light + state.light_slope * dt
        img = state.background.astype(np.float64)
        if c == 1:
            img = img + level
        for shape, y0, x0, ang0, rgb in state.sprites:
            cy = (y0 + vy * dt) % h
            cx = (x0 + vx * dt) % w
            ang = ang0 + state.profile.rotation_rate * dt
            alpha = np.zeros((h, w))
            # wrap: draw the sprite at its torus images near the borders
            for oy in (-h, 0, h):
                for ox in (-w, 0, w):
                    py, px = cy + oy, cx + ox
                    if -_REACH < py < h + _REACH and -_REACH < px < w + _REACH:
                        alpha = np.maximum(alpha, _sprite_mask(shape, yy, xx, py, px, ang))
            color = np.asarray(rgb, dtype=np.float64)[:c]
            img = img * (1 - alpha[..., None]) + color * alpha[..., None]
        if c > 1:
            grating = amp * np.sin(2 * np.pi * (xx + yy - shift * level) / period)
            img[..., -1] = level + tilt + grating
        frames[t] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return frames


def reversed_state(state: SceneState, frame_count: int, profile: MotionProfile) -> SceneState:
    """State whose rendering under ``profile`` replays ``state`` backwards in time.

    ``profile`` must be the time mirror of ``state.profile`` (opposite
    direction and spin, same speed), as produced by :func:`default_profiles`
    for classes ``2j`` and ``2j+1``. Frame ``t`` of the result equals frame
    ``frame_count - 1 - t`` of the original, bitwise.
    """
    last = frame_count - 1
    origin = last - state.time_origin
    return SceneState(state.background, list(state.sprites), profile,
                      state.light, -state.light_slope, time_origin=origin)


def _sample_scene(rng, spec, backgrounds, profile):
    h, w = spec.height, spec.width
    bg = backgrounds[int(rng.integers(len(backgrounds)))]
    if spec.channels == 1:
        bg = bg.mean(axis=2, keepdims=True)
    sprites = []
    for _ in range(spec.num_sprites):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        rgb = tuple(float(v) for v in rng.uniform(0.75, 1.0, size=3))
        if spec.channels == 1:
            rgb = (float(np.mean(rgb)),) * 3
        sprites.append((shape, float(rng.uniform(0, h)), float(rng.uniform(0, w)),
                        float(rng.uniform(0, 360)), rgb))
    # a class-independent clock: steady brightening (grayscale) or the clock channel (colour)
    lo, hi = (-LIGHT_RANGE / 2, LIGHT_RANGE / 2) if spec.channels == 1 else CLOCK_RANGE
    slope = (hi - lo) / max(spec.frame_count - 1, 1)
    return SceneState(bg, sprites, profile, light=lo, light_slope=slope)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write a labeled corpus plus ``manifest.jsonl`` into ``out_dir``.

    Classes share backgrounds, sprite shapes and colors; only the motion
    profile depends on the label.
    """
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "videos").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    backgrounds = make_backgrounds(rng, spec.num_backgrounds, spec.height, spec.width, 3)
    profiles = spec.profiles()
    n_test = int(round(spec.videos_per_class * spec.test_fraction))
    entries = []
    for cls, profile in enumerate(profiles):
        for i in range(spec.videos_per_class):
            vid = f"c{cls:02d}_v{i:03d}"
            vrng = np.random.default_rng([spec.seed, cls, i])
            state = _sample_scene(vrng, spec, backgrounds, profile)
            frames = render_scene(state, spec.frame_count)
            rel = os.path.join("videos", vid + ".vcpv")
            write_video(out_dir / rel, VideoTensor(frames, vid, cls))
            split = "test" if i >= spec.videos_per_class - n_test else "train"
            entries.append(ManifestEntry(vid, rel, cls, spec.frame_count, spec.height, spec.width, split))
    manifest = DatasetManifest(entries, out_dir)
    write_manifest(out_dir / "manifest.jsonl", manifest)
    return manifest


def mean_frame_statistics(video: VideoTensor) -> np.ndarray:
    """Per-channel mean and std of the time-averaged frame, plus their global counterparts."""
    f = video.frames.astype(np.float64) / 255.0
    mean_frame = f.mean(axis=0)
    return np.concatenate([
        mean_frame.mean(axis=(0, 1)),
        mean_frame.std(axis=(0, 1)),
        [f.mean(), f.std()],
    ])
