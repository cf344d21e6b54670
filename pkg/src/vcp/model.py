"""C3D-style backbone, the shared-weight cloze network and checkpoints.

One backbone parameter set serves every tower: the ``m`` clips of an item
are stacked along the batch axis, pushed through the backbone together and
their pooled features concatenated in raw-video order before the head.

Parameters live in a flat ``{name: ndarray}`` dict so optimizers and the
checkpoint writer can treat them uniformly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .errors import CheckpointError, DimensionError, ValidationError

NUM_OPERATIONS = 5
# classifier heads start near zero so the initial loss sits at ln(classes)
HEAD_GAIN = 0.05
# each clip is centred and scaled before the first conv: [0,1] inputs otherwise drive all
# samples onto one common-mode activation pattern that SGD escapes only slowly. Centring is
# joint over channels so colour offsets, such as the synthetic clock level, survive.
INPUT_SCALE = 4.0
CENTRE_AXES = (1, 2, 3, 4)


@dataclass(frozen=True)
class StageConfig:
    out_channels: int
    kernel: tuple = (3, 3, 3)
    pool: tuple | None = (2, 2, 2)

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(v) for v in self.kernel))
        if self.pool is not None:
            object.__setattr__(self, "pool", tuple(int(v) for v in self.pool))
        if self.out_channels < 1:
            raise ValidationError("stage out_channels must be >= 1")
        if any(k % 2 == 0 for k in self.kernel):
            raise ValidationError(f"kernel {self.kernel} must be odd for same padding")


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple = (
        StageConfig(8, pool=(1, 2, 2)),
        StageConfig(16),
        StageConfig(32),
        StageConfig(64, pool=None),
    )
    input_shape: tuple = (3, 8, 16, 16)  # (C, k, crop_h, crop_w)

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if not stages:
            raise ValidationError("backbone needs at least one stage")
        if len(self.input_shape) != 4:
            raise ValidationError("input_shape must be (C, k, h, w)")
        self.stage_extents()  # validates pooling geometry

    @property
    def feature_dim(self):
        return self.stages[-1].out_channels

    def conv_specs(self):
        specs = []
        cin = self.input_shape[0]
        for s in self.stages:
            pad = tuple(k // 2 for k in s.kernel)
            specs.append(tc.Conv3dSpec(cin, s.out_channels, s.kernel, 1, pad))
            cin = s.out_channels
        return specs

    def stage_extents(self):
        ext = self.input_shape[1:]
        out = []
        for i, s in enumerate(self.stages):
            if s.pool is not None:
                if any(p > e for p, e in zip(s.pool, ext)):
                    raise ValidationError(f"stage {i}: pool {s.pool} larger than extents {ext}")
                ext = tuple(e // p for e, p in zip(ext, s.pool))
            out.append(ext)
        return out

    def to_dict(self):
        return {
            "stages": [
                {"out_channels": s.out_channels, "kernel": list(s.kernel),
                 "pool": list(s.pool) if s.pool is not None else None}
                for s in self.stages
            ],
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(StageConfig(**s) for s in d["stages"]), tuple(d["input_shape"]))


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_parameters(config: BackboneConfig, seed, clips_per_item=3, num_action_classes=10,
                    dtype=np.float32):
    """He-uniform weights (variance ``2/fan_in``), zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for i, spec in enumerate(config.conv_specs()):
        fan_in = spec.in_channels * int(np.prod(spec.kernel))
        params[f"backbone.conv{i}.weight"] = he_uniform(rng, spec.weight_shape, fan_in, dtype)
        params[f"backbone.conv{i}.bias"] = np.zeros(spec.out_channels, dtype)
    f = config.feature_dim
    for name, fin, fout in (
        ("head_vcp", clips_per_item * f, NUM_OPERATIONS),
        ("head_action", f, num_action_classes),
        ("head_probe", clips_per_item * f, NUM_OPERATIONS),
    ):
        params[f"{name}.weight"] = he_uniform(rng, (fout, fin), fin, dtype) * dtype(HEAD_GAIN)
        params[f"{name}.bias"] = np.zeros(fout, dtype)
    return params


def init_head(params, head, seed):
    """Re-draw one head from a fresh generator, leaving everything else alone."""
    rng = np.random.default_rng(seed)
    w = params[f"{head}.weight"]
    params[f"{head}.weight"] = he_uniform(rng, w.shape, w.shape[1], w.dtype) * w.dtype.type(HEAD_GAIN)
    params[f"{head}.bias"] = np.zeros_like(params[f"{head}.bias"])


class ClozeNetwork:
    """Backbone plus the three linear heads (``head_vcp``, ``head_action``, ``head_probe``)."""

    def __init__(self, config: BackboneConfig, clips_per_item=3, num_action_classes=10,
                 seed=0, params=None, dtype=np.float32):
        self.config = config
        self.clips_per_item = int(clips_per_item)
        self.num_action_classes = int(num_action_classes)
        self.specs = config.conv_specs()
        if params is None:
            params = init_parameters(config, seed, clips_per_item, num_action_classes, dtype)
        self.params = params
        self._check_params()

    def _check_params(self):
        expected = init_parameters(self.config, 0, self.clips_per_item, self.num_action_classes)
        for name, ref in expected.items():
            if name not in self.params:
                raise CheckpointError(f"missing parameter {name}", section="params")
            if self.params[name].shape != ref.shape:
                raise CheckpointError(
                    f"{name}: shape {self.params[name].shape} != {ref.shape}", section="params"
                )

    def snapshot(self):
        return {
            "backbone": self.config.to_dict(),
            "clips_per_item": self.clips_per_item,
            "num_action_classes": self.num_action_classes,
        }

    @classmethod
    def from_snapshot(cls, snap, params=None, seed=0):
        return cls(BackboneConfig.from_dict(snap["backbone"]), snap["clips_per_item"],
                   snap["num_action_classes"], seed=seed, params=params)

    def astype(self, dtype):
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return ClozeNetwork(self.config, self.clips_per_item, self.num_action_classes, params=params)

    def backbone_names(self):
        return [k for k in self.params if k.startswith("backbone.")]

    def head_names(self, head):
        return [f"{head}.weight", f"{head}.bias"]

    def backbone_hash(self):
        h = hashlib.sha256()
        for name in self.backbone_names():
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    # -- backbone ----------------------------------------------------------

    def backbone_forward(self, x):
        """``[N, C, k, h, w] -> ([N, feature_dim], cache)``."""
        if x.ndim != 5 or tuple(x.shape[1:]) != self.config.input_shape:
            raise DimensionError(
                f"backbone input {tuple(x.shape)} does not match [N,{','.join(map(str, self.config.input_shape))}]"
            )
        cache = []
        mean = x.mean(axis=CENTRE_AXES, keepdims=True, dtype=np.float64).astype(x.dtype)
        h = (x - mean) * x.dtype.type(INPUT_SCALE)
        for i, (spec, stage) in enumerate(zip(self.specs, self.config.stages)):
            w = self.params[f"backbone.conv{i}.weight"]
            b = self.params[f"backbone.conv{i}.bias"]
            z, cols = tc.conv3d_forward(h, w, b, spec, return_cols=True)
            a = tc.relu(z)
            entry = {"input": h, "cols": cols, "pre": z}
            if stage.pool is not None:
                a, idx = tc.maxpool3d(a, stage.pool)
                entry["pool_index"] = idx
                entry["pool_shape"] = z.shape
            cache.append(entry)
            h = a
        feats = tc.global_avgpool3d(h)
        return feats, {"stages": cache, "final_shape": h.shape}

    def backbone_backward(self, grad_feats, cache, need_input_grad=False):
        grads = {}
        g = tc.global_avgpool3d_backward(grad_feats, cache["final_shape"])
        for i in reversed(range(len(self.specs))):
            entry = cache["stages"][i]
            if "pool_index" in entry:
                g = tc.maxpool3d_backward(g, entry["pool_index"], entry["pool_shape"])
            g = tc.relu_backward(g, entry["pre"])
            gi, gw, gb = tc.conv3d_backward(g, entry["input"], self.params[f"backbone.conv{i}.weight"],
                                            self.specs[i], cols=entry["cols"],
                                            input_grad=i > 0 or need_input_grad)
            grads[f"backbone.conv{i}.weight"] = gw
            grads[f"backbone.conv{i}.bias"] = gb
            if i > 0 or need_input_grad:
                g = gi
        if need_input_grad:
            g = g - g.mean(axis=CENTRE_AXES, keepdims=True, dtype=np.float64).astype(g.dtype)
            grads["input"] = g * g.dtype.type(INPUT_SCALE)
        return grads

    def extract_conv5(self, x, normalize=False):
        """Pooled final-stage activations; optionally L2-normalized per row."""
        feats, _ = self.backbone_forward(x)
        if normalize:
            norm = np.linalg.norm(feats.astype(np.float64), axis=1, keepdims=True)
            feats = (feats / np.maximum(norm, 1e-12)).astype(feats.dtype)
        return feats

    # -- heads -------------------------------------------------------------

    def _linear(self, head, x):
        return tc.linear_forward(x, self.params[f"{head}.weight"], self.params[f"{head}.bias"])

    def cloze_features(self, clips):
        """``[B, m, C, k, h, w] -> ([B, m*feature_dim], cache)``, tower order preserved."""
        if clips.ndim != 6 or clips.shape[1] != self.clips_per_item:
            raise DimensionError(
                f"cloze input must be [B,{self.clips_per_item},C,k,h,w], got {tuple(clips.shape)}"
            )
        b, m = clips.shape[:2]
        feats, cache = self.backbone_forward(clips.reshape((b * m,) + clips.shape[2:]))
        return feats.reshape(b, m * feats.shape[1]), cache

    def cloze_forward(self, clips, head="head_vcp"):
        feats, bcache = self.cloze_features(clips)
        return self._linear(head, feats), {"feats": feats, "backbone": bcache, "head": head}

    def cloze_backward(self, grad_logits, cache, train_backbone=True):
        head = cache["head"]
        gx, gw, gb = tc.linear_backward(grad_logits, cache["feats"], self.params[f"{head}.weight"])
        grads = {f"{head}.weight": gw, f"{head}.bias": gb}
        if train_backbone:
            f = self.config.feature_dim
            grads.update(self.backbone_backward(gx.reshape(-1, f), cache["backbone"]))
        return grads

    def action_forward(self, clips):
        feats, bcache = self.backbone_forward(clips)
        return self._linear("head_action", feats), {"feats": feats, "backbone": bcache}

    def action_backward(self, grad_logits, cache, train_backbone=True):
        gx, gw, gb = tc.linear_backward(grad_logits, cache["feats"], self.params["head_action.weight"])
        grads = {"head_action.weight": gw, "head_action.bias": gb}
        if train_backbone:
            grads.update(self.backbone_backward(gx, cache["backbone"]))
        return grads


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"VCPC"
CKPT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    params: dict
    velocity: dict = field(default_factory=dict)
    epoch: int = 0
    config: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)  # scalar hyperparameters

    def tensors(self):
        out = [(f"param/{k}", v) for k, v in self.params.items()]
        out += [(f"velocity/{k}", v) for k, v in self.velocity.items()]
        return out


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    directory = []
    blobs = []
    offset = 0
    for name, arr in ckpt.tensors():
        arr = np.ascontiguousarray(arr)
        dt = np.dtype(arr.dtype).newbyteorder("<")
        if dt not in _DTYPE_NAMES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}", section="tensors")
        blob = arr.astype(dt, copy=False).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "dtype": _DTYPE_NAMES[dt],
                          "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": ckpt.config,
        "epoch": int(ckpt.epoch),
        "rng_state": ckpt.rng_state,
        "optimizer": ckpt.optimizer,
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 4:
        raise CheckpointError("file ends inside magic", section="magic")
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {bytes(buf[:4])!r}", section="magic")
    if len(buf) < 16:
        raise CheckpointError("file ends inside version/header length", section="version")
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"version {version} != supported {CKPT_VERSION}", section="version")
    if len(buf) < 16 + hlen:
        raise CheckpointError(f"header truncated: {len(buf) - 16} of {hlen} bytes", section="header")
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt JSON header: {exc}", section="header") from exc
    base = 16 + hlen
    params, velocity = {}, {}
    for entry in header["tensors"]:
        name = entry["name"]
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(buf):
            raise CheckpointError(f"incomplete tensor block ({len(buf) - start} of {entry['nbytes']} bytes)",
                                  section=f"tensor {name}")
        dt = _DTYPES.get(entry["dtype"])
        if dt is None or int(np.prod(entry["shape"])) * dt.itemsize != entry["nbytes"]:
            raise CheckpointError("corrupt tensor block descriptor", section=f"tensor {name}")
        arr = np.frombuffer(buf, dtype=dt, count=int(np.prod(entry["shape"])), offset=start)
        arr = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="))
        kind, _, key = name.partition("/")
        (params if kind == "param" else velocity)[key] = arr
    expected_end = base + sum(e["nbytes"] for e in header["tensors"])
    if len(buf) != expected_end:
        raise CheckpointError(f"{len(buf) - expected_end} unexpected trailing bytes", section="tensors")
    return Checkpoint(params, velocity, header["epoch"], header["config"], header["rng_state"],
                      header.get("optimizer", {}))


def save_checkpoint(path, ckpt: Checkpoint):
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def network_from_checkpoint(ckpt: Checkpoint) -> ClozeNetwork:
    snap = ckpt.config.get("network")
    if snap is None:
        raise CheckpointError("no network snapshot in config", section="header")
    params = {k: v.copy() for k, v in ckpt.params.items()}
    return ClozeNetwork.from_snapshot(snap, params=params)


# -- gradient oracle ---------------------------------------------------------

GRADCHECK_BACKBONE = BackboneConfig(
    stages=(StageConfig(3, pool=(1, 2, 2)), StageConfig(4, pool=(2, 2, 2)), StageConfig(5, pool=None)),
    input_shape=(2, 4, 8, 8),
)


def _layer_checks(rng, epsilon):
    out = {}
    spec = tc.Conv3dSpec(2, 3, padding=1)
    x = rng.standard_normal((2, 2, 4, 5, 5))
    w = rng.standard_normal(spec.weight_shape)
    b = rng.standard_normal(3)
    probe = rng.standard_normal((2, 3, 4, 5, 5))
    gi, gw, gb = tc.conv3d_backward(probe, x, w, spec)
    out["conv3d.input"] = tc.finite_diff_gradcheck(lambda p: (tc.conv3d_forward(p, w, b, spec) * probe).sum(),
                                                   x, gi, epsilon)
    out["conv3d.weight"] = tc.finite_diff_gradcheck(lambda p: (tc.conv3d_forward(x, p, b, spec) * probe).sum(),
                                                    w, gw, epsilon)
    out["conv3d.bias"] = tc.finite_diff_gradcheck(lambda p: (tc.conv3d_forward(x, w, p, spec) * probe).sum(),
                                                  b, gb, epsilon)
    xp = rng.standard_normal((2, 2, 4, 4, 4))
    pooled, idx = tc.maxpool3d(xp, 2)
    gp = rng.standard_normal(pooled.shape)
    out["maxpool3d"] = tc.finite_diff_gradcheck(lambda p: (tc.maxpool3d(p, 2)[0] * gp).sum(), xp,
                                                tc.maxpool3d_backward(gp, idx, xp.shape), epsilon)
    ga = rng.standard_normal((2, 2))
    out["global_avgpool3d"] = tc.finite_diff_gradcheck(
        lambda p: (tc.global_avgpool3d(p) * ga).sum(), xp, tc.global_avgpool3d_backward(ga, xp.shape), epsilon)
    # keep inputs away from the kink so central differences stay on one side
    xr = rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    gr = rng.standard_normal((3, 4))
    out["relu"] = tc.finite_diff_gradcheck(lambda p: (tc.relu(p) * gr).sum(), xr, tc.relu_backward(gr, xr), epsilon)
    xl, wl, bl = rng.standard_normal((3, 6)), rng.standard_normal((4, 6)), rng.standard_normal(4)
    gl = rng.standard_normal((3, 4))
    gx, gwl, gbl = tc.linear_backward(gl, xl, wl)
    out["linear.input"] = tc.finite_diff_gradcheck(lambda p: (tc.linear_forward(p, wl, bl) * gl).sum(), xl, gx, epsilon)
    out["linear.weight"] = tc.finite_diff_gradcheck(lambda p: (tc.linear_forward(xl, p, bl) * gl).sum(), wl, gwl,
                                                    epsilon)
    out["linear.bias"] = tc.finite_diff_gradcheck(lambda p: (tc.linear_forward(xl, wl, p) * gl).sum(), bl, gbl,
                                                  epsilon)
    logits = rng.standard_normal((4, NUM_OPERATIONS))
    labels = rng.integers(0, NUM_OPERATIONS, size=4)
    _, gs = tc.softmax_cross_entropy(logits, labels)
    out["softmax_cross_entropy"] = tc.finite_diff_gradcheck(lambda p: tc.softmax_cross_entropy(p, labels)[0],
                                                            logits, gs, epsilon)
    return out


def gradcheck_suite(seed=0, epsilon=1e-6, backbone: BackboneConfig = GRADCHECK_BACKBONE, batch=2):
    """Float64 finite-difference check of every layer and of the full cloze loss.

    Returns ``{"layers": {name: err}, "end_to_end": {param: err}}``; the
    end-to-end entries differentiate ``cloze_forward`` + cross-entropy with
    respect to each network parameter.
    """
    rng = np.random.default_rng(seed)
    layers = _layer_checks(rng, epsilon)
    net = ClozeNetwork(backbone, 3, 4, seed=seed).astype(np.float64)
    # head gain is tiny by design; a unit-scale head makes backbone gradients well-conditioned here
    for head in ("head_vcp",):
        w = net.params[f"{head}.weight"]
        net.params[f"{head}.weight"] = rng.standard_normal(w.shape) / np.sqrt(w.shape[1])
    x = rng.uniform(0.0, 1.0, size=(batch, 3) + backbone.input_shape)
    y = rng.integers(0, NUM_OPERATIONS, size=batch)

    def loss_of():
        logits, _ = net.cloze_forward(x, "head_vcp")
        return tc.softmax_cross_entropy(logits, y)[0]

    logits, cache = net.cloze_forward(x, "head_vcp")
    _, g = tc.softmax_cross_entropy(logits, y)
    grads = net.cloze_backward(g, cache)
    e2e = {}
    for name in net.backbone_names() + net.head_names("head_vcp"):
        e2e[name] = tc.finite_diff_gradcheck(lambda p: loss_of(), net.params[name], grads[name], epsilon)
    return {"layers": layers, "end_to_end": e2e}
