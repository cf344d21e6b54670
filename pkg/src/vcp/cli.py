"""``vcp`` command line: generate, pretrain, finetune, probe, retrieve, gradcheck.

Settings come from built-in desk-scale defaults, then an optional TOML file
(``--config``), then flags. Every artifact written gets the merged settings
and seed alongside it.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .clipdata import SyntheticSpec, generate_synthetic, read_manifest
from .cloze import DESK_CLOZE, ClozeConfig
from .errors import ConfigError, DataError, NumericError, ValidationError
from .model import (BackboneConfig, Checkpoint, ClozeNetwork, StageConfig, gradcheck_suite, load_checkpoint,
                    network_from_checkpoint, save_checkpoint)
from .train import TrainConfig, finetune_action, pretrain_vcp, probe_train

log = logging.getLogger("vcp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
GRADCHECK_LAYER_TOL = 1e-5
GRADCHECK_E2E_TOL = 1e-4
SECTIONS = ("paths", "synthetic", "cloze", "backbone", "train", "retrieve")


# desk recipe: batch 16 at lr 0.04 with global-norm clipping. At batch 8 the head noise shrinks
# the features and the O / T_R / T_A triad never separates within 50 epochs.
DESK_TRAIN = {"learning_rate": 0.04, "batch_size": 16, "grad_clip": 1.0}
DESK_MODES = {
    "pretrain_vcp": {"epochs": 50, "eval_every": 5, "eval_repeats": 2},
    "finetune_action": {"epochs": 40, "eval_every": 5},
    "probe": {"epochs": 30},
}


@dataclass
class RunConfig:
    seed: int = 42
    manifest: str | None = None
    out: str = "runs"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    cloze: ClozeConfig = DESK_CLOZE
    backbone: dict | None = None  # {"channels": [...], "pools": [...]} when set explicitly
    train: dict = field(default_factory=lambda: dict(DESK_TRAIN))  # TrainConfig overrides for every mode
    modes: dict = field(default_factory=lambda: {m: dict(v) for m, v in DESK_MODES.items()})
    k: tuple = (1, 5, 10)

    def snapshot(self):
        # output location is left out so identical runs produce identical files anywhere
        return {
            "seed": self.seed,
            "manifest": self.manifest,
            "synthetic": {k: v for k, v in asdict(self.synthetic).items() if k != "motion_profiles"},
            "cloze": asdict(self.cloze),
            "backbone": self.backbone,
            "train": dict(self.train),
            "modes": {m: dict(v) for m, v in self.modes.items()},
            "k": list(self.k),
        }

    def train_config(self, mode, **extra):
        return TrainConfig(mode=mode, **{"seed": self.seed, **self.train, **self.modes.get(mode, {}), **extra})

    def backbone_config(self, channels):
        if self.backbone is None:
            return None
        default = BackboneConfig()
        chans = self.backbone.get("channels", [s.out_channels for s in default.stages])
        pools = self.backbone.get("pools", [s.pool for s in default.stages])
        if len(pools) != len(chans):
            raise ConfigError("backbone.channels and backbone.pools must have equal length")
        stages = tuple(StageConfig(int(c), pool=tuple(p) if p else None) for c, p in zip(chans, pools))
        return BackboneConfig(stages, (channels, self.cloze.clip_len) + tuple(self.cloze.crop))


# -- config file -------------------------------------------------------------


def _key_line(text, section, key):
    """1-based line of ``key`` inside ``[section]`` (or top level), else None."""
    current = None
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for n, line in enumerate(text.splitlines(), 1):
        head = re.match(r"^\s*\[([^\]]+)\]", line)
        if head:
            current = head.group(1).strip()
            if section is None and current == key:
                return n
        elif current == section and pat.match(line):
            return n
    return None


def _config_error(text, section, key, msg):
    line = _key_line(text, section, key)
    where = f"{section}.{key}" if section else key
    return ConfigError(f"config key '{where}'" + (f" (line {line})" if line else "") + f": {msg}")


def _typed(text, section, key, value, want):
    ok = isinstance(value, want) and not (want in (int, float) and isinstance(value, bool))
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not ok:
        raise _config_error(text, section, key, f"expected {getattr(want, '__name__', want)}, "
                                                f"got {type(value).__name__}")
    return value


def _merge_dataclass(text, section, table, base, ints=(), floats=(), pairs=(), lists=()):
    updates = {}
    names = {f.name for f in fields(base)}
    for key, value in table.items():
        if key not in names:
            raise _config_error(text, section, key, "unknown key")
        if key in ints:
            updates[key] = _typed(text, section, key, value, int)
        elif key in floats:
            updates[key] = _typed(text, section, key, value, float)
        elif key in pairs:
            if not (isinstance(value, list) and len(value) == 2 and all(isinstance(v, int) for v in value)):
                raise _config_error(text, section, key, "expected a [height, width] pair of integers")
            updates[key] = tuple(value)
        elif key in lists:
            updates[key] = tuple(_typed(text, section, key, value, list))
        else:
            updates[key] = value
    try:
        return replace(base, **updates)
    except (ValidationError, ConfigError, TypeError, ValueError) as exc:
        key = next(iter(table), "")
        raise _config_error(text, section, key, str(exc)) from None


MODE_TABLES = {"pretrain": "pretrain_vcp", "finetune": "finetune_action", "probe": "probe"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"mode", "seed", "init", "freeze_backbone"}


def _train_overrides(text, section, table):
    out = {}
    for key, value in table.items():
        if key not in TRAIN_KEYS:
            raise _config_error(text, section, key, "unknown key")
        want = float if key in ("learning_rate", "momentum", "grad_clip") else int
        out[key] = _typed(text, section, key, value, want)
    try:
        TrainConfig(**out)
    except ConfigError as exc:
        raise _config_error(text, section, next(iter(table)), str(exc)) from None
    return out


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    cfg = base or RunConfig()
    for key, value in doc.items():
        if isinstance(value, dict):
            if key not in SECTIONS:
                raise _config_error(text, None, key, f"unknown section (expected one of {', '.join(SECTIONS)})")
        elif key == "seed":
            cfg = replace(cfg, seed=_typed(text, None, key, value, int))
        else:
            raise _config_error(text, None, key, "unknown top-level key")
    paths = doc.get("paths", {})
    for key, value in paths.items():
        if key not in ("manifest", "out"):
            raise _config_error(text, "paths", key, "unknown key")
        cfg = replace(cfg, **{key: _typed(text, "paths", key, value, str)})
    if "synthetic" in doc:
        cfg = replace(cfg, synthetic=_merge_dataclass(
            text, "synthetic", doc["synthetic"], cfg.synthetic,
            ints=("num_classes", "videos_per_class", "frame_count", "height", "width", "channels", "seed",
                  "num_sprites", "num_backgrounds", "min_frames"),
            floats=("test_fraction",)))
        if "motion_profiles" in doc["synthetic"]:
            raise _config_error(text, "synthetic", "motion_profiles", "custom profiles are API-only")
    if "cloze" in doc:
        cfg = replace(cfg, cloze=_merge_dataclass(
            text, "cloze", doc["cloze"], cfg.cloze,
            ints=("clip_len", "interval", "clips_per_item", "remote_dist"),
            pairs=("crop", "resize"), lists=("rotation_angles",)))
    if "backbone" in doc:
        bb = doc["backbone"]
        for key in bb:
            if key not in ("channels", "pools"):
                raise _config_error(text, "backbone", key, "unknown key")
        cfg = replace(cfg, backbone={k: _typed(text, "backbone", k, v, list) for k, v in bb.items()})
    if "train" in doc:
        table = dict(doc["train"])
        modes = dict(cfg.modes)
        for mode in MODE_TABLES:
            if mode in table:
                sub = table.pop(mode)
                if not isinstance(sub, dict):
                    raise _config_error(text, "train", mode, "expected a table")
                modes[MODE_TABLES[mode]] = {**modes.get(MODE_TABLES[mode], {}),
                                            **_train_overrides(text, f"train.{mode}", sub)}
        cfg = replace(cfg, train={**cfg.train, **_train_overrides(text, "train", table)}, modes=modes)
        for mode in MODE_TABLES.values():
            try:
                cfg.train_config(mode)
            except ConfigError as exc:
                raise ConfigError(f"config section 'train': {exc}") from None
    if "retrieve" in doc:
        for key, value in doc["retrieve"].items():
            if key != "k":
                raise _config_error(text, "retrieve", key, "unknown key")
            ks = _typed(text, "retrieve", key, value, list)
            if not ks or not all(isinstance(k, int) and k >= 1 for k in ks):
                raise _config_error(text, "retrieve", key, "expected a list of positive integers")
            cfg = replace(cfg, k=tuple(ks))
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text(encoding="utf-8"))


# -- commands ----------------------------------------------------------------


def _out_dir(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(cfg):
    if not cfg.manifest:
        raise ConfigError("a manifest is required (--manifest or [paths] manifest)")
    if not Path(cfg.manifest).is_file():
        raise ConfigError(f"manifest {cfg.manifest} does not exist")
    return read_manifest(cfg.manifest)


def _init_checkpoint(path):
    if not path:
        raise ConfigError("--init CHECKPOINT is required for this command")
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _save_run(out, stem, result, cfg, plot=True):
    ckpt = result.checkpoint
    ckpt.config["run"] = cfg.snapshot()
    save_checkpoint(out / f"{stem}.vcpc", ckpt)
    result.log.meta["run"] = cfg.snapshot()
    result.log.write(out / f"{stem}_log.jsonl")
    _write_json(out / f"{stem}_timing.json", {"wall_time": [r.wall_time for r in result.log.records]})
    if plot:
        from .plotting import plot_training_curve

        plot_training_curve(result.log, out / f"{stem}_curve.png", stem)


def cmd_generate(cfg: RunConfig, args):
    spec = replace(cfg.synthetic, seed=cfg.seed, min_frames=max(cfg.synthetic.min_frames, cfg.cloze.span))
    out = _out_dir(cfg)
    manifest = generate_synthetic(spec, out)
    _write_json(out / "generate.meta.json", cfg.snapshot())
    print(f"wrote {len(manifest.entries)} videos and {out / 'manifest.jsonl'}")
    return EXIT_OK


def _first_channels(manifest):
    if not manifest.entries:
        raise DataError("manifest is empty")
    return manifest.load(manifest.entries[0]).channels


def cmd_pretrain(cfg: RunConfig, args):
    manifest = _manifest(cfg)
    out = _out_dir(cfg)
    resume = load_checkpoint(args.resume) if args.resume else None
    tcfg = cfg.train_config("pretrain_vcp")
    result = pretrain_vcp(manifest, cfg.cloze, tcfg, cfg.backbone_config(_first_channels(manifest)),
                          resume=resume, checkpoint_dir=out if tcfg.checkpoint_every else None)
    _save_run(out, "pretrain", result, cfg, plot=not args.no_plots)
    last = result.log.evaluated()[-1] if result.log.evaluated() else None
    if last:
        per = " ".join(f"{k}={v:.3f}" for k, v in last.per_class_accuracy.items())
        print(f"pretrain epoch {last.epoch}: test accuracy {last.test_accuracy:.4f} ({per})")
    print(f"checkpoint: {out / 'pretrain.vcpc'}")
    return EXIT_OK


def cmd_finetune(cfg: RunConfig, args):
    manifest = _manifest(cfg)
    out = _out_dir(cfg)
    init = load_checkpoint(args.init) if args.init and args.init != "random" else None
    tcfg = cfg.train_config("finetune_action", init=args.init or "random")
    result = finetune_action(manifest, cfg.cloze, tcfg, cfg.backbone_config(_first_channels(manifest)),
                             init=init, checkpoint_dir=out if tcfg.checkpoint_every else None)
    _save_run(out, "finetune", result, cfg, plot=not args.no_plots)
    last = result.log.evaluated()[-1] if result.log.evaluated() else None
    if last:
        print(f"finetune epoch {last.epoch}: test accuracy {last.test_accuracy:.4f}")
    print(f"checkpoint: {out / 'finetune.vcpc'}")
    return EXIT_OK


def _random_checkpoint(like: Checkpoint, seed):
    net = network_from_checkpoint(like)
    fresh = ClozeNetwork(net.config, net.clips_per_item, net.num_action_classes, seed=seed)
    return Checkpoint(params=fresh.params, config={"network": fresh.snapshot()})


def _methods(cfg, args):
    init = _init_checkpoint(args.init)
    methods = {args.method: init}
    if args.baseline_random:
        methods["random"] = _random_checkpoint(init, cfg.seed)
    return methods


def cmd_probe(cfg: RunConfig, args):
    from .evaluate import emit_assessment

    manifest = _manifest(cfg)
    out = _out_dir(cfg)
    logs = {}
    for method, ckpt in _methods(cfg, args).items():
        tcfg = cfg.train_config("probe", init=args.init if method == args.method else "random")
        logs[method] = probe_train(manifest, cfg.cloze, tcfg, ckpt).log
        logs[method].meta["run"] = cfg.snapshot()
        logs[method].write(out / f"{method}_probe_log.jsonl")
    cadence = tuple(range(5, cfg.train_config("probe").epochs + 1, 5))
    reports = emit_assessment(logs, out, epochs=cadence, meta={"run": cfg.snapshot()})
    if not args.no_plots:
        from .plotting import plot_assessment

        plot_assessment(reports, out / "assessment.png")
    for method, rep in reports.items():
        e, acc = rep.overall[-1]
        per = " ".join(f"{k}={rep.operations[k][-1][1]:.3f}" for k in rep.operations)
        print(f"{method}: probe epoch {e} overall {acc:.4f} ({per}) -> {out / (method + '_assessment.csv')}")
    return EXIT_OK


def cmd_retrieve(cfg: RunConfig, args):
    from .evaluate import build_index, topk_hit_rate

    manifest = _manifest(cfg)
    out = _out_dir(cfg)
    ks = tuple(int(k) for k in args.k.split(",")) if args.k else cfg.k
    train_videos = manifest.split("train").load_all()
    test_videos = manifest.split("test").load_all()
    n_clips = cfg.train_config("finetune_action").test_clips
    summary = {}
    for method, ckpt in _methods(cfg, args).items():
        net = network_from_checkpoint(ckpt)
        index = build_index(train_videos, net, cfg.cloze, n_clips)
        result = topk_hit_rate(test_videos, index, ks, net, cfg.cloze, n_clips)
        result.write_csv(out / f"retrieval_{method}.csv", {"run": cfg.snapshot(), "method": method})
        summary[method] = result.rates
        print(f"{method}: " + " ".join(f"top-{k}={v:.4f}" for k, v in result.rates.items()))
    _write_json(out / "hit_rates.json", {"run": cfg.snapshot(),
                                         "hit_rates": {m: {str(k): v for k, v in r.items()}
                                                       for m, r in summary.items()}})
    if not args.no_plots:
        from .plotting import plot_hit_rates

        plot_hit_rates(summary, out / "hit_rates.png")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args):
    report = gradcheck_suite(cfg.seed)
    ok = True
    print(f"{'check':<32} {'max rel err':>12}  tol")
    for group, tol in (("layers", GRADCHECK_LAYER_TOL), ("end_to_end", GRADCHECK_E2E_TOL)):
        for name, err in report[group].items():
            passed = err <= tol
            ok &= passed
            print(f"{group + ':' + name:<32} {err:12.3e}  {tol:.0e} {'PASS' if passed else 'FAIL'}")
    worst = max(max(v.values()) for v in report.values())
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: max relative error {worst:.3e}")
    if args.out:
        _write_json(_out_dir(cfg) / "gradcheck.json", {"run": cfg.snapshot(), **report, "passed": ok})
    if not ok:
        raise NumericError(f"gradient check failed (max relative error {worst:.3e})")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "retrieve": cmd_retrieve,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML settings file")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--init", help="checkpoint to start from ('random' for none)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (1 keeps runs bitwise reproducible)")
    common.add_argument("--manifest", help="dataset manifest (manifest.jsonl)")
    common.add_argument("--epochs", type=int, help="override the epoch count of this command's training mode")
    common.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="vcp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "pretrain":
            p.add_argument("--resume", help="continue from this checkpoint")
        if name in ("probe", "retrieve"):
            p.add_argument("--method", default="vcp", help="label for the --init model in outputs")
            p.add_argument("--baseline-random", action="store_true",
                           help="also evaluate a randomly initialized backbone")
        if name == "retrieve":
            p.add_argument("--k", help="comma-separated k values, e.g. 1,5,10")
    return parser


def resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = replace(cfg, seed=args.seed)
    if args.out:
        cfg = replace(cfg, out=args.out)
    if args.manifest:
        cfg = replace(cfg, manifest=args.manifest)
    if args.epochs is not None:
        mode = {"pretrain": "pretrain_vcp", "finetune": "finetune_action", "probe": "probe"}.get(args.command)
        if mode:
            cfg = replace(cfg, modes={**cfg.modes, mode: {**cfg.modes.get(mode, {}), "epochs": args.epochs}})
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
