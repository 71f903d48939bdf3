"""Command-line entry point: ``damnet <command> [--config FILE|tiny|full] [--key value ...]``.

Every config field is also a flag (``loss.margin`` -> ``--loss-margin``).
Flags override the config file, which overrides the built-in defaults.

Exit codes: 0 success, 1 a check failed (gradcheck), 2 configuration error,
3 data error, 4 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import difflib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .data.labeling import DataError

log = logging.getLogger("damnet")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4

PRESETS = {"tiny": lambda: C.ModelConfig.tiny(), "full": lambda: C.ModelConfig()}

# config classes whose fields become flags, per command
COMMAND_CONFIGS = {
    "synth": (C.SynthConfig,),
    "label": (C.LabelingConfig,),
    "tile": (C.LabelingConfig,),
    "train": (C.ModelConfig, C.TrainConfig),
    "eval": (),
    "predict": (),
    "map": (C.TileScheme,),
    "gradcheck": (C.ModelConfig,),
}

MASK_EXT = (".png", ".tif", ".tiff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(message)


# -- config flags --------------------------------------------------------------

def _flag(key: str) -> str:
    return "--" + key.replace("_", "-").replace(".", "-")


def _config_fields(cls, prefix=""):
    default = cls()
    for f in dataclasses.fields(cls):
        v = getattr(default, f.name)
        if dataclasses.is_dataclass(v):
            yield from _config_fields(type(v), prefix + f.name + ".")
        else:
            yield prefix + f.name, v


def add_config_flags(parser, classes, skip=()):
    group = parser.add_argument_group("config overrides")
    for cls in classes:
        for key, default in _config_fields(cls):
            if key in skip:
                continue
            kw = dict(dest="cfg:" + key, default=argparse.SUPPRESS, metavar=key.split(".")[-1].upper())
            if isinstance(default, bool):
                kw["action"] = argparse.BooleanOptionalAction
            elif isinstance(default, tuple):
                kw["nargs"] = "*"
                kw["type"] = type(default[0]) if default else int
            else:
                kw["type"] = type(default)
            group.add_argument(_flag(key), **kw)


def resolve_configs(args, classes) -> list:
    """Defaults <- config file/preset <- flags, routed to the owning dataclass."""
    flat: dict = {}
    src = getattr(args, "config", None)
    if src:
        if src in PRESETS and not os.path.exists(src):
            flat.update(C.to_flat(PRESETS[src]()))
        else:
            try:
                flat.update(C.parse_flat(Path(src).read_text()))
            except OSError as exc:
                raise C.ConfigError(f"cannot read config {src}: {exc}") from exc
    for k, v in vars(args).items():
        if k.startswith("cfg:"):
            flat[k[4:]] = tuple(v) if isinstance(v, list) else v
    owns_flag = any("deterministic" in {f.name for f in dataclasses.fields(c)} for c in classes)
    if owns_flag and getattr(args, "deterministic", None) is not None:
        flat["deterministic"] = args.deterministic
    out = []
    claimed = set()
    for cls in classes:
        names = {f.name for f in dataclasses.fields(cls)}
        sub = {k: v for k, v in flat.items() if k.split(".")[0] in names}
        claimed |= sub.keys()
        out.append(C.from_flat(cls, sub))
    stray = sorted(set(flat) - claimed)
    if stray and classes:
        known = [k for cls in classes for k, _ in _config_fields(cls)]
        hints = {s: difflib.get_close_matches(s, known, n=1) for s in stray}
        msg = ", ".join(f"{s!r}" + (f" (did you mean {h[0]!r}?)" if h else "") for s, h in hints.items())
        raise C.ConfigError(f"unknown config keys: {msg}")
    return out


def log_resolved(args, cfgs, out_dir=None):
    text = "".join(C.dumps(c) for c in cfgs)
    plain = {k: v for k, v in vars(args).items() if not k.startswith("cfg:") and k != "log_level"}
    log.info("command %s, arguments %s", args.command, plain)
    log.info("resolved config:\n%s", text.rstrip() or "(none)")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "resolved_config.txt").write_text(text)


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value file, or a preset name (tiny, full)")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="fix seeds and forbid nondeterministic kernels")
    common.add_argument("--log-level", default="INFO")

    p = _Parser(prog="damnet", description="Bi-temporal SAR flood change detection.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("--out", default=None, help="dataset root (default: $DAMNET_DATA_ROOT or ./data)")
    s.add_argument("--split", default="train", choices=("train", "val", "test"))

    s = sub.add_parser("label", parents=[common], help="derive a flood label from a pre/post dB pair")
    s.add_argument("--pre", required=True)
    s.add_argument("--post", required=True)
    s.add_argument("--out", required=True, help="flood mask raster path")
    s.add_argument("--permanent-out", default=None, help="optional permanent-water mask path")

    s = sub.add_parser("tile", parents=[common], help="tile a scene into the dataset layout")
    s.add_argument("--pre", required=True)
    s.add_argument("--post", required=True)
    s.add_argument("--label", default=None, help="label raster; derived by thresholding when absent")
    s.add_argument("--root", default=None)
    s.add_argument("--split", default="train", choices=("train", "val", "test"))
    s.add_argument("--event", default="scene")
    s.add_argument("--size", type=int, default=256)

    s = sub.add_parser("train", parents=[common], help="train a model on a dataset root")
    s.add_argument("--data", default=None)
    s.add_argument("--out", required=True, help="run directory")

    s = sub.add_parser("eval", parents=[common], help="score masks or a checkpoint")
    s.add_argument("--pred", default=None, help="directory of predicted masks")
    s.add_argument("--label", default=None, help="directory of label masks")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--data", default=None)
    s.add_argument("--split", default="test")
    s.add_argument("--name", default="DAM-Net")
    s.add_argument("--report", default=None, help="write <report>.txt and <report>.json")

    s = sub.add_parser("predict", parents=[common], help="predict every pair of a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", default=None)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=None)
    s.add_argument("--figures", type=int, default=4, help="number of pairs to render as PNG")

    s = sub.add_parser("map", parents=[common], help="sliding-window mapping of a large scene")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--pre", required=True)
    s.add_argument("--post", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=None)
    s.add_argument("--pixel-area-m2", type=float, default=100.0)
    s.add_argument("--batch-size", type=int, default=1)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    s.add_argument("--tolerance", type=float, default=1e-3)
    s.add_argument("--samples", type=int, default=200)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)

    for name, parser in sub.choices.items():
        add_config_flags(parser, COMMAND_CONFIGS[name], skip=("deterministic",))
    return p


def _option_strings(parser, command=None):
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    target = subs.choices.get(command) if command else None
    parsers = [target] if target else list(subs.choices.values())
    return sorted({o for sp in parsers for a in sp._actions for o in a.option_strings if o.startswith("--")})


def _unknown_message(parser, argv, unknown):
    command = next((a for a in argv if not a.startswith("-")), None)
    options = _option_strings(parser, command)
    parts = []
    if any(u.startswith("-") for u in unknown):
        # bare tokens are then most likely values of the unknown flags
        unknown = [u for u in unknown if u.startswith("-")]
    for u in unknown:
        if not u.startswith("-"):
            parts.append(f"unexpected argument {u!r}")
            continue
        flag = u.split("=", 1)[0]
        hint = difflib.get_close_matches(flag, options, n=1)
        parts.append(f"unknown flag {flag}" + (f" (did you mean {hint[0]}?)" if hint else ""))
    return "; ".join(parts)


# -- commands ------------------------------------------------------------------

def cmd_synth(args, cfgs):
    from .data.dataset import synth_generate
    (cfg,) = cfgs
    root = args.out or C.data_root()
    log_resolved(args, cfgs)
    m = synth_generate(cfg, root, args.split)
    print(f"wrote {len(m.entries)} pairs to {root}")
    return EXIT_OK


def cmd_label(args, cfgs):
    from .data.labeling import label_pair
    from .data.raster import read_raster, write_mask
    (cfg,) = cfgs
    log_resolved(args, cfgs)
    pre, geo = read_raster(args.pre)
    post, _ = read_raster(args.post)
    flood, permanent = label_pair(pre, post, cfg)
    write_mask(args.out, flood, geo)
    if args.permanent_out:
        write_mask(args.permanent_out, permanent, geo)
    print(f"flood_pixels\t{int(flood.sum())}\npermanent_pixels\t{int(permanent.sum())}")
    return EXIT_OK


def cmd_tile(args, cfgs):
    from .data.dataset import add_scene
    from .data.raster import read_mask, read_raster
    (cfg,) = cfgs
    log_resolved(args, cfgs)
    pre, geo = read_raster(args.pre)
    post, _ = read_raster(args.post)
    label = read_mask(args.label) if args.label else None
    root = args.root or C.data_root()
    m = add_scene(root, pre, post, args.split, args.event, args.size, label, cfg, geo)
    print("\t".join(f"{k}={v}" for k, v in m.split_sizes().items()))
    return EXIT_OK


def cmd_train(args, cfgs):
    from .data.dataset import load_split
    from .model import build, save_checkpoint
    from .plotting import training_curves
    from .training import train
    model_cfg, train_cfg = cfgs
    out = Path(args.out)
    log_resolved(args, cfgs, out)
    root = args.data or C.data_root()
    train_data = load_split(root, "train")
    try:
        val_data = load_split(root, "val")
    except DataError:
        log.warning("no val split under %s; keeping the final epoch", root)
        val_data = None
    model = build(model_cfg, train_cfg.seed)
    best, history = train(model, train_data, val_data, train_cfg)
    model.load_state_dict(best)
    save_checkpoint(out / "model.ckpt", model, {
        "best_epoch": history.best_epoch(), "seed": train_cfg.seed,
        "threshold": train_cfg.loss.binarize_threshold})
    (out / "history.tsv").write_text(history.to_text())
    if history.records:
        training_curves(history, out / "curves.png")
    print(history.to_text(), end="")
    return EXIT_OK


def _mask_files(root: Path) -> dict:
    return {p.relative_to(root).with_suffix(""): p for p in sorted(root.rglob("*"))
            if p.suffix.lower() in MASK_EXT}


def cmd_eval(args, cfgs):
    from . import metrics
    from .data.raster import read_mask
    log_resolved(args, cfgs)
    if args.pred and args.label:
        preds, labels = _mask_files(Path(args.pred)), _mask_files(Path(args.label))
        if not preds:
            raise DataError(f"no masks under {args.pred}")
        missing = sorted(str(k) for k in preds if k not in labels)
        if missing:
            raise DataError(f"{len(missing)} predictions have no label, e.g. {missing[0]}")
        counts = None
        for k, p in preds.items():
            counts = metrics.accumulate(read_mask(p), read_mask(labels[k]), counts)
        report = metrics.compute(counts)
    elif args.checkpoint:
        from .data.dataset import load_split
        from .model import load_checkpoint
        from .training import evaluate_model
        model, meta = load_checkpoint(args.checkpoint)
        pre, post, label = load_split(args.data or C.data_root(), args.split)
        report = evaluate_model(model, pre, post, label, meta.get("threshold", 0.5))
    else:
        raise C.ConfigError("eval needs --pred and --label, or --checkpoint")
    print(metrics.MetricsReport.table_header())
    print(report.table_row(args.name))
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report + ".txt").write_text(report.to_text())
        Path(args.report + ".json").write_text(report.to_json())
    return EXIT_OK


def cmd_predict(args, cfgs):
    from .data.dataset import DatasetManifest, scale_pair
    from .data.raster import read_raster, write_mask, write_probability
    from .model import load_checkpoint
    from .plotting import flood_map
    import torch
    log_resolved(args, cfgs)
    model, meta = load_checkpoint(args.checkpoint)
    thr = args.threshold if args.threshold is not None else meta.get("threshold", 0.5)
    root = Path(args.data or C.data_root())
    manifest = DatasetManifest.load(root)
    out = Path(args.out)
    n = 0
    for e in manifest.entries:
        if e.split != args.split:
            continue
        pre, geo = read_raster(root / e.pre)
        post, _ = read_raster(root / e.post)
        a, b, _ = scale_pair(pre, post, e.scale)
        dtype = next(model.parameters()).dtype
        probs = model.predict(torch.from_numpy(a)[None].to(dtype), torch.from_numpy(b)[None].to(dtype))[0, 0]
        probs = probs.float().numpy()
        mask = (probs >= thr).astype(np.uint8)
        stem = Path(e.pre).stem
        write_probability(out / "prob" / f"{stem}.tif", probs, geo)
        write_mask(out / "mask" / f"{stem}.png", mask)
        if n < args.figures:
            (out / "figures").mkdir(parents=True, exist_ok=True)
            flood_map(a[0], b[0], probs, mask, out / "figures" / f"{stem}.png")
        n += 1
    if n == 0:
        raise DataError(f"split {args.split!r} is empty")
    print(f"predicted {n} pairs into {out}")
    return EXIT_OK


def cmd_map(args, cfgs):
    from .data.raster import read_raster, write_mask, write_probability
    from .inference import area_stats, map_large_scene, prepare_scene
    from .model import load_checkpoint
    from .plotting import flood_map
    (scheme,) = cfgs
    out = Path(args.out)
    log_resolved(args, cfgs, out)
    model, meta = load_checkpoint(args.checkpoint)
    thr = args.threshold if args.threshold is not None else meta.get("threshold", 0.5)
    pre, geo = read_raster(args.pre)
    post, _ = read_raster(args.post)
    scene, _ = prepare_scene(pre, post)
    probs = map_large_scene(model, scene, scheme, args.batch_size)
    mask = (probs >= thr).astype(np.uint8)
    write_probability(out / "probability.tif", probs, geo)
    write_mask(out / "mask.tif", mask, geo)
    report = area_stats(mask, args.pixel_area_m2)
    (out / "area.txt").write_text(report.to_text())
    (out / "area.json").write_text(report.to_json())
    flood_map(scene.pre, scene.post, probs, mask, out / "overview.png")
    print(f"flooded_pixels\t{report.flooded_pixels}\nflooded_km2\t{report.flooded_km2:.6f}")
    return EXIT_OK


def cmd_gradcheck(args, cfgs):
    from .gradcheck import gradcheck
    (cfg,) = cfgs
    log_resolved(args, cfgs)
    rep = gradcheck(cfg, size=args.size, samples=args.samples, tolerance=args.tolerance, seed=args.seed)
    print(rep.to_text())
    return EXIT_OK if rep.passed else EXIT_CHECK


COMMANDS = {"synth": cmd_synth, "label": cmd_label, "tile": cmd_tile, "train": cmd_train,
            "eval": cmd_eval, "predict": cmd_predict, "map": cmd_map, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    from .training import DivergenceError
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, unknown = parser.parse_known_args(argv)
        if unknown:
            raise UsageError(_unknown_message(parser, argv, unknown))
    except UsageError as exc:
        print(f"damnet: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(getattr(logging, str(args.log_level).upper(), logging.INFO))
    try:
        cfgs = resolve_configs(args, COMMAND_CONFIGS[args.command])
        if args.deterministic is not None and args.command != "train":
            from .model import set_deterministic
            seed = next((getattr(c, "seed") for c in cfgs if hasattr(c, "seed")), getattr(args, "seed", 0))
            set_deterministic(seed, args.deterministic)
        return COMMANDS[args.command](args, cfgs)
    except C.ConfigError as exc:
        print(f"damnet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"damnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"damnet: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


run = main

if __name__ == "__main__":
    sys.exit(main())
