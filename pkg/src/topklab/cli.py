"""Command-line surface: gen-data, train, eval, synth, reconstruct,
dump-masks.

Configuration comes from an optional `key = value` text file plus flags;
flags override file values. Every command echoes its fully-resolved
config into the output directory before doing any work.

Exit codes: 0 ok, 64 usage, 65 bad input data, 2 I/O, 1 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_IO = 2
EXIT_USAGE = 64
EXIT_BAD_INPUT = 65


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_config_file(path) -> dict:
    """Line-oriented `key = value`; '#' starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = val
    return values


def _resolve(args, defaults: dict) -> dict:
    """defaults <- config file <- explicit flags."""
    cfg = dict(defaults)
    file_vals = _parse_config_file(args.config) if args.config else {}
    for key, val in file_vals.items():
        if key not in cfg:
            raise UsageError(f"unknown config key {key!r}")
        cfg[key] = type(defaults[key])(val) if defaults[key] is not None else val
    for key in cfg:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def _echo_config(out_dir, cfg: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config_resolved.txt", "w", encoding="utf-8") as f:
        for k in sorted(cfg):
            f.write(f"{k} = {cfg[k]}\n")


def _model_config(cfg: dict):
    from .model import ModelConfig
    from .sparsity import TopKConfig
    widths = tuple(int(w) for w in str(cfg["widths"]).split(","))
    variant = cfg["topk_variant"]
    topk = None if variant == "none" else TopKConfig(float(cfg["topk_rho"]), variant)
    return ModelConfig(widths=widths, topk_stage=int(cfg["topk_stage"]), topk=topk,
                       image_size=int(cfg["image_size"]))


def _load_image(path) -> np.ndarray:
    from .datagen import load_png
    try:
        return load_png(path)
    except OSError as e:
        raise BadInputError(f"cannot decode image {path}: {e}")


class BadInputError(Exception):
    pass


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    from .datagen import DatasetConfig, generate_dataset
    defaults = {"seed": 0, "out": None, "image_size": 64, "train_count": 4000,
                "clean_count": 800, "cueconflict_count": 800,
                "stylized_count": 800}
    cfg = _resolve(args, defaults)
    if not cfg["out"]:
        raise UsageError("gen-data requires --out")
    _echo_config(cfg["out"], cfg)
    dc = DatasetConfig(out_dir=cfg["out"], image_size=int(cfg["image_size"]),
                       train_count=int(cfg["train_count"]),
                       clean_count=int(cfg["clean_count"]),
                       cueconflict_count=int(cfg["cueconflict_count"]),
                       stylized_count=int(cfg["stylized_count"]))
    generate_dataset(dc, int(cfg["seed"]))
    print(str(Path(cfg["out"]) / "manifest.tsv"))
    return EXIT_OK


_TRAIN_DEFAULTS = {
    "seed": 0, "data": None, "out": None,
    "widths": "16,32,64,64", "image_size": 64,
    "topk_variant": "none", "topk_rho": 0.2, "topk_stage": 2,
    "lr": 0.1, "momentum": 0.9, "weight_decay": 5e-4,
    "batch_size": 32, "epochs": 30, "probe_masks": 0,
}


def cmd_train(args) -> int:
    from .train import TrainConfig, train_model
    cfg = _resolve(args, _TRAIN_DEFAULTS)
    if not cfg["data"] or not cfg["out"]:
        raise UsageError("train requires --data and --out")
    _echo_config(cfg["out"], cfg)
    tc = TrainConfig(lr0=float(cfg["lr"]), momentum=float(cfg["momentum"]),
                     weight_decay=float(cfg["weight_decay"]),
                     batch_size=int(cfg["batch_size"]), epochs=int(cfg["epochs"]),
                     seed=int(cfg["seed"]))
    model, history = train_model(
        cfg["data"], _model_config(cfg), tc, out_dir=cfg["out"],
        probe_masks=bool(int(cfg["probe_masks"])),
        log=lambda r: print(f"epoch {r['epoch']}: loss={r['train_loss']:.4f} "
                            f"clean_acc={r['clean_acc']:.4f}"))
    ckpt = Path(cfg["out"]) / "model.sslm"
    model.save(ckpt)
    print(str(ckpt))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .datagen import load_split
    from .evaluate import accuracy, bias_scores, classify, write_reports
    from .model import ConvNet
    defaults = {"checkpoint": None, "data": None, "split": "clean",
                "out": None, "seed": 0}
    cfg = _resolve(args, defaults)
    if not all(cfg[k] for k in ("checkpoint", "data", "out")):
        raise UsageError("eval requires --checkpoint, --data and --out")
    if cfg["split"] not in ("train", "clean", "cueconflict", "stylized"):
        raise UsageError(f"unknown split {cfg['split']!r}")
    _echo_config(cfg["out"], cfg)
    model = ConvNet.load(cfg["checkpoint"])
    images, shapes, textures = load_split(cfg["data"], cfg["split"])
    preds = classify(model, images)
    payload = {"split": cfg["split"], "n": len(preds), "config": cfg,
               "accuracy": accuracy(preds, shapes)}
    if cfg["split"] in ("cueconflict", "stylized"):
        payload["bias"] = bias_scores(preds, shapes, textures).to_dict()
    write_reports(cfg["out"], f"report_{cfg['split']}", payload)
    print(f"accuracy={payload['accuracy']:.4f}")
    if "bias" in payload:
        print(f"shape_bias={payload['bias']['shape_bias']:.4f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .datagen import save_png
    from .model import ConvNet
    from .viz import SynthesisJob, texture_synthesize, write_trace
    defaults = {"checkpoint": None, "target": None, "out": None,
                "mode": "with_topk", "steps": 100, "lr": 1.0,
                "layers": "1,2", "rho": 0.2, "seed": 0}
    cfg = _resolve(args, defaults)
    if not all(cfg[k] for k in ("checkpoint", "target", "out")):
        raise UsageError("synth requires --checkpoint, --target and --out")
    if cfg["mode"] not in ("with_topk", "without_topk"):
        raise UsageError(f"unknown mode {cfg['mode']!r}")
    _echo_config(cfg["out"], cfg)
    model = ConvNet.load(cfg["checkpoint"])
    target = _load_image(cfg["target"])
    job = SynthesisJob(target=target,
                       layers=tuple(int(v) for v in str(cfg["layers"]).split(",")),
                       mode=cfg["mode"], steps=int(cfg["steps"]),
                       lr=float(cfg["lr"]), rho=float(cfg["rho"]),
                       init_seed=int(cfg["seed"]))
    image, trace = texture_synthesize(model, job)
    out = Path(cfg["out"])
    save_png(out / f"synth_{cfg['mode']}.png", image)
    write_trace(out / f"trace_{cfg['mode']}.csv", trace)
    print(str(out / f"synth_{cfg['mode']}.png"))
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .datagen import save_png
    from .model import ConvNet
    from .viz import ReconstructionJob, reconstruct, write_trace
    defaults = {"checkpoint": None, "target": None, "out": None,
                "mask_mode": "topk_mask", "steps": 100, "lr": 1.0,
                "layers": "1,2", "rho": 0.2, "seed": 0, "asymmetric": 0}
    cfg = _resolve(args, defaults)
    if not all(cfg[k] for k in ("checkpoint", "target", "out")):
        raise UsageError("reconstruct requires --checkpoint, --target and --out")
    from .viz import MASK_MODES
    if cfg["mask_mode"] not in MASK_MODES:
        raise UsageError(f"unknown mask mode {cfg['mask_mode']!r}")
    _echo_config(cfg["out"], cfg)
    model = ConvNet.load(cfg["checkpoint"])
    target = _load_image(cfg["target"])
    job = ReconstructionJob(
        target=target,
        layers=tuple(int(v) for v in str(cfg["layers"]).split(",")),
        mask_mode=cfg["mask_mode"], steps=int(cfg["steps"]), lr=float(cfg["lr"]),
        rho=float(cfg["rho"]), symmetric=not int(cfg["asymmetric"]),
        init_seed=int(cfg["seed"]))
    image, trace = reconstruct(model, job)
    out = Path(cfg["out"])
    save_png(out / f"recon_{cfg['mask_mode']}.png", image)
    write_trace(out / f"trace_{cfg['mask_mode']}.csv", trace)
    print(str(out / f"recon_{cfg['mask_mode']}.png"))
    return EXIT_OK


def cmd_dump_masks(args) -> int:
    from .model import ConvNet
    from .sparsity import TopKConfig
    from .viz import dump_topk_masks
    defaults = {"checkpoint": None, "image": None, "out": None,
                "layer": 2, "tag": "0", "rho": 0.0}
    cfg = _resolve(args, defaults)
    if not all(cfg[k] for k in ("checkpoint", "image", "out")):
        raise UsageError("dump-masks requires --checkpoint, --image and --out")
    _echo_config(cfg["out"], cfg)
    model = ConvNet.load(cfg["checkpoint"])
    image = _load_image(cfg["image"])
    tk = TopKConfig(float(cfg["rho"])) if float(cfg["rho"]) > 0 else None
    paths = dump_topk_masks(model, image, int(cfg["layer"]), cfg["tag"],
                            cfg["out"], cfg=tk)
    print(f"{len(paths)} masks written to {cfg['out']}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="topklab",
                description="Spatial Top-K sparsity laboratory: data, training, "
                            "bias evaluation and visualization.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, flags):
        sp = sub.add_parser(name)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", default=None)
        for flag, kind in flags.items():
            sp.add_argument(f"--{flag.replace('_', '-')}", dest=flag,
                            type=kind, default=None)

    add("gen-data", cmd_gen_data,
        {"seed": int, "out": str, "image_size": int, "train_count": int,
         "clean_count": int, "cueconflict_count": int, "stylized_count": int})
    add("train", cmd_train,
        {"seed": int, "data": str, "out": str, "widths": str, "image_size": int,
         "topk_variant": str, "topk_rho": float, "topk_stage": int, "lr": float,
         "momentum": float, "weight_decay": float, "batch_size": int,
         "epochs": int, "probe_masks": int})
    add("eval", cmd_eval,
        {"checkpoint": str, "data": str, "split": str, "out": str, "seed": int})
    add("synth", cmd_synth,
        {"checkpoint": str, "target": str, "out": str, "mode": str, "steps": int,
         "lr": float, "layers": str, "rho": float, "seed": int})
    add("reconstruct", cmd_reconstruct,
        {"checkpoint": str, "target": str, "out": str, "mask_mode": str,
         "steps": int, "lr": float, "layers": str, "rho": float, "seed": int,
         "asymmetric": int})
    add("dump-masks", cmd_dump_masks,
        {"checkpoint": str, "image": str, "out": str, "layer": int, "tag": str,
         "rho": float})
    return p


def main(argv=None) -> int:
    from .tensor import NonFiniteError, TensorError
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except BadInputError as e:
        print(f"bad input: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (IOError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, ArithmeticError, TensorError, ValueError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
