"""Command-line entry point: ``rvmde {synth,train,eval,infer,augment-preview,verify}``."""

import argparse
import copy
import dataclasses
import json
import logging
import sys
import warnings
from importlib import resources
from pathlib import Path

import cv2
import numpy as np
import torch

from . import verification
from .data import (MER_FILE, DataError, PreprocessConfig, SynthConfig, load_manifest, load_sample, preprocess,
                   synth_generate)
from .discretization import DiscretizationError, SidBins, decode_ordinal
from .evaluation import EvaluationError, report_table, split_report
from .geometry import GeometryError, adjust_intrinsics
from .model import ModelConfig, ModelError, build_model, count_params, tiny_config
from .radar_input import MerSpec, PillarSpec, RadarInputError, build_mer, extend_height
from .raster import RasterFormatError, write_raster
from .training import CheckpointError, TrainConfig, TrainingError, fit, load_checkpoint

log = logging.getLogger("rvmde")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
RADAR_MODES = ("height", "mer", "mer-file", "none")


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ config

DEFAULT_CONFIG = {
    "model": {"preset": "full"},
    "bins": {"alpha": 1.0, "beta": 80.0, "K": 80},
    "train": {},
    "data": {},
    "synth": {},
}

_DATA_KEYS = {"resize_hw", "crop_top", "pad_multiple", "radar_mode", "out_of_range", "max_depth", "low_height",
              "rgb_mean", "rgb_std", "pillar", "mer"}


def _bundled(name):
    ref = resources.files("rvmde") / "configs" / f"{name}.json"
    return ref if ref.is_file() else None


def read_config(path):
    """Load a JSON run config; ``path`` may also name a bundled config (``tiny``, ``full``)."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    p = Path(path)
    if p.is_file():
        text = p.read_text()
    elif _bundled(path) is not None:
        text = _bundled(path).read_text()
    else:
        raise ConfigError(f"config {path!r} not found (bundled configs: tiny, full)")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    unknown = set(raw) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for key, val in raw.items():
        cfg[key] = val
    return cfg


def apply_overrides(cfg, overrides):
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    for item in overrides or []:
        path, eq, text = item.partition("=")
        if not eq or "." not in path:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        keys = path.split(".")
        node = cfg
        for k in keys[:-1]:
            if k not in node:
                if node is cfg:
                    raise ConfigError(f"unknown config section {k!r}")
                node[k] = {}
            node = node[k]
            if not isinstance(node, dict):
                raise ConfigError(f"--set {path}: {k!r} is not a section")
        node[keys[-1]] = value
    return cfg


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    bins: SidBins
    train: TrainConfig
    data: PreprocessConfig
    synth: SynthConfig

    def to_dict(self):
        return {"model": self.model.to_dict(), "bins": self.bins.to_dict(), "train": self.train.to_dict(),
                "data": _data_dict(self.data), "synth": dataclasses.asdict(self.synth)}


def _data_dict(pc):
    return {
        "resize_hw": list(pc.resize_hw) if pc.resize_hw else None,
        "crop_top": pc.crop_top,
        "pad_multiple": pc.pad_multiple,
        "radar_mode": pc.radar_mode,
        "out_of_range": pc.out_of_range,
        "max_depth": pc.max_depth,
        "low_height": list(pc.low_height),
        "rgb_mean": list(pc.rgb_mean),
        "rgb_std": list(pc.rgb_std),
        "pillar": {"z_lo": pc.pillar.z_lo, "z_hi": pc.pillar.z_hi},
        "mer": {"sigma_u": pc.mer.sigma_u, "sigma_v": pc.mer.sigma_v, "thresholds": list(pc.mer.thresholds)},
    }


def preprocess_config(d, bins, radar_in_channels):
    unknown = set(d) - _DATA_KEYS
    if unknown:
        raise ConfigError(f"unknown data config keys {sorted(unknown)}")
    d = dict(d)
    pillar = PillarSpec(**d.pop("pillar", {}))
    mer = MerSpec(**d.pop("mer", {}))
    for key in ("resize_hw", "low_height", "rgb_mean", "rgb_std"):
        if d.get(key) is not None:
            d[key] = tuple(d[key])
    pc = PreprocessConfig(pillar=pillar, mer=mer, bins=bins, radar_in_channels=radar_in_channels, **d)
    if pc.radar_mode not in RADAR_MODES:
        raise ConfigError(f"unknown radar mode {pc.radar_mode!r}; choose from {', '.join(RADAR_MODES)}")
    if pc.out_of_range not in ("clamp", "mask"):
        raise ConfigError(f"out_of_range must be 'clamp' or 'mask', got {pc.out_of_range!r}")
    return pc


def _model_config(d):
    d = dict(d)
    preset = d.pop("preset", None)
    if preset == "tiny":
        return tiny_config(**d)
    if preset not in (None, "full"):
        raise ConfigError(f"unknown model preset {preset!r}; choose tiny or full")
    return ModelConfig.from_dict(d)


def build_run_config(raw, radar=None):
    """Validate every section with its owning module; ``radar`` overrides data.radar_mode."""
    try:
        bins = SidBins.from_dict(raw["bins"])
        model_d = dict(raw["model"])
        model_d.setdefault("K", bins.K)
        model = _model_config(model_d).validate()
        if model.K != bins.K:
            raise ConfigError(f"model.K={model.K} disagrees with bins.K={bins.K}")
        data_d = dict(raw["data"])
        if radar is not None:
            data_d["radar_mode"] = radar
        data = preprocess_config(data_d, bins, model.radar_in_channels)
        train = TrainConfig.from_dict(raw["train"]).validate()
        synth_d = dict(raw["synth"])
        for key in ("depth_range", "objects", "box_width", "box_height", "box_length", "split_fractions"):
            if key in synth_d:
                synth_d[key] = tuple(synth_d[key])
        unknown = set(synth_d) - set(SynthConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth config keys {sorted(unknown)}")
        synth = SynthConfig(**synth_d).validate()
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return RunConfig(model, bins, train, data, synth)


def check_channels(run):
    want = run.data.radar_channels()
    if want != run.model.radar_in_channels:
        raise ConfigError(f"channel mismatch: radar mode {run.data.radar_mode!r} produces {want} channel(s) "
                          f"but the model expects radar_in_channels={run.model.radar_in_channels}")


# ----------------------------------------------------------------- helpers

def _setup_runtime(args):
    if getattr(args, "threads", None):
        torch.set_num_threads(args.threads)
    if getattr(args, "deterministic", False):
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _load_run(args, radar=None):
    raw = apply_overrides(read_config(args.config), args.set)
    return build_run_config(raw, radar)


def _sample_dirs(data, split):
    """Sample directories from a manifest (file or dataset dir) or a single sample dir."""
    p = Path(data)
    if p.is_dir() and (p / "image.png").exists():
        return [p]
    return load_manifest(p).split(split)


def _prepare(dirs, pc):
    out = []
    for d in dirs:
        out.append(preprocess(load_sample(d), pc))
    if not out:
        raise DataError("no samples selected")
    return out


def _predict(model, prepared):
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        probs, _ = model(torch.from_numpy(prepared.rgb)[None].to(dtype),
                         torch.from_numpy(prepared.radar)[None].to(dtype))
    return decode_ordinal(probs[0].double().numpy(), model.bins)


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    raw = apply_overrides(read_config(args.config), args.set)
    run = build_run_config(raw)
    synth = run.synth
    if args.seed is not None:
        synth = dataclasses.replace(synth, seed=args.seed)
    manifest = synth_generate(synth, args.out, args.num)
    path = Path(args.out) / "manifest.json"
    print(f"wrote {len(manifest.entries)} samples; manifest {path}")
    return EXIT_OK


def cmd_train(args):
    run = _load_run(args, args.radar)
    check_channels(run)
    train = run.train
    if args.seed is not None:
        train = dataclasses.replace(train, seed=args.seed)
    if args.iters is not None:
        train = dataclasses.replace(train, max_iters=args.iters)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        if resume.model_config != run.model or resume.bins.to_dict() != run.bins.to_dict():
            raise ConfigError(f"{args.resume}: checkpoint model/bins differ from the run config")
    prepared = _prepare(_sample_dirs(args.data, args.split), run.data)
    model = build_model(run.model, run.bins, seed=train.seed)
    log.info("model with %d parameters, %d training samples", count_params(model), len(prepared))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt"
    extra = {"data": _data_dict(run.data)}
    history = fit(model, [p.train_item() for p in prepared], train, ckpt, resume, extra)
    history.to_csv(out / "history.csv")
    (out / "config.json").write_text(json.dumps(dataclasses.replace(run, train=train).to_dict(), indent=1) + "\n")
    final = history.loss[-1] if history.loss else float("nan")
    print(f"checkpoint {ckpt}; history {out / 'history.csv'}; final loss {final:.6f}")
    return EXIT_OK


def _eval_setup(args):
    ckpt = load_checkpoint(args.checkpoint)
    bins = ckpt.bins
    if args.config:
        run = _load_run(args, args.radar)
        if run.bins.to_dict() != bins.to_dict():
            warnings.warn(f"config bins {run.bins.to_dict()} differ from checkpoint bins {bins.to_dict()}; "
                          "using the checkpoint bins")
        data_d = _data_dict(run.data)
    else:
        data_d = dict(ckpt.extra.get("data", {}))
        if args.radar:
            data_d["radar_mode"] = args.radar
    pc = preprocess_config(data_d, bins, ckpt.model_config.radar_in_channels)
    return ckpt, pc, _sample_dirs(args.data, args.split)


def cmd_eval(args):
    ckpt, pc, dirs = _eval_setup(args)
    if pc.radar_channels() != ckpt.model_config.radar_in_channels:
        raise ConfigError(f"channel mismatch: radar mode {pc.radar_mode!r} vs checkpoint "
                          f"radar_in_channels={ckpt.model_config.radar_in_channels}")
    model = ckpt.build()
    prepared = _prepare(dirs, pc)
    gt = np.concatenate([p.gt_depth[p.gt_depth > 0] for p in prepared])
    outside = float(np.mean((gt < ckpt.bins.alpha) | (gt > ckpt.bins.beta))) if gt.size else 0.0
    if outside > 0.25:
        warnings.warn(f"{outside:.0%} of ground-truth pixels fall outside the checkpoint bins "
                      f"[{ckpt.bins.alpha}, {ckpt.bins.beta}] m; evaluating with the checkpoint bins")
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    full, low = [], []
    for p in prepared:
        pred = p.gt_depth.copy() if args.oracle else _predict(model, p)
        if args.oracle:
            pred[pred <= 0] = 1.0  # unsupervised pixels are outside every mask
        full.append((pred, p.gt_depth, p.eval_masks["valid"], p.tag))
        low.append((pred, p.gt_depth, p.eval_masks["low_height"], p.tag))
        if out and args.save_pred:
            write_raster(out / f"{p.key}.pred.rvrd", pred)
    reports = split_report(full)
    text = report_table(reports, f"split={args.split} samples={len(prepared)}")
    payload = {"all": {k: v.to_dict() for k, v in reports.items()}}
    if args.low_height:
        low_reports = split_report(low)
        text += "\n\n" + report_table(low_reports, f"low-height band {pc.low_height[0]}-{pc.low_height[1]} m")
        payload["low_height"] = {k: v.to_dict() for k, v in low_reports.items()}
    print(text)
    if out:
        (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
        (out / "report.txt").write_text(text + "\n")
    return EXIT_OK


def cmd_infer(args):
    ckpt, pc, dirs = _eval_setup(args)
    model = ckpt.build()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for d in dirs:
        p = preprocess(load_sample(d), pc)
        pred = _predict(model, p)
        write_raster(out / f"{p.key}.depth.rvrd", pred)
        if args.png:
            cv2.imwrite(str(out / f"{p.key}.depth.png"), _colorize(pred, ckpt.bins.alpha, ckpt.bins.beta))
    print(f"wrote {len(dirs)} depth map(s) to {out}")
    return EXIT_OK


def _colorize(depth, lo, hi):
    """Log-scaled colormap; empty (0) pixels are black."""
    d = np.asarray(depth, dtype=np.float64)
    filled = d > 0
    t = np.zeros_like(d)
    t[filled] = (np.log(np.clip(d[filled], lo, hi)) - np.log(lo)) / (np.log(hi) - np.log(lo))
    img = cv2.applyColorMap((255 * (1 - t)).astype(np.uint8), cv2.COLORMAP_JET)
    img[~filled] = 0
    return img


def cmd_augment_preview(args):
    run = _load_run(args)
    pc = run.data
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dirs = _sample_dirs(args.data, args.split)
    if args.limit:
        dirs = dirs[:args.limit]
    for d in dirs:
        s = load_sample(d)
        rh, rw = pc.resize_hw or (s.height, s.width)
        h, w = rh - pc.crop_top, rw
        k = adjust_intrinsics(s.intrinsics, rw / s.width, rh / s.height, pc.crop_top)
        pill = extend_height(s.radar, pc.pillar, s.cam_from_ego, k, w, h)
        mer = build_mer(s.radar, s.cam_from_ego, k, w, h, pc.mer)
        write_raster(out / f"{s.key}.height.rvrd", pill)
        write_raster(out / f"{s.key}.mer.rvrd", mer)
        if args.export_mer:
            write_raster(Path(d) / MER_FILE, mer)
        cv2.imwrite(str(out / f"{s.key}.height.png"), _colorize(pill[0], run.bins.alpha, run.bins.beta))
        panels = [_colorize(mer[c], run.bins.alpha, run.bins.beta) for c in range(mer.shape[0])]
        cv2.imwrite(str(out / f"{s.key}.mer.png"), np.vstack(panels))
    print(f"wrote previews for {len(dirs)} sample(s) to {out}")
    return EXIT_OK


def cmd_verify(args):
    results, timings = verification.run_checks(args.only)
    print(verification.format_results(results))
    total = sum(timings.values())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {total:.1f} s")
    return EXIT_VERIFY if failed else EXIT_OK


# ------------------------------------------------------------------ parser

def _common(p, config=True):
    if config:
        p.add_argument("--config", help="JSON run config file or bundled name (tiny, full)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value by dotted path, e.g. model.pyramid_channels=64")
    p.add_argument("--threads", type=int, help="torch intra-op threads")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, deterministic kernels")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def build_parser():
    parser = _Parser(prog="rvmde", description="Radar-camera monocular depth estimation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--num", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, help="generator seed (overrides synth.seed)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--split", default="train", help="split to train on")
    p.add_argument("--out", required=True, help="output directory for checkpoint and history")
    p.add_argument("--radar", choices=RADAR_MODES, help="radar input path (overrides data.radar_mode)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int, help="training seed (overrides train.seed)")
    p.add_argument("--iters", type=int, help="iteration budget (overrides train.max_iters)")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a checkpoint on a split"),
                              ("infer", cmd_infer, "write predicted depth maps")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--checkpoint", required=True, help="RVCK checkpoint")
        p.add_argument("--data", required=True, help="dataset directory, manifest or single sample directory")
        p.add_argument("--split", default="test", help="split to use (default test)")
        p.add_argument("--radar", choices=RADAR_MODES, help="radar input path")
        if name == "eval":
            p.add_argument("--out", help="directory for report.json, report.txt and predictions")
            p.add_argument("--low-height", action="store_true", help="add the 0.3-2.0 m height band report")
            p.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
            p.add_argument("--save-pred", action="store_true", help="write per-sample predicted depth rasters")
        else:
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--png", action="store_true", help="also write colorized PNGs")
        p.set_defaults(func=func)

    p = sub.add_parser("augment-preview", help="render height-extended and MER radar images")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory, manifest or single sample directory")
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=0, help="preview at most this many samples")
    p.add_argument("--export-mer", action="store_true",
                   help=f"also write {MER_FILE} into each sample directory for --radar mer-file")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("verify", help="run the self-check suites")
    _common(p, config=False)
    p.add_argument("--only", action="append", choices=sorted(verification.SUITES),
                   help="run only this check group (repeatable)")
    p.set_defaults(func=cmd_verify)
    return parser


_USAGE_ERRORS = (ConfigError, ModelError, TrainingError, DiscretizationError, EvaluationError, ValueError)
_DATA_ERRORS = (DataError, RadarInputError, GeometryError, RasterFormatError, CheckpointError, OSError)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    _setup_runtime(args)
    try:
        return args.func(args)
    except _DATA_ERRORS as exc:
        print(f"rvmde {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _USAGE_ERRORS as exc:
        print(f"rvmde {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
