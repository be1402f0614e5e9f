"""Command-line interface.

Every command accepts ``--config FILE``, a flat ``key = value`` text file
whose keys are the long flag names (dashes or underscores). Precedence,
lowest first: built-in defaults, ``--paper-scale`` presets, the config
file, explicit flags.

Each command writes a JSON run manifest (argv, resolved config, seed,
git-style content hashes of inputs and outputs, timings). ``replay``
re-runs a manifest and checks the outputs hash the same.

Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .data import (
    DEFAULT_SENSITIVITY,
    PairedDataset,
    PhantomSpec,
    VolumeFormatError,
    build_dataset,
    denormalize,
    make_pair,
    normalize,
    normalize_pair,
    read_volume,
    splitmix64,
    write_volume,
)
from .losses import LossWeights
from .metrics import MetricReport, evaluate_volume, format_table
from .trainer import (
    PAPER_BATCH,
    PAPER_PATCHES,
    AdamConfig,
    CheckpointFormatError,
    TrainConfig,
    denoise_volume,
    generator_from_checkpoint,
    load_checkpoint,
    pretrain_generator,
    save_checkpoint,
    train_wgan,
    validation_batch,
)

log = logging.getLogger("petdenoise")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class Diverged(RuntimeError):
    pass


# -- helpers -----------------------------------------------------------------------


def git_hash(path) -> str:
    """Git blob id of a file's contents."""
    blob = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


def read_config_file(path) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _triple(text: str) -> tuple:
    parts = [int(p) for p in str(text).replace("x", ",").split(",") if p.strip()]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three integers like 9,64,64, got {text!r}")
    return tuple(parts)


def _pair(text: str) -> tuple:
    parts = [int(p) for p in str(text).replace("x", ",").split(",") if p.strip()]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two integers like 64,64, got {text!r}")
    return tuple(parts)


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return v


def _jsonable(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, (tuple, list)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class Run:
    """Collects manifest fields while a command executes."""

    def __init__(self, args: argparse.Namespace, argv: Sequence[str]):
        self.args = args
        self.argv = list(argv)
        self.inputs: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}
        self.timings: Dict[str, float] = {}
        self.result: dict = {}
        self.t0 = time.perf_counter()

    def input(self, path) -> Path:
        path = Path(path)
        if path.is_file():
            self.inputs[str(path)] = git_hash(path)
        return path

    def output(self, path) -> None:
        self.outputs[str(path)] = git_hash(path)

    def timed(self, name: str, start: float) -> None:
        self.timings[name] = time.perf_counter() - start

    def manifest(self) -> dict:
        config = {k: _jsonable(v) for k, v in sorted(vars(self.args).items()) if k not in ("func", "config")}
        self.timings["total"] = time.perf_counter() - self.t0
        return {
            "command": self.args.command,
            "argv": self.argv,
            "config": config,
            "config_file": self.args.config,
            "seed": getattr(self.args, "seed", None),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timings": self.timings,
            "result": self.result,
            "version": __version__,
        }


def _manifest_path(args) -> Path:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    if args.command == "replay" and not args.out:
        return Path(args.manifest_file + ".replay.json")
    out = Path(args.out)
    return out / "manifest.json" if args.command == "gen-data" else out.with_name(out.name + ".manifest.json")


# -- dataset directories ------------------------------------------------------------


def pair_paths(directory: Path, index: int):
    return directory / f"pair_{index:03d}.low.pvol", directory / f"pair_{index:03d}.normal.pvol"


def load_pairs(directory, run: Optional[Run] = None):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory {directory} does not exist")
    lows = sorted(directory.glob("pair_*.low.pvol"))
    if not lows:
        raise FileNotFoundError(f"no pair_*.low.pvol volumes in {directory}")
    pairs = []
    for low_path in lows:
        normal_path = low_path.with_name(low_path.name.replace(".low.", ".normal."))
        if run is not None:
            run.input(low_path), run.input(normal_path)
        pairs.append((read_volume(low_path), read_volume(normal_path)))
    return pairs


# -- commands ------------------------------------------------------------------------


def cmd_gen_data(args, run: Run) -> None:
    if not (0.0 < args.dose <= 1.0):
        raise ConfigError(f"--dose must be in (0, 1], got {args.dose}")
    if args.pairs < 1:
        raise ConfigError(f"--pairs must be >= 1, got {args.pairs}")
    if args.spec:
        spec = PhantomSpec.from_dict(json.loads(run.input(args.spec).read_text()))
    else:
        spec = PhantomSpec()
    if args.dims:
        spec.dims = args.dims
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"invalid phantom spec: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    for i in range(args.pairs):
        low, normal = make_pair(spec, splitmix64(args.seed, i), args.dose, args.sensitivity)
        for vol, path in zip((low, normal), pair_paths(out, i)):
            write_volume(vol, path)
            run.output(path)
    run.timed("generate", start)
    run.result = {"spec": spec.to_dict(), "pairs": args.pairs}


def _train_config(args, phase: str, init: str) -> TrainConfig:
    kw = dict(
        phase=phase,
        init=init,
        seed=args.seed,
        deterministic=args.deterministic,
        variant=args.variant,
    )
    if phase == "pretrain":
        kw["pretrain_loss"] = args.loss
    else:
        kw["weights"] = LossWeights(lambda_gp=args.lambda_gp, lambda_m=args.lambda_m)
        kw["d_steps_per_g_step"] = args.d_steps
    if args.lr is not None:
        kw["adam"] = AdamConfig(lr=args.lr)
    if args.paper_scale:
        base = TrainConfig.paper_scale(phase, init, **kw)
    else:
        base = TrainConfig(**kw)
    if args.epochs is None and not args.paper_scale and phase == "wgan":
        # same epoch counts as the paper-scale presets: 40 direct, 10 transfer
        args.epochs = 10 if init == "checkpoint" else 40
    for name in ("epochs", "steps_per_epoch", "batch_size", "patch_size"):
        value = getattr(args, name)
        if value is not None:
            setattr(base, name, value)
    try:
        base.__post_init__()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return base


def _finish_training(args, run: Run, ckpt, tlog, dataset) -> None:
    save_checkpoint(ckpt, args.out)
    run.output(args.out)
    run.result = {
        "diverged": tlog.diverged,
        "g_updates": tlog.g_updates,
        "d_updates": tlog.d_updates,
        "validation": [list(v) for v in tlog.validation],
        "intensity_scale": dataset.scale,
        "provenance": ckpt.provenance,
    }
    if args.log_json:
        write_json(args.log_json, tlog.to_dict())
        run.output(args.log_json)
    run.timings["epochs"] = tlog.epoch_seconds
    if tlog.diverged:
        raise Diverged(f"training diverged after {tlog.g_updates} generator updates; kept the last finite checkpoint")


def cmd_pretrain(args, run: Run) -> None:
    config = _train_config(args, "pretrain", "xavier")
    dataset = build_dataset(load_pairs(args.data, run))
    vbatch = validation_batch(dataset, config.patch_size, seed=splitmix64(args.seed, 9))
    start = time.perf_counter()
    ckpt, tlog = pretrain_generator(config, dataset, validation=vbatch)
    run.timed("train", start)
    _finish_training(args, run, ckpt, tlog, dataset)


def cmd_train(args, run: Run) -> None:
    g_init = None
    if args.init != "scratch":
        g_init = load_checkpoint(run.input(args.init))
    config = _train_config(args, "wgan", "xavier" if g_init is None else "checkpoint")
    dataset = build_dataset(load_pairs(args.data, run))
    vbatch = validation_batch(dataset, config.patch_size, seed=splitmix64(args.seed, 9))
    start = time.perf_counter()
    ckpt, tlog = train_wgan(config, dataset, g_init=g_init, validation=vbatch)
    run.timed("train", start)
    _finish_training(args, run, ckpt, tlog, dataset)


def denoise_raw(ckpt, volume, stride_z=1, tile=None, overlap=8):
    """Normalize with the checkpoint's intensity scale, denoise, restore units."""
    scale = float(ckpt.provenance.get("intensity_scale", 1.0))
    gen = generator_from_checkpoint(ckpt)
    return denormalize(denoise_volume(gen, normalize(volume, scale), stride_z, tile, overlap))


def cmd_denoise(args, run: Run) -> None:
    ckpt = load_checkpoint(run.input(args.ckpt))
    volume = read_volume(run.input(args.input))
    start = time.perf_counter()
    try:
        out = denoise_raw(ckpt, volume, args.stride_z, args.tile, args.overlap)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    run.timed("denoise", start)
    write_volume(out, args.out)
    run.output(args.out)
    run.result = {"dims": list(out.dims)}


def cmd_evaluate(args, run: Run) -> None:
    ref = read_volume(run.input(args.ref))
    test = read_volume(run.input(args.test))
    start = time.perf_counter()
    try:
        report = evaluate_volume(ref, test)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    run.timed("evaluate", start)
    Path(args.out).write_text(report.to_json() + "\n")
    run.output(args.out)
    run.result = {k: v for k, v in report.to_dict().items() if k != "per_slice"}
    print(format_table([(Path(args.test).name, report)]))


# -- ablation -------------------------------------------------------------------------

# label, structure, loss, method; mirrors the published ablation table
ABLATION_ROWS = (
    ("Low-dose", "-", "-", "-"),
    ("Pure 2D network", "2D", "MSE", "Direct"),
    ("Pure 3D network", "3D", "MSE", "Direct"),
    ("Hybrid 2D and 3D network", "2D&3D", "MSE", "Direct"),
    ("WGAN", "2D&3D", "adv", "Direct"),
    ("WGAN (MSE)", "2D&3D", "adv+MSE", "Direct"),
    ("PT-WGAN (MSE)", "2D&3D", "adv+MSE", "Transfer"),
    ("PT-WGAN (SSIM)", "2D&3D", "adv+MSE", "Transfer"),
    ("PT-WGAN (Perceptual)", "2D&3D", "adv+MSE", "Transfer"),
)

ABLATION_DEFAULTS = {
    "pretrain_steps": "20",
    "wgan_steps": "10",
    "batch_size": "4",
    "patch_size": "9,16,16",
    "d_steps": "4",
    "lambda_m": "1e7",
    "lambda_gp": "10",
    "seed": "0",
    "stride_z": "1",
}


def _ablation_grid(path) -> dict:
    grid = dict(ABLATION_DEFAULTS)
    if path:
        extra = read_config_file(path)
        unknown = sorted(set(extra) - set(grid))
        if unknown:
            raise ConfigError(f"unknown ablation keys: {', '.join(unknown)}")
        grid.update(extra)
    try:
        return {
            "pretrain_steps": int(grid["pretrain_steps"]),
            "wgan_steps": int(grid["wgan_steps"]),
            "batch_size": int(grid["batch_size"]),
            "patch_size": _triple(grid["patch_size"]),
            "d_steps": int(grid["d_steps"]),
            "lambda_m": float(grid["lambda_m"]),
            "lambda_gp": float(grid["lambda_gp"]),
            "seed": int(grid["seed"]),
            "stride_z": int(grid["stride_z"]),
        }
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise ConfigError(f"bad ablation grid: {exc}") from exc


def run_ablation(grid: dict, dataset: PairedDataset, test_pairs, workdir: Optional[Path] = None) -> List[dict]:
    """Train and score every ablation row; returns one dict per row."""
    seed, patch, batch = grid["seed"], grid["patch_size"], grid["batch_size"]
    normed = [normalize_pair(lo, n, dataset.scale) for lo, n in test_pairs]

    def pretrain(variant, loss):
        cfg = TrainConfig(phase="pretrain", pretrain_loss=loss, variant=variant, batch_size=batch,
                          steps_per_epoch=grid["pretrain_steps"], patch_size=patch, seed=seed)
        return pretrain_generator(cfg, dataset)

    def wgan(lambda_m, g_init=None):
        cfg = TrainConfig(phase="wgan", init="xavier" if g_init is None else "checkpoint",
                          weights=LossWeights(lambda_gp=grid["lambda_gp"], lambda_m=lambda_m),
                          batch_size=batch, steps_per_epoch=grid["wgan_steps"], patch_size=patch,
                          d_steps_per_g_step=grid["d_steps"], seed=seed)
        return train_wgan(cfg, dataset, g_init=g_init)

    def score(ckpt):
        if ckpt is None:
            reports = [evaluate_volume(n, lo) for lo, n in normed]
        else:
            gen = generator_from_checkpoint(ckpt)
            reports = [evaluate_volume(n, denoise_volume(gen, lo, grid["stride_z"])) for lo, n in normed]
        return _mean_report(reports)

    results = {}
    results["Pure 2D network"] = pretrain("pure2d", "mse")
    results["Pure 3D network"] = pretrain("pure3d", "mse")
    results["Hybrid 2D and 3D network"] = pretrain("hybrid", "mse")
    results["WGAN"] = wgan(0.0)
    results["WGAN (MSE)"] = wgan(grid["lambda_m"])
    # the hybrid MSE row doubles as the transfer source for PT-WGAN (MSE)
    sources = {"MSE": results["Hybrid 2D and 3D network"][0],
               "SSIM": pretrain("hybrid", "ssim")[0],
               "Perceptual": pretrain("hybrid", "perceptual")[0]}
    for name, src in sources.items():
        results[f"PT-WGAN ({name})"] = wgan(grid["lambda_m"], src)

    rows = []
    for label, structure, loss, method in ABLATION_ROWS:
        ckpt, tlog = results.get(label, (None, None))
        if workdir is not None and ckpt is not None:
            slug = label.lower().replace(" ", "_").replace("(", "").replace(")", "")
            save_checkpoint(ckpt, Path(workdir) / f"{slug}.ptwg")
        rows.append({
            "label": label,
            "structure": structure,
            "loss": loss,
            "method": method,
            "diverged": bool(tlog.diverged) if tlog else False,
            "g_updates": tlog.g_updates if tlog else 0,
            "d_updates": tlog.d_updates if tlog else 0,
            "report": score(ckpt).to_dict(),
        })
    return rows


def _mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    return MetricReport(
        psnr=float(np.mean([r.psnr for r in reports])),
        nrmse=float(np.mean([r.nrmse for r in reports])),
        rfsim=float(np.mean([r.rfsim for r in reports])),
        vif=float(np.mean([r.vif for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
    )


def cmd_ablate(args, run: Run) -> None:
    grid = _ablation_grid(run.input(args.grid) if args.grid else None)
    dataset = build_dataset(load_pairs(args.data, run))
    test_pairs = load_pairs(args.test, run)
    workdir = Path(args.workdir) if args.workdir else None
    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    rows = run_ablation(grid, dataset, test_pairs, workdir)
    run.timed("ablate", start)
    write_json(args.out, {"grid": _jsonable(grid), "rows": rows})
    run.output(args.out)
    run.result = {"rows": len(rows), "diverged": [r["label"] for r in rows if r["diverged"]]}
    print(format_table([(r["label"], MetricReport.from_dict(r["report"])) for r in rows]))
    if run.result["diverged"]:
        raise Diverged(f"ablation rows diverged: {', '.join(run.result['diverged'])}")


def cmd_replay(args, run: Run) -> None:
    manifest = json.loads(run.input(args.manifest_file).read_text())
    code = main(manifest["argv"])
    mismatched = [p for p, h in manifest["outputs"].items() if not Path(p).is_file() or git_hash(p) != h]
    run.result = {"replayed": manifest["command"], "exit_code": code, "mismatched": mismatched}
    print(json.dumps(run.result, indent=2))
    if code != EXIT_OK:
        raise ConfigError(f"replayed command exited with {code}")
    if mismatched:
        raise ConfigError(f"replay produced different outputs: {', '.join(mismatched)}")


# -- parser ----------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="flat key = value file; explicit flags override it")
    p.add_argument("--out", required=out_required, help="output path")
    p.add_argument("--manifest", help="manifest path (default: next to --out)")
    p.add_argument("--seed", type=int, default=0, help="master seed for all randomness")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int, help="generator updates per epoch")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patch-size", type=_triple, help="patch size d,h,w (depth must be 9)")
    p.add_argument("--lr", type=_positive_float, help="Adam step size (default by initialization)")
    p.add_argument("--variant", default="hybrid", choices=["hybrid", "pure2d", "pure3d"])
    p.add_argument("--deterministic", type=_bool, default=True, help="pin BLAS to one thread")
    p.add_argument("--paper-scale", action="store_true",
                   help=f"batch {PAPER_BATCH}, {PAPER_PATCHES} patches per epoch, full epoch counts")
    p.add_argument("--log-json", help="write the per-update training log here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="petdenoise", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write paired low/normal-dose phantom volumes")
    _common(p)
    p.add_argument("--spec", help="PhantomSpec JSON file")
    p.add_argument("--pairs", type=int, default=1)
    p.add_argument("--dose", type=float, default=0.2)
    p.add_argument("--sensitivity", type=_positive_float, default=DEFAULT_SENSITIVITY,
                   help="counts per unit activity at full dose")
    p.add_argument("--dims", type=_triple, help="override the spec's z,y,x dims")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the generator alone")
    _common(p)
    _training(p)
    p.add_argument("--loss", default="mse", choices=["mse", "ssim", "perceptual"])
    p.set_defaults(func=cmd_pretrain, epochs=30)

    p = sub.add_parser("train", help="WGAN training, from scratch or a pretrained checkpoint")
    _common(p)
    _training(p)
    p.add_argument("--init", default="scratch", help="checkpoint path or 'scratch'")
    p.add_argument("--lambda-m", type=float, default=1e7, help="MSE weight; 'inf' trains on MSE alone")
    p.add_argument("--lambda-gp", type=float, default=10.0)
    p.add_argument("--d-steps", type=int, default=4, help="critic updates per generator update")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise a whole volume")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--stride-z", type=int, default=1)
    p.add_argument("--tile", type=_pair, help="spatial tile h,w")
    p.add_argument("--overlap", type=int, default=8)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("evaluate", help="score a test volume against a reference")
    _common(p)
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score every ablation row")
    _common(p)
    p.add_argument("--data", required=True, help="training pairs directory")
    p.add_argument("--test", required=True, help="test pairs directory")
    p.add_argument("--grid", help="flat key = value file of ablation budgets")
    p.add_argument("--workdir", help="keep each row's checkpoint here")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    _common(p, out_required=False)
    p.add_argument("manifest_file")
    p.set_defaults(func=cmd_replay)
    return parser


def _peek(argv: Sequence[str], commands) -> tuple:
    """Find the subcommand and the ``--config`` value before full parsing."""
    command = next((a for a in argv if a in commands), None)
    path = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif a.startswith("--config="):
            path = a.split("=", 1)[1]
    return command, path


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    """Parse flags, folding in ``--config`` values beneath explicit flags."""
    parser = build_parser()
    commands = parser._subparsers._group_actions[0].choices
    command, path = _peek(argv, commands)
    if command is None or path is None:
        return parser.parse_args(argv)
    sub = commands[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in read_config_file(path).items():
        action = actions.get(key)
        if action is None or key in ("config", "help", "manifest_file"):
            raise ConfigError(f"{path}: unknown key {key!r} for {command}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = _bool(raw)
        elif action.type is not None:
            try:
                defaults[key] = action.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"{path}: bad value for {key}: {exc}") from exc
        else:
            defaults[key] = raw
        if action.choices is not None and defaults[key] not in action.choices:
            raise ConfigError(f"{path}: {key} must be one of {list(action.choices)}, got {raw!r}")
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"petdenoise: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"petdenoise: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    run = Run(args, argv)
    code = EXIT_OK
    try:
        args.func(args, run)
    except ConfigError as exc:
        print(f"petdenoise: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, VolumeFormatError, CheckpointFormatError) as exc:
        print(f"petdenoise: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Diverged as exc:
        print(f"petdenoise: {exc}", file=sys.stderr)
        run.result["diverged"] = True
        code = EXIT_DIVERGED
    except ValueError as exc:
        print(f"petdenoise: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        write_json(_manifest_path(args), run.manifest())
    except OSError as exc:
        print(f"petdenoise: I/O error writing manifest: {exc}", file=sys.stderr)
        return EXIT_IO
    return code


__all__ = ["main", "build_parser", "parse_args", "run_ablation", "ABLATION_ROWS", "git_hash", "denoise_raw"]
