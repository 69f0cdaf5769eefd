"""Command-line front end.

    rlednet degrade   --in DIR --out DIR [--sigma S --gamma G --gain K --seed N]
    rlednet synth     --out DIR [--count N --size S --sigma S --gamma G --seed N]
    rlednet train     --data DIR --out CKPT [--config FILE] [--set k=v ...]
    rlednet enhance   --ckpt CKPT --in DIR --out DIR
    rlednet eval      --ckpt CKPT --data DIR --report FILE
    rlednet ablate    --data DIR --report FILE [--config FILE] [--set k=v ...]
    rlednet gradcheck [--module NAME ...] [--seeds N]

Exit status: 0 on success, 1 on a runtime failure (one-line diagnostic on
stderr), 2 on bad usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .config import CliConfig, ConfigFileError, load_config
from .data import DegradeConfig, ImageIOError, degrade, list_images, load_image, load_pairs, save_image, save_pairs, synthetic_pairs, to_uint8
from .network import enhance
from .tensor import DimensionError

log = logging.getLogger("rlednet")

DEGRADATION_FILE = "degradation.json"


class UsageError(Exception):
    """Flag values that parse but make no sense together."""


def _overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args) -> CliConfig:
    return load_config(getattr(args, "config", None), _overrides(getattr(args, "set", None)))


def _degradation_meta(root: Path) -> dict:
    meta = root / DEGRADATION_FILE
    if meta.is_file():
        return json.loads(meta.read_text())
    return {"source": "paired", "root": str(root)}


# ---------------------------------------------------------------------------
# subcommands


def cmd_degrade(args) -> None:
    cfg = DegradeConfig(sigma=args.sigma, gamma=args.gamma, gain=args.gain, seed=args.seed)
    sources = list_images(args.inp)
    if not sources:
        raise ImageIOError(f"no images in {args.inp}")
    out = Path(args.out)
    for src in sources:
        normal = load_image(src)
        low = degrade(normal, cfg, src.stem)
        if np.array_equal(to_uint8(low), to_uint8(normal)):
            # nothing changed on the 8-bit grid: keep the original bytes
            for sub in ("low", "high"):
                (out / sub).mkdir(parents=True, exist_ok=True)
                shutil.copyfile(src, out / sub / src.name)
            continue
        save_image(out / "low" / f"{src.stem}.png", low)
        (out / "high").mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src, out / "high" / src.name)
    (out / DEGRADATION_FILE).write_text(json.dumps(cfg.describe(), sort_keys=True) + "\n")
    print(f"degraded {len(sources)} image(s) into {out}")


def cmd_synth(args) -> None:
    cfg = DegradeConfig(sigma=args.sigma, gamma=args.gamma, gain=args.gain, seed=args.seed)
    pairs = synthetic_pairs(args.count, args.size, cfg)
    save_pairs(args.out, pairs)
    (Path(args.out) / DEGRADATION_FILE).write_text(json.dumps(cfg.describe(), sort_keys=True) + "\n")
    print(f"wrote {len(pairs)} synthetic pair(s) to {args.out}")


def cmd_train(args) -> None:
    from .training import history_table, train

    cfg = _config(args)
    dataset = load_pairs(args.data)
    resume = load_checkpoint(args.resume, cfg.model) if args.resume else None
    eval_set = load_pairs(args.eval_data) if args.eval_data else None

    def report(row):
        log.info("step %d total %.6f", row["step"], row["total"])

    ckpt, history = train(cfg.model, cfg.train, dataset, resume=resume, out=args.out, eval_set=eval_set, callback=report)
    if args.history:
        Path(args.history).write_text(history_table(history))
    last = f"final total loss {history[-1]['total']:.6f}" if history else "no steps run"
    print(f"trained to step {ckpt.optim.step}; {last}; checkpoint {args.out}")


def cmd_enhance(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    sources = list_images(args.inp)
    if not sources:
        raise ImageIOError(f"no images in {args.inp}")
    for src in sources:
        x = load_image(src)
        y = enhance(x, ckpt.config, ckpt.params)
        if y.shape != x.shape:
            raise DimensionError(f"{src.name}: output {y.shape} differs from input {x.shape}")
        save_image(Path(args.out) / f"{src.stem}.png", y)
    print(f"enhanced {len(sources)} image(s) into {args.out}")


def cmd_eval(args) -> None:
    from .training import evaluate

    ckpt = load_checkpoint(args.ckpt)
    report = evaluate(ckpt, load_pairs(args.data), _degradation_meta(Path(args.data)))
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_jsonl() if path.suffix == ".jsonl" else report.to_table())
    means = report.means
    print(
        f"psnr {means['psnr']:.4f} dB  ssim {means['ssim']:.4f}  mae {means['mae']:.4f}%  "
        f"cse_substitute {means['cse_substitute']:.4f}  ({len(report.rows)} image(s)) -> {path}"
    )


def cmd_ablate(args) -> None:
    from .training import ablate

    cfg = _config(args)
    dataset = load_pairs(args.data)
    eval_set = load_pairs(args.eval_data) if args.eval_data else None
    report = ablate(cfg.model, cfg.train, dataset, eval_set)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_table())
    print(f"{len(report.rows)} ablation row(s) -> {path}")


def cmd_gradcheck(args) -> int:
    from .gradsuite import CASES, run_suite

    if args.list:
        print("\n".join(CASES))
        return 0
    failed = []

    def show(res):
        status = "ok" if res.passed else "FAIL"
        print(f"{res.name:<20} worst rel-err {res.worst:.3e}  (tol {res.tol:.0e}, {res.seeds} seeds, {res.seconds:.1f}s)  {status}", flush=True)
        if not res.passed:
            failed.append(res.name)

    try:
        run_suite(args.module, args.seeds, callback=show)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    if failed:
        print(f"rlednet: error: gradient check failed for {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _degrade_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sigma", type=float, default=10.0, help="noise std on the 0-255 scale (default 10)")
    p.add_argument("--gamma", type=float, default=2.2, help="darkening exponent (default 2.2)")
    p.add_argument("--gain", type=float, default=0.2, help="post-gamma gain (default 0.2)")
    p.add_argument("--seed", type=int, default=0)


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlednet", description="Low-light enhancement network: training, inference and checks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("degrade", help="make a paired low/high dataset from normal-light images")
    p.add_argument("--in", dest="inp", required=True, help="directory of normal-light images")
    p.add_argument("--out", required=True, help="output root (gets low/ and high/)")
    _degrade_flags(p)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("synth", help="write a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=_positive_int, default=4)
    p.add_argument("--size", type=_positive_int, default=64)
    _degrade_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a paired dataset")
    p.add_argument("--data", required=True, help="paired dataset root (low/, high/)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--history", help="write the per-step loss table (CSV) here")
    p.add_argument("--eval-data", help="paired dataset for periodic evaluation")
    _config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance every image in a directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="score a checkpoint on a paired dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="CSV table, or JSON lines if the name ends in .jsonl")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score the component ablations and rank sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--eval-data")
    _config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--module", action="append", metavar="NAME", help="restrict to one case (repeatable); see --list")
    p.add_argument("--seeds", type=_positive_int, default=20)
    p.add_argument("--list", action="store_true", help="list case names and exit")
    p.set_defaults(func=cmd_gradcheck)
    return parser


RUNTIME_ERRORS = (OSError, ValueError, KeyError, CheckpointError, FloatingPointError, json.JSONDecodeError)


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        status = args.func(args)
    except (UsageError, ConfigFileError) as exc:
        parser.print_usage(sys.stderr)
        print(f"rlednet: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"rlednet: error: {exc}", file=sys.stderr)
        return 1
    return int(status or 0)


def main() -> None:
    sys.exit(run())
