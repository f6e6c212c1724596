"""``loradet`` command line.

Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime or numeric
failure, 4 integrity failure. ``LDET_THREADS`` caps the BLAS worker count
when set before numpy is first imported.
"""

from __future__ import annotations

import os
import sys

_threads = os.environ.get("LDET_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402

from .config import ExperimentConfig, load_config  # noqa: E402
from .errors import ArgumentError, ConfigError, LoraDetError  # noqa: E402

log = logging.getLogger("loradet")


class UsageError(ArgumentError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value experiment config file")
    common.add_argument("--seed", type=_u64, help="experiment seed (overrides the config)")
    common.add_argument("--work-dir", help="directory for datasets and checkpoints (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")

    parser = _Parser(prog="loradet", description="LoRA fine-tuning of a toy oriented detector.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth-data", parents=[common], help="render and cache the synthetic D1/D2 splits")
    sub.add_parser("pretrain", parents=[common], help="train all parameters on D1")

    p = sub.add_parser("finetune", parents=[common], help="fine-tune the pretrained model on D1 + D2")
    p.add_argument("--policy", help="fine-tuning policy (defaults to the config's)")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("analyze-rank", parents=[common], help="SVD truncation sweep over 2-D tensors of an archive")
    p.add_argument("--archive", help="weight archive (default: the pretrained checkpoint)")
    p.add_argument("--tensors", nargs="*", help="restrict to these tensor names")
    p.add_argument("--out", help="report directory (default: <work>/rank_report)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--tolerance", type=float, default=None, help="select the smallest rank within this relative error")
    g.add_argument("--budget", type=float, default=None, help="select the largest rank with p at most this")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("package", parents=[common], help="write the trainable tensors of a fine-tuned checkpoint")
    p.add_argument("--policy")
    p.add_argument("--model", help="fine-tuned checkpoint (default: <work>/finetuned_<policy>.ldet)")
    p.add_argument("--out")

    p = sub.add_parser("apply", parents=[common], help="merge a package into base weights")
    p.add_argument("--base", help="base weights (default: <work>/pretrained.ldet)")
    p.add_argument("--package", required=True)
    p.add_argument("--out", help="merged weights (default: <work>/merged.ldet)")

    p = sub.add_parser("uplink-sim", parents=[common], help="transfer time of an archive over a constant-rate link")
    p.add_argument("--rate", type=_positive, required=True, help="link rate in bits per second")
    p.add_argument("--overhead", type=float, default=1.0, help="multiplicative protocol overhead (>= 1)")
    p.add_argument("--package", help="archive to send (default: the empty package)")

    p = sub.add_parser("eval", parents=[common], help="AP50-lite on the cached test split")
    p.add_argument("--model", help="checkpoint or merged archive (default: <work>/merged.ldet)")
    p.add_argument("--json", action="store_true", help="print metrics as JSON")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--skip-detector", action="store_true", help="only the layer and stage checks")
    p.add_argument("--policy", action="append", help="restrict the detector check to these policies")
    return parser


# -- helpers -------------------------------------------------------------------


def _config(args) -> ExperimentConfig:
    return load_config(args.config, seed=args.seed, work_dir=args.work_dir)


def _work(cfg: ExperimentConfig) -> Path:
    return Path(cfg.work_dir)


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _splits(cfg: ExperimentConfig):
    """Cached splits when ``synth-data`` has run for this seed, fresh ones otherwise."""
    from .protocol import Splits, make_splits
    from .storage import load_dataset

    data_dir = _work(cfg) / "data"
    paths = [data_dir / f"{name}.ldet" for name in ("pretrain", "finetune", "test")]
    if all(p.is_file() for p in paths):
        stamp = data_dir / "seed.txt"
        if stamp.is_file() and stamp.read_text().strip() == str(cfg.seed):
            return Splits(*(load_dataset(p) for p in paths))
    return make_splits(cfg)


def _policy_slug(name: str) -> str:
    from .policy import parse_policy

    return parse_policy(name).value


# -- subcommands ---------------------------------------------------------------


def cmd_synth_data(cfg, args, out) -> int:
    from .protocol import make_splits
    from .storage import save_dataset

    splits = make_splits(cfg)
    data_dir = _work(cfg) / "data"
    for name in ("pretrain", "finetune", "test"):
        samples = getattr(splits, name)
        n = save_dataset(samples, data_dir / f"{name}.ldet")
        print(f"{name}: {len(samples)} images, {sum(len(s.labels) for s in samples)} objects, {n} bytes", file=out)
    (data_dir / "seed.txt").write_text(f"{cfg.seed}\n")
    return 0


def cmd_pretrain(cfg, args, out) -> int:
    from .protocol import pretrain
    from .storage import save_model

    splits = _splits(cfg)
    model, tlog = pretrain(cfg, splits.pretrain)
    path = _work(cfg) / "pretrained.ldet"
    save_model(model, path)
    print(f"pretrain loss {tlog.initial_loss:.6f} -> {tlog.final_loss:.6f}", file=out)
    print(f"wrote {path}", file=out)
    return 0


def cmd_finetune(cfg, args, out) -> int:
    from .linalg import derive_seed
    from .policy import apply_policy
    from .protocol import prepare
    from .storage import load_model, save_model
    from .training import train

    policy = _policy_slug(args.policy or cfg.policy)
    if args.epochs is not None:
        if args.epochs < 0:
            raise ConfigError("--epochs must not be negative")
        cfg = cfg.replace(epochs=args.epochs)
    base = load_model(cfg.detector(), _existing(_work(cfg) / "pretrained.ldet", "pretrained checkpoint (run pretrain first)"))
    model = prepare(base, policy, cfg)
    mask = apply_policy(model, policy)
    print(f"trainable ratio {mask.ratio:.6f} ({mask.trainable_count}/{mask.total_count}) policy {policy}", file=out, flush=True)
    splits = _splits(cfg)
    tlog = train(model, policy, splits.finetune, cfg.epochs, cfg.optimizer(), seed=derive_seed(cfg.seed, "finetune"))
    path = _work(cfg) / f"finetuned_{policy}.ldet"
    save_model(model, path)
    print(f"finetune loss {tlog.initial_loss:.6f} -> {tlog.final_loss:.6f}", file=out)
    print(f"wrote {path}", file=out)
    return 0


def cmd_analyze_rank(cfg, args, out) -> int:
    from .delta_package import TensorArchive
    from .rank_analysis import analyze_tensors, emit_report, select_rank

    path = _existing(args.archive or _work(cfg) / "pretrained.ldet", "weight archive")
    tensors = TensorArchive.read(path).to_params()
    curves = analyze_tensors(tensors, args.tensors or None)
    selections = []
    if args.tolerance is not None or args.budget is not None:
        selections = [select_rank(c, error_tolerance=args.tolerance, param_budget=args.budget) for c in curves]
    out_dir = Path(args.out) if args.out else _work(cfg) / "rank_report"
    files = emit_report(curves, selections, out_dir, figures=not args.no_figures)
    for s in selections:
        print(f"{s.name}: r={s.rank} p={s.p:.6g} error={s.relative_error:.6g}", file=out)
    print(f"wrote {len(files)} files to {out_dir}", file=out)
    return 0


def cmd_package(cfg, args, out) -> int:
    from .delta_package import build_package, full_archive
    from .policy import apply_policy
    from .storage import load_model

    policy = _policy_slug(args.policy or cfg.policy)
    src = args.model or _work(cfg) / f"finetuned_{policy}.ldet"
    model = load_model(cfg.detector(), _existing(src, "fine-tuned checkpoint"))
    pkg = build_package(model, policy)
    path = Path(args.out) if args.out else _work(cfg) / f"package_{policy}.ldet"
    n = pkg.write(path)
    full = len(full_archive(model).to_bytes())
    mask = apply_policy(model, policy)
    print(f"package {n} bytes, {len(pkg)} tensors, {pkg.scalar_count()} scalars", file=out)
    print(f"byte ratio {n / full:.6f} trainable ratio {mask.ratio:.6f}", file=out)
    print(f"wrote {path}", file=out)
    return 0


def cmd_apply(cfg, args, out) -> int:
    from .delta_package import TensorArchive, apply_package

    base = TensorArchive.read(_existing(args.base or _work(cfg) / "pretrained.ldet", "base archive"))
    pkg = TensorArchive.read(_existing(args.package, "package"))
    merged = apply_package(base, pkg)
    path = Path(args.out) if args.out else _work(cfg) / "merged.ldet"
    merged.write(path)
    print(f"applied {len(pkg)} tensors; wrote {path}", file=out)
    return 0


def cmd_uplink_sim(cfg, args, out) -> int:
    from .delta_package import TensorArchive, UplinkBudget, uplink_time

    if args.package:
        data = _existing(args.package, "package").read_bytes()
        TensorArchive.from_bytes(data)
        n = len(data)
    else:
        n = 0
    seconds = uplink_time(n, UplinkBudget(args.rate, args.overhead))
    print(f"{seconds:.2f} s", file=out)
    return 0


def cmd_eval(cfg, args, out) -> int:
    from .evaluation import evaluate
    from .storage import load_model

    path = _existing(args.model or _work(cfg) / "merged.ldet", "model archive")
    model = load_model(cfg.detector(), path)
    metrics = evaluate(model, _splits(cfg).test).as_dict()
    if args.json:
        print(json.dumps(metrics, indent=2, sort_keys=True), file=out)
    else:
        for k, v in metrics.items():
            print(f"{k} {v:.6f}" if isinstance(v, float) else f"{k} {v}", file=out)
    return 0


def cmd_gradcheck(cfg, args, out) -> int:
    from .gradcheck import check_detector, check_lora_linear, check_swin_stage

    reports = [check_lora_linear(cfg.seed), check_swin_stage(cfg.seed)]
    if not args.skip_detector:
        reports += check_detector(args.policy, seed=cfg.seed)
    for r in reports:
        print(r, file=out)
        for f in r.failures[:5]:
            print(f"  {f}", file=out)
    return 0 if all(r.ok for r in reports) else 3


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "analyze-rank": cmd_analyze_rank,
    "package": cmd_package,
    "apply": cmd_apply,
    "uplink-sim": cmd_uplink_sim,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=err)
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args, out)
    except LoraDetError as exc:
        print(f"error: {exc}", file=err)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=err)
        return 3


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
