"""``actforecast`` command line: gen-data, train, eval, ablate, sweep, grad-check.

Exit status: 0 success, 1 usage error, 2 data or configuration error.
Settings resolve as flags > ``--config`` file > defaults, and every run
writes the resolved settings to ``<out>/resolved_config.txt`` (a file that
``--config`` accepts back) before any long work starts.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable

from . import checkpoint
from .data import GeneratorConfig, generate_synthetic_dataset, read_manifest
from .errors import ConfigError, FormatError
from .evaluation import SWEEP_GRIDS, evaluate_model, run_ablation, sweep
from .model import VARIANTS, ModelConfig, params_from_arrays
from .selfcheck import TOLERANCE, run_suite
from .tensor import EmptySequenceError, ShapeError
from .train import TrainConfig, format_log_line, load_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Setting:
    key: str
    kind: Callable[[str], Any]
    default: Any
    help: str
    published: str | None = None  # value used in the original experiments

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")

    def help_text(self) -> str:
        tail = f"; published: {self.published}" if self.published is not None else ""
        return f"{self.help} (default: {self.default}{tail})"


GEN_SETTINGS = (
    Setting("classes", int, 8, "number of action classes N", "48 Breakfast / 19 50Salads"),
    Setting("dim", int, 32, "feature dimension d", "1024 (I3D)"),
    Setting("activities", int, 2, "number of activity chains"),
    Setting("informative", int, 8, "informative feature dimensions k_inf"),
    Setting("noise", float, 0.5, "feature noise sigma"),
    Setting("n_train", int, 120, "training sequences"),
    Setting("n_val", int, 20, "validation sequences"),
    Setting("n_test", int, 40, "test sequences"),
)

MODEL_SETTINGS = (
    Setting("dh", int, 32, "GRU hidden size d_h (even)", "512"),
    Setting("tfixed", int, 32, "observed frames after resampling; attention d_model", "T"),
    Setting("heads", int, 2, "attention heads h", "5"),
    Setting("dff", int, 64, "feed-forward width d_ff", "2048"),
    Setting("ke", int, 16, "label embedding size", "512"),
    Setting("nf", int, 32, "decoder steps spanning the prediction window"),
    Setting("mask", float, 10.0, "masked percentage m of observed frames", "10 Breakfast / 15 50Salads"),
    Setting("beta", float, 0.5, "observed-classifier loss weight beta", "0.5"),
    Setting("dropout", float, 0.5, "dropout on encoder and decoder inputs", "0.5"),
    Setting("variant", str, "gru+feat_att+obs+mask", f"model variant, one of {', '.join(VARIANTS)}", "full model"),
)

TRAIN_SETTINGS = (
    Setting("epochs", int, 100, "maximum training epochs", "100 Breakfast / 500 50Salads"),
    Setting("lr", float, 1e-3, "Adam learning rate", "1e-4"),
    Setting("batch", int, 32, "mini-batch size", "32"),
    Setting("patience", int, 10, "early-stopping patience in epochs"),
    Setting("teacher_forcing", _bool, False, "feed ground-truth labels to the decoder while training"),
)

COMMON_SETTINGS = (
    Setting("seed", int, 0, "random seed"),
    Setting("workers", int, 1, "threads for evaluating (p, q) cells"),
)

ALL_SETTINGS = {s.key: s for s in GEN_SETTINGS + MODEL_SETTINGS + TRAIN_SETTINGS + COMMON_SETTINGS}

COMMAND_SETTINGS = {
    "gen-data": GEN_SETTINGS + COMMON_SETTINGS[:1],
    "train": MODEL_SETTINGS + TRAIN_SETTINGS + COMMON_SETTINGS,
    "eval": COMMON_SETTINGS[1:],
    "ablate": MODEL_SETTINGS + TRAIN_SETTINGS + COMMON_SETTINGS,
    "sweep": MODEL_SETTINGS + TRAIN_SETTINGS + COMMON_SETTINGS,
    "grad-check": COMMON_SETTINGS[:1],
}


# --- config files --------------------------------------------------------------------


def load_config(path) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    values: dict[str, Any] = {}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key or not value:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key = key.replace("-", "_")
        if key not in ALL_SETTINGS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        try:
            values[key] = ALL_SETTINGS[key].kind(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {value!r}") from exc
        seen[key] = lineno
    return values


def resolve(command: str, args: argparse.Namespace) -> dict[str, Any]:
    settings = COMMAND_SETTINGS[command]
    resolved = {s.key: s.default for s in settings}
    if getattr(args, "config", None):
        for key, value in load_config(args.config).items():
            if key in resolved:
                resolved[key] = value
    for s in settings:
        value = getattr(args, s.key, None)
        if value is not None:
            resolved[s.key] = value
    return resolved


def format_config(resolved: dict[str, Any]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in resolved.items())


def write_resolved(out: Path, resolved: dict[str, Any], extra: dict[str, Any]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = "".join(f"# {k}: {v}\n" for k, v in extra.items()) + format_config(resolved)
    (out / "resolved_config.txt").write_text(text)
    sys.stdout.write(text)


# --- building library configs -------------------------------------------------------------


def model_config(r: dict[str, Any], n_classes: int, dim: int) -> ModelConfig:
    if r["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant {r['variant']!r}; choose from {', '.join(VARIANTS)}")
    cfg = ModelConfig(d=dim, d_h=r["dh"], T_fixed=r["tfixed"], heads=r["heads"], d_ff=r["dff"], n_classes=n_classes,
                      k_e=r["ke"], mask_pct=r["mask"], beta=r["beta"], dropout=r["dropout"], n_f=r["nf"])
    return cfg.variant(r["variant"])


def train_config(r: dict[str, Any]) -> TrainConfig:
    return TrainConfig(batch_size=r["batch"], lr=r["lr"], max_epochs=r["epochs"], patience=r["patience"],
                       seed=r["seed"], teacher_forcing=r["teacher_forcing"])


def _progress(rec: dict[str, float]) -> None:
    print(format_log_line(rec), file=sys.stderr, flush=True)


def _load_split(manifest_path):
    manifest = read_manifest(manifest_path)
    train_seqs, val_seqs = manifest.train_val()
    if not train_seqs:
        raise ConfigError(f"{manifest_path}: empty train split")
    return manifest, train_seqs, val_seqs


# --- subcommands ------------------------------------------------------------------------


def cmd_gen_data(args, r) -> int:
    out = Path(args.out)
    write_resolved(out, r, {"command": "gen-data"})
    cfg = GeneratorConfig(n_classes=r["classes"], n_activities=r["activities"], dim=r["dim"],
                          k_informative=r["informative"], noise=r["noise"], n_train=r["n_train"],
                          n_val=r["n_val"], n_test=r["n_test"], seed=r["seed"])
    manifest = generate_synthetic_dataset(cfg, out)
    print(f"wrote {len(manifest.entries)} sequences and {out / 'manifest.txt'}")
    return EXIT_OK


def cmd_train(args, r) -> int:
    out = Path(args.out)
    manifest, train_seqs, val_seqs = _load_split(args.manifest)
    cfg = model_config(r, manifest.n_classes, manifest.dim)
    write_resolved(out, r, {"command": "train", "manifest": args.manifest})
    (out / "model_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    tcfg = train_config(r)
    state = None
    if args.resume:
        state = load_checkpoint(out / "state.fafc", cfg)
    started = time.perf_counter()
    result = train(train_seqs, val_seqs, cfg, tcfg, out_dir=out, state=state, on_epoch=_progress)
    print(f"trained {len(result.history)} epochs in {time.perf_counter() - started:.1f}s; "
          f"best val_loss={result.state.best_val:.6f}; checkpoint {out / 'best.fafc'}")
    return EXIT_OK


def load_model_for_eval(checkpoint_path: Path, config_path: Path | None):
    config_path = config_path or checkpoint_path.parent / "model_config.json"
    try:
        cfg = ModelConfig(**json.loads(config_path.read_text()))
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"{config_path}: cannot read model config ({exc})") from exc
    arrays = checkpoint.load(checkpoint_path)
    if any(k.startswith("param/") for k in arrays):  # a full training state
        arrays = {k[len("best/"):]: v for k, v in arrays.items() if k.startswith("best/")}
    return cfg, params_from_arrays(cfg, arrays)


def cmd_eval(args, r) -> int:
    ckpt = Path(args.checkpoint)
    out = Path(args.out) if args.out else ckpt.parent / "eval"
    cfg, params = load_model_for_eval(ckpt, Path(args.model_config) if args.model_config else None)
    manifest = read_manifest(args.manifest)
    if (manifest.n_classes, manifest.dim) != (cfg.n_classes, cfg.d):
        raise ConfigError(f"{args.manifest}: (N={manifest.n_classes}, d={manifest.dim}) does not match the "
                          f"checkpoint's model (N={cfg.n_classes}, d={cfg.d})")
    write_resolved(out, r, {"command": "eval", "checkpoint": ckpt, "manifest": args.manifest})
    report = evaluate_model(params, cfg, manifest.load("test"), workers=r["workers"])
    (out / "report.csv").write_text(report.to_csv())
    print(report.table(), end="")
    return EXIT_OK


def cmd_ablate(args, r) -> int:
    out = Path(args.out)
    manifest, train_seqs, val_seqs = _load_split(args.manifest)
    base = model_config(r, manifest.n_classes, manifest.dim)
    write_resolved(out, r, {"command": "ablate", "manifest": args.manifest})
    result = run_ablation(train_seqs, val_seqs, manifest.load("test"), base, train_config(r))
    (out / "ablation.csv").write_text(result.to_csv())
    table = result.table(Path(args.manifest).parent.name or "synthetic")
    (out / "ablation.txt").write_text(table)
    print(table)
    return EXIT_OK


def cmd_sweep(args, r) -> int:
    out = Path(args.out)
    manifest, train_seqs, val_seqs = _load_split(args.manifest)
    base = model_config(r, manifest.n_classes, manifest.dim)
    values = [float(v) for v in args.values.split(",")] if args.values else None
    write_resolved(out, r, {"command": "sweep", "manifest": args.manifest, "param": args.param})
    result = sweep(args.param, train_seqs, val_seqs, manifest.load("test"), base, train_config(r), values)
    csv = result.to_csv()
    (out / f"sweep_{args.param}.csv").write_text(csv)
    print(csv, end="")
    return EXIT_OK


def cmd_grad_check(args, r) -> int:
    if args.out:
        write_resolved(Path(args.out), r, {"command": "grad-check"})
    results = run_suite(r["seed"])
    worst = max(results, key=lambda c: c.max_error)
    for c in results:
        print(f"{c.name:<40} max_rel_err={c.max_error:.3e}")
    print(f"max relative error {worst.max_error:.3e} ({worst.name}); tolerance {TOLERANCE:g}")
    if worst.max_error >= TOLERANCE:
        print(f"gradient check FAILED in {worst.name}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "grad-check": cmd_grad_check,
}


# --- parser ---------------------------------------------------------------------------


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="actforecast", description="Action forecasting from precomputed video features.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen-data": "write a synthetic FSQ1 corpus and manifest",
        "train": "train a model on a manifest's train split",
        "eval": "score a checkpoint on a manifest's test split",
        "ablate": "train and score the five architecture variants",
        "sweep": "retrain over a grid of masking percentages or beta values",
        "grad-check": "finite-difference gradient suite",
    }
    for name, help_text in helps.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        if name != "grad-check":
            p.add_argument("--config", help="file of 'key = value' lines; flags override it")
        if name in ("train", "ablate", "sweep", "eval"):
            p.add_argument("--manifest", required=True, help="dataset manifest.txt")
        if name == "eval":
            p.add_argument("--checkpoint", required=True, help="best.fafc (or state.fafc) from train")
            p.add_argument("--model-config", help="model_config.json (default: beside the checkpoint)")
            p.add_argument("--out", help="report directory (default: <checkpoint dir>/eval)")
        elif name == "grad-check":
            p.add_argument("--out", help="directory for the resolved config")
        else:
            p.add_argument("--out", required=True, help="output directory")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from <out>/state.fafc")
        if name == "sweep":
            p.add_argument("--param", required=True, choices=sorted(SWEEP_GRIDS), help="swept hyperparameter")
            p.add_argument("--values", help="comma-separated grid (default: "
                           + "; ".join(f"{k}: {','.join(f'{v:g}' for v in g)}" for k, g in SWEEP_GRIDS.items()) + ")")
        for s in COMMAND_SETTINGS[name]:
            if s.kind is _bool:
                p.add_argument(s.flag, dest=s.key, action=argparse.BooleanOptionalAction, default=None,
                               help=s.help_text())
            else:
                p.add_argument(s.flag, dest=s.key, type=s.kind, default=None, help=s.help_text())
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        resolved = resolve(args.command, args)
        return COMMANDS[args.command](args, resolved)
    except (ConfigError, FormatError, ShapeError, EmptySequenceError, FileNotFoundError) as exc:
        print(f"actforecast {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
