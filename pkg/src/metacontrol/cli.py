"""Command-line front end.

Exit codes: 0 success, 2 config error, 3 data error (missing or corrupt
inputs), 4 numeric failure (non-finite values).
"""

from __future__ import annotations

import argparse
import shutil
import sys
from pathlib import Path
from typing import Sequence

from . import checkpoint as ckpt_io
from . import pipeline as pl
from . import report
from .checkpoint import CheckpointError
from .config import RunConfig, parse_lines
from .control import FreezePolicy
from .diffusion import NonFiniteError
from .evaluate import METRICS, compare_report, write_report_csv
from .nn import ConfigError
from .tasks import TASKS, DataError, dir_is_nonempty

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _config(args, base: RunConfig | None = None, **flags) -> RunConfig:
    """Layers: ``base`` (e.g. a checkpoint's config), the --config file,
    --set pairs, then dedicated flags that were given."""
    layers = [base.as_strings()] if base is not None else []
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        layers.append(parse_lines(path.read_text(encoding="utf-8"), str(path)))
    layers.append(dict(args.set or []))
    layers.append({k: str(v) for k, v in flags.items() if v is not None})
    return RunConfig.build(*layers)


def _siblings(out: Path) -> tuple[Path, Path, Path]:
    stem = out.with_suffix("")
    return Path(f"{stem}.loss.csv"), Path(f"{stem}.grads.csv"), Path(f"{stem}.loss.svg")


def _write_training(out: Path, ck, log, grad_log=None, title: str = "") -> None:
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt_io.save(out, ck)
    loss_csv, grad_csv, svg = _siblings(out)
    report.write_loss_csv(loss_csv, log)
    if grad_log is not None:
        report.write_grad_csv(grad_csv, grad_log)
    if log:
        report.plot_loss_curves(svg, log, title or out.stem)
    print(f"wrote {out} ({ck.digest()}) and {loss_csv}")


def _prepare_dir(path: Path, force: bool) -> None:
    if dir_is_nonempty(path):
        if not force:
            raise DataError(f"output directory {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _write_tables(out_dir: Path, reports, stem: str = "comparison") -> None:
    write_report_csv(out_dir / "report.csv", reports)
    if len(reports) < 2:
        print(f"wrote {out_dir / 'report.csv'}")
        return
    texts = []
    for metric in METRICS:
        table = compare_report(reports, metric)
        (out_dir / f"{stem}-{metric}.csv").write_text(table.to_csv(), encoding="utf-8")
        report.plot_comparison(out_dir / f"{stem}-{metric}.svg", table)
        texts.append(table.render())
    text = "\n\n".join(texts) + "\n"
    (out_dir / f"{stem}.txt").write_text(text, encoding="utf-8")
    print(text, end="")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> None:
    if args.size < 16 or args.size % 16:
        raise ConfigError(f"--size must be a positive multiple of 16, got {args.size}")
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    out = Path(args.out)
    _prepare_dir(out, args.force)
    pl.generate_data(out, args.n, args.size, args.seed)
    print(f"wrote {args.n} images to {out}")


def cmd_train_base(args) -> None:
    cfg = _config(args, **{"base.steps": args.steps, "seed": args.seed})
    train, _ = pl.load_split(args.data, cfg)
    ck, log = pl.pretrain(cfg, train)
    _write_training(Path(args.out), ck, log, title="base pretraining")


def cmd_meta_train(args) -> None:
    cfg = _config(args, **{"meta.steps": args.steps, "meta.freeze": args.freeze, "seed": args.seed})
    cut = [pl.parse_block(b) for b in args.disconnect or []]
    base = ckpt_io.load(args.base)
    train, _ = pl.load_split(args.data, cfg)
    res = pl.train_control(cfg, base, train, args.method, cut)
    ck = pl.control_checkpoint(res.model, cfg, res.optimizer, res.rng_state)
    _write_training(Path(args.out), ck, res.log, res.grad_log, f"{args.method} training ({cfg['meta.freeze']})")


def cmd_adapt(args) -> None:
    source = ckpt_io.load(args.ckpt)
    cfg = _config(args, pl.run_config_of(source), **{"adapt.steps": args.steps, "seed": args.seed})
    train, _ = pl.load_split(args.data, cfg)
    res = pl.adapt_task(cfg, source, args.task, train)
    ck = pl.control_checkpoint(res.model, cfg, res.optimizer, res.rng_state, task=args.task)
    _write_training(Path(args.out), ck, res.log, res.grad_log, f"adapt {args.task}")


def cmd_sample(args) -> None:
    ck = ckpt_io.load(args.ckpt)
    cfg = _config(args, pl.run_config_of(ck), seed=args.seed)
    _, test = pl.load_split(args.data, cfg)
    model = pl.model_of(ck)
    controls, samples, refs = pl.sample_task(model, cfg, args.task, test, args.n, cfg["seed"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_sample_grid(out, controls, samples, refs)
    print(f"wrote {out}")


def _named_checkpoints(specs: Sequence[str]) -> dict[str, str]:
    named = {}
    for spec in specs:
        name, _, path = spec.rpartition("=")
        name = name or Path(path).stem
        if name in named:
            raise ConfigError(f"duplicate method name {name!r}")
        named[name] = path
    return named


def cmd_eval(args) -> None:
    named = _named_checkpoints(args.ckpt)
    loaded = {name: ckpt_io.load(path) for name, path in named.items()}
    first = next(iter(loaded.values()))
    cfg = _config(args, pl.run_config_of(first), **{"eval.n": args.n, "eval.tasks": args.tasks, "seed": args.seed})
    _, test = pl.load_split(args.data, cfg)
    models = {name: (pl.model_of(ck), ck.digest()) for name, ck in loaded.items()}
    reports = pl.evaluate(models, cfg, cfg["eval.tasks"], test, cfg["eval.n"], cfg["seed"])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_tables(out, reports)


def _ablation_common(args, **flags):
    cfg = _config(args, **{"meta.steps": args.steps, "seed": args.seed, "eval.n": args.n, **flags})
    base = ckpt_io.load(args.base)
    train, test = pl.load_split(args.data, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, base, train, test, out


def _write_ablation(out: Path, result) -> None:
    for name in result.logs:
        report.write_loss_csv(out / f"{name}.loss.csv", result.logs[name])
        report.write_grad_csv(out / f"{name}.grads.csv", result.grad_logs[name])
        ckpt_io.save(out / f"{name}.mcnc", result.checkpoints[name])
    _write_tables(out, result.reports)


def cmd_ablate_freeze(args) -> None:
    cfg, base, train, test, out = _ablation_common(args)
    _write_ablation(out, pl.ablate_freeze(cfg, base, train, test))


def cmd_ablate_connection(args) -> None:
    cfg, base, train, test, out = _ablation_common(args)
    blocks = [pl.parse_block(b) for b in args.block] if args.block else None
    result = pl.ablate_connection(cfg, base, train, test, blocks)
    _write_ablation(out, result)
    for name, rows in result.grad_logs.items():
        if name.startswith("no-"):
            link = name[3:]
            group = "zc.mid" if link == "mid" else f"zc.enc{link[-1]}"
            peak = max((r["grad-norm"] for r in rows if r["group"] == group), default=0.0)
            print(f"{name}: max {group} grad-norm over training = {peak!r}")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metacontrol", description="Meta-learned control branches for a toy diffusion model.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", type=_kv, metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, default=seed_default)

    p = sub.add_parser("gen-data", help="generate the shapes dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-base", help="pretrain the unconditional base U-Net")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("meta-train", help="train a control branch on the meta-training tasks")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True, help="base checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--freeze", choices=[p.value for p in FreezePolicy])
    p.add_argument("--method", choices=pl.METHODS, default="meta")
    p.add_argument("--disconnect", action="append", metavar="BLOCK")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("adapt", help="finetune a control checkpoint on one task (0 steps = zero-shot)")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True, choices=sorted(TASKS))
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("sample", help="render a control/sample/reference grid")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True, choices=sorted(TASKS))
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="control-fidelity metrics and comparison tables")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", action="append", required=True, metavar="[NAME=]PATH")
    p.add_argument("--tasks", help="comma-separated task names")
    p.add_argument("--n", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (
        ("ablate-freeze", cmd_ablate_freeze, "meta-train under every freeze policy"),
        ("ablate-connection", cmd_ablate_connection, "meta-train with decoder connections removed"),
    ):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--base", required=True)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--steps", type=int)
        p.add_argument("--n", type=int)
        if name == "ablate-connection":
            p.add_argument("--block", action="append", help="1-4, decN or mid (repeatable; default dec1-dec4)")
        p.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    try:
        args.func(args)
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
