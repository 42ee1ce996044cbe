"""Command-line entry point: ``mtbev {synth,train,eval,verify,ablate}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key; repeatable")


def _load(args) -> RunConfig:
    return load_config(getattr(args, "config", None) or getattr(args, "spec", None), args.overrides)


def cmd_synth(args) -> int:
    from .scene_synth import build_dataset, save_sample
    spec = _load(args).scene
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = spec.seed if args.seed is None else args.seed
    for i, (sample, feats, _) in enumerate(build_dataset(spec, args.n, seed=seed)):
        save_sample(out / f"scene_{i:05d}.npz", sample, spec.with_seed(sample.seed), feats)
    print(f"wrote {args.n} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    from .train import train
    cfg = _load(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.out is not None:
        cfg.train.out_dir = args.out
    cfg.validate()
    res = train(cfg)
    print(f"checkpoint: {res['checkpoint']}\nmetrics log: {res['log']}")
    for k, v in sorted(res["metrics"].items()):
        print(f"  {k} = {v:.4f}")
    return 0


def load_scene_dir(path: str | Path):
    """Read every ``*.npz`` scene in a directory; all must share one spec."""
    from .scene_synth import load_sample, make_targets
    items, spec = [], None
    files = sorted(Path(path).glob("*.npz"))
    if not files:
        raise ConfigError(f"no scene files in {path}")
    for f in files:
        sample, feats, s, _ = load_sample(f)
        base = dataclasses.replace(s, seed=0)
        if spec is None:
            spec = base
        elif base != spec:
            raise ConfigError(f"{f} was generated with a different spec")
        items.append((sample, feats, make_targets(sample, s)))
    return items, spec


def cmd_eval(args) -> int:
    from .train import evaluate
    items, spec = load_scene_dir(args.data)
    rec = evaluate(args.ckpt, items, spec=spec)
    print(rec.to_json())
    return 0


def cmd_verify(args) -> int:
    from .verify.checks import run_checks
    reports = run_checks(args.module, args.kind)
    for r in reports:
        print(r.summary())
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    from .ablation import AblationSettings, run_ablation
    cfg = _load(args)
    st = AblationSettings(out_dir=args.out)
    if args.seeds:
        st.seeds = tuple(args.seeds)
    if args.steps is not None:
        st.steps = args.steps
    table = run_ablation(args.suite, cfg, st)
    print(table.to_markdown())
    if args.json:
        Path(args.json).write_text(table.to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mtbev", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes")
    p.add_argument("--spec", help="config file; only the [scene] section is used")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    _add_overrides(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a scene directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval, overrides=[])

    p = sub.add_parser("verify", help="run gradient and oracle checks")
    p.add_argument("--module")
    p.add_argument("--kind", choices=("all", "grad", "oracle"), default="all")
    p.set_defaults(func=cmd_verify, overrides=[])

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", required=True)
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--json")
    _add_overrides(p)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

