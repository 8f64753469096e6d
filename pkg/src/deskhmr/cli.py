"""Command-line entry point: ``python -m deskhmr <command>``.

Exit codes: 0 success, 1 verification or training failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

from . import container
from .body import build_minibody
from .config import ConfigError, RunConfig, load_config
from .synth import Dataset

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if getattr(args, "stage", None):
        cfg = cfg.with_overrides(stage=args.stage)
    return cfg


def _load_data(args, cfg: RunConfig, body):
    """(train, eval) from ``--data`` (a gen-data directory or one dataset file), else generated."""
    from .train import make_data

    if not args.data:
        return make_data(cfg, body)
    path = Path(args.data)
    if path.is_dir():
        train = Dataset.load(path / "train.dsk", body)
        ev = Dataset.load(path / "eval.dsk", body) if (path / "eval.dsk").exists() else None
        return train, ev
    if path.is_file():
        return Dataset.load(path, body), None
    raise UsageError(f"--data {path} does not exist")


def _emit(text: str, out: Path | None, name: str) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text, encoding="utf-8")
        print(f"wrote {out / name}")


def _rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def cmd_verify(args) -> int:
    from .train import canonical_dumps
    from .verify import SUITES, run_verify

    only = args.only or None
    if only and any(s not in SUITES for s in only):
        raise UsageError(f"--only takes suites from {sorted(SUITES)}")
    res = run_verify(only, seed=args.seed or 0)
    out = Path(args.out) if args.out else None
    if args.format == "csv":
        _emit(_rows_csv([f.to_dict() for f in res.failures]) or "suite,check,detail\n", out, "verify.csv")
    else:
        _emit(canonical_dumps(res.to_dict()), out, "verify.json")
    for f in res.failures:
        print(f"FAIL {f.suite}/{f.check}: {f.detail}", file=sys.stderr)
    return EXIT_OK if res.ok else EXIT_FAIL


def cmd_gen_data(args) -> int:
    from .train import canonical_dumps, make_data

    cfg = _resolve_config(args)
    if not args.out:
        raise UsageError("gen-data needs --out DIR")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    body = build_minibody()
    train, ev = make_data(cfg, body)
    train.save(out / "train.dsk")
    ev.save(out / "eval.dsk")
    (out / "manifest.json").write_text(canonical_dumps({"train": train.manifest, "eval": ev.manifest}),
                                       encoding="utf-8")
    print(f"wrote {len(train)} train and {len(ev)} eval sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import load_checkpoint, run_train, write_report

    cfg = _resolve_config(args)
    if cfg.stage == "mesh" and not args.checkpoint:
        raise UsageError("stage mesh starts from lifting weights; pass --checkpoint")
    body = build_minibody()
    train, ev = _load_data(args, cfg, body)
    model = None
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint, body, cfg)
    out = Path(args.out) if args.out else None
    log = (lambda s, e, v: print(f"[{s}] epoch {e + 1}: loss {v:.6f}", file=sys.stderr)) if args.verbose else None
    report, _ = run_train(cfg, train, ev, out, model=model, log=log)
    if out is None:
        sys.stdout.write(report.to_json() if args.format == "json" else report.to_csv())
    else:
        print(f"wrote {write_report(report, out, args.format)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import load_checkpoint, run_eval, write_report

    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint PATH")
    body = build_minibody()
    model, meta = load_checkpoint(args.checkpoint, body)
    cfg = RunConfig(**meta["run_config"])
    if args.config:
        cfg = load_config(args.config, cfg)
    train, ev = _load_data(args, cfg, body)
    if args.split == "eval" and ev is None:
        raise UsageError("--split eval needs a --data directory holding eval.dsk")
    data = ev if args.split == "eval" else train
    report = run_eval(model, data, cfg)
    out = Path(args.out) if args.out else None
    if out is None:
        sys.stdout.write(report.to_json() if args.format == "json" else report.to_csv())
    else:
        print(f"wrote {write_report(report, out, args.format, name='eval')}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .train import ablation_csv, run_ablate

    cfg = _resolve_config(args)
    body = build_minibody()
    train, _ = _load_data(args, cfg, body)
    log = (lambda label, m: print(f"[ablate] {label}: {m}", file=sys.stderr)) if args.verbose else None
    report = run_ablate(cfg, train, log=log)
    out = Path(args.out) if args.out else None
    if out is not None:
        _emit(report.to_json(), out, "ablation.json")
        _emit(ablation_csv(report), out, "ablation.csv")
    else:
        sys.stdout.write(report.to_json() if args.format == "json" else ablation_csv(report))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench
    from .train import canonical_dumps

    cfg = _resolve_config(args)
    res = run_bench(args.sizes, cfg, seed=cfg.seed)
    out = Path(args.out) if args.out else None
    if args.format == "csv":
        _emit(_rows_csv(res["scans"]) + "\n" + _rows_csv(res["blocks"]), out, "bench.csv")
    else:
        _emit(canonical_dumps(res), out, "bench.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deskhmr", description="Desk-scale 2D-to-3D pose lifting and mesh recovery.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--format", choices=("json", "csv"), default="json")
        if data:
            p.add_argument("--data", help="gen-data directory or a single dataset file")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = sub.add_parser("verify", help="run the self-check suites")
    p.add_argument("--only", action="append", metavar="SUITE", help="run only this suite (repeatable)")
    common(p, data=False).set_defaults(func=cmd_verify)

    common(sub.add_parser("gen-data", help="generate a synthetic train/eval split"), data=False) \
        .set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="train the lifting and/or mesh stage"))
    p.add_argument("--stage", choices=("lift", "mesh", "end2end"), help="override the config stage")
    p.add_argument("--checkpoint", help="initial weights (required for --stage mesh)")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint", help="checkpoint to evaluate")
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.set_defaults(func=cmd_eval)

    common(sub.add_parser("ablate", help="train and evaluate the GA/EM/IM ablation rows")) \
        .set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("bench", help="time recurrent vs convolutional scans"), data=False)
    p.add_argument("--sizes", type=int, nargs="+", default=[16, 64, 256])
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    from .train import CheckpointError, TrainingError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as e:
        msg = f"training failed: {e}"
        if e.checkpoint:
            msg += f" (last good weights in {e.checkpoint})"
        print(msg, file=sys.stderr)
        return EXIT_FAIL
    except (CheckpointError, container.ContainerError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
