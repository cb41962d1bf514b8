"""Command line entry point: ``topnav gen-envs | train ... | eval ... | run-all``.

Exit codes: 0 ok, 1 I/O failure, 2 bad configuration, 3 missing dataset,
4 non-finite loss, 5 missing or mismatched checkpoint.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import pipeline as pl
from .config import ConfigError, PRESETS, load_config
from .numerics import CheckpointError, NonFiniteError

log = logging.getLogger("topnav")

EXIT_IO, EXIT_CONFIG, EXIT_DATASET, EXIT_NAN, EXIT_CHECKPOINT = 1, 2, 3, 4, 5


def _globals(p: argparse.ArgumentParser, top: bool) -> None:
    # on subparsers the defaults are suppressed so values given before the subcommand survive
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p.add_argument("--config", default=d(None), help="JSON run configuration")
    p.add_argument("--preset", default=d("paper"), choices=sorted(PRESETS),
                   help="base configuration the JSON file is merged onto")
    p.add_argument("--seed", type=int, default=d(None), help="master seed (overrides config)")
    p.add_argument("--out", default=d("runs/default"), help="output root directory")
    p.add_argument("--iterations", type=int, default=d(None),
                   help="training length override (CGGN iterations / agent updates)")
    p.add_argument("--quiet", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topnav", description=__doc__.splitlines()[0],
                                epilog="Any --section.key=value flag overrides that config key.")
    _globals(p, True)
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-envs", help="generate environments and the split manifest")
    _globals(g, False)
    t = sub.add_parser("train", help="train a model")
    t.add_argument("what", choices=["localizer", "cggn", "agent"])
    t.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    t.add_argument("--variants", nargs="+", choices=pl.AGENT_VARIANTS, default=list(pl.AGENT_VARIANTS))
    _globals(t, False)
    e = sub.add_parser("eval", help="evaluate and write reports")
    e.add_argument("what", choices=["cggn", "agent", "ablation"])
    e.add_argument("--dump-traces", action="store_true", help="per-episode JSON-lines decision traces")
    e.add_argument("--dump-scene-graph", action="store_true", help="final scene graph of every episode")
    _globals(e, False)
    r = sub.add_parser("run-all", help="gen-envs, train everything, eval cggn + agent + ablation")
    _globals(r, False)
    return p


def split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """Pull ``--a.b=v`` / ``--a.b v`` out of argv."""
    rest, overrides = [], []
    i = 0
    while i < len(argv):
        a = argv[i]
        if a.startswith("--") and "." in a.split("=", 1)[0]:
            if "=" in a:
                overrides.append(a[2:])
            elif i + 1 < len(argv):
                overrides.append(f"{a[2:]}={argv[i + 1]}")
                i += 1
            else:
                raise ConfigError(f"override {a} has no value")
        else:
            rest.append(a)
        i += 1
    return rest, overrides


def _eval(cfg, args, what: str) -> tuple[dict, str]:
    ws = pl.Workspace(cfg, args.out)
    traces = ws.report_dir / "traces" / what if getattr(args, "dump_traces", False) else None
    graphs = ws.report_dir / "scene_graphs" / what if getattr(args, "dump_scene_graph", False) else None
    for d in (traces, graphs):
        if d is not None:
            d.mkdir(parents=True, exist_ok=True)
    if what == "cggn":
        rep = pl.eval_cggn_stage(cfg, args.out)
    else:
        rows = pl.NAV_ROWS if what == "agent" else pl.ABLATION_ROWS
        rep = pl.eval_agents_stage(cfg, args.out, rows, traces, graphs)
    path = pl.write_report(cfg, args.out, what, rep)
    log.info("wrote %s", path)
    for row in rep.rows:
        log.info("  %s", {k: (round(v, 4) if isinstance(v, float) else v) for k, v in row.items()})
    return {"report": str(path), "rows": rep.rows}, rep.manifest_hash


def run(args, cfg) -> None:
    started = time.time()
    say = None if args.quiet else log.info
    it = args.iterations
    if args.command == "gen-envs":
        summary, tag, h = pl.gen_envs(cfg, args.out), "gen-envs", ""
        h = summary["env_hash"]
    elif args.command == "train":
        tag = f"train {args.what}"
        if args.what == "localizer":
            summary = pl.train_localizer_stage(cfg, args.out, say, args.resume)
        elif args.what == "cggn":
            summary = pl.train_cggn_stage(cfg, args.out, it, say, args.resume)
        else:
            summary = pl.train_agents_stage(cfg, args.out, args.variants, log=say, resume=args.resume,
                                            iterations=it)
        h = pl.env_hash(pl.Workspace(cfg, args.out))
    elif args.command == "eval":
        tag = f"eval {args.what}"
        summary, h = _eval(cfg, args, args.what)
    else:
        tag = "run-all"
        summary = {"gen-envs": pl.gen_envs(cfg, args.out),
                   "localizer": pl.train_localizer_stage(cfg, args.out, say),
                   "cggn": pl.train_cggn_stage(cfg, args.out, it, say),
                   "agents": pl.train_agents_stage(cfg, args.out, log=say, iterations=it)}
        for what in ("cggn", "agent", "ablation"):
            summary[f"eval-{what}"], h = _eval(cfg, args, what)
    path = pl.write_manifest(cfg, args.out, tag, started, summary, h)
    log.info("manifest %s", path)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        rest, overrides = split_overrides(argv)
    except ConfigError as exc:
        print(f"topnav: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args = build_parser().parse_args(rest)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args.config, args.preset, overrides, args.seed)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        run(args, cfg)
    except ConfigError as exc:
        print(f"topnav: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.DatasetMissing as exc:
        print(f"topnav: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except NonFiniteError as exc:
        print(f"topnav: non-finite value during training: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (pl.CheckpointMismatch, CheckpointError) as exc:
        print(f"topnav: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except FileNotFoundError as exc:
        if args.config and Path(exc.filename or "") == Path(args.config):
            print(f"topnav: configuration error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"topnav: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"topnav: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
