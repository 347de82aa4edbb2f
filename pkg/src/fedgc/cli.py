"""Command-line entry point: ``fedgc run | gen-sbm | attack``.

Exit codes: 0 success, 1 configuration or input error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fedcore, graphstore, miaeval, models, pipeline
from .condense import CondensationError
from .graphstore import LoadError, ParameterError
from .pipeline import ConfigError, PipelineAbort, RunConfig
from .tensor import ContractError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

logger = logging.getLogger("fedgc")


def _csv_list(text: str) -> list[str]:
    return [t.strip().lstrip("-") for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgc", description="Federated graph condensation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full pipeline from a JSON config")
    run.add_argument("--config", required=True, help="JSON file with RunConfig fields")
    run.add_argument("--seed", type=int, help="single seed, replaces the config's seed list")
    run.add_argument("--out", help="output directory")
    run.add_argument("--ablate", type=_csv_list, help="comma list of com,ft,ib,st (write --ablate=-ib,-st for the dashed form)")
    run.add_argument("--defense", choices=pipeline.DEFENSES)
    run.add_argument("--gamma", type=float)
    run.add_argument("--ratio", type=float)
    run.add_argument("--clients", type=int)

    gen = sub.add_parser("gen-sbm", help="write a stochastic-block-model graph bundle")
    gen.add_argument("--out", required=True)
    gen.add_argument("--blocks", type=int, default=4)
    gen.add_argument("--per-block", type=int, default=100)
    gen.add_argument("--p-in", type=float, default=0.1)
    gen.add_argument("--p-out", type=float, default=0.01)
    gen.add_argument("--feat-dim", type=int, default=64)
    gen.add_argument("--feat-shift", type=float, default=1.0)
    gen.add_argument("--seed", type=int, default=0)

    att = sub.add_parser("attack", help="membership inference against a GCN trained on a condensed bundle")
    att.add_argument("--bundle", required=True, help="original graph bundle (attacker's shadow source and probes)")
    att.add_argument("--target", required=True, help="condensed graph bundle the target model is trained on")
    att.add_argument("--seed", type=int, default=0)
    att.add_argument("--rewire", type=float, default=0.5)
    att.add_argument("--epochs", type=int, default=300, help="target, shadow and attack-model epochs")
    att.add_argument("--hidden", type=int, default=64)
    att.add_argument("--shadow-size", type=int)
    att.add_argument("--out", help="CSV file for the report row (stdout when omitted)")
    return parser


def cmd_run(args) -> int:
    overrides = {
        "out": args.out,
        "ablate": args.ablate,
        "defense": args.defense,
        "gamma": args.gamma,
        "ratio": args.ratio,
        "clients": args.clients,
        "seeds": [args.seed] if args.seed is not None else None,
    }
    cfg = RunConfig.load(args.config, overrides)
    pipeline.run_pipeline(cfg, out=cfg.out)
    print(f"wrote {cfg.out}")
    return EXIT_OK


def cmd_gen_sbm(args) -> int:
    g = graphstore.sbm_generate(
        args.blocks, args.per_block, args.p_in, args.p_out, args.feat_dim, args.feat_shift, args.seed
    )
    graphstore.save_bundle(g, args.out)
    print(f"wrote {args.out} ({g.n} nodes, {len(g.edges)} edges)")
    return EXIT_OK


def cmd_attack(args) -> int:
    g = graphstore.load_bundle(args.bundle)
    condensed = graphstore.load_bundle(args.target)
    if condensed.d != g.d or condensed.num_classes != g.num_classes:
        raise ConfigError("target bundle does not match the original graph's feature width or classes")
    pool = int((~(g.train_mask | g.test_mask)).sum())
    size = args.shadow_size if args.shadow_size is not None else pool // 2
    split = miaeval.build_shadow(g, size, args.seed)
    attack = miaeval.train_shadow_and_attack(
        split, g, epochs=args.epochs, attack_epochs=args.epochs, hidden=args.hidden, seed=args.seed
    )
    cfg = RunConfig(target_epochs=args.epochs, hidden=args.hidden, seeds=[args.seed])
    target = pipeline.train_target(cfg, condensed, args.seed)
    members, nonmembers = miaeval.probe_sets(g, np.flatnonzero(g.train_mask), args.seed)
    acc = miaeval.accuracy(models.predict(target, g.norm_adj(), g.features), g.labels, g.test_mask)
    rep = miaeval.run_attack(attack, target, g, members, nonmembers, rewire=args.rewire, seed=args.seed, acc=acc)
    row = rep.row(Path(args.target).name, "", "", "", args.seed)
    text = miaeval.write_reports([row], args.out)
    if args.out is None:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "gen-sbm": cmd_gen_sbm, "attack": cmd_attack}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ParameterError, LoadError, json.JSONDecodeError) as exc:
        print(f"fedgc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PipelineAbort, CondensationError, fedcore.ProtocolError, NumericError, ContractError, OSError) as exc:
        print(f"fedgc: aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
