"""Batch command-line interface over the experiment stages."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .errors import MixcryptError


def _add_config(p):
    p.add_argument("--config", required=True, help="experiment config file (key=value sections)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mixcrypt",
        description="Workbench for the mixup-with-sign-mask scheme and the fusion-denoising attack",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the seeded synthetic dataset")
    _add_config(p)
    p.add_argument("--no-oracle", action="store_true", help="strip oracle blocks (attacker view)")

    p = sub.add_parser("train-comparative", help="train the pair similarity scorer")
    _add_config(p)
    p.add_argument("--plain", action="store_true", help="single-view ablation scorer")

    p = sub.add_parser("cluster", help="build the similarity graph and extract clusters")
    _add_config(p)
    p.add_argument("--scorer", choices=("net", "plain", "oracle"), default="net")

    p = sub.add_parser("train-filter", help="train the epsilon neighbour filter")
    _add_config(p)

    p = sub.add_parser("filter", help="filter clusters down to mutual neighbours")
    _add_config(p)
    p.add_argument("--oracle", action="store_true", help="use the ground-truth filter")
    p.add_argument("--learned", action="store_true", help="use the trained filter model")

    p = sub.add_parser("train-fdn", help="train the fusion-denoising network")
    _add_config(p)

    p = sub.add_parser("attack", help="restore held-out clusters with the trained model")
    _add_config(p)
    p.add_argument("--oracle-clusters", action="store_true", help="use ground-truth clusters")

    p = sub.add_parser("baseline", help="run the averaging and optimization baselines")
    _add_config(p)
    p.add_argument("--methods", default="AVG,CA", help="comma list from AVG,CA,CA-CN")
    p.add_argument("--oracle-clusters", action="store_true")

    p = sub.add_parser("eval", help="score a restored dataset against the targets")
    _add_config(p)
    p.add_argument("--restored", default=None, help="restored dataset path (default: attack output)")
    p.add_argument("--method", default="FDN", help="method name for the report rows")

    p = sub.add_parser("sweep", help="attack experiments over a (|M|, epsilon) grid")
    _add_config(p)
    p.add_argument("--m", default="4,10", help="comma list of homogeneous set sizes")
    p.add_argument("--eps", default="0.1,0.4", help="comma list of augmentation levels")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = harness.load_config(args.config)
        if args.command == "gen-data":
            out = harness.run_gen_data(cfg, strip_oracle=args.no_oracle)
            print(f"wrote {out['count']} encryptions to {out['paths']['dataset']}")
            print(f"dataset sha256 {out['digest']}")
        elif args.command == "train-comparative":
            out = harness.run_train_comparative(cfg, multires=not args.plain)
            acc = out["history"]["holdout_accuracy"][-1]
            print(f"comparative checkpoint {out['paths']['comparative']}  held-out accuracy {acc:.3f}")
        elif args.command == "cluster":
            out = harness.run_cluster(cfg, scorer_kind=args.scorer)
            print(f"wrote {len(out['clusters'])} clusters to {out['paths']['clusters']}")
        elif args.command == "train-filter":
            out = harness.run_train_filter(cfg)
            acc = out["history"]["holdout_accuracy"][-1]
            print(f"filter checkpoint {out['paths']['filter']}  held-out accuracy {acc:.3f}")
        elif args.command == "filter":
            use_oracle = True if args.oracle else (False if args.learned else None)
            out = harness.run_filter(cfg, use_oracle=use_oracle)
            print(f"wrote filtered clusters to {out['paths']['filtered']} ({out['warnings']} warnings)")
        elif args.command == "train-fdn":
            out = harness.run_train_fdn(cfg)
            print(f"fdn checkpoint {out['paths']['fdn']}  final loss {out['loss_curve'][-1]:.4f}")
        elif args.command == "attack":
            if args.oracle_clusters:
                cfg.attack.oracle_clusters = True
            out = harness.run_attack(cfg)
            means = out["report"].method_means()
            print(f"report {out['paths']['report']}  mean SSIM {means.get('FDN', float('nan')):.4f}")
        elif args.command == "baseline":
            if args.oracle_clusters:
                cfg.attack.oracle_clusters = True
            methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
            out = harness.run_baseline(cfg, methods=methods)
            means = out["report"].method_means()
            summary = "  ".join(f"{m} {v:.4f}" for m, v in sorted(means.items()))
            print(f"report {out['path']}  mean SSIM {summary}")
        elif args.command == "eval":
            out = harness.run_eval(cfg, restored_path=args.restored, method=args.method)
            means = out["report"].method_means()
            summary = "  ".join(f"{m} {v:.4f}" for m, v in sorted(means.items()))
            print(f"report {out['path']}  mean SSIM {summary}")
        elif args.command == "sweep":
            m_values = [int(x) for x in args.m.split(",") if x.strip()]
            eps_values = [float(x) for x in args.eps.split(",") if x.strip()]
            report = harness.run_sweep(cfg, m_values, eps_values)
            out = Path(cfg.workdir) / "sweep_report.csv"
            out.parent.mkdir(parents=True, exist_ok=True)
            harness.write_report(report, out)
            print(f"report {out} with {len(report.rows)} rows")
    except MixcryptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
