"""Command-line entry point: ``advtransfer {train,attack,evaluate,report,run,verify,template}``."""
import argparse
import json
import logging
import sys

from ..errors import AdvTransferError
from .config import ExperimentConfig
from .pipeline import PHASES, run_phases, spot_check, verify_manifest

TEMPLATES = {
    # single MLP surrogate against an MLP ensemble
    "locality": {
        "surrogates": [{"kind": "mlp", "hidden_layers": [64], "epochs": 30, "learning_rate": 0.1}],
        "targets": [{"name": "mlp", "count": 20,
                     "training": {"kind": "mlp", "hidden_layers": [64], "epochs": 30, "learning_rate": 0.1}}],
    },
    # two surrogates differing only in initial weights
    "two-surrogate": {
        "surrogates": [{"kind": "mlp", "hidden_layers": [64], "epochs": 30, "learning_rate": 0.1}] * 2,
        "targets": [{"name": "mlp", "count": 20,
                     "training": {"kind": "mlp", "hidden_layers": [64], "epochs": 30, "learning_rate": 0.1}}],
    },
    # one perturbation set judged by MLP and random-forest targets
    "cross-family": {
        "surrogates": [{"kind": "mlp", "hidden_layers": [64], "epochs": 30, "learning_rate": 0.1}],
        "targets": [
            {"name": "mlp", "count": 20,
             "training": {"kind": "mlp", "hidden_layers": [64], "epochs": 30, "learning_rate": 0.1}},
            {"name": "forest", "count": 20,
             "training": {"kind": "forest", "tree_count": 20, "max_depth": 12}},
        ],
    },
}


def template(name, seed=0, out="run"):
    cfg = {
        "root_seed": seed,
        # 0.1 * sqrt(64) for the 8x8 digits
        "epsilon": 0.8,
        "source_count": 50,
        "perturbations_per_source": 20,
        "dataset": {"format": "digits", "train_fraction": 0.8, "max_train": 2000},
        "attack": {"mode": "whitebox", "max_iterations": 40, "bisect_tolerance": 1e-3,
                   "mc_budget": 100, "mc_radius_scale": 1.0, "step_shrink": 0.5, "targeted": True},
        "output_dir": out,
    }
    cfg.update(TEMPLATES[name])
    return cfg


def build_parser():
    parser = argparse.ArgumentParser(prog="advtransfer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*PHASES, "run", "verify"):
        p = sub.add_parser(name, help=f"{name} phase" if name in PHASES else None)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override root_seed")
        p.add_argument("--out", default=None, help="override output_dir")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--trace", action="store_true", help="dump attack traces as JSON lines")
        p.add_argument("-v", "--verbose", action="store_true")
    t = sub.add_parser("template", help="print an example config")
    t.add_argument("name", choices=sorted(TEMPLATES))
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default="run")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "template":
        print(json.dumps(template(args.name, args.seed, args.out), indent=2))
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.from_file(args.config).with_overrides(args.seed, args.out)
        if args.command == "verify":
            problems = verify_manifest(cfg.output_dir)
            problems += [f"grid cell mismatch: {c}" for c in spot_check(cfg, cfg.output_dir)]
            for p in problems:
                print(p)
            print("ok" if not problems else f"{len(problems)} problem(s)")
            return 0 if not problems else 1
        phases = PHASES if args.command == "run" else (args.command,)
        report = run_phases(cfg, phases, jobs=args.jobs, trace=args.trace)
    except AdvTransferError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if report is not None:
        for key, g in report["grids"].items():
            if g is None:
                continue
            print(f"{key}: mean E[T_T]={g['mean_expectation']['targeted']:.3f} "
                  f"E[T_N]={g['mean_expectation']['nontargeted']:.3f} "
                  f"mean sigma_p={g['mean_per_source_std']['nontargeted']:.3f} "
                  f"overall std={g['overall_std']['nontargeted']:.3f}")
        for fam, a in report.get("agreement", {}).items():
            print(f"agreement ({fam}): {json.dumps(a, sort_keys=True)}")
        for s, c in report.get("cross_family", {}).items():
            print(f"cross-family ({s}): pearson T_T={c['targeted']['pearson']} T_N={c['nontargeted']['pearson']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
