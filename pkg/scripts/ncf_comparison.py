"""Compare NCF variants with and without PKGM item features on synthetic interactions.

    python scripts/ncf_comparison.py --variants base pkgm-t pkgm-r pkgm-all --tsv out.tsv
"""

import argparse
import logging
from dataclasses import replace

from pkgm.evaluation import EvalReport, compare_runs
from pkgm.experiments import RecommendationExperiment, run_recommendation
from pkgm.ncf import VARIANTS


def main():
    defaults = RecommendationExperiment()
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(defaults.variants))
    p.add_argument("--seeds", nargs="+", type=int, default=list(defaults.seeds))
    p.add_argument("--kg-seed", type=int, default=defaults.spec.seed)
    p.add_argument("--interaction-seed", type=int, default=defaults.interaction_seed)
    p.add_argument("--affinity", type=float, default=defaults.affinity)
    p.add_argument("--cold-fraction", type=float, default=defaults.cold_fraction)
    p.add_argument("--cold-weight", type=float, default=defaults.cold_weight)
    p.add_argument("--lr", type=float, default=defaults.ncf.learning_rate)
    p.add_argument("--epochs", type=int, default=defaults.ncf.epochs)
    p.add_argument("--patience", type=int, default=defaults.ncf.patience)
    p.add_argument("--no-validation", action="store_true", help="train all epochs, keep the last")
    p.add_argument("--tsv", help="write the comparison table here")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    exp = replace(
        defaults,
        spec=replace(defaults.spec, seed=args.kg_seed),
        affinity=args.affinity, cold_fraction=args.cold_fraction, cold_weight=args.cold_weight,
        interaction_seed=args.interaction_seed,
        ncf=replace(defaults.ncf, learning_rate=args.lr, epochs=args.epochs, patience=args.patience),
        seeds=tuple(args.seeds), variants=tuple(args.variants), validation=not args.no_validation,
    )
    result = run_recommendation(exp)
    keys = ["hr@1", "hr@5", "hr@10", "ndcg@5", "ndcg@10"]
    means = [EvalReport({k: result.mean(v, k) for k in keys}) for v in exp.variants]
    text, tsv = compare_runs(means, list(exp.variants))
    print(f"means over seeds {list(exp.seeds)} ({result.seconds:.0f} s)")
    print(text)
    if args.tsv:
        with open(args.tsv, "w") as fh:
            fh.write(tsv)


if __name__ == "__main__":
    main()
