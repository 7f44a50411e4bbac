"""``pkgm`` command line."""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import kg as kgmod
from .adapters import condense_file
from .checkpoint import build_meta, read_checkpoint, save_checkpoint
from .evaluation import eval_link_prediction, eval_recommendation
from .ncf import NcfConfig, VARIANTS, load_ncf, pkgm_item_features, read_interactions, save_ncf, \
    split_validation, leave_one_out, train_ncf
from .service import PkgmServer, PkgmService, bundle_rows, format_vectors, serve_bundle
from .synthetic import SyntheticKgSpec, gen_interactions, gen_synthetic_kg, write_interactions, \
    write_synthetic_kg
from .train import TrainConfig, train

log = logging.getLogger("pkgm")


def _hash(*parts: str) -> str:
    return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


def cmd_prepare(args):
    store = kgmod.ingest(args.triples, args.categories, args.format)
    store = kgmod.filter_rare_relations(store, args.min_count)
    key_map = kgmod.select_key_relations(store, args.k)
    kgmod.save_prepared(store, key_map, args.out)
    print(f"{len(store)} triples, {store.vocab.n_entities} entities, {store.vocab.n_relations} relations")


def cmd_train(args):
    store, key_map = kgmod.load_prepared(args.data)
    config = TrainConfig(dim=args.dim, margin=args.margin, learning_rate=args.lr, batch_size=args.batch,
                         epochs=args.epochs, negatives_per_edge=args.neg, seed=args.seed,
                         normalize_entities=args.normalize, workers=args.workers)
    result = train(store, config)
    tag = _hash(config.config_hash(), store.fingerprint())
    meta = build_meta(store.vocab, key_map, config=config.__dict__, dataset=store.fingerprint(),
                      loss_history=result.loss_history)
    save_checkpoint(result.params, args.out, tag, meta)
    print(f"final mean loss {result.loss_history[-1]:.6f}; config hash {tag}")


def cmd_serve(args):
    service = PkgmService.from_path(args.model)
    server = PkgmServer(args.socket, service)
    log.info("serving %s on %s", args.model, args.socket)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def cmd_query(args):
    service = PkgmService.from_path(args.model)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        if args.batch:
            with open(args.batch, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        out.write(service.handle_bytes(line.strip().encode()).decode() + "\n")
            return
        kind = args.kind.upper()
        if kind == "BUNDLE":
            vocab = service.vocab
            if not vocab.has_entity(args.entity):
                raise SystemExit(f"NOT_FOUND: unknown entity {args.entity!r}")
            bundle = serve_bundle(service.params, service.key_map, vocab, vocab.entity_id(args.entity))
            out.write(format_vectors(bundle_rows(bundle, vocab)))
            return
        resp = service.handle({"kind": kind, "entity": args.entity, "relation": args.relation,
                               "top_n": args.top_n})
        if resp["status"] != "OK":
            raise SystemExit(f"{resp['status']}: {resp['error']}")
        if kind == "COMPLETE":
            for eid, dist in resp["ranking"]:
                out.write(f"{service.vocab.entity_names[eid]}\t{format(dist, '.9g')}\n")
        else:
            out.write(format_vectors([(f"{kind[0]}|{args.relation}|{args.entity}", resp["vector"])]))
    finally:
        if out is not sys.stdout:
            out.close()


def cmd_condense(args):
    n = condense_file(args.bundles, args.out)
    print(f"condensed {n} bundles")


def _read_map(path):
    if path is None:
        return None
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line:
            item, ent = line.split("\t")
            out[item] = ent
    return out


def cmd_ncf_train(args):
    data = read_interactions(args.interactions)
    train_set, _ = leave_one_out(data)
    features = None
    if args.variant != "base":
        if not args.model:
            raise SystemExit(f"--model is required for variant {args.variant}")
        features, missing = pkgm_item_features(data.item_names, read_checkpoint(args.model),
                                               _read_map(args.map), args.variant)
        if missing.any():
            log.warning("%d of %d items have no PKGM features", int(missing.sum()), len(missing))
    config = NcfConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch, reg=args.reg,
                       neg_ratio=args.neg_ratio, seed=args.seed, variant=args.variant, patience=args.patience)
    validation = None
    if args.validation:
        train_set, validation = split_validation(train_set, args.seed)
    result = train_ncf(train_set, config, features, validation)
    save_ncf(args.out, result.params, config, data, features)
    print(f"final mean loss {result.history[-1]:.6f}" +
          (f"; best epoch {result.best_epoch}" if result.best_epoch is not None else ""))


def cmd_eval_kg(args):
    ck = read_checkpoint(args.model)
    store, _ = kgmod.load_prepared(args.filter)
    vocab = ck.vocab()
    if vocab is not None and vocab.entity_names != store.vocab.entity_names:
        raise SystemExit("checkpoint vocabulary does not match the filter directory")
    test = []
    for lineno, (h, r, t) in kgmod._read_rows(Path(args.test), "tsv", 3):
        try:
            test.append((store.vocab.entity_id(h), store.vocab.relation_id(r), store.vocab.entity_id(t)))
        except KeyError as exc:
            raise SystemExit(f"{args.test}:{lineno}: unknown name {exc}") from None
    report = eval_link_prediction(ck.params, np.array(test), store, allow_overlap=args.allow_overlap)
    report.config_hash = ck.config_hash
    report.dataset = store.fingerprint()
    report.seed = ck.meta.get("config", {}).get("seed")
    _write_report(report, args.out, args.timing)


def cmd_eval_rec(args):
    params, config, header, features = load_ncf(args.ncf)
    data = read_interactions(args.interactions)
    if data.user_names != header["users"] or data.item_names != header["items"]:
        raise SystemExit("interaction file does not match the users/items the model was trained on")
    report = eval_recommendation(params, data, features, n_negatives=args.negatives, seed=args.seed)
    report.config_hash = config.config_hash()
    report.dataset = hashlib.sha256(Path(args.interactions).read_bytes()).hexdigest()[:16]
    report.info["variant"] = config.variant
    _write_report(report, args.out, args.timing)


def _write_report(report, path, timing):
    text = report.to_json(include_timing=timing)
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gen_kg(args):
    spec = SyntheticKgSpec.from_json(args.spec) if args.spec else SyntheticKgSpec()
    kg = gen_synthetic_kg(spec)
    write_synthetic_kg(kg, args.out)
    print(f"{len(kg.triples)} triples written to {args.out}")


def cmd_gen_interactions(args):
    spec = SyntheticKgSpec.from_json(args.spec) if args.spec else SyntheticKgSpec()
    kg = gen_synthetic_kg(spec)
    rows = gen_interactions(kg, args.users, args.min_per_user, args.max_per_user, args.affinity,
                            args.cold_fraction, args.cold_weight, args.seed)
    write_interactions(rows, args.out)
    print(f"{len(rows)} interactions written to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pkgm", description="Pre-trained knowledge graph model toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="ingest, filter and index a triple file")
    s.add_argument("--triples", required=True)
    s.add_argument("--categories")
    s.add_argument("--format", default="tsv", choices=["tsv", "csv"])
    s.add_argument("--min-count", type=int, default=2)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train PKGM on a prepared directory")
    s.add_argument("--data", required=True)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--batch", type=int, default=128)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--margin", type=float, default=1.0)
    s.add_argument("--neg", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--normalize", action="store_true", help="L2-normalise updated entity rows")
    s.add_argument("--workers", type=int, default=1, help=">1 enables nondeterministic parallel updates")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("serve", help="answer framed JSON requests on a Unix socket")
    s.add_argument("--model", required=True)
    s.add_argument("--socket", required=True)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("query", help="one-off or batch queries against a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--kind", choices=["triple", "relation", "bundle", "complete"], default="bundle")
    s.add_argument("--entity")
    s.add_argument("--relation")
    s.add_argument("--top-n", type=int, default=10)
    s.add_argument("--batch", help="JSON-lines request file; responses are written as JSON lines")
    s.add_argument("--out")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("condense", help="condense bundle TSV rows into one vector per entity")
    s.add_argument("--bundles", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_condense)

    s = sub.add_parser("ncf-train", help="train NCF with optional PKGM features")
    s.add_argument("--interactions", required=True)
    s.add_argument("--model")
    s.add_argument("--map")
    s.add_argument("--variant", choices=VARIANTS, default="base")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--batch", type=int, default=256)
    s.add_argument("--reg", type=float, default=0.001)
    s.add_argument("--neg-ratio", type=int, default=4)
    s.add_argument("--validation", action="store_true", help="select the best epoch on a validation split")
    s.add_argument("--patience", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ncf_train)

    s = sub.add_parser("eval-kg", help="filtered link prediction")
    s.add_argument("--model", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--filter", required=True)
    s.add_argument("--allow-overlap", action="store_true")
    s.add_argument("--timing", action="store_true", help="include wall time (breaks byte-identical reports)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_kg)

    s = sub.add_parser("eval-rec", help="leave-one-out HR@k / NDCG@k")
    s.add_argument("--ncf", required=True)
    s.add_argument("--interactions", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--negatives", type=int, default=100)
    s.add_argument("--timing", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_rec)

    s = sub.add_parser("gen-kg", help="write a synthetic KG with planted structure")
    s.add_argument("--spec")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_kg)

    s = sub.add_parser("gen-interactions", help="write synthetic interactions for a synthetic KG")
    s.add_argument("--spec")
    s.add_argument("--users", type=int, default=300)
    s.add_argument("--min-per-user", type=int, default=10)
    s.add_argument("--max-per-user", type=int, default=20)
    s.add_argument("--affinity", type=float, default=0.8)
    s.add_argument("--cold-fraction", type=float, default=0.0)
    s.add_argument("--cold-weight", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_interactions)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "query" and not args.batch and not args.entity:
        raise SystemExit("query needs --entity or --batch")
    try:
        args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        log.debug("command failed", exc_info=True)
        raise SystemExit(f"pkgm {args.command}: {exc}") from None


if __name__ == "__main__":
    main()
