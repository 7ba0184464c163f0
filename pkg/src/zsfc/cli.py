"""Command-line entry point: synth, sample, train, eval, ablate, bench, recommend.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from zsfc import DataError, __version__
from zsfc import checkpoint
from zsfc.catalog import Catalog, load_catalog
from zsfc.evaluate import (
    ABLATION_VARIANTS,
    CFModel,
    bench_rank,
    cf_recommender,
    evaluate,
    mean_candidate_count,
    model_recommender,
    run_ablation,
)
from zsfc.model import ModelParams, Ranker, Variant, init_params
from zsfc.sampler import (
    SamplerConfig,
    UserHistory,
    build_cooccurrence,
    context_example,
    corpus_end,
    read_dataset,
    read_interactions,
    sample_dataset,
    split_by_time,
    write_dataset,
)
from zsfc.synth import WorldConfig, generate_histories, generate_world, random_catalog, write_world
from zsfc.training import TrainConfig, train

log = logging.getLogger("zsfc")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- arguments


def _catalog_args(p: argparse.ArgumentParser, interactions: bool = False) -> None:
    g = p.add_argument_group("catalog")
    g.add_argument("--data-dir", type=Path, help="directory holding catalog.tsv, hierarchy.tsv, negative_pairs.tsv")
    g.add_argument("--catalog", type=Path)
    g.add_argument("--hierarchy", type=Path)
    g.add_argument("--negative-pairs", type=Path)
    g.add_argument("--feature-dim", type=int, help="expected image feature length")
    if interactions:
        g.add_argument("--interactions", type=Path)


def _train_args(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=d.epochs)
    g.add_argument("--lr", type=float, default=d.learning_rate)
    g.add_argument("--dim", type=int, default=d.d)
    g.add_argument("--negatives", type=int, default=d.negatives)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--init", choices=("xavier", "image"), default=None, help="default follows the variant")


def _sampler_args(p: argparse.ArgumentParser) -> None:
    d = SamplerConfig()
    g = p.add_argument_group("sampling")
    g.add_argument("--max-clicks", type=int, default=d.max_clicks)
    g.add_argument("--max-orders", type=int, default=d.max_orders)
    g.add_argument("--click-window", type=int, default=d.click_window, help="seconds")
    g.add_argument("--order-window", type=int, default=d.order_window, help="seconds")
    g.add_argument("--lookahead", type=int, default=d.lookahead, help="seconds")
    g.add_argument("--purchase-horizon", type=int, default=d.purchase_horizon, help="seconds")
    g.add_argument("--top-n", type=int, default=d.top_n)


def _variant(text: str) -> Variant:
    try:
        return Variant(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown variant {text!r}; choose from {[v.value for v in Variant]}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads (1 = reference mode)")
    common.add_argument("--json", action="store_true", help="machine-readable report on stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="zsfc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    w = WorldConfig()
    p = sub.add_parser("synth", parents=[common], help="generate a synthetic catalog and interaction log")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--items", type=int, default=w.n_items)
    p.add_argument("--categories", type=int, default=w.n_categories)
    p.add_argument("--users", type=int, default=w.n_users)
    p.add_argument("--events-per-user", type=int, default=w.events_per_user)
    p.add_argument("--dim", type=int, default=w.d)
    p.add_argument("--affinity", type=float, default=w.complementary_affinity)
    p.add_argument("--negative-fraction", type=float, default=w.negative_pair_fraction)
    p.add_argument("--days", type=int, default=w.days)

    p = sub.add_parser("sample", parents=[common], help="extract training examples from an interaction log")
    _catalog_args(p, interactions=True)
    _sampler_args(p)
    p.add_argument("--out", type=Path, required=True, help="output directory for dataset/train/test JSONL")

    p = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    _catalog_args(p)
    _train_args(p)
    p.add_argument("--variant", type=_variant, default=Variant.ZSFC)
    p.add_argument("--train", type=Path, required=True, help="training JSONL")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, help="per-epoch JSON log")

    p = sub.add_parser("eval", parents=[common], help="Recall@K of a checkpoint or the CF baseline")
    _catalog_args(p, interactions=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--baseline", choices=("cf",))
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--out", type=Path, help="report path (eval_report.json)")

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate every model variant")
    _catalog_args(p, interactions=True)
    _train_args(p)
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--variants", default=",".join(v.value for v in ABLATION_VARIANTS))
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--out", type=Path, help="report path (ablation.json)")

    p = sub.add_parser("bench", parents=[common], help="ranking latency benchmark")
    _catalog_args(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--variant", type=_variant, default=Variant.ZSFC)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--candidates", type=int, default=120_000)
    p.add_argument("--categories", type=int, default=40, help="for the generated catalog when none is given")
    p.add_argument("-k", type=int, default=80)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--check", action="store_true", help="compare every result with the reference ranking")
    p.add_argument("--out", type=Path, help="report path (bench.json)")

    p = sub.add_parser("recommend", parents=[common], help="rank complements for one base item")
    _catalog_args(p)
    _sampler_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--base", required=True, help="item key")
    p.add_argument("--user-log", type=Path, required=True, help="interaction rows for the user")
    p.add_argument("--at", type=int, help="request time (default: one second after the last logged event)")
    p.add_argument("-k", type=int, default=5)
    return parser


# ---------------------------------------------------------------- helpers


def _resolve(args, name: str, filename: str, required: bool = True) -> Path | None:
    value = getattr(args, name, None)
    if value is None and args.data_dir is not None:
        candidate = args.data_dir / filename
        if candidate.exists() or required:
            value = candidate
    if value is None and required:
        raise UsageError(f"--{name.replace('_', '-')} (or --data-dir) is required")
    return value


def _load_catalog(args) -> Catalog:
    return load_catalog(
        _resolve(args, "catalog", "catalog.tsv"),
        _resolve(args, "hierarchy", "hierarchy.tsv"),
        _resolve(args, "negative_pairs", "negative_pairs.tsv", required=False),
        dim=args.feature_dim,
    )


def _load_checkpoint(path: Path, catalog: Catalog) -> ModelParams:
    params = checkpoint.load(path)
    if params.n_items != len(catalog) or params.n_categories != catalog.n_categories:
        raise DataError(
            f"checkpoint is for {params.n_items} items / {params.n_categories} categories, "
            f"catalog has {len(catalog)} / {catalog.n_categories}",
            path,
        )
    return params


def _sampler_config(args) -> SamplerConfig:
    return SamplerConfig(
        max_clicks=args.max_clicks,
        max_orders=args.max_orders,
        click_window=args.click_window,
        order_window=args.order_window,
        lookahead=args.lookahead,
        purchase_horizon=args.purchase_horizon,
        top_n=args.top_n,
    )


def _train_config(args, variant: Variant) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        d=args.dim,
        epochs=args.epochs,
        negatives=args.negatives,
        batch_size=args.batch_size,
        seed=args.seed,
        variant=variant,
        init_mode=args.init,
    )


def _write_json(path: Path | None, obj) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _emit(args, obj, lines) -> None:
    if args.json:
        print(json.dumps(obj, sort_keys=True))
    else:
        for line in lines:
            print(line)


def _fmt(value) -> str:
    return "-" if value is None else f"{value:.4f}"


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = WorldConfig(
        n_items=args.items,
        n_categories=args.categories,
        d=args.dim,
        n_users=args.users,
        events_per_user=args.events_per_user,
        complementary_affinity=args.affinity,
        negative_pair_fraction=args.negative_fraction,
        days=args.days,
        seed=args.seed,
    )
    world = generate_world(cfg)
    histories = generate_histories(world)
    args.out.mkdir(parents=True, exist_ok=True)
    paths = write_world(world, histories, args.out)
    n_events = sum(len(h.events) for h in histories)
    report = {"items": cfg.n_items, "users": cfg.n_users, "events": n_events, "files": {k: str(v) for k, v in paths.items()}}
    _emit(args, report, [f"wrote {n_events} events for {cfg.n_users} users over {cfg.n_items} items to {args.out}"])
    return EXIT_OK


def cmd_sample(args) -> int:
    catalog = _load_catalog(args)
    histories = read_interactions(_resolve(args, "interactions", "interactions.tsv"), catalog)
    examples = sample_dataset(histories, catalog, _sampler_config(args))
    train_set, test_set = split_by_time(examples, corpus_end(histories))
    args.out.mkdir(parents=True, exist_ok=True)
    write_dataset(examples, args.out / "dataset.jsonl", catalog)
    write_dataset(train_set, args.out / "train.jsonl", catalog)
    write_dataset(test_set, args.out / "test.jsonl", catalog)
    report = {"examples": len(examples), "train": len(train_set), "test": len(test_set)}
    _emit(args, report, [f"{len(examples)} examples ({len(train_set)} train, {len(test_set)} test) -> {args.out}"])
    return EXIT_OK


def cmd_train(args) -> int:
    catalog = _load_catalog(args)
    dataset = read_dataset(args.train, catalog)
    cfg = _train_config(args, args.variant)
    if cfg.epochs == 0:
        params = init_params(catalog, cfg.d, cfg.resolved_init, cfg.seed, cfg.variant)
        epoch_log = []
        if args.log is not None:
            args.log.write_text("", encoding="utf-8")
    else:
        result = train(dataset, catalog, cfg, log_path=args.log)
        params, epoch_log = result.params, result.epoch_log
    args.out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(params, args.out)
    report = {"variant": cfg.variant.value, "examples": len(dataset), "epochs": epoch_log, "checkpoint": str(args.out)}
    lines = [f"epoch {e['epoch']}: mean loss {e['mean_loss']:.5f} ({e['wall_ms']:.0f} ms)" for e in epoch_log]
    _emit(args, report, lines + [f"checkpoint -> {args.out}"])
    return EXIT_OK


def _cf_from_interactions(args, catalog: Catalog):
    path = _resolve(args, "interactions", "interactions.tsv", required=False)
    if path is None:
        raise UsageError("the CF baseline needs --interactions (or --data-dir)")
    return CFModel(build_cooccurrence(read_interactions(path, catalog), len(catalog)))


def cmd_eval(args) -> int:
    catalog = _load_catalog(args)
    testset = read_dataset(args.test, catalog)
    if args.baseline == "cf":
        recommender, source = cf_recommender(_cf_from_interactions(args, catalog), catalog), "cf-c"
    else:
        params = _load_checkpoint(args.checkpoint, catalog)
        recommender, source = model_recommender(params, catalog), params.variant.value
    report = evaluate(recommender, testset, args.k).to_dict()
    report["model"] = source
    report["chance"] = args.k / mean_candidate_count(testset, catalog)
    _write_json(args.out, report)
    _emit(
        args,
        report,
        [
            f"model            {source}",
            f"Recall@{args.k}         {_fmt(report['recall_at_k'])}  (n={report['n_total']})",
            f"Order Recall@{args.k}   {_fmt(report['order_recall_at_k'])}  (n={report['n_ordered']})",
            f"chance           {_fmt(report['chance'])}",
        ],
    )
    return EXIT_OK


def cmd_ablate(args) -> int:
    catalog = _load_catalog(args)
    train_set = read_dataset(args.train, catalog)
    test_set = read_dataset(args.test, catalog)
    try:
        variants = [Variant(v.strip()) for v in args.variants.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = run_ablation(train_set, test_set, catalog, _train_config(args, Variant.ZSFC), variants, args.k)
    if _resolve(args, "interactions", "interactions.tsv", required=False) is not None:
        cf = evaluate(cf_recommender(_cf_from_interactions(args, catalog), catalog), test_set, args.k)
        rows.append({"variant": "cf-c", **cf.to_dict()})
    _write_json(args.out, rows)
    lines = [f"{'variant':<16}{'Recall@' + str(args.k):>12}{'OrderRecall@' + str(args.k):>16}"]
    lines += [f"{r['variant']:<16}{_fmt(r['recall_at_k']):>12}{_fmt(r['order_recall_at_k']):>16}" for r in rows]
    _emit(args, rows, lines)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.catalog is not None or args.data_dir is not None:
        catalog = _load_catalog(args)
    else:
        catalog = random_catalog(args.candidates, args.categories, args.seed)
    if args.checkpoint is not None:
        params = _load_checkpoint(args.checkpoint, catalog)
    else:
        params = init_params(catalog, args.dim, "xavier", args.seed, args.variant)
    res = bench_rank(params, catalog, args.candidates, args.k, args.reps, seed=args.seed, check=args.check)
    report = res.to_dict()
    _write_json(args.out, report)
    _emit(
        args,
        report,
        [
            f"{res.reps} requests, {res.n_candidates} candidates, top-{res.k}",
            f"p50 {res.p50_ms:.3f} ms   p99 {res.p99_ms:.3f} ms   mean {res.mean_ms:.3f} ms",
        ],
    )
    return EXIT_OK


def cmd_recommend(args) -> int:
    catalog = _load_catalog(args)
    params = _load_checkpoint(args.checkpoint, catalog)
    try:
        base = catalog.id_of(args.base)
    except KeyError as exc:
        raise DataError(str(exc.args[0])) from None
    histories = read_interactions(args.user_log, catalog)
    events = [e for h in histories for e in h.events]
    history = UserHistory(histories[0].user if histories else 0, events)
    at = args.at if args.at is not None else (history.events[-1].timestamp + 1 if history.events else 0)
    example = context_example(history, base, at, _sampler_config(args))
    ranker = Ranker(params, params.variant, catalog)
    ranked = ranker.rank(ranker.encode(example), args.k, base, post_filter=True)
    rows = [{"rank": r, "item": catalog.keys[i], "score": s} for r, (i, s) in enumerate(ranked, start=1)]
    _emit(args, {"base": args.base, "recommendations": rows}, [f"{r['rank']}\t{r['item']}\t{r['score']:.6f}" for r in rows])
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "sample": cmd_sample,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "recommend": cmd_recommend,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads is not None and args.threads < 1:
        print("zsfc: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    limits = threadpool_limits(limits=args.threads) if args.threads is not None else nullcontext()
    try:
        with limits:
            return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"zsfc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, ValueError, KeyError) as exc:
        print(f"zsfc: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
