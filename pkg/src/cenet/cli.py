"""Command line entry point: ``cenet {stats,train,evaluate,predict,export-embeddings}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .autodiff import Adam
from .classifier import build_mask, predict_from_embeddings, train_stage2
from .config import RunConfig, load_config, save_config
from .data import (DatasetError, TkgDataset, add_inverse_quadruples, compute_stats, dataset_fingerprint,
                   default_cache_dir, load_dataset, write_stats)
from .evaluation import (FILTER_MODES, MASK_MODES, VARIANTS, EvaluationError, InferenceConfig,
                         ablation_variant, apply_mask, evaluate)
from .history import (ConfigError, HistoryIndex, QueryContext, cache_key, contexts_for_split,
                      load_context_cache, save_context_cache)
from .model import Batch, ModelParams, TrainingError, embed_queries, entity_distribution, train_stage1

logger = logging.getLogger("cenet")


class CliError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _load_dataset(cfg: RunConfig) -> TkgDataset:
    if not cfg.run.data_dir:
        raise CliError("no dataset given (use --data or [run] data_dir)")
    return load_dataset(cfg.run.data_dir, cfg.run.granularity or None)


def _contexts(cfg: RunConfig, ds: TkgDataset, split: str) -> list[QueryContext]:
    cache_dir = default_cache_dir() or Path(cfg.run.out_dir) / "cache"
    if not cfg.run.use_cache:
        return contexts_for_split(ds, split)
    digest = dataset_fingerprint(cfg.run.data_dir)
    path = cache_dir / f"contexts-{split}-{cache_key(digest, str(ds.granularity))}.bin"
    cached = load_context_cache(path, digest)
    if cached is not None:
        return cached
    contexts = contexts_for_split(ds, split)
    cache_dir.mkdir(parents=True, exist_ok=True)
    save_context_cache(path, contexts, digest)
    return contexts


def _all_facts(ds: TkgDataset):
    return add_inverse_quadruples(ds.train + ds.valid + ds.test, ds.num_relations_raw)


def _check_vocab(params: ModelParams, ds: TkgDataset) -> None:
    if params.num_entities != ds.num_entities or params.num_relations != ds.num_relations_total:
        raise CliError(
            f"checkpoint vocabulary ({params.num_entities} entities, {params.num_relations} relations) does not "
            f"match dataset ({ds.num_entities} entities, {ds.num_relations_total} relations incl. inverses)"
        )


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_stats(cfg: RunConfig, args) -> dict:
    started = time.perf_counter()
    ds = _load_dataset(cfg)
    stats = compute_stats(ds)
    out = _out_dir(cfg)
    write_stats(stats, out / "stats.json")
    c = stats.counts
    print(f"entities {c['entities']}  relations {c['relations']}  granules {c['granules']}")
    print(f"train {c['train']}  valid {c['valid'] if ds.valid_present else '-'}  test {c['test']}")
    print(f"new-event rate (training) {100 * stats.new_event_rate:.2f}%")
    print(f"wrote {out / 'stats.json'} in {time.perf_counter() - started:.1f}s")
    return stats.to_json()


def cmd_train(cfg: RunConfig, args) -> Path:
    variant = ablation_variant(cfg.run.ablation or "soft-mask", cfg.inference.filter_mode, cfg.inference.seed)
    hp = variant.apply(cfg.model) if cfg.run.ablation else cfg.model.validate()
    resolved = RunConfig(cfg.run, hp, cfg.inference).validate()
    ds = _load_dataset(resolved)
    out = _out_dir(resolved)
    save_config(resolved, out / "config.toml")

    train_ctx = _contexts(resolved, ds, "train")
    valid_ctx = _contexts(resolved, ds, "valid") if ds.valid_present and ds.valid else []
    facts = _all_facts(ds)

    start_epoch = 0
    optimizer = None
    if args.resume:
        params, old_hp, header, extra = ckpt.load_checkpoint(args.resume)
        if (params.num_entities, params.num_relations, params.d) != (ds.num_entities, ds.num_relations_total, hp.d):
            raise CliError(
                f"cannot resume: checkpoint has (entities, relations, d) = "
                f"{(params.num_entities, params.num_relations, params.d)}, run needs "
                f"{(ds.num_entities, ds.num_relations_total, hp.d)}"
            )
        start_epoch = int(header["meta"].get("epoch", 0))
        optimizer = Adam(params.stage1(), lr=hp.lr)
        if extra:
            optimizer.load_state_arrays(extra, int(header["meta"].get("adam_step", 0)))
    else:
        params = ModelParams.init(ds.num_entities, ds.num_relations_total, hp.d, hp.seed)

    log_path = out / "train_log.jsonl"
    log_fh = log_path.open("a" if args.resume else "w", encoding="utf-8")
    best = {"mrr": -1.0, "epoch": 0, "params": None}

    def on_epoch(epoch, optimizer, record):
        ckpt.save_checkpoint(out / f"stage1_epoch{epoch:03d}.ckpt", params, hp,
                             meta={"stage": 1, "epoch": epoch, "adam_step": optimizer.step_count},
                             extra=optimizer.state_arrays())
        if valid_ctx and resolved.run.select_best_on_valid:
            report = evaluate(valid_ctx, params, hp, InferenceConfig("none", resolved.inference.filter_mode),
                              facts, ds.num_relations_raw, hp.batch_size)
            record["valid_mrr"] = report.mrr
            if report.mrr > best["mrr"]:
                best.update(mrr=report.mrr, epoch=epoch, params=params.copy())
        log_fh.write(json.dumps(record) + "\n")
        log_fh.flush()
        print(f"stage1 epoch {epoch}: combined {record['combined']:.4f} ce {record['ce']:.4f} "
              f"sup {record['sup']:.4f}" + (f" valid-mrr {record['valid_mrr']:.4f}" if "valid_mrr" in record else ""))

    try:
        train_stage1(train_ctx, params, hp, optimizer=optimizer, start_epoch=start_epoch,
                     on_epoch=on_epoch, dump_dir=out)
        if best["params"] is not None:
            params = best["params"]
            log_fh.write(json.dumps({"stage": 1, "selected_epoch": best["epoch"], "valid_mrr": best["mrr"]}) + "\n")

        if variant.train_stage2:
            metrics = train_stage2(train_ctx, params, hp, valid_ctx or None)
            log_fh.write(json.dumps({"stage": 2, **metrics}) + "\n")
            print(f"stage2: train accuracy {metrics['train_accuracy']:.4f} "
                  f"(majority {metrics['majority_baseline']:.4f})")
    finally:
        log_fh.close()

    final = out / "model.ckpt"
    ckpt.save_checkpoint(final, params, hp, meta={"stage": 2 if variant.train_stage2 else 1,
                                                  "ablation": cfg.run.ablation or ""})
    print(f"wrote {final}")
    return final


def _inference_config(cfg: RunConfig, header: dict, args) -> InferenceConfig:
    """Explicit --mask-mode wins, then the ablation's mask, then the config."""
    ablation = cfg.run.ablation or header.get("meta", {}).get("ablation", "")
    if ablation and "mask_mode" not in vars(args):
        return ablation_variant(ablation, cfg.inference.filter_mode, cfg.inference.seed).inference
    return cfg.inference


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    params, hp, header, _ = ckpt.load_checkpoint(args.checkpoint)
    ds = _load_dataset(cfg)
    _check_vocab(params, ds)
    split = args.split
    if split == "valid" and not ds.valid_present:
        raise CliError("dataset has no validation split")
    contexts = _contexts(cfg, ds, split)
    if not contexts:
        raise CliError(f"split {split!r} is empty; nothing to evaluate")
    config = _inference_config(cfg, header, args)
    out = _out_dir(cfg)
    dump = (out / "scores.jsonl").open("w", encoding="utf-8") if cfg.run.dump_scores else None
    try:
        report = evaluate(contexts, params, hp, config, _all_facts(ds), ds.num_relations_raw,
                          hp.batch_size, cfg.run.dump_scores, dump)
    finally:
        if dump:
            dump.close()
    payload = {"split": split, "checkpoint": str(args.checkpoint), **report.to_json()}
    _write_json(out / "report.json", payload)
    c = report.combined
    print(f"{split} [{config.mask_mode}/{config.filter_mode}] MRR {c['mrr']:.4f}  "
          f"Hits@1 {c['hits@1']:.4f}  Hits@3 {c['hits@3']:.4f}  Hits@10 {c['hits@10']:.4f}")
    return payload


def cmd_predict(cfg: RunConfig, args) -> list[dict]:
    params, hp, header, _ = ckpt.load_checkpoint(args.checkpoint)
    ds = _load_dataset(cfg)
    _check_vocab(params, ds)
    if not (0 <= args.s < ds.num_entities):
        raise CliError(f"unknown subject id {args.s} (have {ds.num_entities} entities)")
    if not (0 <= args.p < ds.num_relations_total):
        raise CliError(f"unknown relation id {args.p} (have {ds.num_relations_total} incl. inverses)")
    index = HistoryIndex()
    by_time: dict[int, list] = {}
    for q in _all_facts(ds):
        if q.t < args.t:
            by_time.setdefault(q.t, []).append(q)
    for t in sorted(by_time):
        index.absorb(t, by_time[t])
    ids, counts = index.frequencies(args.s, args.p, args.t)
    ctx = QueryContext(args.s, args.p, args.t, 0, ids, counts)
    batch = Batch.from_contexts([ctx], hp.lam, params.num_entities, params.num_relations)
    P = entity_distribution(batch, params, hp.heads)[0]
    in_hist = np.zeros(params.num_entities, dtype=bool)
    in_hist[ids] = True
    config = _inference_config(cfg, header, args)
    mode = config.mask_mode if params.has_classifier or not config.needs_classifier else "none"
    predicted = None
    if params.has_classifier:
        predicted = bool(predict_from_embeddings(embed_queries([ctx], params, hp.lam), params)[0][0])
    mask = build_mask(ids, predicted, params.num_entities) if predicted is not None else np.ones_like(in_hist)
    scores = apply_mask(P, mask, mode if mode in ("none", "hard", "soft") else "none")
    k = min(args.k, params.num_entities)
    top = np.argsort(-scores, kind="stable")[:k]
    rows = [{"entity": int(o), "probability": float(P[o]), "score": float(scores[o]),
             "in_history": bool(in_hist[o]), "mask": bool(mask[o])} for o in top]
    print(f"query ({args.s}, {args.p}, ?, {args.t})  mask={mode}  predicted-historical={predicted}")
    print("rank\tentity\tprobability\tscore\tin_history\tmask")
    for r, row in enumerate(rows, start=1):
        print(f"{r}\t{row['entity']}\t{row['probability']:.6f}\t{row['score']:.6f}\t"
              f"{int(row['in_history'])}\t{int(row['mask'])}")
    return rows


def cmd_export_embeddings(cfg: RunConfig, args) -> Path:
    params, hp, header, _ = ckpt.load_checkpoint(args.checkpoint)
    ds = _load_dataset(cfg)
    _check_vocab(params, ds)
    contexts = _contexts(cfg, ds, args.split)
    V = embed_queries(contexts, params, hp.lam, hp.batch_size)
    predicted = predict_from_embeddings(V, params)[0] if params.has_classifier else None
    out = _out_dir(cfg) / "embeddings.jsonl"
    with out.open("w", encoding="utf-8") as fh:
        for i, ctx in enumerate(contexts):
            row = {"s": ctx.s, "p": ctx.p, "t": ctx.t, "o": ctx.true_o, "v": V[i].tolist(), "label": ctx.label}
            if predicted is not None:
                row["predicted"] = bool(predicted[i])
            fh.write(json.dumps(row) + "\n")
    print(f"wrote {len(contexts)} embeddings to {out}")
    return out


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="TOML run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--data", type=Path, default=argparse.SUPPRESS, help="dataset directory")
    common.add_argument("--granularity", type=int, default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="cenet", parents=[common],
                                     description="Temporal knowledge graph forecasting with historical contrastive learning")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("stats", parents=[common], help="dataset statistics")

    train = sub.add_parser("train", parents=[common], help="two-stage training")
    train.add_argument("--ablation", choices=list(VARIANTS), default=argparse.SUPPRESS)
    train.add_argument("--dim", type=int, default=argparse.SUPPRESS)
    train.add_argument("--alpha", type=float, default=argparse.SUPPRESS)
    train.add_argument("--lambda", dest="lam", type=float, default=argparse.SUPPRESS)
    train.add_argument("--batch-size", type=int, default=argparse.SUPPRESS)
    train.add_argument("--lr", type=float, default=argparse.SUPPRESS)
    train.add_argument("--epochs", type=int, default=argparse.SUPPRESS, help="stage-1 epochs")
    train.add_argument("--stage2-epochs", type=int, default=argparse.SUPPRESS)
    train.add_argument("--resume", type=Path, default=None, help="stage-1 epoch checkpoint to continue from")

    ev = sub.add_parser("evaluate", parents=[common], help="filtered MRR / Hits@k")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--split", choices=["valid", "test"], default="test")
    ev.add_argument("--mask-mode", choices=MASK_MODES, default=argparse.SUPPRESS)
    ev.add_argument("--filter-mode", choices=FILTER_MODES, default=argparse.SUPPRESS)
    ev.add_argument("--ablation", choices=list(VARIANTS), default=argparse.SUPPRESS)
    ev.add_argument("--dump-scores", type=int, default=argparse.SUPPRESS, metavar="K",
                    help="write per-query top-K scores to scores.jsonl")

    pr = sub.add_parser("predict", parents=[common], help="top-k answers for one query")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--s", type=int, required=True)
    pr.add_argument("--p", type=int, required=True)
    pr.add_argument("--t", type=int, required=True, help="granule index")
    pr.add_argument("--k", type=int, default=10)
    pr.add_argument("--mask-mode", choices=["none", "hard", "soft"], default=argparse.SUPPRESS)

    ex = sub.add_parser("export-embeddings", parents=[common], help="dump query embeddings as JSON lines")
    ex.add_argument("--checkpoint", type=Path, required=True)
    ex.add_argument("--split", choices=["train", "valid", "test"], default="test")
    return parser


def resolve_config(args) -> RunConfig:
    ns = vars(args)
    cfg = load_config(ns["config"]) if "config" in ns else RunConfig()
    run, model, inf = cfg.run, cfg.model, cfg.inference
    if "data" in ns:
        run.data_dir = str(ns["data"])
    if "granularity" in ns:
        run.granularity = ns["granularity"]
    if "out" in ns:
        run.out_dir = str(ns["out"])
    if "seed" in ns:
        model.seed = ns["seed"]
        inf.seed = ns["seed"]
    if "ablation" in ns:
        run.ablation = ns["ablation"]
    if "dump_scores" in ns:
        run.dump_scores = ns["dump_scores"]
    for flag, attr in (("dim", "d"), ("alpha", "alpha"), ("lam", "lam"), ("batch_size", "batch_size"),
                       ("lr", "lr"), ("epochs", "stage1_epochs"), ("stage2_epochs", "stage2_epochs")):
        if flag in ns:
            setattr(model, attr, ns[flag])
    if "mask_mode" in ns:
        inf.mask_mode = ns["mask_mode"]
    if "filter_mode" in ns:
        inf.filter_mode = ns["filter_mode"]
    return cfg.validate()


COMMANDS = {
    "stats": cmd_stats,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "export-embeddings": cmd_export_embeddings,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg, args)
    except (CliError, ConfigError, DatasetError, EvaluationError, ckpt.CheckpointError,
            TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
