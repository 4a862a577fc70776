"""Command-line entry point.

Subcommands: ingest, pretrain, finetune, embed, retrieve, probe, verify,
report. Bad flags exit 2 (argparse); runtime failures print a diagnostic and
exit 1; ``verify`` exits nonzero if any check fails. The effective config is
echoed at the start of every run.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis, structdata, theory, trainer
from .config import ConfigError, RunConfig, echo_config, load_run_config, model_config_from_dict
from .structdata import InputError


def _load_structures(path, split: str | None = None) -> list:
    path = Path(path)
    if path.suffix == ".json":
        splits = structdata.read_manifest(path)
        if split is not None:
            if split not in splits:
                raise InputError(f"manifest has no split {split!r}; available: {sorted(splits)}")
            return splits[split]
        return [s for group in splits.values() for s in group]
    return structdata.read_dataset(path)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None, help="JSON run-config file")
    sub.add_argument("--seed", type=int, default=None, help="overrides file and env seeds")
    sub.add_argument("--deterministic", action="store_true",
                     help="fixed seeds and reduction order (the default behavior; echoed)")
    sub.add_argument("--workers", type=int, default=1)
    sub.add_argument("--out", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tristream")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("ingest", help="validate structure files and write a manifest")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--split", nargs="+", default=["train"],
                   help="one split name per input file, or a single name for all")
    _add_common(p)

    p = subs.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--log", default=None, help="CSV loss-breakdown log path")
    _add_common(p)

    p = subs.add_parser("finetune", help="supervised energy/force training")
    p.add_argument("--data", required=True)
    p.add_argument("--train-split", default="train")
    p.add_argument("--val-split", default=None)
    p.add_argument("--mode", choices=["conservative", "direct"], default="conservative")
    p.add_argument("--init", default=None, help="checkpoint to start from")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--log", default=None)
    _add_common(p)

    p = subs.add_parser("embed", help="build an embedding index from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None)
    _add_common(p)

    p = subs.add_parser("retrieve", help="nearest neighbors of a query structure")
    p.add_argument("--index", required=True)
    p.add_argument("--query", type=int, required=True)
    p.add_argument("--stream", choices=list(analysis.STREAMS), default="joint")
    p.add_argument("--k", type=int, default=5)
    _add_common(p)

    p = subs.add_parser("probe", help="train a probe head on frozen embeddings")
    p.add_argument("--index", required=True)
    p.add_argument("--stream", choices=list(analysis.STREAMS), default="joint")
    p.add_argument("--target", required=True,
                   choices=sorted(analysis.CLASSIFICATION_TARGETS | analysis.REGRESSION_TARGETS))
    p.add_argument("--head", choices=["linear", "mlp"], default="linear")
    p.add_argument("--steps", type=int, default=3000)
    _add_common(p)

    p = subs.add_parser("verify", help="run a numerical verification suite")
    p.add_argument("--suite", choices=["theory"], default="theory")
    p.add_argument("--rank-trials", type=int, default=20)
    _add_common(p)

    p = subs.add_parser("report", help="summarize CSV logs / checkpoint metrics")
    p.add_argument("--log", default=None)
    p.add_argument("--checkpoint", default=None)
    _add_common(p)
    return parser


def _echo(cfg: RunConfig) -> None:
    print("effective config:")
    print(echo_config(cfg))


def _model_from_checkpoint(path) -> tuple:
    ck = trainer.load_checkpoint(path)
    model_cfg = model_config_from_dict(ck.model_config)
    return ck, model_cfg


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config, seed_flag=args.seed)
        return _dispatch(args, cfg)
    except (ConfigError, InputError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def _dispatch(args, cfg: RunConfig) -> int:
    command = args.command
    if command == "ingest":
        return _cmd_ingest(args)
    _echo(cfg)
    if command == "pretrain":
        return _cmd_pretrain(args, cfg)
    if command == "finetune":
        return _cmd_finetune(args, cfg)
    if command == "embed":
        return _cmd_embed(args, cfg)
    if command == "retrieve":
        return _cmd_retrieve(args)
    if command == "probe":
        return _cmd_probe(args, cfg)
    if command == "verify":
        return _cmd_verify(args, cfg)
    if command == "report":
        return _cmd_report(args)
    raise ValueError(f"unknown command {command!r}")


def _cmd_ingest(args) -> int:
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = args.split if len(args.split) > 1 else args.split * len(args.input)
    if len(splits) != len(args.input):
        raise InputError("--split must give one name per input (or a single name)")
    files = {}
    for path, split in zip(args.input, splits):
        structures = structdata.read_dataset(path)
        name = Path(path).stem + ".xyz"
        structdata.write_dataset(structures, out_dir / name)
        files[name] = split
        print(f"ingested {len(structures)} structures from {path} -> {name} [{split}]")
    structdata.write_manifest(out_dir / "manifest.json", files)
    print(f"wrote {out_dir / 'manifest.json'}")
    return 0


def _cmd_pretrain(args, cfg: RunConfig) -> int:
    data = _load_structures(args.data, args.split)
    opt = cfg.pretrain
    if args.steps is not None:
        opt.steps = args.steps
    out = args.out or "pretrained.npz"
    trainer.pretrain(data, cfg.model, cfg.augment, cfg.ssl_weights, opt, cfg.seed,
                     checkpoint_path=out, log_path=args.log, n_workers=args.workers)
    print(f"pretrained {opt.steps} steps on {len(data)} structures -> {out}")
    return 0


def _cmd_finetune(args, cfg: RunConfig) -> int:
    train = _load_structures(args.data, args.train_split if args.data.endswith(".json") else None)
    val = None
    if args.val_split is not None:
        val = _load_structures(args.data, args.val_split)
    opt = cfg.finetune
    if args.steps is not None:
        opt.steps = args.steps
    store = None
    model_cfg = cfg.model
    if args.init is not None:
        ck, model_cfg = _model_from_checkpoint(args.init)
        store = ck.store
    out = args.out or "finetuned.npz"
    _, metrics, _ = trainer.finetune(train, model_cfg, opt, args.mode, cfg.seed,
                                     store=store, val=val, checkpoint_path=out,
                                     log_path=args.log)
    print(f"finetuned ({args.mode}) {opt.steps} steps -> {out}")
    print(f"energy MAE: {metrics['energy_mae_mev_per_atom']:.3f} meV/atom | "
          f"force MAE: {metrics['force_mae_mev_per_angstrom']:.3f} meV/A")
    return 0


def _cmd_embed(args, cfg: RunConfig) -> int:
    ck, model_cfg = _model_from_checkpoint(args.checkpoint)
    data = _load_structures(args.data, args.split)
    index = analysis.embed_dataset(ck.store, model_cfg, data)
    out = args.out or "index.npz"
    analysis.save_index(out, index)
    print(f"embedded {index.n_records} structures -> {out}")
    return 0


def _cmd_retrieve(args) -> int:
    index = analysis.load_index(args.index)
    results = analysis.knn_retrieve(index, args.query, args.stream, args.k)
    q = index.labels[args.query]
    print(f"query {args.query}: elements={q['element_set']} space_group={q['space_group']}")
    print(f"{'rank':>4} {'id':>6} {'score':>9}  {'elements':<20} {'space_group':>11}")
    for rank, (rid, score) in enumerate(results, start=1):
        rec = index.labels[rid]
        print(f"{rank:>4} {rid:>6} {score:>9.4f}  {str(rec['element_set']):<20} "
              f"{str(rec['space_group']):>11}")
    return 0


def _cmd_probe(args, cfg: RunConfig) -> int:
    index = analysis.load_index(args.index)
    result = analysis.probe(index, args.stream, args.target, head=args.head,
                            seed=cfg.seed, steps=args.steps)
    print(f"probe[{args.head}] {args.stream} -> {args.target}: "
          f"{result.metric}={result.value:.4f} (baseline {result.baseline:.4f}, "
          f"train {result.n_train} / test {result.n_test})")
    for note in result.warnings:
        print(f"note: {note}")
    return 0


def _cmd_verify(args, cfg: RunConfig) -> int:
    records = theory.run_theory_suite(seed=cfg.seed, n_rank_trials=args.rank_trials)
    docs = [r.to_json() for r in records]
    if args.out:
        Path(args.out).write_text(json.dumps(docs, indent=2) + "\n")
    failed = 0
    for r in records:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        thr = "-" if r.threshold is None else f"{r.threshold:g}"
        print(f"[{status}] {r.name:35} value={r.value:.3e} threshold={thr}")
    print(f"{len(records) - failed}/{len(records)} checks passed")
    return 1 if failed else 0


def _cmd_report(args) -> int:
    import csv

    if args.log is None and args.checkpoint is None:
        raise InputError("report needs --log or --checkpoint")
    if args.log is not None:
        with open(args.log, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            print("empty log")
            return 0
        def numeric(value):
            try:
                float(value)
                return True
            except ValueError:
                return False

        keys = [k for k in rows[0] if k != "step" and numeric(rows[0][k])]
        print(f"{'':10}" + "".join(f"{k:>16}" for k in keys))
        for tag, row in (("first", rows[0]), ("last", rows[-1])):
            print(f"{tag:10}" + "".join(f"{float(row[k]):>16.6g}" for k in keys))
    if args.checkpoint is not None:
        ck = trainer.load_checkpoint(args.checkpoint)
        metrics = ck.meta.get("extra", {}).get("metrics")
        if metrics:
            print(f"{'metric':<32}{'value':>12}")
            print(f"{'energy MAE (meV/atom)':<32}{metrics['energy_mae_mev_per_atom']:>12.3f}")
            print(f"{'force MAE (meV/A)':<32}{metrics['force_mae_mev_per_angstrom']:>12.3f}")
        else:
            print(f"checkpoint at step {ck.step} (seed {ck.seed}); no stored metrics")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
