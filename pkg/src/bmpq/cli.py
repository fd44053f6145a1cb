"""Command-line front end: train, allocate, report, export, eval.

Every failure exits nonzero and writes one JSON object to stderr::

    {"error": "InfeasibleError", "message": "...", "min_cost": 1234}
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import allocator
from .data import load_dataset
from .errors import BMPQError, ContractError
from .models import ModelSpec, assignment_from_vector, build_model
from .packing import export_network, import_network, load_packed, save_packed
from .published import reproduce
from .storage import compression_ratios, mb_to_bits, storage_bmpq, storage_fp32, storage_table
from .training import TrainConfig, Trainer, export_checkpoint

EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(BMPQError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def _add_budget(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--budget-bits", type=int, help="weight-storage budget in bits")
    g.add_argument("--budget-mb", type=float, help="weight-storage budget in MB (2**20 bytes)")


def _budget_override(args) -> Optional[int]:
    if args.budget_bits is not None:
        return args.budget_bits
    if args.budget_mb is not None:
        return mb_to_bits(args.budget_mb)
    return None


# ---------------------------------------------------------------- train


def load_run_config(path) -> dict:
    """Read a run config: model, dataset, optional subsets and training settings."""
    cfg = json.loads(Path(path).read_text())
    unknown = set(cfg) - {"model", "model_args", "dataset", "train_subset", "test_subset",
                          "training"}
    if unknown:
        raise ContractError(f"unknown run config keys: {sorted(unknown)}")
    return cfg


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    training = dict(cfg.get("training", {}))
    budget = _budget_override(args)
    if budget is not None:
        training["budget_bits"], training["budget_mb"] = budget, None
    if args.seed is not None:
        training["seed"] = args.seed
    config = TrainConfig.from_dict(training)
    spec = build_model(cfg.get("model", "desk_cnn"), **cfg.get("model_args", {}))
    dataset = cfg.get("dataset", "mnist")
    train = load_dataset(dataset, args.dataset_root, "train")
    test = load_dataset(dataset, args.dataset_root, "test")
    if cfg.get("train_subset"):
        train = train.subset(cfg["train_subset"])
    if cfg.get("test_subset"):
        test = test.subset(cfg["test_subset"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = Trainer.checkpoint_load(args.resume, train, test)
    else:
        trainer = Trainer(spec, config, train, test)
    trainer.fit()
    trainer.checkpoint_save(out / "checkpoint.npz")
    trainer.write_history_json(out / "history.json")
    metrics = Path(args.metrics_csv) if args.metrics_csv else out / "metrics.csv"
    trainer.write_metrics_csv(metrics)
    save_packed(out / "model.bmpq", export_network(trainer.network, trainer.packed_metadata()))
    last = trainer.history.metrics[-1]
    _emit({"epochs": trainer.epoch, "test_accuracy": last.get("test_accuracy"),
           "bits": trainer.network.bits, "out": str(out)})
    return 0


# ---------------------------------------------------------------- allocate


def cmd_allocate(args) -> int:
    doc = json.loads(Path(args.instance).read_text())
    budget = _budget_override(args)
    if budget is not None:
        doc["budget_bits"] = budget
    instance = allocator.ILPInstance.from_dict(doc)
    solve = allocator.solve_bruteforce if args.solver == "bruteforce" else allocator.solve_exact
    result = solve(instance)
    doc = {"bits": result.bits, "objective": result.objective, "cost_bits": result.cost,
           "budget_bits": instance.budget,
           "groups": {g.id: result.bits[g.members[0]] for g in instance.groups}}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True))
    _emit(doc)
    return 0


# ---------------------------------------------------------------- report


def _storage_report(spec: ModelSpec, bits: dict) -> dict:
    r32, r16 = compression_ratios(spec, bits)
    return {
        "model": spec.name,
        "variant": spec.variant,
        "layers": storage_table(spec, bits),
        "storage_fp32_mb": storage_fp32(spec),
        "storage_mixed_mb": storage_bmpq(spec, bits),
        "r32": r32,
        "r16": r16,
    }


def _format_report(rep: dict) -> str:
    lines = [f"model {rep['model']} ({rep['variant']})"]
    enbg = rep.get("enbg") or {}
    lines.append(f"{'layer':<28}{'params':>10}{'q':>4}{'MB':>12}{'MB fp32':>12}  enbg")
    for row in rep["layers"]:
        tag = " fixed" if row["fixed"] else (f" tied->{row['tied_to']}" if row["tied_to"] else "")
        score = enbg.get(row["layer"])
        lines.append(f"{row['layer']:<28}{row['params']:>10}{row['bits']:>4}{row['mb']:>12.6f}"
                     f"{row['mb_fp32']:>12.6f}  {'-' if score is None else f'{score:.6g}'}{tag}")
    lines.append(f"storage fp32 {rep['storage_fp32_mb']:.6f} MB, "
                 f"mixed {rep['storage_mixed_mb']:.6f} MB")
    lines.append(f"r32 {rep['r32']:.4f}  r16 {rep['r16']:.4f}")
    return "\n".join(lines)


def _format_published(rows: List[dict]) -> str:
    lines = [f"{'dataset':<15}{'model':<10}{'variant':<28}{'reported':>9}{'r32':>9}{'r16':>9}"]
    for r in rows:
        lines.append(f"{r['dataset']:<15}{r['model']:<10}{r['variant']:<28}"
                     f"{r['reported_r32']:>9.2f}{r['r32']:>9.3f}{r['r16']:>9.3f}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    if args.published:
        rows = reproduce(args.head)
        print(json.dumps(rows, indent=1, sort_keys=True) if args.json else _format_published(rows))
        return 0
    if args.model:
        packed = load_packed(args.model)
        spec = ModelSpec.from_dict(packed.metadata["spec"])
        bits = {name: qt.bits for name, qt in packed.layers.items()}
        rep = _storage_report(spec, bits)
        snapshots = packed.metadata.get("enbg", [])
        rep["enbg"] = snapshots[-1]["enbg"] if snapshots else {}
        rep["enbg_history"] = snapshots
        rep["assignments"] = packed.metadata.get("assignments", [])
    elif args.spec_model:
        kwargs = json.loads(args.model_args) if args.model_args else {}
        spec = build_model(args.spec_model, **kwargs)
        if not args.bits:
            raise UsageError("--spec-model needs --bits")
        rep = _storage_report(spec, assignment_from_vector(
            spec, [int(b) for b in args.bits.split(",")]))
    else:
        raise UsageError("report needs --model, --spec-model or --published")
    print(json.dumps(rep, indent=1, sort_keys=True) if args.json else _format_report(rep))
    return 0


# ---------------------------------------------------------------- export / eval


def cmd_export(args) -> int:
    packed = export_checkpoint(args.checkpoint)
    out = Path(args.out)
    if out.suffix != ".bmpq":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "model.bmpq"
    save_packed(out, packed)
    _emit({"out": str(out), "bits": {k: qt.bits for k, qt in packed.layers.items()},
           "bytes": out.stat().st_size})
    return 0


def cmd_eval(args) -> int:
    packed = load_packed(args.model)
    net, frozen = import_network(packed)
    data = load_dataset(args.dataset, args.dataset_root, args.split)
    if args.subset:
        data = data.subset(args.subset)
    norm = packed.metadata.get("normalization")
    data = data.with_stats(norm["mean"], norm["std"]) if norm else data.with_stats()
    acc = net.accuracy(data.to_float(), data.labels, frozen=frozen)
    _emit({"accuracy": acc, "samples": len(data), "split": args.split, "dataset": args.dataset})
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bmpq", description="Bit-gradient-driven mixed-precision training tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--dataset-root", help="dataset directory (default: $BMPQ_DATA_ROOT)")
    _add_budget(t)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="bmpq-run")
    t.add_argument("--metrics-csv")
    t.add_argument("--resume", help="continue from a checkpoint file")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("allocate", help="solve a bit-allocation instance given as JSON")
    a.add_argument("instance")
    _add_budget(a)
    a.add_argument("--solver", choices=["exact", "bruteforce"], default="exact")
    a.add_argument("--out")
    a.set_defaults(func=cmd_allocate)

    r = sub.add_parser("report", help="per-layer widths, sensitivities and storage")
    r.add_argument("--model", help="packed model file")
    r.add_argument("--spec-model", choices=["vgg16", "resnet18", "desk_cnn"])
    r.add_argument("--model-args", help="JSON keyword arguments for --spec-model")
    r.add_argument("--bits", help="comma-separated widths of the listed layers")
    r.add_argument("--published", action="store_true",
                   help="recompute the compression ratios of the published assignments")
    r.add_argument("--head", choices=["compact", "full"], default="compact")
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_report)

    e = sub.add_parser("export", help="write a packed model from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_export)

    v = sub.add_parser("eval", help="quantized inference accuracy of a packed model")
    v.add_argument("--model", required=True)
    v.add_argument("--dataset", default="mnist", choices=["mnist", "cifar10", "cifar100", "tiny-imagenet"])
    v.add_argument("--dataset-root")
    v.add_argument("--split", default="test", choices=["train", "test"])
    v.add_argument("--subset", type=int)
    v.set_defaults(func=cmd_eval)
    return p


def _error_doc(exc: BaseException) -> dict:
    doc = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("min_cost", "offset"):
        if getattr(exc, attr, None) is not None:
            doc[attr] = getattr(exc, attr)
    return doc


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(json.dumps(_error_doc(exc), sort_keys=True), file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # every failure becomes a JSON error record
        print(json.dumps(_error_doc(exc), sort_keys=True), file=sys.stderr)
        return EXIT_FAILURE
