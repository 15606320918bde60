"""Command-line entry point: pretrain, finetune, eval, gen-data, inspect.

Metric logs are written twice, as a CSV (fixed columns
``cycle,epoch,dataset,task,mode,metric,value``) and a JSONL twin, one row
per record, appended and flushed as training emits them.  The output
directory from the config can be overridden with ``CYCLICTRAIN_OUT_DIR``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import engine, synthdata
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_hash, load_run_config
from .engine import finetune, run_pretraining
from .metrics import MetricsRecord
from .model import build_model

CSV_HEADER = "cycle,epoch,dataset,task,mode,metric,value"


class MetricsWriter:
    """Append-only CSV + JSONL logs, flushed per row."""

    def __init__(self, directory: str, basename: str = "metrics"):
        os.makedirs(directory, exist_ok=True)
        self.csv_path = os.path.join(directory, f"{basename}.csv")
        self.jsonl_path = os.path.join(directory, f"{basename}.jsonl")
        self._csv = open(self.csv_path, "w", encoding="utf-8")
        self._jsonl = open(self.jsonl_path, "w", encoding="utf-8")
        self._csv.write(CSV_HEADER + "\n")
        self._csv.flush()

    def write(self, r: MetricsRecord) -> None:
        self._csv.write(
            f"{r.cycle},{r.epoch},{r.dataset_id},{r.task},{r.mode},"
            f"{r.metric_name},{r.value!r}\n"
        )
        self._csv.flush()
        self._jsonl.write(
            json.dumps(
                {
                    "cycle": r.cycle,
                    "epoch": r.epoch,
                    "dataset": r.dataset_id,
                    "task": r.task,
                    "mode": r.mode,
                    "metric": r.metric_name,
                    "value": r.value,
                },
                sort_keys=True,
            )
            + "\n"
        )
        self._jsonl.flush()

    def close(self) -> None:
        self._csv.close()
        self._jsonl.close()


def _resolve_out_dir(cfg: RunConfig) -> str:
    return os.environ.get("CYCLICTRAIN_OUT_DIR", cfg.out_dir)


def _build_from_config(cfg: RunConfig):
    specs = [s.model_spec() for s in cfg.datasets]
    return build_model(cfg.arch, specs)


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    out_dir = _resolve_out_dir(cfg)
    chash = config_hash(cfg)
    model = _build_from_config(cfg)
    writer = MetricsWriter(out_dir)
    ckpt_root = os.path.join(out_dir, "checkpoints")

    def on_cycle_end(cycle, model, teacher, optimizer):
        save_checkpoint(
            os.path.join(ckpt_root, f"cycle_{cycle + 1:03d}"),
            model,
            teacher=teacher,
            optimizer=optimizer,
            counters={"cycle": cycle + 1, "epoch": 0},
            config_hash=chash,
        )

    try:
        result = run_pretraining(
            model,
            cfg.datasets,
            cfg.train,
            on_record=writer.write,
            on_cycle_end=on_cycle_end,
        )
    finally:
        writer.close()
    save_checkpoint(
        os.path.join(ckpt_root, "final"),
        result.model,
        teacher=result.teacher,
        counters={"cycle": result.cycles_run, "epoch": result.epochs_run},
        config_hash=chash,
    )
    save_checkpoint(
        os.path.join(out_dir, "teacher_export"),
        result.model,
        teacher=result.teacher,
        counters={"cycle": result.cycles_run, "epoch": result.epochs_run},
        config_hash=chash,
        weights=engine.export_teacher(result.model, result.teacher),
        weights_kind="teacher_export",
    )
    print(
        f"pretrained {result.cycles_run} cycle(s), {result.epochs_run} epoch(s); "
        f"{len(result.records)} metric rows -> {writer.csv_path}"
    )
    return 0


def _load_model_from_checkpoint(cfg: RunConfig, checkpoint_path: str, allow_new: set[str] | None = None):
    cp = load_checkpoint(checkpoint_path)
    chash = config_hash(cfg)
    if cp.config_hash and cp.config_hash != chash:
        print(
            f"warning: checkpoint config hash {cp.config_hash[:12]} != "
            f"config {chash[:12]}",
            file=sys.stderr,
        )
    model = _build_from_config(cfg)
    missing = {n for n in model.graph.names() if n not in cp.arrays}
    if missing and allow_new is None:
        raise CheckpointError(
            f"checkpoint lacks parameters for {sorted(missing)[:4]}..."
            if len(missing) > 4
            else f"checkpoint lacks parameters for {sorted(missing)}"
        )
    model.graph.load_arrays(cp.arrays, allow_missing=allow_new)
    return model, cp


def cmd_finetune(args) -> int:
    cfg = load_run_config(args.config)
    if cfg.finetune is None:
        raise ConfigError("finetune: section missing from config")
    out_dir = os.path.join(_resolve_out_dir(cfg), "finetune")
    mode = args.mode if args.mode is not None else cfg.finetune.mode
    mode = mode.replace("-", "_")
    few_shot = args.few_shot if args.few_shot is not None else cfg.finetune.few_shot
    target = cfg.finetune.dataset

    cp = load_checkpoint(args.checkpoint)
    model = _build_from_config(cfg)
    new_dataset = target.dataset_id not in model.datasets
    if new_dataset:
        if not args.init_new_head:
            print(
                f"error: dataset '{target.dataset_id}' has no head in the "
                "checkpointed model; pass --init-new-head to create one",
                file=sys.stderr,
            )
            return 2
        model.add_dataset(
            target.model_spec(),
            seed=synthdata.derive_seed(cfg.train.seed, "new_head", target.dataset_id),
        )
        new_names = {
            p.name
            for p in model.graph.parameters()
            if p.name not in cp.arrays
        }
        model.graph.load_arrays(cp.arrays, allow_missing=new_names)
    else:
        model.graph.load_arrays(cp.arrays)
    chash = config_hash(cfg)
    if cp.config_hash and cp.config_hash != chash:
        print(
            f"warning: checkpoint config hash {cp.config_hash[:12]} != "
            f"config {chash[:12]}",
            file=sys.stderr,
        )

    writer = MetricsWriter(out_dir)
    try:
        result = finetune(
            model,
            target,
            cfg.train,
            mode=mode,
            few_shot_k=few_shot,
            epochs=cfg.finetune.epochs,
            init_new_head=False if not new_dataset else True,
        )
        for r in result.records:
            writer.write(r)
    finally:
        writer.close()
    save_checkpoint(
        os.path.join(out_dir, "checkpoint"),
        result.model,
        counters={"cycle": 0, "epoch": cfg.finetune.epochs},
        config_hash=chash,
    )
    summary = {
        "mode": mode,
        "dataset": target.dataset_id,
        "train_size": result.train_size,
        "trainable_params": result.trainable_params,
        "total_params": result.total_params,
        "trainable_fraction": result.trainable_fraction,
    }
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(
        f"finetuned '{target.dataset_id}' ({mode}); train size {result.train_size}; "
        f"trainable {result.trainable_params}/{result.total_params} "
        f"({result.trainable_fraction:.4f})"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    model, cp = _load_model_from_checkpoint(cfg, args.checkpoint)
    spec = next((s for s in cfg.datasets if s.dataset_id == args.dataset), None)
    if spec is None and cfg.finetune is not None \
            and cfg.finetune.dataset.dataset_id == args.dataset:
        spec = cfg.finetune.dataset
    if spec is None:
        print(f"error: dataset '{args.dataset}' not in config", file=sys.stderr)
        return 2
    if spec.dataset_id not in model.datasets:
        print(f"error: model has no heads for '{args.dataset}'", file=sys.stderr)
        return 2
    bundles = engine.prepare_bundles([spec], cfg.train)
    bundle = bundles[spec.dataset_id]
    weights = None
    if args.weights == "teacher":
        if cp.teacher_arrays is None:
            print("error: checkpoint holds no teacher weights", file=sys.stderr)
            return 2
        weights = model.merged_weights(cp.teacher_arrays)
    dump = {"dataset": spec.dataset_id, "weights": args.weights, "tasks": {}}
    for task, metric_name, value in engine.evaluate_dataset(model, bundle, weights):
        print(f"{spec.dataset_id} {task} {metric_name}: "
              f"{'undefined' if value is None else f'{value:.6f}'}")
        dump["tasks"][task] = {"metric": metric_name, "value": value}
    if args.dump_predictions:
        _dump_predictions(model, bundle, weights, args.dump_predictions)
        print(f"predictions dumped to {args.dump_predictions}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(dump, f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


def _dump_predictions(model, bundle, weights, directory) -> None:
    """Raw per-task predictions on the test split, for offline rescoring."""
    os.makedirs(directory, exist_ok=True)
    spec = bundle.spec
    samples = bundle.test
    x = np.stack([s.image for s in samples])[:, None, :, :]
    payload: dict[str, np.ndarray] = {
        "sample_ids": np.asarray([s.sample_id for s in samples], dtype="<i8")
    }
    if "cls" in spec.tasks:
        logits = model.forward_cls(x, spec.dataset_id, weights)
        payload["cls_scores"] = 1.0 / (1.0 + np.exp(-logits.data))
        payload["cls_labels"] = np.stack([s.labels for s in samples]).astype("<i8")
    if "loc" in spec.tasks:
        boxes, logits = model.forward_loc(x, spec.dataset_id, weights)
        payload["loc_boxes"] = boxes.data
        payload["loc_logits"] = logits.data
        payload["gt_box_counts"] = np.asarray([len(s.boxes) for s in samples], dtype="<i8")
        payload["gt_boxes"] = (
            np.concatenate([s.boxes.boxes for s in samples])
            if any(len(s.boxes) for s in samples)
            else np.zeros((0, 4))
        )
        payload["gt_box_classes"] = np.concatenate(
            [s.boxes.class_ids for s in samples]
        ).astype("<i8") if any(len(s.boxes) for s in samples) else np.zeros(0, dtype="<i8")
    if "seg" in spec.tasks:
        logits = model.forward_seg(x, spec.dataset_id, weights)
        payload["seg_logits"] = logits.data
        payload["seg_masks"] = np.stack([s.mask for s in samples]).astype("<i8")
    np.savez(os.path.join(directory, "predictions.npz"), **payload)


def cmd_inspect(args) -> int:
    cp = load_checkpoint(args.checkpoint)
    by_component: dict[str, int] = {}
    for name, arr in cp.arrays.items():
        comp = cp.components.get(name, "?")
        by_component[comp] = by_component.get(comp, 0) + arr.size
    total = sum(by_component.values())
    width = max(len(c) for c in by_component)
    print(f"checkpoint: {args.checkpoint}")
    print(f"weights kind: {cp.weights_kind}")
    print(f"counters: cycle={cp.counters.get('cycle', 0)} epoch={cp.counters.get('epoch', 0)}")
    if cp.config_hash:
        print(f"config hash: {cp.config_hash}")
    print(f"{'component'.ljust(width)}  parameters")
    for comp in sorted(by_component):
        print(f"{comp.ljust(width)}  {by_component[comp]}")
    print(f"{'total'.ljust(width)}  {total}")
    if cp.teacher_arrays is not None:
        print(f"teacher: {sum(a.size for a in cp.teacher_arrays.values())} "
              f"parameters, momentum {cp.teacher_momentum}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    out_dir = os.path.join(_resolve_out_dir(cfg), "data")
    specs = list(cfg.datasets)
    if cfg.finetune is not None:
        specs.append(cfg.finetune.dataset)
    for spec in specs:
        samples = synthdata.generate_dataset(spec)
        target = os.path.join(out_dir, spec.dataset_id)
        synthdata.save_dataset(target, spec, samples)
        print(f"{spec.dataset_id}: {len(samples)} samples -> {target}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cyclictrain",
        description="Cyclic multi-task pretraining with lock/release scheduling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run the cyclic pretraining schedule")
    p.add_argument("--config", required=True, help="path to a JSON run config")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="finetune from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=["full", "head-only", "head_only"])
    p.add_argument("--few-shot", type=int, dest="few_shot")
    p.add_argument("--init-new-head", action="store_true",
                   help="create heads for a dataset absent from the checkpoint")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--weights", choices=["student", "teacher"], default="student")
    p.add_argument("--dump-predictions", dest="dump_predictions",
                   help="directory for raw prediction arrays")
    p.add_argument("--out", help="write metric values to this JSON file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-data", help="generate and persist the config's datasets")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("inspect", help="print a checkpoint's component table")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
