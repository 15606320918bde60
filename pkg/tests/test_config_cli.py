import json

import numpy as np
import pytest

from cyclictrain import cli
from cyclictrain.config import (
    ConfigError,
    config_hash,
    load_run_config,
    run_config_from_dict,
)
from cyclictrain.metrics import auc, dice, map_at_iou, Detection, GroundTruth


def _base_config(out_dir, **train):
    train_section = {"num_cycles": 1, "batch_size": 8, "seed": 5}
    train_section.update(train)
    return {
        "out_dir": out_dir,
        "arch": {
            "image_size": 16,
            "stage_channels": [6, 10, 16],
            "loc_channels": 12,
            "query_dim": 8,
            "loc_grid": 4,
            "seg_channels": [6, 4],
        },
        "train": train_section,
        "datasets": [
            {
                "dataset_id": "boxesmasks",
                "num_images": 20,
                "tasks": ["cls", "loc", "seg"],
                "image_size": 16,
                "min_instances": 1,
                "max_instances": 1,
                "seed": 11,
            },
            {
                "dataset_id": "labels",
                "num_images": 20,
                "tasks": ["cls"],
                "image_size": 16,
                "seed": 12,
            },
        ],
    }


def _write(tmp_path, cfg, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg, indent=1))
    return str(path)


# ---------------------------------------------------------------------------
# config parsing


def test_config_parses_and_normalizes(tmp_path):
    cfg = load_run_config(_write(tmp_path, _base_config(str(tmp_path / "out"))))
    assert cfg.train.num_cycles == 1
    assert cfg.train.lr_backbone == 1e-5  # default materialized
    assert cfg.arch.stage_channels == (6, 10, 16)
    assert len(cfg.datasets) == 2


def test_unknown_keys_fatal_with_path(tmp_path):
    bad = _base_config(str(tmp_path))
    bad["train"]["lr_bogus"] = 1.0
    with pytest.raises(ConfigError, match="train.lr_bogus"):
        load_run_config(_write(tmp_path, bad))
    bad = _base_config(str(tmp_path))
    bad["datasets"][0]["surprise"] = 1
    with pytest.raises(ConfigError, match=r"datasets\[0\].surprise"):
        load_run_config(_write(tmp_path, bad))


def test_json_errors_report_line_and_column(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "out_dir": "x",\n  badly\n}')
    with pytest.raises(ConfigError, match="line 3"):
        load_run_config(str(path))


def test_type_errors_report_field(tmp_path):
    bad = _base_config(str(tmp_path))
    bad["train"]["batch_size"] = "many"
    with pytest.raises(ConfigError, match="train.batch_size"):
        load_run_config(_write(tmp_path, bad))


def test_duplicate_dataset_ids_rejected():
    cfg = _base_config("out")
    cfg["datasets"][1]["dataset_id"] = "boxesmasks"
    with pytest.raises(ConfigError, match="duplicate"):
        run_config_from_dict(cfg)


def test_config_hash_stable_and_out_dir_independent():
    a = run_config_from_dict(_base_config("out1"))
    b = run_config_from_dict(_base_config("out2"))
    assert config_hash(a) == config_hash(b)
    c = run_config_from_dict(_base_config("out1", seed=6))
    assert config_hash(a) != config_hash(c)


# ---------------------------------------------------------------------------
# pretrain command


def test_cmd_pretrain_writes_logs_and_checkpoints(tmp_path):
    out = tmp_path / "out"
    path = _write(tmp_path, _base_config(str(out)))
    assert cli.main(["pretrain", "--config", path]) == 0
    csv = (out / "metrics.csv").read_text().splitlines()
    assert csv[0] == "cycle,epoch,dataset,task,mode,metric,value"
    assert len(csv) > 1
    for row in csv[1:]:
        cells = row.split(",")
        assert cells[4] == "release"  # eval rows only after release epochs
    jsonl = (out / "metrics.jsonl").read_text().splitlines()
    assert len(jsonl) == len(csv) - 1
    assert (out / "checkpoints" / "cycle_001" / "manifest.json").exists()
    assert (out / "checkpoints" / "final" / "manifest.json").exists()
    assert (out / "teacher_export" / "manifest.json").exists()


def test_cmd_pretrain_organ_schedule_logs_release_rows_only(tmp_path):
    out = tmp_path / "out"
    cfg = {
        "out_dir": str(out),
        "arch": {
            "image_size": 16,
            "stage_channels": [6, 10, 16],
            "loc_channels": 12,
            "query_dim": 8,
            "loc_grid": 4,
            "seg_channels": [6, 4],
        },
        "train": {"num_cycles": 1, "batch_size": 8, "seed": 3},
        "datasets": [
            {
                "dataset_id": "organs",
                "num_images": 48,
                "tasks": ["loc", "seg"],
                "image_size": 16,
                "min_instances": 1,
                "max_instances": 1,
                "subtasks": ["ellipse", "rectangle", "ring"],
                "round_robin_classes": True,
                "seed": 17,
            }
        ],
    }
    assert cli.main(["pretrain", "--config", _write(tmp_path, cfg, "organ.json")]) == 0
    rows = (out / "metrics.csv").read_text().splitlines()[1:]
    # 12 scheduled epochs; an evaluation row after each of the 6 release epochs
    assert len(rows) == 6
    epochs = [int(r.split(",")[1]) for r in rows]
    assert epochs == [2, 4, 6, 8, 10, 12]
    assert all(r.split(",")[4] == "release" for r in rows)


def test_cmd_pretrain_zero_cycles_header_only(tmp_path):
    out = tmp_path / "out"
    cfg = _base_config(str(out), num_cycles=0)
    assert cli.main(["pretrain", "--config", _write(tmp_path, cfg)]) == 0
    assert (out / "metrics.csv").read_text() == "cycle,epoch,dataset,task,mode,metric,value\n"


def test_cmd_pretrain_byte_identical_across_runs(tmp_path):
    cfg1 = _base_config(str(tmp_path / "o1"))
    cfg2 = _base_config(str(tmp_path / "o2"))
    assert cli.main(["pretrain", "--config", _write(tmp_path, cfg1, "c1.json")]) == 0
    assert cli.main(["pretrain", "--config", _write(tmp_path, cfg2, "c2.json")]) == 0
    assert (tmp_path / "o1" / "metrics.csv").read_bytes() == (tmp_path / "o2" / "metrics.csv").read_bytes()
    for blob in ("student.bin", "teacher.bin"):
        a = (tmp_path / "o1" / "checkpoints" / "final" / blob).read_bytes()
        b = (tmp_path / "o2" / "checkpoints" / "final" / blob).read_bytes()
        assert a == b


def test_invalid_config_exits_nonzero(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"out_dir": 3}')
    assert cli.main(["pretrain", "--config", str(path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_out_dir_env_override(tmp_path, monkeypatch):
    override = tmp_path / "elsewhere"
    monkeypatch.setenv("CYCLICTRAIN_OUT_DIR", str(override))
    cfg = _base_config(str(tmp_path / "ignored"), num_cycles=0)
    assert cli.main(["pretrain", "--config", _write(tmp_path, cfg)]) == 0
    assert (override / "metrics.csv").exists()
    assert not (tmp_path / "ignored").exists()


# ---------------------------------------------------------------------------
# finetune command


def _pretrained(tmp_path, extra=None):
    out = tmp_path / "out"
    cfg = _base_config(str(out))
    if extra:
        cfg.update(extra)
    path = _write(tmp_path, cfg)
    assert cli.main(["pretrain", "--config", path]) == 0
    return out, cfg


def test_cmd_finetune_head_only_new_dataset(tmp_path):
    out, cfg = _pretrained(tmp_path)
    cfg["finetune"] = {
        "dataset": {
            "dataset_id": "fresh",
            "num_images": 16,
            "tasks": ["loc"],
            "image_size": 16,
            "min_instances": 1,
            "max_instances": 1,
            "seed": 21,
        },
        "mode": "head_only",
        "epochs": 1,
    }
    path = _write(tmp_path, cfg, "ft.json")
    ckpt = str(out / "checkpoints" / "final")
    rc = cli.main(["finetune", "--checkpoint", ckpt, "--config", path,
                   "--mode", "head-only", "--init-new-head"])
    assert rc == 0
    summary = json.loads((out / "finetune" / "summary.json").read_text())
    assert summary["mode"] == "head_only"
    assert summary["trainable_fraction"] < 0.2
    assert summary["trainable_params"] > 0
    assert summary["train_size"] == 11  # floor(0.7 * 16)


def test_cmd_finetune_missing_head_without_flag_fails(tmp_path):
    out, cfg = _pretrained(tmp_path)
    cfg["finetune"] = {
        "dataset": {
            "dataset_id": "fresh",
            "num_images": 16,
            "tasks": ["loc"],
            "image_size": 16,
            "min_instances": 1,
            "max_instances": 1,
            "seed": 21,
        },
        "mode": "head_only",
        "epochs": 1,
    }
    path = _write(tmp_path, cfg, "ft.json")
    ckpt = str(out / "checkpoints" / "final")
    assert cli.main(["finetune", "--checkpoint", ckpt, "--config", path]) == 2


def test_cmd_finetune_few_shot_records_train_size(tmp_path):
    out, cfg = _pretrained(tmp_path)
    cfg["finetune"] = {
        "dataset": {
            "dataset_id": "boxesmasks",
            "num_images": 20,
            "tasks": ["cls", "loc", "seg"],
            "image_size": 16,
            "min_instances": 1,
            "max_instances": 1,
            "seed": 11,
        },
        "mode": "full",
        "epochs": 1,
    }
    path = _write(tmp_path, cfg, "ft.json")
    ckpt = str(out / "checkpoints" / "final")
    assert cli.main(["finetune", "--checkpoint", ckpt, "--config", path,
                     "--few-shot", "3"]) == 0
    summary = json.loads((out / "finetune" / "summary.json").read_text())
    assert summary["train_size"] == 3
    assert summary["mode"] == "full"


# ---------------------------------------------------------------------------
# eval command


def test_cmd_eval_teacher_equals_student_at_init(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = _base_config(str(out), num_cycles=0)
    path = _write(tmp_path, cfg)
    assert cli.main(["pretrain", "--config", path]) == 0
    ckpt = str(out / "checkpoints" / "final")

    assert cli.main(["eval", "--checkpoint", ckpt, "--config", path,
                     "--dataset", "boxesmasks", "--weights", "student",
                     "--out", str(tmp_path / "s.json")]) == 0
    assert cli.main(["eval", "--checkpoint", ckpt, "--config", path,
                     "--dataset", "boxesmasks", "--weights", "teacher",
                     "--out", str(tmp_path / "t.json")]) == 0
    student = json.loads((tmp_path / "s.json").read_text())
    teacher = json.loads((tmp_path / "t.json").read_text())
    # teacher mirrors only shared components, but at init those equal the
    # student, so every metric coincides
    assert student["tasks"] == teacher["tasks"]


def test_cmd_eval_deterministic(tmp_path):
    out, cfg = _pretrained(tmp_path)
    path = _write(tmp_path, cfg)
    ckpt = str(out / "checkpoints" / "final")
    for name in ("e1.json", "e2.json"):
        assert cli.main(["eval", "--checkpoint", ckpt, "--config", path,
                         "--dataset", "boxesmasks", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "e1.json").read_bytes() == (tmp_path / "e2.json").read_bytes()


def test_cmd_eval_matches_direct_metric_invocation(tmp_path):
    out, cfg = _pretrained(tmp_path)
    path = _write(tmp_path, cfg)
    ckpt = str(out / "checkpoints" / "final")
    dump_dir = tmp_path / "dump"
    assert cli.main(["eval", "--checkpoint", ckpt, "--config", path,
                     "--dataset", "boxesmasks", "--dump-predictions", str(dump_dir),
                     "--out", str(tmp_path / "metrics.json")]) == 0
    reported = json.loads((tmp_path / "metrics.json").read_text())["tasks"]
    data = np.load(dump_dir / "predictions.npz")

    assert abs(auc(data["cls_scores"], data["cls_labels"]) - reported["cls"]["value"]) < 1e-12

    dice_values = []
    pred = data["seg_logits"] > 0.0
    for i in range(pred.shape[0]):
        for c in range(pred.shape[1]):
            dice_values.append(dice(pred[i, c], data["seg_masks"][i, c]))
    assert abs(float(np.mean(dice_values)) - reported["seg"]["value"]) < 1e-12

    boxes, logits = data["loc_boxes"], data["loc_logits"]
    probs = np.exp(logits - logits.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    dets, gts = [], []
    at = 0
    for i, sid in enumerate(data["sample_ids"]):
        for q in range(boxes.shape[1]):
            cp = probs[i, q, :-1]
            c = int(np.argmax(cp))
            dets.append(Detection(int(sid), tuple(boxes[i, q]), c, float(cp[c])))
        for _ in range(int(data["gt_box_counts"][i])):
            gts.append(GroundTruth(int(sid), tuple(data["gt_boxes"][at]),
                                   int(data["gt_box_classes"][at])))
            at += 1
    assert abs(map_at_iou(dets, gts, 0.40) - reported["loc"]["value"]) < 1e-12


def test_cmd_eval_warns_on_config_hash_mismatch(tmp_path, capsys):
    out, cfg = _pretrained(tmp_path)
    ckpt = str(out / "checkpoints" / "final")
    cfg["train"]["seed"] = 99  # different experiment, same shapes
    path = _write(tmp_path, cfg, "drifted.json")
    assert cli.main(["eval", "--checkpoint", ckpt, "--config", path,
                     "--dataset", "boxesmasks"]) == 0
    assert "config hash" in capsys.readouterr().err


def test_cmd_eval_unknown_dataset_fails(tmp_path):
    out, cfg = _pretrained(tmp_path)
    path = _write(tmp_path, cfg)
    ckpt = str(out / "checkpoints" / "final")
    assert cli.main(["eval", "--checkpoint", ckpt, "--config", path,
                     "--dataset", "nope"]) == 2


# ---------------------------------------------------------------------------
# inspect and gen-data


def test_cmd_inspect_counts_sum_and_stable(tmp_path, capsys):
    out, cfg = _pretrained(tmp_path)
    ckpt = str(out / "checkpoints" / "final")
    capsys.readouterr()  # drain the pretrain output
    assert cli.main(["inspect", "--checkpoint", ckpt]) == 0
    first = capsys.readouterr().out
    assert cli.main(["inspect", "--checkpoint", ckpt]) == 0
    second = capsys.readouterr().out
    assert first == second
    lines = [l for l in first.splitlines() if l and not l.startswith(("checkpoint", "weights", "counters", "config", "teacher", "component"))]
    counts = {l.split()[0]: int(l.split()[1]) for l in lines}
    total = counts.pop("total")
    assert sum(counts.values()) == total


def test_cmd_inspect_corrupt_checkpoint_fails(tmp_path, capsys):
    out, _ = _pretrained(tmp_path)
    ckpt = out / "checkpoints" / "final"
    manifest = ckpt / "manifest.json"
    manifest.write_text(manifest.read_text().replace('"offset": 0', '"offset": 7', 1))
    assert cli.main(["inspect", "--checkpoint", str(ckpt)]) == 2
    assert "offset" in capsys.readouterr().err


def test_cmd_gen_data_roundtrip(tmp_path):
    out = tmp_path / "out"
    cfg = _base_config(str(out), num_cycles=0)
    path = _write(tmp_path, cfg)
    assert cli.main(["gen-data", "--config", path]) == 0
    from cyclictrain.synthdata import generate_dataset, load_dataset

    spec, samples = load_dataset(str(out / "data" / "boxesmasks"))
    direct = generate_dataset(spec)
    assert len(samples) == len(direct)
    assert all(np.array_equal(a.image, b.image) for a, b in zip(samples, direct))
