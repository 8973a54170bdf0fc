import json
from types import SimpleNamespace

import numpy as np
import pytest

from centermask.cli import main
from centermask.data import SceneConfig, export_dataset, generate_scenes, load_dataset
from centermask.model import ModelConfig
from centermask.records import detection_record, write_detections
from centermask.train import RunConfig
from tests.test_evaluate import fixture_3gt_4det


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = RunConfig(
        model=ModelConfig(input_size=(32, 32), backbone_channels=(4, 8, 8, 8), feature_channels=8,
                          head_channels=8, shape_size=4),
        scenes=SceneConfig(canvas=(32, 32), num_objects=(1, 2), size_range=(0.3, 0.5)),
        steps=3, batch_size=2, train_seeds=(0, 3), eval_seeds=(50, 2), checkpoint_every=0,
    )
    cfg.save(root / "cfg.json")
    scenes = generate_scenes(cfg.scenes, range(3))
    export_dataset(scenes, root / "data")
    assert main(["train", "--config", str(root / "cfg.json"), "--out", str(root / "run")]) == 0
    return root


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["infer", "--checkpoint", "x", "--ablation", "neither"])
    assert exc.value.code == 1
    assert main(["train", "--shape-size", "1", "--steps", "0"]) == 1


def test_train_writes_outputs(workspace):
    run = workspace / "run"
    assert (run / "final.ckpt").exists()
    assert (run / "eval_report.json").exists()
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 3


def test_infer_is_deterministic(workspace):
    ck = str(workspace / "run" / "final.ckpt")
    data = str(workspace / "data")
    assert main(["infer", "--checkpoint", ck, "--dataset", data, "--out", str(workspace / "i1"), "--overlays"]) == 0
    assert main(["infer", "--checkpoint", ck, "--dataset", data, "--out", str(workspace / "i2")]) == 0
    a = (workspace / "i1" / "detections.jsonl").read_text()
    assert a == (workspace / "i2" / "detections.jsonl").read_text()
    recs = [json.loads(x) for x in a.splitlines()]
    assert len(recs) == 3 and all(len(r["detections"]) <= 100 for r in recs)
    assert len(list((workspace / "i1" / "overlays").glob("*.png"))) == 3


def test_infer_defaults_and_flags(workspace):
    ck = str(workspace / "run" / "final.ckpt")
    out = workspace / "i3"
    assert main(["infer", "--checkpoint", ck, "--dataset", str(workspace / "data"), "--out", str(out),
                 "--top-k", "5", "--mask-threshold", "0.5", "--ablation", "saliency-only"]) == 0
    recs = [json.loads(x) for x in (out / "detections.jsonl").read_text().splitlines()]
    assert all(len(r["detections"]) <= 5 for r in recs)
    assert RunConfig().decode.top_k == 100 and RunConfig().decode.mask_threshold == 0.4


def test_infer_incompatible_checkpoint(workspace, tmp_path):
    ck = str(workspace / "run" / "final.ckpt")
    assert main(["infer", "--checkpoint", ck, "--dataset", str(workspace / "data"), "--shape-size", "8",
                 "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nonsense")
    assert main(["infer", "--checkpoint", str(bad), "--dataset", str(workspace / "data"), "--out", str(tmp_path)]) == 2


def _gt_records(scenes):
    recs = []
    for s in scenes:
        dets = []
        for g in s.instances:
            x, y, w, h = g.box
            dets.append(SimpleNamespace(class_id=g.class_id, score=1.0, box=(x, y, h, w), mask=g.mask))
        recs.append(detection_record(s.image_id, dets))
    return recs


def test_eval_gt_as_detections_and_empty(workspace, tmp_path, capsys):
    scenes = list(load_dataset(workspace / "data"))
    write_detections(tmp_path / "gt.jsonl", _gt_records(scenes))
    assert main(["eval", "--detections", str(tmp_path / "gt.jsonl"), "--dataset", str(workspace / "data"),
                 "--num-classes", "3", "--out", str(tmp_path / "r1")]) == 0
    rep = json.loads((tmp_path / "r1" / "report.json").read_text())
    assert rep["ap"] == 1.0
    (tmp_path / "empty.jsonl").write_text("")
    assert main(["eval", "--detections", str(tmp_path / "empty.jsonl"), "--dataset", str(workspace / "data"),
                 "--num-classes", "3", "--out", str(tmp_path / "r2")]) == 0
    rep = json.loads((tmp_path / "r2" / "report.json").read_text())
    assert rep["ap"] == 0.0


def test_eval_matches_fixture_oracle(tmp_path):
    from centermask.evaluate import match_and_score
    from centermask.data import Scene
    from centermask.targets import GroundTruthInstance

    dets, gts = fixture_3gt_4det()
    scene = Scene(image=np.zeros((3, 32, 32)), instances=[GroundTruthInstance(g.class_id, g.mask) for g in gts[0]])
    export_dataset([scene], tmp_path / "data")
    recs = [detection_record(0, [SimpleNamespace(class_id=d.class_id, score=d.score, box=(0, 0, 1, 1), mask=d.mask)
                                 for d in dets[0]])]
    write_detections(tmp_path / "d.jsonl", recs)
    assert main(["eval", "--detections", str(tmp_path / "d.jsonl"), "--dataset", str(tmp_path / "data"),
                 "--out", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    expect = match_and_score(dets, gts, 1, canvas_area=32 * 32).as_dict()
    for k in ("ap", "ap50", "ap75", "num_gt", "num_det"):
        assert rep[k] == pytest.approx(expect[k], abs=1e-12)


def test_eval_unknown_image_id_is_runtime_error(workspace, tmp_path):
    write_detections(tmp_path / "d.jsonl", [{"image_id": 999, "detections": []}])
    assert main(["eval", "--detections", str(tmp_path / "d.jsonl"), "--dataset", str(workspace / "data")]) == 2


def test_render_and_generate(workspace, tmp_path):
    assert main(["generate", "--out", str(tmp_path / "gen"), "--count", "2", "--seed", "7"]) == 0
    assert len(list((tmp_path / "gen" / "images").glob("*.png"))) == 2
    assert main(["render", "--dataset", str(workspace / "data"), "--out", str(tmp_path / "ov")]) == 0
    assert len(list((tmp_path / "ov").glob("*.png"))) == 3


def test_ablate_with_checkpoints(workspace, tmp_path, capsys):
    ck = str(workspace / "run" / "final.ckpt")
    argv = ["ablate", "--config", str(workspace / "cfg.json"), "--out", str(tmp_path / "abl"), "--num-test", "3",
            "--checkpoints", f"full={ck}", f"shape-only={ck}", f"saliency-only={ck}"]
    assert main(argv) == 0
    table = (tmp_path / "abl" / "ablation.md").read_text()
    rows = [ln for ln in table.splitlines() if ln.startswith("| ") and "mode" not in ln]
    assert len(rows) == 6  # 2 suites x 3 modes
    rec = json.loads((tmp_path / "abl" / "ablation.json").read_text())
    assert set(rec["high_overlap"]) == {"full", "shape_only", "saliency_only"}
    assert len(list((tmp_path / "abl" / "overlays" / "high_overlap").glob("*.png"))) == 3


def test_thread_env(workspace, monkeypatch, tmp_path):
    monkeypatch.setenv("CENTERMASK_THREADS", "1")
    assert main(["generate", "--out", str(tmp_path / "g"), "--count", "1"]) == 0
    monkeypatch.setenv("CENTERMASK_THREADS", "many")
    assert main(["generate", "--out", str(tmp_path / "g"), "--count", "1"]) == 1
