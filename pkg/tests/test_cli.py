from __future__ import annotations

import json
from pathlib import Path

import pytest

from fisheye_bev_parking.__main__ import main
from fisheye_bev_parking.dataset import MANIFEST, Dataset
from fisheye_bev_parking.models import (
    BenchReport,
    FrameDetections,
    MetricsReport,
    PolygonDetection,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _args_for(config: str, root: Path, *overrides: str) -> list[str]:
    args = [
        "--config",
        str(CONFIGS / config),
        "--override",
        f"paths.dataset={root / 'data'}",
        "--override",
        f"paths.checkpoints={root / 'checkpoints'}",
        "--override",
        f"paths.reports={root / 'reports'}",
    ]
    for item in overrides:
        args += ["--override", item]
    return args


@pytest.fixture
def run_args(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> list[str]:
    """Common arguments pointing every output of the tiny config under ``tmp_path``."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("PARKING_REPORT_DIR", raising=False)
    return _args_for("tiny.json", tmp_path)


def test_generate_is_repeatable(run_args: list[str], tmp_path: Path) -> None:
    assert main(["generate", *run_args]) == 0
    first = (tmp_path / "data" / MANIFEST).read_text()
    assert main(["generate", *run_args]) == 0
    assert (tmp_path / "data" / MANIFEST).read_text() == first


def test_generate_without_scenes_writes_an_empty_manifest(
    run_args: list[str], tmp_path: Path
) -> None:
    overrides = ["--override", "data.train_scenes=0", "--override", "data.val_scenes=0"]
    assert main(["generate", *run_args, *overrides]) == 0
    manifest = json.loads((tmp_path / "data" / MANIFEST).read_text())
    assert manifest["splits"] == {"train": [], "val": []}


def test_train_before_generate_fails_with_exit_2(run_args: list[str]) -> None:
    assert main(["train", *run_args]) == 2


def test_bad_override_is_a_config_error(run_args: list[str]) -> None:
    assert main(["inspect", *run_args, "--override", "train.steps=-1"]) == 2
    assert main(["inspect", *run_args, "--override", "nokey"]) == 2


def test_full_pipeline(
    run_args: list[str], tmp_path: Path, monkeypatch: pytest.MonkeyPatch
) -> None:
    assert main(["generate", *run_args]) == 0
    assert main(["train", *run_args]) == 0
    assert (tmp_path / "checkpoints" / "step-000004.ckpt").is_file()

    assert main(["eval", *run_args]) == 0
    reports = tmp_path / "reports"
    metrics = MetricsReport.model_validate_json((reports / "metrics.json").read_text())
    assert metrics.frames == 2
    assert metrics.checkpoint is not None and metrics.checkpoint.endswith("step-000004.ckpt")
    lines = (reports / "detections.jsonl").read_text().splitlines()
    assert [FrameDetections.model_validate_json(x).frame_id for x in lines] == [
        "val-00000",
        "val-00001",
    ]
    assert [p.name for p in (reports / "overlays").glob("*.png")] == ["val-00000.png"]

    # an untrained model cannot reach a perfect score
    assert main(["eval", *run_args, "--override", "eval.acceptance.min_f1=1.0"]) == 4
    # weights of another architecture are refused
    assert main(["eval", *run_args, "--override", "model.embedding_hidden=16"]) == 2

    elsewhere = tmp_path / "elsewhere"
    monkeypatch.setenv("PARKING_REPORT_DIR", str(elsewhere))
    assert main(["bench", *run_args]) == 0
    bench = BenchReport.model_validate_json((elsewhere / "bench.json").read_text())
    assert bench.iterations == 2
    assert not (reports / "bench.json").exists()


def test_eval_without_checkpoint_fails(run_args: list[str]) -> None:
    assert main(["generate", *run_args]) == 0
    assert main(["eval", *run_args]) == 2


def test_inspect_prints_config_and_schema(
    run_args: list[str], capsys: pytest.CaptureFixture[str]
) -> None:
    assert main(["inspect", *run_args]) == 0
    out = capsys.readouterr().out
    assert out.startswith("config hash: ")
    assert "no complete dataset" in out
    assert main(["inspect", *run_args, "--schema"]) == 0
    schema = json.loads(capsys.readouterr().out)
    assert "model" in schema["properties"]

def _dump_labels(data: Path, path: Path, *, empty: bool = False) -> int:
    """Write the val labels as a detection dump; returns the number of labels."""
    dataset = Dataset(data)
    total = 0
    with path.open("w", encoding="utf-8") as fh:
        for fid in dataset.frames("val"):
            labels = dataset.sample(fid).labels
            total += len(labels)
            dets = [
                PolygonDetection(
                    category=label.category,
                    confidence=1.0,
                    corners=label.corners,
                    visibility=[1.0 if v else 0.0 for v in label.visibility],
                    detection_id=i,
                )
                for i, label in enumerate(labels)
            ]
            record = FrameDetections(frame_id=fid, detections=[] if empty else dets)
            fh.write(record.model_dump_json(by_alias=True) + "\n")
    return total


def test_eval_scores_a_detection_dump_without_a_model(run_args: list[str], tmp_path: Path) -> None:
    assert main(["generate", *run_args]) == 0
    dump = tmp_path / "labels_as_detections.jsonl"
    assert _dump_labels(tmp_path / "data", dump) > 0

    assert main(["eval", *run_args, "--detections", str(dump)]) == 0
    reports = tmp_path / "reports"
    metrics = MetricsReport.model_validate_json((reports / "metrics.json").read_text())
    assert metrics.checkpoint is None
    assert metrics.overall.f1 == pytest.approx(1.0)
    assert metrics.overall.distance_error_cm == pytest.approx(0.0, abs=1e-9)
    assert metrics.overall.false_positives == 0
    # the dump is an input here, not an output
    assert not (reports / "detections.jsonl").exists()


def test_eval_of_an_empty_dump_scores_zero(run_args: list[str], tmp_path: Path) -> None:
    assert main(["generate", *run_args]) == 0
    dump = tmp_path / "empty.jsonl"
    assert _dump_labels(tmp_path / "data", dump, empty=True) > 0

    assert main(["eval", *run_args, "--detections", str(dump)]) == 0
    metrics = MetricsReport.model_validate_json((tmp_path / "reports" / "metrics.json").read_text())
    assert metrics.overall.f1 == 0.0
    assert metrics.overall.true_positives == 0
    assert metrics.overall.distance_error_cm is None
    strict = ["--override", "eval.acceptance.min_f1=0.5"]
    assert main(["eval", *run_args, "--detections", str(dump), *strict]) == 4


def test_eval_rejects_a_missing_or_malformed_dump(run_args: list[str], tmp_path: Path) -> None:
    assert main(["generate", *run_args]) == 0
    assert main(["eval", *run_args, "--detections", str(tmp_path / "absent.jsonl")]) == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"frame_id": "val-00000", "detections": [{"class": "tree"}]}\n')
    assert main(["eval", *run_args, "--detections", str(bad)]) == 2


@pytest.mark.slow
def test_overfit_run_reaches_acceptance(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("PARKING_REPORT_DIR", raising=False)
    args = _args_for("overfit.json", tmp_path)
    assert main(["generate", *args]) == 0
    assert main(["train", *args]) == 0
    losses = [
        json.loads(line)["total"]
        for line in (tmp_path / "reports" / "train_loss.jsonl").read_text().splitlines()
    ]
    assert losses[-1] < 0.1 * losses[0]
    # F1, distance error and visibility accuracy on the training scenes
    assert main(["eval", *args]) == 0

    held_out = [
        "eval.split=val",
        "eval.acceptance.min_f1=0.6",
        "eval.acceptance.max_distance_cm=null",
        "eval.acceptance.min_visibility_accuracy=null",
    ]
    assert main(["eval", *_args_for("overfit.json", tmp_path, *held_out)]) == 0


@pytest.mark.slow
def test_bev_augmentation_does_not_hurt_held_out_f1(
    tmp_path: Path, monkeypatch: pytest.MonkeyPatch
) -> None:
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("PARKING_REPORT_DIR", raising=False)
    scores: dict[str, float] = {}
    for preset in ("none", "bev_flip_yaw"):
        root = tmp_path / preset
        args = _args_for(
            "desk.json",
            root,
            f"paths.dataset={tmp_path / 'data'}",
            f"augmentation.preset={preset}",
            "train.steps=2000",
        )
        if not (tmp_path / "data" / MANIFEST).is_file():
            assert main(["generate", *args]) == 0
        assert main(["train", *args]) == 0
        assert main(["eval", *args]) == 0
        metrics = MetricsReport.model_validate_json((root / "reports" / "metrics.json").read_text())
        scores[preset] = metrics.overall.f1
    assert scores["bev_flip_yaw"] >= scores["none"] - 0.02
