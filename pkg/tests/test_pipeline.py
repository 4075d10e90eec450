import io
import json

import numpy as np
import pytest
import torch
from rich.console import Console

from hybrid_pad.cli import main
from hybrid_pad.core.anomaly.export import export_anomaly_map
from hybrid_pad.core.anomaly.scoring import AnomalyMap
from hybrid_pad.core.config import load_config
from hybrid_pad.core.data.scene_loader import write_scene_directory
from hybrid_pad.core.errors import MetricError, StageError
from hybrid_pad.core.types import ImageBuffer, Pose, QueryView, StageTimings
from hybrid_pad.core.utils.images import save_image, save_mask
from hybrid_pad.core.validation.report_validator import ReportValidator
from hybrid_pad.pipeline import Pipeline, QueryOutcome, _stage


def _pipeline(**overrides):
    return Pipeline(load_config(None, overrides), console=Console(file=io.StringIO()))


def _square(r, c, size=32):
    mask = np.zeros((size, size), dtype=bool)
    mask[r : r + 6, c : c + 6] = True
    return mask


@pytest.fixture
def scored_run(tmp_path):
    """Hand-written inference output whose maps equal the ground-truth masks."""
    image = ImageBuffer(np.full((32, 32, 3), 0.5))
    gt = [
        QueryView("stain_000", image, mask=_square(4, 4), defect="stain"),
        QueryView("burr_000", image, mask=_square(20, 10), defect="burr"),
        QueryView("good_000", image, defect="good"),
        QueryView("good_001", image, defect="good"),
    ]
    scores = {"stain_000": 0.9, "burr_000": 0.8, "good_000": 0.1}
    entries = []
    for query in gt:
        localized = query.image_id in scores
        if localized:
            values = query.mask.astype(np.float64) if query.mask is not None else np.zeros((32, 32))
            export_anomaly_map(tmp_path / "maps", query.image_id, AnomalyMap(values), True)
        entries.append(
            {
                "image_id": query.image_id,
                "defect": query.defect,
                "localization_ok": localized,
                "reason": None if localized else "too few inliers",
                "image_score": scores.get(query.image_id),
                "pose": Pose.identity().as_dict() if localized else None,
                "n_matches": 30,
                "n_inliers": 25 if localized else 3,
            }
        )
    inference = {
        "report": "inference",
        "format_version": 1,
        "object_id": "widget",
        "normalization": "set",
        "map_size": 32,
        "queries": entries,
        "unreadable": [],
    }
    return tmp_path, inference, gt


# --- stages and context ---


def test_stage_wraps_failures():
    with pytest.raises(StageError) as excinfo:
        with _stage("render"):
            raise KeyError("missing")
    assert excinfo.value.stage == "render"
    assert isinstance(excinfo.value.cause, KeyError)

    with pytest.raises(StageError) as excinfo:
        with _stage("outer"):
            with _stage("inner"):
                raise RuntimeError("boom")
    assert excinfo.value.stage == "inner"


def test_pipeline_restores_torch_state():
    threads = torch.get_num_threads()
    deterministic = torch.are_deterministic_algorithms_enabled()
    with _pipeline(deterministic=True):
        assert torch.get_num_threads() == 1
        assert torch.are_deterministic_algorithms_enabled()
    assert torch.get_num_threads() == threads
    assert torch.are_deterministic_algorithms_enabled() == deterministic


def test_query_outcome_report_entry():
    outcome = QueryOutcome("q", "good", StageTimings(), reason="too few matches", n_matches=4)
    entry = outcome.report_entry(None)
    assert entry["localization_ok"] is False and entry["pose"] is None
    assert entry["reason"] == "too few matches" and entry["n_matches"] == 4


# --- evaluation ---


def test_evaluate_excludes_localization_failures(scored_run):
    pred_dir, inference, gt = scored_run
    result = _pipeline().evaluate_object(pred_dir, inference, gt)
    assert result["image_auroc"] == pytest.approx(1.0)
    assert result["pixel_auroc"] == pytest.approx(1.0)
    assert result["aupro"] == pytest.approx(1.0)
    assert (result["n_queries"], result["n_defective"], result["n_evaluated"]) == (4, 2, 3)
    assert result["localization_failures"] == ["good_001"]


def test_max_score_policy_penalizes_failures(scored_run):
    pred_dir, inference, gt = scored_run
    result = _pipeline(failure_policy="max_score").evaluate_object(pred_dir, inference, gt)
    assert result["image_auroc"] == pytest.approx(0.625)
    assert result["pixel_auroc"] == pytest.approx(1.0)


def test_evaluate_requires_aligned_ids(scored_run):
    pred_dir, inference, gt = scored_run
    with pytest.raises(MetricError):
        _pipeline().evaluate_object(pred_dir, inference, gt[:3])


def test_undefined_metrics_become_null(scored_run):
    pred_dir, inference, gt = scored_run
    normal_only = [q for q in inference["queries"] if q["image_id"] in ("good_000", "good_001")]
    result = _pipeline().evaluate_object(pred_dir, {**inference, "queries": normal_only}, gt[2:])
    assert result["image_auroc"] is None
    assert result["aupro"] is None


def test_metrics_report_means_skip_nulls(scored_run):
    pred_dir, inference, gt = scored_run
    pipeline = _pipeline()
    good = pipeline.evaluate_object(pred_dir, inference, gt)
    empty = {**good, "object_id": "other", "image_auroc": None, "aupro": 0.5}
    report = pipeline.metrics_report([good, empty])
    assert ReportValidator().issues("metrics", report) == []
    assert report["mean"]["image_auroc"] == pytest.approx(1.0)
    assert report["mean"]["aupro"] == pytest.approx(0.75)


def test_eval_command_writes_report(scored_run):
    pred_dir, inference, gt = scored_run
    (pred_dir / "inference.json").write_text(json.dumps(inference))
    gt_dir = pred_dir / "gt"
    for query in gt:
        stem = query.image_id.split("_", 1)[1]
        save_image(gt_dir / "test" / query.defect / f"{stem}.png", query.image)
        if query.mask is not None:
            save_mask(gt_dir / "ground_truth" / query.defect / f"{stem}_mask.png", query.mask)

    report = _pipeline().cmd_eval([pred_dir], [gt_dir], pred_dir / "reports")
    assert report["objects"][0]["image_auroc"] == pytest.approx(1.0)
    assert (pred_dir / "reports" / "metrics.json").exists()
    assert (pred_dir / "reports" / "metrics.csv").exists()


def test_eval_rejects_mismatched_directories(tmp_path):
    with pytest.raises(StageError):
        _pipeline().cmd_eval([tmp_path], [])
    with pytest.raises(StageError):
        _pipeline().cmd_eval([tmp_path / "nothing"], [tmp_path])


def test_bench_needs_repetitions(tmp_path):
    with pytest.raises(StageError):
        _pipeline().cmd_bench(tmp_path, tmp_path, repetitions=0)


# --- command line ---


def test_main_reports_missing_paths(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["infer", "--model", "absent", "--queries", ".", "--out", "out"]) == 1
    assert main(["eval"]) == 1
    assert (tmp_path / "hybrid_pad.log").exists()


def test_main_generates_synthetic_scene(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    config = {
        "synthetic": {"image_size": 32, "supersample": 1, "n_good": 1},
        "synth": {"n_ref": 8, "n_query": 1, "defects": ["stain"]},
    }
    (tmp_path / "synth.json").write_text(json.dumps(config))
    assert main(["synth", "--config", "synth.json", "--out", "scene", "--seed", "3"]) == 0
    manifest = json.loads((tmp_path / "scene" / "transforms.json").read_text())
    assert len(manifest["frames"]) == 8
    queries = json.loads((tmp_path / "scene" / "queries.json").read_text())
    assert [frame["image_id"] for frame in queries["frames"]] == ["stain_000", "good_000"]


# --- end to end ---


@pytest.mark.slow
def test_train_infer_eval_on_synthetic_scene(tiny_scene, tmp_path):
    scene_dir = write_scene_directory(tiny_scene, tmp_path / "scene")
    pipeline = _pipeline(**{"train.iterations": 40, "train.densify_from": 1000, "train.checkpoint_interval": 20})
    with pipeline:
        summary = pipeline.cmd_train(scene_dir, tmp_path / "model")
        assert summary.n_points > 0 and summary.n_gaussians > 0
        inference = pipeline.cmd_infer(tmp_path / "model", scene_dir, tmp_path / "pred")
        metrics = pipeline.cmd_eval([tmp_path / "pred"], [scene_dir])

    assert [q["image_id"] for q in inference["queries"]] == [q.image_id for q in tiny_scene.queries]
    for entry in inference["queries"]:
        png = tmp_path / "pred" / "maps" / f"{entry['image_id']}.png"
        assert png.exists() == entry["localization_ok"]
    validator = ReportValidator()
    for kind in ("inference", "timings", "metrics"):
        report = json.loads((tmp_path / "pred" / f"{kind}.json").read_text())
        assert validator.issues(kind, report) == []
    assert metrics["objects"][0]["n_queries"] == len(tiny_scene.queries)
