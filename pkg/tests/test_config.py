import json
from pathlib import Path

import pytest

from hybrid_pad.cli import _overrides, parse_args
from hybrid_pad.core.anomaly.anomaly_config import AnomalyConfig
from hybrid_pad.core.config import (
    RunConfig,
    build_dataclass,
    dump_key_values,
    load_config,
    parse_key_values,
)
from hybrid_pad.core.sfm.sfm_config import SfmConfig
from hybrid_pad.core.splatting.train_config import TrainConfig
from hybrid_pad.core.types import DefectSpec


def test_parse_key_values():
    text = """
    # training
    iterations = 500
    anomaly.normalization = per_image   # inline comment
    sfm.keypoint_sidecar_dir = null
    seed = 4
    fpr_limit = 0.1
    not a setting
    """
    raw = parse_key_values(text)
    assert raw == {
        "train": {"iterations": 500},
        "anomaly": {"normalization": "per_image"},
        "sfm": {"keypoint_sidecar_dir": None},
        "seed": 4,
        "fpr_limit": 0.1,
    }


def test_dump_then_parse_restores_sections():
    sections = {
        "train": TrainConfig(iterations=42, background=[0.0, 0.5, 1.0], lr_position=3e-5),
        "sfm": SfmConfig(keypoint_sidecar_dir="sidecars", ratio_threshold=0.8),
        "anomaly": AnomalyConfig(smoothing_sigma=0.0),
    }
    raw = parse_key_values(dump_key_values(sections))
    assert build_dataclass(TrainConfig, raw["train"]) == sections["train"]
    assert build_dataclass(SfmConfig, raw["sfm"]) == sections["sfm"]
    assert build_dataclass(AnomalyConfig, raw["anomaly"]) == sections["anomaly"]


def test_build_dataclass_coerces_and_ignores_unknown_keys():
    cfg = build_dataclass(TrainConfig, {"iterations": 10.0, "ssim_weight": 0, "bogus": 1}, "train")
    assert cfg.iterations == 10 and isinstance(cfg.iterations, int)
    assert cfg.ssim_weight == 0.0 and isinstance(cfg.ssim_weight, float)


def test_defaults_without_config():
    cfg = load_config(None)
    assert cfg == RunConfig()
    assert cfg.fpr_limit == 0.3 and cfg.failure_policy == "exclude"
    assert cfg.anomaly.normalization == "set"


def test_missing_config_file_falls_back_to_defaults(tmp_path):
    assert load_config(tmp_path / "absent.json") == RunConfig()


def test_json_config_with_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(
        json.dumps(
            {
                "paths": {"scene": "scenes/widget", "out": None},
                "train": {"iterations": 300},
                "metrics": {"fpr_limit": 0.05},
                "synth": {"n_ref": 16, "defects": ["burr", {"kind": "stain", "size": 0.05}]},
                "failure_policy": "max_score",
                "unknown_top_level": True,
            }
        )
    )
    cfg = load_config(path, {"train.iterations": 900, "seed": 5})
    assert cfg.paths == {"scene": Path("scenes/widget")}
    assert cfg.train.iterations == 900
    assert cfg.fpr_limit == 0.05
    assert cfg.seed == 5
    assert cfg.failure_policy == "max_score"
    assert cfg.synth.n_ref == 16
    assert cfg.synth.defects == [DefectSpec("burr"), DefectSpec("stain", size=0.05)]


def test_text_config(tmp_path):
    path = tmp_path / "run.txt"
    path.write_text("iterations = 12\nsynthetic.image_size = 48\nsynthetic.elevation_range_deg = [10, 50]\n")
    cfg = load_config(path)
    assert cfg.train.iterations == 12
    assert cfg.synthetic.image_size == 48
    assert cfg.synthetic.elevation_range_deg == (10, 50)


def test_invalid_run_settings():
    with pytest.raises(ValueError):
        load_config(None, {"failure_policy": "ignore"})
    with pytest.raises(ValueError):
        load_config(None, {"fpr_limit": 0.0})
    with pytest.raises(ValueError):
        load_config(None, {"anomaly.normalization": "zscore"})


def test_cli_flags_become_overrides():
    args = parse_args(["train", "--scene", "s", "--iterations", "9", "--background", "0", "0", "0", "--seed", "2"])
    assert args.command == "train"
    assert args.scene == Path("s")
    assert _overrides(args) == {"train.iterations": 9, "train.background": [0.0, 0.0, 0.0], "seed": 2}


def test_unset_cli_flags_leave_config_alone():
    args = parse_args(["infer", "--model", "m", "--queries", "q"])
    assert _overrides(args) == {}
    args = parse_args(["eval", "--pred", "a", "b", "--gt", "c", "d", "--fpr-limit", "0.2", "--no-deterministic"])
    assert args.pred == [Path("a"), Path("b")]
    assert _overrides(args) == {"fpr_limit": 0.2, "deterministic": False}


def test_cli_requires_a_command():
    with pytest.raises(SystemExit):
        parse_args([])
