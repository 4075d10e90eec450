import json
import math

import numpy as np
import pytest
from PIL import Image

from hybrid_pad.core.data.scene_loader import (
    camera_from_manifest,
    load_mad_scene,
    load_query_set,
    load_references,
    pose_from_c2w,
    subsample_references,
    write_scene_directory,
)
from hybrid_pad.core.errors import SceneFormatError
from hybrid_pad.core.types import CameraModel, ImageBuffer
from hybrid_pad.core.utils.images import load_image, save_image, save_mask


def _flat(value, size=(16, 16)):
    return ImageBuffer(np.full((*size, 3), value))


def _write_manifest(scene_dir, frames, **extra):
    scene_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"camera_angle_x": 0.8, "frames": frames, **extra}
    (scene_dir / "transforms.json").write_text(json.dumps(manifest))


def _two_reference_scene(scene_dir):
    c2w = np.eye(4)
    c2w[2, 3] = -3.0
    frames = []
    for name in ("a", "b"):
        save_image(scene_dir / "train" / f"{name}.png", _flat(0.5))
        frames.append({"file_path": f"train/{name}", "transform_matrix": c2w.tolist()})
    _write_manifest(scene_dir, frames)


# --- round trip through the on-disk layout ---


def test_scene_directory_round_trip(tiny_scene, tmp_path):
    write_scene_directory(tiny_scene, tmp_path / "scene")
    loaded = load_mad_scene(tmp_path / "scene")

    assert loaded.object_id == tiny_scene.object_id
    assert loaded.camera == tiny_scene.camera
    assert loaded.reference_ids == tiny_scene.reference_ids
    for ours, theirs in zip(loaded.references, tiny_scene.references):
        assert ours.image.equals(theirs.image)
        np.testing.assert_allclose(ours.pose.rotation, theirs.pose.rotation, atol=1e-9)
        np.testing.assert_allclose(ours.pose.translation, theirs.pose.translation, atol=1e-9)

    assert [q.image_id for q in loaded.queries] == [q.image_id for q in tiny_scene.queries]
    for ours, theirs in zip(loaded.queries, tiny_scene.queries):
        assert ours.defect == theirs.defect
        assert ours.image.equals(theirs.image)
        assert np.array_equal(ours.mask, theirs.mask)
        np.testing.assert_allclose(ours.pose.center, theirs.pose.center, atol=1e-9)


def test_missing_scene_directory(tmp_path):
    with pytest.raises(SceneFormatError):
        load_mad_scene(tmp_path / "nowhere")


# --- camera conventions ---


def test_opencv_and_opengl_conventions():
    c2w = np.eye(4)
    c2w[:3, 3] = [0.5, -1.0, 2.0]
    opencv = pose_from_c2w(c2w, "opencv", "m.json")
    opengl = pose_from_c2w(c2w, "opengl", "m.json")
    np.testing.assert_allclose(opencv.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(opengl.rotation, np.diag([1.0, -1.0, -1.0]), atol=1e-12)
    np.testing.assert_allclose(opencv.center, [0.5, -1.0, 2.0])
    np.testing.assert_allclose(opengl.center, [0.5, -1.0, 2.0])


@pytest.mark.parametrize(
    "matrix",
    [
        np.eye(4)[:3].tolist(),
        (2.0 * np.eye(4)).tolist(),
        np.diag([1.0, 1.0, -1.0, 1.0]).tolist(),
        [[1.0, 0.0, 0.0, float("nan")], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
        "identity",
    ],
)
def test_bad_transform_matrices(matrix):
    with pytest.raises(SceneFormatError):
        pose_from_c2w(matrix, "opencv", "m.json")


def test_camera_from_field_of_view():
    fov = math.radians(50.0)
    camera = camera_from_manifest({"camera_angle_x": fov}, 64, 48, "m.json")
    assert camera.fx == pytest.approx(32.0 / math.tan(fov / 2.0))
    assert camera.fy == camera.fx
    assert (camera.cx, camera.cy) == (32.0, 24.0)
    per_frame = camera_from_manifest({"frames": [{"camera_angle_x": fov}]}, 64, 48, "m.json")
    assert per_frame == camera


def test_frames_must_share_field_of_view():
    frames = [{"camera_angle_x": 0.8}, {}, {"camera_angle_x": 0.8}]
    assert camera_from_manifest({"frames": frames}, 64, 48, "m.json") == CameraModel.from_fov(64, 48, 0.8)
    frames.append({"camera_angle_x": 0.9})
    with pytest.raises(SceneFormatError) as info:
        camera_from_manifest({"frames": frames}, 64, 48, "m.json")
    assert "disagree" in str(info.value)


def test_explicit_intrinsics_win():
    manifest = {"camera_angle_x": 0.5, "fl_x": 70.0, "cx": 30.0, "cy": 20.0}
    camera = camera_from_manifest(manifest, 64, 48, "m.json")
    assert (camera.fx, camera.fy, camera.cx, camera.cy) == (70.0, 70.0, 30.0, 20.0)
    with pytest.raises(SceneFormatError):
        camera_from_manifest({"frames": [{}]}, 64, 48, "m.json")


# --- manifest errors ---


def test_missing_manifest(tmp_path):
    with pytest.raises(SceneFormatError):
        load_references(tmp_path)


def test_manifest_without_frames(tmp_path):
    _write_manifest(tmp_path, [])
    with pytest.raises(SceneFormatError):
        load_references(tmp_path)


def test_unknown_convention(tmp_path):
    _two_reference_scene(tmp_path)
    manifest = json.loads((tmp_path / "transforms.json").read_text())
    manifest["camera_convention"] = "blender"
    (tmp_path / "transforms.json").write_text(json.dumps(manifest))
    with pytest.raises(SceneFormatError):
        load_references(tmp_path)


def test_unparseable_manifest(tmp_path):
    (tmp_path / "transforms.json").write_text("{ not json")
    with pytest.raises(SceneFormatError):
        load_references(tmp_path)


def test_references_resolve_missing_extension(tmp_path):
    _two_reference_scene(tmp_path)
    references, camera, _ = load_references(tmp_path)
    assert [view.image_id for view in references] == ["a", "b"]
    assert (camera.width, camera.height) == (16, 16)
    np.testing.assert_allclose(references[0].pose.center, [0.0, 0.0, -3.0])


# --- query sets ---


def test_query_tree_fallback(tmp_path):
    _two_reference_scene(tmp_path)
    save_image(tmp_path / "test" / "good" / "000.png", _flat(0.5))
    save_image(tmp_path / "test" / "burr" / "000.png", _flat(0.7))
    mask = np.zeros((16, 16), dtype=bool)
    mask[4:8, 4:8] = True
    save_mask(tmp_path / "ground_truth" / "burr" / "000_mask.png", mask)

    scene = load_mad_scene(tmp_path)
    assert [q.image_id for q in scene.queries] == ["burr_000", "good_000"]
    burr, good = scene.queries
    assert burr.defect == "burr" and np.array_equal(burr.mask, mask)
    assert burr.is_anomalous
    assert good.mask is None and not good.is_anomalous
    assert burr.pose is None


def test_non_strict_loading_reports_failures(tmp_path):
    save_image(tmp_path / "test" / "good" / "000.png", _flat(0.5))
    save_image(tmp_path / "test" / "stain" / "001.png", _flat(0.5))
    with pytest.raises(SceneFormatError):
        load_query_set(tmp_path)
    queries, failures = load_query_set(tmp_path, strict=False)
    assert [q.image_id for q in queries] == ["good_000"]
    assert [image_id for image_id, _ in failures] == ["stain_001"]
    assert "Missing mask" in failures[0][1]


def test_mask_size_must_match_image(tmp_path):
    save_image(tmp_path / "test" / "stain" / "001.png", _flat(0.5))
    save_mask(tmp_path / "ground_truth" / "stain" / "001_mask.png", np.zeros((8, 8), dtype=bool))
    queries, failures = load_query_set(tmp_path, strict=False)
    assert queries == []
    assert failures[0][0] == "stain_001"


def test_no_queries_is_not_an_error(tmp_path):
    assert load_query_set(tmp_path) == ([], [])


def test_rgba_composited_over_background(tmp_path):
    pixels = np.zeros((4, 4, 4), dtype=np.uint8)
    pixels[:2, :, :3] = [200, 10, 10]
    pixels[:2, :, 3] = 255
    Image.fromarray(pixels).save(tmp_path / "rgba.png")
    image = load_image(tmp_path / "rgba.png")
    np.testing.assert_array_equal(image.to_uint8()[0, 0], [200, 10, 10])
    np.testing.assert_array_equal(image.to_uint8()[3, 3], [255, 255, 255])
    black = load_image(tmp_path / "rgba.png", background=(0.0, 0.0, 0.0))
    np.testing.assert_array_equal(black.to_uint8()[3, 3], [0, 0, 0])


def test_unreadable_image(tmp_path):
    (tmp_path / "broken.png").write_bytes(b"\x89PNG garbage")
    with pytest.raises(SceneFormatError):
        load_image(tmp_path / "broken.png")


# --- sparse-view subsets ---


def test_subsample_references_is_nested(tiny_scene):
    half = subsample_references(tiny_scene, 0.5, seed=4)
    quarter = subsample_references(tiny_scene, 0.25, seed=4)
    assert len(half.references) == 6 and len(quarter.references) == 3
    assert set(quarter.reference_ids) <= set(half.reference_ids)
    assert half.reference_ids == [i for i in tiny_scene.reference_ids if i in set(half.reference_ids)]
    assert len(half.queries) == len(tiny_scene.queries)
    assert subsample_references(tiny_scene, 0.5, seed=4).reference_ids == half.reference_ids
    assert subsample_references(tiny_scene, 1.0) is tiny_scene


def test_subsample_references_errors(tiny_scene):
    for fraction in (0.0, 1.5):
        with pytest.raises(ValueError):
            subsample_references(tiny_scene, fraction)
    with pytest.raises(ValueError):
        subsample_references(tiny_scene, 0.1)
