import numpy as np
import pytest
from conftest import points_in_front, random_pose
from scipy import ndimage

from hybrid_pad.core.errors import (
    BundleFormatError,
    LocalizationError,
    ReconstructionError,
    SceneFormatError,
)
from hybrid_pad.core.geometry.camera import project_points
from hybrid_pad.core.geometry.se3 import look_at, rotation_error_deg
from hybrid_pad.core.sfm.features import (
    KeypointSet,
    detect_and_describe,
    read_keypoint_sidecar,
    write_keypoint_sidecar,
)
from hybrid_pad.core.sfm.localization import localize_query, localize_query_detailed
from hybrid_pad.core.sfm.matching import match_features
from hybrid_pad.core.sfm.pnp import solve_pnp_ransac
from hybrid_pad.core.sfm.retrieval import (
    GlobalDescriptor,
    RetrievalDatabase,
    compute_global_descriptor,
    read_retrieval_database,
    retrieve_top_k,
    write_retrieval_database,
)
from hybrid_pad.core.sfm.sfm_config import SfmConfig
from hybrid_pad.core.sfm.sparse_model import SparseModel, read_sparse_model, write_sparse_model
from hybrid_pad.core.sfm.triangulation import (
    PairObservations,
    build_sparse_model,
    build_tracks,
    epipolar_distances,
    fundamental_from_poses,
    refine_points,
    triangulate_pair_dlt,
    triangulate_reference_model,
    triangulate_track_dlt,
)
from hybrid_pad.core.types import CameraModel, ImageBuffer, Pose, ReferenceView


@pytest.fixture
def wide_camera():
    return CameraModel(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def _unit_rows(rng, n, dim=128):
    desc = rng.normal(size=(n, dim))
    return (desc / np.linalg.norm(desc, axis=1, keepdims=True)).astype(np.float32)


def _keypoints_from_uv(uv, rng):
    kps = np.column_stack([uv, np.ones(len(uv)), np.ones(len(uv))])
    return KeypointSet(kps, _unit_rows(rng, len(uv)))


def _ring_poses(n, radius=4.0, height=1.0):
    angles = np.linspace(0.0, np.pi / 2, n)
    return [look_at(np.array([radius * np.cos(a), radius * np.sin(a), height]), np.zeros(3)) for a in angles]


def _checkerboard(size=64, square=8):
    rows, cols = np.indices((size, size))
    pattern = ((rows // square + cols // square) % 2).astype(np.float32)
    return ImageBuffer(0.2 + 0.6 * pattern)


# --- PnP ---


def test_pnp_noiseless_is_exact(rng, wide_camera):
    for _ in range(20):
        pose = random_pose(rng)
        xyz = points_in_front(rng, pose, 30)
        uv, _ = project_points(xyz, pose, wide_camera)
        result = solve_pnp_ransac(uv, xyz, wide_camera, seed=0)
        np.testing.assert_allclose(result.pose.matrix, pose.matrix, atol=1e-6)
        assert len(result.inliers) == 30


def test_pnp_tolerates_outliers(rng, wide_camera):
    good = 0
    for trial in range(100):
        pose = random_pose(rng)
        xyz = points_in_front(rng, pose, 100)
        uv, _ = project_points(xyz, pose, wide_camera)
        uv = uv + rng.normal(0.0, 0.5, uv.shape)
        outliers = rng.choice(100, 30, replace=False)
        uv[outliers] = rng.uniform([0, 0], [wide_camera.width, wide_camera.height], (30, 2))
        result = solve_pnp_ransac(uv, xyz, wide_camera, seed=trial)
        good += rotation_error_deg(result.pose, pose) < 0.1
    assert good >= 95


def test_pnp_rejects_too_few_correspondences(rng, wide_camera):
    pose = random_pose(rng)
    xyz = points_in_front(rng, pose, 5)
    uv, _ = project_points(xyz, pose, wide_camera)
    with pytest.raises(LocalizationError) as info:
        solve_pnp_ransac(uv, xyz, wide_camera)
    assert info.value.n_matches == 5


def test_pnp_rejects_pure_noise(rng, wide_camera):
    xyz = rng.uniform(-1.0, 1.0, (40, 3)) + [0.0, 0.0, 4.0]
    uv = rng.uniform([0, 0], [wide_camera.width, wide_camera.height], (40, 2))
    cfg = SfmConfig(pnp_min_inliers=20)
    with pytest.raises(LocalizationError):
        solve_pnp_ransac(uv, xyz, wide_camera, cfg, seed=3)


def test_pnp_is_deterministic_for_a_seed(rng, wide_camera):
    pose = random_pose(rng)
    xyz = points_in_front(rng, pose, 60)
    uv, _ = project_points(xyz, pose, wide_camera)
    uv[:15] = rng.uniform(0, 400, (15, 2))
    a = solve_pnp_ransac(uv, xyz, wide_camera, seed=11)
    b = solve_pnp_ransac(uv, xyz, wide_camera, seed=11)
    assert np.array_equal(a.pose.matrix, b.pose.matrix)
    assert np.array_equal(a.inliers, b.inliers)


# --- triangulation ---


def test_two_view_triangulation_is_exact(rng, wide_camera):
    for _ in range(50):
        pose_a = random_pose(rng)
        offset = Pose(np.array([1.0, 0.02, -0.05, 0.03]), np.array([0.5, -0.1, 0.05]))
        pose_b = offset.compose(pose_a)
        xyz = points_in_front(rng, pose_a, 20, near=2.0)
        uv_a, _ = project_points(xyz, pose_a, wide_camera)
        uv_b, _ = project_points(xyz, pose_b, wide_camera)
        xyz_dlt = triangulate_pair_dlt(uv_a, uv_b, pose_a, pose_b, wide_camera)
        np.testing.assert_allclose(xyz_dlt, xyz, atol=1e-6)
        F = fundamental_from_poses(pose_a, pose_b, wide_camera)
        assert np.all(epipolar_distances(F, uv_a, uv_b) < 1e-6)


def test_track_triangulation_is_exact(rng, wide_camera):
    poses = _ring_poses(4)
    point = rng.uniform(-0.5, 0.5, 3)
    uv = np.array([project_points(point, pose, wide_camera)[0][0] for pose in poses])
    np.testing.assert_allclose(triangulate_track_dlt(uv, poses, wide_camera), point, atol=1e-6)


def test_build_tracks_merges_transitively():
    pairs = [
        PairObservations(0, 1, np.array([0, 1]), np.array([5, 6])),
        PairObservations(1, 2, np.array([5]), np.array([3])),
    ]
    tracks = build_tracks(pairs)
    assert len(tracks) == 2
    np.testing.assert_array_equal(tracks[0], [[0, 0], [1, 5], [2, 3]])
    np.testing.assert_array_equal(tracks[1], [[0, 1], [1, 6]])


def test_refine_points_recovers_truth(rng, wide_camera):
    poses = _ring_poses(4)
    truth = rng.uniform(-0.5, 0.5, (10, 3))
    keypoints = [_keypoints_from_uv(project_points(truth, pose, wide_camera)[0], rng) for pose in poses]
    tracks = [np.array([[img, p] for img in range(4)]) for p in range(10)]
    start = truth + rng.normal(0.0, 0.05, truth.shape)
    refined = refine_points(start, tracks, poses, keypoints, wide_camera)
    np.testing.assert_allclose(refined, truth, atol=1e-6)


def test_build_sparse_model_from_exact_observations(rng, wide_camera):
    poses = _ring_poses(4)
    truth = rng.uniform(-0.5, 0.5, (10, 3))
    keypoints = [_keypoints_from_uv(project_points(truth, pose, wide_camera)[0], rng) for pose in poses]
    idx = np.arange(10)
    pairs = [PairObservations(i, i + 1, idx, idx) for i in range(3)]
    model = build_sparse_model(["a", "b", "c", "d"], poses, keypoints, pairs, wide_camera, SfmConfig())
    assert len(model) == 10
    order = np.argsort([track[0, 1] for track in model.tracks])
    np.testing.assert_allclose(model.xyz[order], truth, atol=1e-6)
    assert model.mean_reprojection_error(wide_camera) < 1e-6
    np.testing.assert_array_equal(model.point_lookup("c")[model.tracks[0][2, 1]], 0)


def test_triangulation_needs_two_references(tiny_scene):
    with pytest.raises(ReconstructionError):
        triangulate_reference_model(tiny_scene.references[:1], tiny_scene.camera)


def test_triangulation_without_points_is_an_error(wide_camera):
    flat = ImageBuffer(np.full((64, 64, 3), 0.5))
    refs = [ReferenceView(f"ref_{i}", flat, pose) for i, pose in enumerate(_ring_poses(2))]
    with pytest.raises(ReconstructionError):
        triangulate_reference_model(refs, wide_camera)


@pytest.mark.slow
def test_reference_model_respects_reprojection_threshold(tiny_scene):
    cfg = SfmConfig()
    db = RetrievalDatabase()
    model = triangulate_reference_model(tiny_scene.references, tiny_scene.camera, db, cfg)
    assert db.ids == tiny_scene.reference_ids
    for track, errors in zip(model.tracks, model.reprojection_errors(tiny_scene.camera)):
        assert len(np.unique(track[:, 0])) == len(track)
        assert np.all(errors <= cfg.reprojection_threshold + 1e-9)


# --- features and matching ---


def test_detect_and_describe_checkerboard():
    kps = detect_and_describe(_checkerboard())
    assert len(kps) > 0
    assert np.all(kps.uv >= 3) and np.all(kps.uv <= 60)
    np.testing.assert_allclose(np.linalg.norm(kps.descriptors, axis=1), 1.0, atol=1e-5)
    assert kps.equals(detect_and_describe(_checkerboard()))


def test_detect_rejects_small_images():
    with pytest.raises(ValueError):
        detect_and_describe(ImageBuffer(np.zeros((16, 64))))


def test_flat_image_has_no_keypoints():
    assert len(detect_and_describe(ImageBuffer(np.full((40, 40), 0.5)))) == 0


def test_matching_recovers_permutation(rng):
    a = _keypoints_from_uv(rng.uniform(0, 50, (40, 2)), rng)
    perm = rng.permutation(40)
    noisy = a.descriptors[perm].astype(np.float64) + rng.normal(0.0, 0.01, (40, 128))
    b = KeypointSet(a.keypoints[perm], noisy / np.linalg.norm(noisy, axis=1, keepdims=True))
    matches = match_features(a, b)
    assert len(matches) == 40
    for i, j in matches.pairs:
        assert perm[j] == i
    assert np.all(matches.scores > 0.9)


def test_matching_is_symmetric_and_one_to_one(rng):
    a = _keypoints_from_uv(rng.uniform(0, 50, (60, 2)), rng)
    b = _keypoints_from_uv(rng.uniform(0, 50, (50, 2)), rng)
    shared = np.concatenate([a.descriptors[:20], b.descriptors[20:]])
    b = KeypointSet(b.keypoints, shared)
    ab = match_features(a, b)
    ba = match_features(b, a)
    np.testing.assert_array_equal(ba.pairs, ab.transposed().pairs)
    assert len(np.unique(ab.pairs[:, 0])) == len(ab)
    assert len(np.unique(ab.pairs[:, 1])) == len(ab)


def test_matching_empty_sets(rng):
    a = _keypoints_from_uv(rng.uniform(0, 50, (5, 2)), rng)
    assert len(match_features(a, KeypointSet.empty())) == 0


def test_keypoint_sidecar_round_trip(rng, tmp_path):
    kps = _keypoints_from_uv(rng.uniform(0, 50, (12, 2)), rng)
    path = tmp_path / "a.pkpt"
    write_keypoint_sidecar(path, kps)
    loaded = read_keypoint_sidecar(path)
    np.testing.assert_allclose(loaded.keypoints, kps.keypoints.astype(np.float32))
    np.testing.assert_allclose(loaded.descriptors, kps.descriptors, atol=1e-6)

    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(SceneFormatError):
        read_keypoint_sidecar(path)


# --- retrieval ---


def test_retrieval_finds_itself(rng):
    db = RetrievalDatabase()
    images = [ImageBuffer(rng.uniform(0.0, 1.0, (48, 48, 3))) for _ in range(5)]
    for i, img in enumerate(images):
        db.add(f"ref_{i}", compute_global_descriptor(img))
    for i, img in enumerate(images):
        assert retrieve_top_k(compute_global_descriptor(img), db, 1) == [f"ref_{i}"]


def test_retrieval_breaks_ties_by_id():
    vector = np.zeros(8)
    vector[0] = 1.0
    db = RetrievalDatabase([("b", GlobalDescriptor(vector)), ("a", GlobalDescriptor(vector))])
    assert retrieve_top_k(GlobalDescriptor(vector), db, 2) == ["a", "b"]
    with pytest.raises(ValueError):
        retrieve_top_k(GlobalDescriptor(vector), db, 3)


def test_low_contrast_descriptor():
    descriptor = compute_global_descriptor(ImageBuffer(np.full((32, 32, 3), 0.3)))
    assert descriptor.low_contrast
    assert np.linalg.norm(descriptor.vector) == pytest.approx(1.0)


def test_duplicate_retrieval_id_rejected():
    vector = np.ones(4) / 2.0
    db = RetrievalDatabase([("a", GlobalDescriptor(vector))])
    with pytest.raises(ValueError):
        db.add("a", GlobalDescriptor(vector))


def test_retrieval_database_round_trip(rng, tmp_path):
    db = RetrievalDatabase()
    for i in range(3):
        v = rng.normal(size=16)
        db.add(f"view_{i}", GlobalDescriptor(v / np.linalg.norm(v), low_contrast=i == 2))
    path = tmp_path / "retrieval.pdb"
    write_retrieval_database(path, db)
    loaded = read_retrieval_database(path)
    assert loaded.ids == db.ids
    assert np.array_equal(loaded.matrix, db.matrix)
    assert loaded.descriptor("view_2").low_contrast

    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(BundleFormatError):
        read_retrieval_database(path)
    path.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(BundleFormatError):
        read_retrieval_database(path)


# --- sparse model file ---


def test_sparse_model_round_trip(rng, tmp_path):
    poses = _ring_poses(2)
    keypoints = [_keypoints_from_uv(rng.uniform(0, 50, (4, 2)), rng) for _ in poses]
    model = SparseModel(
        xyz=rng.normal(size=(3, 3)),
        rgb=rng.integers(0, 256, (3, 3)).astype(np.uint8),
        tracks=[np.array([[0, i], [1, i]]) for i in range(3)],
        descriptors=_unit_rows(rng, 3),
        image_ids=["left", "right"],
        poses=poses,
        keypoints=keypoints,
    )
    path = tmp_path / "sparse.psfm"
    write_sparse_model(path, model)
    assert read_sparse_model(path).equals(model)

    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(BundleFormatError):
        read_sparse_model(path)


# --- localization ---


def _self_model(rng):
    """A one-image model whose tracks are the image's own keypoints, lifted at random depths."""
    cam = CameraModel(fx=90.0, fy=90.0, cx=48.0, cy=48.0, width=96, height=96)
    texture = ndimage.gaussian_filter(rng.uniform(0.0, 1.0, (96, 96, 3)), sigma=(1.5, 1.5, 0))
    img = ImageBuffer(texture)
    pose = random_pose(rng, max_translation=0.5)
    kps = detect_and_describe(img)
    depth = rng.uniform(2.0, 4.0, len(kps))
    cam_points = np.column_stack(
        [(kps.uv[:, 0] - cam.cx) / cam.fx * depth, (kps.uv[:, 1] - cam.cy) / cam.fy * depth, depth]
    )
    model = SparseModel(
        xyz=(cam_points - pose.translation) @ pose.rotation,
        rgb=np.zeros((len(kps), 3), dtype=np.uint8),
        tracks=[np.array([[0, k]]) for k in range(len(kps))],
        descriptors=kps.descriptors,
        image_ids=["ref"],
        poses=[pose],
        keypoints=[kps],
    )
    db = RetrievalDatabase([("ref", compute_global_descriptor(img))])
    return img, model, db, cam, pose


def test_localize_reference_image_recovers_its_pose(rng):
    img, model, db, cam, pose = _self_model(rng)
    assert len(model) >= 20
    localized = localize_query(img, model, db, cam, seed=0)
    np.testing.assert_allclose(localized.matrix, pose.matrix, atol=1e-5)

    detailed = localize_query_detailed(img, model, db, cam, seed=0)
    assert detailed.retrieved == ["ref"]
    assert detailed.n_correspondences == len(model)
    assert len(detailed.inliers) == len(model)


def test_localize_flat_query_has_too_few_matches(rng):
    _, model, db, cam, _ = _self_model(rng)
    with pytest.raises(LocalizationError) as info:
        localize_query(ImageBuffer(np.full((96, 96, 3), 0.5)), model, db, cam)
    assert info.value.reason == "too few matches"


def test_localize_against_empty_model(rng):
    img, model, db, cam, pose = _self_model(rng)
    empty = SparseModel.empty(["ref"], [pose], [model.keypoints[0]])
    with pytest.raises(LocalizationError) as info:
        localize_query(img, empty, db, cam)
    assert info.value.reason == "sparse model is empty"


def test_localize_uses_query_keypoint_sidecar(rng, tmp_path):
    img, model, db, cam, pose = _self_model(rng)
    write_keypoint_sidecar(tmp_path / "query_007.pkpt", model.keypoints[0])
    cfg = SfmConfig(keypoint_sidecar_dir=str(tmp_path))
    flat = ImageBuffer(np.full((96, 96, 3), 0.5))

    localized = localize_query(flat, model, db, cam, cfg, seed=0, image_id="query_007")
    assert rotation_error_deg(localized, pose) < 0.01
    np.testing.assert_allclose(localized.center, pose.center, atol=1e-3)

    with pytest.raises(LocalizationError):
        localize_query(flat, model, db, cam, cfg, seed=0, image_id="query_008")
