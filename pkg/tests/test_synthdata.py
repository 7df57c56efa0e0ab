import math
import os

import numpy as np
import pytest

import camera
import util
from camera import CameraIntrinsics
from epipolar import essential_from_pose, normalize_points
from geom import AbsolutePose, quat_to_rotation, relative_pose, roe, rotation_angle_deg, rte
from synthdata import (
    SCENE_FILE,
    SHADING_SCALE,
    TRAIN_MANIFEST,
    VAL_MANIFEST,
    CropPolicy,
    DatasetConfig,
    ImageTooSmallError,
    PairRecord,
    PlanarScene,
    PlaneBehindCameraError,
    SynthDataError,
    build_dataset,
    crop_image,
    make_correspondences,
    make_scene,
    make_texture,
    plane_homography,
    read_manifest,
    read_ppm,
    render_images,
    render_pair,
    resize_and_crop,
    resize_image,
    sample_pair_pose,
    to_network_input,
    write_manifest,
    write_ppm,
)

K64 = CameraIntrinsics(64.0, 64.0, 31.5, 31.5, 64, 64)


def motion(poses):
    R = poses[1].rotation @ poses[0].rotation.T
    return R, poses[1].translation - R @ poses[0].translation


@pytest.fixture(scope="module")
def plane():
    return make_scene(5)


class TestPoses:
    def test_deterministic(self):
        a, b = sample_pair_pose(7), sample_pair_pose(7)
        for p, q in zip(a, b):
            np.testing.assert_array_equal(p.rotation, q.rotation)
            np.testing.assert_array_equal(p.translation, q.translation)

    def test_ranges(self):
        for seed in range(1000):
            pose1, pose2 = sample_pair_pose(seed, max_rotation_deg=20.0, max_baseline_ratio=0.3, distance=4.0)
            gt = relative_pose(pose1, pose2)
            assert gt.dq.norm() == pytest.approx(1.0, abs=1e-12)
            assert np.linalg.norm(gt.dt) == pytest.approx(1.0, abs=1e-12)
            assert gt.dq.w >= 0
            assert rotation_angle_deg(gt.dq) <= 20.0 + 1e-9
            assert np.linalg.norm(pose2.center) <= 1.2 + 1e-12

    def test_plane_stays_visible(self, plane):
        for seed in range(20):
            poses = sample_pair_pose(seed, 30.0, 0.3, plane, K64)
            render_images(plane, poses, K64)

    @pytest.mark.parametrize("max_rotation", [0.0, -5.0, 91.0])
    def test_invalid_rotation(self, max_rotation):
        with pytest.raises(SynthDataError):
            sample_pair_pose(0, max_rotation_deg=max_rotation)


class TestRender:
    def test_texture(self):
        tex = make_texture(3, size=64)
        assert tex.shape == (64, 64, 3)
        assert tex.min() >= 0.0 and tex.max() <= 255.0
        np.testing.assert_array_equal(tex, make_texture(3, size=64))

    def test_identical_poses(self, plane):
        pose = AbsolutePose.identity()
        img1, img2 = render_images(plane, (pose, pose), K64)
        assert img1.dtype == np.uint8 and img1.shape == (64, 64, 3)
        np.testing.assert_array_equal(img1, img2)

    def test_quarter_turn_about_optical_axis(self, plane):
        h = math.sqrt(0.5)
        pose2 = AbsolutePose(quat_to_rotation((h, 0.0, 0.0, h)), np.zeros(3))
        img1, img2 = render_images(plane, (AbsolutePose.identity(), pose2), K64)
        expected = np.rot90(img1, k=-1, axes=(0, 1))
        diff = np.abs(img2.astype(np.int64) - expected.astype(np.int64))
        assert diff[1:-1, 1:-1].max() <= 1

    def test_near_identical_views(self, plane):
        poses = sample_pair_pose(2, max_rotation_deg=0.001, max_baseline_ratio=0.001, scene=plane, K=K64)
        img1, img2 = render_images(plane, poses, K64)
        assert np.mean(np.abs(img1.astype(np.float64) - img2)) < 3.0

    def test_ground_truth(self, plane):
        poses = sample_pair_pose(4, scene=plane, K=K64)
        _, _, gt = render_pair(plane, poses, K64)
        expected = relative_pose(*poses)
        assert roe(gt.dq, expected.dq) == pytest.approx(0.0, abs=1e-9)
        assert rte(gt.dt, expected.dt) == pytest.approx(0.0, abs=1e-9)

    def test_plane_behind_camera(self):
        behind = PlanarScene(np.array([0.0, 0.0, 1.0]), 4.0, make_texture(0, size=16))
        pose = AbsolutePose.identity()
        with pytest.raises(PlaneBehindCameraError):
            render_images(behind, (pose, pose), K64)

    def test_shading_blends_texture_and_field(self):
        plain = make_scene(5, shading=0.0)
        X = plain.point(np.linspace(-1.0, 1.0, 7), np.linspace(0.5, -0.5, 7))
        a, b = (c / SHADING_SCALE for c in plain.coordinates(X))
        field = 255.0 * np.stack([0.5 * (1 + np.tanh(a)), 0.5 * (1 + np.tanh(b)), np.exp(-0.5 * (a * a + b * b))], -1)
        full = PlanarScene(plain.normal, plain.distance, plain.texture, plain.texel, shading=1.0)
        half = PlanarScene(plain.normal, plain.distance, plain.texture, plain.texel, shading=0.5)
        np.testing.assert_allclose(full.sample(X), field)
        np.testing.assert_allclose(half.sample(X), 0.5 * plain.sample(X) + 0.5 * field)

    def test_shading_is_anchored_at_the_plane_foot(self):
        scene = make_scene(5, shading=1.0)
        np.testing.assert_allclose(scene.sample(scene.point(0.0, 0.0)), [[127.5, 127.5, 255.0]])
        east, north = scene.sample(scene.point([2.0, 0.0], [0.0, 2.0]))
        assert east[0] > 200.0 and east[1] == pytest.approx(127.5)
        assert north[1] > 200.0 and north[0] == pytest.approx(127.5)
        assert east[2] == pytest.approx(north[2]) and east[2] < 50.0

    @pytest.mark.parametrize("shading", [-0.1, 1.5])
    def test_invalid_shading(self, shading):
        with pytest.raises(SynthDataError, match="shading"):
            PlanarScene(np.array([0.0, 0.0, -1.0]), 4.0, make_texture(0, size=16), shading=shading)


class TestCorrespondences:
    def test_homography_and_epipolar_constraint(self, plane):
        poses = sample_pair_pose(6, scene=plane, K=K64)
        c = make_correspondences(plane, poses, K64, 30)
        H = plane_homography(plane, *poses, K64)
        p1 = np.hstack([c.matches[:, :2], np.ones((30, 1))])
        p2 = p1 @ H.T
        np.testing.assert_allclose(p2[:, :2] / p2[:, 2:], c.matches[:, 2:], atol=1e-6)
        x1, x2 = normalize_points(c)
        E = essential_from_pose(*motion(poses))
        residual = np.einsum("ni,ij,nj->n", np.hstack([x2, np.ones((30, 1))]), E, np.hstack([x1, np.ones((30, 1))]))
        assert np.max(np.abs(residual)) < 1e-9

    def test_outlier_count(self, plane):
        poses = sample_pair_pose(6, scene=plane, K=K64)
        c = make_correspondences(plane, poses, K64, 100, outlier_ratio=0.3, seed=1)
        assert len(c) == 100
        assert int(np.sum(~c.inlier_mask)) == 30

    def test_deterministic(self, plane):
        poses = sample_pair_pose(6, scene=plane, K=K64)
        a = make_correspondences(plane, poses, K64, 50, noise_px=1.0, outlier_ratio=0.2, seed=3)
        b = make_correspondences(plane, poses, K64, 50, noise_px=1.0, outlier_ratio=0.2, seed=3)
        np.testing.assert_array_equal(a.matches, b.matches)
        np.testing.assert_array_equal(a.inlier_mask, b.inlier_mask)

    @pytest.mark.parametrize("count, ratio", [(7, 0.0), (20, 1.5), (20, -0.1)])
    def test_invalid(self, plane, count, ratio):
        poses = sample_pair_pose(6, scene=plane, K=K64)
        with pytest.raises(SynthDataError):
            make_correspondences(plane, poses, K64, count, outlier_ratio=ratio)


class TestImages:
    @pytest.fixture
    def tall(self):
        rng = util.make_rng(0, "image")
        return rng.integers(0, 256, size=(646, 800, 3)).astype(np.uint8)

    def test_resize_and_center_crop(self, tall):
        resized = resize_image(tall, 323)
        assert resized.shape == (323, 400, 3)
        cropped = resize_and_crop(tall, CropPolicy(323, 227))
        assert cropped.shape == (227, 227, 3)
        np.testing.assert_array_equal(cropped, resized[48:275, 86:313])

    def test_square_unchanged(self):
        img = np.arange(323 * 323 * 3, dtype=np.int64).reshape(323, 323, 3).astype(np.uint8)
        np.testing.assert_array_equal(resize_and_crop(img, CropPolicy(323, 323)), img)

    def test_no_crop(self, tall):
        assert resize_and_crop(tall, CropPolicy(323, 0)).shape == (323, 400, 3)

    def test_crop_too_large(self):
        with pytest.raises(ImageTooSmallError):
            crop_image(np.zeros((100, 120, 3), dtype=np.uint8), CropPolicy(100, 101))

    def test_random_crop(self, tall):
        policy = CropPolicy(323, 227, random=True)
        a = resize_and_crop(tall, policy, util.make_rng(1, "crop"))
        b = resize_and_crop(tall, policy, util.make_rng(1, "crop"))
        np.testing.assert_array_equal(a, b)
        with pytest.raises(SynthDataError):
            crop_image(tall, policy)

    def test_network_input(self):
        img = np.full((4, 5, 3), 255, dtype=np.uint8)
        x = to_network_input(img)
        assert x.shape == (3, 4, 5)
        assert (x == 0.5).all()

    def test_ppm(self, tmp_path, tall):
        path = tmp_path / "a.ppm"
        write_ppm(path, tall)
        np.testing.assert_array_equal(read_ppm(path), tall)

    def test_ppm_comment_and_truncation(self, tmp_path):
        path = tmp_path / "b.ppm"
        path.write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
        np.testing.assert_array_equal(read_ppm(path), [[[1, 2, 3], [4, 5, 6]]])
        path.write_bytes(b"P6\n2 1\n255\n" + bytes([1, 2, 3]))
        with pytest.raises(SynthDataError, match="truncated"):
            read_ppm(path)


class TestManifest:
    def test_renormalizes_ground_truth(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(
            '{"img1": "a.ppm", "img2": "b.ppm", "qw": 2.0, "qx": 0.0, "qy": 0.0, "qz": 0.0, '
            '"tx": 0.0, "ty": 0.0, "tz": 5.0}\n'
        )
        (rec,) = read_manifest(path)
        assert tuple(rec.pose.dq) == (1.0, 0.0, 0.0, 0.0)
        np.testing.assert_array_equal(rec.pose.dt, [0.0, 0.0, 1.0])
        assert rec.img1 == os.path.join(str(tmp_path), "a.ppm")

    def test_malformed(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"img1": "a.ppm"}\n')
        with pytest.raises(SynthDataError, match="malformed"):
            read_manifest(path)

    def test_round_trip(self, tmp_path, plane):
        poses = sample_pair_pose(1, scene=plane, K=K64)
        rec = PairRecord(str(tmp_path / "x1.ppm"), str(tmp_path / "x2.ppm"), relative_pose(*poses), 4, K64, "s")
        write_manifest(tmp_path / "m.jsonl", [rec])
        (loaded,) = read_manifest(tmp_path / "m.jsonl")
        assert (loaded.img1, loaded.seed, loaded.intrinsics, loaded.scene) == (rec.img1, 4, K64, "s")
        assert roe(loaded.pose.dq, rec.pose.dq) < 1e-9


class TestBuildDataset:
    CONFIG = DatasetConfig(width=48, height=48, focal=48.0)

    def test_split_and_files(self, tmp_path):
        train, val = build_dataset(10, 0.8, self.CONFIG, seed=1, out_dir=str(tmp_path))
        assert (len(train), len(val)) == (8, 2)
        assert len(read_manifest(tmp_path / TRAIN_MANIFEST)) == 8
        assert len(read_manifest(tmp_path / VAL_MANIFEST)) == 2
        img = read_ppm(train[0].img1)
        assert img.shape == (48, 48, 3)

    def test_ground_truth_matches_scene(self, tmp_path):
        train, val = build_dataset(4, 0.5, self.CONFIG, seed=2, out_dir=str(tmp_path))
        cameras = {c.id: c for c in camera.read_scene(tmp_path / SCENE_FILE)}
        for k, rec in enumerate(train + val):
            gt = relative_pose(cameras[f"{k}a"].pose, cameras[f"{k}b"].pose)
            assert roe(gt.dq, rec.pose.dq) < 1e-6
            assert rte(gt.dt, rec.pose.dt) < 1e-6

    def test_reproducible(self, tmp_path):
        build_dataset(6, 0.5, self.CONFIG, seed=3, out_dir=str(tmp_path / "a"))
        build_dataset(6, 0.5, self.CONFIG, seed=3, out_dir=str(tmp_path / "b"), threads=3)
        for name in (TRAIN_MANIFEST, VAL_MANIFEST, SCENE_FILE, "images/000005_2.ppm"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    @pytest.mark.parametrize("n, ratio", [(1, 0.5), (10, 0.0), (10, 1.0), (10, 0.05)])
    def test_empty_split(self, tmp_path, n, ratio):
        with pytest.raises(SynthDataError):
            build_dataset(n, ratio, self.CONFIG, seed=0, out_dir=str(tmp_path))
