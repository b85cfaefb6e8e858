import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrlloop import sceneforge as sf


def pose_strategy():
    return st.builds(
        sf.CameraPose,
        azimuth=st.floats(-10.0, 10.0),
        elevation=st.floats(-1.5, 1.5),
        radius=st.floats(0.5, 5.0),
    )


class TestCameraPose:
    def test_azimuth_wraps_into_range(self):
        p = sf.CameraPose(azimuth=3 * np.pi, elevation=0.1, radius=2.0)
        assert -np.pi <= p.azimuth < np.pi
        assert p.azimuth == pytest.approx(-np.pi, abs=1e-12) or p.azimuth == pytest.approx(np.pi, abs=1e-12)

    def test_invalid_elevation_and_radius(self):
        with pytest.raises(ValueError):
            sf.CameraPose(0.0, 2.0, 2.0)
        with pytest.raises(ValueError):
            sf.CameraPose(0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            sf.CameraPose(0.0, 0.0, -1.0)

    def test_rotation_is_orthonormal(self):
        p = sf.CameraPose(0.7, 0.3, 2.0)
        r = p.rotation()
        assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)

    def test_rotation_defined_at_poles(self):
        for el in (np.pi / 2, -np.pi / 2):
            r = sf.CameraPose(0.4, el, 2.0).rotation()
            assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)

    def test_pole_rotation_depends_on_azimuth(self):
        # bijectivity: distinct azimuths stay distinguishable at the pole
        r1 = sf.CameraPose(0.0, np.pi / 2, 2.0).rotation()
        r2 = sf.CameraPose(1.0, np.pi / 2, 2.0).rotation()
        assert not np.allclose(r1, r2)


class TestRelativePose:
    def test_identity(self):
        p = sf.CameraPose(0.3, 0.2, 2.2)
        rel = sf.relative_pose(p, p)
        assert rel.d_elevation == 0.0
        assert rel.d_azimuth_sin == pytest.approx(0.0, abs=1e-15)
        assert rel.d_azimuth_cos == pytest.approx(1.0, abs=1e-15)
        assert rel.d_radius == 0.0

    def test_modular_wrap_across_seam(self):
        ref = sf.CameraPose(np.deg2rad(350.0), 0.0, 2.0)
        tg = sf.CameraPose(np.deg2rad(10.0), 0.0, 2.0)
        rel = sf.relative_pose(ref, tg)
        assert rel.d_azimuth_sin == pytest.approx(np.sin(np.deg2rad(20.0)), abs=1e-12)
        assert rel.d_azimuth_cos == pytest.approx(np.cos(np.deg2rad(20.0)), abs=1e-12)

    def test_unit_circle_invariant_enforced(self):
        with pytest.raises(ValueError):
            sf.RelativePose(0.0, 0.5, 0.5, 0.0)

    def test_round_trip_oracle_1000_pairs(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            ref = sf.CameraPose(rng.uniform(-np.pi, np.pi), rng.uniform(-1.4, 1.4), rng.uniform(1.0, 3.0))
            tg = sf.CameraPose(rng.uniform(-np.pi, np.pi), rng.uniform(-1.4, 1.4), rng.uniform(1.0, 3.0))
            back = sf.recompose(ref, sf.relative_pose(ref, tg))
            assert abs(back.azimuth - tg.azimuth) < 1e-9
            assert abs(back.elevation - tg.elevation) < 1e-9
            assert abs(back.radius - tg.radius) < 1e-9

    @given(pose_strategy(), pose_strategy())
    @settings(max_examples=200, deadline=None)
    def test_round_trip_property(self, ref, tg):
        back = sf.recompose(ref, sf.relative_pose(ref, tg))
        assert abs(back.azimuth - tg.azimuth) < 1e-9
        assert abs(back.elevation - tg.elevation) < 1e-9
        assert abs(back.radius - tg.radius) < 1e-9

    @given(pose_strategy(), pose_strategy())
    @settings(max_examples=100, deadline=None)
    def test_encoding_on_unit_circle(self, ref, tg):
        rel = sf.relative_pose(ref, tg)
        assert rel.d_azimuth_sin**2 + rel.d_azimuth_cos**2 == pytest.approx(1.0, abs=1e-6)


class TestMakeScene:
    def test_deterministic(self):
        assert sf.make_scene(7) == sf.make_scene(7)

    def test_primitive_count_range(self):
        for seed in range(50):
            n = len(sf.make_scene(seed).primitives)
            assert 2 <= n <= 5

    def test_count_diversity_over_seeds(self):
        counts = {len(sf.make_scene(seed).primitives) for seed in range(1000)}
        assert len(counts) >= 2

    def test_primitives_fit_in_unit_ball(self):
        for seed in range(100):
            for p in sf.make_scene(seed).primitives:
                c = np.linalg.norm(p.center)
                if p.kind == "sphere":
                    assert c + p.size[0] <= 1.0 + 1e-9
                else:
                    assert c + np.linalg.norm(p.size) <= 1.0 + 1e-9

    def test_negative_seed_rejected(self):
        with pytest.raises(ValueError):
            sf.make_scene(-1)


def single_sphere_scene(radius=0.5, rgb=(0.8, 0.2, 0.2)):
    return sf.SceneSpec(
        seed=0, primitives=(sf.Primitive(kind="sphere", center=(0.0, 0.0, 0.0), size=(radius,), rgb=rgb),)
    )


class TestRender:
    def test_centered_sphere_gives_centered_disk(self):
        scene = single_sphere_scene()
        for az in (0.0, 1.0, 2.5):
            _, alpha = sf.render(scene, sf.CameraPose(az, 0.0, 2.2), 32)
            assert alpha.sum() > 0
            ys, xs = np.nonzero(alpha)
            center = (alpha.shape[0] - 1) / 2
            assert abs(ys.mean() - center) < 0.6
            assert abs(xs.mean() - center) < 0.6
            # a disk is symmetric under both axis flips
            assert np.array_equal(alpha, alpha[::-1, :])
            assert np.array_equal(alpha, alpha[:, ::-1])

    def test_render_deterministic(self):
        scene = sf.make_scene(3)
        pose = sf.CameraPose(0.4, 0.3, 2.2)
        img1, a1 = sf.render(scene, pose, 32)
        img2, a2 = sf.render(scene, pose, 32)
        assert np.array_equal(img1, img2)
        assert np.array_equal(a1, a2)

    def test_azimuth_wrap_identity(self):
        scene = sf.make_scene(11)
        img1, a1 = sf.render(scene, sf.CameraPose(0.9, 0.2, 2.2), 32)
        img2, a2 = sf.render(scene, sf.CameraPose(0.9 + 2 * np.pi, 0.2, 2.2), 32)
        assert np.array_equal(img1, img2)
        assert np.array_equal(a1, a2)

    def test_background_white_and_alpha_marks_hits(self):
        scene = single_sphere_scene()
        img, alpha = sf.render(scene, sf.CameraPose(0.0, 0.0, 2.2), 32)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert np.all(img[alpha == 0] == 1.0)
        assert np.all(img[alpha == 1].max(axis=-1) < 1.0)
        assert set(np.unique(alpha)) <= {0.0, 1.0}

    def test_camera_inside_object_raises(self):
        scene = single_sphere_scene(radius=0.5)
        with pytest.raises(sf.DegeneratePoseError):
            sf.render(scene, sf.CameraPose(0.0, 0.0, 0.3), 32)

    def test_invalid_resolution(self):
        with pytest.raises(ValueError):
            sf.render(single_sphere_scene(), sf.CameraPose(0.0, 0.0, 2.2), 17)

    def test_box_scene_renders(self):
        scene = sf.SceneSpec(
            seed=0,
            primitives=(sf.Primitive(kind="box", center=(0.0, 0.0, 0.0), size=(0.3, 0.2, 0.4), rgb=(0.1, 0.5, 0.8)),),
        )
        img, alpha = sf.render(scene, sf.CameraPose(0.7, 0.4, 2.2), 32)
        assert alpha.sum() > 0
        assert img.shape == (32, 32, 3)


class TestBuildDataset:
    def test_counting_one_object_two_views(self, tmp_path):
        manifest = sf.build_dataset(1, 2, 16, seed=5, out_dir=tmp_path)
        assert len(manifest.objects) == 1
        assert len(manifest.objects[0].views) == 2
        pngs = sorted(tmp_path.glob("*.png"))
        assert len(pngs) == 2  # RGBA: image + alpha mask per file
        for png in pngs:
            from ctrlloop.images import load_rgba_png

            rgb, alpha = load_rgba_png(png)
            assert rgb.shape == (16, 16, 3)
            assert alpha.shape == (16, 16)

    def test_paper_scale_shape(self, tmp_path):
        manifest = sf.build_dataset(8, 12, 16, seed=0, out_dir=tmp_path)
        views = sum(len(o.views) for o in manifest.objects)
        assert views == 96

    def test_rebuild_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        sf.build_dataset(2, 3, 16, seed=9, out_dir=a)
        sf.build_dataset(2, 3, 16, seed=9, out_dir=b)
        files_a = sorted(p.name for p in a.iterdir())
        files_b = sorted(p.name for p in b.iterdir())
        assert files_a == files_b
        for name in files_a:
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_manifest_schema(self, tmp_path):
        sf.build_dataset(1, 2, 16, seed=1, out_dir=tmp_path)
        d = json.loads((tmp_path / "manifest.json").read_text())
        assert set(d) == {"seed", "version", "resolution", "objects"}
        assert set(d["objects"][0]) == {"object_seed", "views"}
        view = d["objects"][0]["views"][0]
        assert set(view) == {"azimuth", "elevation", "radius", "image_path"}
        assert (tmp_path / view["image_path"]).exists()

    def test_view_poses_within_sampling_ranges(self, tmp_path):
        manifest = sf.build_dataset(3, 6, 16, seed=2, out_dir=tmp_path)
        for obj in manifest.objects:
            for v in obj.views:
                assert sf.ELEV_MIN_RAD - 1e-9 <= v.elevation <= sf.ELEV_MAX_RAD + 1e-9
                assert sf.BASE_RADIUS - sf.RADIUS_JITTER <= v.radius <= sf.BASE_RADIUS + sf.RADIUS_JITTER

    def test_invalid_args(self, tmp_path):
        with pytest.raises(ValueError):
            sf.build_dataset(0, 2, 16, seed=0, out_dir=tmp_path)
        with pytest.raises(ValueError):
            sf.build_dataset(1, 1, 16, seed=0, out_dir=tmp_path)

    def test_load_manifest_missing_file(self, tmp_path):
        sf.build_dataset(1, 2, 16, seed=1, out_dir=tmp_path)
        (tmp_path / "obj000_view000.png").unlink()
        with pytest.raises(FileNotFoundError):
            sf.load_manifest(tmp_path)
