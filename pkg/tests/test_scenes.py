import json
import math
from pathlib import Path

import numpy as np
import pytest

from roomsdf import FLOOR, WALL, OTHER
from roomsdf.scenes import (Camera, NormTransform, RoomModel, SceneFormatError,
                            SyntheticRoomSpec, ViewRecord, camera_ray,
                            class_to_file_labels, file_labels_to_class,
                            generate_synthetic_room, load_scene, normalize_cameras)
from roomsdf import fileio
from roomsdf.meshio import read_ply


def make_camera(center=(0, 0, 0), rotation=None, f=50.0, size=64):
    R = np.eye(3) if rotation is None else rotation
    return Camera(f, f, size / 2, size / 2, R, np.asarray(center, float), size, size)


class TestCamera:
    def test_rotation_must_be_orthonormal(self):
        R = np.eye(3)
        R[0, 1] = 0.01
        with pytest.raises(ValueError):
            make_camera(rotation=R)

    def test_reflection_rejected(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            make_camera(rotation=R)

    def test_bad_intrinsics(self):
        with pytest.raises(ValueError):
            Camera(-1.0, 50.0, 32, 32, np.eye(3), np.zeros(3), 64, 64)
        with pytest.raises(ValueError):
            Camera(50.0, 50.0, 90, 32, np.eye(3), np.zeros(3), 64, 64)


class TestCameraRay:
    def test_principal_axis(self):
        cam = make_camera()
        origin, d = camera_ray(cam, (cam.cx, cam.cy))
        assert np.allclose(d, [0, 0, 1])
        assert np.allclose(origin, 0)

    def test_unit_norm_random_pixels(self):
        cam = make_camera(center=(0.1, -0.2, 0.3))
        rng = np.random.default_rng(0)
        for _ in range(20):
            u = rng.uniform(0, cam.width)
            v = rng.uniform(0, cam.height)
            _, d = camera_ray(cam, (u, v))
            assert abs(np.linalg.norm(d) - 1) < 1e-12

    def test_one_focal_length_off_axis(self):
        # pixel (cx + fx, cy) lies 45 degrees off the optical axis
        cam = make_camera(f=20.0)
        _, d = camera_ray(cam, (cam.cx + cam.fx, cam.cy))
        assert np.allclose(d, [math.sqrt(2) / 2, 0, math.sqrt(2) / 2], atol=1e-12)

    def test_outside_bounds_rejected(self):
        cam = make_camera()
        with pytest.raises(ValueError):
            camera_ray(cam, (cam.width + 1.0, 2.0))


class TestNormalizeCameras:
    def test_single_camera_at_origin(self):
        t = normalize_cameras([make_camera()], margin=0.8)
        assert t.scale == 1.0
        assert np.allclose(t.translation, 0)

    def test_two_cameras_hand_solved(self):
        cams = [make_camera(center=(4, 0, 0)), make_camera(center=(-4, 0, 0))]
        t = normalize_cameras(cams, margin=0.8)
        assert abs(t.scale - 0.2) < 1e-12
        centers = np.stack([t.apply_camera(c).center for c in cams])
        assert np.allclose(sorted(centers[:, 0]), [-0.8, 0.8])

    def test_max_norm_bounded(self):
        rng = np.random.default_rng(1)
        cams = [make_camera(center=c) for c in rng.normal(size=(10, 3)) * 5]
        t = normalize_cameras(cams, margin=0.8)
        norms = [np.linalg.norm(t.apply_camera(c).center) for c in cams]
        assert max(norms) <= 1.0
        assert abs(max(norms) - 0.8) < 1e-9

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        cams = [make_camera(center=c) for c in rng.normal(size=(7, 3))]
        t = normalize_cameras(cams, margin=0.8)
        normalized = [t.apply_camera(c) for c in cams]
        t2 = normalize_cameras(normalized, margin=0.8)
        assert abs(t2.scale - 1.0) < 1e-9
        assert np.allclose(t2.translation, 0, atol=1e-9)

    def test_margin_validation(self):
        with pytest.raises(ValueError):
            normalize_cameras([make_camera()], margin=0.0)
        with pytest.raises(ValueError):
            normalize_cameras([], margin=0.8)


class TestViewRecord:
    def test_color_out_of_range(self):
        cam = make_camera(size=8)
        with pytest.raises(ValueError):
            ViewRecord(cam, np.full((8, 8, 3), 1.5))

    def test_size_mismatch(self):
        cam = make_camera(size=8)
        with pytest.raises(ValueError):
            ViewRecord(cam, np.zeros((4, 4, 3)))

    def test_bad_labels(self):
        cam = make_camera(size=8)
        with pytest.raises(ValueError):
            ViewRecord(cam, np.zeros((8, 8, 3)), semantics=np.full((8, 8), 7))


def small_spec(**kw):
    base = dict(n_views=4, image_size=24, texture_seed=9, gt_mesh_resolution=48)
    base.update(kw)
    return SyntheticRoomSpec(**base)


class TestRoomModel:
    def test_axis_aligned_wall_normals(self):
        model = RoomModel(small_spec(wall_yaw=0.0))
        walls = model.face_normals_world[model.face_labels == WALL]
        dots = np.abs(walls @ np.array([1.0, 0, 0]))
        assert np.all((np.abs(dots) < 1e-9) | (np.abs(dots - 1) < 1e-9))

    def test_sdf_sign(self):
        model = RoomModel(small_spec())
        assert model.sdf(np.zeros((1, 3)))[0] > 0          # air inside the room
        outside = np.array([[10.0, 0, 0]])
        assert model.sdf(outside)[0] < 0                   # solid outside

    def test_floor_label_up(self):
        model = RoomModel(small_spec(wall_yaw=0.3))
        floor_normals = model.face_normals_world[model.face_labels == FLOOR]
        assert np.allclose(floor_normals[:, 2], 1.0)


class TestGenerator:
    def test_zero_noise_labels_match_exact(self, tmp_path):
        spec = small_spec(label_noise_rate=0.0)
        generate_synthetic_room(spec, out_dir=tmp_path)
        for f in sorted((tmp_path / "semantic").glob("*.png")):
            sem = fileio.read_label_png(f)
            exact = fileio.read_label_png(tmp_path / "gt" / "semantic_exact" / f.name)
            assert np.array_equal(sem, exact)

    def test_depth_sparsity_exact_count(self):
        spec = small_spec(depth_sparsity=0.3, image_size=64)
        ds = generate_synthetic_room(spec)
        expect = round(0.3 * 64 * 64)
        for view in ds.views:
            assert int((view.depth > 0).sum()) == expect

    def test_deterministic(self):
        spec = small_spec(label_noise_rate=0.1, depth_sparsity=0.4)
        a = generate_synthetic_room(spec)
        b = generate_synthetic_room(spec)
        for va, vb in zip(a.views, b.views):
            assert np.array_equal(va.color, vb.color)
            assert np.array_equal(va.depth, vb.depth)
            assert np.array_equal(va.semantics, vb.semantics)
            assert np.array_equal(va.camera.center, vb.camera.center)
        assert np.array_equal(a.gt_mesh.vertices, b.gt_mesh.vertices)

    def test_corruption_band_and_classes(self, tmp_path):
        from scipy import ndimage

        spec = small_spec(label_noise_rate=0.35, image_size=48)
        generate_synthetic_room(spec, out_dir=tmp_path)
        touched_any = False
        for f in sorted((tmp_path / "semantic").glob("*.png")):
            sem = file_labels_to_class(fileio.read_label_png(f))
            exact = file_labels_to_class(
                fileio.read_label_png(tmp_path / "gt" / "semantic_exact" / f.name))
            changed = sem != exact
            if not changed.any():
                continue
            touched_any = True
            # only floor<->wall flips
            assert set(np.unique(exact[changed])) <= {FLOOR, WALL}
            assert set(np.unique(sem[changed])) <= {FLOOR, WALL}
            assert np.all(sem[changed] != exact[changed])
            # flipped pixels lie within the 3-pixel boundary band
            floor, wall = exact == FLOOR, exact == WALL
            four = ndimage.generate_binary_structure(2, 1)
            cross = (ndimage.binary_dilation(floor, four) & wall) | \
                    (ndimage.binary_dilation(wall, four) & floor)
            band = ndimage.binary_dilation(cross, np.ones((3, 3), bool), iterations=3)
            assert band[changed].all()
        assert touched_any

    def test_cameras_inside_unit_sphere(self, tiny_room):
        for v in tiny_room.views:
            assert np.linalg.norm(v.camera.center) <= 1.0

    def test_unproject_reproject_roundtrip(self, tmp_path):
        spec = small_spec()
        generate_synthetic_room(spec, out_dir=tmp_path)
        ds = load_scene(tmp_path)
        depth = fileio.read_depth_png(tmp_path / "gt" / "depth_exact" / "000000.png")
        cam_raw = ds.norm_transform.invert_camera(ds.views[0].camera)
        h, w = depth.shape
        jj, ii = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        uv = np.stack([ii.reshape(-1) + 0.5, jj.reshape(-1) + 0.5], axis=-1)
        z = depth.reshape(-1)
        ok = z > 0
        pts = cam_raw.unproject(uv[ok], z[ok])
        u2, v2, z2 = cam_raw.project(pts)
        assert np.abs(u2 - uv[ok, 0]).max() < 1e-4
        assert np.abs(v2 - uv[ok, 1]).max() < 1e-4
        assert np.all(z2 > 0)


class TestLoadScene:
    def write_minimal(self, path: Path, n=3, size=16):
        cam = make_camera(size=size)
        (path / "color").mkdir(parents=True)
        (path / "pose").mkdir()
        with open(path / "intrinsics.txt", "w") as fh:
            fh.write(f"{cam.fx} {cam.fy} {cam.cx} {cam.cy} {size} {size}\n")
        rng = np.random.default_rng(0)
        for i in range(n):
            fileio.write_color_png(path / "color" / f"{i:06d}.png",
                                   rng.random((size, size, 3)))
            pose = np.eye(4)
            pose[:3, 3] = [i * 0.1, 0, 0]
            fileio.write_matrix_txt(path / "pose" / f"{i:06d}.txt", pose)
        return path

    def test_minimal_scene(self, tmp_path):
        self.write_minimal(tmp_path)
        ds = load_scene(tmp_path)
        assert len(ds) == 3
        assert not ds.has_depth and not ds.has_semantics
        assert all(not v.has_depth and not v.has_semantics for v in ds.views)

    def test_pose_image_mismatch(self, tmp_path):
        self.write_minimal(tmp_path, n=5)
        (tmp_path / "color" / "000004.png").unlink()
        with pytest.raises(SceneFormatError, match="mismatch"):
            load_scene(tmp_path)

    def test_missing_intrinsics(self, tmp_path):
        self.write_minimal(tmp_path)
        (tmp_path / "intrinsics.txt").unlink()
        with pytest.raises(SceneFormatError, match="intrinsics"):
            load_scene(tmp_path)

    def test_stride_subsampling(self, tmp_path):
        # ScanNet-style export: keep one of every ten frames
        self.write_minimal(tmp_path, n=23)
        ds = load_scene(tmp_path, stride=10)
        assert len(ds) == math.ceil(23 / 10)

    def test_unreadable_depth_flagged(self, tmp_path):
        self.write_minimal(tmp_path, n=2)
        (tmp_path / "depth").mkdir()
        (tmp_path / "depth" / "000000.png").write_bytes(b"not a png")
        ds = load_scene(tmp_path)
        assert "depth_unreadable" in ds.views[0].warnings
        assert ds.views[0].depth is None

    def test_roundtrip_generated_scene(self, tmp_path):
        spec = small_spec(label_noise_rate=0.1, depth_sparsity=0.5)
        ds_mem = generate_synthetic_room(spec, out_dir=tmp_path)
        ds = load_scene(tmp_path)
        assert len(ds) == len(ds_mem)
        for vm, vl in zip(ds_mem.views, ds.views):
            assert np.allclose(vm.camera.center, vl.camera.center, atol=1e-9)
            assert np.array_equal(vm.semantics, vl.semantics)
            # depth survives the millimeter quantization of the PNG format
            assert np.abs(vm.depth - vl.depth).max() < 5e-4
        assert ds.gt_mesh is not None and ds.gt_sdf is not None
        pts = np.random.default_rng(3).uniform(-0.5, 0.5, size=(50, 3))
        assert np.allclose(ds.gt_sdf(pts), ds_mem.gt_sdf(pts), atol=1e-9)

    def test_semantic_remap(self, tmp_path):
        self.write_minimal(tmp_path, n=1)
        (tmp_path / "semantic").mkdir()
        raw = np.zeros((16, 16), dtype=np.uint8)
        raw[:4] = 1    # scannet wall
        raw[4:8] = 2   # scannet floor
        raw[8:12] = 5  # some other class
        fileio.write_label_png(tmp_path / "semantic" / "000000.png", raw)
        ds = load_scene(tmp_path, semantic_remap="scannet40")
        sem = ds.views[0].semantics
        assert np.all(sem[:4] == 2)      # wall file id
        assert np.all(sem[4:8] == 1)     # floor file id
        assert np.all(sem[8:12] == 0)


class TestLabelMapping:
    def test_roundtrip(self):
        classes = np.array([FLOOR, WALL, OTHER])
        assert np.array_equal(file_labels_to_class(class_to_file_labels(classes)), classes)

    def test_file_convention(self):
        assert file_labels_to_class(np.array([0]))[0] == OTHER
        assert file_labels_to_class(np.array([1]))[0] == FLOOR
        assert file_labels_to_class(np.array([2]))[0] == WALL


class TestNormTransform:
    def test_apply_invert(self):
        t = NormTransform(0.5, np.eye(3), np.array([0.1, -0.2, 0.3]))
        pts = np.random.default_rng(0).normal(size=(10, 3))
        assert np.allclose(t.invert_points(t.apply_points(pts)), pts, atol=1e-12)

    def test_camera_projection_invariant(self):
        # normalized cameras must project normalized points to the same pixels
        cam = make_camera(center=(0.2, 0.1, -0.3))
        t = NormTransform(0.37, np.eye(3), np.array([0.5, 0.1, 0.2]))
        pts = np.random.default_rng(1).normal(size=(20, 3)) + [0, 0, 5.0]
        u1, v1, _ = cam.project(pts)
        cam_n = t.apply_camera(cam)
        u2, v2, _ = cam_n.project(t.apply_points(pts))
        assert np.allclose(u1, u2, atol=1e-9)
        assert np.allclose(v1, v2, atol=1e-9)

    def test_serialization(self):
        t = NormTransform(0.5, np.eye(3), np.array([1.0, 2.0, 3.0]))
        t2 = NormTransform.from_dict(t.to_dict())
        assert t2.scale == t.scale
        assert np.array_equal(t2.translation, t.translation)


def test_generated_ply_is_readable(tmp_path):
    spec = small_spec()
    generate_synthetic_room(spec, out_dir=tmp_path)
    mesh = read_ply(tmp_path / "gt_mesh.ply")
    assert len(mesh.vertices) > 100
    assert len(mesh.faces) > 100
