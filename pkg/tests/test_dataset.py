"""Synthetic dataset generation, manifests, and loading."""

import math

import numpy as np
import pytest

from liftview.camera import azimuth_elevation_radius
from liftview.dataset import ManifestError, generate_dataset, load_dataset, \
    load_manifest, orbit_intrinsics


def _tree_bytes(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    path = generate_dataset(root, n_scenes=3, views_per_scene=5,
                            resolution=16, seed=1, gt_samples=8)
    return root, load_manifest(path)


def test_intrinsics_follow_resolution():
    k = orbit_intrinsics(32)
    assert k["fx"] == k["fy"] == 0.9 * 32
    assert k["cx"] == k["cy"] == 15.5
    assert k["width"] == k["height"] == 32


def test_generated_tree_layout(tiny_dataset):
    root, manifest = tiny_dataset
    assert manifest.resolution == 16
    assert len(manifest.rows) == 3
    for scene_id, _, _, view_count, split in manifest.rows:
        assert split in ("train", "val", "test")
        scene_dir = root / "scenes" / scene_id
        assert (scene_dir / "poses.txt").is_file()
        for v in range(view_count):
            assert (scene_dir / "images" / f"view_{v:03d}.png").is_file()
            assert (scene_dir / "images" / f"view_{v:03d}.pfm").is_file()


def test_manifest_scene_ids(tiny_dataset):
    _, manifest = tiny_dataset
    all_ids = manifest.scene_ids()
    assert len(all_ids) == len(set(all_ids)) == 3
    per_split = [manifest.scene_ids(s) for s in ("train", "val", "test")]
    assert sorted(sum(per_split, [])) == sorted(all_ids)


def test_poses_sit_on_the_orbit(tiny_dataset):
    root, _ = tiny_dataset
    scenes = load_dataset(root / "manifest.txt")
    for scene in scenes:
        for pose in scene.poses:
            az, el, r = azimuth_elevation_radius(pose)
            assert abs(r - 1.3) < 1e-9
            assert math.radians(-30.0) - 1e-9 <= el <= math.radians(60.0) + 1e-9
            assert -math.pi <= az <= math.pi


def test_loaded_images_are_float_targets(tiny_dataset):
    root, _ = tiny_dataset
    scenes = load_dataset(root / "manifest.txt")
    for scene in scenes:
        assert len(scene.images) == len(scene.poses) == scene.view_count
        for img in scene.images:
            assert img.shape == (3, 16, 16)
            assert img.dtype == np.float64
            assert np.all(np.isfinite(img))
            assert img.min() >= 0.0 and img.max() <= 1.0


def test_split_filter(tiny_dataset):
    root, manifest = tiny_dataset
    per_split = {s: len(manifest.scene_ids(s))
                 for s in ("train", "val", "test")}
    for split, count in per_split.items():
        if count == 0:
            with pytest.raises(ManifestError):
                load_dataset(root / "manifest.txt", split=split)
        else:
            assert len(load_dataset(root / "manifest.txt", split=split)) == count
    assert sum(per_split.values()) == 3


def test_regeneration_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_dataset(a, n_scenes=2, views_per_scene=3, resolution=16,
                     seed=9, gt_samples=4)
    generate_dataset(b, n_scenes=2, views_per_scene=3, resolution=16,
                     seed=9, gt_samples=4)
    ta, tb = _tree_bytes(a), _tree_bytes(b)
    assert ta.keys() == tb.keys()
    assert all(ta[k] == tb[k] for k in ta)


def test_different_seed_changes_images(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_dataset(a, n_scenes=1, views_per_scene=2, resolution=16,
                     seed=1, gt_samples=4)
    generate_dataset(b, n_scenes=1, views_per_scene=2, resolution=16,
                     seed=2, gt_samples=4)
    ta, tb = _tree_bytes(a), _tree_bytes(b)
    assert any(ta[k] != tb.get(k) for k in ta if k.endswith(".pfm"))


def test_manifest_errors(tmp_path):
    path = tmp_path / "manifest.txt"

    def check(text):
        path.write_text(text)
        with pytest.raises(ManifestError):
            load_manifest(path)

    check("")  # missing resolution header
    check("resolution 16\nscene0 poses.txt scenes/scene0 5\n")  # 4 fields
    check("resolution 16\ns0 p.txt d 5 train\ns0 p.txt d 5 train\n")  # dup id
    check("resolution 16\ns0 p.txt d 5 holdout\n")  # unknown split
    check("resolution 16\ns0 p.txt d five train\n")  # non-numeric count
    check("resolution zero\n")


def test_load_missing_view_file(tmp_path):
    generate_dataset(tmp_path, n_scenes=1, views_per_scene=2, resolution=16,
                     seed=3, gt_samples=4)
    victim = next((tmp_path / "scenes").rglob("view_001.pfm"))
    victim.unlink()
    with pytest.raises(ManifestError):
        load_dataset(tmp_path / "manifest.txt")
