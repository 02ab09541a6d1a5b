"""Posed multi-view dataset generation and serialization.

A dataset is a directory tree of procedurally generated scenes, each holding
a pose file and per-view images (8-bit PNG for viewing, PFM for float-exact
training targets), tied together by a plain-text manifest.
"""

from __future__ import annotations

import dataclasses
import math
import os

import numpy as np

from .camera import CameraPose, load_poses, orbit_pose, save_poses
from .imageio import load_pfm, save_pfm, save_png
from .scenes import generate_scene, render_ground_truth

ORBIT_RADIUS = 1.3
ELEVATION_RANGE = (math.radians(-30.0), math.radians(60.0))
FOCAL_PER_PIXEL = 0.9  # focal length as a fraction of image width


class ManifestError(ValueError):
    """Malformed or inconsistent dataset manifest."""


@dataclasses.dataclass
class SceneRecord:
    """One manifest row plus the loaded views."""

    scene_id: str
    poses: list[CameraPose]
    images: list[np.ndarray]  # [3,H,W] float in [0,1]
    split: str

    @property
    def view_count(self) -> int:
        return len(self.poses)


@dataclasses.dataclass
class DatasetManifest:
    """Scene table: id, pose file, image dir, view count, split."""

    resolution: int
    rows: list[tuple[str, str, str, int, str]]

    def scene_ids(self, split: str | None = None) -> list[str]:
        return [r[0] for r in self.rows if split is None or r[4] == split]


def _assign_split(index: int, n_scenes: int) -> str:
    """Deterministic scene split: ~1/8 val, ~1/8 test (at least one each when
    the dataset has 3+ scenes), remainder train."""
    if n_scenes < 3:
        return "train"
    n_val = max(1, n_scenes // 8)
    n_test = max(1, n_scenes // 8)
    if index >= n_scenes - n_test:
        return "test"
    if index >= n_scenes - n_test - n_val:
        return "val"
    return "train"


def orbit_intrinsics(resolution: int) -> dict:
    f = FOCAL_PER_PIXEL * resolution
    c = (resolution - 1) / 2.0
    return dict(fx=f, fy=f, cx=c, cy=c, width=resolution, height=resolution)


def generate_dataset(root, n_scenes: int = 16, views_per_scene: int = 24,
                     resolution: int = 32, seed: int = 0,
                     gt_samples: int = 128) -> str:
    """Generate scenes, render ground-truth orbit views, write the tree.

    Cameras sit on a radius-1.3 sphere looking at the origin, azimuth
    uniform, elevation uniform in [-30, 60] degrees. Everything is a pure
    function of the arguments, so a rerun writes byte-identical files.
    Returns the manifest path.
    """
    root = str(root)
    intr = orbit_intrinsics(resolution)
    rows = []
    for i in range(n_scenes):
        scene = generate_scene(seed * 100003 + i)
        rng = np.random.default_rng([seed, i, 7])
        scene_dir = os.path.join(root, "scenes", scene.scene_id)
        image_dir = os.path.join(scene_dir, "images")
        os.makedirs(image_dir, exist_ok=True)
        poses = []
        lo, hi = ELEVATION_RANGE
        for _ in range(views_per_scene):
            az = rng.uniform(0.0, 2.0 * math.pi)
            el = rng.uniform(lo, hi)
            poses.append(orbit_pose(az, el, ORBIT_RADIUS, **intr))
        pose_file = os.path.join(scene_dir, "poses.txt")
        save_poses(pose_file, poses)
        for v, pose in enumerate(poses):
            img = render_ground_truth(scene, pose, n_samples=gt_samples, seed=0)
            save_png(os.path.join(image_dir, f"view_{v:03d}.png"), img)
            save_pfm(os.path.join(image_dir, f"view_{v:03d}.pfm"), img)
        rows.append((scene.scene_id, os.path.join("scenes", scene.scene_id, "poses.txt"),
                     os.path.join("scenes", scene.scene_id, "images"),
                     views_per_scene, _assign_split(i, n_scenes)))
    manifest_path = os.path.join(root, "manifest.txt")
    with open(manifest_path, "w") as fh:
        fh.write(f"resolution {resolution}\n")
        for row in rows:
            fh.write(" ".join(str(x) for x in row) + "\n")
    return manifest_path


def load_manifest(path) -> DatasetManifest:
    rows = []
    resolution = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "resolution":
                if len(parts) != 2 or not parts[1].isdigit():
                    raise ManifestError(f"{path}:{lineno}: bad resolution line")
                resolution = int(parts[1])
                continue
            if len(parts) != 5:
                raise ManifestError(
                    f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            sid, pose_file, image_dir, count, split = parts
            if not count.isdigit():
                raise ManifestError(f"{path}:{lineno}: bad view count {count!r}")
            if split not in ("train", "val", "test"):
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            rows.append((sid, pose_file, image_dir, int(count), split))
    if resolution is None:
        raise ManifestError(f"{path}: missing resolution line")
    if len({r[0] for r in rows}) != len(rows):
        raise ManifestError(f"{path}: duplicate scene ids")
    return DatasetManifest(resolution, rows)


def load_dataset(manifest_path, split: str | None = None) -> list[SceneRecord]:
    """Load scenes (PFM float images) for one split, or all when None.

    Every referenced file must exist; missing files raise ManifestError.
    """
    manifest = load_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(str(manifest_path)))
    scenes = []
    for sid, pose_file, image_dir, count, tag in manifest.rows:
        if split is not None and tag != split:
            continue
        pose_path = os.path.join(base, pose_file)
        if not os.path.isfile(pose_path):
            raise ManifestError(f"{manifest_path}: missing pose file {pose_file}")
        poses = load_poses(pose_path)
        if len(poses) != count:
            raise ManifestError(
                f"{manifest_path}: {sid} lists {count} views, pose file has {len(poses)}")
        images = []
        for v in range(count):
            img_path = os.path.join(base, image_dir, f"view_{v:03d}.pfm")
            if not os.path.isfile(img_path):
                raise ManifestError(f"{manifest_path}: missing image {img_path}")
            images.append(np.asarray(load_pfm(img_path), dtype=np.float64))
        scenes.append(SceneRecord(sid, poses, images, tag))
    if not scenes:
        raise ManifestError(f"{manifest_path}: no scenes in split {split!r}")
    return scenes
