"""Procedural scenes built from constant-density primitives.

A scene is a handful of axis-aligned boxes and spheres inside the unit cube
[-0.5, 0.5]^3, each with a uniform density and albedo. The scene field at a
point sums primitive densities (inclusive of boundaries) and mixes albedos
weighted by density, so overlapping shapes blend instead of popping.
Everything is a pure function of the scene's seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from liftview import renderer
from liftview.camera import CameraPose


@dataclass(frozen=True)
class ScenePrimitive:
    """One solid shape: an axis-aligned box or a sphere.

    For boxes `extent` holds half-sizes per axis; for spheres all three
    entries equal the radius. Containment is inclusive on the boundary.
    """

    kind: str  # "box" | "sphere"
    center: tuple[float, float, float]
    extent: tuple[float, float, float]
    albedo: tuple[float, float, float]
    density: float

    def __post_init__(self):
        if self.kind not in ("box", "sphere"):
            raise ValueError(f"unknown primitive kind: {self.kind!r}")

    def inside(self, points: np.ndarray) -> np.ndarray:
        """Boolean containment for [N, 3] points."""
        d = np.asarray(points, dtype=np.float64) - np.asarray(self.center)
        if self.kind == "box":
            return (np.abs(d) <= np.asarray(self.extent)).all(axis=-1)
        return (d * d).sum(axis=-1) <= self.extent[0] ** 2


@dataclass(frozen=True)
class SyntheticScene:
    scene_id: str
    primitives: tuple[ScenePrimitive, ...]

    def field(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Density and albedo at [N, 3] points: (sigma [N], rgb [N, 3])."""
        points = np.asarray(points, dtype=np.float64)
        sigma = np.zeros(points.shape[0])
        weighted = np.zeros((points.shape[0], 3))
        for p in self.primitives:
            m = p.inside(points)
            sigma += p.density * m
            weighted += (p.density * m)[:, None] * np.asarray(p.albedo)
        rgb = np.divide(weighted, sigma[:, None], out=np.zeros_like(weighted),
                        where=sigma[:, None] > 0.0)
        return sigma, rgb


def generate_scene(seed: int, n_primitives: tuple[int, int] = (1, 4)) -> SyntheticScene:
    """Draw a random scene; same seed, same scene, bit for bit."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(n_primitives[0], n_primitives[1] + 1))
    prims = []
    for _ in range(count):
        kind = "box" if rng.random() < 0.5 else "sphere"
        center = rng.uniform(-0.4, 0.4, size=3)
        if kind == "box":
            ext = rng.uniform(0.08, 0.25, size=3)
        else:
            ext = np.full(3, rng.uniform(0.08, 0.22))
        # keep the whole shape inside the unit cube
        ext = np.minimum(ext, 0.5 - np.abs(center))
        albedo = rng.uniform(0.1, 0.9, size=3)
        density = float(rng.uniform(25.0, 60.0))
        prims.append(ScenePrimitive(kind, tuple(center), tuple(ext),
                                    tuple(albedo), density))
    return SyntheticScene(f"scene{seed:05d}", tuple(prims))


def render_ground_truth(scene: SyntheticScene, pose: CameraPose,
                        n_samples: int = 128, seed: int | None = 0,
                        background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Reference image [3, H, W]; shares sampling and compositing with the
    differentiable renderer."""
    return renderer.render_field(scene.field, pose, n_samples=n_samples,
                                 seed=seed, background=background)
