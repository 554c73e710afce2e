# synth_data.py
# Deterministic paired infrared/visible sequences with ground-truth flow and masks

import os
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Tuple

import numpy as np
from scipy import ndimage

from config_manager import ConfigError
from media_io import flo_name, read_scene_values, write_flo, write_frames

logger = logging.getLogger("SynthData")

TEXTURE_CELL = 6
OBJECT_TEXTURE_CELL = 3
OBJECT_TEXTURE_AMPLITUDE = 0.35


@dataclass(frozen=True)
class SceneObject:
    """A rectangle or disk whose bounding box top-left starts at (x, y) and moves (vx, vy) per frame"""
    shape: str
    size: float
    x: float
    y: float
    vx: float
    vy: float
    ir: float
    vis: float

    def position(self, t: int) -> Tuple[float, float]:
        return self.x + self.vx * t, self.y + self.vy * t

    @property
    def moving(self) -> bool:
        return self.vx != 0 or self.vy != 0


def default_objects() -> Tuple[SceneObject, ...]:
    return (
        SceneObject("rect", 16, 16, 24, 2, 0, 0.9, 0.35),
        SceneObject("disk", 16, 64, 64, -1, -1, 0.8, 0.3),
    )


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    height: int = 96
    width: int = 96
    frames: int = 10
    vis_texture: float = 0.5
    ir_base: float = 0.2
    noise_ir: float = 0.01
    noise_vis: float = 0.01
    objects: Tuple[SceneObject, ...] = field(default_factory=default_objects)

    def validate(self) -> "SceneSpec":
        if self.height < 1 or self.width < 1 or self.frames < 1:
            raise ConfigError(f"scene size must be positive, got {self.height}×{self.width}×{self.frames}")
        for obj in self.objects:
            if obj.shape not in ("rect", "disk"):
                raise ConfigError(f"unknown object shape '{obj.shape}'")
            if obj.size <= 0 or obj.size > min(self.height, self.width):
                raise ConfigError(f"object size {obj.size} does not fit a {self.height}×{self.width} frame")
        return self

    @classmethod
    def from_file(cls, path: str) -> "SceneSpec":
        values, objects = read_scene_values(path)
        ints = {k: int(v) for k, v in values.items() if k in ("seed", "height", "width", "frames")}
        floats = {k: v for k, v in values.items() if k not in ints}
        spec = replace(cls(), **ints, **floats)
        if objects:
            spec = replace(spec, objects=tuple(SceneObject(**o) for o in objects))
        return spec.validate()


@dataclass
class Scene:
    ir: np.ndarray                                 # T×H×W
    vis: np.ndarray                                # T×H×W
    flows: Dict[Tuple[int, int], np.ndarray]       # (a, b) -> H×W×2, a(p) moves to b(p + flow)
    masks: np.ndarray                              # T×H×W bool


def _value_noise(rng: np.random.Generator, height: int, width: int, cell: int) -> np.ndarray:
    """Seeded lattice read bilinearly, then 3×3 smoothed; values in [0, 1]"""
    lattice = rng.random((height // cell + 2, width // cell + 2))
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    sampled = ndimage.map_coordinates(lattice, [ys / cell, xs / cell], order=1, mode="nearest")
    return ndimage.uniform_filter(sampled, size=3, mode="nearest")


def _coverage(obj: SceneObject, t: int, height: int, width: int) -> np.ndarray:
    """Anti-aliased footprint of an object at frame t"""
    ox, oy = obj.position(t)
    rows = np.arange(height, dtype=np.float64)
    cols = np.arange(width, dtype=np.float64)
    if obj.shape == "rect":
        cover_y = np.clip(np.minimum(rows + 1, oy + obj.size) - np.maximum(rows, oy), 0, 1)
        cover_x = np.clip(np.minimum(cols + 1, ox + obj.size) - np.maximum(cols, ox), 0, 1)
        return cover_y[:, None] * cover_x[None, :]
    radius = obj.size / 2
    cy, cx = oy + radius, ox + radius
    dist = np.hypot(rows[:, None] + 0.5 - cy, cols[None, :] + 0.5 - cx)
    return np.clip(radius + 0.5 - dist, 0, 1)


def _object_texture(lattice: np.ndarray, obj: SceneObject, t: int, height: int, width: int) -> np.ndarray:
    """Texture fixed to the object: read in object-local coordinates"""
    ox, oy = obj.position(t)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    local = [(ys - oy) / OBJECT_TEXTURE_CELL + 1, (xs - ox) / OBJECT_TEXTURE_CELL + 1]
    return ndimage.map_coordinates(lattice, local, order=1, mode="nearest")


def generate(spec: SceneSpec) -> Scene:
    """
    Render the scene. Visible frames carry a textured background and dim
    textured objects; infrared frames a flat background and bright objects.
    """
    spec.validate()
    h, w, count = spec.height, spec.width, spec.frames
    rng = np.random.default_rng(spec.seed)
    background = spec.vis_texture * _value_noise(rng, h, w, TEXTURE_CELL) + (1 - spec.vis_texture) * 0.5
    lattices = []
    for obj in spec.objects:
        cells = int(np.ceil(obj.size / OBJECT_TEXTURE_CELL)) + 3
        lattices.append(rng.random((cells, cells)) - 0.5)

    ir = np.empty((count, h, w))
    vis = np.empty((count, h, w))
    masks = np.zeros((count, h, w), dtype=bool)
    coverages = []
    for t in range(count):
        ir_frame = np.full((h, w), spec.ir_base)
        vis_frame = background.copy()
        frame_cover = []
        for obj, lattice in zip(spec.objects, lattices):
            alpha = _coverage(obj, t, h, w)
            texture = _object_texture(lattice, obj, t, h, w)
            vis_value = obj.vis + OBJECT_TEXTURE_AMPLITUDE * texture
            ir_value = obj.ir + 0.25 * OBJECT_TEXTURE_AMPLITUDE * texture
            vis_frame = (1 - alpha) * vis_frame + alpha * vis_value
            ir_frame = (1 - alpha) * ir_frame + alpha * ir_value
            if obj.moving:
                masks[t] |= alpha > 0.5
            frame_cover.append(alpha)
        coverages.append(frame_cover)
        ir[t] = np.clip(ir_frame + rng.normal(0.0, spec.noise_ir, (h, w)), 0, 1)
        vis[t] = np.clip(vis_frame + rng.normal(0.0, spec.noise_vis, (h, w)), 0, 1)

    flows = {}
    for t in range(count - 1):
        forward = np.zeros((h, w, 2), dtype=np.float32)
        backward = np.zeros((h, w, 2), dtype=np.float32)
        for obj, cover_t, cover_next in zip(spec.objects, coverages[t], coverages[t + 1]):
            forward[cover_t > 0.5] = (obj.vx, obj.vy)
            backward[cover_next > 0.5] = (-obj.vx, -obj.vy)
        flows[(t, t + 1)] = forward
        flows[(t + 1, t)] = backward
    logger.info(f"Generated {count} frames of {h}×{w} with {len(spec.objects)} objects (seed {spec.seed})")
    return Scene(ir=ir.astype(np.float32), vis=vis.astype(np.float32), flows=flows, masks=masks)


def write_scene(scene: Scene, out_dir: str) -> Dict[str, str]:
    """Lay out ir/, vis/, flow/ and mask/ under out_dir"""
    layout = {name: os.path.join(out_dir, name) for name in ("ir", "vis", "flow", "mask")}
    write_frames(layout["ir"], scene.ir)
    write_frames(layout["vis"], scene.vis)
    write_frames(layout["mask"], scene.masks.astype(np.float32))
    os.makedirs(layout["flow"], exist_ok=True)
    for (a, b), flow in sorted(scene.flows.items()):
        write_flo(os.path.join(layout["flow"], flo_name(a, b)), flow)
    logger.info(f"Wrote scene to {out_dir}")
    return layout


def moving_box(masks: np.ndarray) -> Tuple[slice, slice]:
    """Bounding box of every masked pixel across the sequence"""
    rows = np.flatnonzero(masks.any(axis=(0, 2)))
    cols = np.flatnonzero(masks.any(axis=(0, 1)))
    if rows.size == 0:
        return slice(0, masks.shape[1]), slice(0, masks.shape[2])
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def object_list(spec: SceneSpec) -> List[str]:
    return [f"{o.shape} {o.size:g} at ({o.x:g}, {o.y:g}) v=({o.vx:g}, {o.vy:g})" for o in spec.objects]
