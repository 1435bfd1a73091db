"""Synthetic layout-annotated videos: textured boxes on camera trajectories.

Scenes hold 1-3 axis-aligned boxes (category, center, per-axis size, albedo)
and a camera that translates linearly with a bounded yaw sweep. Rendering
projects each box's front face through a pinhole camera and fills its
bounding rectangle nearest-depth-wins, which yields pixel-aligned RGB plus
exactly the control-signal schema the training stack consumes: sparse
normalized depth, semantic category map, and binary mask.

Datasets are directories of samples, each with four ACDT tensors and a
scene.json sidecar, indexed by a manifest.txt of "sample_dir prompt_class"
lines. All bytes are a pure function of (n, seed, geometry).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .acdt import load_acdt, save_acdt
from .layout import ControlSignals

NUM_CATEGORIES = 5
FOCAL_PX = 20.0
NEAR_PLANE = 0.8
MAX_SCENE_TRIES = 100

# categories are object identities: each carries a base color, jittered per
# instance, so the semantic layout genuinely predicts appearance
CATEGORY_ALBEDO = {
    1: (0.80, 0.25, 0.20),
    2: (0.20, 0.75, 0.30),
    3: (0.20, 0.35, 0.85),
    4: (0.85, 0.80, 0.20),
    5: (0.75, 0.20, 0.80),
}

# sampling ranges for generate_scene (world units / radians)
SIZE_RANGE = (0.6, 1.6)
CENTER_X = (-1.2, 1.2)
CENTER_Y = (-0.8, 0.8)
CENTER_Z = (3.0, 5.5)
ALBEDO_JITTER = (0.8, 1.2)
CAM_START_X = (-0.4, 0.4)
CAM_START_Y = (-0.25, 0.25)
CAM_DRIFT_XY = (-0.5, 0.5)
CAM_DRIFT_Z = (-0.3, 0.3)
YAW_START = (-0.1, 0.1)
YAW_SWEEP = (-0.25, 0.25)


@dataclass
class BoxSpec:
    category: int
    center: np.ndarray   # (3,)
    size: np.ndarray     # (3,)
    albedo: np.ndarray   # (3,) in [0, 1]


@dataclass
class CameraSpec:
    focal: float
    positions: np.ndarray  # (T, 3)
    yaws: np.ndarray       # (T,)


@dataclass
class SceneSpec:
    objects: list[BoxSpec]
    camera: CameraSpec
    frames: int
    height: int
    width: int


@dataclass
class Sample:
    rgb: np.ndarray             # (T, H, W, 3) float32 in [0, 1]
    signals: ControlSignals
    prompt_class: int
    scene: SceneSpec | None = None
    name: str = ""


def _world_to_cam(points: np.ndarray, position: np.ndarray, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    rot_t = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    return (points - position) @ rot_t.T


def _project_face(box: BoxSpec, position: np.ndarray, yaw: float, focal: float,
                  height: int, width: int):
    """Project the box's front-face rectangle; returns (ix0, ix1, iy0, iy1, depth)
    as an inclusive pixel range, or None when the face is behind/outside."""
    cx, cy, cz = box.center
    sx, sy, sz = box.size
    zf = cz - sz / 2.0
    corners = np.array([
        [cx - sx / 2, cy - sy / 2, zf],
        [cx - sx / 2, cy + sy / 2, zf],
        [cx + sx / 2, cy - sy / 2, zf],
        [cx + sx / 2, cy + sy / 2, zf],
    ])
    cam = _world_to_cam(corners, position, yaw)
    center_cam = _world_to_cam(box.center[None, :] - np.array([[0.0, 0.0, sz / 2.0]]),
                               position, yaw)[0]
    depth = float(center_cam[2])
    if depth <= NEAR_PLANE or np.any(cam[:, 2] <= NEAR_PLANE):
        return None
    u = (width - 1) / 2.0 + focal * cam[:, 0] / cam[:, 2]
    v = (height - 1) / 2.0 - focal * cam[:, 1] / cam[:, 2]
    ix0 = max(0, math.ceil(u.min()))
    ix1 = min(width - 1, math.floor(u.max()))
    iy0 = max(0, math.ceil(v.min()))
    iy1 = min(height - 1, math.floor(v.max()))
    if ix0 > ix1 or iy0 > iy1:
        return None
    return ix0, ix1, iy0, iy1, depth


def _background(height: int, width: int) -> np.ndarray:
    rows = 0.1 + 0.2 * np.arange(height) / max(height - 1, 1)
    return np.broadcast_to(rows[:, None, None], (height, width, 3)).astype(np.float32)


def render(scene: SceneSpec) -> Sample:
    """Rasterize a scene into RGB plus pixel-aligned control signals.

    Nearest depth wins per pixel; object color is albedo shaded by a 2/depth
    falloff; the depth channel stores nearest depth normalized by the
    per-scene maximum so object values lie in (0, 1].
    """
    T, H, W = scene.frames, scene.height, scene.width
    rgb = np.empty((T, H, W, 3), dtype=np.float32)
    rgb[:] = _background(H, W)
    raw_depth = np.zeros((T, H, W), dtype=np.float64)
    sem = np.zeros((T, H, W), dtype=np.int32)

    for f in range(T):
        pos, yaw = scene.camera.positions[f], float(scene.camera.yaws[f])
        for box in scene.objects:
            hit = _project_face(box, pos, yaw, scene.camera.focal, H, W)
            if hit is None:
                continue
            ix0, ix1, iy0, iy1, depth = hit
            region = (f, slice(iy0, iy1 + 1), slice(ix0, ix1 + 1))
            closer = (raw_depth[region] == 0) | (raw_depth[region] > depth)
            raw_depth[region] = np.where(closer, depth, raw_depth[region])
            sem[region] = np.where(closer, box.category, sem[region])
            shade = min(1.0, 2.0 / depth)
            color = (box.albedo * shade).astype(np.float32)
            rgb[region] = np.where(closer[..., None], color, rgb[region])

    mask = (sem != 0).astype(np.float32)
    max_depth = raw_depth.max()
    depth_norm = (raw_depth / max_depth if max_depth > 0 else raw_depth).astype(np.float32)
    signals = ControlSignals(sparse_depth=depth_norm, semantic_map=sem, mask=mask).validate()
    largest = max(scene.objects, key=lambda b: float(np.prod(b.size)))
    return Sample(rgb=rgb, signals=signals, prompt_class=largest.category, scene=scene)


def _all_objects_visible(scene: SceneSpec) -> bool:
    for f in range(scene.frames):
        pos, yaw = scene.camera.positions[f], float(scene.camera.yaws[f])
        for box in scene.objects:
            if _project_face(box, pos, yaw, scene.camera.focal,
                             scene.height, scene.width) is None:
                return False
    return True


def generate_scene(seed, frames: int = 8, height: int = 16, width: int = 16) -> SceneSpec:
    """Seeded random scene; rejection-samples until every object projects in
    front of the camera with at least one pixel in every frame."""
    rng = np.random.default_rng(seed)
    for _ in range(MAX_SCENE_TRIES):
        n_obj = int(rng.integers(1, 4))
        objects = []
        for _ in range(n_obj):
            category = int(rng.integers(1, NUM_CATEGORIES + 1))
            albedo = np.clip(
                np.array(CATEGORY_ALBEDO[category]) * rng.uniform(*ALBEDO_JITTER, size=3),
                0.05, 0.95,
            )
            objects.append(BoxSpec(
                category=category,
                center=np.array([rng.uniform(*CENTER_X), rng.uniform(*CENTER_Y),
                                 rng.uniform(*CENTER_Z)]),
                size=rng.uniform(*SIZE_RANGE, size=3),
                albedo=albedo,
            ))
        start = np.array([rng.uniform(*CAM_START_X), rng.uniform(*CAM_START_Y), 0.0])
        drift = np.array([rng.uniform(*CAM_DRIFT_XY), rng.uniform(*CAM_DRIFT_XY),
                          rng.uniform(*CAM_DRIFT_Z)])
        yaw0 = rng.uniform(*YAW_START)
        sweep = rng.uniform(*YAW_SWEEP)
        frac = np.arange(frames) / max(frames - 1, 1)
        camera = CameraSpec(
            focal=FOCAL_PX,
            positions=start[None, :] + frac[:, None] * drift[None, :],
            yaws=yaw0 + frac * sweep,
        )
        scene = SceneSpec(objects=objects, camera=camera, frames=frames,
                          height=height, width=width)
        if _all_objects_visible(scene):
            return scene
    raise RuntimeError(f"generate_scene: no visible scene after {MAX_SCENE_TRIES} tries")


# -- dataset on disk ---------------------------------------------------------


def scene_to_dict(scene: SceneSpec) -> dict:
    return {
        "frames": scene.frames,
        "height": scene.height,
        "width": scene.width,
        "camera": {
            "focal": scene.camera.focal,
            "positions": scene.camera.positions.tolist(),
            "yaws": scene.camera.yaws.tolist(),
        },
        "objects": [
            {
                "category": box.category,
                "center": box.center.tolist(),
                "size": box.size.tolist(),
                "albedo": box.albedo.tolist(),
            }
            for box in scene.objects
        ],
    }


def scene_from_dict(d: dict) -> SceneSpec:
    return SceneSpec(
        objects=[
            BoxSpec(category=int(o["category"]), center=np.array(o["center"]),
                    size=np.array(o["size"]), albedo=np.array(o["albedo"]))
            for o in d["objects"]
        ],
        camera=CameraSpec(focal=float(d["camera"]["focal"]),
                          positions=np.array(d["camera"]["positions"]),
                          yaws=np.array(d["camera"]["yaws"])),
        frames=int(d["frames"]),
        height=int(d["height"]),
        width=int(d["width"]),
    )


def write_dataset(n: int, out_dir, seed: int, frames: int = 8, height: int = 16,
                  width: int = 16) -> Path:
    """Write n samples plus manifest.txt; bytes depend only on the arguments."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        scene = generate_scene((seed, i), frames=frames, height=height, width=width)
        sample = render(scene)
        name = f"sample_{i:05d}"
        sdir = out / name
        sdir.mkdir(exist_ok=True)
        save_acdt(sdir / "rgb.acdt", sample.rgb)
        save_acdt(sdir / "depth.acdt", sample.signals.sparse_depth)
        save_acdt(sdir / "sem.acdt", sample.signals.semantic_map.astype(np.float32))
        save_acdt(sdir / "mask.acdt", sample.signals.mask)
        (sdir / "scene.json").write_text(
            json.dumps(scene_to_dict(scene), sort_keys=True, indent=2) + "\n"
        )
        entries.append(f"{name} {sample.prompt_class}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(entries) + ("\n" if entries else ""))
    return manifest


def load_sample(sample_dir, prompt_class: int | None = None) -> Sample:
    sdir = Path(sample_dir)
    rgb = load_acdt(sdir / "rgb.acdt")
    signals = ControlSignals(
        sparse_depth=load_acdt(sdir / "depth.acdt"),
        semantic_map=load_acdt(sdir / "sem.acdt").astype(np.int32),
        mask=load_acdt(sdir / "mask.acdt"),
    ).validate()
    scene = None
    scene_path = sdir / "scene.json"
    if scene_path.exists():
        scene = scene_from_dict(json.loads(scene_path.read_text()))
    if prompt_class is None:
        if scene is None:
            raise ValueError(f"{sdir}: prompt class unknown (no manifest entry or scene.json)")
        prompt_class = max(scene.objects, key=lambda b: float(np.prod(b.size))).category
    return Sample(rgb=rgb, signals=signals, prompt_class=int(prompt_class), scene=scene)


def load_dataset(data_dir) -> list[Sample]:
    root = Path(data_dir)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"{root}: no manifest.txt")
    samples = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, cls = line.split()
        sample = load_sample(root / name, int(cls))
        sample.name = name
        samples.append(sample)
    return samples


def validate_dataset(data_dir) -> list[str]:
    """Schema check; returns a list of problems (empty = conforming)."""
    root = Path(data_dir)
    problems = []
    manifest = root / "manifest.txt"
    if not manifest.exists():
        return [f"{root}: missing manifest.txt"]
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or not parts[1].isdigit():
            problems.append(f"manifest line malformed: {line!r}")
            continue
        name, cls = parts
        sdir = root / name
        if not sdir.is_dir():
            problems.append(f"{name}: sample directory missing")
            continue
        for fname in ("rgb.acdt", "depth.acdt", "sem.acdt", "mask.acdt", "scene.json"):
            if not (sdir / fname).exists():
                problems.append(f"{name}: missing {fname}")
        try:
            sample = load_sample(sdir, int(cls))
        except Exception as exc:  # schema errors surface as messages, not crashes
            problems.append(f"{name}: unreadable ({exc})")
            continue
        T, H, W, C = sample.rgb.shape
        if C != 3:
            problems.append(f"{name}: rgb has {C} channels, expected 3")
        if sample.signals.mask.shape != (T, H, W):
            problems.append(f"{name}: control signals not aligned with rgb")
        if sample.rgb.min() < 0 or sample.rgb.max() > 1:
            problems.append(f"{name}: rgb values outside [0, 1]")
        mask = sample.signals.mask
        if not np.isin(mask, (0.0, 1.0)).all():
            problems.append(f"{name}: mask is not binary")
        if not mask.any():
            problems.append(f"{name}: empty mask")
        masked = mask.astype(bool)
        if np.any(sample.signals.sparse_depth[masked] <= 0):
            problems.append(f"{name}: masked pixel with nonpositive depth")
        if np.any(sample.signals.sparse_depth[~masked] != 0):
            problems.append(f"{name}: unmasked pixel with nonzero depth")
        if np.any(sample.signals.semantic_map[~masked] != 0):
            problems.append(f"{name}: unmasked pixel with nonzero category")
        if not (1 <= int(cls) <= NUM_CATEGORIES):
            problems.append(f"{name}: prompt class {cls} out of range")
    return problems


def video_to_ppm_frames(video: np.ndarray, out_dir, prefix: str = "frame"):
    """Dump a (T, H, W, 3) video in [0, 1] as binary P6 PPM files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.asarray(video), 0.0, 1.0)
    for f in range(data.shape[0]):
        frame = (data[f] * 255.0 + 0.5).astype(np.uint8)
        header = f"P6\n{frame.shape[1]} {frame.shape[0]}\n255\n".encode()
        (out / f"{prefix}_{f:03d}.ppm").write_bytes(header + frame.tobytes())
