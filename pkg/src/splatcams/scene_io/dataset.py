"""Multi-view capture datasets on disk.

Directory layout::

    scene.json                 devices and frame list
    frames/view{V}_pat{P}.png  projector input (sRGB encoded)
    frames/view{V}_cap{P}.png  camera capture (sRGB encoded)
    frames/view{V}_mask.png    optional projector-reachable mask

``scene.json`` schema::

    {"version": 1,
     "cameras": [{"name": str, "intrinsics": {fx, fy, cx, cy, width, height},
                  "pose": {"quaternion": [w, x, y, z], "translation": [x, y, z]}}, ...],
     "projector": {"intrinsics": {...}, "pose": {...}},
     "frames": [{"view": int, "pattern": path, "capture": path, "mask": path | null,
                 "split": "train" | "eval", "black": bool}, ...]}

Poses map world coordinates into the device frame (x right, y down, z
forward).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from ..core import CameraView, Pinhole, Pose
from .images import DataError, read_mask, read_png, write_mask, write_png

SCENE_FILE = "scene.json"
SCENE_VERSION = 1


@dataclass
class Frame:
    view: int
    pattern: np.ndarray  # [H_p, W_p, 3] in [0, 1], sRGB encoded
    capture: np.ndarray  # [H, W, 3] in [0, 1], sRGB encoded
    split: str = "train"
    black: bool = False
    index: int = 0  # pattern number within the view


@dataclass
class SceneDataset:
    cameras: List[CameraView]
    projector_intrinsics: Pinhole
    projector_pose: Pose
    frames: List[Frame]
    masks: Dict[int, np.ndarray] = field(default_factory=dict)
    root: Optional[Path] = None

    def split(self, name: str) -> List[Frame]:
        return [f for f in self.frames if f.split == name]

    @property
    def train_views(self) -> List[int]:
        return sorted({f.view for f in self.frames if f.split == "train"})

    def mask(self, view: int) -> Optional[np.ndarray]:
        return self.masks.get(view)

    def subset_views(self, views) -> "SceneDataset":
        """Keep the training frames of ``views`` and every eval frame."""
        keep = set(views)
        frames = [f for f in self.frames if f.split != "train" or f.view in keep]
        return SceneDataset(self.cameras, self.projector_intrinsics, self.projector_pose, frames,
                            dict(self.masks), self.root)

    def validate(self) -> None:
        if not self.frames:
            raise DataError("dataset has no frames")
        n_cam = len(self.cameras)
        pk = self.projector_intrinsics
        for i, f in enumerate(self.frames):
            if not 0 <= f.view < n_cam:
                raise DataError(f"frame {i} references unknown view {f.view}")
            cam = self.cameras[f.view].intrinsics
            if f.capture.shape != (cam.height, cam.width, 3):
                raise DataError(f"frame {i}: capture shape {f.capture.shape} != camera {cam.height}x{cam.width}")
            if f.pattern.shape != (pk.height, pk.width, 3):
                raise DataError(f"frame {i}: pattern shape {f.pattern.shape} != projector {pk.height}x{pk.width}")
            if f.split not in ("train", "eval"):
                raise DataError(f"frame {i}: unknown split {f.split!r}")
        for v, m in self.masks.items():
            cam = self.cameras[v].intrinsics
            if m.shape != (cam.height, cam.width):
                raise DataError(f"mask for view {v} has shape {m.shape}")


def _pose_json(p: Pose) -> dict:
    return {"quaternion": [float(x) for x in p.rotation], "translation": [float(x) for x in p.translation]}


def _pose_from_json(d: dict, where: str) -> Pose:
    try:
        return Pose(np.asarray(d["quaternion"], dtype=np.float64), np.asarray(d["translation"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}: invalid pose ({exc})") from exc


def _pinhole_from_json(d: dict, where: str) -> Pinhole:
    try:
        return Pinhole(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]),
                       int(d["height"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}: invalid intrinsics ({exc})") from exc


def frame_names(view: int, pattern: int):
    return f"frames/view{view}_pat{pattern}.png", f"frames/view{view}_cap{pattern}.png"


def save_dataset(ds: SceneDataset, root) -> Path:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    frames_json = []
    for f in ds.frames:
        pat, cap = frame_names(f.view, f.index)
        write_png(root / pat, f.pattern)
        write_png(root / cap, f.capture)
        entry = {"view": f.view, "pattern": pat, "capture": cap, "split": f.split, "black": f.black, "mask": None}
        if f.view in ds.masks:
            entry["mask"] = f"frames/view{f.view}_mask.png"
        frames_json.append(entry)
    for v, m in sorted(ds.masks.items()):
        write_mask(root / f"frames/view{v}_mask.png", m)
    scene = {
        "version": SCENE_VERSION,
        "cameras": [{"name": c.name or f"view{i}", "intrinsics": c.intrinsics.to_dict(), "pose": _pose_json(c.pose)}
                    for i, c in enumerate(ds.cameras)],
        "projector": {"intrinsics": ds.projector_intrinsics.to_dict(), "pose": _pose_json(ds.projector_pose)},
        "frames": frames_json,
    }
    (root / SCENE_FILE).write_text(json.dumps(scene, indent=2) + "\n")
    return root


def load_dataset(root, load_masks: bool = True) -> SceneDataset:
    """Read and validate a dataset; every problem surfaces as :class:`DataError`."""
    root = Path(root)
    scene_path = root / SCENE_FILE
    if not scene_path.is_file():
        raise DataError(f"missing {scene_path}")
    try:
        scene = json.loads(scene_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{scene_path}: malformed JSON ({exc})") from exc
    if scene.get("version") != SCENE_VERSION:
        raise DataError(f"{scene_path}: unsupported version {scene.get('version')!r}")
    if "projectors" in scene:
        raise DataError(f"{scene_path}: exactly one projector is supported ('projector' object)")
    if "projector" not in scene or "cameras" not in scene:
        raise DataError(f"{scene_path}: needs 'cameras' and 'projector'")
    cams = []
    for i, c in enumerate(scene["cameras"]):
        where = f"{scene_path} camera {i}"
        cams.append(CameraView(_pinhole_from_json(c.get("intrinsics", {}), where),
                               _pose_from_json(c.get("pose", {}), where), c.get("name", f"view{i}")))
    pj = scene["projector"]
    p_int = _pinhole_from_json(pj.get("intrinsics", {}), f"{scene_path} projector")
    p_pose = _pose_from_json(pj.get("pose", {}), f"{scene_path} projector")
    frames, masks = [], {}
    counters: Dict[int, int] = {}
    for i, fj in enumerate(scene.get("frames", [])):
        try:
            view = int(fj["view"])
            pat_path, cap_path = root / fj["pattern"], root / fj["capture"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{scene_path} frame {i}: {exc}") from exc
        idx = counters.get(view, 0)
        counters[view] = idx + 1
        frames.append(Frame(view, read_png(pat_path), read_png(cap_path), fj.get("split", "train"),
                            bool(fj.get("black", False)), idx))
        if load_masks and fj.get("mask") and view not in masks:
            masks[view] = read_mask(root / fj["mask"])
    ds = SceneDataset(cams, p_int, p_pose, frames, masks, root)
    ds.validate()
    return ds
