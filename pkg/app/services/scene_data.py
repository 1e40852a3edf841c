"""Synthetic ground-truth scenes, paired HR/LR multi-view datasets and LLFF ingestion.

Camera convention: ``rotation`` maps camera to world with columns
(right, down, forward), pixel centers sit at integer + 0.5. Poses stored in a
dataset carry intrinsics at the resolution of ``lr_images``; use
``CameraPose.scaled(4)`` to address the HR image plane.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from app.core.checkpoint import load_container, save_container
from app.core.errors import ConfigurationError, IngestionError, ShapeError
from app.services import radiance_field as rf
from app.services.helpers import load_image, save_png

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-6
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class CameraPose:
    rotation: torch.Tensor  # 3x3, world <- camera
    translation: torch.Tensor  # 3, camera center in world units
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        rot = torch.as_tensor(self.rotation, dtype=torch.float64)
        trans = torch.as_tensor(self.translation, dtype=torch.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ShapeError(f"rotation must be 3x3, got {tuple(rot.shape)}")
        err = torch.linalg.matrix_norm(rot.T @ rot - torch.eye(3, dtype=torch.float64)).item()
        if err >= ORTHO_TOL or torch.linalg.det(rot).item() <= 0:
            raise ConfigurationError(f"rotation is not a proper orthonormal matrix (|R^T R - I| = {err:.2e})")
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    def scaled(self, factor: float) -> "CameraPose":
        """Same camera addressing an image plane ``factor`` times larger."""
        return CameraPose(self.rotation, self.translation, self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor)

    def to_json(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
        }

    @classmethod
    def from_json(cls, data: dict) -> "CameraPose":
        return cls(
            torch.tensor(data["rotation"], dtype=torch.float64).reshape(3, 3),
            torch.tensor(data["translation"], dtype=torch.float64),
            float(data["fx"]), float(data["fy"]), float(data["cx"]), float(data["cy"]),
        )


@dataclass(frozen=True)
class MultiViewDataset:
    lr_images: Tuple[torch.Tensor, ...]
    poses: Tuple[CameraPose, ...]
    scene_id: str
    hr_images: Optional[Tuple[torch.Tensor, ...]] = None
    near: float = 1.0
    far: float = 5.0
    bbox: torch.Tensor = field(default_factory=lambda: torch.tensor([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]))
    prompt: str = ""

    def __post_init__(self):
        object.__setattr__(self, "lr_images", tuple(self.lr_images))
        object.__setattr__(self, "poses", tuple(self.poses))
        if self.hr_images is not None:
            object.__setattr__(self, "hr_images", tuple(self.hr_images))
        if len(self.lr_images) != len(self.poses):
            raise ShapeError(f"{len(self.lr_images)} LR images but {len(self.poses)} poses")
        for i, img in enumerate(self.lr_images):
            _check_image(img, f"lr_images[{i}]")
        if self.hr_images is not None:
            if len(self.hr_images) != len(self.lr_images):
                raise ShapeError("hr_images and lr_images differ in length")
            for i, (hr, lr) in enumerate(zip(self.hr_images, self.lr_images)):
                _check_image(hr, f"hr_images[{i}]")
                if hr.shape[0] != 4 * lr.shape[0] or hr.shape[1] != 4 * lr.shape[1]:
                    raise ShapeError(f"view {i}: HR {tuple(hr.shape)} is not 4x LR {tuple(lr.shape)}")
        if self.near >= self.far:
            raise ConfigurationError(f"near ({self.near}) must be smaller than far ({self.far})")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def lr_size(self) -> Tuple[int, int]:
        h, w = self.lr_images[0].shape[:2]
        return int(h), int(w)

    def subset(self, indices: Sequence[int]) -> "MultiViewDataset":
        return MultiViewDataset(
            lr_images=tuple(self.lr_images[i] for i in indices),
            poses=tuple(self.poses[i] for i in indices),
            scene_id=self.scene_id,
            hr_images=tuple(self.hr_images[i] for i in indices) if self.hr_images is not None else None,
            near=self.near, far=self.far, bbox=self.bbox, prompt=self.prompt,
        )


@dataclass(frozen=True)
class GroundTruthField:
    density: torch.Tensor  # G x G x G, non-negative
    color: torch.Tensor  # G x G x G x 3, in [0, 1]
    bbox: torch.Tensor  # 2 x 3

    def __post_init__(self):
        if self.density.ndim != 3 or self.color.shape != (*self.density.shape, 3):
            raise ShapeError(f"inconsistent grid shapes {tuple(self.density.shape)} / {tuple(self.color.shape)}")
        if (self.density < 0).any():
            raise ConfigurationError("ground-truth density must be non-negative")
        if (self.color < 0).any() or (self.color > 1).any():
            raise ConfigurationError("ground-truth color must lie in [0, 1]")

    @property
    def grid_res(self) -> int:
        return int(self.density.shape[0])

    def query(self, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        sigma = rf.trilinear(self.density.to(points.dtype)[None], points, self.bbox, padding_mode="zeros")[..., 0]
        rgb = rf.trilinear(self.color.to(points.dtype).permute(3, 0, 1, 2), points, self.bbox, padding_mode="border")
        return sigma, rgb


def _check_image(img: torch.Tensor, name: str) -> None:
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ShapeError(f"{name} must be HxWx3, got {tuple(img.shape)}")
    if img.numel() and (img.min() < 0 or img.max() > 1):
        raise ShapeError(f"{name} has values outside [0, 1]")


def downsample_x4(image: torch.Tensor) -> torch.Tensor:
    """4x4 box average of an HxWx3 image."""
    if image.ndim != 3:
        raise ShapeError(f"expected HxWxC image, got {tuple(image.shape)}")
    h, w, c = image.shape
    if h % 4 or w % 4:
        raise ShapeError(f"image dims {h}x{w} are not divisible by 4")
    out = image.reshape(h // 4, 4, w // 4, 4, c).mean(dim=(1, 3))
    return out.clamp(0.0, 1.0)


def _blob_field(rng: np.random.Generator, grid_res: int) -> Tuple[np.ndarray, np.ndarray]:
    axis = np.linspace(-1.0, 1.0, grid_res)
    x = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)  # G,G,G,3
    n_blobs = int(rng.integers(3, 7))
    density = np.zeros(x.shape[:3])
    color_acc = np.zeros(x.shape)
    for _ in range(n_blobs):
        center = rng.uniform(-0.4, 0.4, size=3)
        sigma = rng.uniform(0.12, 0.22)
        amplitude = rng.uniform(20.0, 40.0)
        base = rng.uniform(0.2, 0.8, size=3)
        direction = rng.normal(size=(3, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        freq = rng.uniform(3.0, 8.0, size=(3, 1))
        phase = rng.uniform(0.0, 2.0 * math.pi, size=3)
        blob = amplitude * np.exp(-np.sum((x - center) ** 2, axis=-1) / (2.0 * sigma**2))
        wave = np.sin(2.0 * math.pi * (x @ (direction * freq).T) + phase)  # G,G,G,3
        texture = np.clip(base + 0.25 * wave, 0.0, 1.0)
        density += blob
        color_acc += blob[..., None] * texture
    color = np.clip(color_acc / np.maximum(density, 1e-8)[..., None], 0.0, 1.0)
    return density, color


def _look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray) -> np.ndarray:
    forward = target - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


def ring_poses(n_views: int, radius: float, image_size: int, focal_factor: float) -> List[CameraPose]:
    """Cameras on a ring around the origin, elevation oscillating between 5 and 35 degrees."""
    poses = []
    up = np.array([0.0, 0.0, 1.0])
    for i in range(n_views):
        azimuth = 2.0 * math.pi * i / n_views
        elevation = math.radians(20.0 + 15.0 * math.sin(3.0 * azimuth))
        eye = radius * np.array([math.cos(elevation) * math.cos(azimuth), math.cos(elevation) * math.sin(azimuth), math.sin(elevation)])
        rot = _look_at(eye, np.zeros(3), up)
        f = focal_factor * image_size
        poses.append(CameraPose(torch.from_numpy(rot), torch.from_numpy(eye), f, f, image_size / 2.0, image_size / 2.0))
    return poses


def generate_synthetic_scene(
    seed: int,
    grid_res: int,
    n_views: int,
    hr_size: int,
    *,
    n_samples: int = 64,
    camera_radius: float = 3.0,
    focal_factor: float = 1.2,
    near: float = 1.0,
    far: float = 5.0,
    background: Sequence[float] = (1.0, 1.0, 1.0),
    prompt: str = "synthetic textured blobs",
) -> Tuple[GroundTruthField, MultiViewDataset]:
    if grid_res < 16:
        raise ConfigurationError(f"grid_res must be >= 16, got {grid_res}")
    if hr_size <= 0 or hr_size % 4:
        raise ConfigurationError(f"hr_size must be a positive multiple of 4, got {hr_size}")
    if n_views < 2:
        raise ConfigurationError(f"n_views must be >= 2, got {n_views}")

    rng = np.random.default_rng(seed)
    density, color = _blob_field(rng, grid_res)
    bbox = torch.tensor([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    gt = GroundTruthField(torch.from_numpy(density).float(), torch.from_numpy(color).float(), bbox)

    lr_size = hr_size // 4
    poses = ring_poses(n_views, camera_radius, lr_size, focal_factor)
    hr_images = []
    with torch.no_grad():
        for pose in poses:
            img = rf.render_image(gt, pose.scaled(4), hr_size, hr_size, n_samples=n_samples, near=near, far=far, background=background)
            hr_images.append(img.clamp(0.0, 1.0))
    lr_images = [downsample_x4(img) for img in hr_images]
    logger.info("Generated synthetic scene seed=%d: %d views, HR %d, grid %d^3", seed, n_views, hr_size, grid_res)
    dataset = MultiViewDataset(
        lr_images=tuple(lr_images), poses=tuple(poses), scene_id=f"synthetic-{seed}",
        hr_images=tuple(hr_images), near=near, far=far, bbox=bbox, prompt=prompt,
    )
    return gt, dataset


def _orthonormalize(rot: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def load_llff(directory: str | Path, prompt: str | None = None) -> MultiViewDataset:
    """Reads ``images/`` and ``poses_bounds.npy`` (N x 17: 3x5 pose + near/far bounds).

    Images become the LR inputs; they are cropped to multiples of 4 so the
    4x upsampled renders tile the codec and denoiser grids exactly.
    """
    directory = Path(directory)
    image_dir = directory / "images"
    if not image_dir.is_dir():
        raise IngestionError("LLFF directory has no images/ folder", image_dir)
    files = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise IngestionError("LLFF images/ folder is empty", image_dir)
    poses_file = directory / "poses_bounds.npy"
    if not poses_file.is_file():
        raise IngestionError("Missing poses_bounds.npy", poses_file)
    try:
        arr = np.load(poses_file)
    except (OSError, ValueError) as e:
        raise IngestionError(f"Malformed poses file: {e}", poses_file) from e
    if arr.ndim != 2 or arr.shape[1] != 17:
        raise IngestionError(f"poses file must be N x 17, got shape {arr.shape}", poses_file)
    if arr.shape[0] != len(files):
        raise IngestionError(f"poses file has {arr.shape[0]} rows, expected N={len(files)} (one per image)", poses_file)

    images = []
    for f in files:
        img = load_image(f)
        h, w = (img.shape[0] // 4) * 4, (img.shape[1] // 4) * 4
        images.append(img[:h, :w].contiguous())

    mats = arr[:, :15].astype(np.float64).reshape(-1, 3, 5)
    bounds = arr[:, 15:17].astype(np.float64)
    near = float(bounds.min()) * 0.9
    far = float(bounds.max()) * 1.1
    poses = []
    corners = []
    for mat, img in zip(mats, images):
        down, right, back = mat[:, 0], mat[:, 1], mat[:, 2]
        rot = _orthonormalize(np.stack([right, down, -back], axis=1))
        center = mat[:, 3]
        h_orig, w_orig, focal = mat[:, 4]
        h, w = img.shape[:2]
        f = float(focal) * w / float(w_orig)
        pose = CameraPose(torch.from_numpy(rot), torch.from_numpy(center.copy()), f, f, w / 2.0, h / 2.0)
        poses.append(pose)
        for u, v in ((0, 0), (w, 0), (0, h), (w, h)):
            d = rot @ np.array([(u - w / 2.0) / f, (v - h / 2.0) / f, 1.0])
            d /= np.linalg.norm(d)
            corners.extend([center + near * d, center + far * d])
    pts = np.stack(corners)
    bbox = torch.tensor(np.stack([pts.min(axis=0), pts.max(axis=0)]), dtype=torch.float32)
    logger.info("Loaded LLFF capture %s: %d views, near=%.3f far=%.3f", directory, len(poses), near, far)
    return MultiViewDataset(
        lr_images=tuple(images), poses=tuple(poses), scene_id=directory.name, hr_images=None,
        near=near, far=far, bbox=bbox, prompt=prompt or directory.name,
    )


def save_dataset(dataset: MultiViewDataset, out_dir: str | Path, gt: GroundTruthField | None = None) -> List[Path]:
    """Writes hr/####.png, lr/####.png, poses.json, field.bin and manifest.json; returns written files."""
    out_dir = Path(out_dir)
    written: List[Path] = []
    for i, img in enumerate(dataset.lr_images):
        written.append(save_png(img, out_dir / "lr" / f"{i:04d}.png"))
    if dataset.hr_images is not None:
        for i, img in enumerate(dataset.hr_images):
            written.append(save_png(img, out_dir / "hr" / f"{i:04d}.png"))
    poses_doc = {
        "scene_id": dataset.scene_id,
        "prompt": dataset.prompt,
        "near": dataset.near,
        "far": dataset.far,
        "bbox": dataset.bbox.tolist(),
        "views": [p.to_json() for p in dataset.poses],
    }
    poses_path = out_dir / "poses.json"
    poses_path.write_text(json.dumps(poses_doc, indent=2))
    written.append(poses_path)
    if gt is not None:
        written.append(save_container(out_dir / "field.bin", "gt_field", {"density": gt.density, "color": gt.color, "bbox": gt.bbox}))
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"files": sorted(str(p.relative_to(out_dir)) for p in written)}, indent=2))
    written.append(manifest)
    return written


def load_synthetic(directory: str | Path) -> Tuple[Optional[GroundTruthField], MultiViewDataset]:
    directory = Path(directory)
    poses_path = directory / "poses.json"
    if not poses_path.is_file():
        raise IngestionError("Missing poses.json", poses_path)
    try:
        doc = json.loads(poses_path.read_text())
        poses = [CameraPose.from_json(v) for v in doc["views"]]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise IngestionError(f"Malformed poses.json: {e}", poses_path) from e
    lr = [load_image(directory / "lr" / f"{i:04d}.png") for i in range(len(poses))]
    hr_dir = directory / "hr"
    hr = [load_image(hr_dir / f"{i:04d}.png") for i in range(len(poses))] if hr_dir.is_dir() else None
    gt = None
    if (directory / "field.bin").is_file():
        payload, _ = load_container(directory / "field.bin", "gt_field")
        gt = GroundTruthField(payload["density"], payload["color"], payload["bbox"])
    dataset = MultiViewDataset(
        lr_images=tuple(lr), poses=tuple(poses), scene_id=doc.get("scene_id", directory.name),
        hr_images=tuple(hr) if hr is not None else None, near=float(doc["near"]), far=float(doc["far"]),
        bbox=torch.tensor(doc["bbox"], dtype=torch.float32), prompt=doc.get("prompt", ""),
    )
    return gt, dataset
