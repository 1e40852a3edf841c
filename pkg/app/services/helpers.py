from __future__ import annotations

import math
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from app.core.config import settings
from app.core.errors import IngestionError

# Number of azimuth buckets used as diffusion class labels
N_VIEW_BUCKETS = 8


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed))
    return g


def derive_seed(*parts: int | str) -> int:
    """Stable 63-bit seed from a tuple of ints/strings (independent of PYTHONHASHSEED)."""
    h = 1469598103934665603
    for p in parts:
        for b in str(p).encode("utf-8"):
            h ^= b
            h = (h * 1099511628211) & ((1 << 64) - 1)
        h ^= 0x2F
    return h & ((1 << 63) - 1)


def configure_torch() -> None:
    if settings.torch_threads:
        torch.set_num_threads(settings.torch_threads)
    if settings.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def view_bucket(rotation: torch.Tensor | np.ndarray, n_buckets: int = N_VIEW_BUCKETS) -> int:
    """Azimuth bucket of the camera viewing direction (third rotation column)."""
    r = torch.as_tensor(rotation, dtype=torch.float64)
    forward = r[:, 2]
    azimuth = math.atan2(float(forward[1]), float(forward[0])) % (2.0 * math.pi)
    return min(int(azimuth / (2.0 * math.pi / n_buckets)), n_buckets - 1)


def split_views(n_views: int, held_out_every: int) -> Tuple[List[int], List[int]]:
    """Returns (train_indices, held_out_indices); every k-th view starting at 0 is held out."""
    held = [i for i in range(n_views) if i % held_out_every == 0]
    train = [i for i in range(n_views) if i % held_out_every != 0]
    return train, held


def to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().cpu().clamp(0.0, 1.0).numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def save_png(image: torch.Tensor, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
    return path


def load_image(path: str | Path) -> torch.Tensor:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise IngestionError(f"Cannot read image: {e}", path) from e
    return torch.from_numpy(arr.copy())


def save_pngs(images: Sequence[torch.Tensor], directory: str | Path) -> List[Path]:
    directory = Path(directory)
    return [save_png(img, directory / f"{i:04d}.png") for i, img in enumerate(images)]
