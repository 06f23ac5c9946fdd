"""Synthetic image grids and gradient-weighted attention heatmaps."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, DimensionError
from .models import Classifier, ConditionalGenerator, classify


def to_uint8(images) -> np.ndarray:
    """Map values in ``[-1, 1]`` to ``[0, 255]``, rounding half away from zero (0.0 -> 128)."""
    x = np.asarray(images, dtype=np.float64)
    v = (np.clip(x, -1.0, 1.0) + 1.0) * 127.5
    return np.floor(v + 0.5).astype(np.uint8)


def image_grid(images: np.ndarray, rows: int, cols: int, padding: int = 0) -> np.ndarray:
    """Tile ``[rows*cols, C, H, W]`` uint8 images row-major into one ``[H', W', C]`` array."""
    n, c, h, w = images.shape
    if n != rows * cols:
        raise DimensionError(f"{n} images do not fill a {rows}x{cols} grid")
    grid = np.zeros((rows * (h + padding) - padding, cols * (w + padding) - padding, c), np.uint8)
    for i in range(n):
        r, k = divmod(i, cols)
        top, left = r * (h + padding), k * (w + padding)
        grid[top:top + h, left:left + w] = images[i].transpose(1, 2, 0)
    return grid


def _save_png(array: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "L" if array.shape[-1] == 1 else "RGB"
    Image.fromarray(array.squeeze(-1) if mode == "L" else array, mode=mode).save(path, format="PNG")
    return path


@torch.no_grad()
def dump_image_grid(
    generator: ConditionalGenerator, path, rows: int = 8, seed: int = 0, padding: int = 0
) -> Path:
    """Render ``rows`` samples per class as a PNG grid, one column per class."""
    c = generator.spec.num_classes
    g = torch.Generator().manual_seed(seed)
    noise = torch.randn(rows * c, generator.spec.noise_dim, generator=g)
    labels = torch.arange(c).repeat(rows)
    # train-mode BN uses batch statistics; restore its running buffers afterwards
    saved = [(b, b.clone()) for b in generator.buffers()]
    was_training = generator.training
    generator.train()
    try:
        images = generator(noise, labels).cpu().numpy()
    finally:
        generator.train(was_training)
        for b, v in saved:
            b.copy_(v)
    return _save_png(image_grid(to_uint8(images), rows, c, padding), path)


# ---------------------------------------------------------------------------
# heatmaps


@dataclass
class HeatmapBundle:
    image_index: int
    network: str
    heatmaps: List[np.ndarray]
    target_class: int
    paths: List[Path] = field(default_factory=list)


def normalize_map(cam: np.ndarray) -> np.ndarray:
    """Min-max scale to ``[0, 1]``; a constant map becomes all 0.5."""
    lo, hi = float(cam.min()), float(cam.max())
    if not hi - lo > 1e-12:
        return np.full_like(cam, 0.5, dtype=np.float64)
    return (cam - lo) / (hi - lo)


def grad_cam(model: Classifier, image: torch.Tensor, target: Optional[int] = None):
    """Gradient-weighted class activation maps at every tap point of ``model``.

    Returns ``(maps, target)`` where each map is upsampled to the image size
    and normalized to ``[0, 1]``.
    """
    if model.num_taps < 1:
        raise ConfigError(f"{type(model).__name__} has no attention tap points")
    was_training = model.training
    model.eval()
    try:
        # input gradients keep the graph alive even when the network is frozen
        x = image.unsqueeze(0).detach().requires_grad_(True)
        with torch.enable_grad():
            record = classify(model, x)
            acts = record.attention_maps
            if target is None:
                target = int(record.logits.argmax(dim=1))
            score = record.logits[0, target]
            grads = torch.autograd.grad(score, acts, allow_unused=True)
    finally:
        model.train(was_training)
    maps = []
    for a, g in zip(acts, grads):
        if g is None:
            g = torch.zeros_like(a)
        weights = g.mean(dim=(2, 3), keepdim=True)
        cam = F.relu((weights * a).sum(dim=1, keepdim=True))
        cam = F.interpolate(cam, size=image.shape[-2:], mode="bilinear", align_corners=False)
        maps.append(normalize_map(cam[0, 0].detach().cpu().numpy().astype(np.float64)))
    return maps, target


def _overlay(image: torch.Tensor, heat: np.ndarray, mean, std, alpha: float = 0.5) -> np.ndarray:
    import matplotlib

    cmap = matplotlib.colormaps["jet"]
    x = image.detach().cpu().numpy().astype(np.float64)
    m = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    x = np.clip(x * s + m, 0.0, 1.0).transpose(1, 2, 0)
    if x.shape[-1] == 1:
        x = np.repeat(x, 3, axis=-1)
    colored = cmap(heat)[..., :3]
    return np.floor((1 - alpha) * x * 255 + alpha * colored * 255 + 0.5).astype(np.uint8)


def export_attention_heatmaps(
    teacher: Classifier,
    student: Classifier,
    images: torch.Tensor,
    path,
    mean: Sequence[float] = (0.0,),
    std: Sequence[float] = (1.0,),
    panel: bool = True,
) -> List[HeatmapBundle]:
    """Write Grad-CAM overlays for every image, tap point and network.

    Files are named ``img{i}_{teacher|student}_tap{j}.png``. With ``panel``
    an extra ``img{i}_panel.png`` puts the teacher row above the student row,
    shallow taps on the left. ``mean``/``std`` undo the input normalization
    for display. Both networks use the teacher's predicted class as target.
    """
    if teacher.num_taps < 1 or student.num_taps < 1:
        raise ConfigError("both networks need attention tap points")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    bundles = []
    for i, image in enumerate(images):
        t_maps, target = grad_cam(teacher, image)
        s_maps, _ = grad_cam(student, image, target)
        rows = []
        for name, maps in (("teacher", t_maps), ("student", s_maps)):
            bundle = HeatmapBundle(i, name, maps, target)
            tiles = []
            for j, heat in enumerate(maps, 1):
                tile = _overlay(image, heat, mean, std)
                tiles.append(tile)
                bundle.paths.append(_save_png(tile, out / f"img{i}_{name}_tap{j}.png"))
            bundles.append(bundle)
            rows.append(np.concatenate(tiles, axis=1))
        if panel:
            width = max(r.shape[1] for r in rows)
            rows = [np.pad(r, ((0, 0), (0, width - r.shape[1]), (0, 0))) for r in rows]
            _save_png(np.concatenate(rows, axis=0), out / f"img{i}_panel.png")
    return bundles
