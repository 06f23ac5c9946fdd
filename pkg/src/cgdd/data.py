"""Evaluation-set ingestion (MNIST IDX, CIFAR binary) and accuracy."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, FormatError, RoleError

TEACHER_TRAIN = "teacher-train"
EVAL_ONLY = "eval-only"
ROLES = (TEACHER_TRAIN, EVAL_ONLY)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 1 + 3072

DATA_ROOT_ENV = "CGDD_DATA_ROOT"

# Per-dataset constants. ``pad`` is applied to each side after decoding.
DATASET_REGISTRY = {
    "mnist": {
        "format": "idx",
        "num_classes": 10,
        "mean": (0.1307,),
        "std": (0.3081,),
        "pad": 2,
        "files": {
            "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        },
    },
    "cifar10": {
        "format": "cifar",
        "num_classes": 10,
        "mean": (0.4914, 0.4822, 0.4465),
        "std": (0.2470, 0.2435, 0.2616),
        "pad": 0,
        "files": {
            "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
            "test": ("test_batch.bin",),
        },
    },
}


@dataclass
class EvalDataset:
    """Decoded, normalized images with labels and a role flag.

    ``role`` is :data:`EVAL_ONLY` for test splits; only :data:`TEACHER_TRAIN`
    datasets may enter a training path.
    """

    images: torch.Tensor
    labels: torch.Tensor
    mean: Tuple[float, ...]
    std: Tuple[float, ...]
    role: str = EVAL_ONLY
    name: str = ""

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown dataset role {self.role!r}")
        if self.images.dim() != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"images {tuple(self.images.shape)} do not pair with labels {tuple(self.labels.shape)}"
            )

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "EvalDataset":
        return EvalDataset(self.images[index], self.labels[index], self.mean, self.std, self.role, self.name)


def require_training_role(dataset: EvalDataset) -> None:
    if dataset.role != TEACHER_TRAIN:
        raise RoleError(
            f"dataset {dataset.name or '<unnamed>'} has role {dataset.role!r}; "
            "only teacher-train datasets may be used for training"
        )


# ---------------------------------------------------------------------------
# IDX


def _open_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    if not path.exists():
        raise FileNotFoundError(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Decode an unsigned-byte IDX file (big-endian header) into an array."""
    raw = _open_bytes(path)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header", path, len(raw))
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic {magic} at offset 0, expected {expected_magic}", path, 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header", path, len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise FormatError(
            f"{path}: truncated at byte offset {len(raw)}, expected {header + size} bytes",
            path,
            len(raw),
        )
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (labels: 1-D, images: 3-D)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        f.write(array.tobytes())


# ---------------------------------------------------------------------------
# CIFAR


def read_cifar_batch(path) -> Tuple[np.ndarray, np.ndarray]:
    raw = _open_bytes(path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        whole = len(raw) - len(raw) % CIFAR_RECORD
        raise FormatError(f"{path}: truncated record at byte offset {whole}", path, whole)
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].copy()
    if labels.max() >= 10:
        bad = int(np.argmax(labels >= 10)) * CIFAR_RECORD
        raise FormatError(f"{path}: label out of range at byte offset {bad}", path, bad)
    return records[:, 1:].reshape(-1, 3, 32, 32), labels


# ---------------------------------------------------------------------------


def _to_dataset(images_u8, labels, info, role, name, resize=True) -> EvalDataset:
    x = torch.from_numpy(np.asarray(images_u8, dtype=np.float32) / 255.0)
    if x.dim() == 3:
        x = x.unsqueeze(1)
    if resize and info["pad"]:
        # zero pixels, padded before normalization so the border stays black
        x = F.pad(x, [info["pad"]] * 4)
    mean = torch.tensor(info["mean"]).view(1, -1, 1, 1)
    std = torch.tensor(info["std"]).view(1, -1, 1, 1)
    x = (x - mean) / std
    y = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    if len(y) and y.max() >= info["num_classes"]:
        raise FormatError(f"{name}: label {int(y.max())} out of range")
    return EvalDataset(x, y, tuple(info["mean"]), tuple(info["std"]), role, name)


def data_root(root=None) -> Path:
    if root is not None:
        return Path(root)
    env = os.environ.get(DATA_ROOT_ENV)
    if not env:
        raise ConfigError(f"no dataset root given and ${DATA_ROOT_ENV} is unset")
    return Path(env)


def load_eval_dataset(
    format_id: str,
    path=None,
    split: str = "test",
    role: Optional[str] = None,
    resize: bool = True,
) -> EvalDataset:
    """Load a registered dataset split from ``path`` (default: ``$CGDD_DATA_ROOT/<format_id>``).

    The test split defaults to the eval-only role, the train split to
    teacher-train. ``resize`` zero-pads MNIST from 28x28 to the 32x32 the
    networks expect.
    """
    try:
        info = DATASET_REGISTRY[format_id]
    except KeyError:
        raise ConfigError(f"unknown dataset {format_id!r}; known: {sorted(DATASET_REGISTRY)}") from None
    if split not in info["files"]:
        raise ConfigError(f"{format_id} has no split {split!r}")
    folder = Path(path) if path is not None else data_root() / format_id
    role = role or (EVAL_ONLY if split == "test" else TEACHER_TRAIN)
    files = info["files"][split]
    if info["format"] == "idx":
        images = read_idx(folder / files[0], IDX_IMAGES_MAGIC)
        labels = read_idx(folder / files[1], IDX_LABELS_MAGIC)
        if len(images) != len(labels):
            raise FormatError(f"{folder}: {len(images)} images but {len(labels)} labels")
    else:
        parts = [read_cifar_batch(folder / f) for f in files]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
    return _to_dataset(images, labels, info, role, f"{format_id}/{split}", resize)


@torch.no_grad()
def evaluate(model: torch.nn.Module, dataset: EvalDataset, batch_size: int = 1000) -> float:
    """Top-1 accuracy of ``model`` on ``dataset``; restores the model's train/eval mode."""
    expected = getattr(model, "input_shape", None)
    if expected is not None and tuple(expected) != dataset.image_shape:
        raise DimensionError(f"model expects {tuple(expected)} images, dataset has {dataset.image_shape}")
    if len(dataset) == 0:
        raise DimensionError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    correct = 0
    try:
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start:start + batch_size].to(device)
            y = dataset.labels[start:start + batch_size].to(device)
            correct += int((model(x).argmax(dim=1) == y).sum())
    finally:
        model.train(was_training)
    return correct / len(dataset)


def export_sklearn_digits(folder, test_fraction: float = 0.25, seed: int = 0) -> Path:
    """Write scikit-learn's bundled 8x8 digits as MNIST-layout IDX files.

    Each digit is upsampled to 20x20 and centred in a 28x28 frame, matching
    MNIST's geometry, so the result loads with ``load_eval_dataset("mnist", folder)``.
    Useful when the real MNIST files are not available.
    """
    from sklearn.datasets import load_digits

    digits = load_digits()
    x = torch.from_numpy(digits.images.astype(np.float32) / 16.0).unsqueeze(1)
    x = F.interpolate(x, size=(20, 20), mode="bilinear", align_corners=False)
    x = F.pad(x, [4, 4, 4, 4]).squeeze(1)
    images = np.clip(np.rint(x.numpy() * 255.0), 0, 255).astype(np.uint8)
    labels = digits.target.astype(np.uint8)

    order = np.random.default_rng(seed).permutation(len(labels))
    n_test = int(round(test_fraction * len(labels)))
    test, train = order[:n_test], order[n_test:]
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    names = DATASET_REGISTRY["mnist"]["files"]
    for split, idx in (("train", train), ("test", test)):
        write_idx(folder / names[split][0], images[idx])
        write_idx(folder / names[split][1], labels[idx])
    return folder
