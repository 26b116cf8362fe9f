"""Small synthetic image-classification datasets for tests and demos."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetManifest, Sample

DEFAULT_CLASSES = ("apple", "boat", "cactus", "drum", "eagle", "falcon", "guitar", "harp", "igloo", "jeep", "kite")


def class_prototypes(n_classes: int, channels: int = 3, grid: int = 4, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, 99])
    return rng.standard_normal((n_classes, channels, grid, grid)).astype(np.float32)


def toy_images(label: int, count: int, prototypes: np.ndarray, image_size: int = 32, noise: float = 0.3, rng=None) -> np.ndarray:
    """``count`` images of class ``label``: the class's block pattern upsampled plus pixel noise."""
    rng = rng if rng is not None else np.random.default_rng()
    proto = prototypes[label]
    f = image_size // proto.shape[-1]
    base = proto.repeat(f, axis=1).repeat(f, axis=2)
    jitter = rng.normal(0.0, 0.25, size=(count, proto.shape[0], 1, 1))
    return (base[None] * (1.0 + jitter) + noise * rng.standard_normal((count, *base.shape))).astype(np.float32)


def make_toy_dataset(
    out_dir: str | Path | None = None,
    class_names: Sequence[str] | int = 3,
    train_per_class: int = 24,
    val_per_class: int = 0,
    test_per_class: int = 12,
    image_size: int = 32,
    channels: int = 3,
    noise: float = 0.3,
    seed: int = 0,
    name: str = "toy",
) -> DatasetManifest:
    """Build a dataset whose classes are linearly separable by block-mean features.

    With ``out_dir`` images are written as ``.npy`` files plus ``manifest.json``;
    otherwise samples keep their arrays in memory.
    """
    if isinstance(class_names, int):
        class_names = DEFAULT_CLASSES[:class_names]
    class_names = list(class_names)
    protos = class_prototypes(len(class_names), channels, seed=seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "images").mkdir(parents=True, exist_ok=True)
    samples = []
    for label in range(len(class_names)):
        rng = np.random.default_rng([seed, label])
        for split, count in (("train", train_per_class), ("val", val_per_class), ("test", test_per_class)):
            for k, img in enumerate(toy_images(label, count, protos, image_size, noise, rng)):
                sid = f"{class_names[label]}-{split}-{k:03d}"
                if out is not None:
                    rel = f"images/{sid}.npy"
                    np.save(out / rel, img)
                    samples.append(Sample(sid, rel, label, split))
                else:
                    samples.append(Sample(sid, None, label, split, image=img))
    manifest = DatasetManifest(name, class_names, samples, "a photo of a {}.", root=str(out) if out else None)
    if out is not None:
        manifest.save(out / "manifest.json")
    return manifest
