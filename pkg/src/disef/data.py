"""Dataset manifests, K-shot sampling, base/new splits, batching and mixing augmentations."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .errors import DataError, FormatError, InputError

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "DISEF_DATA_ROOT"
SPLITS = ("train", "val", "test")


@dataclass
class Sample:
    id: str
    path: str | None
    label: int
    split: str = "train"
    image: np.ndarray | None = field(default=None, repr=False, compare=False)

    def load(self, root: str | Path | None = None) -> np.ndarray:
        if self.image is not None:
            return self.image
        if self.path is None:
            raise DataError(f"sample {self.id!r} has neither an image nor a path")
        p = Path(self.path)
        if not p.is_absolute() and root is not None:
            p = Path(root) / p
        return np.load(p)


@dataclass
class DatasetManifest:
    name: str
    class_names: list[str]
    samples: list[Sample]
    prompt_template: str = "a photo of a {}."
    root: str | None = None

    def __post_init__(self):
        n = len(self.class_names)
        if len(set(self.class_names)) != n:
            raise DataError("duplicate class names in manifest")
        for s in self.samples:
            if not 0 <= s.label < n:
                raise DataError(f"sample {s.id!r}: class index {s.label} outside [0, {n})")
            if s.split not in SPLITS:
                raise DataError(f"sample {s.id!r}: unknown split {s.split!r}")
        present = {s.label for s in self.samples if s.split == "train"}
        absent = [self.class_names[i] for i in range(n) if i not in present]
        if absent:
            raise DataError(f"classes with no train samples: {absent}")

    @property
    def num_classes(self):
        return len(self.class_names)

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "class_names": list(self.class_names),
            "prompt_template": self.prompt_template,
            "samples": [{"id": s.id, "path": s.path, "label": s.label, "split": s.split} for s in self.samples],
        }

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path, root: str | Path | None = None) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
            samples = [Sample(str(s.get("id", s["path"])), s["path"], int(s["label"]), s.get("split", "train")) for s in raw["samples"]]
            m = cls(raw["name"], list(raw["class_names"]), samples, raw.get("prompt_template", "a photo of a {}."))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: malformed dataset manifest ({exc})") from exc
        m.root = str(resolve_data_root(root, None, default=path.parent))
        return m


def resolve_data_root(flag, config_value, default=None) -> Path | None:
    """CLI flag beats the ``DISEF_DATA_ROOT`` environment variable, which beats config."""
    for candidate in (flag, os.environ.get(DATA_ROOT_ENV), config_value, default):
        if candidate:
            return Path(candidate)
    return None


@dataclass
class SupportSet:
    class_names: list[str]
    samples: list[Sample]

    def __len__(self):
        return len(self.samples)

    def by_class(self) -> dict[int, list[Sample]]:
        out: dict[int, list[Sample]] = {i: [] for i in range(len(self.class_names))}
        for s in self.samples:
            out[s.label].append(s)
        return out


@dataclass(frozen=True)
class ShotSpec:
    k: int
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise InputError(f"K must be >= 1, got {self.k}")


def sample_k_shot(manifest: DatasetManifest, spec: ShotSpec, classes: Sequence[int] | None = None) -> SupportSet:
    """Draw exactly ``K`` train samples per class, without replacement.

    Each class gets its own generator seeded from ``(seed, class index)`` so the
    draw for one class does not depend on how many other classes exist.
    """
    train = manifest.split("train")
    pools: dict[int, list[Sample]] = {}
    for s in train:
        pools.setdefault(s.label, []).append(s)
    chosen = []
    for c in classes if classes is not None else range(manifest.num_classes):
        pool = sorted(pools.get(c, []), key=lambda s: s.id)
        if len(pool) < spec.k:
            raise DataError(f"class {manifest.class_names[c]!r} has {len(pool)} train samples, needs {spec.k}")
        rng = np.random.default_rng([spec.seed, c])
        idx = rng.choice(len(pool), size=spec.k, replace=False)
        chosen.extend(pool[i] for i in sorted(idx))
    return SupportSet(list(manifest.class_names), chosen)


def base_new_split(manifest_or_names) -> tuple[list[str], list[str]]:
    names = list(getattr(manifest_or_names, "class_names", manifest_or_names))
    if len(names) < 2:
        raise DataError("base/new split needs at least two classes")
    cut = math.ceil(len(names) / 2)
    return names[:cut], names[cut:]


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    images: torch.Tensor
    labels: torch.Tensor
    synthetic: torch.Tensor  # bool per item

    def __post_init__(self):
        if not (len(self.images) == len(self.labels) == len(self.synthetic)):
            raise DataError("batch images, labels and origin flags must align")

    def __len__(self):
        return len(self.labels)


@dataclass
class MixedBatch:
    """Output of MixUp/CutMix: each item is ``lam * x_a + (1 - lam) * x_b``."""

    images: torch.Tensor
    labels_a: torch.Tensor
    labels_b: torch.Tensor
    lam: float
    synthetic: torch.Tensor

    def __len__(self):
        return len(self.labels_a)


@dataclass
class Item:
    image: np.ndarray
    label: int
    synthetic: bool


AugmentFn = Callable[[torch.Tensor, np.random.Generator], torch.Tensor]


class Loader:
    """Epoch-wise shuffled batches over real and synthetic items.

    Shuffling for epoch ``e`` comes from ``default_rng([seed, e])`` so batch
    composition never depends on prefetch order.
    """

    def __init__(self, items: Sequence[Item], batch_size: int, seed: int = 0, augment: AugmentFn | None = None, drop_last: bool = False):
        if not items:
            raise DataError("joint real + synthetic set is empty")
        origins = {it.synthetic for it in items}
        if len(origins) == 2 and batch_size < 2:
            raise DataError("batch size must be >= 2 when both real and synthetic items are present")
        if batch_size < 1:
            raise DataError("batch size must be >= 1")
        self.items = list(items)
        self.batch_size = batch_size
        self.seed = seed
        self.augment = augment
        self.drop_last = drop_last

    def __len__(self):
        n, b = len(self.items), self.batch_size
        return n // b if self.drop_last else -(-n // b)

    def epoch(self, e: int) -> Iterator[Batch]:
        rng = np.random.default_rng([self.seed, e])
        order = rng.permutation(len(self.items))
        aug_rng = np.random.default_rng([self.seed, e, 1])
        for start in range(0, len(order), self.batch_size):
            idx = order[start : start + self.batch_size]
            if self.drop_last and len(idx) < self.batch_size:
                break
            images = torch.from_numpy(np.stack([self.items[i].image for i in idx]))
            if self.augment is not None:
                images = torch.stack([self.augment(img, aug_rng) for img in images])
            yield Batch(
                images,
                torch.tensor([self.items[i].label for i in idx], dtype=torch.long),
                torch.tensor([self.items[i].synthetic for i in idx], dtype=torch.bool),
            )

    def __iter__(self):
        return self.epoch(0)


def make_loader(support: SupportSet, synthetic=(), batch_size: int = 32, augment: AugmentFn | None = None, seed: int = 0, root=None) -> Loader:
    """Loader over the joint set: support samples flagged real, ``synthetic`` flagged synthetic.

    ``synthetic`` holds objects with ``image`` (array) and ``label`` (class index).
    """
    items = [Item(np.asarray(s.load(root), dtype=np.float32), s.label, False) for s in support.samples]
    items += [Item(np.asarray(s.image, dtype=np.float32), int(s.label), True) for s in synthetic]
    return Loader(items, batch_size, seed, augment)


# ------------------------------------------------------------ augmentations


def _identity(img, rng):
    return img


def _hflip(img, rng):
    return img.flip(-1) if rng.random() < 0.5 else img


def _randaugment_rrc(img, rng):
    # Opaque torchvision chain; seeded from the loader rng for reproducibility.
    from torchvision.transforms import v2

    size = img.shape[-1]
    chain = v2.Compose([v2.RandAugment(), v2.RandomResizedCrop(size, antialias=True)])
    # Images need not lie in [0, 1]; map each one's range onto uint8 and back.
    lo, hi = img.min(), img.max()
    span = (hi - lo).clamp_min(1e-12)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(rng.integers(2**31)))
        u8 = ((img - lo) / span * 255).round().to(torch.uint8)
        return chain(u8).to(img.dtype) / 255 * span + lo


AUGMENTATIONS: dict[str, AugmentFn] = {
    "none": _identity,
    "hflip": _hflip,
    "randaugment_rrc": _randaugment_rrc,
}


def get_augment(name: str | None) -> AugmentFn | None:
    if name in (None, "", "none"):
        return None
    try:
        return AUGMENTATIONS[name]
    except KeyError:
        raise InputError(f"unknown augmentation chain {name!r}; options: {sorted(AUGMENTATIONS)}") from None


def _as_mixed(batch: Batch) -> MixedBatch:
    return MixedBatch(batch.images, batch.labels, batch.labels, 1.0, batch.synthetic)


def mixup(batch: Batch, alpha: float, rng: np.random.Generator | None = None, lam: float | None = None, perm=None) -> MixedBatch:
    """Convex combination with a permuted partner, ``lam ~ Beta(alpha, alpha)``."""
    if alpha < 0:
        raise InputError("mixup alpha must be >= 0")
    if alpha == 0 and lam is None:
        return _as_mixed(batch)
    if len(batch) < 2:
        log.warning("mixup on a batch of size 1 is the identity")
        return _as_mixed(batch)
    rng = rng or np.random.default_rng()
    lam = float(rng.beta(alpha, alpha)) if lam is None else float(lam)
    perm = torch.as_tensor(rng.permutation(len(batch)) if perm is None else perm)
    images = lam * batch.images + (1.0 - lam) * batch.images[perm]
    return MixedBatch(images, batch.labels, batch.labels[perm], lam, batch.synthetic)


def cutmix_box(h: int, w: int, lam: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    cut = math.sqrt(1.0 - lam)
    ch, cw = int(round(h * cut)), int(round(w * cut))
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    y0, y1 = np.clip([cy - ch // 2, cy - ch // 2 + ch], 0, h)
    x0, x1 = np.clip([cx - cw // 2, cx - cw // 2 + cw], 0, w)
    return int(y0), int(y1), int(x0), int(x1)


def cutmix(batch: Batch, alpha: float, rng: np.random.Generator | None = None, lam: float | None = None, perm=None) -> MixedBatch:
    """Paste a rectangle from a permuted partner; returned ``lam`` is the exact kept-area fraction."""
    if alpha < 0:
        raise InputError("cutmix alpha must be >= 0")
    if alpha == 0 and lam is None:
        return _as_mixed(batch)
    if len(batch) < 2:
        log.warning("cutmix on a batch of size 1 is the identity")
        return _as_mixed(batch)
    rng = rng or np.random.default_rng()
    lam = float(rng.beta(alpha, alpha)) if lam is None else float(lam)
    perm = torch.as_tensor(rng.permutation(len(batch)) if perm is None else perm)
    h, w = batch.images.shape[-2:]
    y0, y1, x0, x1 = cutmix_box(h, w, lam, rng)
    images = batch.images.clone()
    images[..., y0:y1, x0:x1] = batch.images[perm][..., y0:y1, x0:x1]
    lam = 1.0 - (y1 - y0) * (x1 - x0) / (h * w)
    return MixedBatch(images, batch.labels, batch.labels[perm], lam, batch.synthetic)


def mix_batch(batch: Batch, mixup_alpha: float, cutmix_alpha: float, rng: np.random.Generator) -> MixedBatch:
    """Apply MixUp or CutMix (chosen 50/50 when both are enabled)."""
    if mixup_alpha > 0 and cutmix_alpha > 0:
        use_cutmix = rng.random() < 0.5
    else:
        use_cutmix = cutmix_alpha > 0
    if use_cutmix:
        return cutmix(batch, cutmix_alpha, rng)
    return mixup(batch, mixup_alpha, rng)


def smooth_labels(labels, eps: float, n: int) -> torch.Tensor:
    """One-hot targets with ``eps`` spread uniformly: true class ``1 - eps + eps/n``."""
    if not 0.0 <= eps < 1.0:
        raise InputError(f"label smoothing must be in [0, 1), got {eps}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    out = torch.full((len(labels), n), eps / n, dtype=torch.float64)
    out[torch.arange(len(labels)), labels] += 1.0 - eps
    return out


def mixed_targets(mixed: MixedBatch, eps: float, n: int) -> torch.Tensor:
    return mixed.lam * smooth_labels(mixed.labels_a, eps, n) + (1.0 - mixed.lam) * smooth_labels(mixed.labels_b, eps, n)
