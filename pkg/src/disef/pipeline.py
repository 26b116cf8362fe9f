"""Glue between config, data, generation, training and evaluation used by the CLI."""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import Config
from .data import DatasetManifest, Sample, ShotSpec, SupportSet, base_new_split, get_augment, make_loader, resolve_data_root, sample_k_shot
from .errors import DataError, FormatError, InputError
from .evaluator import predict, top1
from .lora import AdapterRegistry, inject_adapters, load_adapters
from .sap import (
    ExternalProcessBackend,
    MockCaptioner,
    MockGenerator,
    SapConfig,
    SyntheticSample,
    make_zero_shot_filter,
    prototype_classifier,
    read_manifest,
)
from .trainer import RunConfig, TrainResult, train
from .vlm_core import DualEncoder, build_zero_shot_classifier

log = logging.getLogger(__name__)


def load_dataset(cfg: Config, data_root=None) -> DatasetManifest:
    path = cfg.data.get("manifest")
    if not path:
        raise DataError("data.manifest is not set")
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset manifest not found: {path}")
    root = resolve_data_root(data_root, cfg.data.get("root"), default=path.parent)
    return DatasetManifest.load(path, root)


def build_model(cfg: Config, manifest: DatasetManifest) -> DualEncoder:
    m = cfg.model
    vocab = list(manifest.class_names) + [cfg.run.prompt_template, manifest.prompt_template]
    return DualEncoder.toy(
        vocab,
        image_size=m["image_size"],
        channels=m["channels"],
        patch=m["patch"],
        width=m["width"],
        embed_dim=m["embed_dim"],
        layers=m["layers"],
        seed=m["seed"],
        logit_scale=cfg.run.logit_scale,
    )


def adapt(model: DualEncoder, run: RunConfig) -> AdapterRegistry:
    return inject_adapters(model, run.lora_config("vision"), {"text": run.lora_config("text")})


# ------------------------------------------------------------------ shots


def shot_filename(k: int, seed: int) -> str:
    return f"shots_k{k}_seed{seed}.json"


def shots_document(manifest: DatasetManifest, support: SupportSet, k: int, seed: int) -> dict:
    return {"dataset": manifest.name, "k": k, "seed": seed, "sample_ids": [s.id for s in support.samples]}


def load_support(manifest: DatasetManifest, shots_path, classes: Sequence[str] | None = None) -> SupportSet:
    doc = json.loads(Path(shots_path).read_text())
    index = manifest.by_id()
    missing = [i for i in doc["sample_ids"] if i not in index]
    if missing:
        raise DataError(f"{shots_path}: unknown sample ids {missing[:5]}")
    samples = [index[i] for i in doc["sample_ids"]]
    names = list(manifest.class_names)
    if classes is not None:
        keep = {names.index(c) for c in classes}
        samples = [s for s in samples if s.label in keep]
        names = list(classes)
    return SupportSet(names, samples)


def default_support(cfg: Config, manifest: DatasetManifest, shots_path=None, classes=None) -> SupportSet:
    if shots_path:
        return load_support(manifest, shots_path, classes)
    idx = None if classes is None else [manifest.class_names.index(c) for c in classes]
    support = sample_k_shot(manifest, ShotSpec(cfg.run.k_shots, cfg.run.seed), idx)
    if classes is not None:
        support = SupportSet(list(classes), support.samples)
    return support


def carve_validation(support: SupportSet, fraction: float) -> tuple[SupportSet, list[Sample]]:
    """Hold out ``max(1, round(fraction * K))`` shots per class; classes with one shot keep it."""
    if fraction <= 0:
        return support, []
    train_s, val_s = [], []
    for _, members in sorted(support.by_class().items()):
        n_val = max(1, round(fraction * len(members))) if len(members) > 1 else 0
        cut = len(members) - n_val
        train_s.extend(members[:cut])
        val_s.extend(members[cut:])
    return SupportSet(support.class_names, train_s), val_s


# ------------------------------------------------------------- generation


def make_backend(spec: str, cfg: Config, class_names):
    """``mock`` or ``external:<command>``; returns (captioner, generator)."""
    if spec == "mock":
        return MockCaptioner(class_names), MockGenerator(cfg.model["channels"], cfg.sap["caption_stamp"])
    if spec.startswith("external:"):
        ext = ExternalProcessBackend(spec[len("external:"):], sampler_steps=cfg.run.sampler_steps)
        return ext, ext
    raise InputError(f"unknown backend {spec!r}; use 'mock' or 'external:<command>'")


def sap_config(cfg: Config, k_syn: int | None = None) -> SapConfig:
    r, s = cfg.run, cfg.sap
    return SapConfig(
        k_syn=k_syn or r.k_syn,
        noising_step=r.noising_step,
        sampler_steps=r.sampler_steps,
        guidance_scale=r.guidance_scale,
        attempt_factor=s["attempt_factor"],
        retries=s["retries"],
        seed=r.seed,
        negative_prompt=s["negative_prompt"],
        workers=s["workers"],
    )


def make_filter(cfg: Config, manifest: DatasetManifest, support: SupportSet, root=None):
    kind = cfg.sap["filter"]
    if kind == "none":
        return lambda samples: ([replace(s, kept=True) for s in samples], [])
    embed = build_model(cfg, manifest)
    if kind == "prototype":
        clf = prototype_classifier(embed, support, root)
    else:
        clf = build_zero_shot_classifier(embed, support.class_names, cfg.run.prompt_template)
    return make_zero_shot_filter(clf, embed)


# ---------------------------------------------------------------- training


def load_synthetic(path, class_names_full: Sequence[str], classes: Sequence[str] | None = None) -> list[SyntheticSample]:
    samples = [s for s in read_manifest(path, load_images=True) if s.kept]
    for s in samples:
        if s.class_name and s.class_name != class_names_full[s.label]:
            raise FormatError(f"{path}: sample {s.id} class {s.class_name!r} does not match the dataset")
    if classes is not None:
        samples = [s for s in samples if class_names_full[s.label] in classes]
    return samples


def run_training(cfg: Config, manifest: DatasetManifest, support: SupportSet, synthetic=(), out_dir=None, use_val: bool = True) -> tuple[DualEncoder, TrainResult]:
    """Inject adapters into a fresh model and train on support (+ synthetic)."""
    run = cfg.run
    root = manifest.root
    val_items = []
    if use_val:
        val_items = [s for s in manifest.split("val") if s.label < len(support.class_names)]
        if not val_items:
            support, val_items = carve_validation(support, run.val_fraction)
    model = build_model(cfg, manifest)
    registry = adapt(model, run)
    loader = make_loader(support, synthetic, run.batch_size, get_augment(run.augmentation), run.seed, root)
    validate = None
    if val_items:
        v_imgs = np.stack([s.load(root) for s in val_items])
        v_labels = [s.label for s in val_items]
        validate = lambda m: top1(predict(m, v_imgs, support.class_names, run.prompt_template), v_labels)
    result = train(model, registry, loader, support.class_names, run, validate=validate, out_dir=out_dir)
    return model, result


def load_trained(cfg: Config, manifest: DatasetManifest, checkpoint=None) -> DualEncoder:
    model = build_model(cfg, manifest)
    if checkpoint is not None:
        registry = adapt(model, cfg.run)
        load_adapters(registry, checkpoint)
    return model.eval()


def split_classes(manifest: DatasetManifest, protocol: str):
    if protocol == "base_new":
        return base_new_split(manifest)
    return list(manifest.class_names), []
