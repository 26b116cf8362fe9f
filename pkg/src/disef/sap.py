"""Synthetic augmentation: caption, noise, regenerate with a sibling caption, filter.

For every class the pipeline repeatedly picks a random support image, encodes it
into the generator's latent space, noises it up to the configured start index of
the sampler, denoises it conditioned on the caption of a *different* support
image of the same class, decodes, and keeps the result only if a zero-shot
classifier assigns it to the intended class.  This repeats until ``k_syn``
samples per class are kept or the attempt cap is hit.

Backends (captioner, latent codec, denoiser) are pluggable.  Deterministic mocks
ship here; ``ExternalProcessBackend`` speaks JSON lines over a subprocess' stdio
for real models.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .data import Sample, SupportSet
from .errors import BackendError, FormatError, GenerationExhaustedError, InputError
from .vlm_core import ZeroShotClassifier, l2_normalize

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "disef.synthetic/1"
LATENT_CHANNELS = 4
LATENT_DOWNSAMPLE = 8


# ------------------------------------------------------------------ noising


@dataclass(frozen=True)
class NoiseSchedule:
    """Scaled-linear beta schedule (latent-diffusion default)."""

    num_train_timesteps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012

    @cached_property
    def alphas_cumprod(self) -> np.ndarray:
        betas = np.linspace(self.beta_start**0.5, self.beta_end**0.5, self.num_train_timesteps) ** 2
        return np.cumprod(1.0 - betas)

    def timestep(self, n_s: int, total: int) -> int | None:
        """Training timestep at sampler index ``n_s`` of ``total``; ``None`` means no noise.

        Starting at index ``n_s`` leaves ``total - n_s`` sampler steps, i.e. the
        fraction ``(total - n_s) / total`` of the noising schedule is applied.
        """
        if not 0 <= n_s <= total:
            raise InputError(f"noising step {n_s} outside [0, {total}]")
        if n_s == total:
            return None
        return (total - n_s) * self.num_train_timesteps // total - 1

    def signal_level(self, n_s: int, total: int) -> float:
        t = self.timestep(n_s, total)
        return 1.0 if t is None else float(self.alphas_cumprod[t])

    def noised_fraction(self, n_s: int, total: int) -> float:
        t = self.timestep(n_s, total)
        return 0.0 if t is None else (t + 1) / self.num_train_timesteps


def noise_latent(z: np.ndarray, n_s: int, total: int, schedule: NoiseSchedule | None = None, rng=None) -> np.ndarray:
    """``sqrt(abar) * z + sqrt(1 - abar) * eps`` at the start index ``n_s``."""
    schedule = schedule or NoiseSchedule()
    abar = schedule.signal_level(n_s, total)
    z = np.asarray(z)
    if abar == 1.0:
        return z.copy()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    eps = rng.standard_normal(z.shape)
    return (np.sqrt(abar) * z + np.sqrt(1.0 - abar) * eps).astype(z.dtype)


# ---------------------------------------------------------------- data types


@dataclass
class CaptionSet:
    by_class: dict[int, list[tuple[str, str]]] = field(default_factory=dict)

    def __len__(self):
        return sum(len(v) for v in self.by_class.values())

    def caption_of(self, sample_id: str) -> str:
        for entries in self.by_class.values():
            for sid, text in entries:
                if sid == sample_id:
                    return text
        raise KeyError(sample_id)


@dataclass
class GenerationJob:
    source_sample_id: str
    source_class: int
    caption_sample_id: str
    caption_text: str
    noising_step: int
    seed: int
    guidance_scale: float = 8.0
    sampler_steps: int = 20
    job_index: int = 0
    negative_prompt: str = ""

    def __post_init__(self):
        if not 0 <= self.noising_step <= self.sampler_steps:
            raise InputError(f"noising step {self.noising_step} outside [0, {self.sampler_steps}]")


@dataclass
class SyntheticSample:
    id: str
    label: int
    class_name: str
    job: GenerationJob
    image: np.ndarray | None = field(default=None, repr=False)
    filter_score: float | None = None
    kept: bool | None = None
    image_path: str | None = None


# ----------------------------------------------------------------- backends


class Captioner(Protocol):
    name: str

    def caption(self, sample: Sample, image: np.ndarray) -> str: ...


class GeneratorBackend(Protocol):
    def latent_encode(self, image: np.ndarray) -> np.ndarray: ...

    def latent_decode(self, latent: np.ndarray) -> np.ndarray: ...

    def denoise(self, latent: np.ndarray, caption: str, start: int, guidance_scale: float, seed: int, negative_prompt: str = "") -> np.ndarray: ...


class MockCaptioner:
    name = "mock-captioner"

    def __init__(self, class_names: Sequence[str] | None = None):
        self.class_names = class_names
        self.calls = 0

    def caption(self, sample, image):
        self.calls += 1
        label = self.class_names[sample.label] if self.class_names else sample.label
        return f"class:{label} id:{sample.id}"


def _text_noise(text: str, shape) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(shape)


class MockGenerator:
    """Deterministic stand-in for a latent-diffusion img2img backend.

    Latents are ``LATENT_CHANNELS`` x (H/8) x (W/8) block means of the image.  The
    denoiser returns its input plus ``caption_stamp`` times a caption-seeded
    pattern, so outputs depend on the caption but never on wall-clock order.
    """

    name = "mock-generator"

    def __init__(self, image_channels: int = 3, caption_stamp: float = 0.0, downsample: int = LATENT_DOWNSAMPLE):
        if image_channels > LATENT_CHANNELS:
            raise InputError(f"mock codec supports at most {LATENT_CHANNELS} image channels")
        self.image_channels = image_channels
        self.caption_stamp = caption_stamp
        self.downsample = downsample

    def latent_encode(self, image):
        image = np.asarray(image, dtype=np.float32)
        c, h, w = image.shape
        f = self.downsample
        if h % f or w % f:
            raise InputError(f"image size {h}x{w} not divisible by {f}")
        pooled = image.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))
        latent = np.zeros((LATENT_CHANNELS, h // f, w // f), dtype=np.float32)
        latent[:c] = pooled
        latent[c:] = pooled.mean(axis=0)
        return latent

    def latent_decode(self, latent):
        f = self.downsample
        img = np.asarray(latent[: self.image_channels], dtype=np.float32)
        return img.repeat(f, axis=1).repeat(f, axis=2)

    def denoise(self, latent, caption, start, guidance_scale, seed, negative_prompt=""):
        out = np.asarray(latent, dtype=np.float32)
        if self.caption_stamp:
            out = out + (self.caption_stamp * _text_noise(caption, out.shape)).astype(np.float32)
        return out


def _jsonable_array(a: np.ndarray):
    return {"shape": list(a.shape), "data": np.asarray(a, dtype=np.float64).ravel().tolist()}


def _from_jsonable(obj) -> np.ndarray:
    if isinstance(obj, dict):
        return np.asarray(obj["data"], dtype=np.float32).reshape(obj["shape"])
    return np.asarray(obj, dtype=np.float32)


class ExternalProcessBackend:
    """Generator + captioner backed by a subprocess speaking JSON lines on stdio.

    Each request is one JSON object per line with an ``op`` field; each response
    is one JSON object per line.  Arrays travel as ``{"shape": [...], "data":
    [...]}`` (row-major) and images can alternatively be exchanged as ``.npy``
    paths.

    ==========  =============================================================  ==========================
    op          request fields                                                 response
    ==========  =============================================================  ==========================
    caption     image_path, sample_id                                          {"caption": str}
    encode      image_path                                                     {"latent": array}
    denoise     latent, caption, start_index, guidance_scale, seed,            {"latent": array}
                negative_prompt, sampler_steps
    decode      latent                                                         {"image": array} or
                                                                               {"image_path": str}
    ==========  =============================================================  ==========================

    A response ``{"error": msg}`` raises ``BackendError``.
    """

    def __init__(self, command: Sequence[str] | str, sampler_steps: int = 20, timeout: float | None = 600.0):
        self.command = command.split() if isinstance(command, str) else list(command)
        self.name = f"external:{' '.join(self.command)}"
        self.sampler_steps = sampler_steps
        self.timeout = timeout
        self._proc = None
        self._tmp = tempfile.TemporaryDirectory(prefix="disef-ext-")

    def _ensure(self):
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1)
            except OSError as exc:
                raise BackendError(f"cannot start backend {self.command}: {exc}") from exc
        return self._proc

    def request(self, payload: dict) -> dict:
        proc = self._ensure()
        try:
            proc.stdin.write(json.dumps(payload) + "\n")
            proc.stdin.flush()
            line = proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise BackendError(f"backend pipe failed: {exc}") from exc
        if not line:
            raise BackendError(f"backend exited (code {proc.poll()})")
        try:
            resp = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BackendError(f"backend sent malformed JSON: {line[:200]!r}") from exc
        if "error" in resp:
            raise BackendError(str(resp["error"]))
        return resp

    def _image_path(self, image) -> str:
        fd, path = tempfile.mkstemp(suffix=".npy", dir=self._tmp.name)
        os.close(fd)
        np.save(path, np.asarray(image, dtype=np.float32))
        return path

    def caption(self, sample, image):
        path = sample.path if sample.path and sample.image is None else self._image_path(image)
        return self.request({"op": "caption", "image_path": str(path), "sample_id": sample.id})["caption"]

    def latent_encode(self, image):
        return _from_jsonable(self.request({"op": "encode", "image_path": self._image_path(image)})["latent"])

    def denoise(self, latent, caption, start, guidance_scale, seed, negative_prompt=""):
        resp = self.request(
            {
                "op": "denoise",
                "latent": _jsonable_array(latent),
                "caption": caption,
                "start_index": int(start),
                "guidance_scale": float(guidance_scale),
                "seed": int(seed),
                "negative_prompt": negative_prompt,
                "sampler_steps": self.sampler_steps,
            }
        )
        return _from_jsonable(resp["latent"])

    def latent_decode(self, latent):
        resp = self.request({"op": "decode", "latent": _jsonable_array(latent)})
        if "image_path" in resp:
            return np.load(resp["image_path"]).astype(np.float32)
        return _from_jsonable(resp["image"])

    def close(self):
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
        self._tmp.cleanup()


# --------------------------------------------------------------- captioning


def _cache_key(dataset: str, sample_id: str, captioner_id: str) -> str:
    return hashlib.sha256(json.dumps([dataset, sample_id, captioner_id]).encode()).hexdigest()


def caption_support_set(captioner, support: SupportSet, cache_dir: str | Path | None = None, dataset: str = "", root=None, retries: int = 2) -> CaptionSet:
    """One caption per support sample, cached on disk by (dataset, sample id, captioner)."""
    if not support.samples:
        raise InputError("support set is empty")
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    out = CaptionSet({c: [] for c in range(len(support.class_names))})
    for s in support.samples:
        path = cache / f"{_cache_key(dataset, s.id, captioner.name)}.json" if cache else None
        if path is not None and path.exists():
            text = json.loads(path.read_text())["caption"]
        else:
            text = _with_retries(lambda: captioner.caption(s, s.load(root)), retries)
            if not isinstance(text, str) or not text.strip():
                raise BackendError(f"captioner returned an empty caption for {s.id!r}")
            if path is not None:
                path.write_text(json.dumps({"sample_id": s.id, "captioner": captioner.name, "caption": text}))
        out.by_class.setdefault(s.label, []).append((s.id, text))
    return out


def _with_retries(fn, retries):
    for attempt in range(retries + 1):
        try:
            return fn()
        except BackendError as exc:
            if attempt == retries or not exc.retryable:
                raise
            log.warning("backend call failed (%s); retry %d/%d", exc, attempt + 1, retries)


def pick_cross_caption(captions: CaptionSet, label: int, source_id: str, rng: np.random.Generator) -> tuple[str, str]:
    """Uniform draw over the class's captions other than the source's own.

    A single-sample class has only its own caption, which is returned.
    """
    if label not in captions.by_class or not captions.by_class[label]:
        raise InputError(f"no captions for class {label!r}")
    entries = captions.by_class[label]
    others = [e for e in entries if e[0] != source_id]
    pool = others or entries
    return pool[int(rng.integers(len(pool)))]


# --------------------------------------------------------------- generation


@dataclass
class SapConfig:
    k_syn: int = 64
    noising_step: int = 15
    sampler_steps: int = 20
    guidance_scale: float = 8.0
    attempt_factor: int = 20
    retries: int = 2
    seed: int = 0
    negative_prompt: str = ""
    workers: int = 1

    def __post_init__(self):
        if self.k_syn < 1:
            raise InputError("k_syn must be >= 1")
        if not 0 <= self.noising_step <= self.sampler_steps:
            raise InputError(f"noising_step must lie in [0, {self.sampler_steps}]")

    @property
    def attempt_cap(self) -> int:
        return self.attempt_factor * self.k_syn


def generate_one(backend: GeneratorBackend, job: GenerationJob, source_image: np.ndarray, schedule: NoiseSchedule | None = None, class_name: str = "") -> SyntheticSample:
    z = backend.latent_encode(source_image)
    z_t = noise_latent(z, job.noising_step, job.sampler_steps, schedule, np.random.default_rng(job.seed))
    z_hat = backend.denoise(z_t, job.caption_text, job.noising_step, job.guidance_scale, job.seed, job.negative_prompt)
    image = np.asarray(backend.latent_decode(z_hat), dtype=np.float32)
    return SyntheticSample(
        id=f"syn-{job.source_class:04d}-{job.job_index:06d}",
        label=job.source_class,
        class_name=class_name,
        job=job,
        image=image,
    )


def filter_synthetic(samples: Sequence[SyntheticSample], classifier: ZeroShotClassifier, embed_model, batch_size: int = 256):
    """Split samples into (kept, rejected) by zero-shot argmax over L2-normalized features.

    ``sample.label`` indexes the classifier rows.  ``filter_score`` is the cosine
    to the intended class.
    """
    n = len(classifier.class_names)
    for s in samples:
        if not 0 <= s.label < n:
            raise InputError(f"class {s.label!r} not covered by the filter classifier")
    kept, rejected = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        with torch.no_grad():
            images = torch.from_numpy(np.stack([s.image for s in chunk]))
            feats = l2_normalize(embed_model.encode_images(images))
            scores = (feats @ classifier.weights.to(feats.dtype).T).cpu().numpy()
        for s, row in zip(chunk, scores):
            ok = int(np.argmax(row)) == s.label
            out = replace(s, filter_score=float(row[s.label]), kept=ok)
            (kept if ok else rejected).append(out)
    return kept, rejected


def make_zero_shot_filter(classifier: ZeroShotClassifier, embed_model) -> Callable:
    return lambda samples: filter_synthetic(samples, classifier, embed_model)


def prototype_classifier(embed_model, support: SupportSet, root=None) -> ZeroShotClassifier:
    """Classifier whose rows are normalized mean support-image embeddings.

    Used with mock backends, whose toy text tower has no grounding to filter with.
    """
    with torch.no_grad():
        rows = []
        for c, members in sorted(support.by_class().items()):
            imgs = torch.from_numpy(np.stack([np.asarray(m.load(root), dtype=np.float32) for m in members]))
            rows.append(l2_normalize(embed_model.encode_images(imgs)).mean(dim=0))
        weights = l2_normalize(torch.stack(rows))
    return ZeroShotClassifier(weights, list(support.class_names), "<prototype>")


def _plan_job(label, members, captions, cfg: SapConfig, attempt: int) -> GenerationJob:
    rng = np.random.default_rng([cfg.seed, label, attempt])
    source = members[int(rng.integers(len(members)))]
    j, text = pick_cross_caption(captions, label, source.id, rng)
    return GenerationJob(
        source_sample_id=source.id,
        source_class=label,
        caption_sample_id=j,
        caption_text=text,
        noising_step=cfg.noising_step,
        seed=int(rng.integers(2**31 - 1)),
        guidance_scale=cfg.guidance_scale,
        sampler_steps=cfg.sampler_steps,
        job_index=attempt,
        negative_prompt=cfg.negative_prompt,
    )


def generate_class_set(
    label: int,
    support: SupportSet,
    captions: CaptionSet,
    backend: GeneratorBackend,
    filter_fn: Callable,
    cfg: SapConfig,
    schedule: NoiseSchedule | None = None,
    root=None,
) -> list[SyntheticSample]:
    """Generate until ``cfg.k_syn`` samples of class ``label`` survive the filter.

    Attempt ``a`` draws its source image, caption and noise seed from
    ``default_rng([seed, label, a])``; with ``workers > 1`` attempts run in waves
    but the kept set is always the first ``k_syn`` survivors in attempt order.
    Raises ``GenerationExhaustedError`` (carrying the partial set) after
    ``attempt_factor * k_syn`` attempts.
    """
    members = [s for s in support.samples if s.label == label]
    if not members:
        raise InputError(f"class {label!r} has no support samples")
    images = {s.id: np.asarray(s.load(root), dtype=np.float32) for s in members}
    name = support.class_names[label]

    def attempt(a):
        job = _plan_job(label, members, captions, cfg, a)
        sample = _with_retries(lambda: generate_one(backend, job, images[job.source_sample_id], schedule, name), cfg.retries)
        kept, _ = filter_fn([sample])
        return kept[0] if kept else None

    kept: list[SyntheticSample] = []
    wave = max(1, cfg.workers)
    pool = ThreadPoolExecutor(wave) if wave > 1 else None
    try:
        for start in range(0, cfg.attempt_cap, wave):
            idx = range(start, min(start + wave, cfg.attempt_cap))
            results = list(pool.map(attempt, idx)) if pool else [attempt(a) for a in idx]
            for r in results:
                if r is not None and len(kept) < cfg.k_syn:
                    kept.append(r)
            if len(kept) >= cfg.k_syn:
                return kept
    finally:
        if pool:
            pool.shutdown()
    raise GenerationExhaustedError(name, kept, cfg.k_syn, cfg.attempt_cap)


def run_sap(support: SupportSet, captions: CaptionSet, backend, filter_fn, cfg: SapConfig, schedule=None, root=None, on_partial=None) -> list[SyntheticSample]:
    """All classes; on exhaustion ``on_partial(samples)`` is called before re-raising."""
    out: list[SyntheticSample] = []
    for label in range(len(support.class_names)):
        try:
            out.extend(generate_class_set(label, support, captions, backend, filter_fn, cfg, schedule, root))
        except GenerationExhaustedError as exc:
            out.extend(exc.kept)
            if on_partial is not None:
                on_partial(out)
            raise
    return out


# ---------------------------------------------------------------- manifests


def _sample_record(s: SyntheticSample) -> dict:
    return {
        "schema_version": MANIFEST_SCHEMA,
        "id": s.id,
        "class": s.class_name,
        "label": s.label,
        "source_id": s.job.source_sample_id,
        "caption_source_id": s.job.caption_sample_id,
        "caption_text": s.job.caption_text,
        "noising_step": s.job.noising_step,
        "sampler_steps": s.job.sampler_steps,
        "guidance_scale": s.job.guidance_scale,
        "seed": s.job.seed,
        "job_index": s.job.job_index,
        "negative_prompt": s.job.negative_prompt,
        "filter_score": s.filter_score,
        "kept": s.kept,
        "image_path": s.image_path,
        "latent_channels": LATENT_CHANNELS,
        "latent_downsample": LATENT_DOWNSAMPLE,
    }


def write_manifest(samples: Sequence[SyntheticSample], path: str | Path, image_dir: str | Path | None = None):
    """Write samples as JSON lines sorted by (class, job index); atomic via rename.

    Samples holding an in-memory image and no ``image_path`` get it saved as
    ``<image_dir>/<id>.npy`` (default ``images/`` next to the manifest), stored
    relative to the manifest's directory.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image_dir = Path(image_dir) if image_dir is not None else path.parent / "images"
    lines = []
    for s in sorted(samples, key=lambda s: (s.label, s.job.job_index, s.id)):
        if s.image_path is None and s.image is not None:
            image_dir.mkdir(parents=True, exist_ok=True)
            dest = image_dir / f"{s.id}.npy"
            np.save(dest, s.image)
            s.image_path = os.path.relpath(dest, path.parent)
        lines.append(json.dumps(_sample_record(s), sort_keys=True))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines))
    os.replace(tmp, path)


def read_manifest(path: str | Path, load_images: bool = False) -> list[SyntheticSample]:
    path = Path(path)
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{n}: invalid JSON") from exc
        if rec.get("schema_version") != MANIFEST_SCHEMA:
            raise FormatError(f"{path}:{n}: schema version {rec.get('schema_version')!r} != {MANIFEST_SCHEMA!r}")
        job = GenerationJob(
            source_sample_id=rec["source_id"],
            source_class=rec["label"],
            caption_sample_id=rec["caption_source_id"],
            caption_text=rec["caption_text"],
            noising_step=rec["noising_step"],
            seed=rec["seed"],
            guidance_scale=rec["guidance_scale"],
            sampler_steps=rec["sampler_steps"],
            job_index=rec.get("job_index", 0),
            negative_prompt=rec.get("negative_prompt", ""),
        )
        s = SyntheticSample(rec["id"], rec["label"], rec["class"], job, None, rec["filter_score"], rec["kept"], rec["image_path"])
        if load_images and s.image_path is not None:
            s.image = np.load(path.parent / s.image_path)
        out.append(s)
    return out


def job_dict(job: GenerationJob) -> dict:
    return asdict(job)
